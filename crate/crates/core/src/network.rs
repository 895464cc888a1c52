//! Mixed attention blocks and the U-shaped denoiser built from them.
//!
//! A block is a 3-D convolution followed by spectral attention and channel
//! attention, each added back onto its input (`F + MHRSA(F)`, then
//! `G + PSCA(G)`); it never changes the band count. The encoder is a stem block
//! plus one spatially strided block per level, a bottleneck block follows,
//! and the decoder mirrors the encoder with transposed convolutions, fusing
//! the encoder feature of matching depth after every upsampling. A final
//! convolution projects back to one channel.

use std::fmt::{self, Display};
use std::str::FromStr;

use rand::{Rng, SeedableRng};

use crate::asc::{additive_fuse, asc_fuse, concat_fuse, AscParams, AscVars};
use crate::error::{bail, Error, Result};
use crate::hsidata::HsiCube;
use crate::kv::KvText;
use crate::mhrsa::{mhrsa_forward, MhrsaParams, MhrsaVars};
use crate::ops::{Activation, Conv3dGeometry, DEFAULT_LEAKY_SLOPE};
use crate::params::{join, uniform, ModelParams, ParamVars};
use crate::psca::{psca_forward, PscaParams, PscaVars};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const CHANNEL_AXIS: usize = 1;
const KERNEL: usize = 3;
const SAME: Conv3dGeometry = Conv3dGeometry { stride: [1; 3], padding: [1; 3] };
const DOWN: Conv3dGeometry = Conv3dGeometry { stride: [1, 2, 2], padding: [1; 3] };
const UP_OUTPUT_PADDING: [usize; 3] = [0, 1, 1];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SkipKind {
    Attentive,
    Additive,
    Concat,
}

impl Display for SkipKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SkipKind::Attentive => "attentive",
            SkipKind::Additive => "additive",
            SkipKind::Concat => "concat",
        })
    }
}

impl FromStr for SkipKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attentive" => Ok(SkipKind::Attentive),
            "additive" => Ok(SkipKind::Additive),
            "concat" => Ok(SkipKind::Concat),
            _ => bail!(Config, "unknown skip kind {s:?}"),
        }
    }
}

/// Architecture of one network instance.
///
/// `widths[i]` is the channel count at depth `i`; there are
/// `widths.len() - 1` downsampling levels. With `mhrsa` off a block applies a
/// leaky ReLU after its convolution instead, which gives the plain
/// convolutional baseline.
#[derive(Clone, Debug, PartialEq)]
pub struct ManConfig {
    pub variant: String,
    pub bands: usize,
    pub widths: Vec<usize>,
    pub skip: SkipKind,
    pub mhrsa: bool,
    pub psca: bool,
    /// Predict the noise and subtract it from the input instead of
    /// predicting the clean cube directly.
    pub residual: bool,
    pub leaky_slope: f64,
}

const CONFIG_KEYS: [&str; 8] =
    ["variant", "bands", "widths", "skip", "mhrsa", "psca", "residual", "leaky_slope"];

impl ManConfig {
    pub fn new(variant: &str, bands: usize, widths: Vec<usize>) -> Result<Self> {
        let cfg = ManConfig {
            variant: variant.to_string(),
            bands,
            widths,
            skip: SkipKind::Attentive,
            mhrsa: true,
            psca: true,
            residual: false,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Named presets. `tiny` is the desk-scale model used for quick training
    /// and full gradient checks.
    pub fn variant(name: &str, bands: usize) -> Result<Self> {
        let widths = match name {
            "tiny" => vec![4, 8, 16],
            "S" => vec![20, 40, 80],
            "M" => vec![26, 52, 104],
            "L" => vec![32, 64, 128],
            _ => bail!(Config, "unknown variant {name:?}, expected S, M, L or tiny"),
        };
        ManConfig::new(name, bands, widths)
    }

    pub fn levels(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.bands == 0 {
            bail!(Config, "band count must be positive");
        }
        if self.widths.len() < 2 {
            bail!(Config, "need at least one downsampling level (two widths)");
        }
        if let Some(w) = self.widths.iter().find(|&&w| w == 0 || w % 2 != 0) {
            bail!(Config, "widths must be positive and even, got {w}");
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0) {
            bail!(Config, "leaky slope must be finite and non-negative");
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvText {
        let mut kv = KvText::new();
        kv.set("variant", &self.variant);
        kv.set("bands", self.bands);
        kv.set_list("widths", &self.widths);
        kv.set("skip", self.skip);
        kv.set("mhrsa", self.mhrsa);
        kv.set("psca", self.psca);
        kv.set("residual", self.residual);
        kv.set("leaky_slope", self.leaky_slope);
        kv
    }

    pub fn from_kv(kv: &KvText) -> Result<Self> {
        kv.reject_unknown(&CONFIG_KEYS)?;
        let cfg = ManConfig {
            variant: kv.get_or("variant", "custom".to_string())?,
            bands: kv.require("bands")?,
            widths: kv.get_list("widths")?.ok_or_else(|| Error::Config("missing key widths".into()))?,
            skip: kv.get_or("skip", SkipKind::Attentive)?,
            mhrsa: kv.get_or("mhrsa", true)?,
            psca: kv.get_or("psca", true)?,
            residual: kv.get_or("residual", false)?,
            leaky_slope: kv.get_or("leaky_slope", DEFAULT_LEAKY_SLOPE)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Spatial extents must be divisible by this factor.
    pub fn spatial_multiple(&self) -> usize {
        1 << self.levels()
    }

    fn activation(&self) -> Activation {
        Activation::LeakyRelu(self.leaky_slope)
    }
}

/// Role of a block inside the network, which fixes its convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    /// Stride-1 convolution, same padding.
    Same,
    /// Stride 2 along both spatial axes.
    Down,
    /// Transposed convolution doubling both spatial extents.
    Up,
}

fn conv_bound(fan_in: usize) -> f64 {
    (3.0 / fan_in as f64).sqrt()
}

/// Parameters of one block mapping `c_in` to `c_out` channels.
pub fn mab_params<T: Real>(
    kind: BlockKind,
    c_in: usize,
    c_out: usize,
    cfg: &ManConfig,
    prefix: &str,
    rng: &mut impl Rng,
) -> Vec<(String, Tensor<T>)> {
    let taps = KERNEL * KERNEL * KERNEL;
    let conv_w = match kind {
        BlockKind::Up => uniform([c_in, c_out, KERNEL, KERNEL, KERNEL], conv_bound(c_in * taps / 4), rng),
        _ => uniform([c_out, c_in, KERNEL, KERNEL, KERNEL], conv_bound(c_in * taps), rng),
    };
    let mut named = vec![(join(prefix, "conv_w"), conv_w), (join(prefix, "conv_b"), Tensor::zeros([c_out]))];
    if cfg.mhrsa {
        named.extend(MhrsaParams::<T>::init(c_out, rng).named(&join(prefix, "mhrsa")));
    }
    if cfg.psca {
        named.extend(PscaParams::<T>::init(c_out, rng).named(&join(prefix, "psca")));
    }
    named
}

/// Block output and, when spectral attention is on, its merging gates.
#[derive(Clone, Copy, Debug)]
pub struct MabOutput {
    pub output: Var,
    pub gates: Option<Var>,
}

pub fn mab_forward<T: Real>(
    tape: &mut Tape<T>,
    f: Var,
    vars: &ParamVars,
    prefix: &str,
    kind: BlockKind,
    cfg: &ManConfig,
) -> Result<MabOutput> {
    let w = vars.get(&join(prefix, "conv_w"))?;
    let b = vars.get(&join(prefix, "conv_b"))?;
    let x = match kind {
        BlockKind::Same => tape.conv3d(f, w, SAME)?,
        BlockKind::Down => tape.conv3d(f, w, DOWN)?,
        BlockKind::Up => tape.conv_transpose3d(f, w, DOWN, UP_OUTPUT_PADDING)?,
    };
    let mut x = tape.add_bias(x, b, CHANNEL_AXIS)?;
    let mut gates = None;
    if cfg.mhrsa {
        let m = mhrsa_forward(tape, x, &MhrsaVars::lookup(vars, &join(prefix, "mhrsa"))?)?;
        x = tape.add(x, m.output)?;
        gates = Some(m.gates);
    } else {
        x = tape.activation(x, cfg.activation())?;
    }
    if cfg.psca {
        let y = psca_forward(tape, x, &PscaVars::lookup(vars, &join(prefix, "psca"))?)?;
        x = tape.add(x, y)?;
    }
    Ok(MabOutput { output: x, gates })
}

fn enc_name(level: usize) -> String {
    format!("enc{level}")
}

fn dec_name(level: usize) -> String {
    format!("dec{level}")
}

fn skip_name(level: usize) -> String {
    format!("skip{level}")
}

/// Fresh parameters for `cfg`.
pub fn init_params<T: Real>(cfg: &ManConfig, rng: &mut impl Rng) -> Result<ModelParams<T>> {
    cfg.validate()?;
    let w = &cfg.widths;
    let top = *w.last().expect("validated");
    let mut p = ModelParams::new();
    p.extend(mab_params(BlockKind::Same, 1, w[0], cfg, "stem", rng))?;
    for l in 0..cfg.levels() {
        p.extend(mab_params(BlockKind::Down, w[l], w[l + 1], cfg, &enc_name(l + 1), rng))?;
    }
    p.extend(mab_params(BlockKind::Same, top, top, cfg, "mid", rng))?;
    for l in (0..cfg.levels()).rev() {
        p.extend(mab_params(BlockKind::Up, w[l + 1], w[l], cfg, &dec_name(l), rng))?;
        let c = w[l];
        let prefix = skip_name(l);
        match cfg.skip {
            SkipKind::Attentive => p.extend(AscParams::<T>::init(c, rng).named(&prefix))?,
            SkipKind::Additive => {}
            SkipKind::Concat => {
                let b = conv_bound(2 * c);
                p.insert(join(&prefix, "w"), uniform([c, 2 * c, 1, 1, 1], b, rng))?;
                p.insert(join(&prefix, "b"), Tensor::zeros([c]))?;
            }
        }
    }
    p.insert("out.conv_w", uniform([1, w[0], KERNEL, KERNEL, KERNEL], conv_bound(w[0] * 27), rng))?;
    p.insert("out.conv_b", Tensor::zeros([1]))?;
    Ok(p)
}

/// Named gate tensors recorded during a forward pass.
#[derive(Clone, Debug)]
pub struct ManOutput {
    pub output: Var,
    /// Spectral merging gates per block, in execution order.
    pub mhrsa_gates: Vec<(String, Var)>,
    /// Skip gates per depth level, deepest first.
    pub asc_gates: Vec<(String, Var)>,
}

/// Full network on `(B, 1, S, H, W)`; `H` and `W` must be divisible by
/// [`ManConfig::spatial_multiple`].
pub fn man_forward<T: Real>(tape: &mut Tape<T>, x: Var, vars: &ParamVars, cfg: &ManConfig) -> Result<ManOutput> {
    let [_, c, _, h, w] = tape.value(x).dims5()?;
    if c != 1 {
        bail!(Dimension, "network input must have one channel, got {c}");
    }
    let m = cfg.spatial_multiple();
    if h % m != 0 || w % m != 0 {
        bail!(Geometry, "spatial extents {h}x{w} must be divisible by {m}");
    }
    let mut out = ManOutput { output: x, mhrsa_gates: Vec::new(), asc_gates: Vec::new() };
    let record = |out: &mut ManOutput, name: String, b: MabOutput| {
        if let Some(g) = b.gates {
            out.mhrsa_gates.push((name, g));
        }
        b.output
    };

    let mut skips = Vec::with_capacity(cfg.levels());
    let stem = mab_forward(tape, x, vars, "stem", BlockKind::Same, cfg)?;
    let mut f = record(&mut out, "stem".into(), stem);
    for l in 0..cfg.levels() {
        skips.push(f);
        let name = enc_name(l + 1);
        let b = mab_forward(tape, f, vars, &name, BlockKind::Down, cfg)?;
        f = record(&mut out, name, b);
    }
    let b = mab_forward(tape, f, vars, "mid", BlockKind::Same, cfg)?;
    f = record(&mut out, "mid".into(), b);
    for l in (0..cfg.levels()).rev() {
        let name = dec_name(l);
        let b = mab_forward(tape, f, vars, &name, BlockKind::Up, cfg)?;
        let d = record(&mut out, name, b);
        let e = skips[l];
        let prefix = skip_name(l);
        f = match cfg.skip {
            SkipKind::Attentive => {
                let a = asc_fuse(tape, d, e, &AscVars::lookup(vars, &prefix)?, cfg.leaky_slope)?;
                out.asc_gates.push((prefix, a.gate));
                a.output
            }
            SkipKind::Additive => additive_fuse(tape, d, e)?,
            SkipKind::Concat => {
                let w = vars.get(&join(&prefix, "w"))?;
                let b = vars.get(&join(&prefix, "b"))?;
                concat_fuse(tape, d, e, w, Some(b))?
            }
        };
    }
    let y = tape.conv3d(f, vars.get("out.conv_w")?, SAME)?;
    let y = tape.add_bias(y, vars.get("out.conv_b")?, CHANNEL_AXIS)?;
    out.output = if cfg.residual { tape.sub(x, y)? } else { y };
    Ok(out)
}

/// A configured network with its weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Man<T> {
    pub config: ManConfig,
    pub params: ModelParams<T>,
}

impl<T: Real> Man<T> {
    pub fn init(config: ManConfig, rng: &mut impl Rng) -> Result<Self> {
        let params = init_params(&config, rng)?;
        Ok(Man { config, params })
    }

    /// [`Man::init`] drawing from a ChaCha8 stream seeded with `seed`.
    pub fn seeded(config: ManConfig, seed: u64) -> Result<Self> {
        Self::init(config, &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    /// Inference on a `(B, 1, S, H, W)` batch without recording gradients.
    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let x = tape.constant(input.clone());
        let out = man_forward(&mut tape, x, &vars, &self.config)?;
        Ok(tape.value(out.output).clone())
    }
}

/// Denoises one cube. Extents not divisible by the model's spatial multiple
/// are reflect-padded at the bottom and right, and the result cropped back.
pub fn denoise_cube<T: Real>(man: &Man<T>, cube: &HsiCube) -> Result<HsiCube> {
    check_bands(man, cube)?;
    let [_, h, w] = cube.dims();
    let padded = pad_to_multiple(cube, man.config.spatial_multiple())?;
    let out = HsiCube::from_tensor(&man.forward(&padded.to_tensor::<T>())?)?;
    out.crop(0, 0, h, w)
}

fn check_bands<T>(man: &Man<T>, cube: &HsiCube) -> Result<()> {
    if cube.bands() != man.config.bands {
        bail!(
            Dimension,
            "cube has {} bands but the model expects {}",
            cube.bands(),
            man.config.bands
        );
    }
    Ok(())
}

fn pad_to_multiple(cube: &HsiCube, m: usize) -> Result<HsiCube> {
    let [s, h, w] = cube.dims();
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    HsiCube::from_fn(s, ph, pw, |b, y, x| cube.get(b, reflect(y, h), reflect(x, w)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateKind {
    /// Merging gates `W` of a spectral attention block.
    Spectral,
    /// Fusion gate `M` of an attentive skip.
    Skip,
}

/// One recorded gate tensor `(1, C, S, H, W)`.
#[derive(Clone, Debug)]
pub struct GateMap<T> {
    pub name: String,
    pub kind: GateKind,
    pub values: Tensor<T>,
}

impl<T: Real> GateMap<T> {
    /// Channel slices stacked along the band axis: band `c * S + s` holds
    /// channel `c`, band `s`.
    pub fn to_cube(&self) -> Result<HsiCube> {
        let [b, c, s, h, w] = self.values.dims5()?;
        if b != 1 {
            bail!(Dimension, "gate export needs batch 1, got {b}");
        }
        HsiCube::from_tensor(&self.values.clone().reshape([1, 1, c * s, h, w])?)
    }
}

/// Gates of every attention in execution order: spectral blocks first, then
/// skips from the deepest level up. The cube is padded as in
/// [`denoise_cube`] and the maps keep the padded extents.
pub fn gate_maps<T: Real>(man: &Man<T>, cube: &HsiCube) -> Result<Vec<GateMap<T>>> {
    check_bands(man, cube)?;
    let padded = pad_to_multiple(cube, man.config.spatial_multiple())?;
    let mut tape = Tape::new();
    let vars = man.params.bind(&mut tape, false);
    let x = tape.constant(padded.to_tensor());
    let out = man_forward(&mut tape, x, &vars, &man.config)?;
    let spectral = out.mhrsa_gates.into_iter().map(|(n, v)| (n, GateKind::Spectral, v));
    let skip = out.asc_gates.into_iter().map(|(n, v)| (n, GateKind::Skip, v));
    Ok(spectral
        .chain(skip)
        .map(|(name, kind, v)| GateMap { name, kind, values: tape.value(v).clone() })
        .collect())
}

/// Mirror index past the end without repeating the edge sample.
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let k = i % period;
    if k < n { k } else { period - k }
}

/// Preset network with fresh weights.
pub fn build_variant<T: Real>(name: &str, bands: usize, rng: &mut impl Rng) -> Result<Man<T>> {
    Man::init(ManConfig::variant(name, bands)?, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn block(kind: BlockKind, c_in: usize, c_out: usize, shape: [usize; 5]) -> Vec<usize> {
        let cfg = ManConfig::variant("tiny", shape[2]).unwrap();
        let mut p = ModelParams::<f64>::new();
        p.extend(mab_params(kind, c_in, c_out, &cfg, "b", &mut rng(1))).unwrap();
        let mut t = Tape::new();
        let vars = p.bind(&mut t, false);
        let x = t.constant(uniform(shape, 1.0, &mut rng(2)));
        let y = mab_forward(&mut t, x, &vars, "b", kind, &cfg).unwrap();
        t.value(y.output).shape().to_vec()
    }

    #[test]
    fn block_geometry() {
        assert_eq!(block(BlockKind::Same, 8, 8, [1, 8, 4, 16, 16]), [1, 8, 4, 16, 16]);
        assert_eq!(block(BlockKind::Down, 8, 16, [1, 8, 4, 16, 16]), [1, 16, 4, 8, 8]);
        assert_eq!(block(BlockKind::Up, 16, 8, [1, 16, 4, 8, 8]), [1, 8, 4, 16, 16]);
    }

    #[test]
    fn network_preserves_shape_for_all_skips_and_degenerate_bands() {
        for skip in [SkipKind::Attentive, SkipKind::Additive, SkipKind::Concat] {
            for s in [1, 3] {
                let mut cfg = ManConfig::variant("tiny", s).unwrap();
                cfg.skip = skip;
                let man = Man::<f64>::init(cfg, &mut rng(3)).unwrap();
                let x = uniform([2, 1, s, 8, 12], 1.0, &mut rng(4));
                assert_eq!(man.forward(&x).unwrap().shape(), x.shape());
            }
        }
    }

    #[test]
    fn indivisible_extent_is_a_geometry_error() {
        let man = build_variant::<f64>("tiny", 2, &mut rng(5)).unwrap();
        let x = Tensor::zeros([1, 1, 2, 6, 8]);
        assert!(matches!(man.forward(&x), Err(Error::Geometry(_))));
    }

    #[test]
    fn param_count_matches_block_formulas() {
        let cfg = ManConfig::variant("tiny", 4).unwrap();
        let p: ModelParams<f64> = init_params(&cfg, &mut rng(6)).unwrap();
        let (c0, c1, c2) = (4, 8, 16);
        let attn = |c: usize| 4 * c * c + 3 * c * c;
        let conv = |ci: usize, co: usize| 27 * ci * co + co;
        let asc = |c: usize| 2 * c * c + c + 9 * c * c + c;
        let want = conv(1, c0) + attn(c0)
            + conv(c0, c1) + attn(c1)
            + conv(c1, c2) + attn(c2)
            + conv(c2, c2) + attn(c2)
            + 27 * c2 * c1 + c1 + attn(c1) + asc(c1)
            + 27 * c1 * c0 + c0 + attn(c0) + asc(c0)
            + 27 * c0 + 1;
        assert_eq!(p.param_count(), want);
        assert_eq!(ModelParams::<f64>::new().param_count(), 0);
    }

    #[test]
    fn config_kv_round_trip_and_validation() {
        let mut cfg = ManConfig::variant("M", 31).unwrap();
        cfg.skip = SkipKind::Concat;
        cfg.residual = true;
        assert_eq!(ManConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
        assert!(ManConfig::variant("XL", 31).is_err());
        assert!(ManConfig::new("x", 3, vec![4, 6, 7]).is_err());
        assert!(ManConfig::new("x", 3, vec![4]).is_err());
    }

    #[test]
    fn untrained_attentive_skips_gate_at_one_half() {
        let man = build_variant::<f64>("tiny", 3, &mut rng(7)).unwrap();
        let mut t = Tape::new();
        let vars = man.params.bind(&mut t, false);
        let x = t.constant(uniform([1, 1, 3, 8, 8], 1.0, &mut rng(8)));
        let out = man_forward(&mut t, x, &vars, &man.config).unwrap();
        assert_eq!(out.asc_gates.len(), 2);
        assert_eq!(out.mhrsa_gates.len(), 6);
        for (_, g) in &out.asc_gates {
            assert!(t.value(*g).data().iter().all(|&m| m == 0.5));
        }
    }

    #[test]
    fn denoise_pads_and_checks_bands() {
        let man = build_variant::<f64>("tiny", 2, &mut rng(10)).unwrap();
        let cube = HsiCube::from_fn(2, 7, 9, |s, y, x| (s + y + x) as f32 / 20.0).unwrap();
        assert_eq!(denoise_cube(&man, &cube).unwrap().dims(), [2, 7, 9]);
        let wrong = HsiCube::zeros(3, 8, 8).unwrap();
        let err = denoise_cube(&man, &wrong).unwrap_err().to_string();
        assert!(err.contains('3') && err.contains('2'), "{err}");
        assert_eq!((0..7).map(|i| reflect(i, 4)).collect::<Vec<_>>(), [0, 1, 2, 3, 2, 1, 0]);
    }

    #[test]
    fn gate_maps_flatten_channels_into_bands() {
        let man = build_variant::<f32>("tiny", 3, &mut rng(4)).unwrap();
        let cube = HsiCube::from_fn(3, 8, 6, |s, y, x| ((s * 7 + y * 3 + x) % 5) as f32 / 5.0).unwrap();
        let maps = gate_maps(&man, &cube).unwrap();
        let names: Vec<_> = maps.iter().map(|m| m.name.as_str()).collect();
        assert_eq!(names, ["stem", "enc1", "enc2", "mid", "dec1", "dec0", "skip1", "skip0"]);
        let stem = maps[0].to_cube().unwrap();
        // width padded from 6 to 8
        assert_eq!(stem.dims(), [4 * 3, 8, 8]);
        assert_eq!(stem.get(5, 2, 3), maps[0].values.at(&[0, 1, 2, 2, 3]));
        assert!(maps.iter().filter(|m| m.kind == GateKind::Spectral).all(|m| m.values.data().iter().all(|&g| g > 0.0 && g < 1.0)));
        assert!(maps.iter().filter(|m| m.kind == GateKind::Skip).all(|m| m.values.data().iter().all(|&g| g == 0.5)));
    }

    #[test]
    fn variant_budgets() {
        for (name, target) in [("S", 0.50e6), ("M", 0.89e6), ("L", 1.39e6)] {
            let n = build_variant::<f32>(name, 31, &mut rng(9)).unwrap().param_count() as f64;
            eprintln!("{name}: {n}");
            assert!((n - target).abs() <= 0.15 * target, "{name}: {n}");
        }
    }
}
