//! Corruption generators. Noise levels `sigma` are on the 8-bit scale: the
//! added standard deviation on `[0, 1]` data is `sigma / 255`. Results are
//! never clipped.

use std::fmt::{self, Display};
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{bail, Error, Result};
use crate::hsidata::HsiCube;
use crate::kv::KvText;

pub const PEAK_8BIT: f64 = 255.0;

/// Default discrete training set of noise levels.
pub const TRAIN_SIGMAS: [f64; 5] = [30.0, 40.0, 50.0, 60.0, 70.0];
pub const BLIND_RANGE: (f64, f64) = (30.0, 70.0);

fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `clean + N(0, (sigma / 255)^2)` independently per element.
pub fn add_gaussian(clean: &HsiCube, sigma: f64, seed: u64) -> Result<HsiCube> {
    add_gaussian_with(clean, sigma, &mut rng_for(seed))
}

pub fn add_gaussian_with(clean: &HsiCube, sigma: f64, rng: &mut impl Rng) -> Result<HsiCube> {
    check_sigma(sigma)?;
    let mut out = clean.clone();
    if sigma > 0.0 {
        let std = sigma / PEAK_8BIT;
        for v in out.data_mut() {
            *v = (*v as f64 + std * rng.sample::<f64, _>(StandardNormal)) as f32;
        }
    }
    Ok(out)
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        bail!(Config, "noise level must be finite and non-negative, got {sigma}");
    }
    Ok(())
}

/// How a random noise level is drawn.
#[derive(Clone, Debug, PartialEq)]
pub enum SigmaMode {
    /// Uniform over a finite set.
    Set(Vec<f64>),
    /// Uniform over a closed interval.
    Range(f64, f64),
}

impl SigmaMode {
    pub fn train_set() -> Self {
        SigmaMode::Set(TRAIN_SIGMAS.to_vec())
    }

    pub fn blind_range() -> Self {
        SigmaMode::Range(BLIND_RANGE.0, BLIND_RANGE.1)
    }
}

pub fn sample_sigma(mode: &SigmaMode, rng: &mut impl Rng) -> Result<f64> {
    match mode {
        SigmaMode::Set(v) if v.is_empty() => bail!(Config, "empty noise level set"),
        SigmaMode::Set(v) => Ok(v[rng.random_range(0..v.len())]),
        SigmaMode::Range(lo, hi) if !(lo <= hi && *lo >= 0.0) => bail!(Config, "bad noise range [{lo}, {hi}]"),
        SigmaMode::Range(lo, hi) => Ok(rng.random_range(*lo..=*hi)),
    }
}

/// Structured corruption applied on top of band-wise Gaussian noise.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ComplexKind {
    Stripe,
    Deadline,
    Impulse,
    Mixture,
}

/// Every constant of the complex-noise generators.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexNoiseParams {
    /// Per-band base noise level range (8-bit scale).
    pub base_sigma: (f64, f64),
    /// Fraction of bands receiving structured corruption.
    pub band_fraction: f64,
    /// Fraction of columns hit in an affected band.
    pub column_fraction: (f64, f64),
    /// Stripe offsets are uniform in `[-stripe_offset, stripe_offset]`.
    pub stripe_offset: f64,
    /// Dead line width range in columns, inclusive.
    pub deadline_width: (usize, usize),
    /// Salt-and-pepper ratios, one drawn per affected band.
    pub impulse_ratios: Vec<f64>,
}

impl Default for ComplexNoiseParams {
    fn default() -> Self {
        ComplexNoiseParams {
            base_sigma: (10.0, 70.0),
            band_fraction: 1.0 / 3.0,
            column_fraction: (0.05, 0.15),
            stripe_offset: 0.25,
            deadline_width: (1, 3),
            impulse_ratios: vec![0.1, 0.3, 0.5, 0.7],
        }
    }
}

/// Band-wise Gaussian noise with one level per band drawn from `range`.
pub fn add_noniid_gaussian_with(clean: &HsiCube, range: (f64, f64), rng: &mut impl Rng) -> Result<HsiCube> {
    let mut out = clean.clone();
    for s in 0..clean.bands() {
        let sigma = sample_sigma(&SigmaMode::Range(range.0, range.1), rng)?;
        let std = sigma / PEAK_8BIT;
        for v in out.band_mut(s) {
            *v = (*v as f64 + std * rng.sample::<f64, _>(StandardNormal)) as f32;
        }
    }
    Ok(out)
}

pub fn add_complex(clean: &HsiCube, kind: ComplexKind, seed: u64) -> Result<HsiCube> {
    add_complex_with(clean, kind, &ComplexNoiseParams::default(), &mut rng_for(seed))
}

/// Band-wise Gaussian base noise, then `kind` on a random subset of bands.
pub fn add_complex_with(
    clean: &HsiCube,
    kind: ComplexKind,
    p: &ComplexNoiseParams,
    rng: &mut impl Rng,
) -> Result<HsiCube> {
    let mut out = add_noniid_gaussian_with(clean, p.base_sigma, rng)?;
    for s in affected_bands(clean.bands(), p.band_fraction, rng) {
        let k = match kind {
            ComplexKind::Mixture => [ComplexKind::Stripe, ComplexKind::Deadline, ComplexKind::Impulse][rng.random_range(0..3)],
            k => k,
        };
        match k {
            ComplexKind::Stripe => stripe_band(&mut out, s, p, rng),
            ComplexKind::Deadline => deadline_band(&mut out, s, p, rng),
            ComplexKind::Impulse => impulse_band(&mut out, s, p, rng)?,
            ComplexKind::Mixture => unreachable!("mixture resolved above"),
        }
    }
    Ok(out)
}

/// Sorted band indices, `round(fraction * S)` of them and at least one.
pub fn affected_bands(bands: usize, fraction: f64, rng: &mut impl Rng) -> Vec<usize> {
    let n = ((bands as f64 * fraction).round() as usize).clamp(1, bands);
    let mut v = sample(rng, bands, n).into_vec();
    v.sort_unstable();
    v
}

fn column_count(width: usize, p: &ComplexNoiseParams, rng: &mut impl Rng) -> usize {
    let f = rng.random_range(p.column_fraction.0..=p.column_fraction.1);
    ((width as f64 * f).round() as usize).clamp(1, width)
}

fn stripe_band(cube: &mut HsiCube, s: usize, p: &ComplexNoiseParams, rng: &mut impl Rng) {
    let (h, w) = (cube.height(), cube.width());
    let n = column_count(w, p, rng);
    let cols = sample(rng, w, n).into_vec();
    let band = cube.band_mut(s);
    for x in cols {
        let offset = rng.random_range(-p.stripe_offset..=p.stripe_offset) as f32;
        for y in 0..h {
            band[y * w + x] += offset;
        }
    }
}

fn deadline_band(cube: &mut HsiCube, s: usize, p: &ComplexNoiseParams, rng: &mut impl Rng) {
    let (h, w) = (cube.height(), cube.width());
    let n = column_count(w, p, rng);
    let starts = sample(rng, w, n).into_vec();
    let band = cube.band_mut(s);
    for x0 in starts {
        let width = rng.random_range(p.deadline_width.0..=p.deadline_width.1);
        for x in x0..(x0 + width).min(w) {
            for y in 0..h {
                band[y * w + x] = 0.0;
            }
        }
    }
}

fn impulse_band(cube: &mut HsiCube, s: usize, p: &ComplexNoiseParams, rng: &mut impl Rng) -> Result<()> {
    if p.impulse_ratios.is_empty() {
        bail!(Config, "empty impulse ratio set");
    }
    let ratio = p.impulse_ratios[rng.random_range(0..p.impulse_ratios.len())];
    let band = cube.band_mut(s);
    let n = ((band.len() as f64 * ratio).round() as usize).min(band.len());
    for i in sample(rng, band.len(), n) {
        band[i] = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
    }
    Ok(())
}

/// Declarative corruption, serializable as key-value text.
#[derive(Clone, Debug, PartialEq)]
pub enum NoiseKind {
    Gaussian { sigma: f64 },
    Blind { min: f64, max: f64 },
    NonIid { min: f64, max: f64 },
    Complex(ComplexKind),
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn gaussian(sigma: f64, seed: u64) -> Self {
        NoiseSpec { kind: NoiseKind::Gaussian { sigma }, seed }
    }

    pub fn apply(&self, clean: &HsiCube) -> Result<HsiCube> {
        self.apply_with(clean, &mut rng_for(self.seed))
    }

    /// Applies the corruption drawing from `rng` instead of the spec seed.
    pub fn apply_with(&self, clean: &HsiCube, rng: &mut impl Rng) -> Result<HsiCube> {
        match &self.kind {
            NoiseKind::Gaussian { sigma } => add_gaussian_with(clean, *sigma, rng),
            NoiseKind::Blind { min, max } => {
                let sigma = sample_sigma(&SigmaMode::Range(*min, *max), rng)?;
                add_gaussian_with(clean, sigma, rng)
            }
            NoiseKind::NonIid { min, max } => add_noniid_gaussian_with(clean, (*min, *max), rng),
            NoiseKind::Complex(k) => add_complex_with(clean, *k, &ComplexNoiseParams::default(), rng),
        }
    }

    pub fn name(&self) -> &'static str {
        match &self.kind {
            NoiseKind::Gaussian { .. } => "gaussian",
            NoiseKind::Blind { .. } => "blind",
            NoiseKind::NonIid { .. } => "noniid",
            NoiseKind::Complex(ComplexKind::Stripe) => "stripe",
            NoiseKind::Complex(ComplexKind::Deadline) => "deadline",
            NoiseKind::Complex(ComplexKind::Impulse) => "impulse",
            NoiseKind::Complex(ComplexKind::Mixture) => "mixture",
        }
    }

    /// Builds a spec from a kind name; `sigma` applies to `gaussian` only.
    pub fn from_name(name: &str, sigma: Option<f64>, seed: u64) -> Result<Self> {
        let kind = match name {
            "gaussian" => NoiseKind::Gaussian { sigma: sigma.ok_or_else(|| Error::Config("gaussian noise needs a sigma".into()))? },
            "blind" => NoiseKind::Blind { min: BLIND_RANGE.0, max: BLIND_RANGE.1 },
            "noniid" => {
                let (min, max) = ComplexNoiseParams::default().base_sigma;
                NoiseKind::NonIid { min, max }
            }
            "stripe" => NoiseKind::Complex(ComplexKind::Stripe),
            "deadline" => NoiseKind::Complex(ComplexKind::Deadline),
            "impulse" => NoiseKind::Complex(ComplexKind::Impulse),
            "mixture" => NoiseKind::Complex(ComplexKind::Mixture),
            _ => bail!(Config, "unknown noise kind {name:?}"),
        };
        Ok(NoiseSpec { kind, seed })
    }

    pub fn to_kv(&self) -> KvText {
        let mut kv = KvText::new();
        kv.set("kind", self.name());
        match &self.kind {
            NoiseKind::Gaussian { sigma } => kv.set("sigma", sigma),
            NoiseKind::Blind { min, max } | NoiseKind::NonIid { min, max } => {
                kv.set("sigma_min", min);
                kv.set("sigma_max", max);
            }
            NoiseKind::Complex(_) => {}
        }
        kv.set("seed", self.seed);
        kv
    }

    pub fn from_kv(kv: &KvText) -> Result<Self> {
        kv.reject_unknown(&["kind", "sigma", "sigma_min", "sigma_max", "seed"])?;
        let name: String = kv.require("kind")?;
        let mut spec = NoiseSpec::from_name(&name, kv.get("sigma")?, kv.get_or("seed", 0)?)?;
        if let NoiseKind::Blind { min, max } | NoiseKind::NonIid { min, max } = &mut spec.kind {
            *min = kv.get_or("sigma_min", *min)?;
            *max = kv.get_or("sigma_max", *max)?;
        }
        Ok(spec)
    }
}

impl Display for NoiseSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_kv())
    }
}

impl FromStr for NoiseSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        NoiseSpec::from_kv(&KvText::parse(s)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hsidata::synth_dataset;

    fn clean() -> HsiCube {
        synth_dataset(1, 9, 40, 40, 3).unwrap().remove(0)
    }

    #[test]
    fn zero_sigma_is_identity_and_negative_rejected() {
        let c = clean();
        assert_eq!(add_gaussian(&c, 0.0, 1).unwrap(), c);
        assert!(add_gaussian(&c, -1.0, 1).is_err());
    }

    #[test]
    fn gaussian_moments() {
        let c = HsiCube::zeros(4, 500, 500).unwrap();
        let n = add_gaussian(&c, 50.0, 7).unwrap();
        let len = n.data().len() as f64;
        let mean = n.data().iter().map(|&v| v as f64).sum::<f64>() / len;
        let std = (n.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / len).sqrt();
        let target = 50.0 / 255.0;
        assert!((std / target - 1.0).abs() < 0.01);
        assert!(mean.abs() < 3.0 * target / len.sqrt());
    }

    #[test]
    fn sigma_sampling_frequencies_and_moments() {
        let mut rng = rng_for(5);
        let mode = SigmaMode::train_set();
        let mut counts = [0usize; 5];
        let draws = 100_000;
        for _ in 0..draws {
            let s = sample_sigma(&mode, &mut rng).unwrap();
            counts[TRAIN_SIGMAS.iter().position(|&t| t == s).unwrap()] += 1;
        }
        assert!(counts.iter().all(|&c| (c as f64 / draws as f64 - 0.2).abs() < 0.01));
        let v: Vec<f64> = (0..draws).map(|_| sample_sigma(&SigmaMode::blind_range(), &mut rng).unwrap()).collect();
        let mean = v.iter().sum::<f64>() / draws as f64;
        assert!((mean - 50.0).abs() < 0.5);
        assert!(v.iter().all(|&s| (30.0..=70.0).contains(&s)));
        let a: Vec<f64> = (0..10).map(|_| sample_sigma(&mode, &mut rng_for(9)).unwrap()).collect();
        assert!(a.windows(2).all(|w| w[0] == w[1]));
    }

    /// Replays the generator's RNG to recover the base-noisy cube and the
    /// affected bands.
    fn base_and_bands(c: &HsiCube, seed: u64) -> (HsiCube, Vec<usize>) {
        let mut rng = rng_for(seed);
        let p = ComplexNoiseParams::default();
        let base = add_noniid_gaussian_with(c, p.base_sigma, &mut rng).unwrap();
        let bands = affected_bands(c.bands(), p.band_fraction, &mut rng);
        (base, bands)
    }

    #[test]
    fn stripes_are_column_constant_and_confined() {
        let c = clean();
        let noisy = add_complex(&c, ComplexKind::Stripe, 21).unwrap();
        let (base, bands) = base_and_bands(&c, 21);
        assert_eq!(bands.len(), 3);
        let (h, w) = (c.height(), c.width());
        for s in 0..c.bands() {
            let (nb, bb) = (noisy.band(s), base.band(s));
            if !bands.contains(&s) {
                assert_eq!(nb, bb);
                continue;
            }
            let mut hit = 0;
            for x in 0..w {
                let d0 = nb[x] - bb[x];
                for y in 0..h {
                    assert!((nb[y * w + x] - bb[y * w + x] - d0).abs() < 1e-6);
                }
                hit += (d0 != 0.0) as usize;
            }
            assert!((2..=6).contains(&hit), "{hit}");
        }
    }

    #[test]
    fn deadlines_zero_whole_columns() {
        let c = clean();
        let noisy = add_complex(&c, ComplexKind::Deadline, 22).unwrap();
        let (base, bands) = base_and_bands(&c, 22);
        let (h, w) = (c.height(), c.width());
        for s in 0..c.bands() {
            let (nb, bb) = (noisy.band(s), base.band(s));
            if !bands.contains(&s) {
                assert_eq!(nb, bb);
                continue;
            }
            for x in 0..w {
                let changed = (0..h).any(|y| nb[y * w + x] != bb[y * w + x]);
                if changed {
                    assert!((0..h).all(|y| nb[y * w + x] == 0.0));
                }
            }
        }
    }

    #[test]
    fn impulse_ratio_is_exact_per_band() {
        let c = clean();
        let noisy = add_complex(&c, ComplexKind::Impulse, 23).unwrap();
        let (_, bands) = base_and_bands(&c, 23);
        let ratios = ComplexNoiseParams::default().impulse_ratios;
        for &s in &bands {
            let b = noisy.band(s);
            let frac = b.iter().filter(|&&v| v == 0.0 || v == 1.0).count() as f64 / b.len() as f64;
            assert!(ratios.iter().any(|r| (frac - r).abs() < 0.01), "{frac}");
        }
    }

    #[test]
    fn mixture_is_reproducible_and_spec_round_trips() {
        let c = clean();
        let a = add_complex(&c, ComplexKind::Mixture, 4).unwrap();
        assert_eq!(a, add_complex(&c, ComplexKind::Mixture, 4).unwrap());
        for name in ["gaussian", "blind", "noniid", "stripe", "deadline", "impulse", "mixture"] {
            let spec = NoiseSpec::from_name(name, Some(30.0), 8).unwrap();
            assert_eq!(spec.to_string().parse::<NoiseSpec>().unwrap(), spec);
            assert_eq!(spec.apply(&c).unwrap(), spec.apply(&c).unwrap());
        }
        assert!(NoiseSpec::from_name("poisson", None, 0).is_err());
        assert!(NoiseSpec::from_name("gaussian", None, 0).is_err());
    }
}
