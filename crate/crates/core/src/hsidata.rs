//! Hyperspectral cubes, the `HSC1` container, patch cropping, augmentation
//! and a synthetic cube generator.
//!
//! `HSC1` layout: magic `48 53 43 31`, a dtype byte (1 = float32 LE), one
//! reserved byte, extents `S`, `H`, `W` as u32 LE, then `S*H*W` float32 LE
//! values, band-major and row-major, with no padding.

use std::fs;
use std::path::Path;

use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{bail, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub const HSC_MAGIC: [u8; 4] = *b"HSC1";
const DTYPE_F32: u8 = 1;
const HEADER_LEN: usize = 4 + 2 + 12;

/// Band-major `(S, H, W)` cube.
#[derive(Clone, Debug, PartialEq)]
pub struct HsiCube {
    bands: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl HsiCube {
    pub fn new(bands: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if bands == 0 || height == 0 || width == 0 {
            bail!(Geometry, "cube extents must be positive, got {bands}x{height}x{width}");
        }
        let n = bands.checked_mul(height).and_then(|v| v.checked_mul(width));
        if n != Some(data.len()) {
            bail!(Dimension, "cube {bands}x{height}x{width} needs {n:?} values, got {}", data.len());
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            bail!(NonFinite, "cube value at flat index {i}");
        }
        Ok(HsiCube { bands, height, width, data })
    }

    pub fn zeros(bands: usize, height: usize, width: usize) -> Result<Self> {
        HsiCube::new(bands, height, width, vec![0.0; bands * height * width])
    }

    pub fn from_fn(bands: usize, height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(bands * height * width);
        for s in 0..bands {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(s, y, x));
                }
            }
        }
        HsiCube::new(bands, height, width, data)
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.bands, self.height, self.width]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Mutable access for in-place corruption; callers must keep values finite.
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, s: usize, y: usize, x: usize) -> f32 {
        self.data[(s * self.height + y) * self.width + x]
    }

    pub fn band(&self, s: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[s * n..(s + 1) * n]
    }

    pub fn band_mut(&mut self, s: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[s * n..(s + 1) * n]
    }

    pub fn expect_same_dims(&self, other: &HsiCube) -> Result<()> {
        if self.dims() != other.dims() {
            bail!(Dimension, "cube extents differ: {:?} vs {:?}", self.dims(), other.dims());
        }
        Ok(())
    }

    /// `(1, 1, S, H, W)` tensor.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        stack(std::slice::from_ref(self)).expect("single cube stacks")
    }

    /// Inverse of [`to_tensor`](Self::to_tensor) for a `(1, 1, S, H, W)` tensor.
    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let [b, c, s, h, w] = t.dims5()?;
        if b != 1 || c != 1 {
            bail!(Dimension, "expected a single one-channel cube, got batch {b} with {c} channels");
        }
        HsiCube::new(s, h, w, t.data().iter().map(|v| v.as_f64() as f32).collect())
    }

    /// Sub-cube with all bands at top-left `(y, x)`.
    pub fn crop(&self, y: usize, x: usize, height: usize, width: usize) -> Result<Self> {
        if y + height > self.height || x + width > self.width {
            bail!(Geometry, "crop {height}x{width} at ({y}, {x}) exceeds {}x{}", self.height, self.width);
        }
        HsiCube::from_fn(self.bands, height, width, |s, i, j| self.get(s, y + i, x + j))
    }

    pub fn to_hsc_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(&HSC_MAGIC);
        out.push(DTYPE_F32);
        out.push(0);
        for d in self.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_hsc_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            bail!(Format, "HSC1 header truncated: {} bytes", bytes.len());
        }
        if bytes[..4] != HSC_MAGIC {
            bail!(Format, "bad magic {:02x?}, expected HSC1", &bytes[..4]);
        }
        if bytes[4] != DTYPE_F32 {
            bail!(Format, "unsupported dtype code {}", bytes[4]);
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
        let (s, h, w) = (u32_at(6), u32_at(10), u32_at(14));
        let Some(n) = s.checked_mul(h).and_then(|v| v.checked_mul(w)).and_then(|v| v.checked_mul(4)) else {
            bail!(Format, "extents {s}x{h}x{w} overflow");
        };
        let payload = &bytes[HEADER_LEN..];
        if payload.len() != n {
            bail!(Format, "payload is {} bytes, extents {s}x{h}x{w} need {n}", payload.len());
        }
        let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        HsiCube::new(s, h, w, data).map_err(|e| crate::error::Error::Format(e.to_string()))
    }
}

/// Stack same-size cubes into a `(B, 1, S, H, W)` tensor.
pub fn stack<T: Real>(cubes: &[HsiCube]) -> Result<Tensor<T>> {
    let Some(first) = cubes.first() else { bail!(Dimension, "cannot stack zero cubes") };
    let mut data = Vec::with_capacity(cubes.len() * first.data.len());
    for c in cubes {
        first.expect_same_dims(c)?;
        data.extend(c.data.iter().map(|&v| T::lit(v as f64)));
    }
    let [s, h, w] = first.dims();
    Tensor::new([cubes.len(), 1, s, h, w], data)
}

pub fn read_hsc(path: impl AsRef<Path>) -> Result<HsiCube> {
    HsiCube::from_hsc_bytes(&fs::read(path)?)
}

pub fn write_hsc(cube: &HsiCube, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, cube.to_hsc_bytes())?;
    Ok(())
}

/// Square patches with corners on a `stride` grid; windows that would run
/// past the edge are dropped.
pub fn crop_patches(cube: &HsiCube, patch: usize, stride: usize) -> Result<Vec<HsiCube>> {
    if patch == 0 || stride == 0 {
        bail!(Config, "patch size and stride must be positive");
    }
    if patch > cube.height || patch > cube.width {
        bail!(Geometry, "patch {patch} exceeds cube {}x{}", cube.height, cube.width);
    }
    let mut out = Vec::new();
    for y in (0..=cube.height - patch).step_by(stride) {
        for x in (0..=cube.width - patch).step_by(stride) {
            out.push(cube.crop(y, x, patch, patch)?);
        }
    }
    Ok(out)
}

/// Spatial augmentation applied identically to every band.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Augment {
    /// Counter-clockwise rotation by `90 * k` degrees; square cubes only.
    Rot90(u8),
    /// Mirror left-right.
    FlipH,
    /// Mirror top-bottom.
    FlipV,
    /// Bilinear resampling by 0.5 or 1.
    Scale(f64),
}

pub const SCALE_FACTORS: [f64; 2] = [0.5, 1.0];

pub fn augment(cube: &HsiCube, op: Augment) -> Result<HsiCube> {
    let [s, h, w] = cube.dims();
    match op {
        Augment::Rot90(k) => {
            if h != w {
                bail!(Geometry, "rotation needs a square cube, got {h}x{w}");
            }
            let mut out = cube.clone();
            for _ in 0..k % 4 {
                let src = out.clone();
                out = HsiCube::from_fn(s, h, w, |b, y, x| src.get(b, x, w - 1 - y))?;
            }
            Ok(out)
        }
        Augment::FlipH => HsiCube::from_fn(s, h, w, |b, y, x| cube.get(b, y, w - 1 - x)),
        Augment::FlipV => HsiCube::from_fn(s, h, w, |b, y, x| cube.get(b, h - 1 - y, x)),
        Augment::Scale(f) => {
            if !SCALE_FACTORS.contains(&f) {
                bail!(Config, "scale factor must be one of {SCALE_FACTORS:?}, got {f}");
            }
            let (oh, ow) = (((h as f64) * f).round() as usize, ((w as f64) * f).round() as usize);
            if oh == 0 || ow == 0 {
                bail!(Geometry, "scaling {h}x{w} by {f} leaves no pixels");
            }
            let ys: Vec<_> = (0..oh).map(|i| sample_coord(i, f, h)).collect();
            let xs: Vec<_> = (0..ow).map(|j| sample_coord(j, f, w)).collect();
            HsiCube::from_fn(s, oh, ow, |b, i, j| {
                let (y0, y1, ty) = ys[i];
                let (x0, x1, tx) = xs[j];
                let top = cube.get(b, y0, x0) as f64 * (1.0 - tx) + cube.get(b, y0, x1) as f64 * tx;
                let bot = cube.get(b, y1, x0) as f64 * (1.0 - tx) + cube.get(b, y1, x1) as f64 * tx;
                (top * (1.0 - ty) + bot * ty) as f32
            })
        }
    }
}

/// Half-pixel-centred source position of output index `i`, as the two
/// neighbouring source indices and the weight of the second.
fn sample_coord(i: usize, f: f64, n: usize) -> (usize, usize, f64) {
    let c = ((i as f64 + 0.5) / f - 0.5).clamp(0.0, (n - 1) as f64);
    let lo = c.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    (lo, hi, c - lo as f64)
}

/// Random rotation, optional flip and random scale, reproducible per seed.
pub fn random_augment(cube: &HsiCube, seed: u64) -> Result<HsiCube> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_augment_with(cube, &mut rng)
}

pub fn random_augment_with(cube: &HsiCube, rng: &mut impl Rng) -> Result<HsiCube> {
    let mut out = cube.clone();
    if cube.height == cube.width {
        out = augment(&out, Augment::Rot90(rng.random_range(0..4u8)))?;
    }
    if rng.random_bool(0.5) {
        out = augment(&out, Augment::FlipH)?;
    }
    let f = SCALE_FACTORS[rng.random_range(0..SCALE_FACTORS.len())];
    augment(&out, Augment::Scale(f))
}

/// Smooth synthetic cubes: a few spatial patterns (low-frequency waves and
/// soft-edged discs), each carrying its own smooth spectral signature,
/// summed and min-max normalized to `[0, 1]`.
pub fn synth_dataset(count: usize, bands: usize, height: usize, width: usize, seed: u64) -> Result<Vec<HsiCube>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| synth_cube(bands, height, width, &mut rng)).collect()
}

const SYNTH_WAVES: usize = 3;
const SYNTH_DISCS: usize = 4;

fn synth_cube(bands: usize, height: usize, width: usize, rng: &mut impl Rng) -> Result<HsiCube> {
    let n = height * width;
    let mut patterns: Vec<Vec<f64>> = Vec::new();
    for _ in 0..SYNTH_WAVES {
        let (fy, fx) = (rng.random_range(0.2..2.0), rng.random_range(0.2..2.0));
        let (py, px) = (rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.0..std::f64::consts::TAU));
        patterns.push(
            (0..n)
                .map(|i| {
                    let (y, x) = ((i / width) as f64 / height as f64, (i % width) as f64 / width as f64);
                    (std::f64::consts::TAU * fy * y + py).sin() * (std::f64::consts::TAU * fx * x + px).cos()
                })
                .collect(),
        );
    }
    for _ in 0..SYNTH_DISCS {
        let (cy, cx) = (rng.random_range(0.0..height as f64), rng.random_range(0.0..width as f64));
        let r = rng.random_range(0.1..0.35) * height.min(width) as f64;
        let soft = rng.random_range(0.7..2.0);
        patterns.push(
            (0..n)
                .map(|i| {
                    let d = (((i / width) as f64 - cy).powi(2) + ((i % width) as f64 - cx).powi(2)).sqrt();
                    1.0 / (1.0 + ((d - r) / soft).exp())
                })
                .collect(),
        );
    }
    let mut data = vec![0.0f64; bands * n];
    for p in &patterns {
        let sig = spectral_signature(bands, rng);
        for (s, &a) in sig.iter().enumerate() {
            for (d, &v) in data[s * n..(s + 1) * n].iter_mut().zip(p) {
                *d += a * v;
            }
        }
    }
    let (lo, hi) = data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    HsiCube::new(bands, height, width, data.iter().map(|&v| ((v - lo) / span) as f32).collect())
}

/// Offset plus one broad Gaussian bump over the normalized band axis.
fn spectral_signature(bands: usize, rng: &mut impl Rng) -> Vec<f64> {
    let offset = rng.random_range(-0.3..1.0);
    let amp = rng.random_range(0.3..1.0);
    let centre = rng.random_range(0.0..1.0);
    let width = rng.random_range(0.25..0.8);
    (0..bands)
        .map(|s| {
            let t = if bands > 1 { s as f64 / (bands - 1) as f64 } else { 0.5 };
            offset + amp * (-((t - centre) / width).powi(2) / 2.0).exp()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(s: usize, h: usize, w: usize) -> HsiCube {
        HsiCube::from_fn(s, h, w, |b, y, x| ((b * h + y) * w + x) as f32 / (s * h * w) as f32).unwrap()
    }

    #[test]
    fn hsc_layout_by_hand() {
        let cube = HsiCube::new(2, 2, 2, (0..8).map(|v| v as f32 * 0.5).collect()).unwrap();
        let bytes = cube.to_hsc_bytes();
        assert_eq!(bytes.len(), 18 + 32);
        assert_eq!(&bytes[..6], &[0x48, 0x53, 0x43, 0x31, 1, 0]);
        assert_eq!(&bytes[6..18], &[2, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0]);
        // 0.5f32 = 0x3F000000, little-endian
        assert_eq!(&bytes[22..26], &[0x00, 0x00, 0x00, 0x3F]);
        assert_eq!(HsiCube::from_hsc_bytes(&bytes).unwrap(), cube);
    }

    #[test]
    fn hsc_rejects_bad_input() {
        let mut bytes = ramp(1, 2, 3).to_hsc_bytes();
        assert!(HsiCube::from_hsc_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(HsiCube::from_hsc_bytes(&bytes[..10]).is_err());
        bytes[0] = b'X';
        assert!(HsiCube::from_hsc_bytes(&bytes).is_err());
        let mut huge = ramp(1, 1, 1).to_hsc_bytes();
        huge[6..18].copy_from_slice(&[0xff; 12]);
        assert!(HsiCube::from_hsc_bytes(&huge).is_err());
        let mut nan = ramp(1, 1, 1).to_hsc_bytes();
        nan[18..22].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(HsiCube::from_hsc_bytes(&nan).is_err());
    }

    #[test]
    fn crops_match_source() {
        let cube = ramp(2, 10, 9);
        let patches = crop_patches(&cube, 4, 3).unwrap();
        assert_eq!(patches.len(), 3 * 2);
        assert_eq!(patches[1], cube.crop(0, 3, 4, 4).unwrap());
        assert_eq!(patches[3].get(1, 2, 3), cube.get(1, 5, 6));
        assert!(crop_patches(&cube, 11, 1).is_err());
        assert_eq!(crop_patches(&ramp(1, 64, 64), 64, 7).unwrap().len(), 1);
        assert_eq!(crop_patches(&ramp(1, 128, 128), 64, 64).unwrap().len(), 4);
    }

    #[test]
    fn rotation_and_flip_groups() {
        let cube = ramp(3, 5, 5);
        let r1 = augment(&cube, Augment::Rot90(1)).unwrap();
        assert_ne!(r1, cube);
        // counter-clockwise: the top-right corner moves to the top-left
        assert_eq!(r1.get(0, 0, 0), cube.get(0, 0, 4));
        let mut r = cube.clone();
        for _ in 0..4 {
            r = augment(&r, Augment::Rot90(1)).unwrap();
        }
        assert_eq!(r, cube);
        let f = augment(&augment(&cube, Augment::FlipH).unwrap(), Augment::FlipH).unwrap();
        assert_eq!(f, cube);
        let v = augment(&augment(&cube, Augment::FlipV).unwrap(), Augment::FlipV).unwrap();
        assert_eq!(v, cube);
        assert!(augment(&ramp(1, 2, 3), Augment::Rot90(1)).is_err());
    }

    #[test]
    fn half_scale_averages_blocks() {
        let cube = ramp(2, 64, 64);
        let half = augment(&cube, Augment::Scale(0.5)).unwrap();
        assert_eq!(half.dims(), [2, 32, 32]);
        // source position 0.5 in both axes: equal weights on the 2x2 corner block
        let want = (cube.get(1, 0, 0) + cube.get(1, 0, 1) + cube.get(1, 1, 0) + cube.get(1, 1, 1)) / 4.0;
        assert!((half.get(1, 0, 0) - want).abs() < 1e-7);
        assert_eq!(augment(&cube, Augment::Scale(1.0)).unwrap(), cube);
        assert!(augment(&cube, Augment::Scale(2.0)).is_err());
    }

    #[test]
    fn synthetic_cubes_are_normalized_smooth_and_reproducible() {
        let a = synth_dataset(4, 16, 32, 32, 11).unwrap();
        assert_eq!(a, synth_dataset(4, 16, 32, 32, 11).unwrap());
        assert_ne!(a, synth_dataset(4, 16, 32, 32, 12).unwrap());
        let mut corr = Vec::new();
        for cube in &a {
            assert!(cube.data().iter().all(|v| (0.0..=1.0).contains(v)));
            for s in 0..15 {
                corr.push(pearson(cube.band(s), cube.band(s + 1)));
            }
        }
        let mean = corr.iter().sum::<f64>() / corr.len() as f64;
        assert!(mean > 0.9, "{mean}");
    }

    fn pearson(a: &[f32], b: &[f32]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().map(|&v| v as f64).sum::<f64>() / n;
        let mb = b.iter().map(|&v| v as f64).sum::<f64>() / n;
        let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
        for (&x, &y) in a.iter().zip(b) {
            let (dx, dy) = (x as f64 - ma, y as f64 - mb);
            sab += dx * dy;
            saa += dx * dx;
            sbb += dy * dy;
        }
        sab / (saa * sbb).sqrt()
    }
}
