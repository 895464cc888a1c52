//! `MANW` weight files.
//!
//! Layout, all integers little-endian: magic `4D 41 4E 57`, format version
//! u16, entry count u32, then per entry a u16 name length, the UTF-8 name,
//! a u8 rank, one u32 per extent and the float32 payload in row-major order.
//! A u32 length and a UTF-8 key-value text block follow the last entry.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{bail, Error, Result};
use crate::kv::KvText;
use crate::network::{Man, ManConfig};
use crate::params::ModelParams;
use crate::real::Real;
use crate::tensor::Tensor;

pub const MANW_MAGIC: [u8; 4] = *b"MANW";
pub const MANW_VERSION: u16 = 1;

/// Named float32 tensors plus free-form key-value metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: ModelParams<f32>,
    pub meta: KvText,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&MANW_MAGIC);
        out.extend_from_slice(&MANW_VERSION.to_le_bytes());
        out.extend_from_slice(&len_u32(self.tensors.len(), "entry count")?.to_le_bytes());
        for (name, t) in self.tensors.iter() {
            let n = u16::try_from(name.len()).map_err(|_| Error::Format(format!("name too long: {name}")))?;
            out.extend_from_slice(&n.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let rank = u8::try_from(t.ndim()).map_err(|_| Error::Format(format!("rank too large: {name}")))?;
            out.push(rank);
            for &d in t.shape() {
                out.extend_from_slice(&len_u32(d, "extent")?.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let meta = self.meta.to_string();
        out.extend_from_slice(&len_u32(meta.len(), "metadata length")?.to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MANW_MAGIC {
            bail!(Format, "bad magic, expected MANW");
        }
        let version = u16::from_le_bytes(r.array()?);
        if version != MANW_VERSION {
            bail!(Format, "unsupported MANW version {version}");
        }
        let count = u32::from_le_bytes(r.array()?) as usize;
        let mut tensors = ModelParams::new();
        for _ in 0..count {
            let n = u16::from_le_bytes(r.array()?) as usize;
            let name = std::str::from_utf8(r.take(n)?).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(r.array()?) as usize);
            }
            let Some(len) = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).and_then(|n| n.checked_mul(4)) else {
                bail!(Format, "extents of {name} overflow");
            };
            let data = r.take(len)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("{name}: {e}")))?;
            if !t.is_finite() {
                bail!(Format, "{name} holds non-finite values");
            }
            tensors.insert(name, t).map_err(|e| Error::Format(e.to_string()))?;
        }
        let n = u32::from_le_bytes(r.array()?) as usize;
        let text = std::str::from_utf8(r.take(n)?).map_err(|_| Error::Format("metadata is not UTF-8".into()))?;
        let meta = KvText::parse(text)?;
        if r.pos != bytes.len() {
            bail!(Format, "{} trailing bytes", bytes.len() - r.pos);
        }
        Ok(Checkpoint { tensors, meta })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("{what} {n} exceeds u32")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else { bail!(Format, "file truncated at byte {}", self.pos) };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

/// Prefix reserved for non-model metadata keys (training state).
pub const EXTRA_KEY_PREFIX: &str = "state.";
/// Prefix reserved for non-model tensors (optimizer moments).
pub const EXTRA_TENSOR_PREFIX: &str = "opt.";

pub fn save_model<T: Real>(man: &Man<T>, path: impl AsRef<Path>) -> Result<()> {
    Checkpoint { tensors: man.params.cast(), meta: man.config.to_kv() }.save(path)
}

/// Loads the network part of a checkpoint, ignoring training state.
pub fn load_model<T: Real>(path: impl AsRef<Path>) -> Result<Man<T>> {
    model_from_checkpoint(&Checkpoint::load(path)?)
}

pub fn model_from_checkpoint<T: Real>(ck: &Checkpoint) -> Result<Man<T>> {
    let mut meta = KvText::new();
    for k in ck.meta.keys().filter(|k| !k.starts_with(EXTRA_KEY_PREFIX)) {
        meta.set(k, ck.meta.raw(k).expect("key listed"));
    }
    let config = ManConfig::from_kv(&meta)?;
    let mut params = ModelParams::new();
    for (name, t) in ck.tensors.iter().filter(|(n, _)| !n.starts_with(EXTRA_TENSOR_PREFIX)) {
        params.insert(name, t.cast())?;
    }
    let expected: ModelParams<T> = crate::network::init_params(&config, &mut ChaCha8Rng::seed_from_u64(0))?;
    for (name, t) in expected.iter() {
        match params.get(name) {
            Some(p) if p.shape() == t.shape() => {}
            Some(p) => bail!(Format, "{name} has shape {:?}, config expects {:?}", p.shape(), t.shape()),
            None => bail!(Format, "checkpoint lacks {name}"),
        }
    }
    if params.len() != expected.len() {
        bail!(Format, "checkpoint has {} model tensors, config expects {}", params.len(), expected.len());
    }
    Ok(Man { config, params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::build_variant;

    fn model() -> Man<f32> {
        build_variant("tiny", 5, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    }

    #[test]
    fn model_round_trip_is_bit_exact() {
        let man = model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.manw");
        save_model(&man, &path).unwrap();
        let back: Man<f32> = load_model(&path).unwrap();
        assert_eq!(back.config, man.config);
        for ((na, a), (nb, b)) in man.params.iter().zip(back.params.iter()) {
            assert_eq!(na, nb);
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn layout_by_hand() {
        let mut tensors = ModelParams::new();
        tensors.insert("ab", Tensor::new([2], vec![1.0f32, -2.0]).unwrap()).unwrap();
        let mut meta = KvText::new();
        meta.set("k", "v");
        let bytes = Checkpoint { tensors, meta }.to_bytes().unwrap();
        let mut want = vec![0x4D, 0x41, 0x4E, 0x57, 1, 0, 1, 0, 0, 0, 2, 0, b'a', b'b', 1, 2, 0, 0, 0];
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-2.0f32).to_le_bytes());
        want.extend_from_slice(&[6, 0, 0, 0]);
        want.extend_from_slice(b"k = v\n");
        assert_eq!(bytes, want);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = Checkpoint { tensors: model().params, meta: model().config.to_kv() }.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = 0;
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let mut wrong = Checkpoint::from_bytes(&bytes).unwrap();
        wrong.meta.set("widths", "4,8");
        assert!(model_from_checkpoint::<f32>(&wrong).is_err());
    }
}
