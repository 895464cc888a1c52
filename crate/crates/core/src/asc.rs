//! Skip fusions between encoder features `F_e` and decoder features `F_d`.
//!
//! The attentive fusion computes
//! `F = LeakyReLU(Conv1x1([F_d, F_e]))`, `M = sigmoid(Conv3x3(F))` and returns
//! `(1 - M) * F_d + M * F_e`. Both convolutions are spatial only
//! (`1x1x1` and `1x3x3` kernels) and shared across bands. The additive and
//! concat fusions are the plain baselines.

use rand::Rng;

use crate::error::Result;
use crate::ops::{Activation, Conv3dGeometry, DEFAULT_LEAKY_SLOPE};
use crate::params::{join, uniform, ParamVars};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const CHANNEL_AXIS: usize = 1;
const GATE_GEOMETRY: Conv3dGeometry = Conv3dGeometry { stride: [1; 3], padding: [0, 1, 1] };

/// Parameters of an attentive skip at width `C`.
#[derive(Clone, Debug, PartialEq)]
pub struct AscParams<T> {
    /// `(C, 2C, 1, 1, 1)`, input channels ordered decoder first.
    pub fuse_w: Tensor<T>,
    pub fuse_b: Tensor<T>,
    /// `(C, C, 1, 3, 3)`.
    pub gate_w: Tensor<T>,
    pub gate_b: Tensor<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct AscVars {
    pub fuse_w: Var,
    pub fuse_b: Var,
    pub gate_w: Var,
    pub gate_b: Var,
}

const NAMES: [&str; 4] = ["fuse_w", "fuse_b", "gate_w", "gate_b"];

impl<T: Real> AscParams<T> {
    /// Fan-in uniform fuse conv; the gate conv starts at zero so the initial
    /// gate is exactly one half everywhere.
    pub fn init(channels: usize, rng: &mut impl Rng) -> Self {
        let b = (1.0 / (2 * channels) as f64).sqrt();
        AscParams {
            fuse_w: uniform([channels, 2 * channels, 1, 1, 1], b, rng),
            fuse_b: uniform([channels], b, rng),
            gate_w: Tensor::zeros([channels, channels, 1, 3, 3]),
            gate_b: Tensor::zeros([channels]),
        }
    }

    pub fn named(self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        let AscParams { fuse_w, fuse_b, gate_w, gate_b } = self;
        NAMES.iter().map(|n| join(prefix, n)).zip([fuse_w, fuse_b, gate_w, gate_b]).collect()
    }

    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> AscVars {
        AscVars {
            fuse_w: tape.leaf(self.fuse_w.clone(), requires_grad),
            fuse_b: tape.leaf(self.fuse_b.clone(), requires_grad),
            gate_w: tape.leaf(self.gate_w.clone(), requires_grad),
            gate_b: tape.leaf(self.gate_b.clone(), requires_grad),
        }
    }
}

impl AscVars {
    pub fn lookup(vars: &ParamVars, prefix: &str) -> Result<Self> {
        Ok(AscVars {
            fuse_w: vars.get(&join(prefix, NAMES[0]))?,
            fuse_b: vars.get(&join(prefix, NAMES[1]))?,
            gate_w: vars.get(&join(prefix, NAMES[2]))?,
            gate_b: vars.get(&join(prefix, NAMES[3]))?,
        })
    }
}

/// Fused features and the gate `M` that produced them.
#[derive(Clone, Copy, Debug)]
pub struct AscOutput {
    pub output: Var,
    pub gate: Var,
}

/// Attentive skip: elementwise convex combination of decoder and encoder
/// features with a learned gate.
pub fn asc_fuse<T: Real>(
    tape: &mut Tape<T>,
    f_d: Var,
    f_e: Var,
    p: &AscVars,
    leaky_slope: f64,
) -> Result<AscOutput> {
    tape.value(f_d).expect_same_shape(tape.value(f_e))?;
    let cat = tape.concat(f_d, f_e, CHANNEL_AXIS)?;
    let f = tape.conv3d(cat, p.fuse_w, Conv3dGeometry::default())?;
    let f = tape.add_bias(f, p.fuse_b, CHANNEL_AXIS)?;
    let f = tape.activation(f, Activation::LeakyRelu(leaky_slope))?;
    let m = tape.conv3d(f, p.gate_w, GATE_GEOMETRY)?;
    let m = tape.add_bias(m, p.gate_b, CHANNEL_AXIS)?;
    let gate = tape.sigmoid(m)?;
    let output = tape.blend(gate, f_d, f_e)?;
    Ok(AscOutput { output, gate })
}

/// [`asc_fuse`] with the default negative slope.
pub fn asc_fuse_default<T: Real>(tape: &mut Tape<T>, f_d: Var, f_e: Var, p: &AscVars) -> Result<AscOutput> {
    asc_fuse(tape, f_d, f_e, p, DEFAULT_LEAKY_SLOPE)
}

/// `F_d + F_e`.
pub fn additive_fuse<T: Real>(tape: &mut Tape<T>, f_d: Var, f_e: Var) -> Result<Var> {
    tape.add(f_d, f_e)
}

/// `Conv1x1([F_e, F_d])` with kernel `(C, 2C, 1, 1, 1)` and optional bias;
/// equals `W1 F_e + W2 F_d` for the channel halves `W1`, `W2` of the kernel.
pub fn concat_fuse<T: Real>(tape: &mut Tape<T>, f_d: Var, f_e: Var, w: Var, bias: Option<Var>) -> Result<Var> {
    let cat = tape.concat(f_e, f_d, CHANNEL_AXIS)?;
    let y = tape.conv3d(cat, w, Conv3dGeometry::default())?;
    match bias {
        Some(b) => tape.add_bias(y, b, CHANNEL_AXIS),
        None => Ok(y),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_params(c: usize, seed: u64) -> AscParams<f64> {
        let mut r = rng(seed);
        let mut p = AscParams::init(c, &mut r);
        p.gate_w = uniform([c, c, 1, 3, 3], 0.8, &mut r);
        p.gate_b = uniform([c], 0.5, &mut r);
        p
    }

    #[test]
    fn equal_inputs_pass_through_exactly() {
        let p = random_params(3, 1);
        let f = uniform::<f64>([1, 3, 2, 4, 4], 2.0, &mut rng(2));
        let mut t = Tape::new();
        let v = p.bind(&mut t, false);
        let (a, b) = (t.constant(f.clone()), t.constant(f.clone()));
        let out = asc_fuse_default(&mut t, a, b, &v).unwrap();
        assert_eq!(t.value(out.output), &f);
    }

    #[test]
    fn zero_gate_conv_averages() {
        let p = AscParams::<f64>::init(2, &mut rng(3));
        let fd = uniform::<f64>([1, 2, 2, 3, 3], 1.0, &mut rng(4));
        let fe = uniform::<f64>([1, 2, 2, 3, 3], 1.0, &mut rng(5));
        let mut t = Tape::new();
        let v = p.bind(&mut t, false);
        let (a, b) = (t.constant(fd.clone()), t.constant(fe.clone()));
        let out = asc_fuse_default(&mut t, a, b, &v).unwrap();
        assert!(t.value(out.gate).data().iter().all(|&m| m == 0.5));
        let avg = fd.zip_map(&fe, |x, y| (x + y) / 2.0).unwrap();
        for (got, want) in t.value(out.output).data().iter().zip(avg.data()) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn output_is_bounded_by_inputs() {
        let p = random_params(4, 6);
        let fd = uniform::<f64>([2, 4, 3, 5, 5], 3.0, &mut rng(7));
        let fe = uniform::<f64>([2, 4, 3, 5, 5], 3.0, &mut rng(8));
        let mut t = Tape::new();
        let v = p.bind(&mut t, false);
        let (a, b) = (t.constant(fd.clone()), t.constant(fe.clone()));
        let out = asc_fuse_default(&mut t, a, b, &v).unwrap();
        for ((&o, &x), &y) in t.value(out.output).data().iter().zip(fd.data()).zip(fe.data()) {
            let slack = 1e-15 * x.abs().max(y.abs());
            assert!(o >= x.min(y) - slack && o <= x.max(y) + slack);
        }
        assert!(t.value(out.gate).data().iter().all(|&m| m > 0.0 && m < 1.0));
    }

    #[test]
    fn additive_is_commutative_with_zero_identity() {
        let a = uniform::<f64>([1, 2, 2, 2, 2], 1.0, &mut rng(9));
        let b = uniform::<f64>([1, 2, 2, 2, 2], 1.0, &mut rng(10));
        let mut t = Tape::new();
        let (av, bv, z) = (t.constant(a.clone()), t.constant(b), t.constant(Tensor::zeros([1, 2, 2, 2, 2])));
        let ab = additive_fuse(&mut t, av, bv).unwrap();
        let ba = additive_fuse(&mut t, bv, av).unwrap();
        assert_eq!(t.value(ab), t.value(ba));
        let a0 = additive_fuse(&mut t, av, z).unwrap();
        assert_eq!(t.value(a0), &a);
    }

    #[test]
    fn concat_with_identity_half_selects_encoder() {
        let c = 3;
        let mut w = Tensor::<f64>::zeros([c, 2 * c, 1, 1, 1]);
        for i in 0..c {
            w.data_mut()[i * 2 * c + i] = 1.0;
        }
        let fd = uniform::<f64>([1, c, 2, 2, 2], 1.0, &mut rng(11));
        let fe = uniform::<f64>([1, c, 2, 2, 2], 1.0, &mut rng(12));
        let mut t = Tape::new();
        let (a, b, wv) = (t.constant(fd), t.constant(fe.clone()), t.constant(w));
        let y = concat_fuse(&mut t, a, b, wv, None).unwrap();
        assert_eq!(t.value(y), &fe);
    }
}
