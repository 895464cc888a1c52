//! Progressive spectral channel attention: `Y = SCM(GELU(DCM(X)))` at every
//! `(b, s, h, w)` position.
//!
//! * SCM mixes channels through a learned static map, `x W`.
//! * DCM rescales a static map per pixel: with `s = x W2`, the output is
//!   `(x * s) W1`, i.e. `x diag(s) W1`.
//!
//! The block never mixes positions.

use rand::Rng;

use crate::error::Result;
use crate::ops::Activation;
use crate::params::{join, near_identity, uniform, ParamVars};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const CHANNEL_AXIS: usize = 1;

/// Static map of DCM (`dcm_w1`), its scaling projection (`dcm_w2`) and the
/// SCM map (`scm_w`), all `C x C`.
#[derive(Clone, Debug, PartialEq)]
pub struct PscaParams<T> {
    pub dcm_w1: Tensor<T>,
    pub dcm_w2: Tensor<T>,
    pub scm_w: Tensor<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct PscaVars {
    pub dcm_w1: Var,
    pub dcm_w2: Var,
    pub scm_w: Var,
}

const NAMES: [&str; 3] = ["dcm_w1", "dcm_w2", "scm_w"];

/// Noise amplitude added to the identity maps at initialization.
const IDENTITY_NOISE: f64 = 0.01;

impl<T: Real> PscaParams<T> {
    /// `dcm_w1` starts near the identity and the scaling projection gets a
    /// fan-in uniform draw. `scm_w` starts at zero, so a block that adds the
    /// PSCA output to its input begins as a pass-through.
    pub fn init(channels: usize, rng: &mut impl Rng) -> Self {
        PscaParams {
            dcm_w1: near_identity(channels, IDENTITY_NOISE, rng),
            dcm_w2: uniform([channels, channels], (1.0 / channels as f64).sqrt(), rng),
            scm_w: Tensor::zeros([channels, channels]),
        }
    }

    pub fn channels(&self) -> usize {
        self.scm_w.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        3 * self.channels() * self.channels()
    }

    pub fn named(self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        let PscaParams { dcm_w1, dcm_w2, scm_w } = self;
        NAMES.iter().map(|n| join(prefix, n)).zip([dcm_w1, dcm_w2, scm_w]).collect()
    }

    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> PscaVars {
        PscaVars {
            dcm_w1: tape.leaf(self.dcm_w1.clone(), requires_grad),
            dcm_w2: tape.leaf(self.dcm_w2.clone(), requires_grad),
            scm_w: tape.leaf(self.scm_w.clone(), requires_grad),
        }
    }
}

impl PscaVars {
    pub fn lookup(vars: &ParamVars, prefix: &str) -> Result<Self> {
        Ok(PscaVars {
            dcm_w1: vars.get(&join(prefix, NAMES[0]))?,
            dcm_w2: vars.get(&join(prefix, NAMES[1]))?,
            scm_w: vars.get(&join(prefix, NAMES[2]))?,
        })
    }
}

/// Static channel mixing `x W` along `axis`.
pub fn scm<T: Real>(tape: &mut Tape<T>, x: Var, w: Var, axis: usize) -> Result<Var> {
    tape.linear(x, w, axis)
}

/// Dynamic channel mixing `(x * (x W2)) W1` along `axis`.
pub fn dcm<T: Real>(tape: &mut Tape<T>, x: Var, w1: Var, w2: Var, axis: usize) -> Result<Var> {
    let s = tape.linear(x, w2, axis)?;
    let scaled = tape.mul(x, s)?;
    tape.linear(scaled, w1, axis)
}

/// Full block on a `(B, C, S, H, W)` tensor.
pub fn psca_forward<T: Real>(tape: &mut Tape<T>, x: Var, p: &PscaVars) -> Result<Var> {
    tape.value(x).dims5()?;
    let d = dcm(tape, x, p.dcm_w1, p.dcm_w2, CHANNEL_AXIS)?;
    let g = tape.activation(d, Activation::Gelu)?;
    scm(tape, g, p.scm_w, CHANNEL_AXIS)
}
