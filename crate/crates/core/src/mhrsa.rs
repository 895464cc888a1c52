//! Multi-head recurrent spectral attention.
//!
//! Two bias-free MLPs map every feature vector to candidates
//! `Z = tanh(W1 tanh(W2 F))` and merging gates `W = sigmoid(W1' tanh(W2' F))`.
//! The candidates are then merged band by band with
//! `O_i = (1 - W_i) Z_i + W_i O_{i-1}`; the first half of the channels runs in
//! ascending band order and the second half descending, which gives every band
//! context from the whole spectrum at linear cost in the band count.

use rand::Rng;

use crate::error::{bail, Result};
use crate::ops::Direction;
use crate::params::{join, uniform, ParamVars};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const CHANNEL_AXIS: usize = 1;

/// The four `C x C` projection matrices of one block.
#[derive(Clone, Debug, PartialEq)]
pub struct MhrsaParams<T> {
    pub mlp1_w2: Tensor<T>,
    pub mlp1_w1: Tensor<T>,
    pub mlp2_w2: Tensor<T>,
    pub mlp2_w1: Tensor<T>,
}

/// Tape handles of [`MhrsaParams`].
#[derive(Clone, Copy, Debug)]
pub struct MhrsaVars {
    pub mlp1_w2: Var,
    pub mlp1_w1: Var,
    pub mlp2_w2: Var,
    pub mlp2_w1: Var,
}

const NAMES: [&str; 4] = ["mlp1_w2", "mlp1_w1", "mlp2_w2", "mlp2_w1"];

impl<T: Real> MhrsaParams<T> {
    /// Uniform fan-in initialization in `+-sqrt(1 / C)`.
    pub fn init(channels: usize, rng: &mut impl Rng) -> Self {
        let b = (1.0 / channels as f64).sqrt();
        let c = [channels, channels];
        MhrsaParams {
            mlp1_w2: uniform(c, b, rng),
            mlp1_w1: uniform(c, b, rng),
            mlp2_w2: uniform(c, b, rng),
            mlp2_w1: uniform(c, b, rng),
        }
    }

    pub fn zeros(channels: usize) -> Self {
        let z = Tensor::zeros([channels, channels]);
        MhrsaParams { mlp1_w2: z.clone(), mlp1_w1: z.clone(), mlp2_w2: z.clone(), mlp2_w1: z }
    }

    pub fn channels(&self) -> usize {
        self.mlp1_w2.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        4 * self.channels() * self.channels()
    }

    pub fn named(self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        let MhrsaParams { mlp1_w2, mlp1_w1, mlp2_w2, mlp2_w1 } = self;
        NAMES.iter().map(|n| join(prefix, n)).zip([mlp1_w2, mlp1_w1, mlp2_w2, mlp2_w1]).collect()
    }

    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> MhrsaVars {
        MhrsaVars {
            mlp1_w2: tape.leaf(self.mlp1_w2.clone(), requires_grad),
            mlp1_w1: tape.leaf(self.mlp1_w1.clone(), requires_grad),
            mlp2_w2: tape.leaf(self.mlp2_w2.clone(), requires_grad),
            mlp2_w1: tape.leaf(self.mlp2_w1.clone(), requires_grad),
        }
    }
}

impl MhrsaVars {
    pub fn lookup(vars: &ParamVars, prefix: &str) -> Result<Self> {
        Ok(MhrsaVars {
            mlp1_w2: vars.get(&join(prefix, NAMES[0]))?,
            mlp1_w1: vars.get(&join(prefix, NAMES[1]))?,
            mlp2_w2: vars.get(&join(prefix, NAMES[2]))?,
            mlp2_w1: vars.get(&join(prefix, NAMES[3]))?,
        })
    }
}

fn mlp<T: Real>(tape: &mut Tape<T>, f: Var, inner: Var, outer: Var) -> Result<Var> {
    let h = tape.linear(f, inner, CHANNEL_AXIS)?;
    let h = tape.tanh(h)?;
    tape.linear(h, outer, CHANNEL_AXIS)
}

/// Candidate features `Z` and merging gates `W` for a `(B, C, S, H, W)` input.
pub fn project<T: Real>(tape: &mut Tape<T>, f: Var, p: &MhrsaVars) -> Result<(Var, Var)> {
    let z = mlp(tape, f, p.mlp1_w2, p.mlp1_w1)?;
    let z = tape.tanh(z)?;
    let w = mlp(tape, f, p.mlp2_w2, p.mlp2_w1)?;
    let w = tape.sigmoid(w)?;
    Ok((z, w))
}

/// Single-direction recurrence over all channels.
pub fn recurrent_merge<T: Real>(tape: &mut Tape<T>, z: Var, w: Var, direction: Direction) -> Result<Var> {
    let split = match direction {
        Direction::Forward => tape.value(z).dims5()?[1],
        Direction::Backward => 0,
    };
    tape.spectral_merge(z, w, split)
}

/// Closed-form evaluation of the recurrence,
/// `O_j = sum_{i <= j} (1 - W_i) prod_{k = i+1..j} W_k Z_i`, by explicit
/// summation. Quadratic in the band count; a reference path only.
pub fn unrolled_oracle<T: Real>(z: &Tensor<T>, w: &Tensor<T>, direction: Direction) -> Result<Tensor<T>> {
    let [b, c, s, h, wd] = z.dims5()?;
    z.expect_same_shape(w)?;
    let mut out = Tensor::zeros(z.shape().to_vec());
    // position of band `i` along the traversal
    let order: Vec<usize> = match direction {
        Direction::Forward => (0..s).collect(),
        Direction::Backward => (0..s).rev().collect(),
    };
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..wd {
                    let at = |band: usize| [bi, ci, band, y, x];
                    for j in 0..s {
                        let mut acc = T::zero();
                        for i in 0..=j {
                            let mut weight = T::one() - w.at(&at(order[i]));
                            for &k in &order[i + 1..=j] {
                                weight = weight * w.at(&at(k));
                            }
                            acc = acc + weight * z.at(&at(order[i]));
                        }
                        let off = out.offset(&at(order[j]));
                        out.data_mut()[off] = acc;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Output of [`mhrsa_forward`]: merged features plus the gates used.
#[derive(Clone, Copy, Debug)]
pub struct MhrsaOutput {
    pub output: Var,
    pub gates: Var,
}

/// Full block: projection, then channels `[0, C/2)` merged in ascending band
/// order and `[C/2, C)` descending. Requires an even channel count.
pub fn mhrsa_forward<T: Real>(tape: &mut Tape<T>, f: Var, p: &MhrsaVars) -> Result<MhrsaOutput> {
    let c = tape.value(f).dims5()?[1];
    if c % 2 != 0 {
        bail!(Config, "multi-head spectral attention needs an even channel count, got {c}");
    }
    let (z, w) = project(tape, f, p)?;
    let output = tape.spectral_merge(z, w, c / 2)?;
    Ok(MhrsaOutput { output, gates: w })
}

/// Mean effective weight of band `i` on output band `j` implied by a gate
/// tensor `(B, C, S, H, W)`: entry `[j][i]` averages, over batch, pixels and
/// channels, `(1 - W_i) prod_{k between i and j} W_k` for channels whose head
/// direction reaches `j` from `i`, and zero otherwise.
pub fn spectral_attention_summary<T: Real>(gates: &Tensor<T>) -> Result<Vec<Vec<f64>>> {
    let [b, c, s, h, wd] = gates.dims5()?;
    let split = c / 2;
    let mut m = vec![vec![0.0; s]; s];
    let plane = h * wd;
    for bi in 0..b {
        for ci in 0..c {
            let dir = if ci < split { Direction::Forward } else { Direction::Backward };
            for p in 0..plane {
                let g = |band: usize| gates.data()[((bi * c + ci) * s + band) * plane + p].as_f64();
                for j in 0..s {
                    let sources: Vec<usize> = match dir {
                        Direction::Forward => (0..=j).collect(),
                        Direction::Backward => (j..s).collect(),
                    };
                    for i in sources {
                        let between: Vec<usize> = match dir {
                            Direction::Forward => (i + 1..=j).collect(),
                            Direction::Backward => (j..i).collect(),
                        };
                        let weight = (1.0 - g(i)) * between.iter().map(|&k| g(k)).product::<f64>();
                        m[j][i] += weight;
                    }
                }
            }
        }
    }
    let n = (b * c * plane) as f64;
    for row in &mut m {
        for v in row.iter_mut() {
            *v /= n;
        }
    }
    Ok(m)
}
