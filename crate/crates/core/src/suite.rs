//! Gradient checks over every differentiable building block and the full
//! network, shared by the test suites and the command-line `gradcheck` verb.

use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::asc::{asc_fuse, AscParams, AscVars};
use crate::error::Result;
use crate::gradcheck::{gradcheck, gradcheck_at, GradcheckReport, GRADCHECK_EPS};
use crate::mhrsa::{mhrsa_forward, MhrsaParams, MhrsaVars};
use crate::network::{man_forward, Man, ManConfig};
use crate::ops::{Activation, Conv3dGeometry, DEFAULT_LEAKY_SLOPE};
use crate::params::uniform;
use crate::psca::{psca_forward, PscaVars};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Bound on the relative error of a single op.
pub const OP_TOLERANCE: f64 = 1e-5;
/// Bound on the relative error of the end-to-end network loss.
pub const MODEL_TOLERANCE: f64 = 1e-4;

/// Coordinates probed per parameter tensor in the network check.
const MODEL_COORDS_PER_TENSOR: usize = 6;

/// One checked (op, shape, differentiated input) triple.
#[derive(Clone, Debug)]
pub struct SuiteEntry {
    /// Op family, e.g. `conv3d`.
    pub group: String,
    /// Shape and input detail.
    pub case: String,
    pub report: GradcheckReport,
    pub tolerance: f64,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < self.tolerance
    }
}

/// Largest error per group, in first-seen group order.
pub fn worst_per_group(entries: &[SuiteEntry]) -> Vec<(String, f64, f64)> {
    let mut out: Vec<(String, f64, f64)> = Vec::new();
    for e in entries {
        match out.iter_mut().find(|(g, _, _)| *g == e.group) {
            Some(slot) => slot.1 = slot.1.max(e.report.max_rel_error),
            None => out.push((e.group.clone(), e.report.max_rel_error, e.tolerance)),
        }
    }
    out
}

/// Fixed irregular weights so the scalar objective sees every output element
/// with a distinct coefficient.
fn probe_weights(shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |i| (1.7 * i as f64 + 0.3).sin() + 0.25)
}

fn weighted_sum(tape: &mut Tape<f64>, y: Var) -> Result<Var> {
    let r = probe_weights(tape.value(y).shape());
    let r = tape.constant(r);
    let p = tape.mul(y, r)?;
    tape.sum(p)
}

type CaseFn<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a;

/// Gradchecks `f` with respect to each named input in turn, holding the rest
/// constant.
fn check_inputs(group: &str, case: &str, inputs: &[(&str, Tensor<f64>)], f: &CaseFn) -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::with_capacity(inputs.len());
    for (k, (label, value)) in inputs.iter().enumerate() {
        let report = gradcheck(
            |t, x| {
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, (_, v))| if j == k { x } else { t.constant(v.clone()) })
                    .collect();
                let y = f(t, &vars)?;
                weighted_sum(t, y)
            },
            value,
            GRADCHECK_EPS,
        )?;
        out.push(SuiteEntry {
            group: group.to_string(),
            case: format!("{case} d/d{label}"),
            report,
            tolerance: OP_TOLERANCE,
        });
    }
    Ok(out)
}

fn rand_t(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor<f64> {
    uniform(shape.to_vec(), bound, rng)
}

/// Values with magnitude in `[0.1, 1.1]`, away from the kink of leaky ReLU.
fn off_zero(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(0.1..1.1);
        if rng.random_bool(0.5) { m } else { -m }
    })
}

fn conv_cases(rng: &mut impl Rng) -> Result<Vec<SuiteEntry>> {
    let cases: [([usize; 5], [usize; 5], [usize; 3], [usize; 3]); 5] = [
        ([1, 2, 3, 4, 4], [3, 2, 3, 3, 3], [1, 1, 1], [1, 1, 1]),
        ([2, 1, 1, 1, 1], [2, 1, 3, 3, 3], [1, 1, 1], [1, 1, 1]),
        ([1, 2, 4, 6, 6], [2, 2, 3, 3, 3], [1, 2, 2], [1, 1, 1]),
        ([1, 3, 2, 5, 3], [1, 3, 1, 3, 1], [1, 1, 1], [0, 1, 0]),
        ([1, 1, 5, 1, 4], [2, 1, 3, 1, 3], [2, 1, 1], [1, 0, 1]),
    ];
    let mut out = Vec::new();
    for (xs, ks, stride, pad) in cases {
        let geom = Conv3dGeometry::new(stride, pad);
        let inputs = [("x", rand_t(&xs, 1.0, rng)), ("k", rand_t(&ks, 0.5, rng))];
        let case = format!("x{xs:?} k{ks:?} stride{stride:?} pad{pad:?}");
        out.extend(check_inputs("conv3d", &case, &inputs, &|t, v| t.conv3d(v[0], v[1], geom))?);
    }
    let cases: [([usize; 5], [usize; 5], [usize; 3]); 5] = [
        ([1, 2, 2, 3, 3], [2, 3, 3, 3, 3], [0, 1, 1]),
        ([1, 1, 1, 1, 1], [1, 2, 3, 3, 3], [0, 1, 1]),
        ([2, 2, 3, 2, 1], [2, 1, 3, 3, 3], [0, 1, 1]),
        ([1, 3, 1, 2, 2], [3, 2, 3, 3, 3], [0, 0, 0]),
        ([1, 1, 4, 1, 2], [1, 1, 3, 3, 3], [0, 1, 0]),
    ];
    for (xs, ks, outpad) in cases {
        let geom = Conv3dGeometry::new([1, 2, 2], [1, 1, 1]);
        let inputs = [("x", rand_t(&xs, 1.0, rng)), ("k", rand_t(&ks, 0.5, rng))];
        let case = format!("x{xs:?} k{ks:?} output_padding{outpad:?}");
        out.extend(check_inputs("conv_transpose3d", &case, &inputs, &|t, v| {
            t.conv_transpose3d(v[0], v[1], geom, outpad)
        })?);
    }
    Ok(out)
}

fn linear_cases(rng: &mut impl Rng) -> Result<Vec<SuiteEntry>> {
    let cases: [(&[usize], usize); 5] =
        [(&[3], 2), (&[1, 1], 1), (&[2, 3, 4], 3), (&[1, 2, 1, 3], 5), (&[2, 1, 1, 1, 5], 4)];
    let mut out = Vec::new();
    for (xs, c_out) in cases {
        let c_in = xs[xs.len() - 1];
        let inputs = [
            ("x", rand_t(xs, 1.0, rng)),
            ("w", rand_t(&[c_in, c_out], 1.0, rng)),
            ("b", rand_t(&[c_out], 1.0, rng)),
        ];
        let case = format!("x{xs:?} -> {c_out}");
        out.extend(check_inputs("pointwise_linear", &case, &inputs, &|t, v| {
            t.pointwise_linear(v[0], v[1], Some(v[2]))
        })?);
    }
    Ok(out)
}

fn activation_cases(rng: &mut impl Rng) -> Result<Vec<SuiteEntry>> {
    let shapes: [&[usize]; 5] = [&[1], &[1, 1, 1, 1, 1], &[2, 3], &[1, 2, 3, 2, 2], &[4, 1, 3]];
    let kinds = [
        Activation::Tanh,
        Activation::Sigmoid,
        Activation::Gelu,
        Activation::LeakyRelu(DEFAULT_LEAKY_SLOPE),
    ];
    let mut out = Vec::new();
    for kind in kinds {
        for shape in shapes {
            let inputs = [("x", off_zero(shape, rng).map(|v| 2.0 * v))];
            let case = format!("x{shape:?}");
            out.extend(check_inputs(kind.name(), &case, &inputs, &|t, v| t.activation(v[0], kind))?);
        }
    }
    Ok(out)
}

/// Gate values kept inside `[0.1, 0.9]` so the probe never leaves `(0, 1)`.
fn gates(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(0.1..0.9))
}

fn merge_cases(rng: &mut impl Rng) -> Result<Vec<SuiteEntry>> {
    let cases: [([usize; 5], usize); 5] = [
        ([1, 2, 3, 2, 2], 1),
        ([1, 1, 1, 1, 1], 0),
        ([2, 2, 5, 1, 1], 2),
        ([1, 4, 8, 2, 1], 2),
        ([1, 3, 2, 1, 3], 1),
    ];
    let mut out = Vec::new();
    for (shape, split) in cases {
        let inputs = [("z", rand_t(&shape, 1.0, rng)), ("w", gates(&shape, rng))];
        let case = format!("{shape:?} split {split}");
        out.extend(check_inputs("spectral_merge", &case, &inputs, &|t, v| t.spectral_merge(v[0], v[1], split))?);
    }
    Ok(out)
}

fn elementwise_cases(rng: &mut impl Rng) -> Result<Vec<SuiteEntry>> {
    let shapes: [&[usize]; 5] = [&[1], &[2, 3], &[1, 1, 1, 1, 1], &[1, 2, 3, 1, 2], &[3, 1, 2]];
    let mut out = Vec::new();
    for shape in shapes {
        let case = format!("{shape:?}");
        let two = [("a", rand_t(shape, 1.0, rng)), ("b", rand_t(shape, 1.0, rng))];
        out.extend(check_inputs("add", &case, &two, &|t, v| t.add(v[0], v[1]))?);
        out.extend(check_inputs("sub", &case, &two, &|t, v| t.sub(v[0], v[1]))?);
        out.extend(check_inputs("mul", &case, &two, &|t, v| t.mul(v[0], v[1]))?);
        out.extend(check_inputs("mse", &case, &two, &|t, v| t.mse(v[0], v[1]))?);
        out.extend(check_inputs("mean", &case, &two[..1], &|t, v| t.mean(v[0]))?);
        out.extend(check_inputs("scale", &case, &two[..1], &|t, v| t.scale(v[0], -1.5))?);
        let three = [("m", gates(shape, rng)), two[0].clone(), two[1].clone()];
        out.extend(check_inputs("blend", &case, &three, &|t, v| t.blend(v[0], v[1], v[2]))?);
        let axis = shape.len() - 1;
        let n = shape[axis];
        out.extend(check_inputs("concat", &case, &two, &|t, v| t.concat(v[0], v[1], axis))?);
        out.extend(check_inputs("narrow", &case, &two[..1], &|t, v| t.narrow(v[0], axis, n - 1, 1))?);
        let bias = [two[0].clone(), ("bias", rand_t(&[shape[0]], 1.0, rng))];
        out.extend(check_inputs("add_bias", &case, &bias, &|t, v| t.add_bias(v[0], v[1], 0))?);
    }
    Ok(out)
}

const BLOCK_SHAPES: [[usize; 5]; 5] =
    [[1, 2, 1, 1, 1], [1, 2, 3, 2, 2], [1, 4, 4, 2, 3], [2, 4, 2, 1, 1], [1, 6, 5, 1, 2]];

fn mhrsa_cases(rng: &mut impl Rng) -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::new();
    for shape in BLOCK_SHAPES {
        let c = shape[1];
        let p = MhrsaParams::<f64>::init(c, rng);
        let inputs = [
            ("F", rand_t(&shape, 1.0, rng)),
            ("mlp1_w2", p.mlp1_w2),
            ("mlp1_w1", p.mlp1_w1),
            ("mlp2_w2", p.mlp2_w2),
            ("mlp2_w1", p.mlp2_w1),
        ];
        let case = format!("{shape:?}");
        out.extend(check_inputs("mhrsa_forward", &case, &inputs, &|t, v| {
            let vars = MhrsaVars { mlp1_w2: v[1], mlp1_w1: v[2], mlp2_w2: v[3], mlp2_w1: v[4] };
            Ok(mhrsa_forward(t, v[0], &vars)?.output)
        })?);
    }
    Ok(out)
}

fn psca_cases(rng: &mut impl Rng) -> Result<Vec<SuiteEntry>> {
    let shapes = [[1, 1, 1, 1, 1], [1, 2, 3, 2, 2], [1, 3, 2, 2, 2], [2, 4, 1, 3, 1], [1, 5, 2, 1, 2]];
    let mut out = Vec::new();
    for shape in shapes {
        let c = shape[1];
        // A generic point; the default initialization zeroes scm_w.
        let inputs = [
            ("x", rand_t(&shape, 1.0, rng)),
            ("dcm_w1", rand_t(&[c, c], 0.8, rng)),
            ("dcm_w2", rand_t(&[c, c], 0.8, rng)),
            ("scm_w", rand_t(&[c, c], 0.8, rng)),
        ];
        let case = format!("{shape:?}");
        out.extend(check_inputs("psca_forward", &case, &inputs, &|t, v| {
            let vars = PscaVars { dcm_w1: v[1], dcm_w2: v[2], scm_w: v[3] };
            psca_forward(t, v[0], &vars)
        })?);
    }
    Ok(out)
}

fn asc_cases(rng: &mut impl Rng) -> Result<Vec<SuiteEntry>> {
    let shapes = [[1, 1, 1, 1, 1], [1, 2, 2, 3, 3], [1, 3, 1, 2, 4], [2, 2, 3, 1, 1], [1, 4, 2, 3, 2]];
    let mut out = Vec::new();
    for shape in shapes {
        let c = shape[1];
        let p = AscParams::<f64>::init(c, rng);
        // Non-zero gate weights so every parameter influences the output.
        let inputs = [
            ("Fd", rand_t(&shape, 1.0, rng)),
            ("Fe", rand_t(&shape, 1.0, rng)),
            ("fuse_w", p.fuse_w),
            ("fuse_b", p.fuse_b),
            ("gate_w", rand_t(&[c, c, 1, 3, 3], 0.5, rng)),
            ("gate_b", rand_t(&[c], 0.5, rng)),
        ];
        let case = format!("{shape:?}");
        out.extend(check_inputs("asc_fuse", &case, &inputs, &|t, v| {
            let vars = AscVars { fuse_w: v[2], fuse_b: v[3], gate_w: v[4], gate_b: v[5] };
            Ok(asc_fuse(t, v[0], v[1], &vars, DEFAULT_LEAKY_SLOPE)?.output)
        })?);
    }
    Ok(out)
}

/// Every op family at five shapes each, including extents of one.
pub fn op_gradchecks(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = conv_cases(&mut rng)?;
    out.extend(linear_cases(&mut rng)?);
    out.extend(activation_cases(&mut rng)?);
    out.extend(merge_cases(&mut rng)?);
    out.extend(elementwise_cases(&mut rng)?);
    out.extend(mhrsa_cases(&mut rng)?);
    out.extend(psca_cases(&mut rng)?);
    out.extend(asc_cases(&mut rng)?);
    Ok(out)
}

/// End-to-end MSE loss of the tiny network at a random point near
/// initialization, differentiated with respect to the input cube and a sample
/// of every parameter tensor.
pub fn model_gradcheck(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ManConfig::variant("tiny", 3)?;
    let mut man = Man::<f64>::init(cfg.clone(), &mut rng)?;
    // Move zero-initialized tensors off zero so their gradients are not
    // trivially zero.
    for (_, t) in man.params.iter_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.05..0.05);
        }
    }
    let x = rand_t(&[1, 1, 3, 8, 8], 1.0, &mut rng).map(|v| 0.5 + 0.5 * v);
    let target = rand_t(&[1, 1, 3, 8, 8], 1.0, &mut rng).map(|v| 0.5 + 0.5 * v);
    let entry = |case: String, report| SuiteEntry {
        group: "man_tiny_mse".into(),
        case,
        report,
        tolerance: MODEL_TOLERANCE,
    };

    let mut out = Vec::new();
    let report = gradcheck(
        |t, xv| {
            let vars = man.params.bind(t, false);
            let y = t.constant(target.clone());
            let o = man_forward(t, xv, &vars, &cfg)?;
            t.mse(o.output, y)
        },
        &x,
        GRADCHECK_EPS,
    )?;
    out.push(entry("d/dinput".into(), report));
    for (name, p) in man.params.iter() {
        let step = (p.len() / MODEL_COORDS_PER_TENSOR).max(1);
        let coords: Vec<usize> = (0..p.len()).step_by(step).take(MODEL_COORDS_PER_TENSOR).collect();
        let report = gradcheck_at(
            |t, pv| {
                let mut vars = man.params.bind(t, false);
                vars.set(name, pv)?;
                let xv = t.constant(x.clone());
                let y = t.constant(target.clone());
                let o = man_forward(t, xv, &vars, &cfg)?;
                t.mse(o.output, y)
            },
            p,
            GRADCHECK_EPS,
            &coords,
        )?;
        out.push(entry(format!("d/d{name}"), report));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grouping_keeps_the_worst_error() {
        let r = |e| GradcheckReport { max_rel_error: e, worst_index: 0, analytic: 0.0, numeric: 0.0, checked: 1 };
        let e = |g: &str, v| SuiteEntry { group: g.into(), case: String::new(), report: r(v), tolerance: 1.0 };
        let w = worst_per_group(&[e("a", 1e-7), e("b", 2.0), e("a", 3e-6)]);
        assert_eq!(w, vec![("a".to_string(), 3e-6, 1.0), ("b".to_string(), 2.0, 1.0)]);
    }
}
