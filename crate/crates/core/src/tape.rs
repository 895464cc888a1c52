//! Reverse-mode differentiation tape.
//!
//! Every operation appends a node holding its value and an adjoint rule. Nodes
//! only reference earlier nodes, so the recording order is a topological
//! order and [`Tape::backward`] visits it in exact reverse.
//!
//! ```
//! use hsiman_core::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap(), true);
//! let y = tape.mul(x, x).unwrap();
//! let loss = tape.sum(y).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

use crate::error::{bail, Error, Result};
use crate::ops::{self, Activation, Conv3dGeometry};
use crate::real::Real;
use crate::tensor::{split_axis, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Adjoint rule of a user-defined op: `(inputs, output, grad_output)` to one
/// gradient per input.
pub type CustomBackward<T> =
    Box<dyn Fn(&[&Tensor<T>], &Tensor<T>, &Tensor<T>) -> Vec<Tensor<T>> + Send + Sync>;

enum Op<T> {
    Leaf,
    Conv3d { x: Var, k: Var, geom: Conv3dGeometry },
    ConvTranspose3d { x: Var, k: Var, geom: Conv3dGeometry },
    Linear { x: Var, w: Var, axis: usize },
    Bias { x: Var, b: Var, axis: usize },
    Act { x: Var, kind: Activation },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale { x: Var, alpha: T },
    Blend { gate: Var, lo: Var, hi: Var },
    Concat { a: Var, b: Var, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    SpectralMerge { z: Var, w: Var, split: usize },
    Sum(Var),
    Mean(Var),
    Mse { pred: Var, target: Var },
    Custom { inputs: Vec<Var>, backward: CustomBackward<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records tensor operations for reverse-mode differentiation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one backward pass, indexed by leaf.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf, `None` if it does not require gradients or the
    /// output does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn conv3d(&mut self, x: Var, k: Var, geom: Conv3dGeometry) -> Result<Var> {
        let y = ops::conv3d(self.value(x), self.value(k), geom)?;
        self.push("conv3d", y, Op::Conv3d { x, k, geom }, &[x, k])
    }

    /// Transposed convolution, kernel `(Cin, Cout, kS, kH, kW)`.
    pub fn conv_transpose3d(
        &mut self,
        x: Var,
        k: Var,
        geom: Conv3dGeometry,
        output_padding: [usize; 3],
    ) -> Result<Var> {
        let y = ops::conv_transpose3d(self.value(x), self.value(k), geom, output_padding)?;
        self.push("conv_transpose3d", y, Op::ConvTranspose3d { x, k, geom }, &[x, k])
    }

    /// Linear map `w: [C, C']` along `axis` at every other index.
    pub fn linear(&mut self, x: Var, w: Var, axis: usize) -> Result<Var> {
        let y = ops::linear_along(self.value(x), self.value(w), axis)?;
        self.push("linear", y, Op::Linear { x, w, axis }, &[x, w])
    }

    /// Linear map along the last axis with an optional bias.
    pub fn pointwise_linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let axis = self.value(x).ndim().checked_sub(1).ok_or_else(|| {
            Error::Dimension("pointwise_linear needs at least one axis".into())
        })?;
        let y = self.linear(x, w, axis)?;
        match bias {
            Some(b) => self.add_bias(y, b, axis),
            None => Ok(y),
        }
    }

    pub fn add_bias(&mut self, x: Var, b: Var, axis: usize) -> Result<Var> {
        let y = ops::add_bias(self.value(x), self.value(b), axis)?;
        self.push("bias", y, Op::Bias { x, b, axis }, &[x, b])
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let y = self.value(x).map(|v| kind.apply(v));
        self.push(kind.name(), y, Op::Act { x, kind }, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).add(self.value(b))?;
        self.push("add", y, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).sub(self.value(b))?;
        self.push("sub", y, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).mul(self.value(b))?;
        self.push("mul", y, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, alpha: T) -> Result<Var> {
        let y = self.value(x).scale(alpha);
        self.push("scale", y, Op::Scale { x, alpha }, &[x])
    }

    /// Elementwise `(1 - gate) * lo + gate * hi`, evaluated as
    /// `lo + gate * (hi - lo)` so equal inputs pass through exactly.
    pub fn blend(&mut self, gate: Var, lo: Var, hi: Var) -> Result<Var> {
        let (m, l, h) = (self.value(gate), self.value(lo), self.value(hi));
        m.expect_same_shape(l)?;
        let y = l.zip_map(h, |a, b| b - a)?.zip_map(m, |d, g| g * d)?.zip_map(l, |gd, a| a + gd)?;
        self.push("blend", y, Op::Blend { gate, lo, hi }, &[gate, lo, hi])
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let y = self.value(a).concat(self.value(b), axis)?;
        self.push("concat", y, Op::Concat { a, b, axis }, &[a, b])
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let y = self.value(x).narrow(axis, start, len)?;
        self.push("narrow", y, Op::Narrow { x, axis, start }, &[x])
    }

    /// Gated band recurrence; channels below `split` run in ascending band
    /// order, the rest descending.
    pub fn spectral_merge(&mut self, z: Var, w: Var, split: usize) -> Result<Var> {
        let y = ops::spectral_merge(self.value(z), self.value(w), split)?;
        self.push("spectral_merge", y, Op::SpectralMerge { z, w, split }, &[z, w])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let y = Tensor::scalar(self.value(x).sum());
        self.push("sum", y, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let y = Tensor::scalar(t.sum() / T::lit(t.len() as f64));
        self.push("mean", y, Op::Mean(x), &[x])
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        p.expect_same_shape(t)?;
        let n = T::lit(p.len() as f64);
        let s: T = p.data().iter().zip(t.data()).map(|(&a, &b)| (a - b) * (a - b)).sum();
        self.push("mse", Tensor::scalar(s / n), Op::Mse { pred, target }, &[pred, target])
    }

    /// Records an op with a caller-supplied value and adjoint rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<T>, backward: CustomBackward<T>) -> Result<Var> {
        let op = Op::Custom { inputs: inputs.to_vec(), backward };
        self.push("custom", value, op, inputs)
    }

    /// Propagates `d output / d leaf` to every leaf that requires gradients.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let out_val = self.value(output);
        if !out_val.is_scalar() {
            bail!(Contract, "backward needs a scalar output, got shape {:?}", out_val.shape());
        }
        let n = output.0 + 1;
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        if self.nodes[output.0].requires_grad {
            grads[output.0] = Some(Tensor::full(out_val.shape().to_vec(), T::one()));
        }
        for id in (0..n).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            let mut acc = Accumulator { tape: self, grads: &mut grads, node: id };
            match &node.op {
                Op::Leaf => {
                    acc.grads[id] = Some(g);
                }
                &Op::Conv3d { x, k, geom } => {
                    if acc.wants(x) {
                        let xs = self.value(x).shape();
                        acc.add(x, ops::conv3d_grad_input(&g, self.value(k), xs, geom)?)?;
                    }
                    if acc.wants(k) {
                        let ks = self.value(k).shape();
                        acc.add(k, ops::conv3d_grad_kernel(self.value(x), &g, ks, geom)?)?;
                    }
                }
                &Op::ConvTranspose3d { x, k, geom } => {
                    if acc.wants(x) {
                        acc.add(x, ops::conv3d(&g, self.value(k), geom)?)?;
                    }
                    if acc.wants(k) {
                        let ks = self.value(k).shape();
                        acc.add(k, ops::conv3d_grad_kernel(&g, self.value(x), ks, geom)?)?;
                    }
                }
                &Op::Linear { x, w, axis } => {
                    if acc.wants(x) {
                        acc.add(x, ops::linear_grad_input(&g, self.value(w), axis)?)?;
                    }
                    if acc.wants(w) {
                        acc.add(w, ops::linear_grad_weight(self.value(x), &g, axis)?)?;
                    }
                }
                &Op::Bias { x, b, axis } => {
                    if acc.wants(b) {
                        acc.add(b, ops::bias_grad(&g, axis)?)?;
                    }
                    acc.add(x, g)?;
                }
                &Op::Act { x, kind } => {
                    let xv = self.value(x);
                    let d = xv.zip_map(&node.value, |a, y| kind.derivative(a, y))?;
                    acc.add(x, d.mul(&g)?)?;
                }
                &Op::Add(a, b) => {
                    if acc.wants(b) {
                        acc.add(b, g.clone())?;
                    }
                    acc.add(a, g)?;
                }
                &Op::Sub(a, b) => {
                    if acc.wants(b) {
                        acc.add(b, g.scale(-T::one()))?;
                    }
                    acc.add(a, g)?;
                }
                &Op::Mul(a, b) => {
                    if acc.wants(a) {
                        acc.add(a, g.mul(self.value(b))?)?;
                    }
                    if acc.wants(b) {
                        acc.add(b, g.mul(self.value(a))?)?;
                    }
                }
                &Op::Scale { x, alpha } => acc.add(x, g.scale(alpha))?,
                &Op::Blend { gate, lo, hi } => {
                    let m = self.value(gate);
                    if acc.wants(gate) {
                        let d = self.value(hi).sub(self.value(lo))?;
                        acc.add(gate, d.mul(&g)?)?;
                    }
                    if acc.wants(lo) {
                        acc.add(lo, m.zip_map(&g, |mv, gv| (T::one() - mv) * gv)?)?;
                    }
                    if acc.wants(hi) {
                        acc.add(hi, m.mul(&g)?)?;
                    }
                }
                &Op::Concat { a, b, axis } => {
                    let ca = self.value(a).shape()[axis];
                    let cb = self.value(b).shape()[axis];
                    if acc.wants(a) {
                        acc.add(a, g.narrow(axis, 0, ca)?)?;
                    }
                    if acc.wants(b) {
                        acc.add(b, g.narrow(axis, ca, cb)?)?;
                    }
                }
                &Op::Narrow { x, axis, start } => {
                    let xs = self.value(x).shape();
                    let (outer, c, inner) = split_axis(xs, axis)?;
                    let len = g.shape()[axis];
                    let mut full = Tensor::zeros(xs.to_vec());
                    for o in 0..outer {
                        let dst = (o * c + start) * inner;
                        full.data_mut()[dst..dst + len * inner]
                            .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                    }
                    acc.add(x, full)?;
                }
                &Op::SpectralMerge { z, w, split } => {
                    let (dz, dw) = ops::spectral_merge_backward(
                        self.value(z),
                        self.value(w),
                        &node.value,
                        &g,
                        split,
                    )?;
                    acc.add(z, dz)?;
                    acc.add(w, dw)?;
                }
                &Op::Sum(x) => {
                    let gv = g.item()?;
                    acc.add(x, Tensor::full(self.value(x).shape().to_vec(), gv))?;
                }
                &Op::Mean(x) => {
                    let xv = self.value(x);
                    let gv = g.item()? / T::lit(xv.len() as f64);
                    acc.add(x, Tensor::full(xv.shape().to_vec(), gv))?;
                }
                &Op::Mse { pred, target } => {
                    let (p, t) = (self.value(pred), self.value(target));
                    let scale = g.item()? * T::lit(2.0) / T::lit(p.len() as f64);
                    let d = p.zip_map(t, |a, b| (a - b) * scale)?;
                    if acc.wants(target) {
                        acc.add(target, d.scale(-T::one()))?;
                    }
                    acc.add(pred, d)?;
                }
                Op::Custom { inputs, backward } => {
                    let vals: Vec<&Tensor<T>> = inputs.iter().map(|v| self.value(*v)).collect();
                    let gs = backward(&vals, &node.value, &g);
                    if gs.len() != inputs.len() {
                        bail!(Internal, "custom op returned {} gradients for {} inputs", gs.len(), inputs.len());
                    }
                    for (&v, gi) in inputs.iter().zip(gs) {
                        acc.add(v, gi)?;
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

struct Accumulator<'a, T> {
    tape: &'a Tape<T>,
    grads: &'a mut Vec<Option<Tensor<T>>>,
    node: usize,
}

impl<T: Real> Accumulator<'_, T> {
    fn wants(&self, v: Var) -> bool {
        self.tape.nodes[v.0].requires_grad
    }

    fn add(&mut self, v: Var, g: Tensor<T>) -> Result<()> {
        if v.0 >= self.node {
            bail!(Internal, "node {} references later node {}", self.node, v.0);
        }
        if !self.wants(v) {
            return Ok(());
        }
        self.tape.value(v).expect_same_shape(&g)?;
        match &mut self.grads[v.0] {
            Some(existing) => existing.add_assign(&g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }
}
