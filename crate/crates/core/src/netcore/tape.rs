//! A small reverse-mode recorder over the primitives in [`super::ops`].
//!
//! Values are computed eagerly as ops are recorded. `backward` walks the
//! recorded nodes in reverse and returns the gradient of a scalar loss with
//! respect to every leaf and parameter node that requires one.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use super::ops;
use super::params::ParamCollection;
use crate::error::{Error, Result};
use crate::sparsity::{self, Axis, SparseMask};
use crate::tensor::{Real, Tensor};

/// Handle to a recorded value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T: Real> {
    Leaf,
    Param(String),
    Linear(Var, Var, Var),
    Conv3x3(Var, Var, Var),
    Upsample(Var),
    Downsample(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Tanh(Var),
    Mask(Var, SparseMask),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    SumSquares(Var),
}

#[derive(Debug)]
struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    param_grads: bool,
    frozen: Vec<String>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            param_grads: true,
            frozen: Vec::new(),
        }
    }

    /// Parameters whose name starts with `prefix` are recorded as constants.
    pub fn freeze(mut self, prefix: &str) -> Self {
        self.frozen.push(prefix.to_string());
        self
    }

    /// A tape whose parameter nodes are treated as constants. Used when only
    /// input gradients are wanted, e.g. for Langevin updates of latent codes.
    pub fn without_param_grads() -> Self {
        Tape {
            nodes: Vec::new(),
            param_grads: false,
            frozen: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, params: &ParamCollection<T>, name: &str) -> Result<Var> {
        let p = params.get(name)?;
        let rg = self.param_grads && !self.frozen.iter().any(|f| name.starts_with(f.as_str()));
        Ok(self.push(p.value.clone(), Op::Param(name.to_string()), rg))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = ops::linear_forward(self.value(x), self.value(w), self.value(b))?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(out, Op::Linear(x, w, b), rg))
    }

    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = ops::conv3x3_forward(self.value(x), self.value(w), self.value(b))?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(out, Op::Conv3x3(x, w, b), rg))
    }

    pub fn upsample(&mut self, x: Var) -> Result<Var> {
        let out = ops::upsample_forward(self.value(x))?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Upsample(x), rg))
    }

    pub fn downsample(&mut self, x: Var) -> Result<Var> {
        let out = ops::downsample_forward(self.value(x))?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Downsample(x), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = ops::relu(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let out = ops::leaky_relu(self.value(x), slope);
        let rg = self.rg(x);
        self.push(out, Op::LeakyRelu(x, slope), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = ops::tanh(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::Tanh(x), rg)
    }

    /// Applies a top-k operator and records its mask for the backward pass.
    pub fn topk(&mut self, x: Var, axis: Axis, k: usize) -> Result<(Var, SparseMask)> {
        let (out, mask) = sparsity::topk(self.value(x), axis, k)?;
        let rg = self.rg(x);
        let v = self.push(out, Op::Mask(x, mask.clone()), rg);
        Ok((v, mask))
    }

    /// Gates `x` with a given mask.
    pub fn mask(&mut self, x: Var, mask: SparseMask) -> Result<Var> {
        let out = mask.apply(self.value(x))?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Mask(x, mask), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).scale(s);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, s), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(out, Op::Sum(x), rg)
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum_squares());
        let rg = self.rg(x);
        self.push(out, Op::SumSquares(x), rg)
    }

    /// Hash of every piecewise-linear branch taken (ReLU signs and top-k
    /// masks). Two forward passes with equal signatures lie on the same
    /// smooth piece of the recorded function.
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) | Op::LeakyRelu(x, _) => {
                    for v in self.nodes[x.0].value.data() {
                        (*v > T::zero()).hash(&mut h);
                    }
                }
                Op::Mask(_, m) => m.keep().hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf | Op::Param(_) => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Linear(x, w, b) => {
                    let need_params = self.rg(*w) || self.rg(*b);
                    let r = ops::linear_backward(self.value(*x), self.value(*w), self.value(*b), &g, self.rg(*x), need_params)?;
                    self.acc(&mut grads, *x, r.x)?;
                    self.acc(&mut grads, *w, r.w)?;
                    self.acc(&mut grads, *b, r.b)?;
                }
                Op::Conv3x3(x, w, b) => {
                    let need_params = self.rg(*w) || self.rg(*b);
                    let r = ops::conv3x3_backward(self.value(*x), self.value(*w), self.value(*b), &g, self.rg(*x), need_params)?;
                    self.acc(&mut grads, *x, r.x)?;
                    self.acc(&mut grads, *w, r.w)?;
                    self.acc(&mut grads, *b, r.b)?;
                }
                Op::Upsample(x) => {
                    let gx = ops::upsample_backward(self.value(*x).shape(), &g)?;
                    self.acc(&mut grads, *x, Some(gx))?;
                }
                Op::Downsample(x) => {
                    let gx = ops::downsample_backward(self.value(*x).shape(), &g)?;
                    self.acc(&mut grads, *x, Some(gx))?;
                }
                Op::Relu(x) => {
                    let gx = ops::relu_backward(self.value(*x), &g)?;
                    self.acc(&mut grads, *x, Some(gx))?;
                }
                Op::LeakyRelu(x, slope) => {
                    let gx = ops::leaky_relu_backward(self.value(*x), *slope, &g)?;
                    self.acc(&mut grads, *x, Some(gx))?;
                }
                Op::Tanh(x) => {
                    let gx = ops::tanh_backward(&node.value, &g)?;
                    self.acc(&mut grads, *x, Some(gx))?;
                }
                Op::Mask(x, mask) => {
                    let gx = sparsity::sparse_backward_rule(mask, &g)?;
                    self.acc(&mut grads, *x, Some(gx))?;
                }
                Op::Reshape(x) => {
                    let gx = g.reshape(self.value(*x).shape())?;
                    self.acc(&mut grads, *x, Some(gx))?;
                }
                Op::Add(a, b) => {
                    self.acc(&mut grads, *a, Some(g.clone()))?;
                    self.acc(&mut grads, *b, Some(g))?;
                }
                Op::Sub(a, b) => {
                    let neg = g.scale(-T::one());
                    self.acc(&mut grads, *a, Some(g))?;
                    self.acc(&mut grads, *b, Some(neg))?;
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), |u, v| u * v)?;
                    let gb = g.zip_map(self.value(*a), |u, v| u * v)?;
                    self.acc(&mut grads, *a, Some(ga))?;
                    self.acc(&mut grads, *b, Some(gb))?;
                }
                Op::Scale(x, s) => {
                    self.acc(&mut grads, *x, Some(g.scale(*s)))?;
                }
                Op::Sum(x) => {
                    let gx = Tensor::full(self.value(*x).shape(), g.data()[0]);
                    self.acc(&mut grads, *x, Some(gx))?;
                }
                Op::SumSquares(x) => {
                    let two_g = g.data()[0] + g.data()[0];
                    let gx = self.value(*x).scale(two_g);
                    self.acc(&mut grads, *x, Some(gx))?;
                }
            }
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match &n.op {
                Op::Param(name) => Some((i, name.clone())),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Option<Tensor<T>>) -> Result<()> {
        if !self.rg(v) {
            return Ok(());
        }
        let Some(g) = g else { return Ok(()) };
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }
}

/// Result of a reverse pass: gradients of leaves and parameters.
#[derive(Debug)]
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(usize, String)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to a leaf or parameter node, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Adds every parameter gradient into the matching slot of `params`.
    pub fn accumulate_into(&self, params: &mut ParamCollection<T>) -> Result<()> {
        for (i, name) in &self.params {
            if let Some(g) = &self.grads[*i] {
                params.get_mut(name)?.grad.add_assign(g)?;
            }
        }
        Ok(())
    }
}

/// Fills (accumulates into) the gradient slots of `params` with d loss / d value.
pub fn backward<T: Real>(tape: &Tape<T>, loss: Var, params: &mut ParamCollection<T>) -> Result<()> {
    tape.backward(loss)?.accumulate_into(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_of_linear_sum_is_input() {
        let mut params = ParamCollection::<f64>::new();
        params.insert("w", Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap()).unwrap();
        params.insert("unused", Tensor::new(vec![2], vec![1.0, 1.0]).unwrap()).unwrap();
        let mut tape = Tape::new();
        let w = tape.param(&params, "w").unwrap();
        let _unused = tape.param(&params, "unused").unwrap();
        let x = tape.constant(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let prod = tape.mul(w, x).unwrap();
        let loss = tape.sum(prod);
        backward(&tape, loss, &mut params).unwrap();
        assert_eq!(params.get("w").unwrap().grad.data(), &[1.0, 2.0, 3.0]);
        assert_eq!(params.get("unused").unwrap().grad.data(), &[0.0, 0.0]);
        // second call accumulates
        backward(&tape, loss, &mut params).unwrap();
        assert_eq!(params.get("w").unwrap().grad.data(), &[2.0, 4.0, 6.0]);
        params.zero_grad();
        assert_eq!(params.get("w").unwrap().grad.data(), &[0.0; 3]);
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[2]), true);
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut params = ParamCollection::<f64>::new();
        params.insert("w", Tensor::new(vec![1, 1], vec![3.0]).unwrap()).unwrap();
        params.insert("b", Tensor::new(vec![1], vec![0.0]).unwrap()).unwrap();
        let mut tape = Tape::without_param_grads();
        let z = tape.leaf(Tensor::new(vec![1], vec![2.0]).unwrap(), true);
        let w = tape.param(&params, "w").unwrap();
        let b = tape.param(&params, "b").unwrap();
        let y = tape.linear(z, w, b).unwrap();
        let loss = tape.sum_squares(y);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(z).unwrap().data(), &[36.0]);
        assert!(g.wrt(w).is_none());
    }
}
