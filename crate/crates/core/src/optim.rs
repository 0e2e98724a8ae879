//! Parameter update rules. Both minimize: `θ ← θ - lr · update(∇θ)`.

use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::netcore::ParamCollection;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    /// `θ ← θ - lr ∇θ`, the bare gradient step.
    Plain,
    /// Adam with the usual moment decay rates.
    Adam,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Plain => "plain",
            OptimizerKind::Adam => "adam",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" | "sgd" => Ok(OptimizerKind::Plain),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::config("train.optimizer", format!("unknown optimizer `{other}`"))),
        }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer<T: Real> {
    pub kind: OptimizerKind,
    pub lr: f64,
    steps: u64,
    first: IndexMap<String, Tensor<T>>,
    second: IndexMap<String, Tensor<T>>,
}

impl<T: Real> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Optimizer {
            kind,
            lr,
            steps: 0,
            first: IndexMap::new(),
            second: IndexMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update from the gradients stored in `params`.
    pub fn step(&mut self, params: &mut ParamCollection<T>) {
        self.steps += 1;
        let lr = T::lit(self.lr);
        match self.kind {
            OptimizerKind::Plain => {
                for p in params.iter_mut() {
                    for (v, &g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                        *v -= lr * g;
                    }
                }
            }
            OptimizerKind::Adam => {
                let t = self.steps as i32;
                let c1 = T::lit(1.0 / (1.0 - ADAM_BETA1.powi(t)));
                let c2 = T::lit(1.0 / (1.0 - ADAM_BETA2.powi(t)));
                let (b1, b2, eps) = (T::lit(ADAM_BETA1), T::lit(ADAM_BETA2), T::lit(ADAM_EPS));
                let one = T::one();
                for p in params.iter_mut() {
                    let m = self
                        .first
                        .entry(p.name.clone())
                        .or_insert_with(|| Tensor::zeros(p.value.shape()));
                    let v = self
                        .second
                        .entry(p.name.clone())
                        .or_insert_with(|| Tensor::zeros(p.value.shape()));
                    let grads = p.grad.data();
                    let vals = p.value.data_mut();
                    for i in 0..vals.len() {
                        let g = grads[i];
                        let mi = b1 * m.data()[i] + (one - b1) * g;
                        let vi = b2 * v.data()[i] + (one - b2) * g * g;
                        m.data_mut()[i] = mi;
                        v.data_mut()[i] = vi;
                        vals[i] -= lr * (mi * c1) / ((vi * c2).sqrt() + eps);
                    }
                }
            }
        }
    }

    /// Moment tensors as named records, `m/<param>` then `v/<param>`.
    pub fn state(&self) -> Vec<(String, &Tensor<T>)> {
        self.first
            .iter()
            .map(|(k, t)| (format!("m/{k}"), t))
            .chain(self.second.iter().map(|(k, t)| (format!("v/{k}"), t)))
            .collect()
    }

    /// Rebuilds an optimizer from [`Optimizer::state`] records.
    pub fn restore(
        kind: OptimizerKind,
        lr: f64,
        steps: u64,
        records: impl IntoIterator<Item = (String, Tensor<T>)>,
    ) -> Result<Self> {
        let mut opt = Optimizer::new(kind, lr);
        opt.steps = steps;
        for (name, t) in records {
            if let Some(k) = name.strip_prefix("m/") {
                opt.first.insert(k.to_string(), t);
            } else if let Some(k) = name.strip_prefix("v/") {
                opt.second.insert(k.to_string(), t);
            } else {
                return Err(Error::Format(format!("unexpected optimizer record `{name}`")));
            }
        }
        Ok(opt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64, g: f64) -> ParamCollection<f64> {
        let mut p = ParamCollection::new();
        p.insert("w", Tensor::new(vec![1], vec![v]).unwrap()).unwrap();
        p.get_mut("w").unwrap().grad = Tensor::new(vec![1], vec![g]).unwrap();
        p
    }

    #[test]
    fn plain_step_is_gradient_descent() {
        let mut p = one_param(1.0, 2.0);
        Optimizer::new(OptimizerKind::Plain, 0.1).step(&mut p);
        assert!((p.get("w").unwrap().value.data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        // bias correction makes the first update lr * g / (|g| + eps')
        let mut p = one_param(1.0, 3.0);
        Optimizer::new(OptimizerKind::Adam, 0.01).step(&mut p);
        let expect = 1.0 - 0.01 * 3.0 / (3.0 + 1e-8);
        assert!((p.get("w").unwrap().value.data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn restored_state_continues_identically() {
        let mut a = Optimizer::new(OptimizerKind::Adam, 0.05);
        let mut p = one_param(0.5, 1.0);
        a.step(&mut p);
        let records: Vec<_> = a.state().into_iter().map(|(k, t)| (k, t.clone())).collect();
        let mut b = Optimizer::restore(OptimizerKind::Adam, 0.05, a.steps(), records).unwrap();
        let mut q = p.clone();
        a.step(&mut p);
        b.step(&mut q);
        assert_eq!(p.get("w").unwrap().value, q.get("w").unwrap().value);
    }
}
