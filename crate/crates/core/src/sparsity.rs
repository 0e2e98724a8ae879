//! Top-k sparsity-inducing functions.
//!
//! Two variants exist. The channel variant keeps the `k` largest entries of
//! the channel vector at every spatial position; the spatial variant keeps,
//! independently for each channel, the `k` largest positions of the map.
//! Ties go to the lower index (channel index, or row-major position), so the
//! selection is a total function of the input.
//!
//! Both operators are applied after a ReLU, so inputs are non-negative in
//! practice; idempotence relies on that.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// The axis a top-k operator selects along.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Axis {
    Channel,
    Spatial,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::Channel => "channel",
            Axis::Spatial => "spatial",
        })
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "channel" => Ok(Axis::Channel),
            "spatial" => Ok(Axis::Spatial),
            other => Err(Error::config("sparsity axis", format!("unknown axis `{other}`"))),
        }
    }
}

/// One sparse layer: which layer, along which axis, how many entries survive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparsityEntry {
    pub layer_id: String,
    pub axis: Axis,
    pub k: usize,
}

/// The vector of sparsity hyper-parameters, one entry per sparse layer.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SparsityConfig {
    entries: Vec<SparsityEntry>,
}

impl SparsityConfig {
    pub fn new(entries: Vec<SparsityEntry>) -> Result<Self> {
        let mut cfg = SparsityConfig::default();
        for e in entries {
            cfg.push(e)?;
        }
        Ok(cfg)
    }

    pub fn push(&mut self, entry: SparsityEntry) -> Result<()> {
        if entry.k == 0 {
            return Err(Error::config(
                format!("sparsity.{}", entry.layer_id),
                "k must be at least 1",
            ));
        }
        if self.get(&entry.layer_id).is_some() {
            return Err(Error::config(
                format!("sparsity.{}", entry.layer_id),
                "duplicate layer id",
            ));
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn get(&self, layer_id: &str) -> Option<&SparsityEntry> {
        self.entries.iter().find(|e| e.layer_id == layer_id)
    }

    pub fn entries(&self) -> &[SparsityEntry] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Binary keep-mask with the shape of the activation it gates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparseMask {
    shape: Vec<usize>,
    keep: Vec<bool>,
}

impl SparseMask {
    pub fn ones(shape: &[usize]) -> Self {
        SparseMask {
            shape: shape.to_vec(),
            keep: vec![true; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn count(&self) -> usize {
        self.keep.iter().filter(|&&b| b).count()
    }

    /// The mask as a 0/1 tensor.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::new(
            self.shape.clone(),
            self.keep.iter().map(|&b| if b { T::one() } else { T::zero() }).collect(),
        )
        .expect("mask shape")
    }

    /// Zeroes every entry the mask does not keep.
    pub fn apply<T: Real>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.shape() != self.shape.as_slice() {
            return Err(Error::dim(
                "masked input",
                format!("mask {:?} vs input {:?}", self.shape, x.shape()),
            ));
        }
        let data = x
            .data()
            .iter()
            .zip(&self.keep)
            .map(|(&v, &k)| if k { v } else { T::zero() })
            .collect();
        Tensor::new(self.shape.clone(), data)
    }
}

/// Descending by value, ascending by index on ties.
fn rank_order<T: Real>(vals: &[T]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| {
        vals[b]
            .partial_cmp(&vals[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    }
}

/// Marks the `k` winners among `vals` in `keep`; `idx` is scratch space.
fn select_top<T: Real>(vals: &[T], k: usize, idx: &mut Vec<usize>, keep: &mut [bool]) {
    let n = vals.len();
    if k >= n {
        keep.iter_mut().for_each(|b| *b = true);
        return;
    }
    idx.clear();
    idx.extend(0..n);
    let order = rank_order(vals);
    idx.select_nth_unstable_by(k - 1, &order);
    keep.iter_mut().for_each(|b| *b = false);
    for &i in &idx[..k] {
        keep[i] = true;
    }
}

fn check_k(k: usize, size: usize, what: &str) -> Result<()> {
    if k == 0 || k > size {
        return Err(Error::config(
            "sparsity.k",
            format!("k = {k} outside 1..={size} for the {what} axis"),
        ));
    }
    Ok(())
}

/// Keeps the `k` largest channels at every spatial position.
///
/// Works on any tensor whose last axis is the channel axis.
pub fn topk_channel<T: Real>(x: &Tensor<T>, k: usize) -> Result<(Tensor<T>, SparseMask)> {
    let c = *x
        .shape()
        .last()
        .ok_or_else(|| Error::dim("input", "scalar has no channel axis"))?;
    check_k(k, c, "channel")?;
    let mut keep = vec![false; x.len()];
    let mut idx = Vec::with_capacity(c);
    for (vals, kp) in x.data().chunks_exact(c).zip(keep.chunks_exact_mut(c)) {
        select_top(vals, k, &mut idx, kp);
    }
    let mask = SparseMask {
        shape: x.shape().to_vec(),
        keep,
    };
    let out = mask.apply(x)?;
    Ok((out, mask))
}

/// Keeps, per channel, the `k` largest of the `H * W` positions.
pub fn topk_spatial<T: Real>(x: &Tensor<T>, k: usize) -> Result<(Tensor<T>, SparseMask)> {
    let (n, h, w, c) = x.nhwc("input")?;
    let px = h * w;
    check_k(k, px, "spatial")?;
    let mut keep = vec![false; x.len()];
    let mut vals = vec![T::zero(); px];
    let mut kp = vec![false; px];
    let mut idx = Vec::with_capacity(px);
    let data = x.data();
    for img in 0..n {
        let base = img * px * c;
        for ch in 0..c {
            for (p, v) in vals.iter_mut().enumerate() {
                *v = data[base + p * c + ch];
            }
            select_top(&vals, k, &mut idx, &mut kp);
            for (p, &b) in kp.iter().enumerate() {
                keep[base + p * c + ch] = b;
            }
        }
    }
    let mask = SparseMask {
        shape: x.shape().to_vec(),
        keep,
    };
    let out = mask.apply(x)?;
    Ok((out, mask))
}

pub fn topk<T: Real>(x: &Tensor<T>, axis: Axis, k: usize) -> Result<(Tensor<T>, SparseMask)> {
    match axis {
        Axis::Channel => topk_channel(x, k),
        Axis::Spatial => topk_spatial(x, k),
    }
}

/// Gradient through a top-k operator: the upstream gradient gated by the
/// selection mask, with the mask held constant.
pub fn sparse_backward_rule<T: Real>(mask: &SparseMask, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    if upstream.shape() != mask.shape() {
        return Err(Error::dim(
            "upstream gradient",
            format!("mask {:?} vs gradient {:?}", mask.shape(), upstream.shape()),
        ));
    }
    mask.apply(upstream)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn channel_examples() {
        let (out, mask) = topk_channel(&t(&[1, 1, 4], &[3.0, 1.0, 2.0, 5.0]), 2).unwrap();
        assert_eq!(out.data(), &[3.0, 0.0, 0.0, 5.0]);
        assert_eq!(mask.keep(), &[true, false, false, true]);

        let x = t(&[1, 1, 3], &[2.0, 2.0, 2.0]);
        let (out, _) = topk_channel(&x, 1).unwrap();
        assert_eq!(out.data(), &[2.0, 0.0, 0.0]);

        let (out, mask) = topk_channel(&x, 3).unwrap();
        assert_eq!(out, x);
        assert_eq!(mask.count(), 3);
    }

    #[test]
    fn spatial_examples() {
        let (out, _) = topk_spatial(&t(&[2, 2, 1], &[1.0, 4.0, 3.0, 2.0]), 2).unwrap();
        assert_eq!(out.data(), &[0.0, 4.0, 3.0, 0.0]);

        let x = t(&[2, 2, 1], &[1.0, 4.0, 3.0, 2.0]);
        assert_eq!(topk_spatial(&x, 4).unwrap().0, x);

        // two positive entries, k = 3: a zero is retained but stays zero
        let relu_out = t(&[2, 2, 1], &[0.0, 0.5, 0.0, 0.25]);
        let (out, mask) = topk_spatial(&relu_out, 3).unwrap();
        assert_eq!(out.data().iter().filter(|v| **v != 0.0).count(), 2);
        assert_eq!(mask.count(), 3);
    }

    #[test]
    fn spatial_is_per_channel() {
        // channel 0 prefers position 0, channel 1 prefers position 3
        let x = t(&[2, 2, 2], &[9.0, 0.0, 1.0, 1.0, 2.0, 2.0, 0.0, 9.0]);
        let (out, _) = topk_spatial(&x, 1).unwrap();
        assert_eq!(out.data(), &[9.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 9.0]);
    }

    #[test]
    fn k_out_of_range() {
        let x = t(&[1, 1, 3], &[1.0, 2.0, 3.0]);
        assert!(matches!(topk_channel(&x, 0), Err(Error::Config { .. })));
        assert!(matches!(topk_channel(&x, 4), Err(Error::Config { .. })));
        assert!(matches!(topk_spatial(&x, 2), Err(Error::Config { .. })));
    }

    #[test]
    fn backward_rule_gates() {
        let x = t(&[1, 1, 3], &[1.0, 2.0, 3.0]);
        let up = t(&[1, 1, 3], &[0.5, -1.0, 2.0]);
        let (_, all) = topk_channel(&x, 3).unwrap();
        assert_eq!(sparse_backward_rule(&all, &up).unwrap(), up);
        let none = SparseMask {
            shape: vec![1, 1, 3],
            keep: vec![false; 3],
        };
        assert_eq!(sparse_backward_rule(&none, &up).unwrap(), Tensor::zeros(&[1, 1, 3]));
        let (_, top1) = topk_channel(&x, 1).unwrap();
        assert_eq!(sparse_backward_rule(&top1, &up).unwrap().data(), &[0.0, 0.0, 2.0]);
        assert!(sparse_backward_rule(&top1, &t(&[3], &[0.0; 3])).is_err());
    }

    #[test]
    fn config_rejects_duplicates_and_zero() {
        let e = |id: &str, k| SparsityEntry {
            layer_id: id.into(),
            axis: Axis::Spatial,
            k,
        };
        assert!(SparsityConfig::new(vec![e("a", 1), e("a", 2)]).is_err());
        assert!(SparsityConfig::new(vec![e("a", 0)]).is_err());
        assert_eq!("channel".parse::<Axis>().unwrap(), Axis::Channel);
        assert!("depth".parse::<Axis>().is_err());
    }

    proptest! {
        #[test]
        fn idempotent_and_value_preserving(
            vals in prop::collection::vec((-4.0f64..4.0).prop_map(|v| v.max(0.0)), 24),
            k in 1usize..=6,
        ) {
            let x = Tensor::new(vec![2, 2, 6], vals).unwrap();
            for axis in [Axis::Channel, Axis::Spatial] {
                let k = if axis == Axis::Spatial { k.min(4) } else { k };
                let (once, mask) = topk(&x, axis, k).unwrap();
                let (twice, mask2) = topk(&once, axis, k).unwrap();
                prop_assert_eq!(&once, &twice);
                prop_assert_eq!(&mask, &mask2);
                for ((&o, &i), &m) in once.data().iter().zip(x.data()).zip(mask.keep()) {
                    prop_assert_eq!(o, if m { i } else { 0.0 });
                }
            }
        }

        #[test]
        fn support_shrinks_with_k(vals in prop::collection::vec(-4.0f64..4.0, 16), k in 1usize..4) {
            let x = Tensor::new(vec![1, 1, 16], vals).unwrap();
            let (_, small) = topk_channel(&x, k).unwrap();
            let (_, big) = topk_channel(&x, k + 1).unwrap();
            for (&s, &b) in small.keep().iter().zip(big.keep()) {
                prop_assert!(!s || b);
            }
        }
    }
}
