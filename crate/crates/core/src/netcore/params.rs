use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// A named trainable tensor with its gradient slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T: Real> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Real> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter {
            name: name.into(),
            value,
            grad,
        }
    }
}

/// Insertion-ordered parameter map.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamCollection<T: Real> {
    params: IndexMap<String, Parameter<T>>,
}

impl<T: Real> ParamCollection<T> {
    pub fn new() -> Self {
        ParamCollection {
            params: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter name `{name}`")));
        }
        self.params.insert(name.clone(), Parameter::new(name, value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Parameter<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.values_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Euclidean norm over every gradient slot.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .values()
            .map(|p| p.grad.sum_squares().as_f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn cast<U: Real>(&self) -> ParamCollection<U> {
        let mut out = ParamCollection::new();
        for p in self.params.values() {
            out.params.insert(
                p.name.clone(),
                Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                },
            );
        }
        out
    }
}

/// Zero-mean Gaussian weight with standard deviation `sqrt(2 / fan_in)`.
pub fn he_normal<T: Real, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::lit(z * std)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ParamCollection::<f64>::new();
        p.insert("a", Tensor::zeros(&[2])).unwrap();
        assert!(p.insert("a", Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn insertion_order_is_kept() {
        let mut p = ParamCollection::<f64>::new();
        for n in ["z", "a", "m"] {
            p.insert(n, Tensor::zeros(&[1])).unwrap();
        }
        assert_eq!(p.names().collect::<Vec<_>>(), vec!["z", "a", "m"]);
    }

    #[test]
    fn he_normal_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w: Tensor<f64> = he_normal(&[200, 50], 50, &mut rng);
        let var = w.sum_squares() / w.len() as f64;
        assert!((var - 2.0 / 50.0).abs() < 0.004, "var {var}");
    }
}
