//! Posterior inference of latent codes by Langevin dynamics.
//!
//! The complete-data log-likelihood of the generator model is
//! `log p(Y, Z) = -|Y - g(Z)|^2 / (2 σ^2) - |Z|^2 / 2 + C`, and one Langevin
//! step moves `Z` by `(δ^2 / 2) ∇_Z log p(Y, Z) + δ E` with `E ~ N(0, I)`.
//! All functions operate on batches of independent chains: `z` is `[B, d]`
//! and `y` has leading batch axis `B`.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::generator::GeneratorArch;
use crate::netcore::{ParamCollection, Tape};
use crate::rng::normal_matrix;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LangevinConfig {
    /// δ
    pub step_size: f64,
    /// l_G
    pub steps: usize,
    pub noise: bool,
    /// Observation noise scale σ.
    pub sigma: f64,
}

impl Default for LangevinConfig {
    fn default() -> Self {
        LangevinConfig {
            step_size: 0.1,
            steps: 15,
            noise: true,
            sigma: 0.3,
        }
    }
}

impl LangevinConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size >= 0.0 && self.step_size.is_finite()) {
            return Err(Error::config("langevin.delta", "must be a finite non-negative number"));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::config("model.sigma", "must be a finite positive number"));
        }
        Ok(())
    }
}

/// A differentiable map from latent codes to observations.
pub trait LatentModel<T: Real> {
    fn latent_dim(&self) -> usize;

    /// `g(z)` for a batch `z` of shape `[B, d]`.
    fn decode(&self, z: &Tensor<T>) -> Result<Tensor<T>>;

    /// Returns `g(z)` together with `cᵀ ∂g/∂z`, where the cotangent `c` is
    /// computed from `g(z)` by `cotangent`.
    fn decode_vjp(
        &self,
        z: &Tensor<T>,
        cotangent: &dyn Fn(&Tensor<T>) -> Result<Tensor<T>>,
    ) -> Result<(Tensor<T>, Tensor<T>)>;
}

/// The sparse generator with fixed parameters.
pub struct GeneratorModel<'a, T: Real> {
    pub arch: &'a GeneratorArch,
    pub params: &'a ParamCollection<T>,
}

impl<'a, T: Real> GeneratorModel<'a, T> {
    pub fn new(arch: &'a GeneratorArch, params: &'a ParamCollection<T>) -> Result<Self> {
        arch.check_params(params)?;
        Ok(GeneratorModel { arch, params })
    }
}

impl<T: Real> LatentModel<T> for GeneratorModel<'_, T> {
    fn latent_dim(&self) -> usize {
        self.arch.latent_dim
    }

    fn decode(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.arch.forward(z, self.params, false)?.0)
    }

    fn decode_vjp(
        &self,
        z: &Tensor<T>,
        cotangent: &dyn Fn(&Tensor<T>) -> Result<Tensor<T>>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        // masks are recomputed by this forward pass, so the support follows z
        let mut tape = Tape::without_param_grads();
        let zv = tape.leaf(z.clone(), true);
        let rec = self.arch.record(&mut tape, self.params, zv, true)?;
        let image = tape.value(rec.image).clone();
        let cot = cotangent(&image)?;
        let cv = tape.constant(cot);
        let prod = tape.mul(rec.image, cv)?;
        let loss = tape.sum(prod);
        let grads = tape.backward(loss)?;
        let gz = grads.wrt(zv).cloned().unwrap_or_else(|| Tensor::zeros(z.shape()));
        Ok((image, gz))
    }
}

/// `g(z) = z`, the Gaussian-linear toy model.
#[derive(Debug, Clone, Copy)]
pub struct IdentityModel {
    pub dim: usize,
}

impl<T: Real> LatentModel<T> for IdentityModel {
    fn latent_dim(&self) -> usize {
        self.dim
    }

    fn decode(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(z.clone())
    }

    fn decode_vjp(
        &self,
        z: &Tensor<T>,
        cotangent: &dyn Fn(&Tensor<T>) -> Result<Tensor<T>>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let c = cotangent(z)?;
        Ok((z.clone(), c))
    }
}

fn batch_of(z: &Tensor<impl Real>, d: usize) -> Result<usize> {
    match *z.shape() {
        [b, dd] if dd == d => Ok(b),
        _ => Err(Error::dim("latent code", format!("expected [B, {d}], got {:?}", z.shape()))),
    }
}

/// Per-chain `-|y - g(z)|^2 / (2σ^2) - |z|^2 / 2`, constant omitted.
pub fn log_joint<T: Real>(y: &Tensor<T>, z: &Tensor<T>, model: &dyn LatentModel<T>, sigma: f64) -> Result<Vec<f64>> {
    let b = batch_of(z, model.latent_dim())?;
    let g = model.decode(z)?;
    log_joint_from_image(y, z, &g, b, sigma)
}

fn log_joint_from_image<T: Real>(y: &Tensor<T>, z: &Tensor<T>, g: &Tensor<T>, b: usize, sigma: f64) -> Result<Vec<f64>> {
    if y.len() != g.len() {
        return Err(Error::dim("observation", format!("{:?} vs model output {:?}", y.shape(), g.shape())));
    }
    let per_y = y.len() / b.max(1);
    let d = z.len() / b.max(1);
    let inv = 1.0 / (2.0 * sigma * sigma);
    Ok((0..b)
        .map(|i| {
            let r: f64 = y.data()[i * per_y..(i + 1) * per_y]
                .iter()
                .zip(&g.data()[i * per_y..(i + 1) * per_y])
                .map(|(&a, &b)| {
                    let d = (a - b).as_f64();
                    d * d
                })
                .sum();
            let zz: f64 = z.data()[i * d..(i + 1) * d].iter().map(|v| v.as_f64() * v.as_f64()).sum();
            -r * inv - 0.5 * zz
        })
        .collect())
}

/// `∇_z log p(y, z) = (1/σ^2) (y - g(z))ᵀ ∂g/∂z - z`, plus `g(z)`.
pub fn grad_log_joint<T: Real>(
    y: &Tensor<T>,
    z: &Tensor<T>,
    model: &dyn LatentModel<T>,
    sigma: f64,
) -> Result<(Tensor<T>, Tensor<T>)> {
    batch_of(z, model.latent_dim())?;
    let inv_var = T::lit(1.0 / (sigma * sigma));
    let cot = |g: &Tensor<T>| -> Result<Tensor<T>> {
        if g.len() != y.len() {
            return Err(Error::dim("observation", format!("{:?} vs model output {:?}", y.shape(), g.shape())));
        }
        Tensor::new(
            g.shape().to_vec(),
            y.data().iter().zip(g.data()).map(|(&a, &b)| (a - b) * inv_var).collect(),
        )
    };
    let (image, vjp) = model.decode_vjp(z, &cot)?;
    let grad = vjp.zip_map(z, |g, zz| g - zz)?;
    Ok((grad, image))
}

/// One Langevin transition for every chain in the batch.
pub fn langevin_step<T: Real>(
    y: &Tensor<T>,
    z: &Tensor<T>,
    model: &dyn LatentModel<T>,
    cfg: &LangevinConfig,
    rng: &mut ChaCha8Rng,
    iteration: u64,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    let (grad, _) = grad_log_joint(y, z, model, cfg.sigma)?;
    if !grad.all_finite() {
        return Err(Error::Divergence {
            iteration,
            detail: "non-finite gradient of the log joint in Langevin dynamics".into(),
        });
    }
    let half = T::lit(0.5 * cfg.step_size * cfg.step_size);
    let delta = T::lit(cfg.step_size);
    let mut next = grad.zip_map(z, |g, zz| zz + half * g)?;
    if cfg.noise {
        let noise = normal_matrix::<T>(rng, z.shape()[0], z.shape()[1]);
        for (v, &e) in next.data_mut().iter_mut().zip(noise.data()) {
            *v += delta * e;
        }
    }
    if !next.all_finite() {
        return Err(Error::Divergence {
            iteration,
            detail: "latent code became non-finite".into(),
        });
    }
    Ok(next)
}

/// Runs `cfg.steps` Langevin transitions from `z_init`.
pub fn infer_posterior<T: Real>(
    y: &Tensor<T>,
    z_init: &Tensor<T>,
    model: &dyn LatentModel<T>,
    cfg: &LangevinConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    let mut z = z_init.clone();
    for step in 0..cfg.steps {
        z = langevin_step(y, &z, model, cfg, rng, step as u64)?;
    }
    Ok(z)
}
