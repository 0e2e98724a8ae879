//! Alternating training of the critic, the latent chains and the generator.
//!
//! Each iteration takes one minibatch and runs
//! 1. a critic step on `mean f(Y) - mean f(g(Ẑ))` with fresh prior codes `Ẑ`,
//! 2. `l_G` Langevin steps on the persistent codes of the batch,
//! 3. a generator step on `mean |Y - g(Z)|^2 / (2σ^2) + mean f(g(Ẑ))`,
//!    reusing the `Ẑ` of step 1.
//!
//! Randomness at iteration `t` comes from sub-streams keyed by `t`, so a run
//! resumed from a checkpoint follows the uninterrupted trajectory exactly.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::checkpoint::{Archive, Record};
use crate::config::Config;
use crate::critic::CriticArch;
use crate::data::{batches, batches_per_epoch, Dataset};
use crate::error::{Error, Result};
use crate::generator::GeneratorArch;
use crate::inference::{infer_posterior, GeneratorModel, LangevinConfig};
use crate::netcore::{ParamCollection, Tape, Var};
use crate::optim::{Optimizer, OptimizerKind};
use crate::rng::{iteration_rng, normal_matrix, stream_rng, Stream};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// T
    pub iterations: u64,
    pub batch: usize,
    pub lr_gen: f64,
    pub lr_critic: f64,
    pub optimizer: OptimizerKind,
    pub langevin: LangevinConfig,
    pub seed: u64,
    /// Checkpoint interval in iterations; 0 keeps only the initial and final ones.
    pub checkpoint_every: u64,
    /// Run the critic step at all.
    pub critic: bool,
    /// Include `f(g(Ẑ))` in the generator objective (only when `critic` is on).
    pub energy_term: bool,
    /// Opt-in gradient-norm ceiling for both networks.
    pub clip_grad: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 3000,
            batch: 64,
            lr_gen: 1e-4,
            lr_critic: 1e-4,
            optimizer: OptimizerKind::Adam,
            langevin: LangevinConfig::default(),
            seed: 0,
            checkpoint_every: 500,
            critic: true,
            energy_term: true,
            clip_grad: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::config("train.batch", "must be at least 1"));
        }
        for (k, v) in [("train.lr_gen", self.lr_gen), ("train.lr_critic", self.lr_critic)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(k, "must be a finite positive number"));
            }
        }
        if self.langevin.steps == 0 {
            return Err(Error::config("langevin.steps", "must be at least 1"));
        }
        if self.langevin.step_size <= 0.0 {
            return Err(Error::config("langevin.delta", "must be positive"));
        }
        if let Some(c) = self.clip_grad {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::config("train.clip_grad", "must be positive"));
            }
        }
        self.langevin.validate()
    }

    fn uses_energy(&self) -> bool {
        self.critic && self.energy_term
    }
}

/// Persistent chain state `Z_i`, one row per training example.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentStore<T: Real> {
    codes: Tensor<T>,
}

impl<T: Real> LatentStore<T> {
    /// Initial codes drawn from the prior.
    pub fn from_prior(n: usize, d: usize, seed: u64) -> Self {
        LatentStore {
            codes: normal_matrix(&mut stream_rng(seed, Stream::LatentInit), n, d),
        }
    }

    pub fn from_tensor(codes: Tensor<T>) -> Result<Self> {
        if codes.rank() != 2 {
            return Err(Error::dim("latent store", format!("expected [N, d], got {:?}", codes.shape())));
        }
        Ok(LatentStore { codes })
    }

    pub fn len(&self) -> usize {
        self.codes.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.codes.shape()[1]
    }

    pub fn codes(&self) -> &Tensor<T> {
        &self.codes
    }

    pub fn gather(&self, ids: &[usize]) -> Result<Tensor<T>> {
        let d = self.dim();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= self.len() {
                return Err(Error::contract(format!("no latent code for example {i}")));
            }
            data.extend_from_slice(&self.codes.data()[i * d..(i + 1) * d]);
        }
        Tensor::new(vec![ids.len(), d], data)
    }

    pub fn scatter(&mut self, ids: &[usize], z: &Tensor<T>) -> Result<()> {
        let d = self.dim();
        z.expect_shape(&[ids.len(), d], "latent batch")?;
        for (row, &i) in ids.iter().enumerate() {
            if i >= self.len() {
                return Err(Error::contract(format!("no latent code for example {i}")));
            }
            self.codes.data_mut()[i * d..(i + 1) * d].copy_from_slice(&z.data()[row * d..(row + 1) * d]);
        }
        Ok(())
    }
}

/// Everything needed to continue a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T: Real> {
    pub config: Config,
    pub gen_arch: GeneratorArch,
    pub critic_arch: CriticArch,
    pub gen: ParamCollection<T>,
    pub critic: ParamCollection<T>,
    pub gen_opt: Optimizer<T>,
    pub critic_opt: Optimizer<T>,
    pub latents: LatentStore<T>,
    /// Completed iterations.
    pub iteration: u64,
}

/// Scalars from one iteration, written to the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationLog {
    pub iteration: u64,
    /// Reconstruction error of the batch on the `[0, 1]` scale, before the generator step.
    pub recon_mse: f64,
    /// `mean f(g(Ẑ)) - mean f(Y)` before the critic step; `NaN` without a critic.
    pub energy_gap: f64,
    pub grad_norm_gen: f64,
    pub grad_norm_critic: f64,
}

/// `mean f(obs) - mean f(syn)`; minimizing it lowers the energy of data.
pub fn record_critic_loss<T: Real>(
    tape: &mut Tape<T>,
    arch: &CriticArch,
    params: &ParamCollection<T>,
    observed: &Tensor<T>,
    synthesized: &Tensor<T>,
) -> Result<Var> {
    let (no, ..) = observed.nhwc("observed batch")?;
    let (ns, ..) = synthesized.nhwc("synthesized batch")?;
    let o = tape.constant(observed.clone());
    let s = tape.constant(synthesized.clone());
    let eo = arch.record(tape, params, o)?;
    let es = arch.record(tape, params, s)?;
    let so = tape.sum(eo);
    let ss = tape.sum(es);
    let mo = tape.scale(so, T::lit(1.0 / no as f64));
    let ms = tape.scale(ss, T::lit(1.0 / ns as f64));
    tape.sub(mo, ms)
}

/// Generator objective terms recorded on a tape.
pub struct GeneratorLoss {
    pub loss: Var,
    pub reconstruction: Var,
}

/// `mean_i |Y_i - g(Z_i)|^2 / (2σ^2)`, plus `mean_j f(g(Ẑ_j))` when an
/// energy term is given. Critic parameters should be frozen on `tape`.
#[allow(clippy::too_many_arguments)]
pub fn record_generator_loss<T: Real>(
    tape: &mut Tape<T>,
    gen_arch: &GeneratorArch,
    gen: &ParamCollection<T>,
    observed: &Tensor<T>,
    z_post: &Tensor<T>,
    sigma: f64,
    energy: Option<(&CriticArch, &ParamCollection<T>, &Tensor<T>)>,
) -> Result<GeneratorLoss> {
    let (n, ..) = observed.nhwc("observed batch")?;
    let zv = tape.constant(z_post.clone());
    let rec = gen_arch.record(tape, gen, zv, true)?;
    if tape.value(rec.image).shape() != observed.shape() {
        return Err(Error::dim(
            "observed batch",
            format!("{:?} vs generated {:?}", observed.shape(), tape.value(rec.image).shape()),
        ));
    }
    let y = tape.constant(observed.clone());
    let r = tape.sub(y, rec.image)?;
    let sq = tape.sum_squares(r);
    let mut loss = tape.scale(sq, T::lit(1.0 / (2.0 * sigma * sigma * n as f64)));
    if let Some((carch, cparams, z_hat)) = energy {
        let zh = tape.constant(z_hat.clone());
        let syn = gen_arch.record(tape, gen, zh, true)?;
        let e = carch.record(tape, cparams, syn.image)?;
        let se = tape.sum(e);
        let me = tape.scale(se, T::lit(1.0 / z_hat.shape()[0] as f64));
        loss = tape.add(loss, me)?;
    }
    Ok(GeneratorLoss {
        loss,
        reconstruction: rec.image,
    })
}

fn finish_grads<T: Real>(params: &mut ParamCollection<T>, clip: Option<f64>, iteration: u64, what: &str) -> Result<f64> {
    let norm = params.grad_norm();
    if !norm.is_finite() {
        return Err(Error::Divergence {
            iteration,
            detail: format!("non-finite {what} gradient"),
        });
    }
    if let Some(c) = clip {
        if norm > c {
            let s = T::lit(c / norm);
            for p in params.iter_mut() {
                p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
            }
        }
    }
    Ok(norm)
}

fn check_loss<T: Real>(v: T, iteration: u64, what: &str) -> Result<f64> {
    let v = v.as_f64();
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Divergence {
            iteration,
            detail: format!("non-finite {what} loss"),
        })
    }
}

/// Result of one critic step.
pub struct CriticStep<T: Real> {
    pub z_hat: Tensor<T>,
    /// Critic loss before the update, `mean f(obs) - mean f(syn)`.
    pub loss: f64,
    pub grad_norm: f64,
}

/// Result of one generator step.
pub struct GeneratorStep {
    pub loss: f64,
    pub recon_mse: f64,
    pub grad_norm: f64,
}

impl<T: Real> Checkpoint<T> {
    /// Fresh parameters, optimizers and prior latent codes for `n_examples`.
    pub fn init(config: &Config, n_examples: usize) -> Result<Self> {
        config.validate()?;
        if n_examples == 0 {
            return Err(Error::Dataset("cannot train on an empty dataset".into()));
        }
        let gen_arch = config.generator_arch()?;
        let critic_arch = config.critic_arch();
        if critic_arch.input != gen_arch.output_extents() {
            return Err(Error::config("model.preset", "critic input does not match generator output"));
        }
        Self::init_with(config, gen_arch, critic_arch, n_examples)
    }

    /// Like [`Checkpoint::init`] but with explicit architectures.
    pub fn init_with(config: &Config, gen_arch: GeneratorArch, critic_arch: CriticArch, n_examples: usize) -> Result<Self> {
        let t = &config.train;
        let mut rng = stream_rng(t.seed, Stream::Init);
        let gen = gen_arch.init_params(&mut rng);
        let critic = critic_arch.init_params(&mut rng);
        Ok(Checkpoint {
            latents: LatentStore::from_prior(n_examples, gen_arch.latent_dim, t.seed),
            gen_opt: Optimizer::new(t.optimizer, t.lr_gen),
            critic_opt: Optimizer::new(t.optimizer, t.lr_critic),
            config: config.clone(),
            gen_arch,
            critic_arch,
            gen,
            critic,
            iteration: 0,
        })
    }

    fn train_cfg(&self) -> &TrainConfig {
        &self.config.train
    }

    pub fn model(&self) -> GeneratorModel<'_, T> {
        GeneratorModel {
            arch: &self.gen_arch,
            params: &self.gen,
        }
    }

    /// Fresh prior codes for iteration `t`.
    pub fn prior_codes(&self, batch: usize, t: u64) -> Tensor<T> {
        normal_matrix(
            &mut iteration_rng(self.train_cfg().seed, Stream::Prior, t),
            batch,
            self.gen_arch.latent_dim,
        )
    }

    /// Step 1: one critic update against syntheses from fresh prior codes.
    pub fn critic_update(&mut self, observed: &Tensor<T>, t: u64) -> Result<CriticStep<T>> {
        let (n, ..) = observed.nhwc("observed batch")?;
        if n == 0 {
            return Err(Error::contract("critic_update needs a nonempty batch"));
        }
        let z_hat = self.prior_codes(n, t);
        let (synth, _) = self.gen_arch.forward(&z_hat, &self.gen, false)?;
        let mut tape = Tape::new();
        let loss = record_critic_loss(&mut tape, &self.critic_arch, &self.critic, observed, &synth)?;
        let lv = check_loss(tape.value(loss).data()[0], t, "critic")?;
        self.critic.zero_grad();
        tape.backward(loss)?.accumulate_into(&mut self.critic)?;
        let grad_norm = finish_grads(&mut self.critic, self.config.train.clip_grad, t, "critic")?;
        self.critic_opt.step(&mut self.critic);
        Ok(CriticStep { z_hat, loss: lv, grad_norm })
    }

    /// Step 2: advance the stored chains of `ids` by `l_G` Langevin steps.
    pub fn posterior_update(&mut self, observed: &Tensor<T>, ids: &[usize], t: u64) -> Result<()> {
        let z0 = self.latents.gather(ids)?;
        let mut rng = iteration_rng(self.train_cfg().seed, Stream::Langevin, t);
        let cfg = self.train_cfg().langevin;
        let z = infer_posterior(observed, &z0, &self.model(), &cfg, &mut rng).map_err(|e| match e {
            Error::Divergence { detail, .. } => Error::Divergence { iteration: t, detail },
            other => other,
        })?;
        self.latents.scatter(ids, &z)
    }

    /// Step 3: one generator update on posterior codes `z_post`, with the
    /// energy term on `z_hat` when given.
    pub fn generator_update(
        &mut self,
        observed: &Tensor<T>,
        z_post: &Tensor<T>,
        z_hat: Option<&Tensor<T>>,
        t: u64,
    ) -> Result<GeneratorStep> {
        let sigma = self.config.sigma;
        let mut tape = Tape::new().freeze("critic/");
        let energy = z_hat.map(|z| (&self.critic_arch, &self.critic, z));
        let gl = record_generator_loss(&mut tape, &self.gen_arch, &self.gen, observed, z_post, sigma, energy)?;
        let lv = check_loss(tape.value(gl.loss).data()[0], t, "generator")?;
        let recon_mse = mse_unit_scale(observed, tape.value(gl.reconstruction));
        self.gen.zero_grad();
        tape.backward(gl.loss)?.accumulate_into(&mut self.gen)?;
        let grad_norm = finish_grads(&mut self.gen, self.config.train.clip_grad, t, "generator")?;
        self.gen_opt.step(&mut self.gen);
        Ok(GeneratorStep {
            loss: lv,
            recon_mse,
            grad_norm,
        })
    }

    /// Example indices of the minibatch used at iteration `t`.
    pub fn batch_ids(&self, n: usize, t: u64) -> Result<Vec<usize>> {
        let b = self.train_cfg().batch;
        let nb = batches_per_epoch(n, b) as u64;
        let mut epoch = batches(n, b, self.train_cfg().seed, t / nb)?;
        Ok(epoch.swap_remove((t % nb) as usize))
    }

    /// Runs steps 1 to 3 once and advances the iteration counter.
    pub fn iterate(&mut self, data: &Dataset) -> Result<IterationLog> {
        if data.len() != self.latents.len() {
            return Err(Error::contract(format!(
                "dataset has {} examples, latent store {}",
                data.len(),
                self.latents.len()
            )));
        }
        let t = self.iteration;
        let ids = self.batch_ids(data.len(), t)?;
        let y: Tensor<T> = data.gather(&ids);
        let critic = if self.train_cfg().critic {
            Some(self.critic_update(&y, t)?)
        } else {
            None
        };
        self.posterior_update(&y, &ids, t)?;
        let z_post = self.latents.gather(&ids)?;
        let z_hat = critic.as_ref().filter(|_| self.train_cfg().uses_energy()).map(|c| &c.z_hat);
        let g = self.generator_update(&y, &z_post, z_hat, t)?;
        self.iteration += 1;
        Ok(IterationLog {
            iteration: t,
            recon_mse: g.recon_mse,
            energy_gap: critic.as_ref().map_or(f64::NAN, |c| -c.loss),
            grad_norm_gen: g.grad_norm,
            grad_norm_critic: critic.as_ref().map_or(0.0, |c| c.grad_norm),
        })
    }

    /// Infers codes for `y` from a seeded prior draw and returns them with `g(Z)`.
    pub fn reconstruct(&self, y: &Tensor<T>, steps: usize, seed: u64) -> Result<(Tensor<T>, Tensor<T>)> {
        let (n, ..) = y.nhwc("images")?;
        let batched = y.rank() == 4;
        let y4 = if batched { y.clone() } else { y.clone().reshape(&[&[1], y.shape()].concat())? };
        let z0 = normal_matrix(&mut stream_rng(seed, Stream::Reconstruct), n, self.gen_arch.latent_dim);
        let cfg = LangevinConfig {
            steps,
            ..self.train_cfg().langevin
        };
        let mut rng = stream_rng(seed, Stream::Langevin);
        let z = infer_posterior(&y4, &z0, &self.model(), &cfg, &mut rng)?;
        let (img, _) = self.gen_arch.forward(&z, &self.gen, false)?;
        if batched {
            Ok((z, img))
        } else {
            Ok((z.batch_item(0), img.batch_item(0)))
        }
    }

    pub fn to_archive(&self) -> Archive {
        let mut text = String::from("[config]\n");
        text.push_str(&self.config.canonical_text());
        text.push_str("[arch]\n");
        for (k, v) in self.gen_arch.describe().into_iter().chain(self.critic_arch.describe()) {
            text.push_str(&format!("{k} = {v}\n"));
        }
        text.push_str("[state]\n");
        text.push_str(&format!("iteration = {}\n", self.iteration));
        text.push_str(&format!("precision = {}\n", T::DTYPE.name()));
        text.push_str(&format!("gen_opt.steps = {}\n", self.gen_opt.steps()));
        text.push_str(&format!("critic_opt.steps = {}\n", self.critic_opt.steps()));
        let mut records = Vec::new();
        for p in self.gen.iter().chain(self.critic.iter()) {
            records.push(Record::from_tensor(p.name.clone(), &p.value));
        }
        for (k, t) in self.gen_opt.state() {
            records.push(Record::from_tensor(format!("opt/gen/{k}"), t));
        }
        for (k, t) in self.critic_opt.state() {
            records.push(Record::from_tensor(format!("opt/critic/{k}"), t));
        }
        records.push(Record::from_tensor("latents", self.latents.codes()));
        Archive { text, records }
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let config = Config::from_pairs(&a.section("config"))?;
        let arch_lines = a.section("arch");
        let gen_arch = GeneratorArch::parse_description(&arch_lines)?;
        let critic_arch = CriticArch::parse_description(&arch_lines)?;
        let state = a.section("state");
        let get = |k: &str| -> Result<u64> {
            state
                .iter()
                .find(|(kk, _)| kk == k)
                .and_then(|(_, v)| v.parse().ok())
                .ok_or_else(|| Error::Format(format!("checkpoint state lacks `{k}`")))
        };
        let precision = state.iter().find(|(k, _)| k == "precision").map(|(_, v)| v.as_str());
        if precision != Some(T::DTYPE.name()) {
            return Err(Error::Format(format!(
                "checkpoint precision is {}, requested {}",
                precision.unwrap_or("unknown"),
                T::DTYPE.name()
            )));
        }
        let mut gen = ParamCollection::new();
        let mut critic = ParamCollection::new();
        let mut gen_opt = Vec::new();
        let mut critic_opt = Vec::new();
        let mut latents = None;
        for r in &a.records {
            let t: Tensor<T> = r.to_tensor()?;
            if r.name.starts_with("gen/") {
                gen.insert(r.name.clone(), t)?;
            } else if r.name.starts_with("critic/") {
                critic.insert(r.name.clone(), t)?;
            } else if let Some(k) = r.name.strip_prefix("opt/gen/") {
                gen_opt.push((k.to_string(), t));
            } else if let Some(k) = r.name.strip_prefix("opt/critic/") {
                critic_opt.push((k.to_string(), t));
            } else if r.name == "latents" {
                latents = Some(LatentStore::from_tensor(t)?);
            } else {
                return Err(Error::Format(format!("unexpected record `{}`", r.name)));
            }
        }
        gen_arch.check_params(&gen)?;
        critic_arch.check_params(&critic)?;
        let latents = latents.ok_or_else(|| Error::Format("checkpoint has no latent store".into()))?;
        if latents.dim() != gen_arch.latent_dim {
            return Err(Error::Format("latent store dimension disagrees with the generator".into()));
        }
        let tc = &config.train;
        Ok(Checkpoint {
            gen_opt: Optimizer::restore(tc.optimizer, tc.lr_gen, get("gen_opt.steps")?, gen_opt)?,
            critic_opt: Optimizer::restore(tc.optimizer, tc.lr_critic, get("critic_opt.steps")?, critic_opt)?,
            iteration: get("iteration")?,
            config,
            gen_arch,
            critic_arch,
            gen,
            critic,
            latents,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}

/// Element precision recorded in a checkpoint file.
pub fn checkpoint_precision(a: &Archive) -> Option<String> {
    a.section("state")
        .into_iter()
        .find(|(k, _)| k == "precision")
        .map(|(_, v)| v)
}

/// Mean squared difference after mapping `[-1, 1]` to `[0, 1]`.
pub fn mse_unit_scale<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    let n = a.len().max(1) as f64;
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = (x - y).as_f64() / 2.0;
            d * d
        })
        .sum::<f64>()
        / n
}

pub fn checkpoint_path(dir: &Path, iteration: u64) -> PathBuf {
    dir.join(format!("ckpt-{iteration:06}.spgn"))
}

/// What a training run produced.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub checkpoints: Vec<PathBuf>,
    pub log: Vec<IterationLog>,
}

/// Runs iterations until `config.train.iterations` (or `stop_at`, if
/// earlier), writing checkpoints and an NDJSON log into `out_dir`.
///
/// A fresh state (iteration 0) first writes the initialization checkpoint.
/// On divergence the error names the last checkpoint written.
pub fn train<T: Real>(
    state: &mut Checkpoint<T>,
    data: &Dataset,
    out_dir: &Path,
    stop_at: Option<u64>,
) -> Result<TrainOutcome> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let total = state.config.train.iterations;
    let end = stop_at.map_or(total, |s| s.min(total));
    let every = state.config.train.checkpoint_every;
    let mut out = TrainOutcome {
        checkpoints: Vec::new(),
        log: Vec::new(),
    };
    let save = |state: &Checkpoint<T>, out: &mut TrainOutcome| -> Result<()> {
        let p = checkpoint_path(out_dir, state.iteration);
        state.save(&p)?;
        out.checkpoints.push(p);
        Ok(())
    };
    if state.iteration == 0 {
        save(state, &mut out)?;
    }
    let log_path = out_dir.join("train_log.ndjson");
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let started = Instant::now();
    while state.iteration < end {
        let rec = match state.iterate(data) {
            Ok(r) => r,
            Err(Error::Divergence { iteration, detail }) => {
                let last = out
                    .checkpoints
                    .last()
                    .map_or_else(|| "none written in this run".to_string(), |p| p.display().to_string());
                return Err(Error::Divergence {
                    iteration,
                    detail: format!("{detail}; last good checkpoint: {last}"),
                });
            }
            Err(e) => return Err(e),
        };
        let line = serde_json::json!({
            "iteration": rec.iteration,
            "recon_mse": rec.recon_mse,
            "energy_gap": if rec.energy_gap.is_nan() { serde_json::Value::Null } else { rec.energy_gap.into() },
            "grad_norms": { "generator": rec.grad_norm_gen, "critic": rec.grad_norm_critic },
            "wall_time": started.elapsed().as_secs_f64(),
        });
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
        out.log.push(rec);
        let done = state.iteration;
        if (every > 0 && done % every == 0) || done == end {
            save(state, &mut out)?;
        }
    }
    Ok(out)
}
