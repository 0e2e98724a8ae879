//! Central finite-difference checks of reverse-mode gradients (64-bit).
//!
//! A coordinate is skipped when either perturbed evaluation lands on a
//! different piece of a piecewise-linear function than the base point
//! (ReLU signs or a top-k mask changed), since the difference quotient is
//! meaningless across a kink.

use rand::seq::index::sample;
use rand::Rng;
use serde::Serialize;

use crate::config::Config;
use crate::critic::{CriticArch, CriticLayer};
use crate::error::{Error, Result};
use crate::generator::{GeneratorArch, LayerSpec};
use crate::inference::{grad_log_joint, GeneratorModel};
use crate::netcore::{ParamCollection, Tape, Var};
use crate::optim::OptimizerKind;
use crate::rng::{stream_rng, stream_rng_at, Stream};
use crate::sparsity::{Axis, SparsityConfig, SparsityEntry};
use crate::tensor::{DType, Tensor};
use crate::training::{record_critic_loss, record_generator_loss, Checkpoint};

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-5;
/// Denominator floor of the relative error, as a fraction of `max(1, |f|)`.
/// Round-off in the difference quotient is about `1e-11 |f|`.
pub const FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheck {
    pub suite: String,
    pub target: String,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
}

impl GradCheck {
    fn new(suite: &str, target: &str) -> Self {
        GradCheck {
            suite: suite.into(),
            target: target.into(),
            checked: 0,
            skipped: 0,
            max_rel_err: 0.0,
        }
    }

    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_err <= REL_TOL
    }

    fn merge(&mut self, other: &GradCheck) {
        self.checked += other.checked;
        self.skipped += other.skipped;
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
    }
}

/// Which coordinates to probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Probe {
    /// At most this many coordinates per tensor, drawn without replacement.
    /// `None` checks every coordinate.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Probe {
    pub fn all() -> Self {
        Probe { max_coords: None, seed: 0 }
    }

    fn coords(&self, len: usize, salt: u64) -> Vec<usize> {
        match self.max_coords {
            Some(m) if m < len => {
                let mut rng = stream_rng_at(self.seed, (Stream::Metrics as u64) << 32 | salt, 0);
                let mut v = sample(&mut rng, len, m).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..len).collect(),
        }
    }
}

/// Compares `analytic` with difference quotients of `eval`, which returns
/// the scalar and the kink signature at a point.
fn compare(
    mut out: GradCheck,
    x: &Tensor<f64>,
    analytic: &Tensor<f64>,
    coords: &[usize],
    eval: &mut dyn FnMut(&Tensor<f64>) -> Result<(f64, u64)>,
) -> Result<GradCheck> {
    x.expect_same_shape(analytic, "analytic gradient")?;
    let (f0, sig0) = eval(x)?;
    let floor = FLOOR * f0.abs().max(1.0);
    for &i in coords {
        let mut xp = x.clone();
        xp.data_mut()[i] += FD_STEP;
        let mut xm = x.clone();
        xm.data_mut()[i] -= FD_STEP;
        let (fp, sp) = eval(&xp)?;
        let (fm, sm) = eval(&xm)?;
        if sp != sig0 || sm != sig0 {
            out.skipped += 1;
            continue;
        }
        let num = (fp - fm) / (2.0 * FD_STEP);
        let a = analytic.data()[i];
        let err = (a - num).abs() / a.abs().max(num.abs()).max(floor);
        out.checked += 1;
        out.max_rel_err = out.max_rel_err.max(err);
    }
    Ok(out)
}

/// Checks a gradient with respect to every tensor of `params`.
fn compare_params(
    suite: &str,
    target: &str,
    params: &ParamCollection<f64>,
    analytic: &dyn Fn(&str) -> Result<Tensor<f64>>,
    probe: Probe,
    eval: &mut dyn FnMut(&ParamCollection<f64>) -> Result<(f64, u64)>,
) -> Result<GradCheck> {
    let mut total = GradCheck::new(suite, target);
    for (salt, name) in params.names().map(str::to_string).collect::<Vec<_>>().into_iter().enumerate() {
        let x = params.get(&name)?.value.clone();
        let a = analytic(&name)?;
        let coords = probe.coords(x.len(), salt as u64);
        let mut f = |v: &Tensor<f64>| {
            let mut p = params.clone();
            p.get_mut(&name)?.value = v.clone();
            eval(&p)
        };
        total.merge(&compare(GradCheck::new(suite, target), &x, &a, &coords, &mut f)?);
    }
    Ok(total)
}

fn loss_with_cot(tape: &mut Tape<f64>, out: Var, salt: u64) -> Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    let mut rng = stream_rng_at(salt, Stream::Metrics as u64, 0);
    let c = Tensor::from_fn(&shape, |_| rng.random_range(-1.0..1.0));
    let cv = tape.constant(c);
    let m = tape.mul(out, cv)?;
    Ok(tape.sum(m))
}

type Recorder = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

/// One primitive: `sum(op(inputs) * C)` for a fixed random `C`, checked
/// with respect to every input.
fn check_op(name: &str, inputs: &[Tensor<f64>], rec: &Recorder, salt: u64) -> Result<GradCheck> {
    let run = |xs: &[Tensor<f64>]| -> Result<(Tape<f64>, Var, Vec<Var>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
        let out = rec(&mut tape, &vars)?;
        let loss = loss_with_cot(&mut tape, out, salt)?;
        Ok((tape, loss, vars))
    };
    let (tape, loss, vars) = run(inputs)?;
    let grads = tape.backward(loss)?;
    let mut total = GradCheck::new("primitives", name);
    for (i, v) in vars.iter().enumerate() {
        let a = grads
            .wrt(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let mut f = |x: &Tensor<f64>| {
            let mut xs = inputs.to_vec();
            xs[i] = x.clone();
            let (t, l, _) = run(&xs)?;
            Ok((t.value(l).data()[0], t.kink_signature()))
        };
        let coords: Vec<usize> = (0..inputs[i].len()).collect();
        total.merge(&compare(GradCheck::new("primitives", name), &inputs[i], &a, &coords, &mut f)?);
    }
    Ok(total)
}

/// Every tape operation on small random operands.
pub fn primitive_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = stream_rng(seed, Stream::Init);
    let mut r = |shape: &[usize]| Tensor::<f64>::from_fn(shape, |_| rng.random_range(-1.0..1.0));
    let x4 = r(&[2, 4, 4, 3]);
    let cases: Vec<(&str, Vec<Tensor<f64>>, Box<Recorder>)> = vec![
        ("linear", vec![r(&[3, 5]), r(&[4, 5]), r(&[4])], Box::new(|t, v| t.linear(v[0], v[1], v[2]))),
        (
            "conv3x3",
            vec![x4.clone(), r(&[3, 3, 3, 2]), r(&[2])],
            Box::new(|t, v| t.conv3x3(v[0], v[1], v[2])),
        ),
        ("upsample", vec![x4.clone()], Box::new(|t, v| t.upsample(v[0]))),
        ("downsample", vec![x4.clone()], Box::new(|t, v| t.downsample(v[0]))),
        ("relu", vec![x4.clone()], Box::new(|t, v| Ok(t.relu(v[0])))),
        ("leaky_relu", vec![x4.clone()], Box::new(|t, v| Ok(t.leaky_relu(v[0], 0.2)))),
        ("tanh", vec![x4.clone().scale(2.0)], Box::new(|t, v| Ok(t.tanh(v[0])))),
        (
            "topk_channel",
            vec![x4.clone()],
            Box::new(|t, v| Ok(t.topk(v[0], Axis::Channel, 2)?.0)),
        ),
        (
            "topk_spatial",
            vec![x4.clone()],
            Box::new(|t, v| Ok(t.topk(v[0], Axis::Spatial, 5)?.0)),
        ),
        ("reshape", vec![x4.clone()], Box::new(|t, v| t.reshape(v[0], &[2, 48]))),
        ("add", vec![r(&[6]), r(&[6])], Box::new(|t, v| t.add(v[0], v[1]))),
        ("sub", vec![r(&[6]), r(&[6])], Box::new(|t, v| t.sub(v[0], v[1]))),
        ("mul", vec![r(&[6]), r(&[6])], Box::new(|t, v| t.mul(v[0], v[1]))),
        ("scale", vec![r(&[6])], Box::new(|t, v| Ok(t.scale(v[0], -1.7)))),
        ("sum", vec![r(&[2, 3])], Box::new(|t, v| Ok(t.sum(v[0])))),
        ("sum_squares", vec![r(&[2, 3])], Box::new(|t, v| Ok(t.sum_squares(v[0])))),
    ];
    cases
        .iter()
        .enumerate()
        .map(|(i, (name, xs, rec))| check_op(name, xs, rec.as_ref(), seed ^ i as u64))
        .collect()
}

/// `∇_Z log p(Y, Z)` from the Langevin code path against differences of
/// the tape-recorded joint.
pub fn log_joint_suite(
    arch: &GeneratorArch,
    params: &ParamCollection<f64>,
    y: &Tensor<f64>,
    z: &Tensor<f64>,
    sigma: f64,
    probe: Probe,
) -> Result<GradCheck> {
    let model = GeneratorModel::new(arch, params)?;
    let (grad, _) = grad_log_joint(y, z, &model, sigma)?;
    let mut eval = |zz: &Tensor<f64>| -> Result<(f64, u64)> {
        let mut tape = Tape::without_param_grads();
        let zv = tape.constant(zz.clone());
        let img = arch.record(&mut tape, params, zv, true)?.image;
        let g = tape.value(img);
        if g.len() != y.len() {
            return Err(Error::dim("observation", format!("{:?} vs {:?}", y.shape(), g.shape())));
        }
        let sq: f64 = y.data().iter().zip(g.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        let lj = -sq / (2.0 * sigma * sigma) - 0.5 * zz.sum_squares();
        Ok((lj, tape.kink_signature()))
    };
    let coords = probe.coords(z.len(), 0);
    compare(GradCheck::new("log_joint", "grad_z"), z, &grad, &coords, &mut eval)
}

/// Parameter moves of one critic step and one generator step, taken by the
/// training code with the plain optimizer at unit rate, against
/// differences of the two objectives.
pub fn update_direction_suite(
    config: &Config,
    gen_arch: &GeneratorArch,
    critic_arch: &CriticArch,
    batch: usize,
    probe: Probe,
) -> Result<Vec<GradCheck>> {
    let mut cfg = config.clone();
    cfg.precision = DType::F64;
    cfg.train.optimizer = OptimizerKind::Plain;
    cfg.train.lr_gen = 1.0;
    cfg.train.lr_critic = 1.0;
    cfg.train.clip_grad = None;
    cfg.train.batch = batch;
    let mut state: Checkpoint<f64> = Checkpoint::init_with(&cfg, gen_arch.clone(), critic_arch.clone(), batch)?;
    let (h, w, c) = gen_arch.output_extents();
    let mut rng = stream_rng(probe.seed, Stream::Sprites);
    let obs = Tensor::from_fn(&[batch, h, w, c], |_| rng.random_range(-0.9..0.9));
    let sigma = cfg.sigma;

    // Step 1
    let before = state.critic.clone();
    let step = state.critic_update(&obs, 0)?;
    let (synth, _) = gen_arch.forward(&step.z_hat, &state.gen, false)?;
    let after = state.critic.clone();
    let dir1 = |name: &str| -> Result<Tensor<f64>> {
        before.get(name)?.value.zip_map(&after.get(name)?.value, |b, a| b - a)
    };
    let mut eval1 = |p: &ParamCollection<f64>| -> Result<(f64, u64)> {
        let mut tape = Tape::new();
        let l = record_critic_loss(&mut tape, critic_arch, p, &obs, &synth)?;
        Ok((tape.value(l).data()[0], tape.kink_signature()))
    };
    let s1 = compare_params("update", "step1_critic", &before, &dir1, probe, &mut eval1)?;

    // Step 3, with the critic left by step 1
    let z_post = state.prior_codes(batch, 1);
    let gbefore = state.gen.clone();
    state.generator_update(&obs, &z_post, Some(&step.z_hat), 0)?;
    let gafter = state.gen.clone();
    let dir3 = |name: &str| -> Result<Tensor<f64>> {
        gbefore.get(name)?.value.zip_map(&gafter.get(name)?.value, |b, a| b - a)
    };
    let critic = &state.critic;
    let mut eval3 = |p: &ParamCollection<f64>| -> Result<(f64, u64)> {
        let mut tape = Tape::new().freeze("critic/");
        let gl = record_generator_loss(
            &mut tape,
            gen_arch,
            p,
            &obs,
            &z_post,
            sigma,
            Some((critic_arch, critic, &step.z_hat)),
        )?;
        Ok((tape.value(gl.loss).data()[0], tape.kink_signature()))
    };
    let s3 = compare_params("update", "step3_generator", &gbefore, &dir3, probe, &mut eval3)?;
    Ok(vec![s1, s3])
}

/// Generator and critic small enough for exhaustive checks.
pub fn tiny_archs() -> Result<(GeneratorArch, CriticArch)> {
    let gen = GeneratorArch::new(
        3,
        vec![
            LayerSpec::Fc {
                id: "l2".into(),
                height: 2,
                width: 2,
                channels: 4,
            },
            LayerSpec::UpBlock {
                id: "l3".into(),
                convs: vec![3],
            },
            LayerSpec::OutputConv {
                id: "l4".into(),
                channels: 3,
            },
        ],
        SparsityConfig::new(vec![
            SparsityEntry {
                layer_id: "l2".into(),
                axis: Axis::Channel,
                k: 2,
            },
            SparsityEntry {
                layer_id: "l3".into(),
                axis: Axis::Spatial,
                k: 8,
            },
        ])?,
    )?;
    let critic = CriticArch::new(
        (4, 4, 3),
        vec![
            CriticLayer::Conv {
                id: "c1".into(),
                channels: 2,
            },
            CriticLayer::DownBlock {
                id: "c2".into(),
                convs: vec![2],
            },
            CriticLayer::Fc { id: "c3".into() },
        ],
    )?;
    Ok((gen, critic))
}

/// All suites on the given architectures.
pub fn run_all(
    config: &Config,
    gen_arch: &GeneratorArch,
    critic_arch: &CriticArch,
    batch: usize,
    probe: Probe,
) -> Result<Vec<GradCheck>> {
    let mut out = primitive_suite(probe.seed)?;
    let params: ParamCollection<f64> = gen_arch.init_params(&mut stream_rng(probe.seed, Stream::Init));
    let (h, w, c) = gen_arch.output_extents();
    let mut rng = stream_rng(probe.seed, Stream::Prior);
    let z = Tensor::from_fn(&[batch, gen_arch.latent_dim], |_| rng.random_range(-1.5..1.5));
    let y = Tensor::from_fn(&[batch, h, w, c], |_| rng.random_range(-0.9..0.9));
    out.push(log_joint_suite(gen_arch, &params, &y, &z, config.sigma, probe)?);
    out.extend(update_direction_suite(config, gen_arch, critic_arch, batch, probe)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitives_pass() {
        for r in primitive_suite(0).unwrap() {
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn tiny_model_suites_pass() {
        let (g, c) = tiny_archs().unwrap();
        let rs = run_all(&Config::default(), &g, &c, 2, Probe::all()).unwrap();
        assert_eq!(rs.len(), 16 + 3);
        for r in rs {
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        let x = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let wrong = Tensor::new(vec![3], vec![1.0, -2.0, 4.1]).unwrap();
        let mut f = |v: &Tensor<f64>| Ok((v.sum_squares(), 0));
        let r = compare(GradCheck::new("t", "x"), &x, &wrong, &[0, 1, 2], &mut f).unwrap();
        assert!(!r.passed());
        assert!((r.max_rel_err - 0.1 / 4.1).abs() < 1e-6);
    }

    #[test]
    fn kinks_are_skipped() {
        let x = Tensor::new(vec![2], vec![0.0, 1.0]).unwrap();
        let a = Tensor::new(vec![2], vec![0.0, 1.0]).unwrap();
        let mut f = |v: &Tensor<f64>| Ok((v.data().iter().map(|t| t.max(0.0)).sum(), (v.data()[0] > 0.0) as u64));
        let r = compare(GradCheck::new("t", "x"), &x, &a, &[0, 1], &mut f).unwrap();
        assert_eq!((r.checked, r.skipped), (1, 1));
    }

    #[test]
    fn probe_sampling_is_bounded_and_deterministic() {
        let p = Probe { max_coords: Some(5), seed: 3 };
        let c = p.coords(100, 1);
        assert_eq!(c.len(), 5);
        assert_eq!(c, p.coords(100, 1));
        assert_eq!(p.coords(4, 1), vec![0, 1, 2, 3]);
    }
}
