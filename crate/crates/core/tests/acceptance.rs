//! Acceptance suite. Every test prints one `criterion N [PASS|FAIL]` line.
//!
//! The desk-scale training runs (criteria 5, 6, 7 and the full-length
//! resume of 9) are `#[ignore]`d; run them with
//! `cargo test --release -p spgen --test acceptance -- --ignored --nocapture`.

use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use spgen::config::Config;
use spgen::data::Dataset;
use spgen::generator::sample_prior;
use spgen::gradcheck::{run_all, tiny_archs, Probe};
use spgen::inference::{infer_posterior, IdentityModel, LangevinConfig};
use spgen::metrics::{
    frechet_distance, interpretability_gap, ncc_map, ncc_map_brute, sample_images, GaussianStats,
};
use spgen::netcore::ParamCollection;
use spgen::rng::{stream_rng, Stream};
use spgen::sparsity::{topk_channel, topk_spatial};
use spgen::training::{checkpoint_path, train, Checkpoint, TrainOutcome};
use spgen::Tensor;

// tolerances and sizes, as stated by the criteria
const SPARSITY_CASES: usize = 10_000;
const GRAD_REL_TOL: f64 = 1e-5;
const DENSE_SAMPLES: usize = 100;
const LANGEVIN_TOL: f64 = 1e-6;
const LANGEVIN_MAX_STEPS: usize = 1000;
const MSE_TARGET: f64 = 0.03;
const MSE_WINDOW: usize = 500;
const INTERP_GAP: f64 = 0.2;
const INTERP_TOP_M: usize = 20;
const INTERP_IMAGES: usize = 200;
const CRITIC_HELDOUT: usize = 128;
const CRITIC_SEEDS: u64 = 10;
const CRITIC_MIN_WINS: usize = 9;
const FRECHET_TOL: f64 = 1e-10;
const NCC_TOL: f64 = 1e-10;
const NCC_PAIRS: usize = 100;
const RESUME_AT: u64 = 500;
const RESUME_END: u64 = 1000;

fn report(id: u32, name: &str, pass: bool, detail: impl AsRef<str>) {
    println!(
        "criterion {id:>2} [{}] {name}: {}",
        if pass { "PASS" } else { "FAIL" },
        detail.as_ref()
    );
    assert!(pass, "criterion {id} failed: {}", detail.as_ref());
}

/// Winners by (value descending, index ascending).
fn oracle_winners(vals: &[f64], k: usize) -> Vec<bool> {
    let mut idx: Vec<usize> = (0..vals.len()).collect();
    idx.sort_by(|&a, &b| vals[b].partial_cmp(&vals[a]).unwrap().then(a.cmp(&b)));
    let mut keep = vec![false; vals.len()];
    for &i in idx.iter().take(k) {
        keep[i] = true;
    }
    keep
}

#[test]
fn criterion_01_sparsity_algebra() {
    let t0 = Instant::now();
    let mut rng = stream_rng(11, Stream::Init);
    let mut failures = Vec::new();
    for case in 0..SPARSITY_CASES {
        let spatial = case % 2 == 1;
        let (h, w, c) = if spatial {
            (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..4))
        } else {
            (1, 1, rng.random_range(1..12))
        };
        // coarse levels force ties
        let levels = rng.random_range(2..6) as f64;
        let x = Tensor::from_fn(&[1, h, w, c], |_| (rng.random_range(0.0..1.0) * levels).floor() / levels);
        let size = if spatial { h * w } else { c };
        let k = rng.random_range(1..=size);
        let op = |t: &Tensor<f64>| if spatial { topk_spatial(t, k) } else { topk_channel(t, k) };
        let (y, m) = op(&x).unwrap();

        let groups: Vec<Vec<usize>> = if spatial {
            (0..c).map(|ch| (0..h * w).map(|p| p * c + ch).collect()).collect()
        } else {
            vec![(0..c).collect()]
        };
        let mut oracle = vec![false; x.len()];
        for g in &groups {
            let vals: Vec<f64> = g.iter().map(|&i| x.data()[i]).collect();
            for (j, keep) in oracle_winners(&vals, k).into_iter().enumerate() {
                oracle[g[j]] = keep;
            }
            if g.iter().filter(|&&i| m.keep()[i]).count() > k {
                failures.push(format!("case {case}: support above k"));
            }
        }
        if m.keep() != oracle.as_slice() {
            failures.push(format!("case {case}: differs from sort oracle"));
        }
        for i in 0..x.len() {
            let want = if m.keep()[i] { x.data()[i] } else { 0.0 };
            if y.data()[i].to_bits() != want.to_bits() {
                failures.push(format!("case {case}: kept value changed"));
                break;
            }
        }
        if op(&y).unwrap().0 != y {
            failures.push(format!("case {case}: not idempotent"));
        }
        let a = rng.random_range(0.1..10.0);
        let (ys, ms) = op(&x.map(|v| a * v)).unwrap();
        if ms.keep() != m.keep() || ys.data().iter().zip(y.data()).any(|(s, v)| s.to_bits() != (a * v).to_bits()) {
            failures.push(format!("case {case}: not scale equivariant"));
        }
        if op(&x).unwrap().1 != m {
            failures.push(format!("case {case}: nondeterministic"));
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    report(
        1,
        "sparsity algebra",
        failures.is_empty() && secs < 10.0,
        format!("{SPARSITY_CASES} cases, {} failures {:?}, {secs:.2}s (limit 10s)", failures.len(), failures.first()),
    );
}

#[test]
fn criterion_02_gradient_contract() {
    let t0 = Instant::now();
    let (g, c) = tiny_archs().unwrap();
    let rs = run_all(&Config::default(), &g, &c, 2, Probe::all()).unwrap();
    let worst = rs.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let all = rs.iter().all(|r| r.checked > 0 && r.max_rel_err <= GRAD_REL_TOL);
    let suites: Vec<String> = rs.iter().map(|r| format!("{}/{}", r.suite, r.target)).collect();
    let secs = t0.elapsed().as_secs_f64();
    report(
        2,
        "gradient contract",
        all && secs < 120.0,
        format!("{} checks ({}), max rel err {worst:.2e} (tol {GRAD_REL_TOL:.0e}), {secs:.2}s", rs.len(), suites.join(" ")),
    );
}

#[test]
fn criterion_03_dense_reduction() {
    let t0 = Instant::now();
    let arch = Config::default().generator_arch().unwrap();
    let params: ParamCollection<f32> = arch.init_params(&mut stream_rng(5, Stream::Init));
    let dense = arch.densified();
    let codes = sample_prior::<f32>(DENSE_SAMPLES, arch.latent_dim, 9).unwrap();
    let mut identical = 0;
    for chunk in codes.chunks(25) {
        let z = Tensor::stack(chunk).unwrap();
        let a = dense.forward(&z, &params, false).unwrap().0;
        let b = arch.forward_dense(&z, &params).unwrap();
        for (x, y) in a.unstack().iter().zip(b.unstack()) {
            identical += usize::from(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    report(
        3,
        "dense reduction",
        identical == DENSE_SAMPLES && secs < 30.0,
        format!("{identical}/{DENSE_SAMPLES} bit-identical, {secs:.2}s"),
    );
}

#[test]
fn criterion_04_langevin_correctness() {
    let t0 = Instant::now();
    let m = IdentityModel { dim: 1 };
    let sigma: f64 = 0.3;
    let mut worst: f64 = 0.0;
    for &y in &[-1.3, 0.0, 0.4, 2.0] {
        let cfg = LangevinConfig {
            step_size: 0.1,
            steps: LANGEVIN_MAX_STEPS,
            noise: false,
            sigma,
        };
        let yt = Tensor::new(vec![1, 1], vec![y]).unwrap();
        let z0 = Tensor::new(vec![1, 1], vec![3.0]).unwrap();
        let z = infer_posterior(&yt, &z0, &m, &cfg, &mut stream_rng(0, Stream::Langevin)).unwrap();
        worst = worst.max((z.data()[0] - y / (1.0 + sigma * sigma)).abs());
    }
    let frozen = LangevinConfig {
        step_size: 0.0,
        steps: 50,
        noise: true,
        sigma,
    };
    let z0 = Tensor::new(vec![2, 1], vec![0.7, -0.2]).unwrap();
    let y = Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap();
    let z = infer_posterior(&y, &z0, &m, &frozen, &mut stream_rng(1, Stream::Langevin)).unwrap();
    let fixed = z == z0;
    let secs = t0.elapsed().as_secs_f64();
    report(
        4,
        "langevin correctness",
        worst <= LANGEVIN_TOL && fixed && secs < 5.0,
        format!("max |Z - Y/(1+s^2)| = {worst:.1e} after {LANGEVIN_MAX_STEPS} steps (tol {LANGEVIN_TOL:.0e}); delta=0 fixed: {fixed}; {secs:.2}s"),
    );
}

fn one_d(mu: f64, var: f64) -> GaussianStats {
    GaussianStats::new(DVector::from_element(1, mu), DMatrix::from_element(1, 1, var)).unwrap()
}

#[test]
fn criterion_08_metric_oracles() {
    let t0 = Instant::now();
    // (mu1 - mu2)^2 + (s1 - s2)^2
    let cases = [((0.0, 1.0), (1.0, 1.0), 1.0), ((0.0, 1.0), (0.0, 4.0), 1.0), ((2.0, 9.0), (-1.0, 0.25), 15.25)];
    let closed = cases
        .iter()
        .map(|&((m1, v1), (m2, v2), want)| (frechet_distance(&one_d(m1, v1), &one_d(m2, v2)).unwrap() - want).abs())
        .fold(0.0, f64::max);

    let mut rng = stream_rng(3, Stream::Metrics);
    let mut feats = |n: usize, shift: f64| -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..8).map(|_| rng.random_range(0.0..1.0) + shift).collect()).collect()
    };
    let a = GaussianStats::fit(&feats(100, 0.0)).unwrap();
    let b = GaussianStats::fit(&feats(100, 0.2)).unwrap();
    let self_fid = frechet_distance(&a, &a).unwrap();
    let asym = (frechet_distance(&a, &b).unwrap() - frechet_distance(&b, &a).unwrap()).abs();

    let mut ncc_err: f64 = 0.0;
    for _ in 0..NCC_PAIRS {
        let (th, tw, c) = (rng.random_range(1..7), rng.random_range(1..7), rng.random_range(1..4));
        let (ih, iw) = (th + rng.random_range(0..8), tw + rng.random_range(0..8));
        let img = Tensor::from_fn(&[ih, iw, c], |_| rng.random_range(-1.0..1.0));
        let t = Tensor::from_fn(&[th, tw, c], |_| rng.random_range(-1.0..1.0));
        let fast = ncc_map(&t, &img).unwrap();
        let slow = ncc_map_brute(&t, &img).unwrap();
        ncc_err = fast.iter().zip(&slow).map(|(x, y)| (x - y).abs()).fold(ncc_err, f64::max);
    }
    let secs = t0.elapsed().as_secs_f64();
    report(
        8,
        "metric oracles",
        closed <= FRECHET_TOL && self_fid <= FRECHET_TOL && asym <= FRECHET_TOL && ncc_err <= NCC_TOL && secs < 60.0,
        format!(
            "1-D closed form err {closed:.1e}, FID(A,A) {self_fid:.1e}, asymmetry {asym:.1e}, fast-vs-brute NCC {ncc_err:.1e} on {NCC_PAIRS} pairs (tol 1e-10), {secs:.2}s"
        ),
    );
}

fn config_from(pairs: &[(&str, &str)]) -> Config {
    let pairs: Vec<(String, String)> = pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
    Config::from_pairs(&pairs).unwrap()
}

fn run(cfg: &Config, dir: &Path, stop_at: Option<u64>) -> (Checkpoint<f32>, TrainOutcome, Dataset) {
    let ds = cfg.data.load(cfg.generator_arch().unwrap().output_extents().0, None).unwrap();
    let mut state = Checkpoint::<f32>::init(cfg, ds.len()).unwrap();
    let out = train(&mut state, &ds, dir, stop_at).unwrap();
    (state, out, ds)
}

fn resume(dir: &Path, at: u64, ds: &Dataset) -> Checkpoint<f32> {
    let mut state = Checkpoint::<f32>::load(&checkpoint_path(dir, at)).unwrap();
    train(&mut state, ds, dir, None).unwrap();
    state
}

fn check_persistence(cfg: &Config, at: u64, end: u64, label: &str) {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let (full_dir, cut_dir) = (dir.path().join("full"), dir.path().join("cut"));
    let (_, _, ds) = run(cfg, &full_dir, None);
    run(cfg, &cut_dir, Some(at));
    resume(&cut_dir, at, &ds);
    let a = std::fs::read(checkpoint_path(&full_dir, end)).unwrap();
    let b = std::fs::read(checkpoint_path(&cut_dir, end)).unwrap();

    let p = checkpoint_path(&full_dir, at);
    let first = std::fs::read(&p).unwrap();
    let copy = dir.path().join("copy.spgn");
    Checkpoint::<f32>::load(&p).unwrap().save(&copy).unwrap();
    let round_trip = std::fs::read(&copy).unwrap() == first;
    report(
        9,
        label,
        a == b && round_trip,
        format!(
            "save-load-save identical: {round_trip}; interrupted at {at} and resumed matches uninterrupted at {end}: {}; {:.1}s",
            a == b,
            t0.elapsed().as_secs_f64()
        ),
    );
}

#[test]
fn criterion_09_persistence_reduced() {
    let cfg = config_from(&[
        ("data.count", "16"),
        ("train.batch", "8"),
        ("langevin.steps", "2"),
        ("train.iters", "6"),
        ("train.checkpoint_every", "3"),
    ]);
    check_persistence(&cfg, 3, 6, "persistence (reduced: 16 sprites, batch 8, resume 3 -> 6)");
}

#[test]
fn criteria_not_run_by_default() {
    for (id, name) in [
        (5, "end-to-end desk-scale training"),
        (6, "interpretability gap"),
        (7, "critic ordering"),
        (9, "persistence at full scale (500 -> 1000)"),
    ] {
        println!("criterion {id:>2} [NOT RUN] {name}: long run, use -- --ignored");
    }
    println!("criterion 10 [DECLARED] benchmark FID and absolute MSE tables are not reproduced at desk scale");
}

fn window_medians(xs: &[f64], w: usize) -> Vec<f64> {
    xs.chunks(w)
        .filter(|c| c.len() == w)
        .map(|c| {
            let mut v = c.to_vec();
            v.sort_by(f64::total_cmp);
            (v[w / 2 - 1] + v[w / 2]) / 2.0
        })
        .collect()
}

/// Mean recon MSE over the last epoch of the log.
fn final_mse(out: &TrainOutcome, n: usize, batch: usize) -> f64 {
    let per_epoch = n.div_ceil(batch);
    let tail: Vec<f64> = out.log.iter().rev().take(per_epoch).map(|l| l.recon_mse).collect();
    tail.iter().sum::<f64>() / tail.len() as f64
}

#[test]
#[ignore]
fn criterion_05_desk_training() {
    let t0 = Instant::now();
    let cfg = Config::default();
    let dir = tempfile::tempdir().unwrap();
    let (_, out, ds) = run(&cfg, dir.path(), None);
    let mses: Vec<f64> = out.log.iter().map(|l| l.recon_mse).collect();
    let med = window_medians(&mses, MSE_WINDOW);
    let monotone = med.windows(2).all(|w| w[1] <= w[0]);
    let fin = final_mse(&out, ds.len(), cfg.train.batch);
    report(
        5,
        "end-to-end desk-scale training",
        fin <= MSE_TARGET && monotone,
        format!(
            "final MSE {fin:.4} (target {MSE_TARGET}), window medians {med:.4?}, {:.0}s",
            t0.elapsed().as_secs_f64()
        ),
    );
}

#[test]
#[ignore]
fn criterion_06_interpretability_gap() {
    let t0 = Instant::now();
    let sparse_cfg = Config::default();
    let dense_pairs = [("sparsity.layer2", "full"), ("sparsity.layer3", "full"), ("sparsity.layer4", "full")];
    let dense_cfg = config_from(&dense_pairs);
    let dir = tempfile::tempdir().unwrap();
    let (sparse, _, ds) = run(&sparse_cfg, &dir.path().join("sparse"), None);
    let (dense, _, _) = run(&dense_cfg, &dir.path().join("dense"), None);
    let all: Tensor<f32> = ds.gather(&(0..ds.len()).collect::<Vec<_>>());
    let images = sample_images(&all, INTERP_IMAGES, 0).unwrap();
    let m = &sparse_cfg.metrics;
    let g = interpretability_gap(
        (&sparse.gen_arch, &sparse.gen),
        (&dense.gen_arch, &dense.gen),
        &images,
        &m.layer,
        INTERP_TOP_M,
        m.samples,
        0,
    )
    .unwrap();
    report(
        6,
        "interpretability gap",
        g.gap() >= INTERP_GAP,
        format!(
            "sparse {:.3}, dense {:.3}, gap {:.3} (need >= {INTERP_GAP}), {:.0}s",
            g.sparse.score,
            g.dense.score,
            g.gap(),
            t0.elapsed().as_secs_f64()
        ),
    );
}

#[test]
#[ignore]
fn criterion_07_critic_ordering() {
    let t0 = Instant::now();
    let mut wins = 0;
    let mut gaps = Vec::new();
    for seed in 0..CRITIC_SEEDS {
        let s = seed.to_string();
        let cfg = config_from(&[("train.seed", &s)]);
        let dir = tempfile::tempdir().unwrap();
        let (state, _, _) = run(&cfg, dir.path(), None);
        let held = config_from(&[("data.count", "128"), ("data.seed", &(1000 + seed).to_string())]);
        let hds = held.data.load(32, None).unwrap();
        let obs: Tensor<f32> = hds.gather(&(0..CRITIC_HELDOUT).collect::<Vec<_>>());
        let z = state.prior_codes(CRITIC_HELDOUT, u64::MAX - seed);
        let syn = state.gen_arch.forward(&z, &state.gen, false).unwrap().0;
        let gap = state.critic_arch.energy_gap(&obs, &syn, &state.critic).unwrap();
        wins += usize::from(gap > 0.0);
        gaps.push(gap);
    }
    report(
        7,
        "critic ordering",
        wins >= CRITIC_MIN_WINS,
        format!(
            "mean f(syn) - mean f(obs) > 0 in {wins}/{CRITIC_SEEDS} seeds (need {CRITIC_MIN_WINS}), gaps {gaps:.3?}, {:.0}s",
            t0.elapsed().as_secs_f64()
        ),
    );
}

#[test]
#[ignore]
fn criterion_09_persistence_full() {
    let end = RESUME_END.to_string();
    let cfg = config_from(&[("train.iters", &end), ("train.checkpoint_every", "500")]);
    check_persistence(&cfg, RESUME_AT, RESUME_END, "persistence (desk32, resume 500 -> 1000)");
}
