//! `spgen` command-line interface.
//!
//! Any `--section.key value` (or `--section.key=value`) argument is a
//! configuration override applied after `--config`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use spgen::checkpoint::Archive;
use spgen::config::Config;
use spgen::data::{save_grid, Dataset};
use spgen::dissect::{export_report, extract_instance_tree, mine_or_candidates, render_basis, RenderMode};
use spgen::generator::sample_prior;
use spgen::gradcheck::{run_all, tiny_archs, Probe};
use spgen::metrics::{fid, interpretability_gap, mse, sample_images, MetricRecord, ProxyEmbedder};
use spgen::training::{checkpoint_precision, train, Checkpoint};
use spgen::{DType, Real, Tensor};

#[derive(Parser)]
#[command(name = "spgen", version, about = "Sparse top-k generator: training, dissection and evaluation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Root seed; overrides `train.seed` (`data.seed` for make-sprites).
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Impulse,
    Context,
}

#[derive(Subcommand)]
enum Command {
    /// Train from scratch, or resume from `--ckpt`.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Grid of `n` generations from prior draws.
    Synthesize {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 64)]
        n: usize,
    },
    /// Infer codes for `n` images and show originals beside reconstructions.
    Reconstruct {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 16)]
        n: usize,
    },
    /// AND-OR trees, OR-candidate table and basis renderings.
    Dissect {
        #[arg(long)]
        ckpt: PathBuf,
        /// Number of instance trees.
        #[arg(long, default_value_t = 4)]
        n: usize,
        /// Render only this layer.
        #[arg(long)]
        layer: Option<String>,
        #[arg(long, value_enum, default_value_t = Mode::Impulse)]
        mode: Mode,
    },
    EvalFid {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Reconstruction MSE on the `[0, 1]` scale.
    EvalMse {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Use at most this many images.
        #[arg(long)]
        n: Option<usize>,
    },
    /// NCC score of a sparse checkpoint and a dense one.
    EvalInterp {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        dense: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        layer: Option<String>,
    },
    /// Write the synthetic sprite dataset as PNG files.
    MakeSprites {
        #[arg(long)]
        n: Option<usize>,
    },
    /// Finite-difference checks at 64-bit on the tiny and configured models.
    Gradcheck {
        /// Coordinates probed per tensor of the configured model.
        #[arg(long, default_value_t = 8)]
        n: usize,
    },
}

/// Splits `--a.b value` and `--a.b=value` out of the argument list.
fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        match a.strip_prefix("--") {
            Some(flag) if flag.contains('.') => match flag.split_once('=') {
                Some((k, v)) => overrides.push((k.to_string(), v.to_string())),
                None => {
                    let v = it.next().with_context(|| format!("missing value for --{flag}"))?;
                    overrides.push((flag.to_string(), v));
                }
            },
            _ => rest.push(a),
        }
    }
    Ok((rest, overrides))
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("SPGEN_THREADS") {
        let n: usize = v.parse().with_context(|| format!("SPGEN_THREADS = {v:?} is not a count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn emit(v: Value) {
    println!("{v}");
}

fn record(metric: &str, value: f64, cfg: &Config, sizes: &[(&str, usize)], detail: Value) {
    let r = MetricRecord {
        metric: metric.into(),
        value,
        config_digest: cfg.digest(),
        sizes: sizes.iter().map(|(k, n)| (k.to_string(), *n)).collect(),
        detail,
    };
    println!("{}", r.to_line());
}

fn head_batch<T: Real>(ds: &Dataset, n: usize) -> Tensor<T> {
    ds.gather(&(0..n.min(ds.len())).collect::<Vec<_>>())
}

fn write_config(cfg: &Config, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    std::fs::write(out.join("config.txt"), cfg.canonical_text())?;
    Ok(())
}

fn load_ckpt<T: Real>(path: &Path, overrides: &[(String, String)]) -> Result<Checkpoint<T>> {
    let mut state = Checkpoint::<T>::load(path)?;
    if !overrides.is_empty() {
        let mut pairs = state.config.canonical_pairs();
        pairs.extend_from_slice(overrides);
        let cfg = Config::from_pairs(&pairs)?;
        state.config = cfg;
    }
    Ok(state)
}

fn ckpt_precision(path: &Path) -> Result<DType> {
    let a = Archive::load(path)?;
    match checkpoint_precision(&a).as_deref() {
        Some("f32") => Ok(DType::F32),
        Some("f64") => Ok(DType::F64),
        other => bail!("checkpoint {} has unknown precision {other:?}", path.display()),
    }
}

struct Ctx {
    common: Common,
    overrides: Vec<(String, String)>,
}

impl Ctx {
    fn config(&self) -> Result<Config> {
        let cfg = Config::load(self.common.config.as_deref(), &self.overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn seed(&self, cfg: &Config) -> u64 {
        self.common.seed.unwrap_or(cfg.train.seed)
    }
}

fn cmd_train<T: Real>(ctx: &Ctx, cfg: Config, data: Option<&Path>, ckpt: Option<&Path>) -> Result<()> {
    let (mut state, ds) = match ckpt {
        Some(p) => {
            let state = load_ckpt::<T>(p, &ctx.overrides)?;
            let ds = state.config.data.load(state.gen_arch.output_extents().0, data)?;
            (state, ds)
        }
        None => {
            let ds = cfg.data.load(cfg.generator_arch()?.output_extents().0, data)?;
            (Checkpoint::<T>::init(&cfg, ds.len())?, ds)
        }
    };
    write_config(&state.config, &ctx.common.out)?;
    let outcome = train(&mut state, &ds, &ctx.common.out, None)?;
    emit(json!({
        "command": "train",
        "iterations": state.iteration,
        "final_recon_mse": outcome.log.last().map(|l| l.recon_mse),
        "checkpoints": outcome.checkpoints.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        "config_digest": state.config.digest(),
    }));
    Ok(())
}

fn cmd_synthesize<T: Real>(ctx: &Ctx, ckpt: &Path, n: usize) -> Result<()> {
    let state = load_ckpt::<T>(ckpt, &ctx.overrides)?;
    let seed = ctx.seed(&state.config);
    let z = Tensor::stack(&sample_prior::<T>(n, state.gen_arch.latent_dim, seed)?)?;
    let (img, _) = state.gen_arch.forward(&z, &state.gen, true)?;
    let path = ctx.common.out.join("synthesized.png");
    std::fs::create_dir_all(&ctx.common.out)?;
    save_grid(&img.unstack(), grid_cols(n), &path)?;
    emit(json!({"command": "synthesize", "n": n, "seed": seed, "path": path.display().to_string(), "config_digest": state.config.digest()}));
    Ok(())
}

fn grid_cols(n: usize) -> usize {
    ((n as f64).sqrt().ceil() as usize).max(1)
}

fn cmd_reconstruct<T: Real>(ctx: &Ctx, ckpt: &Path, data: Option<&Path>, n: usize) -> Result<()> {
    let state = load_ckpt::<T>(ckpt, &ctx.overrides)?;
    let ds = state.config.data.load(state.gen_arch.output_extents().0, data)?;
    let y: Tensor<T> = head_batch(&ds, n);
    let seed = ctx.seed(&state.config);
    let (_, rec) = state.reconstruct(&y, state.config.train.langevin.steps, seed)?;
    let value = mse(&y, &rec)?;
    let mut tiles = Vec::new();
    for (a, b) in y.unstack().into_iter().zip(rec.unstack()) {
        tiles.push(a);
        tiles.push(b);
    }
    std::fs::create_dir_all(&ctx.common.out)?;
    let path = ctx.common.out.join("reconstruction.png");
    save_grid(&tiles, 8, &path)?;
    record("mse", value, &state.config, &[("images", y.shape()[0])], json!({"grid": path.display().to_string(), "seed": seed}));
    Ok(())
}

fn cmd_dissect<T: Real>(ctx: &Ctx, ckpt: &Path, n: usize, layer: Option<&str>, mode: Mode) -> Result<()> {
    let state = load_ckpt::<T>(ckpt, &ctx.overrides)?;
    let (arch, params) = (&state.gen_arch, &state.gen);
    let seed = ctx.seed(&state.config);
    let codes = sample_prior::<T>(n, arch.latent_dim, seed)?;
    let trees = codes
        .iter()
        .map(|z| extract_instance_tree(arch, params, z).map(|(t, _)| t))
        .collect::<spgen::Result<Vec<_>>>()?;
    let table = mine_or_candidates(arch, params, state.config.metrics.samples, seed)?;
    let layers: Vec<String> = match layer {
        Some(l) => vec![l.to_string()],
        None => arch.sparse_layers().into_iter().map(str::to_string).collect(),
    };
    let mode = match mode {
        Mode::Impulse => RenderMode::Impulse,
        Mode::Context => RenderMode::InContext { seed },
    };
    let mut renderings = Vec::new();
    for l in &layers {
        for (c, _) in table.channels_by_frequency(l).into_iter().take(state.config.metrics.top_m) {
            renderings.push(render_basis(arch, params, l, c, mode)?);
        }
    }
    let files = export_report(&trees, Some(&table), &renderings, &ctx.common.out)?;
    emit(json!({
        "command": "dissect",
        "trees": trees.len(),
        "renderings": renderings.len(),
        "index": files.index.display().to_string(),
        "config_digest": state.config.digest(),
    }));
    Ok(())
}

fn cmd_eval_fid<T: Real>(ctx: &Ctx, ckpt: &Path, data: Option<&Path>) -> Result<()> {
    let state = load_ckpt::<T>(ckpt, &ctx.overrides)?;
    let (h, _, c) = state.gen_arch.output_extents();
    let ds = state.config.data.load(h, data)?;
    let real: Tensor<f64> = head_batch(&ds, ds.len());
    let seed = ctx.seed(&state.config);
    let codes = sample_prior::<T>(ds.len(), state.gen_arch.latent_dim, seed)?;
    let mut gen = Vec::with_capacity(codes.len());
    for chunk in codes.chunks(64) {
        let (img, _) = state.gen_arch.forward(&Tensor::stack(chunk)?, &state.gen, true)?;
        gen.extend(img.unstack().into_iter().map(|t| t.cast::<f64>()));
    }
    let gen = Tensor::stack(&gen)?;
    let m = &state.config.metrics;
    let r = fid(&real, &gen, &ProxyEmbedder::new(c, m.embed_seed), m.fid_equal_sizes)?;
    record("fid", r.value, &state.config, &[("real", r.n_real), ("generated", r.n_gen)], serde_json::to_value(&r)?);
    Ok(())
}

fn cmd_eval_mse<T: Real>(ctx: &Ctx, ckpt: &Path, data: Option<&Path>, n: Option<usize>) -> Result<()> {
    let state = load_ckpt::<T>(ckpt, &ctx.overrides)?;
    let ds = state.config.data.load(state.gen_arch.output_extents().0, data)?;
    let n = n.unwrap_or(ds.len()).min(ds.len());
    let y: Tensor<T> = head_batch(&ds, n);
    // the training chains are the reconstructions when the data set matches
    let (rec, source) = if state.latents.len() == ds.len() {
        let z = state.latents.gather(&(0..n).collect::<Vec<_>>())?;
        (state.gen_arch.forward(&z, &state.gen, true)?.0, "chains")
    } else {
        let seed = ctx.seed(&state.config);
        (state.reconstruct(&y, state.config.train.langevin.steps, seed)?.1, "inference")
    };
    let value = mse(&y, &rec)?;
    record("mse", value, &state.config, &[("images", n)], json!({"codes": source}));
    Ok(())
}

fn cmd_eval_interp<T: Real>(ctx: &Ctx, ckpt: &Path, dense: &Path, data: Option<&Path>, layer: Option<&str>) -> Result<()> {
    let sparse = load_ckpt::<T>(ckpt, &ctx.overrides)?;
    let dense = load_ckpt::<T>(dense, &ctx.overrides)?;
    let cfg = &sparse.config;
    let m = &cfg.metrics;
    let ds = cfg.data.load(sparse.gen_arch.output_extents().0, data)?;
    let seed = ctx.seed(cfg);
    let all: Tensor<f32> = head_batch(&ds, ds.len());
    let images = sample_images(&all, m.ncc_images, seed)?;
    let layer = layer.unwrap_or(&m.layer);
    let g = interpretability_gap(
        (&sparse.gen_arch, &sparse.gen),
        (&dense.gen_arch, &dense.gen),
        &images,
        layer,
        m.top_m,
        m.samples,
        seed,
    )?;
    record(
        "interpretability",
        g.gap(),
        cfg,
        &[("images", images.len()), ("templates", m.top_m)],
        json!({"layer": layer, "score_sparse": g.sparse.score, "score_dense": g.dense.score,
               "skipped_sparse": g.sparse.skipped, "skipped_dense": g.dense.skipped,
               "dense_config_digest": dense.config.digest()}),
    );
    Ok(())
}

fn cmd_make_sprites(ctx: &Ctx, mut cfg: Config, n: Option<usize>) -> Result<()> {
    if let Some(s) = ctx.common.seed {
        cfg.data.seed = s;
    }
    if let Some(n) = n {
        cfg.data.count = n;
    }
    let extent = cfg.generator_arch()?.output_extents().0;
    let ds = spgen::data::make_sprites(&cfg.data.sprite_spec(extent))?;
    ds.save_dir(&ctx.common.out)?;
    emit(json!({"command": "make-sprites", "count": ds.len(), "extent": extent, "seed": cfg.data.seed,
                "out": ctx.common.out.display().to_string()}));
    Ok(())
}

fn cmd_gradcheck(ctx: &Ctx, cfg: Config, n: usize) -> Result<()> {
    let seed = ctx.seed(&cfg);
    let (tg, tc) = tiny_archs()?;
    let mut rows: Vec<(&str, spgen::gradcheck::GradCheck)> = run_all(&cfg, &tg, &tc, 2, Probe { max_coords: None, seed })?
        .into_iter()
        .map(|r| ("tiny", r))
        .collect();
    let probe = Probe {
        max_coords: Some(n),
        seed,
    };
    rows.extend(
        run_all(&cfg, &cfg.generator_arch()?, &cfg.critic_arch(), 2, probe)?
            .into_iter()
            .filter(|r| r.suite != "primitives")
            .map(|r| ("configured", r)),
    );
    let mut failed = 0;
    for (model, r) in &rows {
        let status = if r.passed() { "PASS" } else { "FAIL" };
        failed += usize::from(!r.passed());
        println!(
            "{status} {model:<10} {:<10} {:<16} checked={:<4} skipped={:<4} max_rel_err={:.3e}",
            r.suite, r.target, r.checked, r.skipped, r.max_rel_err
        );
    }
    if failed > 0 {
        bail!("{failed} gradient checks failed");
    }
    Ok(())
}

fn dispatch<F32, F64>(precision: DType, f32_fn: F32, f64_fn: F64) -> Result<()>
where
    F32: FnOnce() -> Result<()>,
    F64: FnOnce() -> Result<()>,
{
    match precision {
        DType::F32 => f32_fn(),
        DType::F64 => f64_fn(),
    }
}

fn run() -> Result<()> {
    let (args, overrides) = split_overrides(std::env::args().collect())?;
    let cli = Cli::parse_from(args);
    init_threads()?;
    let mut overrides = overrides;
    if let (Some(s), false) = (cli.common.seed, matches!(cli.command, Command::MakeSprites { .. })) {
        overrides.push(("train.seed".into(), s.to_string()));
    }
    let ctx = Ctx {
        common: cli.common.clone(),
        overrides,
    };
    match &cli.command {
        Command::Train { data, ckpt } => {
            let cfg = ctx.config()?;
            let p = match ckpt {
                Some(c) => ckpt_precision(c)?,
                None => cfg.precision,
            };
            dispatch(
                p,
                || cmd_train::<f32>(&ctx, cfg.clone(), data.as_deref(), ckpt.as_deref()),
                || cmd_train::<f64>(&ctx, cfg.clone(), data.as_deref(), ckpt.as_deref()),
            )
        }
        Command::Synthesize { ckpt, n } => dispatch(
            ckpt_precision(ckpt)?,
            || cmd_synthesize::<f32>(&ctx, ckpt, *n),
            || cmd_synthesize::<f64>(&ctx, ckpt, *n),
        ),
        Command::Reconstruct { ckpt, data, n } => dispatch(
            ckpt_precision(ckpt)?,
            || cmd_reconstruct::<f32>(&ctx, ckpt, data.as_deref(), *n),
            || cmd_reconstruct::<f64>(&ctx, ckpt, data.as_deref(), *n),
        ),
        Command::Dissect { ckpt, n, layer, mode } => dispatch(
            ckpt_precision(ckpt)?,
            || cmd_dissect::<f32>(&ctx, ckpt, *n, layer.as_deref(), *mode),
            || cmd_dissect::<f64>(&ctx, ckpt, *n, layer.as_deref(), *mode),
        ),
        Command::EvalFid { ckpt, data } => dispatch(
            ckpt_precision(ckpt)?,
            || cmd_eval_fid::<f32>(&ctx, ckpt, data.as_deref()),
            || cmd_eval_fid::<f64>(&ctx, ckpt, data.as_deref()),
        ),
        Command::EvalMse { ckpt, data, n } => dispatch(
            ckpt_precision(ckpt)?,
            || cmd_eval_mse::<f32>(&ctx, ckpt, data.as_deref(), *n),
            || cmd_eval_mse::<f64>(&ctx, ckpt, data.as_deref(), *n),
        ),
        Command::EvalInterp { ckpt, dense, data, layer } => {
            if ckpt_precision(ckpt)? != ckpt_precision(dense)? {
                bail!("sparse and dense checkpoints differ in precision");
            }
            dispatch(
                ckpt_precision(ckpt)?,
                || cmd_eval_interp::<f32>(&ctx, ckpt, dense, data.as_deref(), layer.as_deref()),
                || cmd_eval_interp::<f64>(&ctx, ckpt, dense, data.as_deref(), layer.as_deref()),
            )
        }
        Command::MakeSprites { n } => cmd_make_sprites(&ctx, ctx.config()?, *n),
        Command::Gradcheck { n } => cmd_gradcheck(&ctx, ctx.config()?, *n),
    }
}

fn error_record(e: &anyhow::Error) -> Value {
    let kind = e
        .chain()
        .find_map(|c| c.downcast_ref::<spgen::Error>())
        .map_or("other", |e| e.kind());
    json!({"error": kind, "message": format!("{e:#}")})
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_record(&e));
            ExitCode::FAILURE
        }
    }
}
