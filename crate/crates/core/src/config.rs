//! Flat dotted-key configuration.
//!
//! Text form is one `key = value` per line; `#` starts a comment. Later
//! assignments win, so command-line overrides are simply appended. The
//! canonical text lists every key with its resolved value in a fixed order,
//! and its SHA-256 digest identifies a run's configuration.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::critic::CriticArch;
use crate::data::{load_image_dir, make_sprites, Dataset, SpriteSpec};
use crate::error::{Error, Result};
use crate::generator::{build_arch, ArchOverrides, GeneratorArch, Preset, SparsityOverride};
use crate::inference::LangevinConfig;
use crate::sparsity::Axis;
use crate::tensor::DType;
use crate::training::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSource {
    Sprites,
    Dir,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub path: Option<String>,
    /// Number of sprites to synthesize.
    pub count: usize,
    pub jitter: usize,
    pub seed: u64,
}

impl DataConfig {
    pub fn sprite_spec(&self, extent: usize) -> SpriteSpec {
        SpriteSpec {
            extent,
            jitter: self.jitter,
            count: self.count,
            seed: self.seed,
            ..SpriteSpec::default()
        }
    }

    /// The configured dataset at `extent x extent`; `path` replaces the
    /// configured source with an image directory.
    pub fn load(&self, extent: usize, path: Option<&Path>) -> Result<Dataset> {
        match (path, self.source, &self.path) {
            (Some(p), ..) => load_image_dir(p, extent),
            (None, DataSource::Dir, Some(p)) => load_image_dir(Path::new(p), extent),
            (None, DataSource::Dir, None) => Err(Error::config("data.path", "required when data.source = dir")),
            (None, DataSource::Sprites, _) => make_sprites(&self.sprite_spec(extent)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsConfig {
    /// Part layer used for template matching.
    pub layer: String,
    pub top_m: usize,
    pub ncc_images: usize,
    /// Prior samples used to rank channels by activation frequency.
    pub samples: usize,
    pub fid_equal_sizes: bool,
    pub embed_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub preset: Preset,
    pub sigma: f64,
    pub latent_dim: Option<usize>,
    pub precision: DType,
    pub sparsity: Vec<SparsityOverride>,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub metrics: MetricsConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            preset: Preset::Desk32,
            sigma: LangevinConfig::default().sigma,
            latent_dim: None,
            precision: DType::F32,
            sparsity: Vec::new(),
            train: TrainConfig::default(),
            data: DataConfig {
                source: DataSource::Sprites,
                path: None,
                count: 2000,
                jitter: 1,
                seed: 0,
            },
            metrics: MetricsConfig {
                layer: "layer3".into(),
                top_m: 20,
                ncc_images: 200,
                samples: 256,
                fid_equal_sizes: true,
                embed_seed: 0,
            },
        }
    }
}

/// Splits config text into `(key, value)` pairs.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("config line {}: expected `key = value`", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{v}`")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(Error::config(key, format!("expected a boolean, got `{v}`"))),
    }
}

fn sparsity_value(layer_id: &str, key: &str, v: &str, preset_arch: &GeneratorArch) -> Result<SparsityOverride> {
    let (axis, k) = match v.split_once(':') {
        Some((a, k)) => (a.parse::<Axis>().map_err(|_| Error::config(key, format!("unknown axis `{a}`")))?, k),
        None => {
            let axis = preset_arch
                .sparsity
                .get(layer_id)
                .map(|e| e.axis)
                .ok_or_else(|| Error::config(key, "layer is not sparse in the preset; give `axis:k`"))?;
            (axis, v)
        }
    };
    let k = match k {
        "full" => None,
        other => Some(num(key, other)?),
    };
    Ok(SparsityOverride {
        layer_id: layer_id.to_string(),
        axis,
        k,
    })
}

impl Config {
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let mut c = Config::default();
        // the preset decides how bare `sparsity.<id> = full` resolves
        for (k, v) in pairs {
            if k == "model.preset" {
                c.preset = v.parse()?;
            }
        }
        let preset_arch = build_arch(c.preset, &ArchOverrides::default())?;
        for (k, v) in pairs {
            let v = v.as_str();
            match k.as_str() {
                "model.preset" => {}
                "model.sigma" => c.sigma = num(k, v)?,
                "model.latent_dim" => c.latent_dim = Some(num(k, v)?),
                "model.precision" => {
                    c.precision = match v {
                        "f32" => DType::F32,
                        "f64" => DType::F64,
                        _ => return Err(Error::config(k, format!("expected f32 or f64, got `{v}`"))),
                    }
                }
                "langevin.delta" => c.train.langevin.step_size = num(k, v)?,
                "langevin.steps" => c.train.langevin.steps = num(k, v)?,
                "langevin.noise" => c.train.langevin.noise = flag(k, v)?,
                "train.iters" => c.train.iterations = num(k, v)?,
                "train.batch" => c.train.batch = num(k, v)?,
                "train.lr_gen" => c.train.lr_gen = num(k, v)?,
                "train.lr_critic" => c.train.lr_critic = num(k, v)?,
                "train.optimizer" => c.train.optimizer = v.parse()?,
                "train.seed" => c.train.seed = num(k, v)?,
                "train.checkpoint_every" => c.train.checkpoint_every = num(k, v)?,
                "train.critic" => c.train.critic = flag(k, v)?,
                "train.energy_term" => c.train.energy_term = flag(k, v)?,
                "train.clip_grad" => {
                    let x: f64 = num(k, v)?;
                    c.train.clip_grad = (x > 0.0).then_some(x);
                }
                "data.source" => {
                    c.data.source = match v {
                        "sprites" => DataSource::Sprites,
                        "dir" => DataSource::Dir,
                        _ => return Err(Error::config(k, format!("expected sprites or dir, got `{v}`"))),
                    }
                }
                "data.path" => c.data.path = (!v.is_empty()).then(|| v.to_string()),
                "data.count" => c.data.count = num(k, v)?,
                "data.jitter" => c.data.jitter = num(k, v)?,
                "data.seed" => c.data.seed = num(k, v)?,
                "metrics.layer" => c.metrics.layer = v.to_string(),
                "metrics.top_m" => c.metrics.top_m = num(k, v)?,
                "metrics.ncc_images" => c.metrics.ncc_images = num(k, v)?,
                "metrics.samples" => c.metrics.samples = num(k, v)?,
                "metrics.fid_equal_sizes" => c.metrics.fid_equal_sizes = flag(k, v)?,
                "metrics.embed_seed" => c.metrics.embed_seed = num(k, v)?,
                other => match other.strip_prefix("sparsity.") {
                    Some(id) if !id.is_empty() => {
                        let o = sparsity_value(id, k, v, &preset_arch)?;
                        c.sparsity.retain(|e| e.layer_id != o.layer_id);
                        c.sparsity.push(o);
                    }
                    _ => return Err(Error::config(other, "unknown configuration key")),
                },
            }
        }
        c.train.langevin.sigma = c.sigma;
        c.validate()?;
        Ok(c)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Config::from_pairs(&parse_pairs(text)?)
    }

    /// Reads `path` (if any) and applies `overrides` on top.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut pairs = match path {
            Some(p) => parse_pairs(&std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
            None => Vec::new(),
        };
        pairs.extend_from_slice(overrides);
        Config::from_pairs(&pairs)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.generator_arch()?;
        if self.data.count == 0 {
            return Err(Error::config("data.count", "must be positive"));
        }
        if self.data.source == DataSource::Dir && self.data.path.is_none() {
            return Err(Error::config("data.path", "required when data.source = dir"));
        }
        if self.metrics.top_m == 0 || self.metrics.ncc_images == 0 || self.metrics.samples == 0 {
            return Err(Error::config("metrics", "counts must be positive"));
        }
        Ok(())
    }

    pub fn overrides(&self) -> ArchOverrides {
        ArchOverrides {
            latent_dim: self.latent_dim,
            sparsity: self.sparsity.clone(),
        }
    }

    pub fn generator_arch(&self) -> Result<GeneratorArch> {
        build_arch(self.preset, &self.overrides())
    }

    pub fn critic_arch(&self) -> CriticArch {
        CriticArch::preset(self.preset)
    }

    /// Every key with its resolved value, in a fixed order.
    pub fn canonical_pairs(&self) -> Vec<(String, String)> {
        let arch = self.generator_arch().expect("validated config");
        let t = &self.train;
        let mut v: Vec<(&str, String)> = vec![
            ("model.preset", self.preset.to_string()),
            ("model.sigma", self.sigma.to_string()),
            ("model.latent_dim", arch.latent_dim.to_string()),
            ("model.precision", self.precision.name().to_string()),
        ];
        let mut out: Vec<(String, String)> = v.drain(..).map(|(k, x)| (k.to_string(), x)).collect();
        for e in arch.sparsity.entries() {
            out.push((format!("sparsity.{}", e.layer_id), format!("{}:{}", e.axis, e.k)));
        }
        let rest: Vec<(&str, String)> = vec![
            ("langevin.delta", t.langevin.step_size.to_string()),
            ("langevin.steps", t.langevin.steps.to_string()),
            ("langevin.noise", t.langevin.noise.to_string()),
            ("train.iters", t.iterations.to_string()),
            ("train.batch", t.batch.to_string()),
            ("train.lr_gen", t.lr_gen.to_string()),
            ("train.lr_critic", t.lr_critic.to_string()),
            ("train.optimizer", t.optimizer.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.checkpoint_every", t.checkpoint_every.to_string()),
            ("train.critic", t.critic.to_string()),
            ("train.energy_term", t.energy_term.to_string()),
            ("train.clip_grad", t.clip_grad.unwrap_or(0.0).to_string()),
            (
                "data.source",
                match self.data.source {
                    DataSource::Sprites => "sprites",
                    DataSource::Dir => "dir",
                }
                .to_string(),
            ),
            ("data.path", self.data.path.clone().unwrap_or_default()),
            ("data.count", self.data.count.to_string()),
            ("data.jitter", self.data.jitter.to_string()),
            ("data.seed", self.data.seed.to_string()),
            ("metrics.layer", self.metrics.layer.clone()),
            ("metrics.top_m", self.metrics.top_m.to_string()),
            ("metrics.ncc_images", self.metrics.ncc_images.to_string()),
            ("metrics.samples", self.metrics.samples.to_string()),
            ("metrics.fid_equal_sizes", self.metrics.fid_equal_sizes.to_string()),
            ("metrics.embed_seed", self.metrics.embed_seed.to_string()),
        ];
        out.extend(rest.into_iter().map(|(k, x)| (k.to_string(), x)));
        out
    }

    pub fn canonical_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.canonical_pairs() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Hex SHA-256 of the canonical text.
    pub fn digest(&self) -> String {
        hex_digest(self.canonical_text().as_bytes())
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_text_round_trips() {
        let c = Config::parse("model.sigma = 0.5\nsparsity.layer3 = full\ntrain.iters = 7 # short\n").unwrap();
        let again = Config::parse(&c.canonical_text()).unwrap();
        assert_eq!(again.canonical_text(), c.canonical_text());
        assert_eq!(again.digest(), c.digest());
        assert_eq!(again.generator_arch().unwrap(), c.generator_arch().unwrap());
        assert_eq!(c.generator_arch().unwrap().sparsity.get("layer3").unwrap().k, 64);
    }

    #[test]
    fn later_assignment_wins() {
        let pairs = vec![
            ("train.seed".to_string(), "1".to_string()),
            ("train.seed".to_string(), "9".to_string()),
        ];
        assert_eq!(Config::from_pairs(&pairs).unwrap().train.seed, 9);
    }

    #[test]
    fn unknown_key_is_rejected_by_name() {
        let err = Config::parse("train.itres = 3").unwrap_err();
        assert!(err.to_string().contains("train.itres"), "{err}");
    }

    #[test]
    fn digest_separates_configs() {
        let a = Config::default();
        let b = Config::parse("langevin.steps = 16").unwrap();
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.digest(), Config::default().digest());
        assert_eq!(a.digest().len(), 64);
    }

    #[test]
    fn sigma_reaches_langevin() {
        let c = Config::parse("model.sigma = 0.7").unwrap();
        assert_eq!(c.train.langevin.sigma, 0.7);
    }
}
