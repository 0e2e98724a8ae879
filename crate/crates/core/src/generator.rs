//! The sparse top-down generator `g(Z; Θ, k)`.
//!
//! An architecture is a fully connected layer that lifts the latent code to a
//! small feature map, a chain of upsampling blocks (nearest-neighbour 2x, then
//! 3x3 conv + ReLU layers), and a final 3x3 conv + tanh to image channels.
//! Sparse layers apply a top-k operator to their block output, after the ReLU.
//!
//! Layer ids follow the 7-layer numbering of the reference 64x64 network:
//! `layer2` is the fully connected layer, `layer3`.. are blocks, and the last
//! id is the output convolution. In the object/part/primitive reading of the
//! hierarchy, `layer2` grounds object symbols, `layer3` parts and `layer4`
//! primitives.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::netcore::{he_normal, ParamCollection, Tape, Var};
use crate::rng::{normal_matrix, stream_rng, Stream};
use crate::sparsity::{Axis, SparseMask, SparsityConfig, SparsityEntry};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// The full 64x64 reference network.
    Paper64,
    /// Reduced widths at 32x32; keeps the 25% spatial keep ratio.
    Desk32,
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Paper64 => "paper64",
            Preset::Desk32 => "desk32",
        })
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper64" => Ok(Preset::Paper64),
            "desk32" => Ok(Preset::Desk32),
            other => Err(Error::config("model.preset", format!("unknown preset `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSpec {
    /// Latent code to an `height x width x channels` map, then ReLU.
    Fc {
        id: String,
        height: usize,
        width: usize,
        channels: usize,
    },
    /// Upsample 2x, then one conv + ReLU per entry of `convs`.
    UpBlock { id: String, convs: Vec<usize> },
    /// Conv to image channels, then tanh.
    OutputConv { id: String, channels: usize },
}

impl LayerSpec {
    pub fn id(&self) -> &str {
        match self {
            LayerSpec::Fc { id, .. } | LayerSpec::UpBlock { id, .. } | LayerSpec::OutputConv { id, .. } => id,
        }
    }
}

/// `k = None` means "keep everything" and resolves to the axis size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparsityOverride {
    pub layer_id: String,
    pub axis: Axis,
    pub k: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ArchOverrides {
    pub latent_dim: Option<usize>,
    pub sparsity: Vec<SparsityOverride>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneratorArch {
    pub latent_dim: usize,
    pub layers: Vec<LayerSpec>,
    pub sparsity: SparsityConfig,
}

/// Inclusive pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
}

impl Rect {
    pub fn height(&self) -> usize {
        self.y1 - self.y0 + 1
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0 + 1
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.y0..=self.y1).contains(&y) && (self.x0..=self.x1).contains(&x)
    }
}

/// One sparse layer's activations, recorded on a tape.
#[derive(Debug, Clone)]
pub struct SparseStage {
    pub layer_id: String,
    pub post_activation: Var,
    pub post_sparsity: Var,
    pub mask: SparseMask,
}

/// Activations of every sparse layer for one forward pass.
#[derive(Debug, Clone)]
pub struct LayerTrace<T: Real> {
    pub layer_id: String,
    pub post_activation: Tensor<T>,
    pub post_sparsity: Tensor<T>,
    pub mask: SparseMask,
}

/// Output of recording the generator on a tape.
#[derive(Debug, Clone)]
pub struct Recorded {
    pub image: Var,
    pub stages: Vec<SparseStage>,
}

pub fn build_arch(preset: Preset, overrides: &ArchOverrides) -> Result<GeneratorArch> {
    let (latent_dim, layers, sparse) = match preset {
        Preset::Paper64 => (
            100,
            vec![
                fc("layer2", 4, 4, 3200),
                up("layer3", &[512, 512]),
                up("layer4", &[256, 256]),
                up("layer5", &[128, 128]),
                up("layer6", &[64, 64]),
                out("layer7"),
            ],
            vec![
                ("layer2", Axis::Channel, 8),
                ("layer3", Axis::Spatial, 8 * 8 / 4),
                ("layer4", Axis::Spatial, 16 * 16 / 4),
                ("layer5", Axis::Spatial, 32 * 32 / 4),
            ],
        ),
        Preset::Desk32 => (
            64,
            vec![
                fc("layer2", 4, 4, 256),
                up("layer3", &[128, 128]),
                up("layer4", &[64, 64]),
                up("layer5", &[32, 32]),
                out("layer6"),
            ],
            vec![
                ("layer2", Axis::Channel, 2),
                ("layer3", Axis::Spatial, 8 * 8 / 4),
                ("layer4", Axis::Spatial, 16 * 16 / 4),
            ],
        ),
    };
    let mut entries: Vec<SparsityEntry> = sparse
        .into_iter()
        .map(|(id, axis, k)| SparsityEntry {
            layer_id: id.to_string(),
            axis,
            k,
        })
        .collect();
    let latent_dim = match overrides.latent_dim {
        Some(0) => return Err(Error::config("model.latent_dim", "must be positive")),
        Some(d) => d,
        None => latent_dim,
    };
    let probe = GeneratorArch {
        latent_dim,
        layers: layers.clone(),
        sparsity: SparsityConfig::default(),
    };
    for ov in &overrides.sparsity {
        let key = format!("sparsity.{}", ov.layer_id);
        let (h, w, c) = probe
            .layer_extents(&ov.layer_id)
            .map_err(|_| Error::config(&key, "no such layer"))?;
        if matches!(probe.layers.iter().find(|l| l.id() == ov.layer_id), Some(LayerSpec::OutputConv { .. })) {
            return Err(Error::config(&key, "the output layer cannot be sparse"));
        }
        let size = match ov.axis {
            Axis::Channel => c,
            Axis::Spatial => h * w,
        };
        let k = ov.k.unwrap_or(size);
        if k == 0 || k > size {
            return Err(Error::config(&key, format!("k = {k} outside 1..={size}")));
        }
        let entry = SparsityEntry {
            layer_id: ov.layer_id.clone(),
            axis: ov.axis,
            k,
        };
        match entries.iter_mut().find(|e| e.layer_id == ov.layer_id) {
            Some(e) => *e = entry,
            None => entries.push(entry),
        }
    }
    // keep entries in layer order
    entries.sort_by_key(|e| probe.layers.iter().position(|l| l.id() == e.layer_id));
    GeneratorArch::new(latent_dim, layers, SparsityConfig::new(entries)?)
}

fn fc(id: &str, height: usize, width: usize, channels: usize) -> LayerSpec {
    LayerSpec::Fc {
        id: id.into(),
        height,
        width,
        channels,
    }
}

fn up(id: &str, convs: &[usize]) -> LayerSpec {
    LayerSpec::UpBlock {
        id: id.into(),
        convs: convs.to_vec(),
    }
}

fn out(id: &str) -> LayerSpec {
    LayerSpec::OutputConv {
        id: id.into(),
        channels: 3,
    }
}

impl GeneratorArch {
    pub fn new(latent_dim: usize, layers: Vec<LayerSpec>, sparsity: SparsityConfig) -> Result<Self> {
        let arch = GeneratorArch {
            latent_dim,
            layers,
            sparsity,
        };
        arch.validate()?;
        Ok(arch)
    }

    fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::config("model.latent_dim", "must be positive"));
        }
        match self.layers.first() {
            Some(LayerSpec::Fc { height, width, channels, .. }) if *height > 0 && *width > 0 && *channels > 0 => {}
            _ => return Err(Error::config("arch", "first layer must be a non-empty fully connected layer")),
        }
        match self.layers.last() {
            Some(LayerSpec::OutputConv { channels, .. }) if *channels > 0 => {}
            _ => return Err(Error::config("arch", "last layer must be the output convolution")),
        }
        for (i, l) in self.layers.iter().enumerate() {
            if self.layers[..i].iter().any(|o| o.id() == l.id()) {
                return Err(Error::config("arch", format!("duplicate layer id `{}`", l.id())));
            }
            let interior = i > 0 && i + 1 < self.layers.len();
            match l {
                LayerSpec::UpBlock { convs, .. } if interior => {
                    if convs.is_empty() || convs.contains(&0) {
                        return Err(Error::config("arch", format!("block `{}` needs positive conv widths", l.id())));
                    }
                }
                LayerSpec::UpBlock { .. } => {}
                _ if interior => {
                    return Err(Error::config("arch", format!("layer `{}` must be an upsampling block", l.id())));
                }
                _ => {}
            }
        }
        for e in self.sparsity.entries() {
            let key = format!("sparsity.{}", e.layer_id);
            let (h, w, c) = self.layer_extents(&e.layer_id).map_err(|_| Error::config(&key, "no such layer"))?;
            if matches!(self.layer(&e.layer_id), Some(LayerSpec::OutputConv { .. })) {
                return Err(Error::config(&key, "the output layer cannot be sparse"));
            }
            let size = match e.axis {
                Axis::Channel => c,
                Axis::Spatial => h * w,
            };
            if e.k == 0 || e.k > size {
                return Err(Error::config(&key, format!("k = {} outside 1..={size}", e.k)));
            }
        }
        Ok(())
    }

    pub fn layer(&self, id: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.id() == id)
    }

    pub fn layer_index(&self, id: &str) -> Result<usize> {
        self.layers
            .iter()
            .position(|l| l.id() == id)
            .ok_or_else(|| Error::contract(format!("unknown layer `{id}`")))
    }

    /// Output extents `(H, W, C)` of the named layer.
    pub fn layer_extents(&self, id: &str) -> Result<(usize, usize, usize)> {
        let idx = self.layer_index(id)?;
        Ok(self.extents_after(idx))
    }

    fn extents_after(&self, idx: usize) -> (usize, usize, usize) {
        let mut ext = (0, 0, 0);
        for l in &self.layers[..=idx] {
            ext = match l {
                LayerSpec::Fc { height, width, channels, .. } => (*height, *width, *channels),
                LayerSpec::UpBlock { convs, .. } => (ext.0 * 2, ext.1 * 2, *convs.last().unwrap_or(&ext.2)),
                LayerSpec::OutputConv { channels, .. } => (ext.0, ext.1, *channels),
            };
        }
        ext
    }

    /// Final image extents `(H, W, C)`.
    pub fn output_extents(&self) -> (usize, usize, usize) {
        self.extents_after(self.layers.len() - 1)
    }

    /// Ids of the sparse layers in network order.
    pub fn sparse_layers(&self) -> Vec<&str> {
        self.layers
            .iter()
            .filter(|l| self.sparsity.get(l.id()).is_some())
            .map(LayerSpec::id)
            .collect()
    }

    /// Number of part symbols under the object node: the spatial positions of `layer_id`.
    pub fn part_symbol_count(&self, layer_id: &str) -> Result<usize> {
        let (h, w, _) = self.layer_extents(layer_id)?;
        Ok(h * w)
    }

    /// Children per AND node between consecutive conv layers: the kernel area.
    pub const KERNEL_CHILDREN: usize = 9;

    /// The same layers and sparse layer ids, every `k` set to its axis size.
    pub fn densified(&self) -> GeneratorArch {
        let entries = self
            .sparsity
            .entries()
            .iter()
            .map(|e| {
                let (h, w, c) = self.layer_extents(&e.layer_id).expect("validated");
                SparsityEntry {
                    layer_id: e.layer_id.clone(),
                    axis: e.axis,
                    k: if e.axis == Axis::Channel { c } else { h * w },
                }
            })
            .collect();
        GeneratorArch {
            latent_dim: self.latent_dim,
            layers: self.layers.clone(),
            sparsity: SparsityConfig::new(entries).expect("validated"),
        }
    }

    /// The same layers with no sparse layers at all.
    pub fn without_sparsity(&self) -> GeneratorArch {
        GeneratorArch {
            latent_dim: self.latent_dim,
            layers: self.layers.clone(),
            sparsity: SparsityConfig::default(),
        }
    }

    /// `(name, shape, fan_in)` for every parameter, in creation order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>, usize)> {
        let mut out = Vec::new();
        let mut ch = 0;
        for l in &self.layers {
            match l {
                LayerSpec::Fc { id, height, width, channels } => {
                    let d_out = height * width * channels;
                    out.push((format!("gen/{id}/fc/weight"), vec![d_out, self.latent_dim], self.latent_dim));
                    out.push((format!("gen/{id}/fc/bias"), vec![d_out], 0));
                    ch = *channels;
                }
                LayerSpec::UpBlock { id, convs } => {
                    for (j, &co) in convs.iter().enumerate() {
                        out.push((format!("gen/{id}/conv{}/weight", j + 1), vec![3, 3, ch, co], 9 * ch));
                        out.push((format!("gen/{id}/conv{}/bias", j + 1), vec![co], 0));
                        ch = co;
                    }
                }
                LayerSpec::OutputConv { id, channels } => {
                    out.push((format!("gen/{id}/conv/weight"), vec![3, 3, ch, *channels], 9 * ch));
                    out.push((format!("gen/{id}/conv/bias"), vec![*channels], 0));
                }
            }
        }
        out
    }

    /// Fan-in scaled Gaussian weights and zero biases.
    pub fn init_params<T: Real>(&self, rng: &mut ChaCha8Rng) -> ParamCollection<T> {
        let mut params = ParamCollection::new();
        for (name, shape, fan_in) in self.param_shapes() {
            let value = if name.ends_with("/bias") {
                Tensor::zeros(&shape)
            } else {
                he_normal(&shape, fan_in, rng)
            };
            params.insert(name, value).expect("unique names");
        }
        params
    }

    /// Checks that `params` holds exactly this architecture's parameters.
    pub fn check_params<T: Real>(&self, params: &ParamCollection<T>) -> Result<()> {
        let shapes = self.param_shapes();
        if shapes.len() != params.len() {
            return Err(Error::contract(format!(
                "generator expects {} parameters, collection has {}",
                shapes.len(),
                params.len()
            )));
        }
        for (name, shape, _) in shapes {
            let p = params.get(&name)?;
            if p.value.shape() != shape.as_slice() {
                return Err(Error::contract(format!(
                    "parameter `{name}` has shape {:?}, architecture needs {shape:?}",
                    p.value.shape()
                )));
            }
        }
        Ok(())
    }

    /// Records `g(z)` on `tape`. `z` is `[d]` or `[B, d]`.
    pub fn record<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamCollection<T>,
        z: Var,
        sparse: bool,
    ) -> Result<Recorded> {
        self.record_prefix(tape, params, z, self.layers.len(), sparse)
    }

    /// Records layers `0..end`; `image` is then the output of layer `end - 1`.
    pub fn record_prefix<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamCollection<T>,
        z: Var,
        end: usize,
        sparse: bool,
    ) -> Result<Recorded> {
        if end == 0 || end > self.layers.len() {
            return Err(Error::contract(format!("prefix end {end} outside 1..={}", self.layers.len())));
        }
        let zs = tape.value(z).shape().to_vec();
        let batch = match zs.as_slice() {
            [d] if *d == self.latent_dim => None,
            [b, d] if *d == self.latent_dim => Some(*b),
            _ => {
                return Err(Error::dim(
                    "latent code",
                    format!("expected [{0}] or [B, {0}], got {zs:?}", self.latent_dim),
                ))
            }
        };
        let mut stages = Vec::new();
        let mut x = self.record_stage(tape, params, 0, z, batch, sparse, &mut stages)?;
        for i in 1..end {
            x = self.record_stage(tape, params, i, x, batch, sparse, &mut stages)?;
        }
        Ok(Recorded { image: x, stages })
    }

    /// Runs layers `start..` on an existing feature map `x` (the output of layer `start - 1`).
    pub fn record_from<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamCollection<T>,
        start: usize,
        mut x: Var,
        sparse: bool,
        stages: &mut Vec<SparseStage>,
    ) -> Result<Var> {
        let batch = (tape.value(x).rank() == 4).then(|| tape.value(x).shape()[0]);
        for i in start.max(1)..self.layers.len() {
            x = self.record_stage(tape, params, i, x, batch, sparse, stages)?;
        }
        Ok(x)
    }

    #[allow(clippy::too_many_arguments)]
    fn record_stage<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamCollection<T>,
        i: usize,
        x: Var,
        batch: Option<usize>,
        sparse: bool,
        stages: &mut Vec<SparseStage>,
    ) -> Result<Var> {
        let layer = &self.layers[i];
        let act = match layer {
            LayerSpec::Fc { id, height, width, channels } => {
                let w = tape.param(params, &format!("gen/{id}/fc/weight"))?;
                let b = tape.param(params, &format!("gen/{id}/fc/bias"))?;
                let h = tape.linear(x, w, b)?;
                let shape: Vec<usize> = match batch {
                    Some(n) => vec![n, *height, *width, *channels],
                    None => vec![*height, *width, *channels],
                };
                let h = tape.reshape(h, &shape)?;
                tape.relu(h)
            }
            LayerSpec::UpBlock { id, convs } => {
                let mut h = tape.upsample(x)?;
                for j in 1..=convs.len() {
                    let w = tape.param(params, &format!("gen/{id}/conv{j}/weight"))?;
                    let b = tape.param(params, &format!("gen/{id}/conv{j}/bias"))?;
                    h = tape.conv3x3(h, w, b)?;
                    h = tape.relu(h);
                }
                h
            }
            LayerSpec::OutputConv { id, .. } => {
                let w = tape.param(params, &format!("gen/{id}/conv/weight"))?;
                let b = tape.param(params, &format!("gen/{id}/conv/bias"))?;
                let h = tape.conv3x3(x, w, b)?;
                return Ok(tape.tanh(h));
            }
        };
        match self.sparsity.get(layer.id()) {
            Some(entry) if sparse => {
                let (out, mask) = tape.topk(act, entry.axis, entry.k)?;
                stages.push(SparseStage {
                    layer_id: layer.id().to_string(),
                    post_activation: act,
                    post_sparsity: out,
                    mask,
                });
                Ok(out)
            }
            _ => Ok(act),
        }
    }

    /// Deterministic synthesis of the mean image `g(z)`; no observation noise.
    pub fn forward<T: Real>(
        &self,
        z: &Tensor<T>,
        params: &ParamCollection<T>,
        with_trace: bool,
    ) -> Result<(Tensor<T>, Option<Vec<LayerTrace<T>>>)> {
        self.check_params(params)?;
        let mut tape = Tape::without_param_grads();
        let zv = tape.constant(z.clone());
        let rec = self.record(&mut tape, params, zv, true)?;
        let trace = with_trace.then(|| collect_trace(&tape, &rec.stages));
        Ok((tape.value(rec.image).clone(), trace))
    }

    /// Forward pass with every top-k operator skipped.
    pub fn forward_dense<T: Real>(&self, z: &Tensor<T>, params: &ParamCollection<T>) -> Result<Tensor<T>> {
        self.check_params(params)?;
        let mut tape = Tape::without_param_grads();
        let zv = tape.constant(z.clone());
        let rec = self.record(&mut tape, params, zv, false)?;
        Ok(tape.value(rec.image).clone())
    }

    /// Image rectangle influenced by unit `pos` of layer `layer_id`.
    pub fn projective_field(&self, layer_id: &str, pos: (usize, usize)) -> Result<Rect> {
        let to = self.layers.len() - 1;
        self.field_between(layer_id, to, pos)
    }

    /// Rectangle, in the output of layer index `to`, reached from `pos` at `layer_id`.
    pub fn field_between(&self, layer_id: &str, to: usize, pos: (usize, usize)) -> Result<Rect> {
        let from = self.layer_index(layer_id)?;
        let (h, w, _) = self.extents_after(from);
        if pos.0 >= h || pos.1 >= w {
            return Err(Error::contract(format!("position {pos:?} outside {h}x{w} at `{layer_id}`")));
        }
        if to < from {
            return Err(Error::contract("target layer precedes source layer"));
        }
        let (mut y0, mut y1, mut x0, mut x1) = (pos.0 as i64, pos.0 as i64, pos.1 as i64, pos.1 as i64);
        for l in &self.layers[from + 1..=to] {
            let convs = match l {
                LayerSpec::UpBlock { convs, .. } => {
                    y0 *= 2;
                    x0 *= 2;
                    y1 = 2 * y1 + 1;
                    x1 = 2 * x1 + 1;
                    convs.len() as i64
                }
                LayerSpec::OutputConv { .. } => 1,
                LayerSpec::Fc { .. } => 0,
            };
            y0 -= convs;
            x0 -= convs;
            y1 += convs;
            x1 += convs;
        }
        let (th, tw, _) = self.extents_after(to);
        Ok(Rect {
            y0: y0.max(0) as usize,
            x0: x0.max(0) as usize,
            y1: y1.min(th as i64 - 1) as usize,
            x1: x1.min(tw as i64 - 1) as usize,
        })
    }

    /// Canonical text description, one `key = value` per line.
    pub fn describe(&self) -> Vec<(String, String)> {
        let mut out = vec![("gen.latent_dim".to_string(), self.latent_dim.to_string())];
        for (i, l) in self.layers.iter().enumerate() {
            let v = match l {
                LayerSpec::Fc { id, height, width, channels } => format!("fc {id} {height} {width} {channels}"),
                LayerSpec::UpBlock { id, convs } => format!(
                    "up {id} {}",
                    convs.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
                ),
                LayerSpec::OutputConv { id, channels } => format!("out {id} {channels}"),
            };
            out.push((format!("gen.layer.{i:02}"), v));
        }
        for e in self.sparsity.entries() {
            out.push((format!("gen.sparsity.{}", e.layer_id), format!("{}:{}", e.axis, e.k)));
        }
        out
    }

    /// Inverse of [`GeneratorArch::describe`].
    pub fn parse_description(lines: &[(String, String)]) -> Result<Self> {
        let mut latent_dim = None;
        let mut layers = Vec::new();
        let mut entries = Vec::new();
        for (k, v) in lines {
            if k == "gen.latent_dim" {
                latent_dim = Some(parse_usize(k, v)?);
            } else if k.starts_with("gen.layer.") {
                let parts: Vec<&str> = v.split_whitespace().collect();
                let nums = |s: &[&str]| s.iter().map(|x| parse_usize(k, x)).collect::<Result<Vec<_>>>();
                let spec = match parts.as_slice() {
                    ["fc", id, rest @ ..] if rest.len() == 3 => {
                        let n = nums(rest)?;
                        fc(id, n[0], n[1], n[2])
                    }
                    ["up", id, rest @ ..] => up(id, &nums(rest)?),
                    ["out", id, c] => LayerSpec::OutputConv {
                        id: id.to_string(),
                        channels: parse_usize(k, c)?,
                    },
                    _ => return Err(Error::Format(format!("bad layer description `{v}`"))),
                };
                layers.push(spec);
            } else if let Some(id) = k.strip_prefix("gen.sparsity.") {
                let (axis, kk) = v
                    .split_once(':')
                    .ok_or_else(|| Error::Format(format!("bad sparsity description `{v}`")))?;
                entries.push(SparsityEntry {
                    layer_id: id.to_string(),
                    axis: axis.parse()?,
                    k: parse_usize(k, kk)?,
                });
            }
        }
        let latent_dim = latent_dim.ok_or_else(|| Error::Format("missing gen.latent_dim".into()))?;
        GeneratorArch::new(latent_dim, layers, SparsityConfig::new(entries)?)
    }
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.trim()
        .parse()
        .map_err(|_| Error::Format(format!("`{key}`: expected an integer, got `{v}`")))
}

pub fn collect_trace<T: Real>(tape: &Tape<T>, stages: &[SparseStage]) -> Vec<LayerTrace<T>> {
    stages
        .iter()
        .map(|s| LayerTrace {
            layer_id: s.layer_id.clone(),
            post_activation: tape.value(s.post_activation).clone(),
            post_sparsity: tape.value(s.post_sparsity).clone(),
            mask: s.mask.clone(),
        })
        .collect()
}

/// `n` i.i.d. standard normal latent codes of dimension `d`, reproducible from `seed`.
pub fn sample_prior<T: Real>(n: usize, d: usize, seed: u64) -> Result<Vec<Tensor<T>>> {
    if n == 0 {
        return Err(Error::contract("sample_prior needs n >= 1"));
    }
    let mut rng = stream_rng(seed, Stream::Prior);
    Ok(normal_matrix::<T>(&mut rng, n, d).unstack())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    fn tiny() -> GeneratorArch {
        GeneratorArch::new(
            3,
            vec![fc("l2", 2, 2, 4), up("l3", &[3, 3]), up("l4", &[2]), out("l5")],
            SparsityConfig::new(vec![
                SparsityEntry { layer_id: "l2".into(), axis: Axis::Channel, k: 2 },
                SparsityEntry { layer_id: "l3".into(), axis: Axis::Spatial, k: 4 },
            ])
            .unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn paper64_matches_reference_table() {
        let a = build_arch(Preset::Paper64, &ArchOverrides::default()).unwrap();
        assert_eq!(a.latent_dim, 100);
        assert_eq!(a.output_extents(), (64, 64, 3));
        assert_eq!(a.layer_extents("layer2").unwrap(), (4, 4, 3200));
        assert_eq!(a.layer_extents("layer3").unwrap(), (8, 8, 512));
        assert_eq!(a.layer_extents("layer6").unwrap(), (64, 64, 64));
        assert_eq!(a.sparsity.get("layer2").unwrap().k, 8);
        assert_eq!(a.sparsity.get("layer3").unwrap().k, 16);
        assert_eq!(a.sparsity.get("layer4").unwrap().k, 64);
        assert_eq!(a.sparsity.get("layer5").unwrap().k, 256);
        assert!(a.sparsity.get("layer6").is_none());
    }

    #[test]
    fn desk32_keeps_quarter_spatial_ratio() {
        let a = build_arch(Preset::Desk32, &ArchOverrides::default()).unwrap();
        assert_eq!(a.output_extents(), (32, 32, 3));
        assert_eq!(a.sparsity.get("layer2").unwrap().k, 2);
        for e in a.sparsity.entries().iter().filter(|e| e.axis == Axis::Spatial) {
            let (h, w, _) = a.layer_extents(&e.layer_id).unwrap();
            assert_eq!(4 * e.k, h * w);
        }
        assert_eq!(a.part_symbol_count("layer2").unwrap(), 16);
    }

    #[test]
    fn invalid_override_names_key() {
        let ov = ArchOverrides {
            latent_dim: None,
            sparsity: vec![SparsityOverride { layer_id: "layer3".into(), axis: Axis::Spatial, k: Some(65) }],
        };
        let err = build_arch(Preset::Desk32, &ov).unwrap_err();
        assert!(err.to_string().contains("sparsity.layer3"), "{err}");
        let ov = ArchOverrides {
            latent_dim: None,
            sparsity: vec![SparsityOverride { layer_id: "layer9".into(), axis: Axis::Spatial, k: Some(1) }],
        };
        assert!(build_arch(Preset::Desk32, &ov).unwrap_err().to_string().contains("sparsity.layer9"));
    }

    #[test]
    fn full_override_resolves_to_axis_size() {
        let ov = ArchOverrides {
            latent_dim: Some(16),
            sparsity: vec![SparsityOverride { layer_id: "layer3".into(), axis: Axis::Spatial, k: None }],
        };
        let a = build_arch(Preset::Desk32, &ov).unwrap();
        assert_eq!(a.sparsity.get("layer3").unwrap().k, 64);
        assert_eq!(a.latent_dim, 16);
    }

    #[test]
    fn description_roundtrip() {
        let a = build_arch(Preset::Desk32, &ArchOverrides::default()).unwrap();
        assert_eq!(GeneratorArch::parse_description(&a.describe()).unwrap(), a);
    }

    #[test]
    fn forward_shapes_range_and_trace() {
        let a = tiny();
        let params: ParamCollection<f64> = a.init_params(&mut stream_rng(1, Stream::Init));
        let z = Tensor::from_fn(&[5, 3], |i| (i as f64 - 7.0) / 3.0);
        let (img, trace) = a.forward(&z, &params, true).unwrap();
        assert_eq!(img.shape(), &[5, 8, 8, 3]);
        assert!(img.data().iter().all(|v| v.abs() <= 1.0));
        let trace = trace.unwrap();
        assert_eq!(trace.len(), 2);
        let l3 = &trace[1];
        let (n, h, w, c) = l3.post_sparsity.nhwc("t").unwrap();
        for b in 0..n {
            for ch in 0..c {
                let nz = (0..h * w).filter(|p| l3.post_sparsity.data()[(b * h * w + p) * c + ch] != 0.0).count();
                assert!(nz <= 4);
            }
        }
        // single code gives the unbatched image
        let (one, _) = a.forward(&z.batch_item(2), &params, false).unwrap();
        assert_eq!(one, img.batch_item(2));
    }

    #[test]
    fn dense_reduction_is_bit_exact() {
        let a = tiny();
        let params: ParamCollection<f64> = a.init_params(&mut stream_rng(2, Stream::Init));
        let z = Tensor::from_fn(&[4, 3], |i| ((i * 7) % 5) as f64 - 2.0);
        let full = a.densified();
        let (x, _) = full.forward(&z, &params, false).unwrap();
        let y = a.without_sparsity().forward(&z, &params, false).unwrap().0;
        assert_eq!(x, y);
        assert_eq!(a.forward_dense(&z, &params).unwrap(), y);
    }

    #[test]
    fn wrong_latent_dim_is_dimension_error() {
        let a = tiny();
        let params: ParamCollection<f64> = a.init_params(&mut stream_rng(2, Stream::Init));
        assert!(matches!(a.forward(&Tensor::zeros(&[4]), &params, false), Err(Error::Dimension { .. })));
        let other = build_arch(Preset::Desk32, &ArchOverrides::default()).unwrap();
        assert!(matches!(other.forward(&Tensor::zeros(&[64]), &params, false), Err(Error::Contract(_))));
    }

    #[test]
    fn projective_field_arithmetic() {
        let a = build_arch(Preset::Desk32, &ArchOverrides::default()).unwrap();
        // 8x8 unit (4,4): up -> [8,9], two convs -> [6,11], up -> [12,23], three convs -> [9,26]
        let r = a.projective_field("layer3", (4, 4)).unwrap();
        assert_eq!((r.y0, r.y1, r.x0, r.x1), (9, 26, 9, 26));
        assert_eq!(r.height(), 18);
        // 16x16 unit (8,8): up -> [16,17], three convs -> [13,20]
        let r = a.projective_field("layer4", (8, 8)).unwrap();
        assert_eq!(r.height(), 8);
        // border units are clipped
        let r = a.projective_field("layer3", (0, 0)).unwrap();
        assert_eq!((r.y0, r.x0), (0, 0));
    }

    #[test]
    fn prior_is_reproducible() {
        let a: Vec<Tensor<f64>> = sample_prior(3, 4, 11).unwrap();
        let b: Vec<Tensor<f64>> = sample_prior(3, 4, 11).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, sample_prior::<f64>(3, 4, 12).unwrap());
        assert!(sample_prior::<f64>(0, 4, 1).is_err());
    }
}
