//! AND-OR parse trees, OR-candidate statistics and basis renderings.
//!
//! A traced generation is unfolded as: root OR (the drawn code) -> object AND
//! over the first sparse layer -> one OR per active position -> the units
//! retained there. A unit at a non-final sparse layer is an AND over the
//! position ORs of the next sparse layer that it is linked to; units of the
//! last sparse layer are terminals.
//!
//! A unit is retained when its mask bit is set and its value is positive.
//! Each retained child position is linked to one parent unit: among the
//! retained units of the previous sparse layer whose projective field
//! covers the child position, the most active (ties to the lower position,
//! then channel). Positions no parent covers hang off the object AND.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::save_grid;
use crate::error::{Error, Result};
use crate::generator::{sample_prior, GeneratorArch, LayerTrace, Rect};
use crate::netcore::{ParamCollection, Tape};
use crate::tensor::{Real, Tensor};

/// Layer id used for the root node.
pub const ROOT_LAYER: &str = "latent";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    And,
    Or,
    Terminal,
}

impl NodeKind {
    fn tag(self) -> &'static str {
        match self {
            NodeKind::And => "AND",
            NodeKind::Or => "OR",
            NodeKind::Terminal => "TERMINAL",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AndOrNode {
    pub kind: NodeKind,
    pub layer_id: String,
    pub position: Option<(usize, usize)>,
    pub channel: Option<usize>,
    /// Unit value; summed unit values for OR and object nodes; `|Z|` at the root.
    pub activation: f64,
    pub children: Vec<AndOrNode>,
}

impl AndOrNode {
    fn new(kind: NodeKind, layer_id: &str, position: Option<(usize, usize)>, channel: Option<usize>, activation: f64) -> Self {
        AndOrNode {
            kind,
            layer_id: layer_id.to_string(),
            position,
            channel,
            activation,
            children: Vec::new(),
        }
    }

    /// Number of distinct layers on the longest root-to-leaf path.
    pub fn depth(&self) -> usize {
        fn walk<'a>(n: &'a AndOrNode, seen: &mut Vec<&'a str>, best: &mut usize) {
            let added = !seen.contains(&n.layer_id.as_str());
            if added {
                seen.push(&n.layer_id);
            }
            *best = (*best).max(seen.len());
            for c in &n.children {
                walk(c, seen, best);
            }
            if added {
                seen.pop();
            }
        }
        let mut best = 0;
        walk(self, &mut Vec::new(), &mut best);
        best
    }

    /// Nodes in pre-order.
    pub fn preorder(&self) -> Vec<&AndOrNode> {
        let mut out = vec![self];
        for c in &self.children {
            out.extend(c.preorder());
        }
        out
    }

    /// `(layer, position, channel)` of every unit node (AND with a channel, or terminal).
    pub fn units(&self) -> Vec<(String, (usize, usize), usize)> {
        self.preorder()
            .into_iter()
            .filter_map(|n| match (n.position, n.channel) {
                (Some(p), Some(c)) => Some((n.layer_id.clone(), p, c)),
                _ => None,
            })
            .collect()
    }
}

/// Counts gathered while building a tree.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TreeStats {
    pub units: usize,
    /// Child positions with no covering parent unit.
    pub orphans: usize,
    /// Sparse layers with no retained unit.
    pub empty_layers: Vec<String>,
}

fn retained<T: Real>(t: &LayerTrace<T>) -> Result<Vec<((usize, usize), usize, f64)>> {
    let (_, h, w, c) = t.post_sparsity.nhwc("trace")?;
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let i = (y * w + x) * c + ch;
                let v = t.post_sparsity.data()[i].as_f64();
                if t.mask.keep()[i] && v > 0.0 {
                    out.push(((y, x), ch, v));
                }
            }
        }
    }
    Ok(out)
}

fn group_by_position(units: &[((usize, usize), usize, f64)]) -> BTreeMap<(usize, usize), Vec<(usize, f64)>> {
    let mut m: BTreeMap<(usize, usize), Vec<(usize, f64)>> = BTreeMap::new();
    for &(p, c, v) in units {
        m.entry(p).or_default().push((c, v));
    }
    m
}

fn position_or(layer: &str, pos: (usize, usize), units: &[(usize, f64)], terminal: bool) -> AndOrNode {
    let mut or = AndOrNode::new(NodeKind::Or, layer, Some(pos), None, units.iter().map(|u| u.1).sum());
    for &(c, v) in units {
        let kind = if terminal { NodeKind::Terminal } else { NodeKind::And };
        or.children.push(AndOrNode::new(kind, layer, Some(pos), Some(c), v));
    }
    or
}

/// Builds the parse tree of one latent code `z` (`[d]`).
pub fn extract_instance_tree<T: Real>(
    arch: &GeneratorArch,
    params: &ParamCollection<T>,
    z: &Tensor<T>,
) -> Result<(AndOrNode, TreeStats)> {
    z.expect_shape(&[arch.latent_dim], "latent code")?;
    let (_, trace) = arch.forward(z, params, true)?;
    let trace = trace.unwrap_or_default();
    let znorm = z.sum_squares().as_f64().sqrt();
    let mut root = AndOrNode::new(NodeKind::Or, ROOT_LAYER, None, None, znorm);
    let mut stats = TreeStats::default();
    let Some(first) = trace.first() else {
        root.children.push(AndOrNode::new(NodeKind::And, ROOT_LAYER, None, None, 0.0));
        return Ok((root, stats));
    };
    let layer_units: Vec<_> = trace.iter().map(retained).collect::<Result<_>>()?;
    for (t, u) in trace.iter().zip(&layer_units) {
        if u.is_empty() {
            stats.empty_layers.push(t.layer_id.clone());
        }
        stats.units += u.len();
    }
    let last = trace.len() - 1;
    let mut object = AndOrNode::new(
        NodeKind::And,
        &first.layer_id,
        None,
        None,
        layer_units[0].iter().map(|u| u.2).sum(),
    );
    // position ORs of the layer being attached, keyed by parent unit (None = object)
    let mut pending: Vec<(Option<((usize, usize), usize)>, AndOrNode)> = group_by_position(&layer_units[0])
        .into_iter()
        .map(|(p, us)| (None, position_or(&first.layer_id, p, &us, last == 0)))
        .collect();
    let mut levels: Vec<Vec<(Option<((usize, usize), usize)>, AndOrNode)>> = Vec::new();
    for li in 1..=last {
        levels.push(std::mem::take(&mut pending));
        let parent_layer = &trace[li - 1].layer_id;
        let child_layer = &trace[li].layer_id;
        let child_idx = arch.layer_index(child_layer)?;
        let parents = &layer_units[li - 1];
        let fields: Vec<Rect> = parents
            .iter()
            .map(|&(p, _, _)| arch.field_between(parent_layer, child_idx, p))
            .collect::<Result<_>>()?;
        for (q, us) in group_by_position(&layer_units[li]) {
            let mut best: Option<(usize, f64)> = None;
            for (pi, &(_, _, v)) in parents.iter().enumerate() {
                if fields[pi].contains(q.0, q.1) && best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((pi, v));
                }
            }
            let node = position_or(child_layer, q, &us, li == last);
            match best {
                Some((pi, _)) => pending.push((Some((parents[pi].0, parents[pi].1)), node)),
                None => {
                    stats.orphans += 1;
                    pending.push((None, node));
                }
            }
        }
    }
    levels.push(pending);
    // attach bottom-up: every level's ORs go under their parent unit in the level above
    for li in (1..levels.len()).rev() {
        let children = std::mem::take(&mut levels[li]);
        for (parent, node) in children {
            match parent {
                Some((pos, ch)) => {
                    let unit = levels[li - 1]
                        .iter_mut()
                        .flat_map(|(_, or)| or.children.iter_mut())
                        .find(|u| u.position == Some(pos) && u.channel == Some(ch))
                        .expect("parent unit exists");
                    unit.children.push(node);
                }
                None => object.children.push(node),
            }
        }
    }
    for (_, node) in levels.swap_remove(0) {
        object.children.push(node);
    }
    sort_tree(&mut object);
    root.children.push(object);
    Ok((root, stats))
}

fn sort_tree(n: &mut AndOrNode) {
    n.children.sort_by(|a, b| {
        (a.layer_id.as_str(), a.position, a.channel).cmp(&(b.layer_id.as_str(), b.position, b.channel))
    });
    for c in &mut n.children {
        sort_tree(c);
    }
}

fn fmt_pos(p: Option<(usize, usize)>) -> String {
    p.map_or_else(|| "-".into(), |(y, x)| format!("{y},{x}"))
}

/// One node per line in pre-order: `kind layer position channel activation parent_index`.
pub fn format_tree(root: &AndOrNode) -> String {
    fn walk(n: &AndOrNode, parent: i64, next: &mut i64, out: &mut String) {
        let me = *next;
        *next += 1;
        let _ = writeln!(
            out,
            "{} {} {} {} {:?} {}",
            n.kind.tag(),
            n.layer_id,
            fmt_pos(n.position),
            n.channel.map_or_else(|| "-".into(), |c| c.to_string()),
            n.activation,
            parent
        );
        for c in &n.children {
            walk(c, me, next, out);
        }
    }
    let mut s = String::new();
    walk(root, -1, &mut 0, &mut s);
    s
}

pub fn parse_tree(text: &str) -> Result<AndOrNode> {
    let bad = |line: &str| Error::Format(format!("bad tree line `{line}`"));
    let mut nodes: Vec<(AndOrNode, i64)> = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split_whitespace().collect();
        let [kind, layer, pos, ch, act, parent] = f.as_slice() else {
            return Err(bad(line));
        };
        let kind = match *kind {
            "AND" => NodeKind::And,
            "OR" => NodeKind::Or,
            "TERMINAL" => NodeKind::Terminal,
            _ => return Err(bad(line)),
        };
        let position = match *pos {
            "-" => None,
            p => {
                let (y, x) = p.split_once(',').ok_or_else(|| bad(line))?;
                Some((y.parse().map_err(|_| bad(line))?, x.parse().map_err(|_| bad(line))?))
            }
        };
        let channel = match *ch {
            "-" => None,
            c => Some(c.parse().map_err(|_| bad(line))?),
        };
        let parent: i64 = parent.parse().map_err(|_| bad(line))?;
        if parent >= nodes.len() as i64 || (parent < 0) != nodes.is_empty() {
            return Err(bad(line));
        }
        nodes.push((
            AndOrNode::new(kind, layer, position, channel, act.parse().map_err(|_| bad(line))?),
            parent,
        ));
    }
    if nodes.is_empty() {
        return Err(Error::Format("empty tree file".into()));
    }
    // children come after their parent in pre-order, so fold from the back
    while nodes.len() > 1 {
        let (node, parent) = nodes.pop().expect("nonempty");
        nodes[parent as usize].0.children.insert(0, node);
    }
    Ok(nodes.pop().expect("root").0)
}

/// Per sparse layer and position, how often each channel is retained.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OrCandidateTable {
    pub n_samples: usize,
    pub layers: BTreeMap<String, BTreeMap<(usize, usize), BTreeMap<usize, f64>>>,
}

impl OrCandidateTable {
    /// Channels of `layer_id` ordered by expected number of retained
    /// positions per sample, most frequent first; ties to the lower channel.
    pub fn channels_by_frequency(&self, layer_id: &str) -> Vec<(usize, f64)> {
        let mut tot: BTreeMap<usize, f64> = BTreeMap::new();
        if let Some(l) = self.layers.get(layer_id) {
            for chans in l.values() {
                for (&c, &f) in chans {
                    *tot.entry(c).or_default() += f;
                }
            }
        }
        let mut v: Vec<(usize, f64)> = tot.into_iter().collect();
        v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        v
    }

    pub fn format(&self) -> String {
        let mut s = format!("samples {}\n", self.n_samples);
        for (layer, positions) in &self.layers {
            for (&(y, x), chans) in positions {
                let _ = write!(s, "{layer} {y},{x}");
                for (c, f) in chans {
                    let _ = write!(s, " {c}:{f}");
                }
                s.push('\n');
            }
        }
        s
    }
}

/// Traces `n_samples` prior draws and counts retained channels per position.
pub fn mine_or_candidates<T: Real>(
    arch: &GeneratorArch,
    params: &ParamCollection<T>,
    n_samples: usize,
    seed: u64,
) -> Result<OrCandidateTable> {
    if n_samples == 0 {
        return Err(Error::contract("mine_or_candidates needs at least one sample"));
    }
    let codes = sample_prior::<T>(n_samples, arch.latent_dim, seed)?;
    let mut counts: BTreeMap<String, BTreeMap<(usize, usize), BTreeMap<usize, usize>>> = BTreeMap::new();
    for chunk in codes.chunks(64) {
        let z = Tensor::stack(chunk)?;
        let (_, trace) = arch.forward(&z, params, true)?;
        for t in trace.unwrap_or_default() {
            let layer = counts.entry(t.layer_id.clone()).or_default();
            let (n, h, w, c) = t.post_sparsity.nhwc("trace")?;
            for b in 0..n {
                for y in 0..h {
                    for x in 0..w {
                        for ch in 0..c {
                            let i = ((b * h + y) * w + x) * c + ch;
                            if t.mask.keep()[i] && t.post_sparsity.data()[i] > T::zero() {
                                *layer.entry((y, x)).or_default().entry(ch).or_default() += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    let layers = counts
        .into_iter()
        .map(|(l, ps)| {
            let ps = ps
                .into_iter()
                .map(|(p, cs)| (p, cs.into_iter().map(|(c, k)| (c, k as f64 / n_samples as f64)).collect()))
                .collect();
            (l, ps)
        })
        .collect();
    Ok(OrCandidateTable { n_samples, layers })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RenderMode {
    /// Unit impulse at the central position, downstream sparsity off.
    Impulse,
    /// Only the chosen unit kept in a real generation, sparsity on. The code
    /// is the first prior draw (from `seed`) that retains the channel.
    InContext { seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BasisRendering {
    pub layer_id: String,
    pub channel: usize,
    /// Unit position in the layer's feature map.
    pub position: (usize, usize),
    /// Crop of the output image to the unit's projective field, `[h, w, C]`.
    pub patch: Tensor<f64>,
    pub field: Rect,
}

fn crop<T: Real>(img: &Tensor<T>, r: Rect) -> Result<Tensor<f64>> {
    let (_, _, w, c) = img.nhwc("image")?;
    let mut data = Vec::with_capacity(r.height() * r.width() * c);
    for y in r.y0..=r.y1 {
        for x in r.x0..=r.x1 {
            for ch in 0..c {
                data.push(img.data()[(y * w + x) * c + ch].as_f64());
            }
        }
    }
    Tensor::new(vec![r.height(), r.width(), c], data)
}

/// Affine map of the value range onto `[-1, 1]`; constant patches become 0.
pub fn rescale_unit(t: &Tensor<f64>) -> Tensor<f64> {
    let lo = t.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = t.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Tensor::zeros(t.shape());
    }
    t.map(|v| 2.0 * (v - lo) / (hi - lo) - 1.0)
}

fn require_sparse(arch: &GeneratorArch, layer_id: &str) -> Result<()> {
    if arch.sparsity.get(layer_id).is_none() {
        return Err(Error::contract(format!("`{layer_id}` is not a sparse layer")));
    }
    Ok(())
}

/// Image of a single unit of `layer_id`.
pub fn render_basis<T: Real>(
    arch: &GeneratorArch,
    params: &ParamCollection<T>,
    layer_id: &str,
    channel: usize,
    mode: RenderMode,
) -> Result<BasisRendering> {
    require_sparse(arch, layer_id)?;
    arch.check_params(params)?;
    let idx = arch.layer_index(layer_id)?;
    let (h, w, c) = arch.layer_extents(layer_id)?;
    if channel >= c {
        return Err(Error::contract(format!("channel {channel} outside 0..{c} at `{layer_id}`")));
    }
    match mode {
        RenderMode::Impulse => {
            let pos = (h / 2, w / 2);
            let mut x = Tensor::<T>::zeros(&[h, w, c]);
            x.data_mut()[(pos.0 * w + pos.1) * c + channel] = T::one();
            let mut tape = Tape::without_param_grads();
            let xv = tape.constant(x);
            let img = arch.record_from(&mut tape, params, idx + 1, xv, false, &mut Vec::new())?;
            let field = arch.projective_field(layer_id, pos)?;
            Ok(BasisRendering {
                layer_id: layer_id.to_string(),
                channel,
                position: pos,
                patch: rescale_unit(&crop(tape.value(img), field)?),
                field,
            })
        }
        RenderMode::InContext { seed } => {
            let tries = 256;
            let codes = sample_prior::<T>(tries, arch.latent_dim, seed)?;
            for z in &codes {
                let (_, trace) = arch.forward(z, params, true)?;
                let trace = trace.unwrap_or_default();
                let t = trace.iter().find(|t| t.layer_id == layer_id).expect("sparse layer traced");
                let best = retained(t)?
                    .into_iter()
                    .filter(|u| u.1 == channel)
                    .fold(None::<((usize, usize), f64)>, |b, u| match b {
                        Some((_, bv)) if bv >= u.2 => b,
                        _ => Some((u.0, u.2)),
                    });
                if let Some((pos, _)) = best {
                    let img = render_in_context(arch, params, z, layer_id, &[(pos, channel)])?;
                    let field = arch.projective_field(layer_id, pos)?;
                    return Ok(BasisRendering {
                        layer_id: layer_id.to_string(),
                        channel,
                        position: pos,
                        patch: crop(&img, field)?,
                        field,
                    });
                }
            }
            Err(Error::contract(format!(
                "channel {channel} of `{layer_id}` was not retained in {tries} prior draws"
            )))
        }
    }
}

/// Regenerates the image of code `z` keeping only the listed `(position,
/// channel)` units of `layer_id`; downstream sparsity stays on. With every
/// retained unit kept this is exactly `g(z)`.
pub fn render_in_context<T: Real>(
    arch: &GeneratorArch,
    params: &ParamCollection<T>,
    z: &Tensor<T>,
    layer_id: &str,
    keep: &[((usize, usize), usize)],
) -> Result<Tensor<T>> {
    require_sparse(arch, layer_id)?;
    arch.check_params(params)?;
    z.expect_shape(&[arch.latent_dim], "latent code")?;
    let idx = arch.layer_index(layer_id)?;
    let (h, w, c) = arch.layer_extents(layer_id)?;
    let mut tape = Tape::without_param_grads();
    let zv = tape.constant(z.clone());
    let x = arch.record_prefix(&mut tape, params, zv, idx + 1, true)?.image;
    let mut act = tape.value(x).clone();
    let mut allowed = vec![false; h * w * c];
    for &((y, xx), ch) in keep {
        if y >= h || xx >= w || ch >= c {
            return Err(Error::contract(format!("unit ({y},{xx}) channel {ch} outside `{layer_id}`")));
        }
        allowed[(y * w + xx) * c + ch] = true;
    }
    for (v, a) in act.data_mut().iter_mut().zip(&allowed) {
        if !a {
            *v = T::zero();
        }
    }
    let xv = tape.constant(act);
    let img = arch.record_from(&mut tape, params, idx + 1, xv, true, &mut Vec::new())?;
    Ok(tape.value(img).clone())
}

/// Paths written by [`export_report`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReportFiles {
    pub index: PathBuf,
    pub grids: Vec<PathBuf>,
    pub trees: Vec<PathBuf>,
    pub table: Option<PathBuf>,
}

fn pad_to(t: &Tensor<f64>, h: usize, w: usize) -> Tensor<f64> {
    let (th, tw, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let mut out = Tensor::full(&[h, w, c], -1.0);
    for y in 0..th {
        for x in 0..tw {
            for ch in 0..c {
                out.data_mut()[(y * w + x) * c + ch] = t.data()[(y * tw + x) * c + ch];
            }
        }
    }
    out
}

/// Writes one PNG grid per layer, one tree file per tree, the candidate
/// table and an HTML index into `out_dir`.
pub fn export_report(
    trees: &[AndOrNode],
    table: Option<&OrCandidateTable>,
    renderings: &[BasisRendering],
    out_dir: &Path,
) -> Result<ReportFiles> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut files = ReportFiles::default();
    let mut by_layer: BTreeMap<&str, Vec<&BasisRendering>> = BTreeMap::new();
    for r in renderings {
        by_layer.entry(r.layer_id.as_str()).or_default().push(r);
    }
    let mut html = String::from("<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>dissection report</title></head><body>\n<h1>Dissection report</h1>\n");
    for (layer, rs) in &by_layer {
        let h = rs.iter().map(|r| r.patch.shape()[0]).max().unwrap_or(1);
        let w = rs.iter().map(|r| r.patch.shape()[1]).max().unwrap_or(1);
        let padded: Vec<Tensor<f64>> = rs.iter().map(|r| pad_to(&r.patch, h, w)).collect();
        let name = format!("basis_{layer}.png");
        let path = out_dir.join(&name);
        save_grid(&padded, 8, &path)?;
        let chans: Vec<String> = rs.iter().map(|r| r.channel.to_string()).collect();
        let _ = writeln!(
            html,
            "<h2>{layer}</h2>\n<p>channels {}</p>\n<img src=\"{name}\" style=\"image-rendering: pixelated; width: 50%\">",
            chans.join(", ")
        );
        files.grids.push(path);
    }
    if !trees.is_empty() {
        html.push_str("<h2>Parse trees</h2>\n<ul>\n");
    }
    for (i, t) in trees.iter().enumerate() {
        let name = format!("tree_{i:03}.txt");
        let path = out_dir.join(&name);
        fs::write(&path, format_tree(t)).map_err(|e| Error::io(&path, e))?;
        let _ = writeln!(html, "<li><a href=\"{name}\">{name}</a> ({} nodes, depth {})</li>", t.preorder().len(), t.depth());
        files.trees.push(path);
    }
    if !trees.is_empty() {
        html.push_str("</ul>\n");
    }
    if let Some(tab) = table {
        let path = out_dir.join("or_candidates.txt");
        fs::write(&path, tab.format()).map_err(|e| Error::io(&path, e))?;
        let _ = writeln!(html, "<p><a href=\"or_candidates.txt\">OR candidates</a> over {} samples</p>", tab.n_samples);
        files.table = Some(path);
    }
    html.push_str("</body></html>\n");
    let index = out_dir.join("index.html");
    fs::write(&index, html).map_err(|e| Error::io(&index, e))?;
    files.index = index;
    Ok(files)
}
