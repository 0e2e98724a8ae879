//! FID, per-pixel MSE and the NCC template-matching score.

use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index::sample;
use rayon::prelude::*;
use serde::Serialize;

use crate::dissect::{mine_or_candidates, render_basis, RenderMode};
use crate::error::{Error, Result};
use crate::generator::GeneratorArch;
use crate::netcore::ops::{conv3x3_forward, downsample_forward, relu};
use crate::netcore::{he_normal, ParamCollection};
use crate::rng::{stream_rng, Stream};
use crate::tensor::{Real, Tensor};

/// Tolerance for negative covariance eigenvalues.
pub const EIG_TOL: f64 = 1e-8;
/// Ridge added to covariances fitted from fewer samples than dimensions.
pub const SHRINKAGE: f64 = 1e-6;
/// Windows or templates whose summed squared deviation is below this are
/// treated as constant.
pub const NCC_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianStats {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::contract(format!("covariance is {}x{}, mean has {d} entries", cov.nrows(), cov.ncols())));
        }
        let scale = cov.amax().max(1.0);
        if (&cov - cov.transpose()).amax() > EIG_TOL * scale {
            return Err(Error::contract("covariance is not symmetric"));
        }
        let cov = (&cov + cov.transpose()) * 0.5;
        if d > 0 && SymmetricEigen::new(cov.clone()).eigenvalues.min() < -EIG_TOL * scale {
            return Err(Error::contract("covariance is not positive semi-definite"));
        }
        Ok(GaussianStats { mean, cov })
    }

    /// Sample mean and unbiased covariance of the rows of `features`.
    pub fn fit(features: &[Vec<f64>]) -> Result<Self> {
        let n = features.len();
        if n < 2 {
            return Err(Error::contract(format!("need at least 2 feature vectors, got {n}")));
        }
        let d = features[0].len();
        if features.iter().any(|f| f.len() != d) {
            return Err(Error::contract("feature vectors differ in length"));
        }
        let x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
        let mean = DVector::from_fn(d, |j, _| x.column(j).mean());
        let mut centered = x;
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let cov = centered.transpose() * &centered / (n - 1) as f64;
        let cov = (&cov + cov.transpose()) * 0.5;
        Ok(GaussianStats { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn shrunk(&self, lambda: f64) -> Self {
        let d = self.dim();
        GaussianStats {
            mean: self.mean.clone(),
            cov: &self.cov + DMatrix::identity(d, d) * lambda,
        }
    }
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new((m + m.transpose()) * 0.5);
    let s = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&s) * e.eigenvectors.transpose()
}

/// Squared Fréchet distance between two Gaussians.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::contract(format!("feature dimensions differ: {} vs {}", a.dim(), b.dim())));
    }
    let diff = &a.mean - &b.mean;
    let sa = sym_sqrt(&a.cov);
    let inner = &sa * &b.cov * &sa;
    let e = SymmetricEigen::new((&inner + inner.transpose()) * 0.5);
    let tr_sqrt: f64 = e.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let d = diff.norm_squared() + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt;
    Ok(d.max(0.0))
}

/// Image batch `[N, H, W, C]` to one feature vector per image.
pub trait FeatureExtractor: Sync {
    fn id(&self) -> String;
    fn dim(&self) -> usize;
    fn extract(&self, images: &Tensor<f64>) -> Result<Vec<Vec<f64>>>;
}

/// Randomly initialised conv stack with fixed weights ("proxy-FID").
///
/// Features are the spatial mean and standard deviation of every channel
/// of the last block.
#[derive(Debug, Clone)]
pub struct ProxyEmbedder {
    seed: u64,
    channels: usize,
    layers: Vec<(Tensor<f64>, Tensor<f64>)>,
}

impl ProxyEmbedder {
    pub const WIDTHS: [usize; 3] = [16, 32, 32];

    pub fn new(channels: usize, seed: u64) -> Self {
        let mut rng = stream_rng(seed, Stream::Metrics);
        let mut cin = channels;
        let mut layers = Vec::new();
        for &cout in &Self::WIDTHS {
            let w = he_normal(&[3, 3, cin, cout], 9 * cin, &mut rng);
            layers.push((w, Tensor::zeros(&[cout])));
            cin = cout;
        }
        ProxyEmbedder { seed, channels, layers }
    }
}

impl FeatureExtractor for ProxyEmbedder {
    fn id(&self) -> String {
        format!("proxy-conv{}-c{}-seed{}", Self::WIDTHS.len(), self.channels, self.seed)
    }

    fn dim(&self) -> usize {
        2 * Self::WIDTHS[Self::WIDTHS.len() - 1]
    }

    fn extract(&self, images: &Tensor<f64>) -> Result<Vec<Vec<f64>>> {
        let (n, _, _, c) = images.nhwc("images")?;
        if c != self.channels {
            return Err(Error::dim("images", format!("embedder expects {} channels, got {c}", self.channels)));
        }
        let mut x = images.clone();
        for (i, (w, b)) in self.layers.iter().enumerate() {
            x = relu(&conv3x3_forward(&x, w, b)?);
            let (_, h, wd, _) = x.nhwc("features")?;
            if i + 1 < self.layers.len() && h % 2 == 0 && wd % 2 == 0 {
                x = downsample_forward(&x)?;
            }
        }
        let (_, h, w, c) = x.nhwc("features")?;
        let hw = (h * w) as f64;
        let out = (0..n)
            .map(|b| {
                let img = &x.data()[b * h * w * c..(b + 1) * h * w * c];
                let mut f = vec![0.0; 2 * c];
                for ch in 0..c {
                    let mean = img.iter().skip(ch).step_by(c).sum::<f64>() / hw;
                    let var = img.iter().skip(ch).step_by(c).map(|v| (v - mean).powi(2)).sum::<f64>() / hw;
                    f[ch] = mean;
                    f[c + ch] = var.sqrt();
                }
                f
            })
            .collect();
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FidResult {
    pub value: f64,
    pub n_real: usize,
    pub n_gen: usize,
    pub dim: usize,
    /// Ridge added to both covariances, if any.
    pub shrinkage: Option<f64>,
    pub extractor: String,
}

pub fn fid<T: Real>(
    real: &Tensor<T>,
    generated: &Tensor<T>,
    extractor: &dyn FeatureExtractor,
    equal_sizes: bool,
) -> Result<FidResult> {
    let (n_real, ..) = real.nhwc("real images")?;
    let (n_gen, ..) = generated.nhwc("generated images")?;
    if n_real == 0 || n_gen == 0 {
        return Err(Error::contract("FID needs two nonempty image sets"));
    }
    if equal_sizes && n_real != n_gen {
        return Err(Error::contract(format!(
            "FID set sizes differ ({n_real} real, {n_gen} generated); set metrics.fid_equal_sizes = false to allow"
        )));
    }
    let a = GaussianStats::fit(&extractor.extract(&real.cast())?)?;
    let b = GaussianStats::fit(&extractor.extract(&generated.cast())?)?;
    let dim = extractor.dim();
    let shrinkage = (n_real.min(n_gen) <= dim).then_some(SHRINKAGE);
    let value = match shrinkage {
        Some(l) => {
            warn!("FID with {} samples in {dim} dimensions; adding {l} to covariance diagonals", n_real.min(n_gen));
            frechet_distance(&a.shrunk(l), &b.shrunk(l))?
        }
        None => frechet_distance(&a, &b)?,
    };
    Ok(FidResult {
        value,
        n_real,
        n_gen,
        dim,
        shrinkage,
        extractor: extractor.id(),
    })
}

/// Per-pixel squared error of paired image sets after mapping `[-1, 1]`
/// onto `[0, 1]`.
pub fn mse<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::contract(format!("image sets are not paired: {:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.is_empty() {
        return Err(Error::contract("mse of empty image sets"));
    }
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = (x.as_f64() - y.as_f64()) / 2.0;
            d * d
        })
        .sum();
    Ok(s / a.len() as f64)
}

fn hwc(t: &Tensor<f64>, operand: &str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [h, w, c] => Ok((h, w, c)),
        _ => Err(Error::dim(operand, format!("expected [H, W, C], got {:?}", t.shape()))),
    }
}

fn check_pair(template: &Tensor<f64>, image: &Tensor<f64>) -> Result<(usize, usize, usize, usize, usize)> {
    let (th, tw, tc) = hwc(template, "template")?;
    let (ih, iw, ic) = hwc(image, "image")?;
    if tc != ic || th > ih || tw > iw || th == 0 || tw == 0 {
        return Err(Error::contract(format!(
            "template {:?} does not fit image {:?}",
            template.shape(),
            image.shape()
        )));
    }
    Ok((th, tw, ih, iw, ic))
}

/// NCC of `template` against every valid offset of `image`, row-major over
/// offsets `(iy - th + 1) x (iw - tw + 1)`. Computed directly, window by
/// window.
pub fn ncc_map_brute(template: &Tensor<f64>, image: &Tensor<f64>) -> Result<Vec<f64>> {
    let (th, tw, ih, iw, c) = check_pair(template, image)?;
    let t = template.data();
    let im = image.data();
    let n = (th * tw * c) as f64;
    let tm = t.iter().sum::<f64>() / n;
    let mut out = Vec::new();
    for oy in 0..=ih - th {
        for ox in 0..=iw - tw {
            let mut wsum = 0.0;
            for y in 0..th {
                for x in 0..tw {
                    for ch in 0..c {
                        wsum += im[((oy + y) * iw + ox + x) * c + ch];
                    }
                }
            }
            let wm = wsum / n;
            let (mut num, mut tv, mut wv) = (0.0, 0.0, 0.0);
            for y in 0..th {
                for x in 0..tw {
                    for ch in 0..c {
                        let a = t[(y * tw + x) * c + ch] - tm;
                        let b = im[((oy + y) * iw + ox + x) * c + ch] - wm;
                        num += a * b;
                        tv += a * a;
                        wv += b * b;
                    }
                }
            }
            out.push(if tv <= NCC_EPS || wv <= NCC_EPS {
                0.0
            } else {
                (num / (tv * wv).sqrt()).clamp(-1.0, 1.0)
            });
        }
    }
    Ok(out)
}

/// Same values as [`ncc_map_brute`]; window sums come from integral images
/// and the numerator uses the zero-mean template.
pub fn ncc_map(template: &Tensor<f64>, image: &Tensor<f64>) -> Result<Vec<f64>> {
    let (th, tw, ih, iw, c) = check_pair(template, image)?;
    let n = (th * tw * c) as f64;
    let tm = template.data().iter().sum::<f64>() / n;
    let t0: Vec<f64> = template.data().iter().map(|v| v - tm).collect();
    let tv: f64 = t0.iter().map(|v| v * v).sum();
    let im = image.data();
    // integral images over (y, x) of per-pixel channel sums
    let mut s1 = vec![0.0; (ih + 1) * (iw + 1)];
    let mut s2 = vec![0.0; (ih + 1) * (iw + 1)];
    for y in 0..ih {
        for x in 0..iw {
            let px = &im[(y * iw + x) * c..(y * iw + x + 1) * c];
            let a: f64 = px.iter().sum();
            let b: f64 = px.iter().map(|v| v * v).sum();
            let i = (y + 1) * (iw + 1) + x + 1;
            s1[i] = a + s1[i - 1] + s1[i - iw - 1] - s1[i - iw - 2];
            s2[i] = b + s2[i - 1] + s2[i - iw - 1] - s2[i - iw - 2];
        }
    }
    let rect = |s: &[f64], oy: usize, ox: usize| {
        let at = |y: usize, x: usize| s[y * (iw + 1) + x];
        at(oy + th, ox + tw) - at(oy, ox + tw) - at(oy + th, ox) + at(oy, ox)
    };
    let mut out = Vec::with_capacity((ih - th + 1) * (iw - tw + 1));
    for oy in 0..=ih - th {
        for ox in 0..=iw - tw {
            let sum = rect(&s1, oy, ox);
            let wv = rect(&s2, oy, ox) - sum * sum / n;
            if tv <= NCC_EPS || wv <= NCC_EPS {
                out.push(0.0);
                continue;
            }
            let mut num = 0.0;
            for y in 0..th {
                let row = ((oy + y) * iw + ox) * c;
                let trow = y * tw * c;
                for (a, b) in t0[trow..trow + tw * c].iter().zip(&im[row..row + tw * c]) {
                    num += a * b;
                }
            }
            out.push((num / (tv * wv).sqrt()).clamp(-1.0, 1.0));
        }
    }
    Ok(out)
}

fn is_constant(t: &Tensor<f64>) -> bool {
    let m = t.data().iter().sum::<f64>() / t.len().max(1) as f64;
    t.data().iter().map(|v| (v - m).powi(2)).sum::<f64>() <= NCC_EPS
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NccScore {
    /// Mean over non-constant templates of the best match.
    pub score: f64,
    /// Best match per template; `None` for skipped constant templates.
    pub per_template: Vec<Option<f64>>,
    pub skipped: usize,
}

/// Best NCC over all offsets and images for each template, averaged.
pub fn ncc_match_score(templates: &[Tensor<f64>], images: &[Tensor<f64>]) -> Result<NccScore> {
    if images.is_empty() {
        return Err(Error::contract("template matching needs at least one image"));
    }
    let per_template = templates
        .par_iter()
        .map(|t| {
            if is_constant(t) {
                return Ok(None);
            }
            let mut best = f64::NEG_INFINITY;
            for img in images {
                best = ncc_map(t, img)?.into_iter().fold(best, f64::max);
            }
            Ok(Some(best))
        })
        .collect::<Result<Vec<_>>>()?;
    let used: Vec<f64> = per_template.iter().flatten().copied().collect();
    let skipped = per_template.len() - used.len();
    if used.is_empty() {
        return Err(Error::contract("every template is constant"));
    }
    if skipped > 0 {
        warn!("skipped {skipped} constant templates");
    }
    Ok(NccScore {
        score: used.iter().sum::<f64>() / used.len() as f64,
        per_template,
        skipped,
    })
}

/// Matching score of the impulse renderings of the `top_m` most frequently
/// retained channels of `layer_id`. Frequencies come from `samples` prior
/// draws.
pub fn interpretability_score<T: Real>(
    arch: &GeneratorArch,
    params: &ParamCollection<T>,
    images: &[Tensor<f64>],
    layer_id: &str,
    top_m: usize,
    samples: usize,
    seed: u64,
) -> Result<NccScore> {
    let table = mine_or_candidates(arch, params, samples, seed)?;
    let templates = table
        .channels_by_frequency(layer_id)
        .into_iter()
        .take(top_m)
        .map(|(c, _)| render_basis(arch, params, layer_id, c, RenderMode::Impulse).map(|r| r.patch))
        .collect::<Result<Vec<_>>>()?;
    if templates.is_empty() {
        return Err(Error::contract(format!("no retained channels at `{layer_id}`")));
    }
    ncc_match_score(&templates, images)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InterpretabilityGap {
    pub sparse: NccScore,
    pub dense: NccScore,
}

impl InterpretabilityGap {
    pub fn gap(&self) -> f64 {
        self.sparse.score - self.dense.score
    }
}

#[allow(clippy::too_many_arguments)]
pub fn interpretability_gap<T: Real>(
    sparse: (&GeneratorArch, &ParamCollection<T>),
    dense: (&GeneratorArch, &ParamCollection<T>),
    images: &[Tensor<f64>],
    layer_id: &str,
    top_m: usize,
    samples: usize,
    seed: u64,
) -> Result<InterpretabilityGap> {
    Ok(InterpretabilityGap {
        sparse: interpretability_score(sparse.0, sparse.1, images, layer_id, top_m, samples, seed)?,
        dense: interpretability_score(dense.0, dense.1, images, layer_id, top_m, samples, seed)?,
    })
}

/// `n` images drawn without replacement, in draw order, as `[H, W, C]`.
pub fn sample_images<T: Real>(images: &Tensor<T>, n: usize, seed: u64) -> Result<Vec<Tensor<f64>>> {
    let (total, ..) = images.nhwc("images")?;
    let n = n.min(total);
    let mut rng = stream_rng(seed, Stream::Metrics);
    Ok(sample(&mut rng, total, n).into_iter().map(|i| images.batch_item(i).cast()).collect())
}

/// One line of metric output.
#[derive(Debug, Clone, Serialize)]
pub struct MetricRecord {
    pub metric: String,
    pub value: f64,
    pub config_digest: String,
    pub sizes: Vec<(String, usize)>,
    pub detail: serde_json::Value,
}

impl MetricRecord {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("metric records serialise")
    }
}
