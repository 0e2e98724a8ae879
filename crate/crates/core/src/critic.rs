//! Bottom-up energy network `f(Y; Φ)`.
//!
//! The density it defines is `P(Y; Φ) ∝ exp[-f(Y; Φ)] q(Y)`: lower energy
//! means more probable. Neither the normalizer nor the Gaussian reference
//! `q` enters any gradient used in training, so only `f` is computed.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::generator::Preset;
use crate::netcore::{he_normal, ParamCollection, Tape, Var, LEAKY_SLOPE};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CriticLayer {
    /// Conv + leaky ReLU at the input resolution.
    Conv { id: String, channels: usize },
    /// Average-pool 2x, then one conv + leaky ReLU per entry.
    DownBlock { id: String, convs: Vec<usize> },
    /// Flatten and map to the scalar energy.
    Fc { id: String },
}

impl CriticLayer {
    pub fn id(&self) -> &str {
        match self {
            CriticLayer::Conv { id, .. } | CriticLayer::DownBlock { id, .. } | CriticLayer::Fc { id } => id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CriticArch {
    pub input: (usize, usize, usize),
    pub layers: Vec<CriticLayer>,
}

impl CriticArch {
    pub fn new(input: (usize, usize, usize), layers: Vec<CriticLayer>) -> Result<Self> {
        let arch = CriticArch { input, layers };
        arch.validate()?;
        Ok(arch)
    }

    pub fn preset(preset: Preset) -> Self {
        let conv = |id: &str, c| CriticLayer::Conv { id: id.into(), channels: c };
        let down = |id: &str, cs: &[usize]| CriticLayer::DownBlock {
            id: id.into(),
            convs: cs.to_vec(),
        };
        let fc = |id: &str| CriticLayer::Fc { id: id.into() };
        let (input, layers) = match preset {
            Preset::Paper64 => (
                (64, 64, 3),
                vec![
                    conv("layer2", 64),
                    down("layer3", &[64, 64]),
                    down("layer4", &[128, 128]),
                    down("layer5", &[256, 256]),
                    down("layer6", &[512, 512]),
                    fc("layer7"),
                ],
            ),
            Preset::Desk32 => (
                (32, 32, 3),
                vec![
                    conv("layer2", 32),
                    down("layer3", &[32, 32]),
                    down("layer4", &[64, 64]),
                    down("layer5", &[128, 128]),
                    fc("layer6"),
                ],
            ),
        };
        CriticArch::new(input, layers).expect("preset is valid")
    }

    fn validate(&self) -> Result<()> {
        let (mut h, mut w, c) = self.input;
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::config("critic", "input extents must be positive"));
        }
        match self.layers.last() {
            Some(CriticLayer::Fc { .. }) => {}
            _ => return Err(Error::config("critic", "last layer must be the scalar output")),
        }
        for (i, l) in self.layers.iter().enumerate() {
            if self.layers[..i].iter().any(|o| o.id() == l.id()) {
                return Err(Error::config("critic", format!("duplicate layer id `{}`", l.id())));
            }
            match l {
                CriticLayer::Conv { channels, .. } if *channels == 0 => {
                    return Err(Error::config("critic", "conv width must be positive"));
                }
                CriticLayer::DownBlock { convs, id } => {
                    if h % 2 != 0 || w % 2 != 0 {
                        return Err(Error::config("critic", format!("block `{id}` pools an odd {h}x{w} map")));
                    }
                    if convs.is_empty() || convs.contains(&0) {
                        return Err(Error::config("critic", format!("block `{id}` needs positive conv widths")));
                    }
                    h /= 2;
                    w /= 2;
                }
                CriticLayer::Fc { .. } if i + 1 != self.layers.len() => {
                    return Err(Error::config("critic", "the scalar output must be last"));
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// `(name, shape, fan_in)` for every parameter.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>, usize)> {
        let mut out = Vec::new();
        let (mut h, mut w, mut ch) = self.input;
        for l in &self.layers {
            match l {
                CriticLayer::Conv { id, channels } => {
                    out.push((format!("critic/{id}/conv/weight"), vec![3, 3, ch, *channels], 9 * ch));
                    out.push((format!("critic/{id}/conv/bias"), vec![*channels], 0));
                    ch = *channels;
                }
                CriticLayer::DownBlock { id, convs } => {
                    h /= 2;
                    w /= 2;
                    for (j, &co) in convs.iter().enumerate() {
                        out.push((format!("critic/{id}/conv{}/weight", j + 1), vec![3, 3, ch, co], 9 * ch));
                        out.push((format!("critic/{id}/conv{}/bias", j + 1), vec![co], 0));
                        ch = co;
                    }
                }
                CriticLayer::Fc { id } => {
                    let d_in = h * w * ch;
                    out.push((format!("critic/{id}/fc/weight"), vec![1, d_in], d_in));
                    out.push((format!("critic/{id}/fc/bias"), vec![1], 0));
                }
            }
        }
        out
    }

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

    pub fn check_params<T: Real>(&self, params: &ParamCollection<T>) -> Result<()> {
        let shapes = self.param_shapes();
        if shapes.len() != params.len() {
            return Err(Error::contract(format!(
                "critic expects {} parameters, collection has {}",
                shapes.len(),
                params.len()
            )));
        }
        for (name, shape, _) in shapes {
            let p = params.get(&name)?;
            if p.value.shape() != shape.as_slice() {
                return Err(Error::contract(format!("parameter `{name}` has shape {:?}", p.value.shape())));
            }
        }
        Ok(())
    }

    /// Records the energies of `y` (`[H,W,C]` or `[B,H,W,C]`) as a `[B, 1]` (or `[1]`) value.
    pub fn record<T: Real>(&self, tape: &mut Tape<T>, params: &ParamCollection<T>, y: Var) -> Result<Var> {
        let (n, h, w, c) = tape.value(y).nhwc("critic input")?;
        if n == 0 {
            return Err(Error::contract("critic input batch is empty"));
        }
        if (h, w, c) != self.input {
            return Err(Error::dim(
                "critic input",
                format!("expected {:?}, got {:?}", self.input, tape.value(y).shape()),
            ));
        }
        let batched = tape.value(y).rank() == 4;
        let slope = T::lit(LEAKY_SLOPE);
        let mut x = y;
        for l in &self.layers {
            match l {
                CriticLayer::Conv { id, .. } => {
                    let wv = tape.param(params, &format!("critic/{id}/conv/weight"))?;
                    let bv = tape.param(params, &format!("critic/{id}/conv/bias"))?;
                    x = tape.conv3x3(x, wv, bv)?;
                    x = tape.leaky_relu(x, slope);
                }
                CriticLayer::DownBlock { id, convs } => {
                    x = tape.downsample(x)?;
                    for j in 1..=convs.len() {
                        let wv = tape.param(params, &format!("critic/{id}/conv{j}/weight"))?;
                        let bv = tape.param(params, &format!("critic/{id}/conv{j}/bias"))?;
                        x = tape.conv3x3(x, wv, bv)?;
                        x = tape.leaky_relu(x, slope);
                    }
                }
                CriticLayer::Fc { id } => {
                    let flat = tape.value(x).len() / n;
                    let shape: Vec<usize> = if batched { vec![n, flat] } else { vec![flat] };
                    x = tape.reshape(x, &shape)?;
                    let wv = tape.param(params, &format!("critic/{id}/fc/weight"))?;
                    let bv = tape.param(params, &format!("critic/{id}/fc/bias"))?;
                    x = tape.linear(x, wv, bv)?;
                }
            }
        }
        Ok(x)
    }

    /// Energy of each image in a batch `[B,H,W,C]`, or of one `[H,W,C]` image.
    pub fn energies<T: Real>(&self, y: &Tensor<T>, params: &ParamCollection<T>) -> Result<Vec<T>> {
        self.check_params(params)?;
        let mut tape = Tape::without_param_grads();
        let yv = tape.constant(y.clone());
        let e = self.record(&mut tape, params, yv)?;
        Ok(tape.value(e).data().to_vec())
    }

    /// Energy `f(Y; Φ)` of a single image.
    pub fn energy<T: Real>(&self, y: &Tensor<T>, params: &ParamCollection<T>) -> Result<T> {
        if y.rank() != 3 {
            return Err(Error::dim("critic input", format!("expected one [H,W,C] image, got {:?}", y.shape())));
        }
        Ok(self.energies(y, params)?[0])
    }

    /// Mean energy of `synthesized` minus mean energy of `observed`.
    ///
    /// Positive when the critic ranks observed data as more probable.
    pub fn energy_gap<T: Real>(
        &self,
        observed: &Tensor<T>,
        synthesized: &Tensor<T>,
        params: &ParamCollection<T>,
    ) -> Result<f64> {
        if observed.is_empty() || synthesized.is_empty() {
            return Err(Error::contract("energy_gap needs nonempty batches"));
        }
        let obs = self.energies(observed, params)?;
        let syn = self.energies(synthesized, params)?;
        Ok(mean(&syn) - mean(&obs))
    }

    pub fn describe(&self) -> Vec<(String, String)> {
        let (h, w, c) = self.input;
        let mut out = vec![("critic.input".to_string(), format!("{h} {w} {c}"))];
        for (i, l) in self.layers.iter().enumerate() {
            let v = match l {
                CriticLayer::Conv { id, channels } => format!("conv {id} {channels}"),
                CriticLayer::DownBlock { id, convs } => format!(
                    "down {id} {}",
                    convs.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
                ),
                CriticLayer::Fc { id } => format!("fc {id}"),
            };
            out.push((format!("critic.layer.{i:02}"), v));
        }
        out
    }

    pub fn parse_description(lines: &[(String, String)]) -> Result<Self> {
        let num = |k: &str, v: &str| {
            v.parse::<usize>()
                .map_err(|_| Error::Format(format!("`{k}`: expected an integer, got `{v}`")))
        };
        let mut input = None;
        let mut layers = Vec::new();
        for (k, v) in lines {
            let parts: Vec<&str> = v.split_whitespace().collect();
            if k == "critic.input" {
                let n = parts.iter().map(|p| num(k, p)).collect::<Result<Vec<_>>>()?;
                if n.len() != 3 {
                    return Err(Error::Format(format!("bad critic input `{v}`")));
                }
                input = Some((n[0], n[1], n[2]));
            } else if k.starts_with("critic.layer.") {
                layers.push(match parts.as_slice() {
                    ["conv", id, c] => CriticLayer::Conv {
                        id: id.to_string(),
                        channels: num(k, c)?,
                    },
                    ["down", id, rest @ ..] => CriticLayer::DownBlock {
                        id: id.to_string(),
                        convs: rest.iter().map(|p| num(k, p)).collect::<Result<Vec<_>>>()?,
                    },
                    ["fc", id] => CriticLayer::Fc { id: id.to_string() },
                    _ => return Err(Error::Format(format!("bad critic layer `{v}`"))),
                });
            }
        }
        let input = input.ok_or_else(|| Error::Format("missing critic.input".into()))?;
        CriticArch::new(input, layers)
    }
}

fn mean<T: Real>(v: &[T]) -> f64 {
    v.iter().map(|x| x.as_f64()).sum::<f64>() / v.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};

    #[test]
    fn desk32_energy_is_scalar_and_deterministic() {
        let arch = CriticArch::preset(Preset::Desk32);
        let params: ParamCollection<f64> = arch.init_params(&mut stream_rng(4, Stream::Init));
        let zero = Tensor::zeros(&[32, 32, 3]);
        let e = arch.energy(&zero, &params).unwrap();
        assert!(e.is_finite());
        let y = Tensor::from_fn(&[32, 32, 3], |i| ((i % 7) as f64 - 3.0) / 3.0);
        assert_eq!(arch.energy(&y, &params).unwrap(), arch.energy(&y, &params).unwrap());
        let batch = Tensor::stack(&[zero.clone(), y.clone()]).unwrap();
        let es = arch.energies(&batch, &params).unwrap();
        assert_eq!(es.len(), 2);
        assert!((es[1] - arch.energy(&y, &params).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn extent_mismatch_is_dimension_error() {
        let arch = CriticArch::preset(Preset::Desk32);
        let params: ParamCollection<f64> = arch.init_params(&mut stream_rng(4, Stream::Init));
        assert!(matches!(arch.energy(&Tensor::zeros(&[16, 16, 3]), &params), Err(Error::Dimension { .. })));
    }

    #[test]
    fn gap_is_antisymmetric_and_zero_on_equal_batches() {
        let arch = CriticArch::preset(Preset::Desk32);
        let params: ParamCollection<f64> = arch.init_params(&mut stream_rng(5, Stream::Init));
        let a = Tensor::from_fn(&[3, 32, 32, 3], |i| ((i % 11) as f64 - 5.0) / 5.0);
        let b = Tensor::from_fn(&[2, 32, 32, 3], |i| ((i % 13) as f64 - 6.0) / 6.0);
        assert_eq!(arch.energy_gap(&a, &a, &params).unwrap(), 0.0);
        let g1 = arch.energy_gap(&a, &b, &params).unwrap();
        let g2 = arch.energy_gap(&b, &a, &params).unwrap();
        assert!((g1 + g2).abs() < 1e-12);
    }

    #[test]
    fn description_roundtrip() {
        let arch = CriticArch::preset(Preset::Paper64);
        assert_eq!(CriticArch::parse_description(&arch.describe()).unwrap(), arch);
    }
}
