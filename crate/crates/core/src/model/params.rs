use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::error::{invalid, Error, Result};
use crate::math;
use crate::tape::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Init {
    /// Uniform on ±√(1/fan_in).
    Uniform { fan_in: usize },
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub(crate) init: Init,
}

struct LayoutBuilder {
    specs: Vec<ParamSpec>,
}

impl LayoutBuilder {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) {
        self.specs.push(ParamSpec { name, shape, init });
    }

    fn linear(&mut self, prefix: &str, inp: usize, out: usize, zero: bool) {
        let w = if zero { Init::Zeros } else { Init::Uniform { fan_in: inp } };
        self.push(format!("{prefix}.weight"), vec![inp, out], w);
        self.push(format!("{prefix}.bias"), vec![out], Init::Zeros);
    }

    fn mlp(&mut self, prefix: &str, inp: usize, hidden: usize, out: usize, zero_last: bool) {
        self.linear(&format!("{prefix}.0"), inp, hidden, false);
        self.linear(&format!("{prefix}.1"), hidden, out, zero_last);
    }

    fn head(&mut self, prefix: &str, cfg: &ModelConfig) {
        let (l, d) = (cfg.l_emb, cfg.comp_width());
        self.mlp(&format!("{prefix}.extract"), l, l, d, false);
        self.mlp(&format!("{prefix}.field"), d + 1, cfg.field_width(), d, true);
    }
}

/// Ordered parameter names and shapes. The order is the storage order of
/// checkpoints and the binding order of the network.
pub fn layout(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut b = LayoutBuilder { specs: Vec::new() };
    let (l, m, d) = (cfg.l_emb, cfg.m_heads, cfg.comp_width());
    b.linear("embed", cfg.csi_len(), l, false);
    for k in 0..cfg.depth {
        for i in 0..m {
            b.head(&format!("blocks.{k}.heads.{i}"), cfg);
        }
        b.mlp(&format!("blocks.{k}.assemble"), m * d, l, l, false);
        b.push(format!("blocks.{k}.norm.gain"), vec![l], Init::Ones);
        b.push(format!("blocks.{k}.norm.bias"), vec![l], Init::Zeros);
    }
    for i in 0..m {
        b.head(&format!("evolution.heads.{i}"), cfg);
    }
    b.mlp("evolution.assemble", m * d, l, l, false);
    b.linear("output", l, cfg.csi_len(), false);
    b.specs
}

/// Named model parameters in layout order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    /// Pairs `tensors` with the layout of `cfg`, checking every shape.
    pub fn from_tensors(cfg: &ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        let specs = layout(cfg);
        if specs.len() != tensors.len() {
            return Err(invalid(format!(
                "expected {} parameter tensors, got {}",
                specs.len(),
                tensors.len()
            )));
        }
        for (s, t) in specs.iter().zip(&tensors) {
            if s.shape != t.shape() {
                return Err(Error::ShapeMismatch {
                    op: "parameter layout",
                    left: s.shape.clone(),
                    right: t.shape().to_vec(),
                });
            }
        }
        Ok(Self {
            names: specs.into_iter().map(|s| s.name).collect(),
            tensors: tensors.into_iter().map(|t| t.detach()).collect(),
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replaces every tensor with new data of the same shape.
    pub fn replace_data(&mut self, data: Vec<Vec<f64>>) -> Result<()> {
        if data.len() != self.tensors.len() {
            return Err(invalid("parameter count mismatch"));
        }
        for (t, d) in self.tensors.iter_mut().zip(data) {
            *t = Tensor::new(t.shape().to_vec(), d)?;
        }
        Ok(())
    }
}

fn draw(rng: &mut ChaCha8Rng, spec: &ParamSpec, init: Init) -> Tensor {
    let n: usize = spec.shape.iter().product();
    let data = match init {
        Init::Uniform { fan_in } => {
            let bound = math::sqrt(1.0 / fan_in as f64);
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        }
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
    };
    Tensor::from_parts(spec.shape.clone(), data, None)
}

/// Fresh parameters: linear weights uniform on ±√(1/fan_in), biases zero,
/// layer-norm gains one, and the last layer of every vector field zero so
/// each field is identically zero.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let specs = layout(cfg);
    let tensors = specs.iter().map(|s| draw(&mut rng, s, s.init)).collect();
    ParamSet::from_tensors(cfg, tensors)
}

/// Like [`init_params`] but every weight and bias (including vector-field
/// outputs) is drawn uniformly, so no part of the network is trivially
/// zero. Used for gradient verification.
pub fn init_params_dense(cfg: &ModelConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let specs = layout(cfg);
    let tensors = specs
        .iter()
        .map(|s| {
            let fan_in = if s.shape.len() == 2 { s.shape[0] } else { s.shape[0].max(1) };
            let init = match s.init {
                Init::Ones => Init::Ones,
                _ => Init::Uniform { fan_in },
            };
            draw(&mut rng, s, init)
        })
        .collect();
    ParamSet::from_tensors(cfg, tensors)
}
