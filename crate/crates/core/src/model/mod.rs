//! ODE-Former: embedding, stacked fusion blocks, pointwise evolution head and
//! output projection.
//!
//! Every observation becomes a token. Inside a block each of `M` heads
//! extracts a component from every token, evolves it with its own learned
//! vector field Ψᵢ to the time of every other token, and takes a weighted sum
//! of the evolved copies:
//!
//! ```text
//! out_{i,j} = Σ_p w_p · ( e_{i,p} + ∫_{t_p}^{t_j} Ψᵢ(e, t) dt )
//! ```
//!
//! The fused components are assembled back into a token and added to the
//! input under a layer norm. The evolution head applies the same fusion once
//! more, towards the target time, and a linear projection maps the result to
//! CSI space. There is no positional encoding; the only notion of order is
//! the timestamps, so the prediction is invariant to how the observations are
//! listed.

mod net;
mod params;

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::channel::{CsiHistory, CsiMatrix};
use crate::error::{invalid, Error, Result};
use crate::math;
use crate::solver::{SolverConfig, VectorField};
use crate::tape::{Tape, Tensor};

pub(crate) use net::Net;
use net::{assemble, fuse_terms, Field, Term};
pub use params::{init_params, init_params_dense, layout, ParamSet, ParamSpec};

/// Lower clamp on integration gaps before inverting them, milliseconds.
pub const GAP_FLOOR_MS: f64 = 1e-3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// `w_p = 1/N`.
    Uniform,
    /// Softmax of inverse gaps: shorter integrations get more weight.
    #[default]
    InverseGap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_ant: usize,
    pub n_sc: usize,
    pub l_emb: usize,
    pub m_heads: usize,
    /// Component width; `l_emb / m_heads` when absent.
    pub d_comp: Option<usize>,
    /// Hidden width of every vector field; `2 · d_comp` when absent.
    pub field_hidden: Option<usize>,
    pub depth: usize,
    pub solver: SolverConfig,
    pub weighting: Weighting,
    /// Seconds; times are divided by this before entering a vector field.
    pub time_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_ant: 4,
            n_sc: 8,
            l_emb: 64,
            m_heads: 4,
            d_comp: None,
            field_hidden: None,
            depth: 3,
            solver: SolverConfig::default(),
            weighting: Weighting::InverseGap,
            time_scale: 1e-3,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_ant == 0 || self.n_sc == 0 {
            return Err(invalid("model needs n_ant and n_sc of at least 1"));
        }
        if self.l_emb == 0 || self.m_heads == 0 || self.depth == 0 {
            return Err(invalid("l_emb, m_heads and depth must be at least 1"));
        }
        match self.d_comp {
            Some(0) => return Err(invalid("d_comp must be at least 1")),
            None if self.l_emb % self.m_heads != 0 => {
                return Err(invalid("m_heads must divide l_emb when d_comp is not given"))
            }
            _ => {}
        }
        if self.field_hidden == Some(0) {
            return Err(invalid("field_hidden must be at least 1"));
        }
        if !(self.time_scale > 0.0) || !self.time_scale.is_finite() {
            return Err(invalid("time_scale must be positive"));
        }
        self.solver.validate()
    }

    pub fn comp_width(&self) -> usize {
        self.d_comp.unwrap_or(self.l_emb / self.m_heads)
    }

    pub fn field_width(&self) -> usize {
        self.field_hidden.unwrap_or(2 * self.comp_width())
    }

    /// Length of a real-stacked CSI vector, `2 · n_ant · n_sc`.
    pub fn csi_len(&self) -> usize {
        2 * self.n_ant * self.n_sc
    }
}

/// Normalized fusion weights over source points.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionWeights {
    pub w: Vec<f64>,
}

/// Weights of sources at `times` (seconds) for an output at `target_time`.
///
/// Inverse-gap mode measures gaps in milliseconds, clamps them below at
/// [`GAP_FLOOR_MS`] and applies a softmax to `1/gap`. A source at the target
/// time therefore dominates completely: every other weight underflows to
/// exactly zero.
pub fn fusion_weights(times: &[f64], target_time: f64, mode: Weighting) -> Result<FusionWeights> {
    if times.is_empty() {
        return Err(Error::Empty("fusion sources"));
    }
    let n = times.len();
    let w = match mode {
        Weighting::Uniform => vec![1.0 / n as f64; n],
        Weighting::InverseGap => {
            let logits: Vec<f64> = times
                .iter()
                .map(|t| 1.0 / ((target_time - t).abs() * 1e3).max(GAP_FLOOR_MS))
                .collect();
            let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| math::exp(l - top)).collect();
            let total: f64 = e.iter().sum();
            e.into_iter().map(|v| v / total).collect()
        }
    };
    Ok(FusionWeights { w })
}

/// Intermediate values of one stacked block for a single history, rows in
/// time order.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockActivations {
    /// Input tokens, `[N, l_emb]`.
    pub tokens: Tensor,
    /// Extracted components per head, each `[N, d_comp]`.
    pub components: Vec<Tensor>,
    /// Fused components per head, each `[N, d_comp]`.
    pub fused: Vec<Tensor>,
}

/// One prediction request inside a batch.
#[derive(Clone, Copy, Debug)]
pub struct Query<'a> {
    pub history: &'a CsiHistory,
    pub target_time: f64,
}

/// Time-sorted token layout of a batch.
struct Layout {
    /// `(first row, row count)` per query.
    segments: Vec<(usize, usize)>,
    /// Timestamp of every row.
    times: Vec<f64>,
    /// RMS entry magnitude of each query's inputs.
    scales: Vec<f64>,
    /// Scaled real-stacked inputs, `[rows, csi_len]`.
    inputs: Tensor,
}

/// Root-mean-square modulus of all entries of all matrices.
pub fn rms_scale(inputs: &[CsiMatrix]) -> Result<f64> {
    let count: usize = inputs.iter().map(|m| m.values().len()).sum();
    let power: f64 = inputs.iter().map(CsiMatrix::norm_sq).sum();
    let s = math::sqrt(power / count as f64);
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::ZeroNorm);
    }
    Ok(s)
}

impl Layout {
    fn new(cfg: &ModelConfig, queries: &[Query]) -> Result<Self> {
        if queries.is_empty() {
            return Err(Error::Empty("query batch"));
        }
        let mut segments = Vec::with_capacity(queries.len());
        let mut times = Vec::new();
        let mut scales = Vec::with_capacity(queries.len());
        let mut data = Vec::new();
        for q in queries {
            let h = q.history;
            if h.dims() != (cfg.n_ant, cfg.n_sc) {
                return Err(Error::DimensionMismatch {
                    expected: (cfg.n_ant, cfg.n_sc),
                    found: h.dims(),
                });
            }
            if !q.target_time.is_finite() {
                return Err(invalid("target time must be finite"));
            }
            let scale = rms_scale(h.inputs())?;
            segments.push((times.len(), h.len()));
            for i in h.time_order() {
                times.push(h.timestamps()[i]);
                data.extend(h.inputs()[i].to_real().into_iter().map(|v| v / scale));
            }
            scales.push(scale);
        }
        let inputs = Tensor::new(vec![times.len(), cfg.csi_len()], data)?;
        Ok(Self {
            segments,
            times,
            scales,
            inputs,
        })
    }

    /// Every token fuses the tokens of its own query, towards its own time.
    fn block_terms(&self, mode: Weighting) -> Result<Vec<Term>> {
        let mut terms = Vec::new();
        for &(start, n) in &self.segments {
            let ts = &self.times[start..start + n];
            for j in 0..n {
                let w = fusion_weights(ts, ts[j], mode)?;
                push_terms(&mut terms, start + j, start, ts, &w.w, ts[j]);
            }
        }
        Ok(terms)
    }

    /// One output per query, fusing its tokens towards the target time.
    fn evolution_terms(&self, targets: &[f64], mode: Weighting) -> Result<Vec<Term>> {
        let mut terms = Vec::new();
        for (b, (&(start, n), &target)) in self.segments.iter().zip(targets).enumerate() {
            let ts = &self.times[start..start + n];
            let w = fusion_weights(ts, target, mode)?;
            push_terms(&mut terms, b, start, ts, &w.w, target);
        }
        Ok(terms)
    }
}

/// Terms in time order; exactly-zero weights are dropped (they contribute
/// nothing, and skipping them avoids integrating spans whose result is
/// discarded).
fn push_terms(terms: &mut Vec<Term>, out: usize, start: usize, ts: &[f64], w: &[f64], t_out: f64) {
    for (p, (&t, &weight)) in ts.iter().zip(w).enumerate() {
        if weight != 0.0 {
            terms.push(Term {
                out,
                src: start + p,
                weight,
                t_src: t,
                t_out,
            });
        }
    }
}

/// Sum over sources of `w_p · (e_p + ∫_{t_p}^{target} field)` for one output.
///
/// `components` is `[N, d]` with one row per source time. Sources are
/// accumulated in time order. Returns `[1, d]`.
pub fn fuse<F: VectorField + ?Sized>(
    tape: &mut Tape,
    components: &Tensor,
    times: &[f64],
    target_time: f64,
    field: &F,
    weights: &FusionWeights,
    solver: &SolverConfig,
) -> Result<Tensor> {
    if components.shape().len() != 2 || components.rows() != times.len() || weights.w.len() != times.len() {
        return Err(Error::ShapeMismatch {
            op: "fuse",
            left: components.shape().to_vec(),
            right: vec![times.len(), weights.w.len()],
        });
    }
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let terms: Vec<Term> = order
        .iter()
        .filter(|&&p| weights.w[p] != 0.0)
        .map(|&p| Term {
            out: 0,
            src: p,
            weight: weights.w[p],
            t_src: times[p],
            t_out: target_time,
        })
        .collect();
    fuse_terms(tape, components, field, 1, &terms, solver)
}

/// A model configuration with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OdeFormer {
    config: ModelConfig,
    params: ParamSet,
}

impl OdeFormer {
    pub fn new(config: ModelConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let params = ParamSet::from_tensors(&config, params.tensors().to_vec())?;
        Ok(Self { config, params })
    }

    /// Freshly initialized model; see [`init_params`].
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn net(&self) -> Net {
        Net::bind(&self.config, self.params.tensors())
    }

    /// Predicted CSI at `target_time` from an arbitrarily ordered history.
    pub fn forward(&self, history: &CsiHistory, target_time: f64) -> Result<CsiMatrix> {
        self.forward_many(&[Query { history, target_time }]).map(|mut v| v.remove(0))
    }

    /// Batched inference.
    pub fn forward_many(&self, queries: &[Query]) -> Result<Vec<CsiMatrix>> {
        let mut tape = Tape::inference();
        let out = forward_batch(&mut tape, &self.config, &self.net(), queries)?;
        (0..queries.len())
            .map(|b| CsiMatrix::from_real(self.config.n_ant, self.config.n_sc, out.row(b)))
            .collect()
    }

    /// Token for one real-stacked CSI vector divided by `scale`.
    pub fn embed(&self, h_vec: &[f64], scale: f64) -> Result<Vec<f64>> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::ZeroNorm);
        }
        let x = Tensor::new(vec![1, h_vec.len()], h_vec.iter().map(|v| v / scale).collect())?;
        Ok(self.net().embed(&mut Tape::inference(), &x)?.to_vec())
    }

    /// Component of `token` extracted by `head` of stacked block `block`
    /// (`block == depth` selects the evolution head).
    pub fn extract_components(&self, block: usize, head: usize, token: &[f64]) -> Result<Vec<f64>> {
        let net = self.net();
        let h = self.head(&net, block, head)?;
        let x = Tensor::new(vec![1, token.len()], token.to_vec())?;
        Ok(h.extract.apply(&mut Tape::inference(), &x)?.to_vec())
    }

    /// Evaluates the vector field of (`block`, `head`) at `state` and time `t` (seconds).
    pub fn field(&self, block: usize, head: usize, state: &[f64], t: f64) -> Result<Vec<f64>> {
        let net = self.net();
        let h = self.head(&net, block, head)?;
        let field = Field {
            mlp: &h.field,
            time_scale: self.config.time_scale,
        };
        let y = Tensor::new(vec![1, state.len()], state.to_vec())?;
        Ok(field.eval(&mut Tape::inference(), &y, &[t])?.to_vec())
    }

    /// Assembles exactly `m_heads` fused components (in head order) into a token.
    pub fn assemble(&self, block: usize, components: &[Vec<f64>]) -> Result<Vec<f64>> {
        if components.len() != self.config.m_heads {
            return Err(invalid(alloc::format!(
                "assemble needs {} components, got {}",
                self.config.m_heads,
                components.len()
            )));
        }
        let net = self.net();
        let mlp = if block == self.config.depth {
            &net.evolution.assemble
        } else {
            &net.blocks.get(block).ok_or_else(|| invalid("block index out of range"))?.assemble
        };
        let parts = components
            .iter()
            .map(|c| Tensor::new(vec![1, c.len()], c.clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok(assemble(&mut Tape::inference(), mlp, &parts)?.to_vec())
    }

    /// Applies stacked block `block` to tokens `[N, l_emb]` at `times`.
    /// Rows may be in any order; outputs follow the input order.
    pub fn block(&self, block: usize, tokens: &Tensor, times: &[f64]) -> Result<Tensor> {
        let (order, layout) = self.single_layout(tokens, times)?;
        let net = self.net();
        let b = net.blocks.get(block).ok_or_else(|| invalid("block index out of range"))?;
        let mut tape = Tape::inference();
        let sorted = tape.gather_rows(tokens, &order)?;
        let (out, _) = block_forward(&mut tape, &self.config, b, &sorted, &layout)?;
        unsort(&mut tape, &out, &order)
    }

    /// Evolution head on tokens `[N, l_emb]` at `times`, towards `target_time`.
    pub fn pointwise_evolution(&self, tokens: &Tensor, times: &[f64], target_time: f64) -> Result<Vec<f64>> {
        let (order, layout) = self.single_layout(tokens, times)?;
        let mut tape = Tape::inference();
        let sorted = tape.gather_rows(tokens, &order)?;
        let out = evolution_forward(&mut tape, &self.config, &self.net().evolution, &sorted, &layout, &[target_time])?;
        Ok(out.to_vec())
    }

    /// Per-block activations for one history, in time order.
    pub fn trace(&self, history: &CsiHistory) -> Result<Vec<BlockActivations>> {
        let q = [Query {
            history,
            target_time: history.latest().0,
        }];
        let layout = Layout::new(&self.config, &q)?;
        let net = self.net();
        let mut tape = Tape::inference();
        let mut x = net.embed(&mut tape, &layout.inputs)?;
        let mut acts = Vec::with_capacity(self.config.depth);
        for b in &net.blocks {
            let (y, (components, fused)) = block_forward(&mut tape, &self.config, b, &x, &layout)?;
            acts.push(BlockActivations {
                tokens: x,
                components,
                fused,
            });
            x = y;
        }
        Ok(acts)
    }

    fn head<'n>(&self, net: &'n Net, block: usize, head: usize) -> Result<&'n net::Head> {
        let heads = if block == self.config.depth {
            &net.evolution.heads
        } else {
            &net.blocks.get(block).ok_or_else(|| invalid("block index out of range"))?.heads
        };
        heads.get(head).ok_or_else(|| invalid("head index out of range"))
    }

    fn single_layout(&self, tokens: &Tensor, times: &[f64]) -> Result<(Vec<usize>, Layout)> {
        if tokens.shape() != [times.len(), self.config.l_emb] {
            return Err(Error::ShapeMismatch {
                op: "token matrix",
                left: tokens.shape().to_vec(),
                right: vec![times.len(), self.config.l_emb],
            });
        }
        if times.iter().any(|t| !t.is_finite()) {
            return Err(invalid("timestamps must be finite"));
        }
        let mut order: Vec<usize> = (0..times.len()).collect();
        order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
        let sorted: Vec<f64> = order.iter().map(|&i| times[i]).collect();
        let layout = Layout {
            segments: vec![(0, times.len())],
            times: sorted,
            scales: vec![1.0],
            inputs: Tensor::zeros(vec![1]),
        };
        Ok((order, layout))
    }
}

fn unsort(tape: &mut Tape, x: &Tensor, order: &[usize]) -> Result<Tensor> {
    let mut inverse = vec![0; order.len()];
    for (sorted_pos, &orig) in order.iter().enumerate() {
        inverse[orig] = sorted_pos;
    }
    tape.gather_rows(x, &inverse)
}

type Parts = (Vec<Tensor>, Vec<Tensor>);

fn block_forward(
    tape: &mut Tape,
    cfg: &ModelConfig,
    block: &net::Block,
    x: &Tensor,
    layout: &Layout,
) -> Result<(Tensor, Parts)> {
    let terms = layout.block_terms(cfg.weighting)?;
    let mut components = Vec::with_capacity(block.heads.len());
    let mut fused = Vec::with_capacity(block.heads.len());
    for h in &block.heads {
        let e = h.extract.apply(tape, x)?;
        let field = Field {
            mlp: &h.field,
            time_scale: cfg.time_scale,
        };
        fused.push(fuse_terms(tape, &e, &field, x.rows(), &terms, &cfg.solver)?);
        components.push(e);
    }
    let a = assemble(tape, &block.assemble, &fused)?;
    let sum = tape.add(x, &a)?;
    Ok((block.norm(tape, &sum)?, (components, fused)))
}

fn evolution_forward(
    tape: &mut Tape,
    cfg: &ModelConfig,
    evo: &net::Evolution,
    x: &Tensor,
    layout: &Layout,
    targets: &[f64],
) -> Result<Tensor> {
    let terms = layout.evolution_terms(targets, cfg.weighting)?;
    let mut fused = Vec::with_capacity(evo.heads.len());
    for h in &evo.heads {
        let e = h.extract.apply(tape, x)?;
        let field = Field {
            mlp: &h.field,
            time_scale: cfg.time_scale,
        };
        fused.push(fuse_terms(tape, &e, &field, targets.len(), &terms, &cfg.solver)?);
    }
    assemble(tape, &evo.assemble, &fused)
}

/// Real-stacked predictions `[batch, csi_len]` in CSI units, recorded on `tape`.
pub(crate) fn forward_batch(tape: &mut Tape, cfg: &ModelConfig, net: &Net, queries: &[Query]) -> Result<Tensor> {
    let layout = Layout::new(cfg, queries)?;
    let mut x = net.embed(tape, &layout.inputs)?;
    for b in &net.blocks {
        x = block_forward(tape, cfg, b, &x, &layout)?.0;
    }
    let targets: Vec<f64> = queries.iter().map(|q| q.target_time).collect();
    let v = evolution_forward(tape, cfg, &net.evolution, &x, &layout, &targets)?;
    let out = net.project(tape, &v)?;
    tape.row_scale(&out, &layout.scales)
}
