//! NMSE loss, Adam, and a deterministic mini-batch training loop.
//!
//! A batch is split into fixed-size chunks; each chunk is recorded on its own
//! tape and the chunk gradients are summed in chunk order. The chunk size is
//! part of the configuration, so the result does not depend on how many
//! workers an [`Executor`] uses.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{CsiMatrix, CsiSequence};
use crate::error::{invalid, Error, Result};
use crate::gradcheck::{grad_check, GradCheck};
use crate::math;
use crate::model::{forward_batch, Net, OdeFormer, ParamSet, Query};
use crate::tape::{Tape, Tensor};

/// `‖pred − truth‖²_F / ‖truth‖²_F`.
pub fn nmse(pred: &CsiMatrix, truth: &CsiMatrix) -> Result<f64> {
    if pred.dims() != truth.dims() {
        return Err(Error::DimensionMismatch {
            expected: truth.dims(),
            found: pred.dims(),
        });
    }
    let denom = truth.norm_sq();
    if !(denom > 0.0) {
        return Err(Error::ZeroNorm);
    }
    let err: f64 = pred
        .values()
        .iter()
        .zip(truth.values())
        .map(|(p, t)| (p - t).norm_sqr())
        .sum();
    Ok(err / denom)
}

/// Recorded `Σ_b NMSE(pred_b, truth_b) / divisor` over real-stacked rows of
/// `pred` (`[batch, 2·n_ant·n_sc]`).
pub fn nmse_loss(tape: &mut Tape, pred: &Tensor, truths: &[&CsiMatrix], divisor: f64) -> Result<Tensor> {
    if pred.rows() != truths.len() {
        return Err(invalid("one truth matrix per prediction row is required"));
    }
    let mut data = Vec::with_capacity(pred.len());
    let mut inv = Vec::with_capacity(truths.len());
    for t in truths {
        let n = t.norm_sq();
        if !(n > 0.0) {
            return Err(Error::ZeroNorm);
        }
        inv.push(1.0 / math::sqrt(n));
        data.extend(t.to_real());
    }
    let truth = Tensor::new(pred.shape().to_vec(), data)?;
    let diff = tape.sub(pred, &truth)?;
    let rel = tape.row_scale(&diff, &inv)?;
    let sq = tape.mul(&rel, &rel)?;
    let total = tape.sum(&sq);
    Ok(tape.scale(&total, 1.0 / divisor))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Write a checkpoint every this many epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
    /// Sequences per gradient job. Affects only the summation order.
    pub chunk_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 100,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            checkpoint_every: 0,
            chunk_size: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(invalid("learning_rate must be positive"));
        }
        if self.batch_size == 0 || self.chunk_size == 0 {
            return Err(invalid("batch_size and chunk_size must be at least 1"));
        }
        let open_unit = |b: f64| b > 0.0 && b < 1.0;
        if !open_unit(self.beta1) || !open_unit(self.beta2) {
            return Err(invalid("adam betas must lie in (0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(invalid("adam eps must be positive"));
        }
        Ok(())
    }
}

/// Adam moment buffers, one per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut ParamSet, grads: &[Vec<f64>], state: &mut OptimState, cfg: &TrainConfig) -> Result<()> {
    let lens: Vec<usize> = params.tensors().iter().map(Tensor::len).collect();
    let aligned = |bufs: &[Vec<f64>]| bufs.len() == lens.len() && bufs.iter().zip(&lens).all(|(b, &n)| b.len() == n);
    if !aligned(grads) || !aligned(&state.m) || !aligned(&state.v) {
        return Err(invalid("gradient and optimizer buffers must mirror the parameters"));
    }
    state.step += 1;
    let t = state.step as f64;
    let c1 = 1.0 - math::pow(cfg.beta1, t);
    let c2 = 1.0 - math::pow(cfg.beta2, t);
    let mut updated = Vec::with_capacity(lens.len());
    for (k, p) in params.tensors().iter().enumerate() {
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        let mut data = p.to_vec();
        for (i, x) in data.iter_mut().enumerate() {
            let g = grads[k][i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            *x -= cfg.learning_rate * mhat / (math::sqrt(vhat) + cfg.eps);
        }
        updated.push(data);
    }
    params.replace_data(updated)
}

/// Runs independent jobs and returns their results in job order.
pub trait Executor {
    fn run<R: Send>(&self, jobs: usize, job: &(dyn Fn(usize) -> R + Sync)) -> Vec<R>;
}

/// Runs jobs one after another on the calling thread.
#[derive(Clone, Copy, Debug, Default)]
pub struct Sequential;

impl Executor for Sequential {
    fn run<R: Send>(&self, jobs: usize, job: &(dyn Fn(usize) -> R + Sync)) -> Vec<R> {
        (0..jobs).map(job).collect()
    }
}

/// Loss contribution and gradients of one chunk, scaled by `1 / divisor`.
fn chunk_gradients(model: &OdeFormer, seqs: &[&CsiSequence], divisor: f64) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let bound: Vec<Tensor> = model.params().tensors().iter().map(|p| tape.leaf(p)).collect();
    let net = Net::bind(model.config(), &bound);
    let qs: Vec<Query> = seqs
        .iter()
        .map(|s| Query {
            history: s.history(),
            target_time: s.target_time(),
        })
        .collect();
    let pred = forward_batch(&mut tape, model.config(), &net, &qs)?;
    let truths: Vec<&CsiMatrix> = seqs.iter().map(|s| s.target()).collect();
    let loss = nmse_loss(&mut tape, &pred, &truths, divisor)?;
    let grads = tape.backward(&loss)?;
    Ok((loss.item(), bound.iter().map(|b| grads.wrt(b)).collect()))
}

/// Mean NMSE of `seqs` and its gradient with respect to every parameter.
pub fn batch_gradients<E: Executor + ?Sized>(
    model: &OdeFormer,
    seqs: &[&CsiSequence],
    chunk_size: usize,
    exec: &E,
) -> Result<(f64, Vec<Vec<f64>>)> {
    if seqs.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let chunk_size = chunk_size.max(1);
    let chunks: Vec<&[&CsiSequence]> = seqs.chunks(chunk_size).collect();
    let divisor = seqs.len() as f64;
    let results = exec.run(chunks.len(), &|c| chunk_gradients(model, chunks[c], divisor));
    let mut loss = 0.0;
    let mut total: Vec<Vec<f64>> = model.params().tensors().iter().map(|t| vec![0.0; t.len()]).collect();
    for r in results {
        let (l, g) = r?;
        loss += l;
        for (acc, part) in total.iter_mut().zip(g) {
            for (a, p) in acc.iter_mut().zip(part) {
                *a += p;
            }
        }
    }
    Ok((loss, total))
}

/// Per-sequence NMSE of the model's predictions, in input order.
pub fn model_nmse<E: Executor + ?Sized>(
    model: &OdeFormer,
    seqs: &[CsiSequence],
    chunk_size: usize,
    exec: &E,
) -> Result<Vec<f64>> {
    let chunks: Vec<&[CsiSequence]> = seqs.chunks(chunk_size.max(1)).collect();
    let results = exec.run(chunks.len(), &|c| -> Result<Vec<f64>> {
        let qs: Vec<Query> = chunks[c]
            .iter()
            .map(|s| Query {
                history: s.history(),
                target_time: s.target_time(),
            })
            .collect();
        let preds = model.forward_many(&qs)?;
        preds.iter().zip(chunks[c]).map(|(p, s)| nmse(p, s.target())).collect()
    });
    let mut out = Vec::with_capacity(seqs.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean of the batch losses seen during the epoch, each measured before
    /// its own update.
    pub train_nmse: f64,
    pub val_nmse: Option<f64>,
}

/// Fits `model` to `data` with Adam on mini-batch mean NMSE.
///
/// Batches are drawn from a per-epoch shuffle seeded by `cfg.seed`.
/// `val` (possibly empty) is scored after every epoch. `on_epoch` sees the
/// stats and the updated model; an error from it stops training.
pub fn train<E, F>(
    model: &mut OdeFormer,
    data: &[CsiSequence],
    val: &[CsiSequence],
    cfg: &TrainConfig,
    exec: &E,
    mut on_epoch: F,
) -> Result<Vec<EpochStats>>
where
    E: Executor + ?Sized,
    F: FnMut(&EpochStats, &OdeFormer) -> Result<()>,
{
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let dims = (model.config().n_ant, model.config().n_sc);
    if let Some(s) = data.iter().chain(val).find(|s| s.dims() != dims) {
        return Err(Error::DimensionMismatch {
            expected: dims,
            found: s.dims(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = OptimState::new(model.params());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut seen = 0.0;
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let seqs: Vec<&CsiSequence> = idx.iter().map(|&i| &data[i]).collect();
            let (loss, grads) = match batch_gradients(model, &seqs, cfg.chunk_size, exec) {
                Err(Error::NonFiniteState { .. }) => return Err(Error::NonFiniteLoss { epoch, batch }),
                r => r?,
            };
            if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, batch });
            }
            seen += loss * seqs.len() as f64;
            adam_step(model.params_mut(), &grads, &mut state, cfg)?;
        }
        let val_nmse = if val.is_empty() {
            None
        } else {
            let v = model_nmse(model, val, cfg.chunk_size, exec)?;
            Some(v.iter().sum::<f64>() / v.len() as f64)
        };
        let stats = EpochStats {
            epoch,
            train_nmse: seen / data.len() as f64,
            val_nmse,
        };
        history.push(stats);
        on_epoch(&stats, model)?;
    }
    Ok(history)
}

/// Central-difference check of the full forward pass plus mean-NMSE loss
/// over `data`, with respect to every parameter of `model`.
pub fn check_model_gradients(model: &OdeFormer, data: &[CsiSequence], step: f64) -> Result<GradCheck> {
    if data.is_empty() {
        return Err(Error::Empty("gradient check data"));
    }
    let cfg = model.config();
    let qs: Vec<Query> = data
        .iter()
        .map(|s| Query {
            history: s.history(),
            target_time: s.target_time(),
        })
        .collect();
    let truths: Vec<&CsiMatrix> = data.iter().map(|s| s.target()).collect();
    grad_check(
        |tape, ps| {
            let net = Net::bind(cfg, ps);
            let pred = forward_batch(tape, cfg, &net, &qs)?;
            nmse_loss(tape, &pred, &truths, data.len() as f64)
        },
        model.params().tensors(),
        step,
    )
}
