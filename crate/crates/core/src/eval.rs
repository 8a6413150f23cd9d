//! Analytic baselines, NMSE aggregation and the speed/interval sweep.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::channel::{generate_sequences, CsiHistory, CsiMatrix, CsiSequence, GapPattern, SamplingPlan, SceneConfig};
use crate::error::{invalid, Error, Result};
use crate::math;
use crate::model::{OdeFormer, Query};
use crate::train::{nmse, Executor};

/// Anything that maps a history and a target time to a CSI estimate.
pub trait Predictor: Sync {
    fn name(&self) -> &str;

    fn predict(&self, history: &CsiHistory, target_time: f64) -> Result<CsiMatrix>;

    fn predict_many(&self, queries: &[Query]) -> Result<Vec<CsiMatrix>> {
        queries.iter().map(|q| self.predict(q.history, q.target_time)).collect()
    }
}

/// The most recent observation.
pub fn predict_hold(history: &CsiHistory) -> Result<CsiMatrix> {
    if history.is_empty() {
        return Err(Error::Empty("history"));
    }
    Ok(history.latest().1.clone())
}

/// Extrapolates the line through the two most recent observations.
pub fn predict_linear(history: &CsiHistory, target_time: f64) -> Result<CsiMatrix> {
    if history.len() < 2 {
        return Err(invalid("linear extrapolation needs at least two observations"));
    }
    let order = history.time_order();
    let (b, a) = (order[order.len() - 1], order[order.len() - 2]);
    let (tb, ta) = (history.timestamps()[b], history.timestamps()[a]);
    if !(tb > ta) {
        return Err(invalid("duplicate last timestamps"));
    }
    let k = (target_time - tb) / (tb - ta);
    let (hb, ha) = (&history.inputs()[b], &history.inputs()[a]);
    hb.zip_with(ha, |xb, xa| xb + (xb - xa) * k)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Hold;

impl Predictor for Hold {
    fn name(&self) -> &str {
        "hold"
    }

    fn predict(&self, history: &CsiHistory, _target_time: f64) -> Result<CsiMatrix> {
        predict_hold(history)
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Linear;

impl Predictor for Linear {
    fn name(&self) -> &str {
        "linear"
    }

    fn predict(&self, history: &CsiHistory, target_time: f64) -> Result<CsiMatrix> {
        predict_linear(history, target_time)
    }
}

impl Predictor for OdeFormer {
    fn name(&self) -> &str {
        "ode_former"
    }

    fn predict(&self, history: &CsiHistory, target_time: f64) -> Result<CsiMatrix> {
        self.forward(history, target_time)
    }

    fn predict_many(&self, queries: &[Query]) -> Result<Vec<CsiMatrix>> {
        self.forward_many(queries)
    }
}

/// Aggregate NMSE of one predictor on one dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub predictor: String,
    pub speed_mps: f64,
    pub interval_pattern: String,
    pub n_samples: usize,
    pub mean_nmse: f64,
    /// `10·log10(mean_nmse)`.
    pub nmse_db: f64,
    /// `(error, cumulative probability)`, errors ascending, probabilities
    /// `1/n, 2/n, …, 1`.
    pub cdf: Vec<(f64, f64)>,
}

/// Human-readable label of a sampling plan, e.g. `1/3/1/2:1` (gaps, then
/// the target gap, in ms) or `{1,2,3}x4:1` for random gaps.
pub fn pattern_label(plan: &SamplingPlan) -> String {
    let join = |v: &[f64], sep: &str| v.iter().map(|g| format!("{g}")).collect::<Vec<_>>().join(sep);
    match &plan.gaps {
        GapPattern::Fixed(g) if g.is_empty() => format!("single:{}", plan.target_gap_ms),
        GapPattern::Fixed(g) => format!("{}:{}", join(g, "/"), plan.target_gap_ms),
        GapPattern::Choice(c) => format!("{{{}}}x{}:{}", join(c, ","), plan.n_inputs - 1, plan.target_gap_ms),
    }
}

/// Summary statistics of per-sample errors. The mean is accumulated over the
/// sorted errors, so it does not depend on sample order.
pub fn summarize(errors: &[f64]) -> Result<(f64, Vec<(f64, f64)>)> {
    if errors.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mean = sorted.iter().sum::<f64>() / n as f64;
    let cdf = sorted
        .iter()
        .enumerate()
        .map(|(i, &e)| (e, if i + 1 == n { 1.0 } else { (i + 1) as f64 / n as f64 }))
        .collect();
    Ok((mean, cdf))
}

/// Per-sample NMSE of `predictor` on `data`, in input order.
pub fn sample_errors<E: Executor + ?Sized>(
    predictor: &dyn Predictor,
    data: &[CsiSequence],
    chunk_size: usize,
    exec: &E,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let chunks: Vec<&[CsiSequence]> = data.chunks(chunk_size.max(1)).collect();
    let results = exec.run(chunks.len(), &|c| -> Result<Vec<f64>> {
        let qs: Vec<Query> = chunks[c]
            .iter()
            .map(|s| Query {
                history: s.history(),
                target_time: s.target_time(),
            })
            .collect();
        let preds = predictor.predict_many(&qs)?;
        preds.iter().zip(chunks[c]).map(|(p, s)| nmse(p, s.target())).collect()
    });
    let mut out = Vec::with_capacity(data.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

/// Scores `predictor` on `data`. `speed_mps` and `interval_pattern` are
/// echoed into the report.
pub fn evaluate<E: Executor + ?Sized>(
    predictor: &dyn Predictor,
    data: &[CsiSequence],
    speed_mps: f64,
    interval_pattern: &str,
    exec: &E,
) -> Result<MetricsReport> {
    let errors = sample_errors(predictor, data, 16, exec)?;
    let (mean, cdf) = summarize(&errors)?;
    Ok(MetricsReport {
        predictor: predictor.name().into(),
        speed_mps,
        interval_pattern: interval_pattern.into(),
        n_samples: errors.len(),
        mean_nmse: mean,
        nmse_db: 10.0 * math::log10(mean),
        cdf,
    })
}

/// One cell of a sweep grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepCell {
    pub speed_mps: f64,
    pub plan: SamplingPlan,
}

/// The full cross product of speeds and evenly spaced intervals (ms), with
/// `n_inputs` inputs and the target one interval after the last input.
pub fn uniform_grid(speeds: &[f64], intervals_ms: &[f64], n_inputs: usize) -> Vec<SweepCell> {
    speeds
        .iter()
        .flat_map(|&s| {
            intervals_ms.iter().map(move |&i| SweepCell {
                speed_mps: s,
                plan: SamplingPlan::uniform(n_inputs, i),
            })
        })
        .collect()
}

/// Generates `count` test sequences per cell (scene seeds from `seed`, the
/// same for every cell) and scores every predictor on them. Rows are ordered
/// by cell, then predictor.
pub fn run_sweep<E: Executor + ?Sized>(
    scene: &SceneConfig,
    cells: &[SweepCell],
    predictors: &[&dyn Predictor],
    count: usize,
    seed: u64,
    exec: &E,
) -> Result<Vec<MetricsReport>> {
    if cells.is_empty() || predictors.is_empty() {
        return Err(Error::Empty("sweep grid"));
    }
    let mut rows = Vec::with_capacity(cells.len() * predictors.len());
    for cell in cells {
        let cfg = SceneConfig {
            speed: cell.speed_mps,
            ..scene.clone()
        };
        let data = generate_sequences(&cfg, &cell.plan, count, seed)?;
        let label = pattern_label(&cell.plan);
        for p in predictors {
            rows.push(evaluate(*p, &data, cell.speed_mps, &label, exec)?);
        }
    }
    Ok(rows)
}

/// Boxed predictors by name: `hold` or `linear`. The model is supplied by
/// the caller.
pub fn baseline(name: &str) -> Result<Box<dyn Predictor>> {
    match name {
        "hold" => Ok(Box::new(Hold)),
        "linear" => Ok(Box::new(Linear)),
        other => Err(invalid(format!("unknown predictor {other:?}"))),
    }
}
