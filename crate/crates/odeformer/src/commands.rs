//! The work behind each `odeformer` subcommand. Every command reads its
//! settings from a [`RunConfig`], writes artifacts to the configured paths
//! and prints a short human-readable summary to `out`.

use std::io::Write;
use std::path::{Path, PathBuf};

use odeformer_core::channel::{generate_sequences, CsiHistory, CsiMatrix, CsiSequence};
use odeformer_core::eval::{baseline, evaluate, pattern_label, run_sweep, uniform_grid, MetricsReport, Predictor};
use odeformer_core::model::OdeFormer;
use odeformer_core::train::{check_model_gradients, train as fit, EpochStats};
use serde::Serialize;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::exec::Pool;
use crate::report::{write_cdf_json, write_loss_csv, write_report_csv};

fn emit(out: &mut dyn Write, line: impl AsRef<str>) -> Result<()> {
    writeln!(out, "{}", line.as_ref()).map_err(|e| Error::io("<stdout>", e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    /// `(count, seed, path)` for this split.
    fn settings(self, cfg: &RunConfig) -> (usize, u64, &Path) {
        let d = &cfg.data;
        let p = &cfg.paths;
        match self {
            Split::Train => (d.train_count, d.train_seed, &p.train_data),
            Split::Val => (d.val_count, d.val_seed, &p.val_data),
            Split::Test => (d.test_count, d.test_seed, &p.test_data),
        }
    }
}

/// Generates the requested splits; splits with a zero count are skipped.
pub fn gen_data(cfg: &RunConfig, splits: &[Split], out: &mut dyn Write) -> Result<()> {
    cfg.validate()?;
    for &split in splits {
        let (count, seed, path) = split.settings(cfg);
        if count == 0 {
            continue;
        }
        let seqs = generate_sequences(&cfg.scene, &cfg.data.plan, count, seed)?;
        Dataset::new(cfg.scene.n_ant, cfg.scene.n_sc, seqs)?.save(path)?;
        emit(out, format!("{}: {count} sequences -> {}", split.name(), path.display()))?;
    }
    Ok(())
}

fn load_split(cfg: &RunConfig, path: &Path) -> Result<Vec<CsiSequence>> {
    let d = Dataset::load(path)?;
    d.expect_dims((cfg.model.n_ant, cfg.model.n_sc))?;
    Ok(d.sequences)
}

/// Path of the intermediate checkpoint written after `epoch` (1-based).
pub fn epoch_checkpoint_path(base: &Path, epoch: usize) -> PathBuf {
    let stem = base.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match base.extension() {
        Some(ext) => format!("{stem}-epoch{epoch:04}.{}", ext.to_string_lossy()),
        None => format!("{stem}-epoch{epoch:04}"),
    };
    base.with_file_name(name)
}

/// Trains a freshly initialised model (seeded by `train.seed`) on the
/// training split, scoring the validation split when `data.val_count > 0`.
pub fn train(cfg: &RunConfig, pool: &Pool, out: &mut dyn Write) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    let data = load_split(cfg, &cfg.paths.train_data)?;
    let val = if cfg.data.val_count > 0 {
        load_split(cfg, &cfg.paths.val_data)?
    } else {
        Vec::new()
    };
    let mut model = OdeFormer::init(cfg.model.clone(), cfg.train.seed)?;
    emit(
        out,
        format!(
            "training {} parameters on {} sequences ({} threads)",
            model.params().numel(),
            data.len(),
            pool.threads()
        ),
    )?;
    let every = cfg.train.checkpoint_every;
    // The callback can only return core errors; host-side failures are
    // parked here and surfaced after training stops.
    let mut failure = None;
    let result = fit(&mut model, &data, &val, &cfg.train, pool, |s, m| {
        let val = s.val_nmse.map(|v| format!(" val {v:.6}")).unwrap_or_default();
        let mut step = || -> Result<()> {
            emit(out, format!("epoch {} train {:.6}{val}", s.epoch, s.train_nmse))?;
            if every > 0 && (s.epoch + 1) % every == 0 {
                checkpoint::save(m, &epoch_checkpoint_path(&cfg.paths.checkpoint, s.epoch + 1))?;
            }
            Ok(())
        };
        step().map_err(|e| {
            let msg = e.to_string();
            failure = Some(e);
            odeformer_core::Error::InvalidArgument(msg)
        })
    });
    let history = match (result, failure) {
        (_, Some(e)) => return Err(e),
        (r, None) => r?,
    };
    checkpoint::save(&model, &cfg.paths.checkpoint)?;
    write_loss_csv(&cfg.paths.loss_csv, &history)?;
    emit(out, format!("checkpoint -> {}", cfg.paths.checkpoint.display()))?;
    Ok(history)
}

/// Resolves predictor names, loading the checkpoint only when the model is
/// requested.
fn predictors(cfg: &RunConfig, names: &[String]) -> Result<Vec<Box<dyn Predictor>>> {
    names
        .iter()
        .map(|n| match n.as_str() {
            "ode_former" => {
                let m = checkpoint::load_for(&cfg.paths.checkpoint, (cfg.model.n_ant, cfg.model.n_sc))?;
                Ok(Box::new(m) as Box<dyn Predictor>)
            }
            other => baseline(other).map_err(|_| Error::Config(format!("unknown predictor {other:?}"))),
        })
        .collect()
}

fn print_reports(out: &mut dyn Write, reports: &[MetricsReport]) -> Result<()> {
    for r in reports {
        emit(
            out,
            format!(
                "{:>6} m/s  {:<14} {:<10} nmse {:.6} ({:.2} dB)  n={}",
                r.speed_mps, r.interval_pattern, r.predictor, r.mean_nmse, r.nmse_db, r.n_samples
            ),
        )?;
    }
    Ok(())
}

/// Scores predictors on the test split. `names` overrides `eval.predictors`
/// when non-empty.
pub fn eval(cfg: &RunConfig, names: &[String], pool: &Pool, out: &mut dyn Write) -> Result<Vec<MetricsReport>> {
    cfg.validate()?;
    let names = if names.is_empty() { &cfg.eval.predictors[..] } else { names };
    let data = load_split(cfg, &cfg.paths.test_data)?;
    let label = pattern_label(&cfg.data.plan);
    let reports = predictors(cfg, names)?
        .iter()
        .map(|p| Ok(evaluate(p.as_ref(), &data, cfg.scene.speed, &label, pool)?))
        .collect::<Result<Vec<_>>>()?;
    write_report_csv(&cfg.paths.report_csv, &reports)?;
    write_cdf_json(&cfg.paths.cdf_json, &reports)?;
    print_reports(out, &reports)?;
    Ok(reports)
}

/// Evaluates every predictor over the speed × interval grid of the `eval`
/// section.
pub fn sweep(cfg: &RunConfig, names: &[String], pool: &Pool, out: &mut dyn Write) -> Result<Vec<MetricsReport>> {
    cfg.validate()?;
    let names = if names.is_empty() { &cfg.eval.predictors[..] } else { names };
    let cells = uniform_grid(&cfg.eval.speeds_mps, &cfg.eval.intervals_ms, cfg.eval.n_inputs);
    let preds = predictors(cfg, names)?;
    let refs: Vec<&dyn Predictor> = preds.iter().map(|p| p.as_ref()).collect();
    let reports = run_sweep(&cfg.scene, &cells, &refs, cfg.eval.count, cfg.eval.seed, pool)?;
    write_report_csv(&cfg.paths.report_csv, &reports)?;
    write_cdf_json(&cfg.paths.cdf_json, &reports)?;
    print_reports(out, &reports)?;
    Ok(reports)
}

/// A predicted channel matrix as printed by `predict`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Prediction {
    pub predictor: String,
    pub target_time: f64,
    pub n_ant: usize,
    pub n_sc: usize,
    /// Row-major `n_ant × n_sc`.
    pub re: Vec<Vec<f64>>,
    pub im: Vec<Vec<f64>>,
}

impl Prediction {
    fn new(predictor: &str, target_time: f64, h: &CsiMatrix) -> Self {
        let rows = |f: fn(num_complex::Complex64) -> f64| {
            (0..h.n_ant()).map(|a| (0..h.n_sc()).map(|s| f(h.get(a, s))).collect()).collect()
        };
        Self {
            predictor: predictor.into(),
            target_time,
            n_ant: h.n_ant(),
            n_sc: h.n_sc(),
            re: rows(|c| c.re),
            im: rows(|c| c.im),
        }
    }
}

/// Predicts the channel for sequence `index` of `input`, at `target_time`
/// (seconds) or at the sequence's stored target time.
pub fn predict(
    cfg: &RunConfig,
    input: &Path,
    index: usize,
    target_time: Option<f64>,
    predictor: &str,
    out: &mut dyn Write,
) -> Result<Prediction> {
    cfg.validate()?;
    let data = load_split(cfg, input)?;
    let seq = data.get(index).ok_or_else(|| {
        Error::Config(format!("sequence index {index} out of range for {} sequences", data.len()))
    })?;
    let t = target_time.unwrap_or(seq.target_time());
    if !t.is_finite() {
        return Err(Error::Config("target time must be finite".into()));
    }
    let p = predictors(cfg, &[predictor.to_string()])?.remove(0);
    let history: &CsiHistory = seq.history();
    let h = p.predict(history, t)?;
    let pred = Prediction::new(p.name(), t, &h);
    emit(out, serde_json::to_string(&pred).map_err(|e| Error::malformed("prediction", e))?)?;
    Ok(pred)
}

/// Finite-difference check of the full forward pass and loss for a model
/// initialised from `train.seed`, on `count` sequences drawn with the data
/// plan. Returns the maximum relative error.
pub fn grad_check(cfg: &RunConfig, count: usize, step: f64, out: &mut dyn Write) -> Result<f64> {
    cfg.validate()?;
    if count == 0 || !(step > 0.0 && step.is_finite()) {
        return Err(Error::Config("grad-check needs count >= 1 and a positive finite step".into()));
    }
    let model = OdeFormer::init(cfg.model.clone(), cfg.train.seed)?;
    let data = generate_sequences(&cfg.scene, &cfg.data.plan, count, cfg.data.train_seed)?;
    let g = check_model_gradients(&model, &data, step)?;
    emit(
        out,
        format!(
            "max_rel_err {:e} (max_abs_err {:e}, {} entries, worst param {} entry {}: analytic {:e} vs numeric {:e})",
            g.max_rel_err, g.max_abs_err, g.entries, g.worst.0, g.worst.1, g.analytic, g.numeric
        ),
    )?;
    Ok(g.max_rel_err)
}
