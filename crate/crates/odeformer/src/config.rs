//! Run configuration: one JSON file per experiment, with `section.key=value`
//! overrides.

use std::fs;
use std::path::{Path, PathBuf};

use odeformer_core::channel::{SamplingPlan, SceneConfig};
use odeformer_core::model::ModelConfig;
use odeformer_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub plan: SamplingPlan,
    pub train_count: usize,
    pub val_count: usize,
    pub test_count: usize,
    pub train_seed: u64,
    pub val_seed: u64,
    pub test_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            plan: SamplingPlan::uniform(5, 1.0),
            train_count: 2000,
            val_count: 0,
            test_count: 500,
            train_seed: 1,
            val_seed: 3,
            test_seed: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Any of `hold`, `linear`, `ode_former`.
    pub predictors: Vec<String>,
    pub speeds_mps: Vec<f64>,
    pub intervals_ms: Vec<f64>,
    pub n_inputs: usize,
    /// Sequences per sweep cell.
    pub count: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            predictors: vec!["hold".into(), "linear".into(), "ode_former".into()],
            speeds_mps: vec![10.0, 20.0, 40.0],
            intervals_ms: vec![1.0, 2.0, 3.0, 4.0, 5.0],
            n_inputs: 5,
            count: 500,
            seed: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub train_data: PathBuf,
    pub val_data: PathBuf,
    pub test_data: PathBuf,
    pub checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    pub report_csv: PathBuf,
    pub cdf_json: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            train_data: "run/train.csiq".into(),
            val_data: "run/val.csiq".into(),
            test_data: "run/test.csiq".into(),
            checkpoint: "run/model.ckpt".into(),
            loss_csv: "run/loss.csv".into(),
            report_csv: "run/report.csv".into(),
            cdf_json: "run/cdf.json".into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub scene: SceneConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

const PREDICTORS: [&str; 3] = ["hold", "linear", "ode_former"];

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Checks every section and their agreement on channel shape.
    pub fn validate(&self) -> Result<()> {
        let cfg = |e: odeformer_core::Error| Error::Config(e.to_string());
        self.scene.validate().map_err(cfg)?;
        self.data.plan.validate().map_err(cfg)?;
        self.model.validate().map_err(cfg)?;
        self.train.validate().map_err(cfg)?;
        if (self.model.n_ant, self.model.n_sc) != (self.scene.n_ant, self.scene.n_sc) {
            return Err(Error::Config(format!(
                "model channel shape {}x{} differs from scene {}x{}",
                self.model.n_ant, self.model.n_sc, self.scene.n_ant, self.scene.n_sc
            )));
        }
        if let Some(p) = self.eval.predictors.iter().find(|p| !PREDICTORS.contains(&p.as_str())) {
            return Err(Error::Config(format!("unknown predictor {p:?}")));
        }
        if self.eval.n_inputs == 0 || self.eval.count == 0 {
            return Err(Error::Config("eval needs n_inputs and count of at least 1".into()));
        }
        Ok(())
    }

    /// Applies one `section.key[.key…]=value` override. The value is parsed
    /// as JSON when possible and taken as a string otherwise.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (path, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        let keys: Vec<&str> = path.split('.').collect();
        if keys.len() < 2 || keys.iter().any(|k| k.is_empty()) {
            return Err(Error::Config(format!("override key {path:?} must be section.key")));
        }
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut root = serde_json::to_value(&*self).expect("config serializes");
        let mut node = &mut root;
        for k in &keys[..keys.len() - 1] {
            node = node
                .get_mut(*k)
                .filter(|v| v.is_object())
                .ok_or_else(|| Error::Config(format!("unknown config section {path:?}")))?;
        }
        let obj = node.as_object_mut().unwrap();
        let last = keys[keys.len() - 1];
        if !obj.contains_key(last) {
            return Err(Error::Config(format!("unknown config key {path:?}")));
        }
        obj.insert(last.to_string(), value);
        *self = serde_json::from_value(root).map_err(|e| Error::Config(format!("{path}: {e}")))?;
        Ok(())
    }
}
