//! Run configuration: one TOML document holding every module's settings,
//! with dotted-key overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bernstein::BasisMatrix;
use crate::error::{Error, Result};
use crate::eval::CostWeights;
use crate::flow::{FlowNetConfig, FlowTrainConfig};
use crate::guidance::RefineConfig;
use crate::oracle::{GenConfig, OracleConfig};
use crate::scene::SceneConfig;
use crate::scorer::{CandidateGen, ScorerConfig, ScorerTrainConfig};
use crate::sim::SimConfig;

pub const CONFIG_VERSION: u32 = 1;

/// Environment variable naming the default config file.
pub const CONFIG_ENV: &str = "CROWDFM_CONFIG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectoryConfig {
    pub order: usize,
    pub waypoints: usize,
    /// Waypoint spacing, seconds.
    pub dt: f64,
    /// Time of the last waypoint; must equal `(waypoints − 1)·dt`.
    pub horizon: f64,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self {
            order: 10,
            waypoints: 50,
            dt: 0.1,
            horizon: 4.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Flow-training records written by `gen-data`.
    pub count: usize,
    /// Scorer records per flow record.
    pub scorer_ratio: f64,
    pub mix: [f64; 3],
    pub max_warmup_steps: usize,
    pub scorer_side_bias: f64,
    /// Fraction of the scorer set held out for accuracy and HLP checks.
    pub scorer_holdout: f64,
    pub oracle: OracleConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        let g = GenConfig::default();
        Self {
            count: 500,
            scorer_ratio: 0.5,
            mix: g.mix,
            max_warmup_steps: g.max_warmup_steps,
            scorer_side_bias: g.scorer_side_bias,
            scorer_holdout: 0.2,
            oracle: g.oracle,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub weights: CostWeights,
    /// Worlds per suite.
    pub suite_size: usize,
    pub runs: usize,
    /// Held-out scorer records for the HLP comparison.
    pub hlp_scenes: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            weights: CostWeights::default(),
            suite_size: 50,
            runs: 1,
            hlp_scenes: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub data_dir: PathBuf,
    pub flow_checkpoint: PathBuf,
    pub scorer_checkpoint: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data_dir: "data".into(),
            flow_checkpoint: "runs/flow.ckpt".into(),
            scorer_checkpoint: "runs/scorer.ckpt".into(),
            out_dir: "runs".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub trajectory: TrajectoryConfig,
    pub scene: SceneConfig,
    pub data: DataConfig,
    pub flow: FlowNetConfig,
    pub flow_train: FlowTrainConfig,
    pub scorer: ScorerConfig,
    pub scorer_train: ScorerTrainConfig,
    pub refine: RefineConfig,
    pub sim: SimConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_VERSION,
            seed: 0,
            trajectory: TrajectoryConfig::default(),
            scene: SceneConfig::default(),
            data: DataConfig::default(),
            flow: FlowNetConfig::default(),
            flow_train: FlowTrainConfig::default(),
            scorer: ScorerConfig::default(),
            scorer_train: ScorerTrainConfig::default(),
            refine: RefineConfig::default(),
            sim: SimConfig::default(),
            eval: EvalConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads `path`, applies `key=value` overrides and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?,
            None => String::new(),
        };
        let mut doc: toml::Table = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: RunConfig = doc.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config schema {} is not supported (expected {CONFIG_VERSION})",
                self.schema_version
            )));
        }
        let t = &self.trajectory;
        if t.waypoints < 2 || !(t.dt > 0.0) {
            return Err(Error::Config("trajectory needs at least 2 waypoints and dt > 0".into()));
        }
        if (t.horizon - (t.waypoints - 1) as f64 * t.dt).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "horizon {} disagrees with {} waypoints at dt {}",
                t.horizon, t.waypoints, t.dt
            )));
        }
        if self.flow.order != t.order {
            return Err(Error::Config(format!(
                "flow order {} differs from trajectory order {}",
                self.flow.order, t.order
            )));
        }
        if self.flow.max_obstacles < self.scene.n_obs || self.scorer.max_obstacles < self.scene.n_obs {
            return Err(Error::Config(format!(
                "encoders hold fewer obstacles than scene.n_obs = {}",
                self.scene.n_obs
            )));
        }
        if self.flow.num_candidates < 2 {
            return Err(Error::Config("num_candidates must be at least 2".into()));
        }
        if !(self.sim.dt > 0.0 && self.sim.dt <= 0.2) {
            return Err(Error::Config(format!("sim.dt must lie in (0, 0.2], got {}", self.sim.dt)));
        }
        if !(0.0..1.0).contains(&self.data.scorer_holdout) {
            return Err(Error::Config("data.scorer_holdout must lie in [0, 1)".into()));
        }
        if !(self.data.scorer_ratio >= 0.0) {
            return Err(Error::Config("data.scorer_ratio must be non-negative".into()));
        }
        if self.data.mix.iter().any(|m| !(*m >= 0.0)) || self.data.mix.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config("data.mix needs non-negative weights with a positive sum".into()));
        }
        self.flow.validate()?;
        self.scorer.validate()?;
        self.refine.validate()?;
        Ok(())
    }

    pub fn basis(&self) -> Result<BasisMatrix> {
        let t = &self.trajectory;
        BasisMatrix::uniform(t.order, t.waypoints, t.dt)
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            scene: self.scene.clone(),
            ..self.sim.clone()
        }
    }

    pub fn gen_config(&self) -> GenConfig {
        GenConfig {
            mix: self.data.mix,
            max_warmup_steps: self.data.max_warmup_steps,
            dt: self.sim.dt,
            robot_radius: self.sim.robot_radius,
            scene: self.scene.clone(),
            oracle: self.data.oracle.clone(),
            scorer_side_bias: self.data.scorer_side_bias,
        }
    }

    pub fn candidate_gen(&self) -> CandidateGen {
        CandidateGen {
            k: self.flow.num_candidates,
            steps: self.flow.euler_steps,
            lambda: self.flow.guidance_scale,
            refine: self.refine.clone(),
        }
    }

    /// Splits scorer records into (train, held-out); the held-out part is
    /// the tail so the split is stable for a given file.
    pub fn split_scorer<T>(&self, records: Vec<T>) -> (Vec<T>, Vec<T>) {
        let mut train = records;
        let n_hold = ((train.len() as f64) * self.data.scorer_holdout).round() as usize;
        let held = train.split_off(train.len() - n_hold.min(train.len()));
        (train, held)
    }

    pub fn scorer_count(&self) -> usize {
        (self.data.count as f64 * self.data.scorer_ratio).ceil() as usize
    }
}

/// Sets a dotted key such as `flow.guidance_scale=5` inside `doc`. The value
/// is read as TOML when possible and as a bare string otherwise.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    if key.is_empty() {
        return Err(Error::Config(format!("override `{assignment}` has an empty key")));
    }
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or(toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    let mut table = doc;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{part}` in `{key}` is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
