//! Run configuration: one TOML file, optional `--set key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use simunc_core::ablation::{benchmark_spec, BENCHMARK_BASE_CLASSES};
use simunc_core::embeddings::SynthSpec;
use simunc_core::evaluation::EvalConfig;
use simunc_core::gradient_suite::GradcheckConfig;
use simunc_core::numerics::derive_seed;
use simunc_core::trainer::{EstimatorChoice, OptimizerConfig, Stage1Config, Stage2Config, TrainConfig};
use simunc_core::uncertainty::McConfig;

use crate::error::CliError;

pub const OUT_DIR_ENV: &str = "SIMUNC_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "simunc-out";
pub const EFFECTIVE_CONFIG: &str = "effective_config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_estimator")]
    pub estimator: EstimatorChoice,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub ablation: AblationSection,
    #[serde(default)]
    pub gradcheck: GradcheckConfig,
}

fn default_estimator() -> EstimatorChoice {
    EstimatorChoice::Graph
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            estimator: default_estimator(),
            output_dir: None,
            data: DataSection::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
            ablation: AblationSection::default(),
            gradcheck: GradcheckConfig::default(),
        }
    }
}

/// Either both embedding files or a synthetic generator.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub novel: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSection {
    pub num_classes: usize,
    pub base_classes: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    pub mean_scale: f64,
    pub noise_lo: f64,
    pub noise_hi: f64,
    /// Falls back to the run seed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        let b = benchmark_spec(0);
        Self {
            num_classes: b.num_classes,
            base_classes: BENCHMARK_BASE_CLASSES,
            dim: b.dim,
            samples_per_class: b.samples_per_class,
            mean_scale: b.mean_scale,
            noise_lo: b.noise_lo,
            noise_hi: b.noise_hi,
            seed: None,
        }
    }
}

impl SyntheticSection {
    pub fn spec(&self, seed: u64) -> SynthSpec {
        SynthSpec {
            num_classes: self.num_classes,
            dim: self.dim,
            samples_per_class: self.samples_per_class,
            mean_scale: self.mean_scale,
            noise_lo: self.noise_lo,
            noise_hi: self.noise_hi,
            seed: self.seed.unwrap_or(seed),
        }
    }
}

/// Training settings; seed and estimator come from the top level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub groups: usize,
    pub tau_init: f64,
    pub adapter: bool,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub optimizer: OptimizerConfig,
    pub mc: McConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            groups: t.groups,
            tau_init: t.tau_init,
            adapter: t.adapter,
            stage1: t.stage1,
            stage2: t.stage2,
            optimizer: t.optimizer,
            mc: t.mc,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub episodes: usize,
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
    /// Also write per-episode accuracies.
    pub dump_accuracies: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        let e = EvalConfig::default();
        Self {
            episodes: e.episodes,
            way: e.way,
            shot: e.shot,
            queries: e.queries,
            dump_accuracies: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    pub seeds: Vec<u64>,
    /// Rows of the estimator sweep.
    pub estimators: Vec<EstimatorChoice>,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            seeds: (1..=5).collect(),
            estimators: vec![EstimatorChoice::Graph, EstimatorChoice::Conv, EstimatorChoice::Fc],
        }
    }
}

impl RunConfig {
    /// Parses `text`, applies overrides in order, then checks the schema.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self, CliError> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(CliError::io(p))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let d = &self.data;
        match (&d.base, &d.novel, &d.synthetic) {
            (None, None, _) => {}
            (Some(_), Some(_), None) => {}
            (_, _, Some(_)) => return Err(CliError::Config("data: give base/novel files or [data.synthetic], not both".into())),
            _ => return Err(CliError::Config("data: base and novel files must be given together".into())),
        }
        if let Some(s) = &d.synthetic {
            s.spec(self.seed).validate()?;
            if s.base_classes == 0 || s.base_classes >= s.num_classes {
                return Err(CliError::Config(format!(
                    "data.synthetic.base_classes must lie in 1..{}",
                    s.num_classes
                )));
            }
        }
        self.train_config().validate()?;
        let e = &self.eval;
        if e.episodes == 0 || e.way == 0 || e.shot == 0 || e.queries == 0 {
            return Err(CliError::Config("eval episodes, way, shot and queries must be positive".into()));
        }
        if self.ablation.seeds.is_empty() {
            return Err(CliError::Config("ablation.seeds must not be empty".into()));
        }
        let g = &self.gradcheck;
        if !(g.tolerance > 0.0 && g.tolerance.is_finite()) {
            return Err(CliError::Config("gradcheck.tolerance must be positive".into()));
        }
        Ok(())
    }

    pub fn has_data_source(&self) -> bool {
        self.data.synthetic.is_some() || self.data.base.is_some()
    }

    pub fn train_config(&self) -> TrainConfig {
        self.train_config_for(self.seed)
    }

    pub fn train_config_for(&self, seed: u64) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            stage1: t.stage1.clone(),
            stage2: t.stage2.clone(),
            optimizer: t.optimizer.clone(),
            estimator: self.estimator,
            groups: t.groups,
            mc: t.mc,
            tau_init: t.tau_init,
            adapter: t.adapter,
            seed,
            force_zero_sigma: false,
        }
    }

    /// Evaluation episodes get their own stream derived from the run seed.
    pub fn eval_config_for(&self, seed: u64) -> EvalConfig {
        let e = &self.eval;
        EvalConfig {
            episodes: e.episodes,
            way: e.way,
            shot: e.shot,
            queries: e.queries,
            seed: derive_seed(seed, "eval"),
        }
    }

    /// `--out` wins over the config key, which wins over the environment.
    pub fn output_dir(&self, flag: Option<&Path>) -> PathBuf {
        if let Some(p) = flag {
            return p.to_path_buf();
        }
        if let Some(p) = &self.output_dir {
            return p.clone();
        }
        match std::env::var_os(OUT_DIR_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => PathBuf::from(DEFAULT_OUT_DIR),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config always serializes")
    }
}

/// `a.b.c=value`; the value is read as a TOML literal and kept as a bare
/// string when it does not parse as one.
pub fn apply_override(table: &mut toml::Table, raw: &str) -> Result<(), CliError> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{raw}` is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("override `{raw}` has an empty key segment")));
    }
    let value = value.trim();
    let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    let (last, parents) = path.split_last().expect("split yields at least one segment");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(CliError::Config(format!("override `{raw}`: `{p}` is not a table"))),
        };
    }
    cur.insert(last.to_string(), parsed);
    Ok(())
}
