use serde::{Deserialize, Serialize};

use crate::embeddings::EmbeddingDataset;
use crate::episodic::EpisodeConfig;
use crate::metric_head::DEFAULT_TAU;
use crate::uncertainty::{EstimatorKind, McConfig};

use super::TrainError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub uncertainty: bool,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 32,
            learning_rate: 0.05,
            uncertainty: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Config {
    pub episodes_per_epoch: usize,
    pub epochs: usize,
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
    pub learning_rate: f64,
    pub uncertainty: bool,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            episodes_per_epoch: 100,
            epochs: 2,
            way: 5,
            shot: 1,
            queries: 15,
            learning_rate: 0.01,
            uncertainty: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Plain gradient descent, `p -= lr * g`.
    Sgd,
    /// Heavy ball, `v = m * v + g; p -= lr * v`.
    Momentum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub momentum: f64,
    /// Global gradient-norm cap, off when absent.
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Momentum,
            momentum: 0.9,
            clip_norm: None,
        }
    }
}

/// Which spread estimator a run carries, if any.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorChoice {
    Graph,
    Conv,
    Fc,
    None,
}

impl EstimatorChoice {
    pub fn kind(self) -> Option<EstimatorKind> {
        match self {
            Self::Graph => Some(EstimatorKind::Graph),
            Self::Conv => Some(EstimatorKind::Conv),
            Self::Fc => Some(EstimatorKind::Fc),
            Self::None => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub optimizer: OptimizerConfig,
    pub estimator: EstimatorChoice,
    pub groups: usize,
    pub mc: McConfig,
    pub tau_init: f64,
    /// Trainable `D x D` linear map in front of the metric head, identity
    /// at init; fixed-embedding runs leave it off.
    pub adapter: bool,
    pub seed: u64,
    /// Pins every spread to zero while keeping the uncertainty code path.
    #[serde(skip)]
    pub force_zero_sigma: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            optimizer: OptimizerConfig::default(),
            estimator: EstimatorChoice::Graph,
            groups: 32,
            mc: McConfig::default(),
            tau_init: DEFAULT_TAU,
            adapter: false,
            seed: 0,
            force_zero_sigma: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        for (name, lr) in [
            ("stage1.learning_rate", self.stage1.learning_rate),
            ("stage2.learning_rate", self.stage2.learning_rate),
        ] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return bad(format!("{name} must be finite and >= 0, got {lr}"));
            }
        }
        if self.stage1.epochs > 0 && self.stage1.batch_size == 0 {
            return bad("stage1.batch_size must be positive".into());
        }
        let s2 = &self.stage2;
        if s2.epochs > 0 && (s2.way == 0 || s2.shot == 0 || s2.queries == 0 || s2.episodes_per_epoch == 0) {
            return bad("stage2 way, shot, queries and episodes_per_epoch must be positive".into());
        }
        if !(self.optimizer.momentum >= 0.0 && self.optimizer.momentum < 1.0) {
            return bad(format!("optimizer.momentum must lie in [0, 1), got {}", self.optimizer.momentum));
        }
        if let Some(c) = self.optimizer.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return bad(format!("optimizer.clip_norm must be positive, got {c}"));
            }
        }
        if self.groups == 0 {
            return bad("groups must be positive".into());
        }
        if self.mc.samples == 0 {
            return bad("mc.samples must be positive".into());
        }
        if !(self.tau_init > 0.0 && self.tau_init.is_finite()) {
            return bad(format!("tau_init must be positive, got {}", self.tau_init));
        }
        let wants = (self.stage1.uncertainty && self.stage1.epochs > 0)
            || (self.stage2.uncertainty && self.stage2.epochs > 0);
        if wants && self.estimator == EstimatorChoice::None {
            return bad("uncertainty is enabled but estimator is `none`".into());
        }
        Ok(())
    }

    /// Checks that also depend on the base split.
    pub fn validate_for(&self, base: &EmbeddingDataset) -> Result<(), TrainError> {
        self.validate()?;
        if !base.dim().is_multiple_of(self.groups) {
            return Err(TrainError::Config(format!(
                "groups = {} does not divide embedding dim {}",
                self.groups,
                base.dim()
            )));
        }
        let s1_on = self.stage1.uncertainty && self.stage1.epochs > 0;
        let s2_on = self.stage2.uncertainty && self.stage2.epochs > 0;
        if self.estimator == EstimatorChoice::Fc && s1_on && s2_on && base.num_classes() != self.stage2.way {
            return Err(TrainError::Config(format!(
                "fc estimator is tied to one way count; stage 1 needs {} and stage 2 needs {}",
                base.num_classes(),
                self.stage2.way
            )));
        }
        if self.estimator == EstimatorChoice::Graph {
            if s1_on && base.num_classes() < 2 {
                return Err(TrainError::Config("graph estimator needs at least two base classes".into()));
            }
            if s2_on && self.stage2.way < 2 {
                return Err(TrainError::Config("graph estimator needs stage2.way >= 2".into()));
            }
        }
        if self.stage2.epochs > 0 {
            self.stage2_episodes().validate(base)?;
        }
        Ok(())
    }

    /// The stage-2 episode stream, indexed by global episode number.
    pub fn stage2_episodes(&self) -> EpisodeConfig {
        EpisodeConfig {
            way: self.stage2.way,
            shot: self.stage2.shot,
            queries: self.stage2.queries,
            episodes: self.stage2.episodes_per_epoch * self.stage2.epochs,
            seed: crate::numerics::derive_seed(self.seed, "stage2-episodes"),
        }
    }
}
