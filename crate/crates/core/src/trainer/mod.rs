//! Two-stage training: classification pre-training over every base class,
//! then episodic fine-tuning, each stage optionally with the
//! uncertainty-aware loss.
//!
//! One estimator instance lives in [`TrainState`] for the whole run, so the
//! spreads learned in stage 1 carry into stage 2 untouched. Every random
//! draw comes from a stream derived from the run seed and a step counter,
//! which makes a run a pure function of its config and dataset.

mod config;

pub use config::{
    EstimatorChoice, OptimizerConfig, OptimizerKind, Stage1Config, Stage2Config, TrainConfig,
};

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::checkpoint::{CheckpointError, TensorFile};
use crate::embeddings::{format_real, EmbeddingDataset, EmbeddingRecord};
use crate::episodic::{sample_episode, Episode, EpisodeError};
use crate::metric_head::{ce_loss, cosine_logits, prototypes_on_tape, stage1_logits, Temperature};
use crate::numerics::{
    derive_seed, BatchStats, Matrix, Mode, NumericsError, Rng, Tape, Var, BN_MOMENTUM,
};
use crate::uncertainty::{draw_noise, relation_values, uncertain_query_loss, Estimator, SigmaSource};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Episode(#[from] EpisodeError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Everything a run updates.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Base labels in classifier row order.
    base_labels: Vec<u32>,
    /// Cosine classifier weights, one row per base class.
    pub classifier: Matrix,
    pub temperature: Temperature,
    pub adapter: Option<Matrix>,
    pub estimator: Option<Estimator>,
    /// Optimizer slots keyed by parameter name.
    velocity: BTreeMap<String, Matrix>,
    pub stage1_steps: u64,
    pub stage2_steps: u64,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    seed: u64,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub stage: u8,
    pub epoch: usize,
    pub mean_loss: f64,
    pub tau: f64,
    /// Mean spread over every pair of the epoch; absent without uncertainty.
    pub mean_sigma: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("stage,epoch,mean_loss,tau,mean_sigma\n");
        for r in &self.rows {
            let sigma = r.mean_sigma.map(format_real).unwrap_or_else(|| "nan".into());
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.stage,
                r.epoch,
                format_real(r.mean_loss),
                format_real(r.tau),
                sigma
            );
        }
        out
    }
}

/// Loss and spreads of one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    pub sigmas: Vec<f64>,
}

/// Loss and per-parameter gradients, `None` for parameters off the loss path.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientMap {
    pub loss: f64,
    pub grads: Vec<(String, Option<Matrix>)>,
}

struct Computed {
    report: StepReport,
    grads: Vec<Option<Matrix>>,
    bn_updates: Vec<(usize, BatchStats)>,
}

struct Bound {
    classifier: Var,
    rho: Var,
    adapter: Option<Var>,
    estimator: Vec<Var>,
}

struct Built {
    loss: Var,
    sigmas: Vec<Var>,
    bn_updates: Vec<(usize, BatchStats)>,
}

impl TrainState {
    /// Fresh state for `base` under `config`.
    pub fn init(config: &TrainConfig, base: &EmbeddingDataset) -> Result<Self, TrainError> {
        config.validate_for(base)?;
        let base_labels = base.labels();
        let dim = base.dim();
        let c = base_labels.len();
        let mut rng = Rng::new(derive_seed(config.seed, "init"));
        let scale = 1.0 / (dim as f64).sqrt();
        let data = (0..c * dim).map(|_| scale * rng.normal()).collect();
        let classifier = Matrix::new(c, dim, data)?;
        let estimator = match config.estimator.kind() {
            None => None,
            Some(kind) => {
                let way = if config.stage1.uncertainty && config.stage1.epochs > 0 {
                    c
                } else {
                    config.stage2.way
                };
                Some(Estimator::new(kind, config.groups, Some(way), &mut rng)?)
            }
        };
        Ok(Self {
            base_labels,
            classifier,
            temperature: Temperature::new(config.tau_init)?,
            adapter: config.adapter.then(|| Matrix::identity(dim)),
            estimator,
            velocity: BTreeMap::new(),
            stage1_steps: 0,
            stage2_steps: 0,
            stage1_epochs: 0,
            stage2_epochs: 0,
            seed: config.seed,
        })
    }

    pub fn base_labels(&self) -> &[u32] {
        &self.base_labels
    }

    pub fn dim(&self) -> usize {
        self.classifier.cols()
    }

    /// Rows of `x` mapped through the adapter, or `x` itself without one.
    pub fn embed(&self, x: &Matrix) -> Result<Matrix, NumericsError> {
        match &self.adapter {
            Some(w) => x.matmul(w),
            None => Ok(x.clone()),
        }
    }

    /// Drops the estimator and its optimizer slots.
    pub fn without_estimator(&self) -> Self {
        let mut s = self.clone();
        s.estimator = None;
        s.velocity.retain(|k, _| !k.starts_with("estimator."));
        s
    }

    fn slot_names(&self) -> Vec<String> {
        let mut names = vec!["classifier".to_string(), "log_tau".to_string()];
        if self.adapter.is_some() {
            names.push("adapter".into());
        }
        if let Some(e) = &self.estimator {
            for entry in e.params().entries().iter().filter(|e| e.trainable) {
                names.push(format!("estimator.{}", entry.name));
            }
        }
        names
    }

    fn bind(&self, tape: &mut Tape) -> Bound {
        let classifier = tape.leaf(self.classifier.clone());
        let rho = tape.leaf(Matrix::scalar(self.temperature.log_tau));
        let adapter = self.adapter.as_ref().map(|w| tape.leaf(w.clone()));
        let estimator = self
            .estimator
            .as_ref()
            .map(|e| e.params().bind(tape))
            .unwrap_or_default();
        Bound {
            classifier,
            rho,
            adapter,
            estimator,
        }
    }

    /// Leaves in [`Self::slot_names`] order.
    fn trainable_vars(&self, b: &Bound) -> Vec<Var> {
        let mut vars = vec![b.classifier, b.rho];
        vars.extend(b.adapter);
        if let Some(e) = &self.estimator {
            for (entry, v) in e.params().entries().iter().zip(&b.estimator) {
                if entry.trainable {
                    vars.push(*v);
                }
            }
        }
        vars
    }

    fn sigma_source<'a>(&'a self, config: &TrainConfig, b: &'a Bound) -> Result<SigmaSource<'a>, TrainError> {
        if config.force_zero_sigma {
            return Ok(SigmaSource::Zero);
        }
        let estimator = self
            .estimator
            .as_ref()
            .ok_or_else(|| TrainError::Config("uncertainty needs an estimator".into()))?;
        Ok(SigmaSource::Estimator {
            estimator,
            vars: &b.estimator,
            mode: Mode::Train,
        })
    }

    fn compute(
        &self,
        build: impl FnOnce(&Self, &mut Tape, &Bound) -> Result<Built, TrainError>,
    ) -> Result<Computed, TrainError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let built = build(self, &mut tape, &bound)?;
        let grads = tape.backward(built.loss)?;
        let sigmas = built
            .sigmas
            .iter()
            .flat_map(|s| tape.value(*s).as_slice().iter().copied())
            .collect();
        let grads = self
            .trainable_vars(&bound)
            .into_iter()
            .map(|v| grads.get(v).cloned())
            .collect();
        Ok(Computed {
            report: StepReport {
                loss: tape.scalar(built.loss),
                sigmas,
            },
            grads,
            bn_updates: built.bn_updates,
        })
    }

    fn commit(&mut self, config: &TrainConfig, learning_rate: f64, c: Computed) -> StepReport {
        self.apply_update(config, learning_rate, c.grads);
        if let Some(e) = self.estimator.as_mut() {
            e.apply_bn_updates(&c.bn_updates, BN_MOMENTUM);
        }
        c.report
    }

    fn gradient_map(&self, c: Computed) -> GradientMap {
        GradientMap {
            loss: c.report.loss,
            grads: self.slot_names().into_iter().zip(c.grads).collect(),
        }
    }

    fn apply_update(&mut self, config: &TrainConfig, lr: f64, mut grads: Vec<Option<Matrix>>) {
        if let Some(cap) = config.optimizer.clip_norm {
            let norm: f64 = grads
                .iter()
                .flatten()
                .flat_map(|g| g.as_slice())
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt();
            if norm > cap {
                let f = cap / norm;
                for g in grads.iter_mut().flatten() {
                    *g = g.map(|x| x * f);
                }
            }
        }
        let names = self.slot_names();
        let mut log_tau = Matrix::scalar(self.temperature.log_tau);
        let mut slots: Vec<&mut Matrix> = vec![&mut self.classifier, &mut log_tau];
        if let Some(a) = self.adapter.as_mut() {
            slots.push(a);
        }
        if let Some(e) = self.estimator.as_mut() {
            for entry in e.params_mut().entries_mut() {
                if entry.trainable {
                    slots.push(&mut entry.value);
                }
            }
        }
        debug_assert_eq!(slots.len(), grads.len());
        for ((name, param), grad) in names.iter().zip(slots).zip(grads) {
            // Parameters off the loss path keep both value and momentum.
            let Some(g) = grad else { continue };
            let step = match config.optimizer.kind {
                OptimizerKind::Sgd => g,
                OptimizerKind::Momentum => {
                    let m = config.optimizer.momentum;
                    let v = self
                        .velocity
                        .entry(name.clone())
                        .or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
                    *v = v.zip_map(&g, |v, g| m * v + g);
                    v.clone()
                }
            };
            *param = param.zip_map(&step, |p, s| p - lr * s);
        }
        self.temperature.log_tau = log_tau.get(0, 0);
    }

    fn classifier_row(&self, label: u32) -> Result<usize, TrainError> {
        self.base_labels
            .binary_search(&label)
            .map_err(|_| TrainError::Data(format!("label {label} is not a base class")))
    }

    /// One classification step over `batch`.
    pub fn stage1_step(
        &mut self,
        config: &TrainConfig,
        batch: &[&EmbeddingRecord],
    ) -> Result<StepReport, TrainError> {
        let c = self.stage1_compute(config, batch)?;
        self.stage1_steps += 1;
        Ok(self.commit(config, config.stage1.learning_rate, c))
    }

    /// Loss and gradients the next [`Self::stage1_step`] would apply.
    pub fn stage1_gradients(
        &self,
        config: &TrainConfig,
        batch: &[&EmbeddingRecord],
    ) -> Result<GradientMap, TrainError> {
        Ok(self.gradient_map(self.stage1_compute(config, batch)?))
    }

    fn stage1_compute(&self, config: &TrainConfig, batch: &[&EmbeddingRecord]) -> Result<Computed, TrainError> {
        if batch.is_empty() {
            return Err(TrainError::Data("empty stage-1 batch".into()));
        }
        let rows = batch
            .iter()
            .map(|r| self.classifier_row(r.label))
            .collect::<Result<Vec<_>, _>>()?;
        let vectors: Vec<&[f64]> = batch.iter().map(|r| r.vector.as_slice()).collect();
        let x = Matrix::from_rows(&vectors)?;
        let mut rng = Rng::substream(derive_seed(self.seed, "stage1-noise"), self.stage1_steps);
        let classes = self.base_labels.len();
        self.compute(|s, tape, b| {
            let x = tape.constant(x);
            let z = match b.adapter {
                Some(w) => tape.matmul(x, w)?,
                None => x,
            };
            let tau = tape.exp(b.rho)?;
            let mut built = Built::default_with(tape)?;
            for (i, &k) in rows.iter().enumerate() {
                let q = tape.gather_rows(z, &[i])?;
                let loss = if config.stage1.uncertainty {
                    let eps = draw_noise(config.mc.samples, classes, config.mc.noise, &mut rng);
                    let source = s.sigma_source(config, b)?;
                    let zero = matches!(source, SigmaSource::Zero);
                    let out = uncertain_query_loss(tape, source, q, b.classifier, tau, k, &eps)?;
                    if !zero {
                        built.sigmas.push(out.sigma);
                    }
                    built.bn_updates.extend(out.bn_updates);
                    out.loss
                } else {
                    let logits = stage1_logits(tape, q, b.classifier, tau)?;
                    ce_loss(tape, logits, k)?
                };
                built.loss = tape.add(built.loss, loss)?;
            }
            built.loss = tape.scale(built.loss, 1.0 / rows.len() as f64)?;
            Ok(built)
        })
    }

    /// One episodic step; the loss averages over every query.
    pub fn stage2_step(&mut self, config: &TrainConfig, episode: &Episode) -> Result<StepReport, TrainError> {
        let c = self.stage2_compute(config, episode)?;
        self.stage2_steps += 1;
        Ok(self.commit(config, config.stage2.learning_rate, c))
    }

    /// Loss and gradients the next [`Self::stage2_step`] would apply.
    pub fn stage2_gradients(&self, config: &TrainConfig, episode: &Episode) -> Result<GradientMap, TrainError> {
        Ok(self.gradient_map(self.stage2_compute(config, episode)?))
    }

    fn stage2_compute(&self, config: &TrainConfig, episode: &Episode) -> Result<Computed, TrainError> {
        let s2 = &config.stage2;
        if episode.way != s2.way || episode.shot != s2.shot || episode.queries_per_class != s2.queries {
            return Err(TrainError::Data(format!(
                "episode is {}-way {}-shot with {} queries, config wants {}-way {}-shot with {}",
                episode.way, episode.shot, episode.queries_per_class, s2.way, s2.shot, s2.queries
            )));
        }
        let support = episode.support_matrix();
        let queries = episode.query_matrix();
        let targets = episode.targets();
        let mut rng = Rng::substream(derive_seed(self.seed, "stage2-noise"), self.stage2_steps);
        self.compute(|s, tape, b| {
            let sup = tape.constant(support);
            let qry = tape.constant(queries);
            let (sup, qry) = match b.adapter {
                Some(w) => (tape.matmul(sup, w)?, tape.matmul(qry, w)?),
                None => (sup, qry),
            };
            let protos = prototypes_on_tape(tape, sup, episode.way, episode.shot)?;
            let tau = tape.exp(b.rho)?;
            let mut built = Built::default_with(tape)?;
            for (i, &k) in targets.iter().enumerate() {
                let q = tape.gather_rows(qry, &[i])?;
                let loss = if s2.uncertainty {
                    let eps = draw_noise(config.mc.samples, episode.way, config.mc.noise, &mut rng);
                    let source = s.sigma_source(config, b)?;
                    let zero = matches!(source, SigmaSource::Zero);
                    let out = uncertain_query_loss(tape, source, q, protos, tau, k, &eps)?;
                    if !zero {
                        built.sigmas.push(out.sigma);
                    }
                    built.bn_updates.extend(out.bn_updates);
                    out.loss
                } else {
                    let logits = cosine_logits(tape, q, protos, tau)?;
                    ce_loss(tape, logits, k)?
                };
                built.loss = tape.add(built.loss, loss)?;
            }
            built.loss = tape.scale(built.loss, 1.0 / targets.len() as f64)?;
            Ok(built)
        })
    }

    /// Spreads of every query of `episode` over its prototypes.
    pub fn episode_sigmas(&self, episode: &Episode, mode: Mode) -> Result<Option<Vec<Vec<f64>>>, TrainError> {
        let Some(est) = &self.estimator else {
            return Ok(None);
        };
        let protos = crate::metric_head::compute_prototypes(episode);
        let protos = self.embed(protos.matrix())?;
        let queries = self.embed(&episode.query_matrix())?;
        let mut out = Vec::with_capacity(queries.rows());
        for i in 0..queries.rows() {
            let rel = relation_values(queries.row(i), &protos, est.groups())?;
            out.push(est.sigma_values(&rel.0, mode)?);
        }
        Ok(Some(out))
    }

    pub fn to_checkpoint(&self) -> String {
        let mut f = TensorFile::default();
        f.push_meta("format", "train-state");
        f.push_meta("seed", self.seed);
        f.push_meta("stage1_steps", self.stage1_steps);
        f.push_meta("stage2_steps", self.stage2_steps);
        f.push_meta("stage1_epochs", self.stage1_epochs);
        f.push_meta("stage2_epochs", self.stage2_epochs);
        let labels: Vec<String> = self.base_labels.iter().map(u32::to_string).collect();
        f.push_meta("base_labels", labels.join(","));
        f.push_meta("adapter", self.adapter.is_some());
        f.push_meta("estimator", self.estimator.is_some());
        f.tensors.push(("classifier".into(), self.classifier.clone()));
        f.tensors.push(("log_tau".into(), Matrix::scalar(self.temperature.log_tau)));
        if let Some(a) = &self.adapter {
            f.tensors.push(("adapter".into(), a.clone()));
        }
        if let Some(e) = &self.estimator {
            e.to_tensor_file("estimator.", &mut f);
        }
        for name in self.slot_names() {
            if let Some(v) = self.velocity.get(&name) {
                f.tensors.push((format!("velocity.{name}"), v.clone()));
            }
        }
        f.to_text()
    }

    pub fn from_checkpoint(text: &str) -> Result<Self, CheckpointError> {
        let f = TensorFile::parse(text)?;
        if f.meta("format")? != "train-state" {
            return Err(CheckpointError::BadMeta {
                key: "format".into(),
                message: "not a training-state checkpoint".into(),
            });
        }
        let bad = |key: &str, message: String| CheckpointError::BadMeta {
            key: key.into(),
            message,
        };
        let labels_raw = f.meta("base_labels")?;
        let base_labels = labels_raw
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<u32>().map_err(|e| bad("base_labels", e.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        let tensor = |name: &str| {
            f.tensor(name)
                .cloned()
                .ok_or_else(|| CheckpointError::MissingTensor(name.into()))
        };
        let classifier = tensor("classifier")?;
        if classifier.rows() != base_labels.len() {
            return Err(CheckpointError::TensorShape {
                name: "classifier".into(),
                expected: (base_labels.len(), classifier.cols()),
                found: classifier.shape(),
            });
        }
        let dim = classifier.cols();
        let log_tau = tensor("log_tau")?;
        if log_tau.shape() != (1, 1) {
            return Err(CheckpointError::TensorShape {
                name: "log_tau".into(),
                expected: (1, 1),
                found: log_tau.shape(),
            });
        }
        let adapter = if f.meta_parsed::<bool>("adapter")? {
            let a = tensor("adapter")?;
            if a.shape() != (dim, dim) {
                return Err(CheckpointError::TensorShape {
                    name: "adapter".into(),
                    expected: (dim, dim),
                    found: a.shape(),
                });
            }
            Some(a)
        } else {
            None
        };
        let estimator = if f.meta_parsed::<bool>("estimator")? {
            Some(Estimator::from_tensor_file("estimator.", &f)?)
        } else {
            None
        };
        let mut state = Self {
            base_labels,
            classifier,
            temperature: Temperature {
                log_tau: log_tau.get(0, 0),
            },
            adapter,
            estimator,
            velocity: BTreeMap::new(),
            stage1_steps: f.meta_parsed("stage1_steps")?,
            stage2_steps: f.meta_parsed("stage2_steps")?,
            stage1_epochs: f.meta_parsed("stage1_epochs")?,
            stage2_epochs: f.meta_parsed("stage2_epochs")?,
            seed: f.meta_parsed("seed")?,
        };
        for name in state.slot_names() {
            if let Some(v) = f.tensor(&format!("velocity.{name}")) {
                state.velocity.insert(name, v.clone());
            }
        }
        Ok(state)
    }
}

impl Built {
    fn default_with(tape: &mut Tape) -> Result<Self, NumericsError> {
        Ok(Self {
            loss: tape.constant(Matrix::scalar(0.0)),
            sigmas: Vec::new(),
            bn_updates: Vec::new(),
        })
    }
}

fn epoch_row(stage: u8, epoch: usize, state: &TrainState, reports: &[StepReport]) -> LogRow {
    let mean_loss = reports.iter().map(|r| r.loss).sum::<f64>() / reports.len().max(1) as f64;
    let count: usize = reports.iter().map(|r| r.sigmas.len()).sum();
    let mean_sigma = (count > 0)
        .then(|| reports.iter().flat_map(|r| &r.sigmas).sum::<f64>() / count as f64);
    LogRow {
        stage,
        epoch,
        mean_loss,
        tau: state.temperature.value(),
        mean_sigma,
    }
}

/// All configured stage-1 epochs.
pub fn run_stage1(
    state: &mut TrainState,
    config: &TrainConfig,
    base: &EmbeddingDataset,
    log: &mut TrainLog,
) -> Result<(), TrainError> {
    let order_seed = derive_seed(config.seed, "stage1-order");
    let records = base.records();
    for epoch in 0..config.stage1.epochs {
        let mut order: Vec<usize> = (0..records.len()).collect();
        Rng::substream(order_seed, epoch as u64).shuffle(&mut order);
        let mut reports = Vec::new();
        for chunk in order.chunks(config.stage1.batch_size) {
            let batch: Vec<&EmbeddingRecord> = chunk.iter().map(|&i| &records[i]).collect();
            reports.push(state.stage1_step(config, &batch)?);
        }
        state.stage1_epochs += 1;
        log.rows.push(epoch_row(1, epoch, state, &reports));
    }
    Ok(())
}

/// All configured stage-2 epochs.
pub fn run_stage2(
    state: &mut TrainState,
    config: &TrainConfig,
    base: &EmbeddingDataset,
    log: &mut TrainLog,
) -> Result<(), TrainError> {
    let stream = config.stage2_episodes();
    let per = config.stage2.episodes_per_epoch;
    for epoch in 0..config.stage2.epochs {
        let mut reports = Vec::with_capacity(per);
        for i in 0..per {
            let episode = sample_episode(base, &stream, (epoch * per + i) as u64)?;
            reports.push(state.stage2_step(config, &episode)?);
        }
        state.stage2_epochs += 1;
        log.rows.push(epoch_row(2, epoch, state, &reports));
    }
    Ok(())
}

/// Stage 1 then stage 2 from a fresh state.
pub fn run(config: &TrainConfig, base: &EmbeddingDataset) -> Result<(TrainState, TrainLog), TrainError> {
    let mut state = TrainState::init(config, base)?;
    let mut log = TrainLog::default();
    run_stage1(&mut state, config, base, &mut log)?;
    run_stage2(&mut state, config, base, &mut log)?;
    Ok((state, log))
}
