//! Episodic accuracy with a normal-approximation 95% interval.
//!
//! Inference reads only the (optionally adapted) embeddings: each query
//! goes to the prototype with the largest cosine, ties to the lowest class
//! index. Temperature, softmax and the spread estimator cannot change that
//! decision, so none of them is consulted.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embeddings::{format_real, EmbeddingDataset};
use crate::episodic::{sample_episode, Episode, EpisodeConfig, EpisodeError};
use crate::metric_head::{argmax, compute_prototypes};
use crate::numerics::{Matrix, NumericsError};
use crate::trainer::TrainState;

pub const Z_95: f64 = 1.96;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Episode(#[from] EpisodeError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("evaluation needs at least one episode")]
    NoEpisodes,
}

/// Protocol settings; `episodes` episodes of `way`-way `shot`-shot tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 1000,
            way: 5,
            shot: 1,
            queries: 15,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn episode_config(&self) -> EpisodeConfig {
        EpisodeConfig {
            way: self.way,
            shot: self.shot,
            queries: self.queries,
            episodes: self.episodes,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub config: EvalConfig,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub ci95: f64,
    /// Set when a single episode leaves the interval undefined; `ci95` is 0.
    pub ci_degenerate: bool,
}

impl EvalReport {
    /// Summary of per-episode accuracies.
    pub fn from_accuracies(config: EvalConfig, accuracies: Vec<f64>) -> Result<Self, EvalError> {
        let e = accuracies.len();
        if e == 0 {
            return Err(EvalError::NoEpisodes);
        }
        let mean = accuracies.iter().sum::<f64>() / e as f64;
        let (ci95, ci_degenerate) = if e == 1 {
            (0.0, true)
        } else {
            let var = accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (e - 1) as f64;
            (Z_95 * var.sqrt() / (e as f64).sqrt(), false)
        };
        Ok(Self {
            config,
            accuracies,
            mean,
            ci95,
            ci_degenerate,
        })
    }

    pub fn episodes(&self) -> usize {
        self.accuracies.len()
    }

    /// `mean,ci95,E,seed` header plus one line.
    pub fn summary_csv(&self) -> String {
        format!(
            "mean,ci95,E,seed\n{},{},{},{}\n",
            format_real(self.mean),
            format_real(self.ci95),
            self.episodes(),
            self.config.seed
        )
    }

    pub fn accuracies_csv(&self) -> String {
        let mut out = String::from("episode,accuracy\n");
        for (i, a) in self.accuracies.iter().enumerate() {
            let _ = writeln!(out, "{i},{}", format_real(*a));
        }
        out
    }

    pub fn table(&self) -> String {
        let c = &self.config;
        let mut out = String::new();
        let _ = writeln!(out, "episodes   {}", self.episodes());
        let _ = writeln!(out, "task       {}-way {}-shot, {} queries/class", c.way, c.shot, c.queries);
        let _ = writeln!(out, "seed       {}", c.seed);
        let ci = if self.ci_degenerate {
            "n/a (single episode)".to_string()
        } else {
            format!("{:.2}", 100.0 * self.ci95)
        };
        let _ = writeln!(out, "accuracy   {:.2} +- {ci} %", 100.0 * self.mean);
        out
    }
}

/// Accuracy of nearest-prototype classification on one episode.
pub fn eval_episode(state: &TrainState, episode: &Episode) -> Result<f64, EvalError> {
    let protos = state.embed(compute_prototypes(episode).matrix())?;
    let queries = state.embed(&episode.query_matrix())?;
    let protos = unit_rows(&protos);
    let queries = unit_rows(&queries);
    let sims = queries.matmul(&protos.transpose())?;
    let correct = episode
        .targets()
        .iter()
        .enumerate()
        .filter(|(i, &t)| argmax(sims.row(*i)) == t)
        .count();
    Ok(correct as f64 / episode.query.len() as f64)
}

fn unit_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..m.rows() {
        let norm = m.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        // A zero row has no direction; leave it zero so every cosine is 0.
        if norm > 0.0 {
            for c in 0..m.cols() {
                out.set(r, c, m.get(r, c) / norm);
            }
        }
    }
    out
}

/// Accuracy over `config.episodes` episodes, evaluated in parallel; each
/// episode is drawn from its own sub-stream, so the result is bit-identical
/// at any thread count.
pub fn evaluate(
    state: &TrainState,
    dataset: &EmbeddingDataset,
    config: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    if config.episodes == 0 {
        return Err(EvalError::NoEpisodes);
    }
    let ec = config.episode_config();
    ec.validate(dataset)?;
    let accuracies = (0..config.episodes as u64)
        .into_par_iter()
        .map(|i| eval_episode(state, &sample_episode(dataset, &ec, i)?))
        .collect::<Result<Vec<_>, _>>()?;
    EvalReport::from_accuracies(*config, accuracies)
}
