//! Probabilistic query–prototype similarities.
//!
//! For one query against N prototypes the mean similarity row is the
//! baseline logit row `tau * cos(z, c_j)`, and the spread of each pair
//! comes from an [`Estimator`] over group-wise relation features. The
//! classification loss averages the true-class softmax probability over
//! `T` reparameterized draws `s_t = mu + sigma * eps_t` before taking the
//! log, so gradients reach both the means and the spreads.

mod estimator;

pub use estimator::{Estimator, EstimatorKind, SigmaPass};

use serde::{Deserialize, Serialize};

use crate::metric_head::cosine_logits;
use crate::numerics::{BatchStats, Matrix, Mode, NumericsError, Rng, Tape, Var};

/// Group-wise cosine relations, `N x L`, entries in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RelationMatrix(pub Matrix);

/// Per-pair Gaussian over similarities for one query.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityBelief {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// How the standard-normal draws are shared across the N pairs of a draw.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// Independent draw for every (t, j).
    #[default]
    PerPair,
    /// One draw per t shared by all pairs.
    Shared,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McConfig {
    pub samples: usize,
    #[serde(default)]
    pub noise: NoiseMode,
}

pub const DEFAULT_MC_SAMPLES: usize = 10;

impl Default for McConfig {
    fn default() -> Self {
        Self {
            samples: DEFAULT_MC_SAMPLES,
            noise: NoiseMode::PerPair,
        }
    }
}

/// Relation features of a `1 x D` query against `N x D` prototypes on the tape.
pub fn relation_features(
    tape: &mut Tape,
    query: Var,
    protos: Var,
    groups: usize,
) -> Result<Var, NumericsError> {
    tape.group_cosine(query, protos, groups)
}

pub fn relation_values(
    query: &[f64],
    protos: &Matrix,
    groups: usize,
) -> Result<RelationMatrix, NumericsError> {
    let mut t = Tape::new();
    let q = t.constant(Matrix::row_vector(query)?);
    let p = t.constant(protos.clone());
    let v = relation_features(&mut t, q, p, groups)?;
    Ok(RelationMatrix(t.value(v).clone()))
}

/// `T x N` standard-normal draws.
pub fn draw_noise(samples: usize, way: usize, mode: NoiseMode, rng: &mut Rng) -> Matrix {
    assert!(samples >= 1 && way >= 1, "noise needs T >= 1 and N >= 1");
    let mut m = Matrix::zeros(samples, way);
    for t in 0..samples {
        match mode {
            NoiseMode::PerPair => {
                for j in 0..way {
                    m.set(t, j, rng.normal());
                }
            }
            NoiseMode::Shared => {
                let e = rng.normal();
                for j in 0..way {
                    m.set(t, j, e);
                }
            }
        }
    }
    m
}

/// Reparameterized samples `mu + sigma ⊙ eps_t` as a `T x N` node; `mu` is
/// `1 x N`, `sigma` is `N x 1`, `eps` is held constant.
pub fn sample_similarities(
    tape: &mut Tape,
    mu: Var,
    sigma: Var,
    eps: &Matrix,
) -> Result<Var, NumericsError> {
    let n = tape.value(mu).cols();
    if tape.value(sigma).shape() != (n, 1) || eps.cols() != n {
        return Err(NumericsError::Shape {
            op: "sample_similarities",
            left: tape.value(sigma).shape(),
            right: eps.shape(),
        });
    }
    let sigma_row = tape.transpose(sigma)?;
    let e = tape.constant(eps.clone());
    let scaled = tape.mul_row(e, sigma_row)?;
    tape.add_row(scaled, mu)
}

pub fn sample_values(belief: &SimilarityBelief, eps: &Matrix) -> Result<Matrix, NumericsError> {
    let mut t = Tape::new();
    let mu = t.constant(Matrix::row_vector(&belief.mu)?);
    let sigma = t.constant(Matrix::col_vector(&belief.sigma)?);
    let s = sample_similarities(&mut t, mu, sigma, eps)?;
    Ok(t.value(s).clone())
}

/// `-log((1/T) Σ_t softmax(s_t)[label])` for `T x N` samples.
pub fn mc_loss(tape: &mut Tape, samples: Var, label: usize) -> Result<Var, NumericsError> {
    let n = tape.value(samples).cols();
    if label >= n {
        return Err(NumericsError::Precondition(format!(
            "label {label} out of range for {n} classes"
        )));
    }
    let probs = tape.row_softmax(samples)?;
    let true_class = tape.slice_cols(probs, label, label + 1)?;
    let avg = tape.mean(true_class)?;
    let log = tape.log(avg)?;
    tape.scale(log, -1.0)
}

pub fn mc_loss_value(samples: &Matrix, label: usize) -> Result<f64, NumericsError> {
    let mut t = Tape::new();
    let s = t.constant(samples.clone());
    let l = mc_loss(&mut t, s, label)?;
    Ok(t.scalar(l))
}

/// Where the spreads of one query come from.
pub enum SigmaSource<'a> {
    Estimator {
        estimator: &'a Estimator,
        vars: &'a [Var],
        mode: Mode,
    },
    /// Spreads pinned to zero; the loss collapses to plain cross-entropy.
    Zero,
}

/// Nodes of one uncertainty-aware query loss.
#[derive(Debug)]
pub struct QueryLoss {
    pub loss: Var,
    pub mu: Var,
    pub sigma: Var,
    pub bn_updates: Vec<(usize, BatchStats)>,
}

/// Full per-query pipeline: logits, relations, spreads, samples, MC loss.
pub fn uncertain_query_loss(
    tape: &mut Tape,
    source: SigmaSource<'_>,
    query: Var,
    protos: Var,
    tau: Var,
    label: usize,
    eps: &Matrix,
) -> Result<QueryLoss, NumericsError> {
    let mu = cosine_logits(tape, query, protos, tau)?;
    let (sigma, bn_updates) = match source {
        SigmaSource::Estimator {
            estimator,
            vars,
            mode,
        } => {
            let rel = relation_features(tape, query, protos, estimator.groups())?;
            let pass = estimator.forward(tape, vars, rel, mode)?;
            (pass.sigma, pass.bn_updates)
        }
        SigmaSource::Zero => {
            let n = tape.value(mu).cols();
            (tape.constant(Matrix::zeros(n, 1)), Vec::new())
        }
    };
    let samples = sample_similarities(tape, mu, sigma, eps)?;
    let loss = mc_loss(tape, samples, label)?;
    Ok(QueryLoss {
        loss,
        mu,
        sigma,
        bn_updates,
    })
}

#[cfg(test)]
mod tests;
