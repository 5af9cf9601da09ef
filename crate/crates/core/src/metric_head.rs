//! Prototype classifier: class means, temperature-scaled cosine logits and
//! cross-entropy.

use crate::episodic::Episode;
use crate::numerics::{Matrix, NumericsError, Tape, Var};

/// One prototype per episode class, `N x D`.
#[derive(Clone, Debug, PartialEq)]
pub struct Prototypes(pub Matrix);

impl Prototypes {
    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn way(&self) -> usize {
        self.0.rows()
    }
}

/// Temperature kept positive as `exp(log_tau)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Temperature {
    pub log_tau: f64,
}

pub const DEFAULT_TAU: f64 = 10.0;

impl Temperature {
    pub fn new(tau: f64) -> Result<Self, NumericsError> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(NumericsError::Precondition(format!(
                "temperature must be positive, got {tau}"
            )));
        }
        Ok(Self { log_tau: tau.ln() })
    }

    pub fn value(self) -> f64 {
        self.log_tau.exp()
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Self {
            log_tau: DEFAULT_TAU.ln(),
        }
    }
}

/// Mean of each support group.
pub fn compute_prototypes(episode: &Episode) -> Prototypes {
    let dim = episode.support[0][0].vector.len();
    let mut out = Matrix::zeros(episode.way, dim);
    for (j, group) in episode.support.iter().enumerate() {
        let k = group.len() as f64;
        for r in group {
            for (c, v) in r.vector.iter().enumerate() {
                out.set(j, c, out.get(j, c) + v / k);
            }
        }
    }
    Prototypes(out)
}

/// `way x (way * shot)` matrix averaging class-major stacked support rows.
pub fn averaging_matrix(way: usize, shot: usize) -> Matrix {
    let mut m = Matrix::zeros(way, way * shot);
    for j in 0..way {
        for s in 0..shot {
            m.set(j, j * shot + s, 1.0 / shot as f64);
        }
    }
    m
}

/// Prototypes of class-major stacked `support` rows, differentiable.
pub fn prototypes_on_tape(
    tape: &mut Tape,
    support: Var,
    way: usize,
    shot: usize,
) -> Result<Var, NumericsError> {
    let avg = tape.constant(averaging_matrix(way, shot));
    tape.matmul(avg, support)
}

/// `tau * cos(query, c_j)` for every prototype row, as a `1 x N` node.
pub fn cosine_logits(
    tape: &mut Tape,
    query: Var,
    protos: Var,
    tau: Var,
) -> Result<Var, NumericsError> {
    let cos = tape.cosine(query, protos)?;
    tape.scale_by(cos, tau)
}

/// Stage-1 logits against the cosine classifier's weight rows.
pub fn stage1_logits(
    tape: &mut Tape,
    query: Var,
    weights: Var,
    tau: Var,
) -> Result<Var, NumericsError> {
    cosine_logits(tape, query, weights, tau)
}

/// `-log softmax(logits)[label]` of a `1 x N` logit row.
pub fn ce_loss(tape: &mut Tape, logits: Var, label: usize) -> Result<Var, NumericsError> {
    let n = tape.value(logits).cols();
    if label >= n {
        return Err(NumericsError::Precondition(format!(
            "label {label} out of range for {n} classes"
        )));
    }
    let logp = tape.row_log_softmax(logits)?;
    let picked = tape.slice_cols(logp, label, label + 1)?;
    tape.scale(picked, -1.0)
}

/// Plain-value convenience around [`cosine_logits`].
pub fn cosine_logits_values(
    query: &[f64],
    protos: &Matrix,
    tau: f64,
) -> Result<Vec<f64>, NumericsError> {
    let mut t = Tape::new();
    let q = t.constant(Matrix::row_vector(query)?);
    let p = t.constant(protos.clone());
    let tau = t.constant(Matrix::scalar(tau));
    let out = cosine_logits(&mut t, q, p, tau)?;
    Ok(t.value(out).as_slice().to_vec())
}

pub fn ce_loss_value(logits: &[f64], label: usize) -> Result<f64, NumericsError> {
    let mut t = Tape::new();
    let l = t.constant(Matrix::row_vector(logits)?);
    let out = ce_loss(&mut t, l, label)?;
    Ok(t.scalar(out))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
