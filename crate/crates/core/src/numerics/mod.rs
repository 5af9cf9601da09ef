//! Dense `f64` matrices, a reverse-mode tape, and a seeded generator.

mod matrix;
mod params;
mod rng;
mod tape;

pub mod gradcheck;

pub use matrix::Matrix;
pub use params::{fan_in_uniform, ParamEntry, ParamSet};
pub use rng::{derive_seed, Rng};
pub use tape::{softplus, BatchStats, GradFault, Gradients, Tape, Var};

use thiserror::Error;

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {}x{} vs {}x{}", left.0, left.1, right.0, right.1)]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("buffer of length {len} does not describe a non-empty {rows}x{cols} matrix")]
    BadBuffer { rows: usize, cols: usize, len: usize },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward root must be 1x1, got {rows}x{cols}")]
    NonScalarRoot { rows: usize, cols: usize },
    #[error("zero-norm vector at row {row}{}", group.map(|g| format!(", group {g}")).unwrap_or_default())]
    ZeroNorm { row: usize, group: Option<usize> },
    #[error("precondition violated: {0}")]
    Precondition(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running per-column statistics for a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Matrix,
    pub var: Matrix,
}

impl RunningStats {
    pub fn new(cols: usize) -> Self {
        Self {
            mean: Matrix::zeros(1, cols),
            var: Matrix::filled(1, cols, 1.0),
        }
    }

    /// `running = (1 - momentum) * running + momentum * batch`.
    pub fn update(&mut self, batch: &BatchStats, momentum: f64) {
        for (r, b) in self.mean.as_mut_slice().iter_mut().zip(&batch.mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        for (r, b) in self.var.as_mut_slice().iter_mut().zip(&batch.var) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
    }
}

/// Batch normalization over the rows of `x`.
///
/// Train mode normalizes with the batch's own statistics and returns them
/// so the caller can fold them into `running`. Eval mode normalizes with
/// `running` and returns `None`.
pub fn batch_norm(
    tape: &mut Tape,
    x: Var,
    gamma: Var,
    beta: Var,
    running: &RunningStats,
    mode: Mode,
) -> Result<(Var, Option<BatchStats>), NumericsError> {
    match mode {
        Mode::Train => {
            let (y, stats) = tape.batch_norm_train(x, gamma, beta, BN_EPS)?;
            Ok((y, Some(stats)))
        }
        Mode::Eval => {
            let shift = tape.constant(running.mean.map(|m| -m));
            let scale = tape.constant(running.var.map(|v| 1.0 / (v + BN_EPS).sqrt()));
            let centered = tape.add_row(x, shift)?;
            let normed = tape.mul_row(centered, scale)?;
            let scaled = tape.mul_row(normed, gamma)?;
            Ok((tape.add_row(scaled, beta)?, None))
        }
    }
}
