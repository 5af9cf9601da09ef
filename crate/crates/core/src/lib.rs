//! Uncertainty-aware few-shot metric learning over fixed feature embeddings.
//!
//! Query–prototype similarities are treated as Gaussians whose means are the
//! temperature-scaled cosine logits of a prototype classifier and whose
//! spreads come from a graph estimator over the N query–prototype relation
//! vectors. Training minimizes a Monte-Carlo classification loss over
//! reparameterized similarity samples; evaluation follows the usual
//! many-episode accuracy protocol with 95% confidence intervals.

pub mod numerics;
pub mod checkpoint;
pub mod embeddings;
pub mod episodic;
pub mod metric_head;
pub mod uncertainty;
pub mod trainer;
pub mod evaluation;
pub mod gradient_suite;
pub mod ablation;
