//! Finite-difference audit of the full uncertainty-aware query loss.
//!
//! The pipeline under test runs support rows and a query through a linear
//! adapter, averages prototypes, builds relation features, predicts spreads,
//! samples similarities with frozen noise and takes the Monte-Carlo loss.
//! Every input tensor is perturbed entry by entry and compared against the
//! tape's reverse sweep; results are grouped per layer.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::metric_head::prototypes_on_tape;
use crate::numerics::gradcheck::{central_difference, max_relative_error, DEFAULT_STEP};
use crate::numerics::{GradFault, Matrix, Mode, NumericsError, Rng, Tape, Var};
use crate::uncertainty::{draw_noise, uncertain_query_loss, Estimator, EstimatorKind, NoiseMode, SigmaSource};

pub const DEFAULT_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub way: usize,
    pub shot: usize,
    pub dim: usize,
    pub groups: usize,
    pub samples: usize,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            way: 5,
            shot: 2,
            dim: 16,
            groups: 4,
            samples: 5,
            tolerance: DEFAULT_TOLERANCE,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupResult {
    /// `<estimator>/<layer>` or `<estimator>/<input>`.
    pub group: String,
    pub scalars: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub groups: Vec<GroupResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.max_rel_err < self.tolerance)
    }

    pub fn worst(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }

    pub fn table(&self) -> String {
        let mut out = String::from("group,scalars,max_rel_err,status\n");
        for g in &self.groups {
            let status = if g.max_rel_err < self.tolerance { "pass" } else { "FAIL" };
            let _ = writeln!(out, "{},{},{:.3e},{status}", g.group, g.scalars, g.max_rel_err);
        }
        out
    }
}

/// Layer name of an estimator tensor: `wy1.bn.gamma` belongs to `wy1.bn`.
fn layer_of(name: &str) -> &str {
    name.rsplit_once('.').map(|(l, _)| l).unwrap_or(name)
}

/// Every estimator design plus the spread-free head.
pub fn run_suite(config: &GradcheckConfig, fault: Option<GradFault>) -> Result<GradcheckReport, NumericsError> {
    let mut groups = Vec::new();
    for kind in [None, Some(EstimatorKind::Graph), Some(EstimatorKind::Conv), Some(EstimatorKind::Fc)] {
        groups.extend(check_pipeline(config, kind, fault)?);
    }
    Ok(GradcheckReport {
        tolerance: config.tolerance,
        groups,
    })
}

/// Gradient check of one pipeline variant; `None` pins spreads to zero.
pub fn check_pipeline(
    config: &GradcheckConfig,
    kind: Option<EstimatorKind>,
    fault: Option<GradFault>,
) -> Result<Vec<GroupResult>, NumericsError> {
    let c = config;
    if !c.dim.is_multiple_of(c.groups) || c.way < 2 || c.shot == 0 || c.samples == 0 {
        return Err(NumericsError::Precondition(
            "gradcheck needs groups | dim, way >= 2, shot >= 1, samples >= 1".into(),
        ));
    }
    let mut rng = Rng::new(c.seed);
    let estimator = match kind {
        Some(k) => Some(perturbed(Estimator::new(k, c.groups, Some(c.way), &mut rng)?, &mut rng)),
        None => None,
    };
    let uniform = |rng: &mut Rng, r: usize, cols: usize, lo: f64, hi: f64| {
        let data = (0..r * cols).map(|_| rng.uniform_range(lo, hi)).collect();
        Matrix::new(r, cols, data)
    };
    let mut adapter = Matrix::identity(c.dim);
    adapter = adapter.zip_map(&uniform(&mut rng, c.dim, c.dim, -0.2, 0.2)?, |a, b| a + b);
    let support = uniform(&mut rng, c.way * c.shot, c.dim, -1.5, 1.5)?;
    let query = uniform(&mut rng, 1, c.dim, -1.5, 1.5)?;
    let log_tau = Matrix::scalar(rng.uniform_range(0.5, 1.5));
    let eps = draw_noise(c.samples, c.way, NoiseMode::PerPair, &mut rng);
    let label = rng.below(c.way);

    let est_entries = estimator.as_ref().map(|e| e.params().entries().to_vec()).unwrap_or_default();
    let n_est = est_entries.len();
    let mut inputs: Vec<Matrix> = est_entries.iter().map(|e| e.value.clone()).collect();
    inputs.extend([adapter, support, query, log_tau]);

    let build = |vals: &[Matrix], tape: &mut Tape| -> Result<(Var, Vec<Var>), NumericsError> {
        let est = estimator.as_ref().map(|e| {
            let mut e = e.clone();
            for (entry, v) in e.params_mut().entries_mut().iter_mut().zip(vals) {
                entry.value = v.clone();
            }
            e
        });
        let mut vars: Vec<Var> = est_entries
            .iter()
            .zip(vals)
            .map(|(entry, v)| if entry.trainable { tape.leaf(v.clone()) } else { tape.constant(v.clone()) })
            .collect();
        let w = tape.leaf(vals[n_est].clone());
        let s = tape.leaf(vals[n_est + 1].clone());
        let q = tape.leaf(vals[n_est + 2].clone());
        let rho = tape.leaf(vals[n_est + 3].clone());
        let sw = tape.matmul(s, w)?;
        let qw = tape.matmul(q, w)?;
        let protos = prototypes_on_tape(tape, sw, c.way, c.shot)?;
        let tau = tape.exp(rho)?;
        let source = match &est {
            Some(e) => SigmaSource::Estimator {
                estimator: e,
                vars: &vars[..n_est],
                mode: Mode::Train,
            },
            None => SigmaSource::Zero,
        };
        let out = uncertain_query_loss(tape, source, qw, protos, tau, label, &eps)?;
        vars.extend([w, s, q, rho]);
        Ok((out.loss, vars))
    };

    let mut tape = Tape::with_fault(fault);
    let (loss, vars) = build(&inputs, &mut tape)?;
    let grads = tape.backward(loss)?;

    let prefix = kind.map(|k| k.to_string()).unwrap_or_else(|| "none".into());
    let mut names: Vec<String> = est_entries.iter().map(|e| layer_of(&e.name).to_string()).collect();
    names.extend(["adapter", "support", "query", "log_tau"].map(String::from));
    let mut results: Vec<GroupResult> = Vec::new();
    for (i, var) in vars.iter().enumerate() {
        if i < n_est && !est_entries[i].trainable {
            continue;
        }
        let numeric = central_difference(
            |probe| {
                let mut vals = inputs.clone();
                vals[i] = probe.clone();
                let mut t = Tape::new();
                let (l, _) = build(&vals, &mut t)?;
                Ok::<f64, NumericsError>(t.scalar(l))
            },
            &inputs[i],
            DEFAULT_STEP,
        )?;
        let err = max_relative_error(&grads.wrt(*var), &numeric);
        let group = format!("{prefix}/{}", names[i]);
        match results.iter_mut().find(|r| r.group == group) {
            Some(r) => {
                r.scalars += inputs[i].len();
                r.max_rel_err = r.max_rel_err.max(err);
            }
            None => results.push(GroupResult {
                group,
                scalars: inputs[i].len(),
                max_rel_err: err,
            }),
        }
    }
    Ok(results)
}

/// Moves every trainable tensor and running buffer off its init value so
/// zero-initialized heads do not hide broken rules.
fn perturbed(mut est: Estimator, rng: &mut Rng) -> Estimator {
    for e in est.params_mut().entries_mut() {
        let (r, c) = e.value.shape();
        let lo_hi = if e.name.ends_with("running_var") { (0.5, 2.0) } else { (-0.6, 0.6) };
        let noise: Vec<f64> = (0..r * c).map(|_| rng.uniform_range(lo_hi.0, lo_hi.1)).collect();
        let noise = Matrix::new(r, c, noise).expect("shape from an existing tensor");
        e.value = if e.name.ends_with("running_var") {
            noise
        } else {
            e.value.zip_map(&noise, |a, b| a + b)
        };
    }
    est
}
