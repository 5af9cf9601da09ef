//! Similarity-uncertainty estimators.
//!
//! All three kinds map an `N x L` relation matrix to an `N x 1` column of
//! non-negative spreads (softplus of a raw head output):
//!
//! * `Graph`: attention-normalized message passing over the N nodes,
//!   then a per-node head. Parameter shapes depend only on `L`.
//! * `Conv`: the same per-node head applied to each row independently.
//! * `Fc`: the flattened `N * L` matrix through one hidden layer; bound to
//!   the way count it was built for.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{CheckpointError, TensorFile};
use crate::numerics::{
    batch_norm, fan_in_uniform, BatchStats, Matrix, Mode, NumericsError, ParamSet, Rng,
    RunningStats, Tape, Var, DEFAULT_LEAKY_SLOPE,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Graph,
    Conv,
    Fc,
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EstimatorKind::Graph => "graph",
            EstimatorKind::Conv => "conv",
            EstimatorKind::Fc => "fc",
        })
    }
}

impl FromStr for EstimatorKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "graph" => Ok(EstimatorKind::Graph),
            "conv" => Ok(EstimatorKind::Conv),
            "fc" => Ok(EstimatorKind::Fc),
            other => Err(format!("unknown estimator kind `{other}`")),
        }
    }
}

/// Output of one estimator forward pass.
#[derive(Debug)]
pub struct SigmaPass {
    /// `N x 1`, every entry >= 0.
    pub sigma: Var,
    /// Train-mode batch statistics keyed by the running-mean entry index.
    pub bn_updates: Vec<(usize, BatchStats)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Estimator {
    kind: EstimatorKind,
    groups: usize,
    /// Way count the FC estimator is tied to.
    way: Option<usize>,
    slope: f64,
    params: ParamSet,
}

const BN_LAYERS_GRAPH: [&str; 3] = ["wy1", "wy2", "wu1"];

fn push_bn(params: &mut ParamSet, prefix: &str, width: usize) {
    params.push(format!("{prefix}.bn.gamma"), Matrix::filled(1, width, 1.0), true);
    params.push(format!("{prefix}.bn.beta"), Matrix::zeros(1, width), true);
    let rs = RunningStats::new(width);
    params.push(format!("{prefix}.bn.running_mean"), rs.mean, false);
    params.push(format!("{prefix}.bn.running_var"), rs.var, false);
}

impl Estimator {
    /// Fresh parameters. Linear maps are fan-in uniform, biases zero, the
    /// final projection zero so every spread starts at `ln 2`.
    pub fn new(
        kind: EstimatorKind,
        groups: usize,
        way: Option<usize>,
        rng: &mut Rng,
    ) -> Result<Self, NumericsError> {
        if groups == 0 {
            return Err(NumericsError::Precondition("estimator needs L >= 1".into()));
        }
        let l = groups;
        let mut p = ParamSet::new();
        let way = match kind {
            EstimatorKind::Graph => {
                for name in ["phi1", "phi2"] {
                    p.push(format!("{name}.weight"), fan_in_uniform(rng, l, l), true);
                    p.push(format!("{name}.bias"), Matrix::zeros(1, l), true);
                }
                p.push("wv.weight", fan_in_uniform(rng, l, l), true);
                for name in BN_LAYERS_GRAPH {
                    p.push(format!("{name}.weight"), fan_in_uniform(rng, l, l), true);
                    push_bn(&mut p, name, l);
                }
                p.push("wu2.weight", Matrix::zeros(l, 1), true);
                p.push("wu2.bias", Matrix::zeros(1, 1), true);
                None
            }
            EstimatorKind::Conv => {
                p.push("c1.weight", fan_in_uniform(rng, l, l), true);
                p.push("c1.bias", Matrix::zeros(1, l), true);
                p.push("c2.weight", Matrix::zeros(l, 1), true);
                p.push("c2.bias", Matrix::zeros(1, 1), true);
                None
            }
            EstimatorKind::Fc => {
                let n = way.filter(|&n| n > 0).ok_or_else(|| {
                    NumericsError::Precondition("FC estimator needs a fixed way count".into())
                })?;
                p.push("f1.weight", fan_in_uniform(rng, n * l, l), true);
                p.push("f1.bias", Matrix::zeros(1, l), true);
                p.push("f2.weight", Matrix::zeros(l, n), true);
                p.push("f2.bias", Matrix::zeros(1, n), true);
                Some(n)
            }
        };
        Ok(Self {
            kind,
            groups,
            way,
            slope: DEFAULT_LEAKY_SLOPE,
            params: p,
        })
    }

    pub fn kind(&self) -> EstimatorKind {
        self.kind
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn way(&self) -> Option<usize> {
        self.way
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Folds train-mode batch statistics into the running buffers.
    pub fn apply_bn_updates(&mut self, updates: &[(usize, BatchStats)], momentum: f64) {
        for (mean_idx, stats) in updates {
            let mut rs = RunningStats {
                mean: self.params.value(*mean_idx).clone(),
                var: self.params.value(mean_idx + 1).clone(),
            };
            rs.update(stats, momentum);
            *self.params.value_mut(*mean_idx) = rs.mean;
            *self.params.value_mut(mean_idx + 1) = rs.var;
        }
    }

    /// Spreads for the `N x L` relation node `relations`, with `vars` the
    /// result of binding [`Estimator::params`] on the same tape.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        relations: Var,
        mode: Mode,
    ) -> Result<SigmaPass, NumericsError> {
        let (n, l) = tape.value(relations).shape();
        if l != self.groups {
            return Err(NumericsError::Shape {
                op: "estimator input",
                left: (n, l),
                right: (n, self.groups),
            });
        }
        debug_assert_eq!(vars.len(), self.params.len());
        let mut bn_updates = Vec::new();
        let raw = match self.kind {
            EstimatorKind::Graph => {
                if mode == Mode::Train && n < 2 {
                    return Err(NumericsError::Precondition(format!(
                        "graph estimator in train mode needs N >= 2 nodes, got {n}"
                    )));
                }
                self.graph_raw(tape, vars, relations, mode, &mut bn_updates)?
            }
            EstimatorKind::Conv => {
                let h = tape.matmul(relations, vars[0])?;
                let h = tape.add_row(h, vars[1])?;
                let h = tape.leaky_relu(h, self.slope)?;
                let out = tape.matmul(h, vars[2])?;
                tape.add_row(out, vars[3])?
            }
            EstimatorKind::Fc => {
                let way = self.way.expect("fc estimator has a way count");
                if n != way {
                    return Err(NumericsError::Shape {
                        op: "fc estimator",
                        left: (n, l),
                        right: (way, l),
                    });
                }
                let flat = tape.reshape(relations, 1, n * l)?;
                let h = tape.matmul(flat, vars[0])?;
                let h = tape.add_row(h, vars[1])?;
                let h = tape.leaky_relu(h, self.slope)?;
                let out = tape.matmul(h, vars[2])?;
                let out = tape.add_row(out, vars[3])?;
                tape.transpose(out)?
            }
        };
        let sigma = tape.softplus(raw)?;
        Ok(SigmaPass { sigma, bn_updates })
    }

    fn conv_bn_block(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        input: Var,
        prefix: &str,
        mode: Mode,
        bn_updates: &mut Vec<(usize, BatchStats)>,
    ) -> Result<Var, NumericsError> {
        let idx = |suffix: &str| {
            self.params
                .index_of(&format!("{prefix}.{suffix}"))
                .expect("declared parameter")
        };
        let lin = tape.matmul(input, vars[idx("weight")])?;
        let mean_idx = idx("bn.running_mean");
        let running = RunningStats {
            mean: self.params.value(mean_idx).clone(),
            var: self.params.value(idx("bn.running_var")).clone(),
        };
        let (normed, stats) = batch_norm(
            tape,
            lin,
            vars[idx("bn.gamma")],
            vars[idx("bn.beta")],
            &running,
            mode,
        )?;
        if let Some(stats) = stats {
            bn_updates.push((mean_idx, stats));
        }
        tape.leaky_relu(normed, self.slope)
    }

    fn graph_raw(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        v: Var,
        mode: Mode,
        bn_updates: &mut Vec<(usize, BatchStats)>,
    ) -> Result<Var, NumericsError> {
        let p = |name: &str| vars[self.params.index_of(name).expect("declared parameter")];
        // Edge embeddings and affinities E(j, j') = phi1(v_j) . phi2(v_j').
        let e1 = tape.matmul(v, p("phi1.weight"))?;
        let e1 = tape.add_row(e1, p("phi1.bias"))?;
        let e2 = tape.matmul(v, p("phi2.weight"))?;
        let e2 = tape.add_row(e2, p("phi2.bias"))?;
        let e2t = tape.transpose(e2)?;
        let affinity = tape.matmul(e1, e2t)?;
        let adjacency = tape.row_softmax(affinity)?;
        // Y = G V W_v, V' = V + W_y(Y).
        let msg = tape.matmul(adjacency, v)?;
        let y = tape.matmul(msg, p("wv.weight"))?;
        let h = self.conv_bn_block(tape, vars, y, "wy1", mode, bn_updates)?;
        let h = self.conv_bn_block(tape, vars, h, "wy2", mode, bn_updates)?;
        let updated = tape.add(v, h)?;
        let u = self.conv_bn_block(tape, vars, updated, "wu1", mode, bn_updates)?;
        let out = tape.matmul(u, p("wu2.weight"))?;
        tape.add_row(out, p("wu2.bias"))
    }

    /// Plain-value forward pass.
    pub fn sigma_values(&self, relations: &Matrix, mode: Mode) -> Result<Vec<f64>, NumericsError> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape);
        let v = tape.constant(relations.clone());
        let pass = self.forward(&mut tape, &vars, v, mode)?;
        Ok(tape.value(pass.sigma).as_slice().to_vec())
    }

    pub fn to_tensor_file(&self, prefix: &str, file: &mut TensorFile) {
        file.push_meta(&format!("{prefix}kind"), self.kind);
        file.push_meta(&format!("{prefix}groups"), self.groups);
        if let Some(n) = self.way {
            file.push_meta(&format!("{prefix}way"), n);
        }
        file.push_meta(&format!("{prefix}slope"), crate::embeddings::format_real(self.slope));
        for e in self.params.entries() {
            file.tensors
                .push((format!("{prefix}{}", e.name), e.value.clone()));
        }
    }

    pub fn from_tensor_file(prefix: &str, file: &TensorFile) -> Result<Self, CheckpointError> {
        let kind_key = format!("{prefix}kind");
        let kind: EstimatorKind = file.meta(&kind_key)?.parse().map_err(|m| CheckpointError::BadMeta {
            key: kind_key.clone(),
            message: m,
        })?;
        let groups: usize = file.meta_parsed(&format!("{prefix}groups"))?;
        let way = match kind {
            EstimatorKind::Fc => Some(file.meta_parsed::<usize>(&format!("{prefix}way"))?),
            _ => None,
        };
        let slope: f64 = file.meta_parsed(&format!("{prefix}slope"))?;
        let mut est = Estimator::new(kind, groups, way, &mut Rng::new(0)).map_err(|e| {
            CheckpointError::BadMeta {
                key: format!("{prefix}groups"),
                message: e.to_string(),
            }
        })?;
        est.slope = slope;
        for e in est.params.entries_mut() {
            let full = format!("{prefix}{}", e.name);
            let m = file
                .tensor(&full)
                .ok_or_else(|| CheckpointError::MissingTensor(full.clone()))?;
            if m.shape() != e.value.shape() {
                return Err(CheckpointError::TensorShape {
                    name: full,
                    expected: e.value.shape(),
                    found: m.shape(),
                });
            }
            e.value = m.clone();
        }
        Ok(est)
    }

    /// Standalone estimator checkpoint.
    pub fn to_checkpoint(&self) -> String {
        let mut f = TensorFile::default();
        self.to_tensor_file("", &mut f);
        f.to_text()
    }

    pub fn from_checkpoint(text: &str) -> Result<Self, CheckpointError> {
        Self::from_tensor_file("", &TensorFile::parse(text)?)
    }
}
