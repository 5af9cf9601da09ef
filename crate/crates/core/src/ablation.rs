//! Stage-uncertainty grid and estimator sweep over shared seeds.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::embeddings::{format_real, EmbeddingDataset, SynthSpec};
use crate::evaluation::{evaluate, EvalConfig, EvalError, EvalReport};
use crate::trainer::{run, EstimatorChoice, TrainConfig, TrainError, TrainState};

/// Base/novel class counts of the heteroscedastic benchmark.
pub const BENCHMARK_BASE_CLASSES: usize = 20;
pub const BENCHMARK_NOVEL_CLASSES: usize = 10;

/// 20 base plus 10 novel classes in 64 dimensions with per-class noise
/// scales uniform in `[0.05, 0.5]`. The mean scale keeps 5-way 1-shot
/// nearest-prototype accuracy on raw embeddings well below ceiling
/// (about 77%).
pub fn benchmark_spec(seed: u64) -> SynthSpec {
    SynthSpec {
        num_classes: BENCHMARK_BASE_CLASSES + BENCHMARK_NOVEL_CLASSES,
        dim: 64,
        samples_per_class: 40,
        mean_scale: 0.15,
        noise_lo: 0.05,
        noise_hi: 0.5,
        seed,
    }
}

#[derive(Debug, thiserror::Error)]
pub enum AblationError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// One training recipe of the sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Cell {
    pub stage1_uncertainty: bool,
    pub stage2_uncertainty: bool,
    pub estimator: EstimatorChoice,
}

impl Cell {
    pub fn apply(&self, template: &TrainConfig) -> TrainConfig {
        let mut cfg = template.clone();
        cfg.stage1.uncertainty = self.stage1_uncertainty;
        cfg.stage2.uncertainty = self.stage2_uncertainty;
        cfg.estimator = self.estimator;
        cfg
    }
}

/// A named row of one of the two comparison tables.
#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub table: &'static str,
    pub model: String,
    pub cell: Cell,
}

/// Models 3 to 6: uncertainty off/on per stage, all rows with `estimator`.
pub fn stage_grid(estimator: EstimatorChoice) -> Vec<Row> {
    let none_if_idle = |s1: bool, s2: bool| if s1 || s2 { estimator } else { EstimatorChoice::None };
    [(3, false, false), (4, true, false), (5, false, true), (6, true, true)]
        .into_iter()
        .map(|(m, s1, s2)| Row {
            table: "stage_grid",
            model: format!("model{m}"),
            cell: Cell {
                stage1_uncertainty: s1,
                stage2_uncertainty: s2,
                estimator: none_if_idle(s1, s2),
            },
        })
        .collect()
}

/// Baseline plus one row per estimator design. The FC design is tied to a
/// single way count, so it only runs in the episodic stage.
pub fn estimator_sweep(kinds: &[EstimatorChoice]) -> Vec<Row> {
    let mut rows = vec![Row {
        table: "estimator_sweep",
        model: "baseline".into(),
        cell: Cell {
            stage1_uncertainty: false,
            stage2_uncertainty: false,
            estimator: EstimatorChoice::None,
        },
    }];
    for &k in kinds.iter().filter(|k| **k != EstimatorChoice::None) {
        rows.push(Row {
            table: "estimator_sweep",
            model: serde_name(k).to_string(),
            cell: Cell {
                stage1_uncertainty: k != EstimatorChoice::Fc,
                stage2_uncertainty: true,
                estimator: k,
            },
        });
    }
    rows
}

pub fn serde_name(e: EstimatorChoice) -> &'static str {
    match e {
        EstimatorChoice::Graph => "graph",
        EstimatorChoice::Conv => "conv",
        EstimatorChoice::Fc => "fc",
        EstimatorChoice::None => "none",
    }
}

/// Everything one trained cell produced.
#[derive(Clone, Debug)]
pub struct CellRun {
    pub state: TrainState,
    pub report: EvalReport,
}

pub fn run_cell(
    template: &TrainConfig,
    cell: Cell,
    base: &EmbeddingDataset,
    novel: &EmbeddingDataset,
    eval: &EvalConfig,
) -> Result<CellRun, AblationError> {
    let (state, _) = run(&cell.apply(template), base)?;
    let report = evaluate(&state, novel, eval)?;
    Ok(CellRun { state, report })
}

/// Result table keyed by (cell, seed); a cell shared by both tables is
/// trained once per seed.
#[derive(Clone, Debug, Default)]
pub struct AblationTable {
    pub rows: Vec<Row>,
    pub seeds: Vec<u64>,
    pub results: BTreeMap<(Cell, u64), (f64, f64)>,
}

impl AblationTable {
    pub fn mean_over_seeds(&self, cell: Cell) -> f64 {
        let vals: Vec<f64> = self
            .seeds
            .iter()
            .filter_map(|s| self.results.get(&(cell, *s)).map(|r| r.0))
            .collect();
        vals.iter().sum::<f64>() / vals.len().max(1) as f64
    }

    /// `table,model,stage1,stage2,estimator,seed,mean,ci95`, then one
    /// `all` line per row averaging the seeds.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("table,model,stage1,stage2,estimator,seed,mean,ci95\n");
        let flag = |b: bool| if b { "wU" } else { "woU" };
        for row in &self.rows {
            let c = row.cell;
            let head = format!(
                "{},{},{},{},{}",
                row.table,
                row.model,
                flag(c.stage1_uncertainty),
                flag(c.stage2_uncertainty),
                serde_name(c.estimator)
            );
            for s in &self.seeds {
                if let Some((m, ci)) = self.results.get(&(c, *s)) {
                    let _ = writeln!(out, "{head},{s},{},{}", format_real(*m), format_real(*ci));
                }
            }
            let _ = writeln!(out, "{head},all,{},", format_real(self.mean_over_seeds(c)));
        }
        out
    }
}

/// Runs every distinct cell of `rows` for every seed. `data(seed)` yields
/// the base and novel splits and the evaluation protocol of that seed.
pub fn run_ablation(
    template: &TrainConfig,
    rows: Vec<Row>,
    seeds: &[u64],
    mut data: impl FnMut(u64) -> Result<(EmbeddingDataset, EmbeddingDataset, EvalConfig), AblationError>,
) -> Result<AblationTable, AblationError> {
    let mut table = AblationTable {
        rows,
        seeds: seeds.to_vec(),
        results: BTreeMap::new(),
    };
    for &seed in seeds {
        let (base, novel, eval) = data(seed)?;
        let mut cfg = template.clone();
        cfg.seed = seed;
        for row in &table.rows {
            if table.results.contains_key(&(row.cell, seed)) {
                continue;
            }
            let r = run_cell(&cfg, row.cell, &base, &novel, &eval)?;
            table.results.insert((row.cell, seed), (r.report.mean, r.report.ci95));
        }
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::{Stage1Config, Stage2Config};

    #[test]
    fn grid_has_four_cells_and_one_baseline_shape() {
        let g = stage_grid(EstimatorChoice::Graph);
        assert_eq!(g.len(), 4);
        assert_eq!(g[0].cell.estimator, EstimatorChoice::None);
        let s = estimator_sweep(&[EstimatorChoice::Conv, EstimatorChoice::Graph, EstimatorChoice::Fc]);
        assert_eq!(s.len(), 4);
        assert_eq!(s[0].cell, g[0].cell);
        assert_eq!(s[2].cell, g[3].cell);
        assert!(!s[3].cell.stage1_uncertainty);
    }

    #[test]
    fn shared_cells_report_identical_numbers() {
        let template = TrainConfig {
            stage1: Stage1Config {
                epochs: 1,
                batch_size: 40,
                ..Stage1Config::default()
            },
            stage2: Stage2Config {
                episodes_per_epoch: 3,
                epochs: 1,
                queries: 5,
                ..Stage2Config::default()
            },
            groups: 8,
            ..TrainConfig::default()
        };
        let mut rows = stage_grid(EstimatorChoice::Graph);
        rows.extend(estimator_sweep(&[EstimatorChoice::Graph]));
        let table = run_ablation(&template, rows, &[1, 2], |seed| {
            let mut spec = benchmark_spec(seed);
            spec.dim = 16;
            spec.samples_per_class = 12;
            let (b, n) = spec.generate_split(BENCHMARK_BASE_CLASSES).unwrap();
            let eval = EvalConfig {
                episodes: 20,
                queries: 5,
                seed: 100 + seed,
                ..EvalConfig::default()
            };
            Ok((b, n, eval))
        })
        .unwrap();
        // 4 grid cells; the sweep's two rows coincide with cells 3 and 6.
        assert_eq!(table.results.len(), 8);
        let csv = table.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 1 + 6 * 3);
        let tail = |l: &str| l.split(',').skip(5).collect::<Vec<_>>().join(",");
        assert_eq!(tail(lines[1]), tail(lines[13]));
        assert_eq!(tail(lines[10]), tail(lines[16]));
    }
}
