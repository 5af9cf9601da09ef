use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use simunc_core::ablation::{estimator_sweep, run_ablation, stage_grid};
use simunc_core::embeddings::{check_disjoint, EmbeddingDataset, Split};
use simunc_core::evaluation::evaluate;
use simunc_core::gradient_suite::run_suite;
use simunc_core::numerics::GradFault;
use simunc_core::trainer::{run, EstimatorChoice, TrainState};

use crate::config::{RunConfig, EFFECTIVE_CONFIG};
use crate::error::CliError;

pub const BASE_FILE: &str = "base.emb";
pub const NOVEL_FILE: &str = "novel.emb";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const EVAL_TABLE_FILE: &str = "eval_report.txt";
pub const EVAL_SUMMARY_FILE: &str = "eval_summary.csv";
pub const EVAL_ACCURACIES_FILE: &str = "eval_accuracies.csv";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const GRADCHECK_FILE: &str = "gradcheck.csv";

/// Creates `dir` and echoes the effective config into it.
pub fn prepare_output(cfg: &RunConfig, dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    write(&dir.join(EFFECTIVE_CONFIG), &cfg.to_toml())
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(CliError::io(path))
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(CliError::io(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Base and novel splits for run seed `seed`.
pub fn load_data(cfg: &RunConfig, seed: u64) -> Result<(EmbeddingDataset, EmbeddingDataset), CliError> {
    let d = &cfg.data;
    let (base, novel) = if let Some(s) = &d.synthetic {
        s.spec(seed).generate_split(s.base_classes)?
    } else if let (Some(b), Some(n)) = (&d.base, &d.novel) {
        (EmbeddingDataset::load(b, Split::Base)?, EmbeddingDataset::load(n, Split::Novel)?)
    } else {
        return Err(CliError::Config(
            "no data source: set data.base and data.novel, or add [data.synthetic]".into(),
        ));
    };
    check_disjoint(&base, &novel)?;
    Ok((base, novel))
}

pub fn gen(cfg: &RunConfig, out: &Path) -> Result<Vec<(PathBuf, String)>, CliError> {
    let s = cfg
        .data
        .synthetic
        .as_ref()
        .ok_or_else(|| CliError::Config("gen needs a [data.synthetic] section".into()))?;
    let (base, novel) = s.spec(cfg.seed).generate_split(s.base_classes)?;
    prepare_output(cfg, out)?;
    let mut digests = Vec::new();
    for (name, ds) in [(BASE_FILE, &base), (NOVEL_FILE, &novel)] {
        let path = out.join(name);
        ds.save(&path)?;
        let digest = sha256_file(&path)?;
        println!("sha256 {digest}  {}", path.display());
        digests.push((path, digest));
    }
    Ok(digests)
}

pub fn train(cfg: &RunConfig, out: &Path) -> Result<TrainState, CliError> {
    let (base, _) = load_data(cfg, cfg.seed)?;
    let tc = cfg.train_config();
    tc.validate_for(&base)?;
    prepare_output(cfg, out)?;
    let (state, log) = run(&tc, &base)?;
    write(&out.join(CHECKPOINT_FILE), &state.to_checkpoint())?;
    write(&out.join(TRAIN_LOG_FILE), &log.to_csv())?;
    println!(
        "trained {} stage-1 and {} stage-2 steps; checkpoint {}",
        state.stage1_steps,
        state.stage2_steps,
        out.join(CHECKPOINT_FILE).display()
    );
    Ok(state)
}

pub fn eval(cfg: &RunConfig, checkpoint: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let ckpt = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| out.join(CHECKPOINT_FILE));
    let text = fs::read_to_string(&ckpt).map_err(CliError::io(&ckpt))?;
    let state = TrainState::from_checkpoint(&text)?;
    let (_, novel) = load_data(cfg, cfg.seed)?;
    if novel.dim() != state.dim() {
        return Err(CliError::Data(format!(
            "novel embeddings have dim {}, checkpoint expects {}",
            novel.dim(),
            state.dim()
        )));
    }
    let shared: Vec<u32> = novel.labels().into_iter().filter(|l| state.base_labels().contains(l)).collect();
    if !shared.is_empty() {
        return Err(CliError::Data(format!("novel labels {shared:?} were seen in training")));
    }
    prepare_output(cfg, out)?;
    let report = evaluate(&state, &novel, &cfg.eval_config_for(cfg.seed))?;
    let table = report.table();
    print!("{table}");
    write(&out.join(EVAL_TABLE_FILE), &table)?;
    let summary = report.summary_csv();
    print!("{}", summary.lines().nth(1).map(|l| format!("{l}\n")).unwrap_or_default());
    write(&out.join(EVAL_SUMMARY_FILE), &summary)?;
    if cfg.eval.dump_accuracies {
        write(&out.join(EVAL_ACCURACIES_FILE), &report.accuracies_csv())?;
    }
    Ok(())
}

pub fn ablate(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    if cfg.estimator == EstimatorChoice::None {
        return Err(CliError::Config("ablate needs an estimator for the stage grid".into()));
    }
    if !cfg.has_data_source() {
        return Err(CliError::Config("ablate needs a data source".into()));
    }
    let mut rows = stage_grid(cfg.estimator);
    rows.extend(estimator_sweep(&cfg.ablation.estimators));
    // Schema check against the first seed's data before any training.
    let (base, _) = load_data(cfg, cfg.ablation.seeds[0])?;
    for row in &rows {
        row.cell.apply(&cfg.train_config()).validate_for(&base)?;
    }
    prepare_output(cfg, out)?;
    let mut data_err = None;
    let table = run_ablation(&cfg.train_config(), rows, &cfg.ablation.seeds, |seed| {
        match load_data(cfg, seed) {
            Ok((b, n)) => Ok((b, n, cfg.eval_config_for(seed))),
            Err(e) => {
                let msg = e.to_string();
                data_err = Some(e);
                Err(simunc_core::trainer::TrainError::Data(msg).into())
            }
        }
    });
    if let Some(e) = data_err {
        return Err(e);
    }
    let csv = table?.to_csv();
    print!("{csv}");
    write(&out.join(ABLATION_FILE), &csv)
}

pub fn gradcheck(cfg: &RunConfig, fault: Option<GradFault>, out: Option<&Path>) -> Result<(), CliError> {
    let report = run_suite(&cfg.gradcheck, fault)?;
    let table = report.table();
    print!("{table}");
    if let Some(dir) = out {
        prepare_output(cfg, dir)?;
        write(&dir.join(GRADCHECK_FILE), &table)?;
    }
    if report.passed() {
        println!("gradcheck passed: worst relative error {:.3e}", report.worst());
        Ok(())
    } else {
        Err(CliError::GradcheckFailed {
            worst: report.worst(),
            tolerance: report.tolerance,
        })
    }
}
