use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_simunc");

/// Small synthetic run that trains in well under a second.
const SMALL: &str = r#"
seed = 4
estimator = "graph"

[data.synthetic]
num_classes = 9
base_classes = 6
dim = 16
samples_per_class = 10
mean_scale = 0.4
noise_lo = 0.05
noise_hi = 0.5

[train]
groups = 4

[train.stage1]
epochs = 1
batch_size = 16
uncertainty = true

[train.stage2]
episodes_per_epoch = 4
epochs = 1
way = 3
queries = 4
uncertainty = true

[eval]
episodes = 30
way = 3
queries = 4
"#;

fn simunc(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("SIMUNC_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("run.toml");
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_for_every_subcommand() {
    assert_eq!(code(&simunc(&["--help"])), 0);
    for sub in ["gen", "train", "eval", "ablate", "gradcheck"] {
        let o = simunc(&[sub, "--help"]);
        assert_eq!(code(&o), 0, "{sub}");
        assert!(String::from_utf8_lossy(&o.stdout).contains("Usage"), "{sub}");
    }
}

#[test]
fn invalid_flag_is_a_usage_error() {
    let o = simunc(&["train", "--no-such-flag"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(code(&simunc(&["frobnicate"])), 1);
    assert_eq!(code(&simunc(&[])), 1);
}

#[test]
fn bad_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "unknown_key = 1\n");
    assert_eq!(code(&simunc(&["train", "-c", &cfg])), 2);
    let cfg = write_config(dir.path(), "seed = \"x\"\n");
    assert_eq!(code(&simunc(&["train", "-c", &cfg])), 2);
    let cfg = write_config(dir.path(), SMALL);
    assert_eq!(code(&simunc(&["train", "-c", &cfg, "--set", "train.groups=5"])), 2);
    assert_eq!(code(&simunc(&["train", "-c", &cfg, "--set", "train.stage2.lr=1"])), 2);
    // Nothing is written when the config is rejected.
    let out = dir.path().join("never");
    simunc(&["train", "-c", &cfg, "--set", "train.groups=5", "--out", s(&out)]);
    assert!(!out.exists());
}

#[test]
fn missing_files_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[data]\nbase = \"/nonexistent/b.emb\"\nnovel = \"/nonexistent/n.emb\"\n");
    let o = simunc(&["train", "-c", &cfg, "--out", s(dir.path())]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("/nonexistent/b.emb"));
    assert_eq!(code(&simunc(&["train", "-c", "/nonexistent/run.toml"])), 3);
    let cfg = write_config(dir.path(), SMALL);
    let o = simunc(&["eval", "-c", &cfg, "--checkpoint", "/nonexistent/x.ckpt"]);
    assert_eq!(code(&o), 3);
    let garbage = dir.path().join("bad.ckpt");
    fs::write(&garbage, "not a checkpoint").unwrap();
    assert_eq!(code(&simunc(&["eval", "-c", &cfg, "--checkpoint", s(&garbage)])), 3);
}

#[test]
fn gen_is_deterministic_and_reloadable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let oa = simunc(&["gen", "-c", &cfg, "--out", s(&a)]);
    let ob = simunc(&["gen", "-c", &cfg, "--out", s(&b)]);
    assert_eq!(code(&oa), 0);
    let digests = |o: &Output| -> Vec<String> {
        String::from_utf8_lossy(&o.stdout)
            .lines()
            .map(|l| l.split_whitespace().nth(1).unwrap().to_string())
            .collect()
    };
    assert_eq!(digests(&oa).len(), 2);
    assert_eq!(digests(&oa), digests(&ob));
    assert_eq!(fs::read(a.join("base.emb")).unwrap(), fs::read(b.join("base.emb")).unwrap());
    let other = simunc(&["gen", "-c", &cfg, "--out", s(&b), "--set", "seed=5"]);
    assert_ne!(digests(&oa), digests(&other));

    // Training from the written files matches training from the generator.
    let files = format!(
        "seed = 4\n[data]\nbase = \"{}\"\nnovel = \"{}\"\n\n{}",
        s(&a.join("base.emb")),
        s(&a.join("novel.emb")),
        &SMALL[SMALL.find("[train]").unwrap()..]
    );
    let cfg_files = dir.path().join("files.toml");
    fs::write(&cfg_files, files).unwrap();
    let t1 = dir.path().join("t1");
    let t2 = dir.path().join("t2");
    assert_eq!(code(&simunc(&["train", "-c", &cfg, "--out", s(&t1)])), 0);
    assert_eq!(code(&simunc(&["train", "-c", s(&cfg_files), "--out", s(&t2)])), 0);
    assert_eq!(
        fs::read(t1.join("checkpoint.ckpt")).unwrap(),
        fs::read(t2.join("checkpoint.ckpt")).unwrap()
    );
}

#[test]
fn zero_epochs_write_an_initialized_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("o");
    let o = simunc(&[
        "train", "-c", &cfg, "--out", s(&out), "--set", "train.stage1.epochs=0", "--set", "train.stage2.epochs=0",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let ckpt = fs::read_to_string(out.join("checkpoint.ckpt")).unwrap();
    assert!(ckpt.starts_with("SIMUNC-CKPT v1"));
    assert_eq!(fs::read_to_string(out.join("train_log.csv")).unwrap().lines().count(), 1);
    let echoed = fs::read_to_string(out.join("effective_config.toml")).unwrap();
    assert!(echoed.contains("epochs = 0"), "{echoed}");
}

#[test]
fn rerun_is_byte_identical_at_any_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let runs: Vec<_> = ["1", "4"]
        .iter()
        .map(|t| {
            let out = dir.path().join(format!("t{t}"));
            assert_eq!(code(&simunc(&["--threads", t, "train", "-c", &cfg, "--out", s(&out)])), 0);
            let o = simunc(&["--threads", t, "eval", "-c", &cfg, "--out", s(&out), "--dump-accuracies"]);
            assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
            out
        })
        .collect();
    for f in ["checkpoint.ckpt", "train_log.csv", "eval_report.txt", "eval_summary.csv", "eval_accuracies.csv", "effective_config.toml"] {
        assert_eq!(fs::read(runs[0].join(f)).unwrap(), fs::read(runs[1].join(f)).unwrap(), "{f}");
    }
    assert_eq!(fs::read_to_string(runs[0].join("eval_accuracies.csv")).unwrap().lines().count(), 31);
}

#[test]
fn single_episode_eval_is_flagged_degenerate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("o");
    assert_eq!(code(&simunc(&["train", "-c", &cfg, "--out", s(&out)])), 0);
    let o = simunc(&["eval", "-c", &cfg, "--out", s(&out), "--set", "eval.episodes=1"]);
    assert_eq!(code(&o), 0);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("n/a (single episode)"), "{stdout}");
    let summary = fs::read_to_string(out.join("eval_summary.csv")).unwrap();
    let line: Vec<&str> = summary.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(line[1].parse::<f64>().unwrap(), 0.0);
    assert_eq!(line[2], "1");
}

#[test]
fn output_dir_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let from_cfg = dir.path().join("cfg_out");
    let from_env = dir.path().join("env_out");
    let from_flag = dir.path().join("flag_out");
    let text = format!("output_dir = \"{}\"\n{SMALL}", s(&from_cfg));
    let cfg = write_config(dir.path(), &text);
    let run = |extra: &[&str]| {
        let mut args = vec!["gen", "-c", cfg.as_str()];
        args.extend_from_slice(extra);
        let o = Command::new(BIN).args(&args).env("SIMUNC_OUT_DIR", &from_env).output().unwrap();
        assert_eq!(code(&o), 0);
    };
    run(&["--out", s(&from_flag)]);
    assert!(from_flag.join("base.emb").exists() && !from_cfg.exists());
    run(&[]);
    assert!(from_cfg.join("base.emb").exists() && !from_env.exists());
    let plain = write_config(dir.path(), SMALL);
    let o = Command::new(BIN).args(["gen", "-c", &plain]).env("SIMUNC_OUT_DIR", &from_env).output().unwrap();
    assert_eq!(code(&o), 0);
    assert!(from_env.join("novel.emb").exists());
}

#[test]
fn gradcheck_passes_and_catches_an_injected_fault() {
    let o = simunc(&["gradcheck"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.starts_with("group,scalars,max_rel_err,status"));
    assert!(stdout.contains("graph/wu2"));
    let o = simunc(&["gradcheck", "--inject-fault", "softplus"]);
    assert_eq!(code(&o), 4);
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL"));
}

#[test]
fn ablate_writes_every_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("o");
    let o = simunc(&[
        "ablate", "-c", &cfg, "--out", s(&out), "--set", "ablation.seeds=[1, 2]", "--set", "ablation.estimators=[\"conv\", \"graph\"]",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    // 4 grid rows plus baseline, conv and graph, each with 2 seeds and a mean line.
    assert_eq!(csv.lines().count(), 1 + 7 * 3);
    let rows: Vec<&str> = csv.lines().collect();
    let tail = |l: &str| l.split(',').skip(5).collect::<Vec<_>>().join(",");
    assert_eq!(tail(rows[1]), tail(rows[13]));
    let o = simunc(&["ablate", "-c", &cfg, "--out", s(&out), "--set", "estimator=none"]);
    assert_eq!(code(&o), 2);
}
