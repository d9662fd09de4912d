//! End-to-end command-line runs on a tiny synthetic dataset.

use std::fs;
use std::path::{Path, PathBuf};

use pignet::cli::run;

const CONFIG: &str = r#"
[model]
inception_plan = [8, 16]
head_widths = [16, 8]
input_tnet = { conv = [8, 16], fc = [16, 8] }
feature_tnet = { conv = [8, 16], fc = [16, 8] }

[baseline]
conv_widths = [8, 16, 32]
head_widths = [16]
input_tnet = { conv = [8, 16], fc = [16, 8] }
feature_tnet = { conv = [8, 16], fc = [16, 8] }

[train]
epochs = 2
batch_size = 4
points = 64
seed = 5

[augment]
enabled = false
"#;

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        fs::write(root.join("run.toml"), CONFIG).unwrap();
        Self { _dir: dir, root }
    }

    fn run(&self, args: &[&str]) -> i32 {
        let cfg = self.root.join("run.toml");
        let data = self.root.join("data");
        let out = self.root.join("runs");
        let mut full: Vec<String> = vec!["pignet".into()];
        full.extend(args.iter().map(|s| s.to_string()));
        full.extend([
            "--config".into(),
            cfg.display().to_string(),
            "--data-root".into(),
            data.display().to_string(),
            "--out".into(),
            out.display().to_string(),
        ]);
        run(full)
    }

    /// Run directories, oldest first.
    fn runs(&self) -> Vec<PathBuf> {
        let mut dirs: Vec<PathBuf> = fs::read_dir(self.root.join("runs"))
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        dirs.sort_by_key(|p| fs::metadata(p).unwrap().modified().unwrap());
        dirs
    }

    fn latest_with(&self, file: &str) -> PathBuf {
        self.runs()
            .into_iter()
            .rev()
            .find(|d| d.join(file).exists())
            .unwrap_or_else(|| panic!("no run directory contains {file}"))
    }
}

fn lines(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count()
}

#[test]
fn synth_train_eval_predict_inspect() {
    let ws = Workspace::new();
    assert_eq!(ws.run(&["synth", "--shapes", "lamp", "--count", "4", "--test-count", "2", "--points", "64"]), 0);
    assert!(ws.root.join("data/lamp/train.txt").exists());
    assert_eq!(lines(&ws.root.join("data/lamp/train.txt")), 4);

    assert_eq!(ws.run(&["train"]), 0);
    let trained = ws.latest_with("model.ckpt");
    assert_eq!(lines(&trained.join("history.tsv")), 3);
    let saved = fs::read_to_string(trained.join("config.toml")).unwrap();
    assert!(saved.contains("num_parts = 3"), "{saved}");
    let ckpt = trained.join("model.ckpt");
    let ckpt = ckpt.to_str().unwrap();

    assert_eq!(ws.run(&["eval", "--checkpoint", ckpt]), 0);
    let eval = ws.latest_with("report.tsv");
    assert_eq!(lines(&eval.join("report.tsv")), 3);
    assert!(fs::read_to_string(eval.join("summary.txt")).unwrap().contains("instance mIoU"));

    assert_eq!(ws.run(&["predict", "--checkpoint", ckpt, "--limit", "1"]), 0);
    let ply_dir = ws.latest_with("ply").join("ply");
    let plys: Vec<_> = fs::read_dir(&ply_dir).unwrap().collect();
    assert_eq!(plys.len(), 1);

    assert_eq!(ws.run(&["train", "--baseline"]), 0);
    let base = ws.latest_with("model.ckpt").join("model.ckpt");
    assert_ne!(base.to_str().unwrap(), ckpt);
    assert_eq!(
        ws.run(&[
            "robustness",
            "--checkpoint",
            ckpt,
            "--baseline-checkpoint",
            base.to_str().unwrap(),
            "--densities",
            "32,64",
            "--sigmas",
            "0,0.01",
        ]),
        0
    );
    // header plus two densities for each model
    assert_eq!(lines(&ws.latest_with("robustness.tsv").join("robustness.tsv")), 5);

    assert_eq!(ws.run(&["inspect"]), 0);
}

#[test]
fn unknown_config_key_exits_two() {
    let ws = Workspace::new();
    fs::write(ws.root.join("run.toml"), "[train]\nlearnin_rate = 0.1\n").unwrap();
    assert_eq!(ws.run(&["inspect"]), 2);
}

#[test]
fn invalid_value_exits_two() {
    let ws = Workspace::new();
    fs::write(ws.root.join("run.toml"), "[model]\ninception_plan = [7]\n").unwrap();
    assert_eq!(ws.run(&["inspect"]), 2);
}

#[test]
fn missing_data_root_exits_one() {
    let ws = Workspace::new();
    assert_eq!(ws.run(&["train"]), 1);
    assert!(!ws.root.join("runs").exists());
}

#[test]
fn missing_checkpoint_exits_one() {
    let ws = Workspace::new();
    assert_eq!(ws.run(&["synth", "--count", "2", "--points", "32"]), 0);
    let missing = ws.root.join("nope.ckpt");
    assert_eq!(ws.run(&["eval", "--checkpoint", missing.to_str().unwrap()]), 1);
}
