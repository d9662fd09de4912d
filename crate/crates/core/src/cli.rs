//! Command-line front end.
//!
//! Every command writes into a fresh `<out>/run-<timestamp>/` directory that
//! starts with a copy of the effective configuration (`config.toml`).
//! Precedence: command-line flags, then the `--config` file, then defaults.
//! Exit status: 0 on success, 2 for invalid configuration or usage, 1 for
//! any other failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{load_model, save_checkpoint};
use crate::config::{Overrides, RunConfig};
use crate::data::io::{list_categories, write_dataset};
use crate::data::{load_cloud, synth_generate, DatasetSplit, PointCloud, SynthShape};
use crate::error::{Error, Result};
use crate::eval::{
    ablation_run, evaluate_split, num_parts_from_labels, prepare_eval_cloud, robustness_grid, robustness_run,
    ablation_variants, write_ply,
};
use crate::model::{predict, PigNet, PointNetBaseline, Segmenter};
use crate::train::{train_from_state, TrainState};

#[derive(Debug, Parser)]
#[command(name = "pignet", version, about = "Point-cloud part segmentation with inception feature extraction")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration ([model], [baseline], [train], [augment], [data])
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dataset root directory
    #[arg(long, global = true)]
    pub data_root: Option<PathBuf>,
    /// Category to train or evaluate
    #[arg(long, global = true)]
    pub category: Option<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    /// Points sampled per shape (default 1024)
    #[arg(long, global = true)]
    pub points: Option<usize>,
    /// Parent directory of the run directory
    #[arg(long, global = true, default_value = "runs")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one category; writes model.ckpt and history.tsv
    Train {
        /// Train the PointNet-style comparator instead
        #[arg(long)]
        baseline: bool,
    },
    /// Evaluate a checkpoint on a split; writes report.tsv and summary.txt
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Predict part labels and export colored PLY files
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// A single point file to predict instead of a split
        #[arg(long)]
        input: Option<PathBuf>,
        /// Export at most this many shapes
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Train and compare the five architecture variants; writes ablation.tsv
    Ablate {
        /// Filter counts are divided by this (1 = full width)
        #[arg(long, default_value_t = 8)]
        divisor: usize,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Density × noise robustness grid for two checkpoints; writes robustness.tsv
    Robustness {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        baseline_checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, value_delimiter = ',')]
        densities: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        sigmas: Option<Vec<f64>>,
    },
    /// Generate a synthetic labeled dataset under the data root
    Synth {
        /// Comma-separated shape kinds: lamp, chair, table
        #[arg(long, value_delimiter = ',', default_value = "lamp")]
        shapes: Vec<String>,
        /// Training shapes per kind
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        val_count: usize,
        #[arg(long, default_value_t = 2)]
        test_count: usize,
    },
    /// Print the architecture summary and parameter counts
    Inspect,
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    configure_threads();
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Usage(_) => 2,
                _ => 1,
            }
        }
    }
}

fn configure_threads() {
    if let Some(n) = std::env::var("PIGNET_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply(&Overrides {
        data_root: common.data_root.clone(),
        category: common.category.clone(),
        seed: common.seed,
        epochs: common.epochs,
        points: common.points,
    });
    cfg.validate()?;
    Ok(cfg)
}

/// Creates `<out>/run-<timestamp>[-k]/`.
pub fn create_run_dir(out: &Path) -> Result<PathBuf> {
    let stamp = chrono::Local::now().format("run-%Y%m%d-%H%M%S").to_string();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for k in 1.. {
        let name = if k == 1 { stamp.clone() } else { format!("{stamp}-{k}") };
        let dir = out.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(Error::io(&dir, e)),
        }
    }
    unreachable!()
}

fn write(dir: &Path, name: &str, text: &str) -> Result<()> {
    let p = dir.join(name);
    fs::write(&p, text).map_err(|e| Error::io(&p, e))
}

fn resolve_category(cfg: &RunConfig) -> Result<String> {
    if let Some(c) = &cfg.data.category {
        return Ok(c.clone());
    }
    let cats = list_categories(&cfg.data.root)?;
    match cats.as_slice() {
        [one] => Ok(one.clone()),
        [] => Err(Error::Usage(format!(
            "no category with a train.txt under {}",
            cfg.data.root.display()
        ))),
        many => Err(Error::Usage(format!(
            "several categories under {} ({}); choose one with --category",
            cfg.data.root.display(),
            many.join(", ")
        ))),
    }
}

fn load_split(cfg: &RunConfig, category: &str, split: &str) -> Result<Vec<PointCloud>> {
    let s = DatasetSplit::load(&cfg.data.root, category)?;
    DatasetSplit::load_clouds(s.split(split)?, cfg.data.label_base)
}

fn execute(cli: &Cli) -> Result<()> {
    let mut cfg = load_config(&cli.common)?;
    let reads_data = !matches!(cli.command, Command::Synth { .. } | Command::Inspect);
    if reads_data && !cfg.data.root.exists() {
        return Err(Error::Io {
            path: cfg.data.root.clone(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root does not exist"),
        });
    }
    match &cli.command {
        Command::Train { baseline } => cmd_train(&cli.common, &mut cfg, *baseline),
        Command::Eval { checkpoint, split } => cmd_eval(&cli.common, &cfg, checkpoint, split),
        Command::Predict {
            checkpoint,
            split,
            input,
            limit,
        } => cmd_predict(&cli.common, &cfg, checkpoint, split, input.as_deref(), *limit),
        Command::Ablate { divisor, split } => cmd_ablate(&cli.common, &cfg, *divisor, split),
        Command::Robustness {
            checkpoint,
            baseline_checkpoint,
            split,
            densities,
            sigmas,
        } => cmd_robustness(
            &cli.common,
            &cfg,
            checkpoint,
            baseline_checkpoint,
            split,
            densities.as_deref(),
            sigmas.as_deref(),
        ),
        Command::Synth {
            shapes,
            count,
            val_count,
            test_count,
        } => cmd_synth(&cli.common, &cfg, shapes, *count, *val_count, *test_count),
        Command::Inspect => cmd_inspect(&cfg),
    }
}

fn cmd_train(common: &Common, cfg: &mut RunConfig, baseline: bool) -> Result<()> {
    let category = resolve_category(cfg)?;
    cfg.train.category = Some(category.clone());
    let split = DatasetSplit::load(&cfg.data.root, &category)?;
    let train = DatasetSplit::load_clouds(&split.train, cfg.data.label_base)?;
    let val = DatasetSplit::load_clouds(&split.val, cfg.data.label_base)?;
    if !cfg.parts_explicit {
        let mut all = train.clone();
        all.extend_from_slice(&val);
        let parts = num_parts_from_labels(&all)?;
        cfg.model.num_parts = parts;
        cfg.baseline.num_parts = parts;
        cfg.parts_explicit = true;
    }
    let run = create_run_dir(&common.out)?;
    write(&run, "config.toml", &cfg.to_toml()?)?;

    let mut model: Box<dyn Segmenter> = if baseline {
        Box::new(PointNetBaseline::new(cfg.baseline.clone(), cfg.train.seed)?)
    } else {
        Box::new(PigNet::new(cfg.model.clone(), cfg.train.seed)?)
    };
    println!("{}", model.describe());
    println!(
        "category {category}: {} training shapes, {} validation shapes, {} parameters",
        train.len(),
        val.len(),
        model.count_parameters()
    );
    let mut state = TrainState::new(model.store(), cfg.train.seed);
    let history = train_from_state(model.as_mut(), &train, &val, &cfg.train, &cfg.augment, &mut state)?;
    let ckpt = run.join("model.ckpt");
    save_checkpoint(&ckpt, model.as_ref(), &state)?;
    write(&run, "history.tsv", &history.to_tsv())?;
    let last = history.epoch_loss.last().copied().unwrap_or(history.initial_loss);
    let summary = format!(
        "category: {category}\nepochs: {}\ninitial loss: {:.6}\nfinal loss: {last:.6}\ncheckpoint: {}\n",
        history.epoch_loss.len(),
        history.initial_loss,
        ckpt.display()
    );
    write(&run, "summary.txt", &summary)?;
    print!("{summary}");
    Ok(())
}

fn cmd_eval(common: &Common, cfg: &RunConfig, checkpoint: &Path, split: &str) -> Result<()> {
    let category = resolve_category(cfg)?;
    let (model, _) = load_model(checkpoint)?;
    let clouds = load_split(cfg, &category, split)?;
    if clouds.is_empty() {
        return Err(Error::Data(format!("the {split} split of {category} is empty")));
    }
    let run = create_run_dir(&common.out)?;
    write(&run, "config.toml", &cfg.to_toml()?)?;
    let report = evaluate_split(model.as_ref(), &clouds, cfg.train.points, cfg.train.seed)?;
    write(&run, "report.tsv", &report.to_tsv())?;
    let summary = format!("category: {category}\nsplit: {split}\n{}", report.summary());
    write(&run, "summary.txt", &summary)?;
    print!("{summary}");
    println!("report: {}", run.join("report.tsv").display());
    Ok(())
}

fn cmd_predict(
    common: &Common,
    cfg: &RunConfig,
    checkpoint: &Path,
    split: &str,
    input: Option<&Path>,
    limit: Option<usize>,
) -> Result<()> {
    let (model, _) = load_model(checkpoint)?;
    let clouds = match input {
        Some(p) => vec![load_cloud(p, None)?],
        None => load_split(cfg, &resolve_category(cfg)?, split)?,
    };
    let run = create_run_dir(&common.out)?;
    write(&run, "config.toml", &cfg.to_toml()?)?;
    let dir = run.join("ply");
    let take = limit.unwrap_or(clouds.len()).min(clouds.len());
    for (i, c) in clouds.iter().take(take).enumerate() {
        let prepared = prepare_eval_cloud(c, i, cfg.train.points, cfg.train.seed)?;
        let parts = predict(model.as_ref(), &prepared.to_tensor())?;
        let name = if c.id.is_empty() { format!("shape_{i}") } else { c.id.clone() };
        write_ply(&dir.join(format!("{name}.ply")), &prepared, &parts)?;
    }
    println!("wrote {take} PLY files to {}", dir.display());
    Ok(())
}

fn cmd_ablate(common: &Common, cfg: &RunConfig, divisor: usize, split: &str) -> Result<()> {
    let categories = match &cfg.data.category {
        Some(c) => vec![c.clone()],
        None => list_categories(&cfg.data.root)?,
    };
    let mut train = Vec::new();
    let mut test = Vec::new();
    for c in &categories {
        train.extend(load_split(cfg, c, "train")?);
        test.extend(load_split(cfg, c, split)?);
    }
    let run = create_run_dir(&common.out)?;
    write(&run, "config.toml", &cfg.to_toml()?)?;
    let variants = ablation_variants(&cfg.model, divisor)?;
    let table = ablation_run(&train, &test, &variants, &cfg.train, &cfg.augment)?;
    write(&run, "ablation.tsv", &table.to_tsv())?;
    print!("{}", table.to_tsv());
    Ok(())
}

fn cmd_robustness(
    common: &Common,
    cfg: &RunConfig,
    checkpoint: &Path,
    baseline_checkpoint: &Path,
    split: &str,
    densities: Option<&[usize]>,
    sigmas: Option<&[f64]>,
) -> Result<()> {
    let category = resolve_category(cfg)?;
    let (model, _) = load_model(checkpoint)?;
    let (baseline, _) = load_model(baseline_checkpoint)?;
    let clouds = load_split(cfg, &category, split)?;
    let run = create_run_dir(&common.out)?;
    write(&run, "config.toml", &cfg.to_toml()?)?;
    let seed = cfg.train.seed;
    let text = match (densities, sigmas) {
        (None, None) => robustness_run(model.as_ref(), baseline.as_ref(), &clouds, seed)?.to_tsv(),
        (d, s) => {
            let d = d.unwrap_or(&crate::data::DENSITY_LEVELS);
            let s = s.unwrap_or(&crate::data::NOISE_LEVELS);
            let a = robustness_grid(model.as_ref(), model.kind(), &clouds, d, s, seed)?;
            let b = robustness_grid(baseline.as_ref(), baseline.kind(), &clouds, d, s, seed)?;
            let bt = b.to_tsv();
            format!("{}{}", a.to_tsv(), bt.split_once('\n').map_or("", |x| x.1))
        }
    };
    write(&run, "robustness.tsv", &text)?;
    print!("{text}");
    Ok(())
}

fn cmd_synth(
    common: &Common,
    cfg: &RunConfig,
    shapes: &[String],
    count: usize,
    val_count: usize,
    test_count: usize,
) -> Result<()> {
    if count == 0 {
        return Err(Error::Usage("--count must be at least 1".into()));
    }
    let points = common.points.unwrap_or(cfg.train.points);
    let seed = cfg.train.seed;
    let run = create_run_dir(&common.out)?;
    write(&run, "config.toml", &cfg.to_toml()?)?;
    for name in shapes {
        let kind: SynthShape = name.parse()?;
        let all = synth_generate(kind, count + val_count + test_count, points, seed)?;
        let (train, rest) = all.split_at(count);
        let (val, test) = rest.split_at(val_count);
        write_dataset(&cfg.data.root, kind.name(), train, val, test)?;
        println!(
            "{}: {count} train, {val_count} val, {test_count} test shapes of {points} points, {} parts -> {}",
            kind.name(),
            kind.num_parts(),
            cfg.data.root.join(kind.name()).display()
        );
    }
    Ok(())
}

fn cmd_inspect(cfg: &RunConfig) -> Result<()> {
    let m = &cfg.model;
    println!("inception plan {:?}: K = {}, local width {}", m.inception_plan, m.stack_width(), m.local_width());
    for (part, n) in m.parameter_breakdown() {
        println!("  {part:<20} {n:>12}");
    }
    println!("total parameters: {}", m.parameter_count());
    println!("comparator parameters: {}", cfg.baseline.parameter_count());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_parse_anywhere() {
        let cli = Cli::try_parse_from(["pignet", "--seed", "3", "train", "--epochs", "2", "--baseline"]).unwrap();
        assert_eq!(cli.common.seed, Some(3));
        assert_eq!(cli.common.epochs, Some(2));
        assert!(matches!(cli.command, Command::Train { baseline: true }));
    }

    #[test]
    fn unknown_command_exits_two() {
        assert_eq!(run(["pignet", "fly"]), 2);
    }

    #[test]
    fn run_dirs_are_unique() {
        let dir = tempfile::tempdir().unwrap();
        let a = create_run_dir(dir.path()).unwrap();
        let b = create_run_dir(dir.path()).unwrap();
        assert_ne!(a, b);
        assert!(a.file_name().unwrap().to_string_lossy().starts_with("run-"));
    }
}
