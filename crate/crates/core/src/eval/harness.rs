//! Architecture ablation, corruption robustness grid and complexity timing.

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use super::{evaluate_prepared, evaluate_split, prepare_eval_cloud, ShapeResult, SegmentationReport};
use crate::data::{
    add_gaussian_noise, derive_seed, normalize, subsample_density, AugmentConfig, PointCloud, DENSITY_LEVELS,
    NOISE_LEVELS,
};
use crate::error::{Error, Result};
use crate::model::{predict, ModelConfig, PigNet, Segmenter};
use crate::train::{train_category, TrainConfig};

/// Mixed into the evaluation seed for the noise stream, so noise draws are
/// independent of the subsampling draws.
pub const NOISE_SEED_SALT: u64 = 0x6e6f_6973_6520_7365;

/// Part count implied by labels: largest id plus one, at least 2.
pub fn num_parts_from_labels(clouds: &[PointCloud]) -> Result<usize> {
    let mut max = 0;
    for c in clouds {
        max = max.max(c.labels()?.iter().copied().max().unwrap_or(0));
    }
    Ok((max + 1).max(2))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationVariant {
    pub name: String,
    pub config: ModelConfig,
}

/// The five architecture variants: 3-, 4- and 5-stage inception plans, the
/// 4-stage plan with plain conv stages, and the 4-stage plan with max
/// aggregation. Filter counts are the plans `(64, 128, 256, 512, 1024)`
/// divided by `divisor`; every other field comes from `base`.
pub fn ablation_variants(base: &ModelConfig, divisor: usize) -> Result<Vec<AblationVariant>> {
    let full = [64usize, 128, 256, 512, 1024];
    if divisor == 0 || full.iter().any(|e| e % divisor != 0 || (e / divisor) % 2 != 0) {
        return Err(Error::Config(format!(
            "divisor {divisor} must leave every filter count a positive even integer"
        )));
    }
    let plan = |stages: usize| full[..stages].iter().map(|e| e / divisor).collect::<Vec<_>>();
    let with = |plan: Vec<usize>, inception: bool, gap: bool| ModelConfig {
        inception_plan: plan,
        use_inception: inception,
        use_gap: gap,
        feature_transform_after: None,
        ..base.clone()
    };
    Ok(vec![
        AblationVariant {
            name: "Inc3L".into(),
            config: with(plan(3), true, true),
        },
        AblationVariant {
            name: "Inc4L".into(),
            config: with(plan(4), true, true),
        },
        AblationVariant {
            name: "Inc5L".into(),
            config: with(plan(5), true, true),
        },
        AblationVariant {
            name: "No-Inc4L".into(),
            config: with(plan(4), false, true),
        },
        AblationVariant {
            name: "Inc4L-max".into(),
            config: with(plan(4), true, false),
        },
    ])
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub name: String,
    #[serde(skip)]
    pub config: ModelConfig,
    pub parameters: usize,
    pub instance_miou: f64,
    pub category_miou: f64,
    /// Digest of the initial parameters of every per-category model.
    pub initial_hash: [u8; 32],
    /// Digest of the trained parameters of every per-category model.
    pub trained_hash: [u8; 32],
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

fn short_hex(h: &[u8; 32]) -> String {
    h[..6].iter().map(|b| format!("{b:02x}")).collect()
}

impl AblationTable {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("variant\tplan\tinception\taggregation\tparameters\tinstance_miou\tcategory_miou\tinit_hash\ttrained_hash\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{}\t{:?}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{}\t{}\n",
                r.name,
                r.config.inception_plan,
                r.config.use_inception,
                if r.config.use_gap { "average" } else { "max" },
                r.parameters,
                r.instance_miou,
                r.category_miou,
                short_hex(&r.initial_hash),
                short_hex(&r.trained_hash),
            ));
        }
        out
    }
}

fn by_category(clouds: &[PointCloud]) -> BTreeMap<&str, Vec<PointCloud>> {
    let mut m: BTreeMap<&str, Vec<PointCloud>> = BTreeMap::new();
    for c in clouds {
        m.entry(c.category.as_str()).or_default().push(c.clone());
    }
    m
}

/// Trains every variant per category with the same seed and training
/// configuration, then evaluates on `test` (or on `train` when `test` is
/// empty). The part count of each category is read from its labels.
pub fn ablation_run(
    train: &[PointCloud],
    test: &[PointCloud],
    variants: &[AblationVariant],
    cfg: &TrainConfig,
    aug: &AugmentConfig,
) -> Result<AblationTable> {
    if train.is_empty() {
        return Err(Error::Data("ablation needs training shapes".into()));
    }
    let train_cats = by_category(train);
    let test_cats = by_category(if test.is_empty() { train } else { test });
    let mut table = AblationTable::default();
    for v in variants {
        let mut shapes: Vec<ShapeResult> = Vec::new();
        let mut init = sha2::Sha256::default();
        let mut trained = sha2::Sha256::default();
        let mut parameters = 0;
        for (cat, cat_train) in &train_cats {
            let cat_test = test_cats.get(cat).map(Vec::as_slice).unwrap_or(&[]);
            let mut all = cat_train.clone();
            all.extend_from_slice(cat_test);
            let config = ModelConfig {
                num_parts: num_parts_from_labels(&all)?,
                ..v.config.clone()
            };
            let mut model = PigNet::new(config, cfg.seed)?;
            sha2::Digest::update(&mut init, model.store.digest());
            parameters += model.count_parameters();
            train_category(&mut model, cat_train, &[], cfg, aug)?;
            sha2::Digest::update(&mut trained, model.store.digest());
            if !cat_test.is_empty() {
                shapes.extend(evaluate_split(&model, cat_test, cfg.points, cfg.seed)?.shapes);
            }
        }
        let report = SegmentationReport::from_shapes(shapes)?;
        table.rows.push(AblationRow {
            name: v.name.clone(),
            config: v.config.clone(),
            parameters,
            instance_miou: report.instance_miou,
            category_miou: report.category_miou,
            initial_hash: sha2::Digest::finalize(init).into(),
            trained_hash: sha2::Digest::finalize(trained).into(),
        });
    }
    Ok(table)
}

/// Instance mIoU for every (density, noise) pair of one model.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RobustnessGrid {
    pub model: String,
    pub densities: Vec<usize>,
    pub sigmas: Vec<f64>,
    /// `instance_miou[d][s]` for `densities[d]`, `sigmas[s]`.
    pub instance_miou: Vec<Vec<f64>>,
}

impl RobustnessGrid {
    pub fn cell(&self, density: usize, sigma: f64) -> Option<f64> {
        let d = self.densities.iter().position(|&x| x == density)?;
        let s = self.sigmas.iter().position(|&x| x == sigma)?;
        Some(self.instance_miou[d][s])
    }

    pub fn to_tsv(&self) -> String {
        let mut out = format!("model\tdensity");
        for s in &self.sigmas {
            out.push_str(&format!("\tsigma={s}"));
        }
        out.push('\n');
        for (d, row) in self.densities.iter().zip(&self.instance_miou) {
            out.push_str(&format!("{}\t{d}", self.model));
            for v in row {
                out.push_str(&format!("\t{v:.6}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Corrupts shape `i`: normalize, subsample to `density` with
/// `derive_seed(seed, i)`, then add noise with the salted seed. At the
/// evaluation point count and `sigma = 0` this is exactly the cloud
/// [`evaluate_split`] scores.
pub fn corrupt(cloud: &PointCloud, index: usize, density: usize, sigma: f64, seed: u64) -> Result<PointCloud> {
    let c = subsample_density(&normalize(cloud)?, density, derive_seed(seed, index))?;
    add_gaussian_noise(&c, sigma, derive_seed(seed ^ NOISE_SEED_SALT, index))
}

pub fn robustness_grid<M: Segmenter + ?Sized>(
    model: &M,
    name: &str,
    clouds: &[PointCloud],
    densities: &[usize],
    sigmas: &[f64],
    seed: u64,
) -> Result<RobustnessGrid> {
    let mut grid = Vec::with_capacity(densities.len());
    for &d in densities {
        let mut row = Vec::with_capacity(sigmas.len());
        for &s in sigmas {
            let corrupted = clouds
                .par_iter()
                .enumerate()
                .map(|(i, c)| corrupt(c, i, d, s, seed))
                .collect::<Result<Vec<_>>>()?;
            row.push(evaluate_prepared(model, &corrupted)?.instance_miou);
        }
        grid.push(row);
    }
    Ok(RobustnessGrid {
        model: name.to_string(),
        densities: densities.to_vec(),
        sigmas: sigmas.to_vec(),
        instance_miou: grid,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RobustnessReport {
    pub pignet: RobustnessGrid,
    pub baseline: RobustnessGrid,
}

impl RobustnessReport {
    pub fn to_tsv(&self) -> String {
        let b = self.baseline.to_tsv();
        format!("{}{}", self.pignet.to_tsv(), b.lines().skip(1).map(|l| format!("{l}\n")).collect::<String>())
    }
}

/// Both models over the density × noise grid on the same corrupted copies.
pub fn robustness_run<A: Segmenter + ?Sized, B: Segmenter + ?Sized>(
    model: &A,
    baseline: &B,
    clouds: &[PointCloud],
    seed: u64,
) -> Result<RobustnessReport> {
    Ok(RobustnessReport {
        pignet: robustness_grid(model, "pignet", clouds, &DENSITY_LEVELS, &NOISE_LEVELS, seed)?,
        baseline: robustness_grid(baseline, "pointnet", clouds, &DENSITY_LEVELS, &NOISE_LEVELS, seed)?,
    })
}

/// Parameter count and wall-clock timings on the local machine.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComplexityReport {
    pub model: String,
    pub parameters: usize,
    /// Seconds for one training epoch over the given clouds (machine specific).
    pub train_seconds_per_epoch: f64,
    /// Sequential eval-mode seconds per shape (machine specific).
    pub inference_seconds_per_shape: f64,
}

impl ComplexityReport {
    pub fn to_tsv_row(&self) -> String {
        format!(
            "{}\t{}\t{:.4}\t{:.6}\n",
            self.model, self.parameters, self.train_seconds_per_epoch, self.inference_seconds_per_shape
        )
    }

    pub const TSV_HEADER: &'static str = "model\tparameters\ttrain_seconds_per_epoch\tinference_seconds_per_shape\n";
}

/// Times one training epoch on a copy of `model` and sequential inference
/// over `clouds`; the model itself is left untouched.
pub fn complexity_report<M: Segmenter + Clone>(
    model: &M,
    name: &str,
    clouds: &[PointCloud],
    cfg: &TrainConfig,
) -> Result<ComplexityReport> {
    if clouds.is_empty() {
        return Err(Error::Data("complexity timing needs at least one shape".into()));
    }
    let mut copy = model.clone();
    let one = TrainConfig {
        epochs: 1,
        ..cfg.clone()
    };
    let aug = AugmentConfig {
        enabled: false,
        ..AugmentConfig::default()
    };
    let start = Instant::now();
    train_category(&mut copy, clouds, &[], &one, &aug)?;
    let train_seconds = start.elapsed().as_secs_f64();

    let prepared = clouds
        .iter()
        .enumerate()
        .map(|(i, c)| prepare_eval_cloud(c, i, cfg.points, cfg.seed))
        .collect::<Result<Vec<_>>>()?;
    let start = Instant::now();
    for c in &prepared {
        predict(model, &c.to_tensor())?;
    }
    let infer = start.elapsed().as_secs_f64() / prepared.len() as f64;
    Ok(ComplexityReport {
        model: name.to_string(),
        parameters: model.count_parameters(),
        train_seconds_per_epoch: train_seconds,
        inference_seconds_per_shape: infer,
    })
}
