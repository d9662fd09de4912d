//! Segmentation metrics and the evaluation harnesses built on them.
//!
//! A shape's mIoU averages the IoU of every part of its category; a part
//! absent from both prediction and ground truth counts as IoU 1. Instance
//! mIoU averages shapes; category mIoU averages per-category means.

mod harness;
mod ply;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;

use crate::data::{derive_seed, normalize, sample_points, PointCloud};
use crate::error::{Error, Result};
use crate::model::{predict, Segmenter};

pub use harness::{
    ablation_run, complexity_report, corrupt, num_parts_from_labels, robustness_grid, robustness_run,
    ablation_variants, AblationRow, AblationTable, AblationVariant, ComplexityReport, RobustnessGrid,
    RobustnessReport, NOISE_SEED_SALT,
};
pub use ply::{write_ply, PALETTE};

/// Mean IoU over parts `0..parts` of one shape.
pub fn shape_miou(pred: &[usize], gt: &[usize], parts: usize) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Data(format!(
            "{} predictions for {} ground-truth labels",
            pred.len(),
            gt.len()
        )));
    }
    if parts == 0 {
        return Err(Error::Usage("a category needs at least one part".into()));
    }
    let mut inter = vec![0usize; parts];
    let mut union = vec![0usize; parts];
    for (&p, &g) in pred.iter().zip(gt) {
        if p >= parts || g >= parts {
            return Err(Error::Data(format!(
                "part id {} outside the category's {parts} parts",
                p.max(g)
            )));
        }
        if p == g {
            inter[p] += 1;
            union[p] += 1;
        } else {
            union[p] += 1;
            union[g] += 1;
        }
    }
    let total: f64 = inter
        .iter()
        .zip(&union)
        .map(|(&i, &u)| if u == 0 { 1.0 } else { i as f64 / u as f64 })
        .sum();
    Ok(total / parts as f64)
}

/// Evaluation result of one shape.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ShapeResult {
    pub id: String,
    pub category: String,
    pub miou: f64,
    pub correct: usize,
    pub points: usize,
}

/// `(instance mIoU, category mIoU)` over per-shape results.
pub fn aggregate(records: &[ShapeResult]) -> Result<(f64, f64)> {
    if records.is_empty() {
        return Err(Error::Usage("cannot aggregate zero shapes".into()));
    }
    let instance = records.iter().map(|r| r.miou).sum::<f64>() / records.len() as f64;
    let mut per_cat: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for r in records {
        let e = per_cat.entry(&r.category).or_default();
        e.0 += r.miou;
        e.1 += 1;
    }
    let category = per_cat.values().map(|(s, n)| s / *n as f64).sum::<f64>() / per_cat.len() as f64;
    Ok((instance, category))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SegmentationReport {
    pub shapes: Vec<ShapeResult>,
    pub instance_miou: f64,
    pub category_miou: f64,
    /// Fraction of correctly labeled points over all shapes.
    pub point_accuracy: f64,
}

impl SegmentationReport {
    pub fn from_shapes(shapes: Vec<ShapeResult>) -> Result<Self> {
        let (instance_miou, category_miou) = aggregate(&shapes)?;
        let correct: usize = shapes.iter().map(|s| s.correct).sum();
        let total: usize = shapes.iter().map(|s| s.points).sum();
        Ok(Self {
            shapes,
            instance_miou,
            category_miou,
            point_accuracy: correct as f64 / total.max(1) as f64,
        })
    }

    /// Mean shape mIoU per category, sorted by category name.
    pub fn per_category(&self) -> Vec<(String, f64, usize)> {
        let mut m: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
        for s in &self.shapes {
            let e = m.entry(&s.category).or_default();
            e.0 += s.miou;
            e.1 += 1;
        }
        m.into_iter()
            .map(|(c, (sum, n))| (c.to_string(), sum / n as f64, n))
            .collect()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("id\tcategory\tmiou\taccuracy\tpoints\n");
        for s in &self.shapes {
            out.push_str(&format!(
                "{}\t{}\t{:.6}\t{:.6}\t{}\n",
                s.id,
                s.category,
                s.miou,
                s.correct as f64 / s.points.max(1) as f64,
                s.points
            ));
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut out = format!(
            "shapes: {}\ninstance mIoU: {:.4}\ncategory mIoU: {:.4}\npoint accuracy: {:.4}\n",
            self.shapes.len(),
            self.instance_miou,
            self.category_miou,
            self.point_accuracy
        );
        for (cat, miou, n) in self.per_category() {
            out.push_str(&format!("  {cat}: {miou:.4} over {n} shapes\n"));
        }
        out
    }
}

/// Scores one already-prepared labeled cloud.
pub fn evaluate_shape<M: Segmenter + ?Sized>(model: &M, cloud: &PointCloud) -> Result<(ShapeResult, Vec<usize>)> {
    let gt = cloud.labels()?;
    let pred = predict(model, &cloud.to_tensor())?;
    let miou = shape_miou(&pred, gt, model.num_parts())?;
    let correct = pred.iter().zip(gt).filter(|(p, g)| p == g).count();
    Ok((
        ShapeResult {
            id: cloud.id.clone(),
            category: cloud.category.clone(),
            miou,
            correct,
            points: cloud.len(),
        },
        pred,
    ))
}

fn check_part_count<M: Segmenter + ?Sized>(model: &M, clouds: &[PointCloud]) -> Result<()> {
    let p = model.num_parts();
    for c in clouds {
        if let Some(&l) = c.labels()?.iter().max() {
            if l >= p {
                return Err(Error::Config(format!(
                    "shape '{}' of category '{}' uses part {l}, but the model predicts {p} parts",
                    c.id, c.category
                )));
            }
        }
    }
    Ok(())
}

/// Scores clouds that are already normalized, sampled and (optionally)
/// corrupted. Shapes run in parallel; results keep input order.
pub fn evaluate_prepared<M: Segmenter + ?Sized>(model: &M, clouds: &[PointCloud]) -> Result<SegmentationReport> {
    check_part_count(model, clouds)?;
    let shapes = clouds
        .par_iter()
        .map(|c| evaluate_shape(model, c).map(|(r, _)| r))
        .collect::<Result<Vec<_>>>()?;
    SegmentationReport::from_shapes(shapes)
}

/// Normalizes shape `i` and samples it to `points` with `derive_seed(seed, i)`.
pub fn prepare_eval_cloud(cloud: &PointCloud, index: usize, points: usize, seed: u64) -> Result<PointCloud> {
    sample_points(&normalize(cloud)?, points, derive_seed(seed, index))
}

/// Eval-mode evaluation of labeled clouds, each normalized and sampled to `points`.
pub fn evaluate_split<M: Segmenter + ?Sized>(
    model: &M,
    clouds: &[PointCloud],
    points: usize,
    seed: u64,
) -> Result<SegmentationReport> {
    check_part_count(model, clouds)?;
    let prepared = clouds
        .par_iter()
        .enumerate()
        .map(|(i, c)| prepare_eval_cloud(c, i, points, seed))
        .collect::<Result<Vec<_>>>()?;
    evaluate_prepared(model, &prepared)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Builds the full confusion matrix, then reads IoU off it.
    fn brute_force(pred: &[usize], gt: &[usize], parts: usize) -> f64 {
        let mut cm = vec![vec![0usize; parts]; parts];
        for (&p, &g) in pred.iter().zip(gt) {
            cm[g][p] += 1;
        }
        let mut sum = 0.0;
        for k in 0..parts {
            let tp = cm[k][k];
            let row: usize = cm[k].iter().sum();
            let col: usize = (0..parts).map(|g| cm[g][k]).sum();
            let union = row + col - tp;
            sum += if union == 0 { 1.0 } else { tp as f64 / union as f64 };
        }
        sum / parts as f64
    }

    fn record(cat: &str, miou: f64) -> ShapeResult {
        ShapeResult {
            id: String::new(),
            category: cat.into(),
            miou,
            correct: 0,
            points: 1,
        }
    }

    #[test]
    fn miou_examples() {
        assert_eq!(shape_miou(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap(), 1.0);
        let v = shape_miou(&[0, 1, 1, 1], &[0, 0, 1, 1], 2).unwrap();
        assert!((v - 0.583333).abs() < 1e-6);
        // part 2 in neither: contributes 1
        let v = shape_miou(&[0, 1], &[0, 1], 3).unwrap();
        assert_eq!(v, 1.0);
        assert!(matches!(shape_miou(&[0], &[0, 1], 2), Err(Error::Data(_))));
    }

    #[test]
    fn matches_confusion_matrix_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let parts = rng.random_range(2..7);
            let n = rng.random_range(1..500);
            let gt: Vec<usize> = (0..n).map(|_| rng.random_range(0..parts)).collect();
            let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..parts)).collect();
            let a = shape_miou(&pred, &gt, parts).unwrap();
            assert_eq!(a, brute_force(&pred, &gt, parts));
            assert!((0.0..=1.0).contains(&a));
        }
    }

    #[test]
    fn aggregate_examples() {
        let (i, c) = aggregate(&[record("a", 0.8), record("a", 0.6), record("b", 1.0)]).unwrap();
        assert!((i - 0.8).abs() < 1e-12);
        assert!((c - 0.85).abs() < 1e-12);
        assert_eq!(aggregate(&[record("a", 0.3)]).unwrap(), (0.3, 0.3));
        assert!(matches!(aggregate(&[]), Err(Error::Usage(_))));
    }

    #[test]
    fn report_text() {
        let r = SegmentationReport::from_shapes(vec![record("a", 0.5), record("b", 1.0)]).unwrap();
        assert_eq!(r.to_tsv().lines().count(), 3);
        assert!(r.summary().contains("instance mIoU: 0.7500"));
    }
}
