//! Point clouds and everything that happens to them before they reach a
//! network: normalization, fixed-size sampling, training augmentation, and the
//! density/noise corruptions used by the robustness grid.
//!
//! Every stochastic operation is a pure function of its input and a seed.
//! Per-shape seeds are derived with [`derive_seed`] so results do not depend
//! on processing order.

pub mod io;
pub mod synth;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use io::{load_cloud, write_cloud, DatasetSplit, ShapeRecord};
pub use synth::{synth_generate, SynthShape};

/// Density levels of the robustness grid.
pub const DENSITY_LEVELS: [usize; 4] = [128, 256, 512, 1024];
/// Noise levels (standard deviation) of the robustness grid, including the clean level.
pub const NOISE_LEVELS: [f64; 5] = [0.0, 0.01, 0.02, 0.03, 0.04];

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
    /// Part id per point, when annotated.
    pub labels: Option<Vec<usize>>,
    pub category: String,
    pub id: String,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>, labels: Option<Vec<usize>>, category: impl Into<String>) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != points.len() {
                return Err(Error::Data(format!(
                    "{} labels for {} points",
                    l.len(),
                    points.len()
                )));
            }
        }
        Ok(Self {
            points,
            labels,
            category: category.into(),
            id: String::new(),
        })
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `[n,3]` coordinate tensor.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.points.iter().flatten().copied().collect();
        Tensor::new(vec![self.points.len(), 3], data).unwrap()
    }

    pub fn labels(&self) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::Data(format!("shape '{}' has no part labels", self.id)))
    }

    /// Keeps the points (and labels) at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            category: self.category.clone(),
            id: self.id.clone(),
        }
    }

    pub fn centroid(&self) -> [f64; 3] {
        let n = self.points.len().max(1) as f64;
        let mut c = [0.0; 3];
        for p in &self.points {
            for a in 0..3 {
                c[a] += p[a];
            }
        }
        c.map(|v| v / n)
    }
}

/// Per-shape seed: `seed ⊕ index`.
pub fn derive_seed(seed: u64, index: usize) -> u64 {
    seed ^ index as u64
}

/// Centers the cloud at the origin and scales it into the unit sphere
/// (maximum point norm 1).
pub fn normalize(cloud: &PointCloud) -> Result<PointCloud> {
    if cloud.is_empty() {
        return Err(Error::Degenerate("cannot normalize an empty cloud".into()));
    }
    let c = cloud.centroid();
    let centered: Vec<[f64; 3]> = cloud
        .points
        .iter()
        .map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]])
        .collect();
    let radius = centered
        .iter()
        .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
        .fold(0.0, f64::max);
    if !(radius > 1e-12) {
        return Err(Error::Degenerate(format!(
            "all points of shape '{}' coincide",
            cloud.id
        )));
    }
    let mut out = cloud.clone();
    out.points = centered
        .into_iter()
        .map(|p| p.map(|v| v / radius))
        .collect();
    Ok(out)
}

/// Uniformly samples `m` points: without replacement when the cloud has at
/// least `m` points, with replacement otherwise. Labels follow their points.
pub fn sample_points(cloud: &PointCloud, m: usize, seed: u64) -> Result<PointCloud> {
    if m == 0 {
        return Err(Error::Usage("cannot sample zero points".into()));
    }
    let n = cloud.len();
    if n == 0 {
        return Err(Error::Data(format!("shape '{}' has no points to sample", cloud.id)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let indices: Vec<usize> = if n >= m {
        index::sample(&mut rng, n, m).into_vec()
    } else {
        (0..m).map(|_| rng.random_range(0..n)).collect()
    };
    Ok(cloud.select(&indices))
}

/// Density corruption of the robustness grid: random subsampling to `m` points.
pub fn subsample_density(cloud: &PointCloud, m: usize, seed: u64) -> Result<PointCloud> {
    sample_points(cloud, m, seed)
}

/// Adds independent `N(0, σ²)` noise to every coordinate.
pub fn add_gaussian_noise(cloud: &PointCloud, sigma: f64, seed: u64) -> Result<PointCloud> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::Usage(format!("noise sigma must be non-negative, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(cloud.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).unwrap();
    let mut out = cloud.clone();
    for p in &mut out.points {
        for v in p.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub rotate_up_axis: bool,
    /// Coordinate index of the up axis (1 = y).
    pub up_axis: usize,
    pub scale_range: [f64; 2],
    pub translate_range: [f64; 2],
    pub jitter_sigma: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            rotate_up_axis: true,
            up_axis: 1,
            scale_range: [0.66, 1.5],
            translate_range: [-0.2, 0.2],
            jitter_sigma: 0.01,
        }
    }
}

impl AugmentConfig {
    /// Configuration whose every random draw is the identity.
    pub fn identity() -> Self {
        Self {
            enabled: true,
            rotate_up_axis: false,
            up_axis: 1,
            scale_range: [1.0, 1.0],
            translate_range: [0.0, 0.0],
            jitter_sigma: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.scale_range;
        if !(lo > 0.0) || !(hi >= lo) {
            return Err(Error::Config(format!(
                "scale_range must satisfy 0 < low <= high, got [{lo}, {hi}]"
            )));
        }
        let [tlo, thi] = self.translate_range;
        if !(thi >= tlo) {
            return Err(Error::Config(format!(
                "translate_range must satisfy low <= high, got [{tlo}, {thi}]"
            )));
        }
        if !(self.jitter_sigma >= 0.0) {
            return Err(Error::Config(format!(
                "jitter_sigma must be non-negative, got {}",
                self.jitter_sigma
            )));
        }
        if self.up_axis > 2 {
            return Err(Error::Config(format!("up_axis must be 0, 1 or 2, got {}", self.up_axis)));
        }
        Ok(())
    }
}

/// One concrete draw of the rigid/affine part of an augmentation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDraw {
    pub angle: f64,
    pub scale: [f64; 3],
    pub translate: [f64; 3],
}

impl AugmentDraw {
    pub fn sample<R: Rng>(cfg: &AugmentConfig, rng: &mut R) -> Self {
        let angle = if cfg.rotate_up_axis {
            rng.random_range(0.0..std::f64::consts::TAU)
        } else {
            0.0
        };
        let [slo, shi] = cfg.scale_range;
        let [tlo, thi] = cfg.translate_range;
        let scale = [0; 3].map(|_| rng.random_range(slo..=shi));
        let translate = [0; 3].map(|_| rng.random_range(tlo..=thi));
        Self {
            angle,
            scale,
            translate,
        }
    }

    /// Rotates about `up_axis`, then scales, then translates.
    pub fn apply(&self, p: [f64; 3], up_axis: usize) -> [f64; 3] {
        // the two axes spanning the plane orthogonal to the up axis, right-handed
        let (a, b) = match up_axis {
            0 => (1, 2),
            1 => (2, 0),
            _ => (0, 1),
        };
        let (s, c) = self.angle.sin_cos();
        let mut q = p;
        q[a] = c * p[a] - s * p[b];
        q[b] = s * p[a] + c * p[b];
        [0, 1, 2].map(|i| q[i] * self.scale[i] + self.translate[i])
    }
}

/// Training augmentation in fixed order: up-axis rotation, anisotropic
/// scaling, translation, then per-point Gaussian jitter. Labels and point
/// count are untouched.
pub fn augment<R: Rng>(cloud: &PointCloud, cfg: &AugmentConfig, rng: &mut R) -> PointCloud {
    let draw = AugmentDraw::sample(cfg, rng);
    let mut out = cloud.clone();
    for p in &mut out.points {
        *p = draw.apply(*p, cfg.up_axis);
    }
    if cfg.jitter_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.jitter_sigma).unwrap();
        for p in &mut out.points {
            for v in p.iter_mut() {
                *v += normal.sample(rng);
            }
        }
    }
    out
}

/// Stacks equally sized clouds into a `[B,n,3]` batch and concatenated labels.
pub fn stack_batch(clouds: &[PointCloud]) -> Result<(Tensor, Vec<usize>)> {
    let n = clouds
        .first()
        .map(PointCloud::len)
        .ok_or_else(|| Error::Usage("empty batch".into()))?;
    let mut data = Vec::with_capacity(clouds.len() * n * 3);
    let mut labels = Vec::with_capacity(clouds.len() * n);
    for c in clouds {
        if c.len() != n {
            return Err(Error::Dimension(format!(
                "batch mixes clouds of {n} and {} points",
                c.len()
            )));
        }
        data.extend(c.points.iter().flatten());
        labels.extend_from_slice(c.labels()?);
    }
    Ok((Tensor::new(vec![clouds.len(), n, 3], data)?, labels))
}
