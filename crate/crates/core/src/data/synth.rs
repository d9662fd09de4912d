//! Procedural part-annotated shapes for tests and demos.
//!
//! Each shape is a union of simple primitives (discs, cylinders, a frustum,
//! boxes), one part per primitive group, with randomized proportions. Points
//! are spread over parts in proportion to surface area, with at least one
//! point per part. The up axis is `y`.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::PointCloud;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SynthShape {
    /// base (0), pole (1), shade (2)
    Lamp,
    /// seat (0), back (1), legs (2)
    Chair,
    /// top (0), legs (1)
    Table,
}

impl SynthShape {
    pub const ALL: [SynthShape; 3] = [SynthShape::Lamp, SynthShape::Chair, SynthShape::Table];

    pub fn num_parts(self) -> usize {
        match self {
            SynthShape::Lamp | SynthShape::Chair => 3,
            SynthShape::Table => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SynthShape::Lamp => "lamp",
            SynthShape::Chair => "chair",
            SynthShape::Table => "table",
        }
    }
}

impl FromStr for SynthShape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SynthShape::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown synthetic shape '{s}' (lamp, chair, table)")))
    }
}

/// Limits of the lamp pole radius; every pole point lies within the upper bound of the axis.
pub const LAMP_POLE_RADIUS: (f64, f64) = (0.03, 0.06);

/// A sampleable surface patch.
#[derive(Clone, Copy, Debug)]
enum Surface {
    /// Horizontal disc at height `y`.
    Disc { y: f64, r: f64 },
    /// Open cylinder around the y axis.
    Cylinder { x: f64, z: f64, r: f64, y0: f64, y1: f64 },
    /// Open frustum around the y axis, radius `r0` at `y0` and `r1` at `y1`.
    Frustum { r0: f64, y0: f64, r1: f64, y1: f64 },
    /// Axis-aligned box surface.
    Cuboid { lo: [f64; 3], hi: [f64; 3] },
}

impl Surface {
    fn area(&self) -> f64 {
        use std::f64::consts::PI;
        match *self {
            Surface::Disc { r, .. } => PI * r * r,
            Surface::Cylinder { r, y0, y1, .. } => 2.0 * PI * r * (y1 - y0),
            Surface::Frustum { r0, y0, r1, y1 } => {
                let slant = ((r1 - r0).powi(2) + (y1 - y0).powi(2)).sqrt();
                PI * (r0 + r1) * slant
            }
            Surface::Cuboid { lo, hi } => {
                let d = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
                2.0 * (d[0] * d[1] + d[1] * d[2] + d[0] * d[2])
            }
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> [f64; 3] {
        let tau = std::f64::consts::TAU;
        match *self {
            Surface::Disc { y, r } => {
                let rr = r * rng.random::<f64>().sqrt();
                let a = rng.random_range(0.0..tau);
                [rr * a.cos(), y, rr * a.sin()]
            }
            Surface::Cylinder { x, z, r, y0, y1 } => {
                let a = rng.random_range(0.0..tau);
                [x + r * a.cos(), rng.random_range(y0..=y1), z + r * a.sin()]
            }
            Surface::Frustum { r0, y0, r1, y1 } => {
                // area element grows linearly with the radius: rejection on t
                let rmax = r0.max(r1);
                let t = loop {
                    let t: f64 = rng.random();
                    let r = r0 + (r1 - r0) * t;
                    if rng.random::<f64>() * rmax <= r {
                        break t;
                    }
                };
                let r = r0 + (r1 - r0) * t;
                let a = rng.random_range(0.0..tau);
                [r * a.cos(), y0 + (y1 - y0) * t, r * a.sin()]
            }
            Surface::Cuboid { lo, hi } => {
                let d = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
                // faces normal to x, y, z, each counted twice
                let w = [d[1] * d[2], d[0] * d[2], d[0] * d[1]];
                let mut u = rng.random::<f64>() * (w[0] + w[1] + w[2]);
                let mut axis = 2;
                for (i, wi) in w.iter().enumerate() {
                    if u < *wi {
                        axis = i;
                        break;
                    }
                    u -= wi;
                }
                let mut p = [0.0; 3];
                for i in 0..3 {
                    p[i] = if i == axis {
                        if rng.random::<bool>() {
                            hi[i]
                        } else {
                            lo[i]
                        }
                    } else {
                        rng.random_range(lo[i]..=hi[i])
                    };
                }
                p
            }
        }
    }
}

fn lamp<R: Rng>(rng: &mut R) -> Vec<Vec<Surface>> {
    let base_r = rng.random_range(0.3..0.45);
    let base_h = rng.random_range(0.04..0.09);
    let pole_r = rng.random_range(LAMP_POLE_RADIUS.0..LAMP_POLE_RADIUS.1);
    let pole_top = rng.random_range(0.8..1.2);
    let shade_h = rng.random_range(0.3..0.45);
    let shade_bottom_r = rng.random_range(0.35..0.5);
    let shade_top_r = rng.random_range(0.12..0.2);
    vec![
        vec![
            Surface::Disc { y: base_h, r: base_r },
            Surface::Cylinder {
                x: 0.0,
                z: 0.0,
                r: base_r,
                y0: 0.0,
                y1: base_h,
            },
        ],
        vec![Surface::Cylinder {
            x: 0.0,
            z: 0.0,
            r: pole_r,
            y0: base_h,
            y1: pole_top,
        }],
        vec![Surface::Frustum {
            r0: shade_bottom_r,
            y0: pole_top,
            r1: shade_top_r,
            y1: pole_top + shade_h,
        }],
    ]
}

fn legs(half_w: f64, half_d: f64, leg: f64, height: f64) -> Vec<Surface> {
    let mut out = Vec::with_capacity(4);
    for sx in [-1.0, 1.0] {
        for sz in [-1.0, 1.0] {
            let cx = sx * (half_w - leg);
            let cz = sz * (half_d - leg);
            out.push(Surface::Cuboid {
                lo: [cx - leg, 0.0, cz - leg],
                hi: [cx + leg, height, cz + leg],
            });
        }
    }
    out
}

fn chair<R: Rng>(rng: &mut R) -> Vec<Vec<Surface>> {
    let hw = rng.random_range(0.35..0.5);
    let hd = rng.random_range(0.35..0.5);
    let seat_y = rng.random_range(0.4..0.55);
    let seat_t = rng.random_range(0.05..0.09);
    let back_h = rng.random_range(0.5..0.8);
    let back_t = rng.random_range(0.05..0.09);
    let leg = rng.random_range(0.03..0.05);
    vec![
        vec![Surface::Cuboid {
            lo: [-hw, seat_y, -hd],
            hi: [hw, seat_y + seat_t, hd],
        }],
        vec![Surface::Cuboid {
            lo: [-hw, seat_y + seat_t, -hd],
            hi: [hw, seat_y + seat_t + back_h, -hd + back_t],
        }],
        legs(hw, hd, leg, seat_y),
    ]
}

fn table<R: Rng>(rng: &mut R) -> Vec<Vec<Surface>> {
    let hw = rng.random_range(0.6..0.9);
    let hd = rng.random_range(0.4..0.6);
    let top_y = rng.random_range(0.6..0.8);
    let top_t = rng.random_range(0.04..0.08);
    let leg = rng.random_range(0.03..0.06);
    vec![
        vec![Surface::Cuboid {
            lo: [-hw, top_y, -hd],
            hi: [hw, top_y + top_t, hd],
        }],
        legs(hw, hd, leg, top_y),
    ]
}

/// Splits `n` points over parts in proportion to `areas` (largest remainder),
/// giving every part at least one point when `n` allows.
fn allocate(n: usize, areas: &[f64]) -> Vec<usize> {
    let total: f64 = areas.iter().sum();
    let exact: Vec<f64> = areas.iter().map(|a| n as f64 * a / total).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..areas.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let left = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle().take(left) {
        counts[i] += 1;
    }
    for i in 0..counts.len() {
        if counts[i] == 0 && n >= areas.len() {
            let donor = (0..counts.len()).max_by_key(|&j| counts[j]).unwrap();
            counts[donor] -= 1;
            counts[i] += 1;
        }
    }
    counts
}

fn sample_shape(kind: SynthShape, n_points: usize, rng: &mut ChaCha8Rng) -> (Vec<[f64; 3]>, Vec<usize>) {
    let parts = match kind {
        SynthShape::Lamp => lamp(rng),
        SynthShape::Chair => chair(rng),
        SynthShape::Table => table(rng),
    };
    let areas: Vec<f64> = parts
        .iter()
        .map(|ss| ss.iter().map(Surface::area).sum())
        .collect();
    let counts = allocate(n_points, &areas);
    let mut points = Vec::with_capacity(n_points);
    let mut labels = Vec::with_capacity(n_points);
    for (part, (surfaces, &count)) in parts.iter().zip(&counts).enumerate() {
        let weights: Vec<f64> = surfaces.iter().map(Surface::area).collect();
        let total: f64 = weights.iter().sum();
        for _ in 0..count {
            let mut u = rng.random::<f64>() * total;
            let mut pick = surfaces.len() - 1;
            for (i, w) in weights.iter().enumerate() {
                if u < *w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            points.push(surfaces[pick].sample(rng));
            labels.push(part);
        }
    }
    (points, labels)
}

/// Generates `count` labeled clouds of `n_points` points each. Shape `i` is
/// drawn from its own stream so any prefix of the output is stable.
pub fn synth_generate(kind: SynthShape, count: usize, n_points: usize, seed: u64) -> Result<Vec<PointCloud>> {
    if n_points == 0 {
        return Err(Error::Usage("synthetic shapes need at least one point".into()));
    }
    Ok((0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            let (points, labels) = sample_shape(kind, n_points, &mut rng);
            PointCloud {
                points,
                labels: Some(labels),
                category: kind.name().to_string(),
                id: format!("{}_{i:04}", kind.name()),
            }
        })
        .collect())
}
