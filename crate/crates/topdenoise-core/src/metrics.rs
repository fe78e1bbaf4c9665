//! Evaluation metrics: Chamfer distance, point-to-mesh distance, and
//! recognition accuracy, plus the per-noise-level evaluation driver.
//!
//! Chamfer here is the squared-distance form with mean (not sum)
//! normalization on both sides; absolute values are therefore comparable
//! only within this codebase, trends across noise levels are the signal.
//! Nearest neighbors come from a uniform grid index searched in expanding
//! shells, which is exact: a shell is only trusted once the best squared
//! distance provably beats anything a farther shell could hold.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::gan::{denoise, DenoiserWeights};
use crate::math;
use crate::pointcloud::{add_gaussian_noise, NoiseSpec, PointCloud};
use crate::recognizer::{self, RecognizerNet};
use crate::rng;
use crate::{Error, Result};

/// Indexed triangle mesh. Construction validates indices and rejects
/// exactly-degenerate (zero-area) faces; faces may be empty, in which case
/// only vertex data is carried.
#[derive(Debug, Clone, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<[u32; 3]>,
}

impl TriangleMesh {
    pub fn new(vertices: Vec<[f64; 3]>, faces: Vec<[u32; 3]>) -> Result<Self> {
        for (t, f) in faces.iter().enumerate() {
            for &v in f {
                if v as usize >= vertices.len() {
                    return Err(Error::Argument(alloc::format!(
                        "face {t} references vertex {v}, mesh has {}",
                        vertices.len()
                    )));
                }
            }
            let [a, b, c] = [
                vertices[f[0] as usize],
                vertices[f[1] as usize],
                vertices[f[2] as usize],
            ];
            let ab = sub3(b, a);
            let ac = sub3(c, a);
            let n = cross3(ab, ac);
            if dot3(n, n) == 0.0 {
                return Err(Error::Degenerate(alloc::format!(
                    "face {t} has zero area"
                )));
            }
        }
        Ok(TriangleMesh { vertices, faces })
    }
}

fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn sqdist3(a: [f64; 3], b: [f64; 3]) -> f64 {
    let d = sub3(a, b);
    dot3(d, d)
}

/// Uniform grid over a point set for exact nearest-neighbor queries.
struct GridIndex<'a> {
    points: &'a [[f64; 3]],
    origin: [f64; 3],
    cell: f64,
    dims: [i64; 3],
    buckets: BTreeMap<i64, Vec<u32>>,
}

impl<'a> GridIndex<'a> {
    fn build(points: &'a [[f64; 3]]) -> Self {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let extent = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(hi[2] - lo[2]);
        // Aim for O(1) points per cell; collapsed clouds get one cell.
        let per_axis = math::floor(math::exp(math::ln(points.len() as f64) / 3.0)) as i64;
        let cell = if extent > 0.0 {
            extent / per_axis.max(1) as f64
        } else {
            1.0
        };
        let mut dims = [1i64; 3];
        for a in 0..3 {
            dims[a] = (math::floor((hi[a] - lo[a]) / cell) as i64 + 1).max(1);
        }
        let mut buckets: BTreeMap<i64, Vec<u32>> = BTreeMap::new();
        for (i, p) in points.iter().enumerate() {
            let c = Self::cell_of_raw(p, lo, cell, dims);
            buckets.entry(Self::key(c, dims)).or_default().push(i as u32);
        }
        GridIndex {
            points,
            origin: lo,
            cell,
            dims,
            buckets,
        }
    }

    fn cell_of_raw(p: &[f64; 3], origin: [f64; 3], cell: f64, dims: [i64; 3]) -> [i64; 3] {
        let mut c = [0i64; 3];
        for a in 0..3 {
            c[a] = (math::floor((p[a] - origin[a]) / cell) as i64).clamp(0, dims[a] - 1);
        }
        c
    }

    fn key(c: [i64; 3], dims: [i64; 3]) -> i64 {
        (c[2] * dims[1] + c[1]) * dims[0] + c[0]
    }

    /// Cell coordinates of an arbitrary query (may lie outside the grid).
    fn cell_of_query(&self, p: &[f64; 3]) -> [i64; 3] {
        let mut c = [0i64; 3];
        for a in 0..3 {
            c[a] = math::floor((p[a] - self.origin[a]) / self.cell) as i64;
        }
        c
    }

    /// Exact squared distance to the nearest indexed point. Shells of
    /// Chebyshev radius s around the query's cell are scanned outward;
    /// any point in shell > s lies at distance > s * cell, so the search
    /// stops once that bound cannot beat the current best.
    fn nearest_sqdist(&self, q: &[f64; 3]) -> f64 {
        let center = self.cell_of_query(q);
        // Farthest shell that still touches the grid.
        let mut max_shell = 0i64;
        for a in 0..3 {
            max_shell = max_shell
                .max((center[a]).abs())
                .max((self.dims[a] - 1 - center[a]).abs());
        }
        let mut best = f64::INFINITY;
        for s in 0..=max_shell {
            if best.is_finite() {
                let bound = (s - 1).max(0) as f64 * self.cell;
                if bound * bound > best {
                    break;
                }
            }
            self.scan_shell(center, s, q, &mut best);
        }
        best
    }

    fn scan_shell(&self, center: [i64; 3], s: i64, q: &[f64; 3], best: &mut f64) {
        let (lo, hi) = (
            [center[0] - s, center[1] - s, center[2] - s],
            [center[0] + s, center[1] + s, center[2] + s],
        );
        for z in lo[2]..=hi[2] {
            if z < 0 || z >= self.dims[2] {
                continue;
            }
            for y in lo[1]..=hi[1] {
                if y < 0 || y >= self.dims[1] {
                    continue;
                }
                for x in lo[0]..=hi[0] {
                    if x < 0 || x >= self.dims[0] {
                        continue;
                    }
                    // Shell, not box: at least one axis at the rim.
                    let on_rim = x == lo[0]
                        || x == hi[0]
                        || y == lo[1]
                        || y == hi[1]
                        || z == lo[2]
                        || z == hi[2];
                    if !on_rim {
                        continue;
                    }
                    if let Some(members) = self.buckets.get(&Self::key([x, y, z], self.dims)) {
                        for &i in members {
                            let d = sqdist3(*q, self.points[i as usize]);
                            if d < *best {
                                *best = d;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn mean_nearest_sqdist(from: &PointCloud, to: &PointCloud) -> f64 {
    let index = GridIndex::build(&to.points);
    let dists: Vec<f64> = from
        .points
        .iter()
        .map(|p| index.nearest_sqdist(p))
        .collect();
    math::pairwise_sum(&dists) / from.len() as f64
}

/// Symmetric squared-distance Chamfer with mean normalization:
/// mean_a min_b ||a-b||^2 + mean_b min_a ||a-b||^2. Point clouds are
/// nonempty by construction.
pub fn chamfer(a: &PointCloud, b: &PointCloud) -> f64 {
    mean_nearest_sqdist(a, b) + mean_nearest_sqdist(b, a)
}

/// Squared distance from `p` to triangle (a, b, c) by closest-feature
/// classification: the closest point lies at a vertex, on an edge, or in
/// the interior, and the barycentric signs decide which.
fn sqdist_point_triangle(p: [f64; 3], a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> f64 {
    let ab = sub3(b, a);
    let ac = sub3(c, a);
    let ap = sub3(p, a);
    let d1 = dot3(ab, ap);
    let d2 = dot3(ac, ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return dot3(ap, ap);
    }
    let bp = sub3(p, b);
    let d3 = dot3(ab, bp);
    let d4 = dot3(ac, bp);
    if d3 >= 0.0 && d4 <= d3 {
        return dot3(bp, bp);
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let t = d1 / (d1 - d3);
        let q = [ap[0] - t * ab[0], ap[1] - t * ab[1], ap[2] - t * ab[2]];
        return dot3(q, q);
    }
    let cp = sub3(p, c);
    let d5 = dot3(ab, cp);
    let d6 = dot3(ac, cp);
    if d6 >= 0.0 && d5 <= d6 {
        return dot3(cp, cp);
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let t = d2 / (d2 - d6);
        let q = [ap[0] - t * ac[0], ap[1] - t * ac[1], ap[2] - t * ac[2]];
        return dot3(q, q);
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let t = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        let bc = sub3(c, b);
        let q = [bp[0] - t * bc[0], bp[1] - t * bc[1], bp[2] - t * bc[2]];
        return dot3(q, q);
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    let closest = [
        a[0] + ab[0] * v + ac[0] * w,
        a[1] + ab[1] * v + ac[1] * w,
        a[2] + ab[2] * v + ac[2] * w,
    ];
    sqdist3(p, closest)
}

/// Mean exact Euclidean distance from each point to its nearest triangle.
pub fn point_to_mesh(pc: &PointCloud, mesh: &TriangleMesh) -> Result<f64> {
    if mesh.faces.is_empty() {
        return Err(Error::Argument("mesh has no faces".into()));
    }
    let dists: Vec<f64> = pc
        .points
        .iter()
        .map(|&p| {
            let mut best = f64::INFINITY;
            for f in &mesh.faces {
                let d = sqdist_point_triangle(
                    p,
                    mesh.vertices[f[0] as usize],
                    mesh.vertices[f[1] as usize],
                    mesh.vertices[f[2] as usize],
                );
                if d < best {
                    best = d;
                }
            }
            math::sqrt(best)
        })
        .collect();
    Ok(math::pairwise_sum(&dists) / pc.len() as f64)
}

/// Fraction of exact label matches.
pub fn accuracy(predictions: &[usize], truth: &[usize]) -> Result<f64> {
    if predictions.len() != truth.len() {
        return Err(Error::Dimension(alloc::format!(
            "{} predictions vs {} labels",
            predictions.len(),
            truth.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Argument("no predictions".into()));
    }
    let correct = predictions
        .iter()
        .zip(truth)
        .filter(|(p, t)| p == t)
        .count();
    Ok(correct as f64 / predictions.len() as f64)
}

/// Metrics for one noise level.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalLevel {
    pub sigma2: f64,
    pub cd: f64,
    pub p2m: f64,
    pub accuracy: f64,
}

/// Per-noise-level evaluation results, in requested-level order.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub levels: Vec<EvalLevel>,
}

/// Noise seed for (level index, cloud index), derived so every cloud and
/// level gets an independent stream family.
fn level_noise_seed(base: u64, level_idx: usize, cloud_idx: usize) -> u64 {
    use rand_chacha::rand_core::RngCore;
    let mut r = rng::stream(base, rng::domain::LEVEL, level_idx as u64, cloud_idx as u64);
    r.next_u64()
}

/// Noise -> (optional denoiser) -> metrics, per level: Chamfer and
/// point-to-mesh against the clean references, recognition accuracy from
/// the recognizer's predictions. `denoiser` None evaluates the no-op
/// baseline (the noisy clouds themselves). `meshes` is indexed by
/// identity label. `predict_points` subsamples each candidate cloud
/// (deterministically) before classification only; geometry metrics
/// always use the full cloud.
pub fn evaluate_pipeline(
    clouds: &[PointCloud],
    meshes: &[TriangleMesh],
    denoiser: Option<&DenoiserWeights>,
    rec: &RecognizerNet,
    levels: &[f64],
    noise_seed: u64,
    predict_points: Option<usize>,
) -> Result<MetricReport> {
    if clouds.is_empty() {
        return Err(Error::Argument("no test clouds".into()));
    }
    if let Some(m) = predict_points {
        if m <= rec.config.k {
            return Err(Error::Argument(alloc::format!(
                "predict_points {m} must exceed k {}",
                rec.config.k
            )));
        }
    }
    let mut truth = Vec::with_capacity(clouds.len());
    for (i, pc) in clouds.iter().enumerate() {
        let id = pc
            .identity
            .ok_or_else(|| Error::Argument(alloc::format!("test cloud {i} has no identity")))?;
        if id >= meshes.len() {
            return Err(Error::Argument(alloc::format!(
                "cloud {i} has identity {id}, only {} meshes",
                meshes.len()
            )));
        }
        truth.push(id);
    }
    for &s in levels {
        if !(s >= 0.0) {
            return Err(Error::Argument(alloc::format!(
                "noise variance must be non-negative, got {s}"
            )));
        }
    }

    let mut report = MetricReport {
        levels: Vec::with_capacity(levels.len()),
    };
    for (li, &sigma2) in levels.iter().enumerate() {
        let mut cd_sum = Vec::with_capacity(clouds.len());
        let mut p2m_sum = Vec::with_capacity(clouds.len());
        let mut preds = Vec::with_capacity(clouds.len());
        for (ci, clean) in clouds.iter().enumerate() {
            let noisy = add_gaussian_noise(
                clean,
                &NoiseSpec {
                    variance: sigma2,
                    seed: level_noise_seed(noise_seed, li, ci),
                },
            )?;
            let candidate = match denoiser {
                Some(w) => denoise(&noisy, w)?,
                None => noisy,
            };
            cd_sum.push(chamfer(&candidate, clean));
            p2m_sum.push(point_to_mesh(&candidate, &meshes[truth[ci]])?);
            let for_pred = match predict_points {
                Some(m) => {
                    let mut r = rng::stream(
                        noise_seed,
                        rng::domain::SUBSAMPLE,
                        li as u64,
                        ci as u64,
                    );
                    recognizer::subsample_cloud(&candidate, m, &mut r)
                }
                None => candidate,
            };
            preds.push(recognizer::predict(rec, &for_pred)?);
        }
        report.levels.push(EvalLevel {
            sigma2,
            cd: math::pairwise_sum(&cd_sum) / clouds.len() as f64,
            p2m: math::pairwise_sum(&p2m_sum) / clouds.len() as f64,
            accuracy: accuracy(&preds, &truth)?,
        });
    }
    Ok(report)
}
