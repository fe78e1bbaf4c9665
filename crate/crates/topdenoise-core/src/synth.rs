//! Synthetic face-like dataset: per-identity Gaussian-bump heightfields
//! sampled on jittered grids, smooth low-frequency expression perturbations,
//! reference meshes, and 60/40 train-test split construction.
//!
//! Every cloud is a single-valued surface z = h(x, y) + p(x, y) over the
//! square [-EXTENT/2, EXTENT/2]^2: h is the identity's geometry (a smooth
//! ramp carrying signed feature bumps, like a relief scanned obliquely),
//! p the per-sample expression field (zero for neutral samples). The ramp
//! keeps h monotone along both axes, so x and y are themselves single-valued
//! over the other two coordinates and all three plane projections are
//! invertible. Identity separation comes from bump placement; it is
//! asserted, not hoped for (see the margin tests).

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand_chacha::rand_core::RngCore;

use crate::metrics::TriangleMesh;
use crate::pointcloud::{ExpressionTag, PointCloud, CANONICAL_EXTENT};
use crate::rng;
use crate::{math, Error, Result};

/// Bumps per identity: one broad carrier ramp plus eleven feature bumps.
pub const BUMPS: usize = 12;

/// Expression field strength used by the dataset defaults. Chosen so
/// expression variation stays well inside the identity separation margin.
pub const DEFAULT_EXPRESSION_AMPLITUDE: f64 = 1.0;

const HALF: f64 = CANONICAL_EXTENT / 2.0;

/// One identity's surface: z = sum of Gaussian radial bumps. Coefficients
/// are stored flat as [cx, cy, width, amplitude] per bump.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticIdentity {
    pub id: usize,
    pub basis_coefficients: Vec<f64>,
    pub seed: u64,
}

impl SyntheticIdentity {
    /// Draws bump parameters for identity `id` from the dataset seed.
    /// Bump 0 is a broad carrier far outside the square whose tail forms a
    /// smooth diagonal ramp across it; the rest are gentle feature bumps of
    /// either sign. The carrier's per-axis slope over the square (about
    /// 0.4..0.8) exceeds the worst feature slope (0.607*A/w <= 0.25), so h
    /// stays strictly increasing along x and y. That keeps every coordinate
    /// a near-single-valued function of the other two, which plane-wise
    /// gray reconstruction depends on: a fold would put points with the
    /// same (y, z) at two distant x values and their cell average in empty
    /// space.
    pub fn new(id: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, rng::domain::IDENTITY, id as u64, 0);
        let mut coeffs = Vec::with_capacity(4 * BUMPS);
        coeffs.push(rng::uniform(&mut r, 140.0, 160.0));
        coeffs.push(rng::uniform(&mut r, 140.0, 160.0));
        coeffs.push(rng::uniform(&mut r, 190.0, 210.0));
        coeffs.push(rng::uniform(&mut r, 280.0, 320.0));
        for _ in 1..BUMPS {
            coeffs.push(rng::uniform(&mut r, -35.0, 35.0));
            coeffs.push(rng::uniform(&mut r, -35.0, 35.0));
            coeffs.push(rng::uniform(&mut r, 20.0, 30.0));
            let mag = rng::uniform(&mut r, 4.0, 8.0);
            let sign = if r.next_u64() & 1 == 0 { 1.0 } else { -1.0 };
            coeffs.push(sign * mag);
        }
        SyntheticIdentity {
            id,
            basis_coefficients: coeffs,
            seed,
        }
    }

    /// Neutral surface height at (x, y), referenced so h(0, 0) is the sum
    /// of the feature bumps alone (the carrier's large offset cancels).
    pub fn height(&self, x: f64, y: f64) -> f64 {
        let mut z = 0.0;
        for b in self.basis_coefficients.chunks_exact(4) {
            let (dx, dy) = (x - b[0], y - b[1]);
            let w = b[2];
            z += b[3] * math::exp(-(dx * dx + dy * dy) / (2.0 * w * w));
        }
        let c = &self.basis_coefficients[..4];
        z - c[3] * math::exp(-(c[0] * c[0] + c[1] * c[1]) / (2.0 * c[2] * c[2]))
    }
}

/// Smooth low-frequency perturbation p(x, y) = amplitude * sum of three
/// separable sine products with wavelengths of 60..150 model units.
/// Zero amplitude is the neutral expression by definition.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpressionField {
    terms: [[f64; 5]; 3],
    amplitude: f64,
}

impl ExpressionField {
    /// Per-sample field for (identity, sample_seed). The same pair always
    /// yields the same field regardless of amplitude, so neutral and
    /// expressive variants of a sample share phase structure.
    pub fn sample(identity: &SyntheticIdentity, sample_seed: u64, amplitude: f64) -> Self {
        let mut r = rng::stream(
            identity.seed,
            rng::domain::EXPRESSION,
            identity.id as u64,
            sample_seed,
        );
        let tau = 2.0 * core::f64::consts::PI;
        let mut terms = [[0.0; 5]; 3];
        for t in &mut terms {
            *t = [
                rng::uniform(&mut r, 0.4, 1.0),
                rng::uniform(&mut r, tau / 150.0, tau / 60.0),
                rng::uniform(&mut r, tau / 150.0, tau / 60.0),
                rng::uniform(&mut r, 0.0, tau),
                rng::uniform(&mut r, 0.0, tau),
            ];
        }
        ExpressionField { terms, amplitude }
    }

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        let mut p = 0.0;
        for t in &self.terms {
            p += t[0] * math::sin(t[1] * x + t[3]) * math::sin(t[2] * y + t[4]);
        }
        self.amplitude * p
    }
}

/// Samples `n_points` on the identity's surface over a jittered grid.
/// z equals height + expression exactly at each sample's (x, y); the
/// cloud is labeled with the identity and an expression tag (neutral iff
/// amplitude is zero).
pub fn generate_face(
    identity: &SyntheticIdentity,
    expression_amplitude: f64,
    sample_seed: u64,
    n_points: usize,
) -> Result<PointCloud> {
    if n_points < 64 {
        return Err(Error::Argument(format!(
            "need at least 64 points, got {n_points}"
        )));
    }
    if !(expression_amplitude >= 0.0) {
        return Err(Error::Argument(format!(
            "expression amplitude must be non-negative, got {expression_amplitude}"
        )));
    }
    let field = ExpressionField::sample(identity, sample_seed, expression_amplitude);
    let mut r = rng::stream(
        identity.seed,
        rng::domain::SAMPLE,
        identity.id as u64,
        sample_seed,
    );
    // Jittered grid: g*g cells covering the square, one sample per cell,
    // then a deterministic subset when n_points is not a perfect square.
    let g = {
        let mut g = 1usize;
        while g * g < n_points {
            g += 1;
        }
        g
    };
    let cell = CANONICAL_EXTENT / g as f64;
    let mut points = Vec::with_capacity(g * g);
    for row in 0..g {
        for col in 0..g {
            let x = -HALF + (col as f64 + rng::uniform(&mut r, 0.0, 1.0)) * cell;
            let y = -HALF + (row as f64 + rng::uniform(&mut r, 0.0, 1.0)) * cell;
            let z = identity.height(x, y) + field.eval(x, y);
            points.push([x, y, z]);
        }
    }
    if points.len() > n_points {
        let keep = rng::subsample_indices(&mut r, points.len(), n_points);
        points = keep.into_iter().map(|i| points[i]).collect();
    }
    let tag = if expression_amplitude == 0.0 {
        ExpressionTag::Neutral
    } else {
        ExpressionTag::NonNeutral
    };
    PointCloud::with_labels(points, Some(identity.id), Some(tag))
}

/// Reference mesh for the neutral surface: `grid` x `grid` vertices on h
/// over the square, two triangles per cell. Not watertight (open sheet).
pub fn generate_mesh(identity: &SyntheticIdentity, grid: usize) -> Result<TriangleMesh> {
    if grid < 2 {
        return Err(Error::Argument(format!(
            "mesh grid needs at least 2 vertices per side, got {grid}"
        )));
    }
    let step = CANONICAL_EXTENT / (grid - 1) as f64;
    let mut vertices = Vec::with_capacity(grid * grid);
    for row in 0..grid {
        for col in 0..grid {
            let x = -HALF + col as f64 * step;
            let y = -HALF + row as f64 * step;
            vertices.push([x, y, identity.height(x, y)]);
        }
    }
    let mut faces = Vec::with_capacity(2 * (grid - 1) * (grid - 1));
    for row in 0..grid - 1 {
        for col in 0..grid - 1 {
            let v00 = (row * grid + col) as u32;
            let v01 = v00 + 1;
            let v10 = v00 + grid as u32;
            let v11 = v10 + 1;
            faces.push([v00, v01, v11]);
            faces.push([v00, v11, v10]);
        }
    }
    TriangleMesh::new(vertices, faces)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitSetting {
    /// Training data drawn from neutral samples only.
    Neutral,
    /// Training data drawn uniformly across all expressions.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// One dataset sample: where it lives, whose face it is, how it was made.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub path: String,
    pub identity: usize,
    pub sample_index: usize,
    pub expression: ExpressionTag,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub samples: Vec<SampleRecord>,
    pub setting: SplitSetting,
    pub seed: u64,
}

impl DatasetManifest {
    pub fn train(&self) -> impl Iterator<Item = &SampleRecord> {
        self.samples.iter().filter(|s| s.split == Split::Train)
    }

    pub fn test(&self) -> impl Iterator<Item = &SampleRecord> {
        self.samples.iter().filter(|s| s.split == Split::Test)
    }
}

/// Assigns train/test splits over `identities.len() * samples_per_identity`
/// samples, 60% train. Sample indices below `neutral_per_identity` are the
/// neutral ones (generated with amplitude 0). Neutral setting requires
/// enough neutral samples to fill the train quota.
pub fn build_splits(
    identities: &[SyntheticIdentity],
    samples_per_identity: usize,
    neutral_per_identity: usize,
    setting: SplitSetting,
    seed: u64,
) -> Result<DatasetManifest> {
    if identities.is_empty() || samples_per_identity == 0 {
        return Err(Error::Argument("empty dataset layout".into()));
    }
    if neutral_per_identity > samples_per_identity {
        return Err(Error::Argument(format!(
            "{neutral_per_identity} neutral of {samples_per_identity} samples"
        )));
    }
    let total = identities.len() * samples_per_identity;
    let train_target = total * 3 / 5;
    let mut samples = Vec::with_capacity(total);
    for identity in identities {
        for j in 0..samples_per_identity {
            let tag = if j < neutral_per_identity {
                ExpressionTag::Neutral
            } else {
                ExpressionTag::NonNeutral
            };
            samples.push(SampleRecord {
                path: format!("id_{}/sample_{j}.xyz", identity.id),
                identity: identity.id,
                sample_index: j,
                expression: tag,
                split: Split::Test,
            });
        }
    }

    let mut r = rng::stream(seed, rng::domain::SPLIT, 0, 0);
    match setting {
        SplitSetting::Random => {
            let mut order: Vec<usize> = (0..total).collect();
            rng::shuffle(&mut r, &mut order);
            for &i in order.iter().take(train_target) {
                samples[i].split = Split::Train;
            }
        }
        SplitSetting::Neutral => {
            let neutral: Vec<usize> = (0..total)
                .filter(|&i| samples[i].expression == ExpressionTag::Neutral)
                .collect();
            if neutral.len() < train_target {
                return Err(Error::Argument(format!(
                    "neutral setting needs {train_target} neutral samples, have {}",
                    neutral.len()
                )));
            }
            let mut order = neutral;
            rng::shuffle(&mut r, &mut order);
            for &i in order.iter().take(train_target) {
                samples[i].split = Split::Train;
            }
        }
    }
    Ok(DatasetManifest {
        samples,
        setting,
        seed,
    })
}
