//! The TOP mapping between point clouds and three orthogonal plane images.
//!
//! Each plane treats one coordinate as a gray value and rasterizes the other
//! two onto an H x W grid (the structured remapping f). The x-y plane holds
//! z as gray, the y-z plane holds x, the z-x plane holds y. Cells keep the
//! indices of their resident points, so the inverse f' can hand a denoised
//! gray value back to every source point and `combine` can rebuild a cloud
//! that is index-aligned with the input.
//!
//! Orientation: the first in-plane coordinate (u) maps to columns, the
//! second (v) to rows, row 0 at v_min. Quantization is floor of the linear
//! map over [min, max], with max clamped into the last cell. Colliding
//! points aggregate by arithmetic mean. Empty cells carry a sentinel equal
//! to the minimum gray minus one cell extent, paired with occupancy 0, so
//! the generator sees an explicit "no data" signal.

use alloc::vec;
use alloc::vec::Vec;

use crate::pointcloud::PointCloud;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// The coordinate serving as a plane's gray value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlaneAxis {
    X,
    Y,
    Z,
}

impl PlaneAxis {
    /// Fixed plane order used everywhere (x-y, y-z, z-x planes).
    pub const ALL: [PlaneAxis; 3] = [PlaneAxis::Z, PlaneAxis::X, PlaneAxis::Y];

    /// Index of the gray coordinate in a point.
    pub fn gray_index(self) -> usize {
        match self {
            PlaneAxis::X => 0,
            PlaneAxis::Y => 1,
            PlaneAxis::Z => 2,
        }
    }

    /// Indices of the (u, v) in-plane coordinates.
    pub fn in_plane_indices(self) -> (usize, usize) {
        match self {
            PlaneAxis::Z => (0, 1),
            PlaneAxis::X => (1, 2),
            PlaneAxis::Y => (2, 0),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PlaneAxis::X => "x",
            PlaneAxis::Y => "y",
            PlaneAxis::Z => "z",
        }
    }
}

/// One rasterized plane: gray grid, occupancy, and the point indices that
/// landed in each cell.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneImage {
    pub axis: PlaneAxis,
    pub height: usize,
    pub width: usize,
    /// Row-major gray values; empty cells hold `fill`.
    pub grid: Vec<f64>,
    pub occupancy: Vec<bool>,
    pub index_map: Vec<Vec<u32>>,
    /// ((u_min, u_max), (v_min, v_max)) of the in-plane coordinates.
    pub in_plane_ranges: ((f64, f64), (f64, f64)),
    /// Sentinel written into empty cells: min gray minus one cell extent.
    pub fill: f64,
}

impl PlaneImage {
    /// Flat cell index of each source point, length N.
    pub fn point_cells(&self, n_points: usize) -> Vec<u32> {
        let mut cells = vec![0u32; n_points];
        for (c, members) in self.index_map.iter().enumerate() {
            for &p in members {
                cells[p as usize] = c as u32;
            }
        }
        cells
    }
}

/// The three planes of one cloud, in [`PlaneAxis::ALL`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct TopProjection {
    pub planes: [PlaneImage; 3],
    pub n_points: usize,
    pub resolution: (usize, usize),
}

impl TopProjection {
    pub fn plane(&self, axis: PlaneAxis) -> &PlaneImage {
        self.planes
            .iter()
            .find(|p| p.axis == axis)
            .expect("all three planes present")
    }
}

/// Quantize a coordinate into `n` cells over [min, max]; a zero range maps
/// everything to cell 0, the max lands in the last cell.
fn quantize(coord: f64, min: f64, max: f64, n: usize) -> usize {
    let range = max - min;
    if range <= 0.0 {
        return 0;
    }
    let i = crate::math::floor((coord - min) / range * n as f64);
    if i < 0.0 {
        0
    } else if i >= n as f64 {
        n - 1
    } else {
        i as usize
    }
}

fn build_plane(pc: &PointCloud, axis: PlaneAxis, h: usize, w: usize) -> Result<PlaneImage> {
    let (ui, vi) = axis.in_plane_indices();
    let gi = axis.gray_index();
    let n = pc.len();

    let mut u_min = f64::INFINITY;
    let mut u_max = f64::NEG_INFINITY;
    let mut v_min = f64::INFINITY;
    let mut v_max = f64::NEG_INFINITY;
    for p in &pc.points {
        u_min = u_min.min(p[ui]);
        u_max = u_max.max(p[ui]);
        v_min = v_min.min(p[vi]);
        v_max = v_max.max(p[vi]);
    }
    if n >= 2 && u_max - u_min <= 0.0 && v_max - v_min <= 0.0 {
        return Err(Error::Degenerate(alloc::format!(
            "cloud is collinear along the {} axis: the {}-{} plane has no in-plane spread",
            axis.name(),
            PlaneAxis::ALL
                .iter()
                .find(|a| a.gray_index() == ui)
                .map(|a| a.name())
                .unwrap_or("?"),
            PlaneAxis::ALL
                .iter()
                .find(|a| a.gray_index() == vi)
                .map(|a| a.name())
                .unwrap_or("?"),
        )));
    }

    let mut index_map: Vec<Vec<u32>> = vec![Vec::new(); h * w];
    for (i, p) in pc.points.iter().enumerate() {
        let col = quantize(p[ui], u_min, u_max, w);
        let row = quantize(p[vi], v_min, v_max, h);
        index_map[row * w + col].push(i as u32);
    }

    let mut grid = vec![0.0; h * w];
    let mut occupancy = vec![false; h * w];
    let mut min_gray = f64::INFINITY;
    for (c, members) in index_map.iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        let mut sum = 0.0;
        for &p in members {
            sum += pc.points[p as usize][gi];
        }
        let mean = sum / members.len() as f64;
        grid[c] = mean;
        occupancy[c] = true;
        min_gray = min_gray.min(mean);
    }

    let mut cell_extent = ((u_max - u_min) / w as f64).max((v_max - v_min) / h as f64);
    if cell_extent <= 0.0 {
        cell_extent = 1.0;
    }
    let fill = min_gray - cell_extent;
    for (c, occ) in occupancy.iter().enumerate() {
        if !occ {
            grid[c] = fill;
        }
    }

    Ok(PlaneImage {
        axis,
        height: h,
        width: w,
        grid,
        occupancy,
        index_map,
        in_plane_ranges: ((u_min, u_max), (v_min, v_max)),
        fill,
    })
}

/// Rasterize a cloud onto the three orthogonal planes (the remapping f).
pub fn project(pc: &PointCloud, resolution: (usize, usize)) -> Result<TopProjection> {
    let (h, w) = resolution;
    if h < 8 || w < 8 {
        return Err(Error::Argument(alloc::format!(
            "resolution {h}x{w} too small, need at least 8x8"
        )));
    }
    let planes = [
        build_plane(pc, PlaneAxis::Z, h, w)?,
        build_plane(pc, PlaneAxis::X, h, w)?,
        build_plane(pc, PlaneAxis::Y, h, w)?,
    ];
    Ok(TopProjection {
        planes,
        n_points: pc.len(),
        resolution,
    })
}

/// The inverse mapping f': hand each source point the denoised gray value
/// of its cell. Output is index-aligned with the original cloud.
pub fn unproject(plane: &PlaneImage, denoised_grid: &[f64], n_points: usize) -> Result<Vec<f64>> {
    if denoised_grid.len() != plane.height * plane.width {
        return Err(Error::Dimension(alloc::format!(
            "denoised grid has {} cells, plane is {}x{}",
            denoised_grid.len(),
            plane.height,
            plane.width
        )));
    }
    let mut out = vec![0.0; n_points];
    let mut seen = 0usize;
    for (c, members) in plane.index_map.iter().enumerate() {
        for &p in members {
            if p as usize >= n_points {
                return Err(Error::Dimension(alloc::format!(
                    "plane indexes point {p}, cloud has {n_points}"
                )));
            }
            out[p as usize] = denoised_grid[c];
            seen += 1;
        }
    }
    if seen != n_points {
        return Err(Error::Dimension(alloc::format!(
            "plane covers {seen} of {n_points} points"
        )));
    }
    Ok(out)
}

/// Rebuild a cloud from per-point coordinates: x from the y-z plane, y from
/// the z-x plane, z from the x-y plane. Labels are left unset; callers that
/// denoise a labeled cloud copy its labels onto the result.
pub fn combine(x_vals: &[f64], y_vals: &[f64], z_vals: &[f64]) -> Result<PointCloud> {
    if x_vals.len() != y_vals.len() || y_vals.len() != z_vals.len() {
        return Err(Error::Dimension(alloc::format!(
            "coordinate arrays differ in length: {} / {} / {}",
            x_vals.len(),
            y_vals.len(),
            z_vals.len()
        )));
    }
    let points = x_vals
        .iter()
        .zip(y_vals)
        .zip(z_vals)
        .map(|((&x, &y), &z)| [x, y, z])
        .collect();
    PointCloud::new(points)
}

/// Pack a plane as a 2-channel tensor: channel 0 gray (empties at fill),
/// channel 1 occupancy as 0/1.
pub fn plane_to_tensor(plane: &PlaneImage) -> Tensor {
    let hw = plane.height * plane.width;
    let mut values = Vec::with_capacity(2 * hw);
    values.extend_from_slice(&plane.grid);
    values.extend(plane.occupancy.iter().map(|&o| if o { 1.0 } else { 0.0 }));
    Tensor::new(vec![2, plane.height, plane.width], values).expect("shape consistent")
}

/// Extract the gray channel of a `[c, h, w]` tensor (c >= 1).
pub fn tensor_to_grid(t: &Tensor) -> Result<Vec<f64>> {
    let shape = t.shape();
    if shape.len() != 3 || shape[0] == 0 {
        return Err(Error::Dimension(alloc::format!(
            "expected [c, h, w] with c >= 1, got {shape:?}"
        )));
    }
    let hw = shape[1] * shape[2];
    Ok(t.values()[..hw].to_vec())
}

/// Aggregate per-point scalar values onto a plane's cells by mean, using
/// that plane's point assignment. Empty cells get the plane's fill value.
///
/// This builds the clean-target grid during training: the clean cloud's
/// gray coordinates rasterized through the noisy cloud's cell assignment.
pub fn aggregate_on_plane(plane: &PlaneImage, values: &[f64]) -> Result<Vec<f64>> {
    let mut grid = vec![plane.fill; plane.height * plane.width];
    for (c, members) in plane.index_map.iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        let mut sum = 0.0;
        for &p in members {
            let i = p as usize;
            if i >= values.len() {
                return Err(Error::Dimension(alloc::format!(
                    "plane indexes point {i}, value array has {}",
                    values.len()
                )));
            }
            sum += values[i];
        }
        grid[c] = sum / members.len() as f64;
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointcloud::{add_gaussian_noise, NoiseSpec};
    use crate::rng;
    use alloc::vec;
    use proptest::prelude::*;

    fn cloud(points: Vec<[f64; 3]>) -> PointCloud {
        PointCloud::new(points).unwrap()
    }

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut r = rng::stream(seed, rng::domain::SAMPLE, 0, 0);
        cloud(
            (0..n)
                .map(|_| {
                    [
                        rng::uniform(&mut r, -50.0, 50.0),
                        rng::uniform(&mut r, -50.0, 50.0),
                        rng::uniform(&mut r, -20.0, 20.0),
                    ]
                })
                .collect(),
        )
    }

    #[test]
    fn single_point_occupies_one_cell_per_plane() {
        let pc = cloud(vec![[0.0, 0.0, 0.0]]);
        let top = project(&pc, (8, 8)).unwrap();
        for plane in &top.planes {
            assert_eq!(plane.occupancy.iter().filter(|&&o| o).count(), 1);
            assert!(plane.occupancy[0], "single point lands in cell (0,0)");
            assert_eq!(plane.grid[0], 0.0);
        }
    }

    #[test]
    fn three_point_z_plane_matches_hand_quantization() {
        // x in [-50, 50] over 16 columns; y range is flat so every point
        // sits in row 0. Hand mapping: col = floor((x+50)/100*16), with
        // x = 50 clamped into column 15.
        let pc = cloud(vec![[-50.0, 0.0, 0.0], [0.0, 0.0, 0.0], [50.0, 0.0, 10.0]]);
        let top = project(&pc, (16, 16)).unwrap();
        let z = top.plane(PlaneAxis::Z);
        let occupied: Vec<usize> = (0..256).filter(|&c| z.occupancy[c]).collect();
        assert_eq!(occupied, vec![0, 8, 15]);
        assert_eq!(z.grid[0], 0.0);
        assert_eq!(z.grid[8], 0.0);
        assert_eq!(z.grid[15], 10.0);
        assert_eq!(z.index_map[0], vec![0]);
        assert_eq!(z.index_map[8], vec![1]);
        assert_eq!(z.index_map[15], vec![2]);
    }

    #[test]
    fn collision_aggregates_by_mean() {
        // Two points in the same cell with gray values 4 and 6 -> 5.
        let pc = cloud(vec![
            [0.0, 0.0, 4.0],
            [0.1, 0.1, 6.0],
            [100.0, 100.0, 0.0],
        ]);
        let top = project(&pc, (8, 8)).unwrap();
        let z = top.plane(PlaneAxis::Z);
        assert_eq!(z.grid[0], 5.0);
        assert_eq!(z.index_map[0], vec![0, 1]);
    }

    #[test]
    fn axis_collinear_cloud_is_degenerate() {
        // All points on a line parallel to z: the x-y plane would collapse
        // every z value into one cell.
        let pc = cloud(vec![[1.0, 2.0, 0.0], [1.0, 2.0, 5.0], [1.0, 2.0, 9.0]]);
        assert!(matches!(project(&pc, (8, 8)), Err(Error::Degenerate(_))));
    }

    #[test]
    fn flat_single_axis_is_not_degenerate() {
        // Zero range on one in-plane axis maps to index 0 and succeeds.
        let pc = cloud(vec![[-50.0, 0.0, 0.0], [0.0, 0.0, 1.0], [50.0, 0.0, 10.0]]);
        assert!(project(&pc, (16, 16)).is_ok());
    }

    #[test]
    fn tiny_resolution_is_rejected() {
        let pc = random_cloud(10, 1);
        assert!(matches!(project(&pc, (4, 8)), Err(Error::Argument(_))));
    }

    #[test]
    fn unproject_identity_grid_recovers_aggregates() {
        let pc = random_cloud(64, 2);
        let top = project(&pc, (16, 16)).unwrap();
        for plane in &top.planes {
            let vals = unproject(plane, &plane.grid, pc.len()).unwrap();
            let gi = plane.axis.gray_index();
            for (i, &v) in vals.iter().enumerate() {
                // Each point gets its cell's mean, which for a singleton
                // cell is its own coordinate.
                let cell = plane.point_cells(pc.len())[i] as usize;
                if plane.index_map[cell].len() == 1 {
                    assert_eq!(v.to_bits(), pc.points[i][gi].to_bits());
                }
            }
        }
    }

    #[test]
    fn unproject_shape_mismatch_errors() {
        let pc = random_cloud(10, 3);
        let top = project(&pc, (8, 8)).unwrap();
        assert!(matches!(
            unproject(&top.planes[0], &[0.0; 10], pc.len()),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn collision_cell_broadcasts_denoised_value() {
        let pc = cloud(vec![
            [0.0, 0.0, 4.0],
            [0.1, 0.1, 6.0],
            [100.0, 100.0, 0.0],
        ]);
        let top = project(&pc, (8, 8)).unwrap();
        let z = top.plane(PlaneAxis::Z);
        let mut grid = z.grid.clone();
        grid[0] = 5.5;
        let vals = unproject(z, &grid, 3).unwrap();
        assert_eq!(vals[0], 5.5);
        assert_eq!(vals[1], 5.5);
    }

    #[test]
    fn combine_length_mismatch_errors() {
        assert!(matches!(
            combine(&[0.0], &[0.0, 1.0], &[0.0]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn round_trip_is_bit_exact_without_collisions() {
        // Grids fine enough that every point gets its own cell.
        let mut checked = 0;
        for seed in 0..30 {
            let pc = random_cloud(40, 100 + seed);
            let top = project(&pc, (64, 64)).unwrap();
            if top
                .planes
                .iter()
                .any(|pl| pl.index_map.iter().any(|m| m.len() > 1))
            {
                continue;
            }
            let x = unproject(top.plane(PlaneAxis::X), &top.plane(PlaneAxis::X).grid, 40).unwrap();
            let y = unproject(top.plane(PlaneAxis::Y), &top.plane(PlaneAxis::Y).grid, 40).unwrap();
            let z = unproject(top.plane(PlaneAxis::Z), &top.plane(PlaneAxis::Z).grid, 40).unwrap();
            let back = combine(&x, &y, &z).unwrap();
            for (p, q) in pc.points.iter().zip(&back.points) {
                for a in 0..3 {
                    assert_eq!(p[a].to_bits(), q[a].to_bits());
                }
            }
            checked += 1;
        }
        assert!(checked >= 10, "only {checked} collision-free cases");
    }

    #[test]
    fn round_trip_error_bounded_by_cell_spread_with_collisions() {
        // Coarse grid forces collisions; every reconstructed coordinate
        // must stay within [min, max] of its cell's original values.
        for seed in 0..10 {
            let pc = random_cloud(256, 200 + seed);
            let top = project(&pc, (8, 8)).unwrap();
            let n = pc.len();
            let per_axis: Vec<Vec<f64>> = top
                .planes
                .iter()
                .map(|pl| unproject(pl, &pl.grid, n).unwrap())
                .collect();
            for (pi, plane) in top.planes.iter().enumerate() {
                let gi = plane.axis.gray_index();
                for members in &plane.index_map {
                    if members.is_empty() {
                        continue;
                    }
                    let lo = members
                        .iter()
                        .map(|&p| pc.points[p as usize][gi])
                        .fold(f64::INFINITY, f64::min);
                    let hi = members
                        .iter()
                        .map(|&p| pc.points[p as usize][gi])
                        .fold(f64::NEG_INFINITY, f64::max);
                    for &p in members {
                        let got = per_axis[pi][p as usize];
                        assert!(
                            got >= lo - 1e-12 && got <= hi + 1e-12,
                            "reconstructed {got} outside [{lo}, {hi}]"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn translation_before_normalization_does_not_change_projection() {
        // Exactly representable coordinates and translations keep the
        // normalization arithmetic bit-identical, which is the strongest
        // form of the equivariance claim.
        let base: Vec<[f64; 3]> = (0..8)
            .map(|i| {
                [
                    (i as f64) * 0.25 - 1.0,
                    ((i * 3 % 8) as f64) * 0.5 - 2.0,
                    ((i * 5 % 8) as f64) * 0.25,
                ]
            })
            .collect();
        let pc = cloud(base.clone());
        let shifted = cloud(base.iter().map(|p| [p[0] + 16.0, p[1] - 8.0, p[2] + 4.0]).collect());
        let (n1, _) = crate::pointcloud::normalize_unit_box(&pc, 100.0).unwrap();
        let (n2, _) = crate::pointcloud::normalize_unit_box(&shifted, 100.0).unwrap();
        let t1 = project(&n1, (16, 16)).unwrap();
        let t2 = project(&n2, (16, 16)).unwrap();
        assert_eq!(t1, t2);
    }

    #[test]
    fn plane_tensor_round_trip_is_bit_exact() {
        let pc = random_cloud(100, 7);
        let top = project(&pc, (16, 16)).unwrap();
        for plane in &top.planes {
            let t = plane_to_tensor(plane);
            assert_eq!(t.shape(), &[2, 16, 16]);
            let grid = tensor_to_grid(&t).unwrap();
            for (a, b) in grid.iter().zip(&plane.grid) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
            // Occupancy channel is exactly 0/1.
            for (c, &o) in plane.occupancy.iter().enumerate() {
                assert_eq!(t.values()[256 + c], if o { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn empty_cells_hold_fill_sentinel_below_min_gray() {
        let pc = random_cloud(20, 11);
        let top = project(&pc, (16, 16)).unwrap();
        for plane in &top.planes {
            let min_gray = plane
                .grid
                .iter()
                .zip(&plane.occupancy)
                .filter(|(_, &o)| o)
                .map(|(&g, _)| g)
                .fold(f64::INFINITY, f64::min);
            assert!(plane.fill < min_gray);
            for (c, &o) in plane.occupancy.iter().enumerate() {
                if !o {
                    assert_eq!(plane.grid[c], plane.fill);
                }
            }
        }
    }

    #[test]
    fn aggregate_on_plane_builds_clean_targets() {
        let clean = cloud(vec![
            [0.0, 0.0, 4.0],
            [0.1, 0.1, 6.0],
            [100.0, 100.0, 0.0],
        ]);
        let noisy = add_gaussian_noise(&clean, &NoiseSpec { variance: 1.0, seed: 5 }).unwrap();
        let top = project(&noisy, (8, 8)).unwrap();
        let z = top.plane(PlaneAxis::Z);
        let clean_z: Vec<f64> = clean.points.iter().map(|p| p[2]).collect();
        let target = aggregate_on_plane(z, &clean_z).unwrap();
        // Every occupied cell holds the mean clean gray of its residents.
        for (c, members) in z.index_map.iter().enumerate() {
            if members.is_empty() {
                assert_eq!(target[c], z.fill);
            } else {
                let want: f64 = members.iter().map(|&p| clean_z[p as usize]).sum::<f64>()
                    / members.len() as f64;
                assert_eq!(target[c].to_bits(), want.to_bits());
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn every_point_appears_exactly_once_per_plane(
            n in prop_oneof![Just(1usize), Just(10), Just(512)],
            seed in 0u64..1000,
        ) {
            let pc = random_cloud(n, seed);
            let top = project(&pc, (16, 16)).unwrap();
            for plane in &top.planes {
                let mut counts = vec![0usize; n];
                for members in &plane.index_map {
                    for &p in members {
                        counts[p as usize] += 1;
                    }
                }
                prop_assert!(counts.iter().all(|&c| c == 1));
                // Occupancy mirrors the index map exactly.
                for (c, members) in plane.index_map.iter().enumerate() {
                    prop_assert_eq!(plane.occupancy[c], !members.is_empty());
                }
            }
        }
    }
}
