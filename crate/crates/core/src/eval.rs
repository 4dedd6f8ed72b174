//! Point-cloud accuracy and completeness.

use std::collections::HashMap;

use crate::error::{MvsError, Result};
use crate::ply::PointCloud;
use crate::scene::Scene;

/// Accuracy ignores reconstructed points farther than this many
/// thresholds from the ground truth.
pub const OUTLIER_CAP: f64 = 10.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    pub completeness: f64,
    pub overall: f64,
    /// Reconstructed points that passed the outlier cap.
    pub inliers: usize,
}

/// Uniform hash grid for nearest-neighbour queries.
pub struct Grid<'a> {
    cell: f64,
    cells: HashMap<[i64; 3], Vec<usize>>,
    points: &'a [[f32; 3]],
    /// Cell-index bounds of the occupied region.
    lo: [i64; 3],
    hi: [i64; 3],
}

impl<'a> Grid<'a> {
    pub fn new(points: &'a [[f32; 3]]) -> Self {
        assert!(!points.is_empty(), "grid over an empty set");
        let mut mn = [f64::INFINITY; 3];
        let mut mx = [f64::NEG_INFINITY; 3];
        for p in points {
            for k in 0..3 {
                mn[k] = mn[k].min(p[k] as f64);
                mx[k] = mx[k].max(p[k] as f64);
            }
        }
        let diag = (0..3).map(|k| (mx[k] - mn[k]).powi(2)).sum::<f64>().sqrt();
        // About one point per occupied cell for surface-like sets.
        let cell = if diag > 0.0 { diag / (points.len() as f64).sqrt() } else { 1.0 };
        let mut grid = Grid {
            cell,
            cells: HashMap::new(),
            points,
            lo: [i64::MAX; 3],
            hi: [i64::MIN; 3],
        };
        for (i, p) in points.iter().enumerate() {
            let c = grid.key(p);
            for k in 0..3 {
                grid.lo[k] = grid.lo[k].min(c[k]);
                grid.hi[k] = grid.hi[k].max(c[k]);
            }
            grid.cells.entry(c).or_default().push(i);
        }
        grid
    }

    fn key(&self, p: &[f32; 3]) -> [i64; 3] {
        p.map(|v| (v as f64 / self.cell).floor() as i64)
    }

    /// Distance from `q` to the nearest stored point.
    pub fn nearest(&self, q: &[f32; 3]) -> f64 {
        let c = self.key(q);
        let mut best = f64::INFINITY;
        // Rings needed to cover the occupied bounds from the query cell.
        let reach = (0..3)
            .map(|k| (c[k] - self.lo[k]).abs().max((self.hi[k] - c[k]).abs()))
            .max()
            .unwrap_or(0);
        for r in 0..=reach {
            // Points outside ring r-1 are at least (r - 1) cells away.
            if best <= (r - 1).max(0) as f64 * self.cell {
                break;
            }
            let side = 2 * r + 1;
            let ring = (side.pow(3) - (side - 2).max(0).pow(3)) as usize;
            if ring > self.points.len() {
                // Far from the data: a linear scan is cheaper than the ring.
                let rest = self.points.iter().map(|p| dist(q, p)).fold(f64::INFINITY, f64::min);
                return best.min(rest);
            }
            for dx in -r..=r {
                for dy in -r..=r {
                    let edge = r == 0 || dx.abs() == r || dy.abs() == r;
                    let step = if edge { 1 } else { 2 * r as usize };
                    for dz in (-r..=r).step_by(step) {
                        if let Some(ids) = self.cells.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) {
                            for &i in ids {
                                best = best.min(dist(q, &self.points[i]));
                            }
                        }
                    }
                }
            }
        }
        best
    }
}

fn dist(a: &[f32; 3], b: &[f32; 3]) -> f64 {
    (0..3).map(|k| (a[k] as f64 - b[k] as f64).powi(2)).sum::<f64>().sqrt()
}

/// Accuracy (reconstruction to ground truth, capped at
/// [`OUTLIER_CAP`] thresholds), completeness (ground truth to
/// reconstruction) and their mean.
pub fn evaluate(pc: &PointCloud, gt: &PointCloud, threshold: f64) -> Result<Metrics> {
    if pc.is_empty() || gt.is_empty() {
        return Err(MvsError::Evaluation(format!(
            "empty point cloud ({} reconstructed, {} ground truth)",
            pc.len(),
            gt.len()
        )));
    }
    let gt_grid = Grid::new(&gt.points);
    let cap = OUTLIER_CAP * threshold;
    let (mut sum, mut inliers) = (0.0, 0usize);
    for p in &pc.points {
        let d = gt_grid.nearest(p);
        if d <= cap {
            sum += d;
            inliers += 1;
        }
    }
    if inliers == 0 {
        return Err(MvsError::Evaluation(format!("every reconstructed point lies beyond the outlier cap {cap}")));
    }
    let rec_grid = Grid::new(&pc.points);
    let completeness = gt.points.iter().map(|q| rec_grid.nearest(q)).sum::<f64>() / gt.len() as f64;
    let accuracy = sum / inliers as f64;
    Ok(Metrics {
        accuracy,
        completeness,
        overall: 0.5 * (accuracy + completeness),
        inliers,
    })
}

/// Every valid ground-truth pixel of every view, back-projected.
pub fn ground_truth_cloud(scene: &Scene) -> PointCloud {
    let mut pc = PointCloud::default();
    for v in &scene.views {
        let Some(depth) = &v.depth else { continue };
        for (i, &d) in depth.data.iter().enumerate() {
            if d.is_finite() && d > 0.0 {
                let (x, y) = (i % depth.width, i / depth.width);
                let p = v.camera.backproject(x as f64, y as f64, d as f64);
                pc.push([p.x as f32, p.y as f32, p.z as f32], v.image.pixel(y, x));
            }
        }
    }
    pc
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(points: Vec<[f32; 3]>) -> PointCloud {
        let n = points.len();
        PointCloud {
            points,
            colors: vec![[0; 3]; n],
        }
    }

    #[test]
    fn grid_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts: Vec<[f32; 3]> = (0..500)
            .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(0.0..0.1)])
            .collect();
        let grid = Grid::new(&pts);
        for _ in 0..200 {
            let q = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-1.0..1.0)];
            let brute = pts.iter().map(|p| dist(&q, p)).fold(f64::INFINITY, f64::min);
            assert_eq!(grid.nearest(&q), brute);
        }
    }

    #[test]
    fn identity_shift_and_subset() {
        let pts: Vec<[f32; 3]> = (0..10).map(|i| [i as f32, 0.0, 0.0]).collect();
        let gt = cloud(pts.clone());
        let m = evaluate(&gt, &gt, 0.1).unwrap();
        assert_eq!((m.accuracy, m.completeness, m.overall), (0.0, 0.0, 0.0));
        let shifted = cloud(pts.iter().map(|p| [p[0], p[1] + 0.25, p[2]]).collect());
        let m = evaluate(&shifted, &gt, 0.1).unwrap();
        assert!((m.accuracy - 0.25).abs() < 1e-7 && (m.completeness - 0.25).abs() < 1e-7);
        let half = cloud(pts[..5].to_vec());
        let m = evaluate(&half, &gt, 0.1).unwrap();
        assert_eq!(m.accuracy, 0.0);
        assert!(m.completeness > 0.0);
        assert!(evaluate(&PointCloud::default(), &gt, 0.1).is_err());
    }

    #[test]
    fn outliers_only_affect_accuracy_through_the_cap() {
        let gt = cloud(vec![[0.0; 3]]);
        let pc = cloud(vec![[0.0, 0.0, 0.05], [0.0, 0.0, 5.0]]);
        let m = evaluate(&pc, &gt, 0.1).unwrap();
        assert!((m.accuracy - 0.05).abs() < 1e-7);
        assert_eq!(m.inliers, 1);
        assert!((m.completeness - 0.05).abs() < 1e-7);
    }
}
