//! Generalized-ICP frame tracking.
//!
//! Every point carries a plane-like covariance `V diag(eps, 1, 1) Vᵀ` whose
//! thin axis is the local surface normal. Alignment minimizes
//! `Σ dᵀ (C_b + R C_a Rᵀ)⁻¹ d` with `d = b − T a` by Gauss–Newton, refreshing
//! nearest-neighbour correspondences every iteration.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Matrix6, SymmetricEigen, Vector3, Vector6};

use crate::error::{Error, Result};
use crate::geometry::{backproject, hat, CameraIntrinsics, Pose, Twist};
use crate::kdtree::KdTree;
use crate::raster::Raster;

pub const COVARIANCE_EPSILON: f64 = 1e-3;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CovPointCloud {
    pub points: Vec<Vector3<f64>>,
    pub covariances: Vec<Matrix3<f64>>,
}

impl CovPointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn transformed(&self, pose: &Pose) -> CovPointCloud {
        let r = pose.rotation_matrix();
        CovPointCloud {
            points: self
                .points
                .iter()
                .map(|p| pose.transform_point(p))
                .collect(),
            covariances: self
                .covariances
                .iter()
                .map(|c| r * c * r.transpose())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignmentResult {
    /// Maps source coordinates into the target frame.
    pub pose: Pose,
    pub inlier_ratio: f64,
    pub rmse: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GicpConfig {
    pub max_corr_dist: f64,
    pub max_iter: usize,
    pub min_correspondences: usize,
    pub k_neighbors: usize,
    pub voxel_size: f64,
    pub convergence_eps: f64,
}

impl Default for GicpConfig {
    fn default() -> Self {
        GicpConfig {
            max_corr_dist: 0.1,
            max_iter: 30,
            min_correspondences: 10,
            k_neighbors: 10,
            voxel_size: 0.05,
            convergence_eps: 1e-6,
        }
    }
}

/// Plane-like covariance with the given unit normal.
pub fn plane_covariance(eigvecs_ascending: &Matrix3<f64>) -> Matrix3<f64> {
    let d = Matrix3::from_diagonal(&Vector3::new(COVARIANCE_EPSILON, 1.0, 1.0));
    eigvecs_ascending * d * eigvecs_ascending.transpose()
}

/// Replaces the spectrum of a scatter matrix by `(eps, 1, 1)`, keeping its axes.
pub fn regularize_covariance(scatter: &Matrix3<f64>) -> Matrix3<f64> {
    let eig = SymmetricEigen::new(*scatter);
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&a, &b| {
        eig.eigenvalues[a]
            .total_cmp(&eig.eigenvalues[b])
            .then(a.cmp(&b))
    });
    let v = Matrix3::from_columns(&[
        eig.eigenvectors.column(idx[0]).into_owned(),
        eig.eigenvectors.column(idx[1]).into_owned(),
        eig.eigenvectors.column(idx[2]).into_owned(),
    ]);
    let c = plane_covariance(&v);
    (c + c.transpose()) * 0.5
}

pub fn estimate_covariances(points: &[Vector3<f64>], k_neighbors: usize) -> Result<CovPointCloud> {
    if points.len() <= k_neighbors || k_neighbors < 4 {
        return Err(Error::TooFewPoints {
            needed: k_neighbors.max(4),
            got: points.len(),
        });
    }
    let tree = KdTree::new(points);
    let covariances = points
        .iter()
        .map(|p| {
            let nn = tree.knn(p, k_neighbors);
            let n = nn.len() as f64;
            let mean = nn
                .iter()
                .map(|nb| tree.point(nb.index))
                .sum::<Vector3<f64>>()
                / n;
            let mut scatter = Matrix3::zeros();
            for nb in &nn {
                let d = tree.point(nb.index) - mean;
                scatter += d * d.transpose();
            }
            regularize_covariance(&(scatter / n))
        })
        .collect();
    Ok(CovPointCloud {
        points: points.to_vec(),
        covariances,
    })
}

struct Correspondence {
    src: usize,
    tgt: usize,
}

/// `Σ dᵀ M d` for fixed correspondences and fixed information matrices.
fn fixed_cost(
    source: &CovPointCloud,
    target: &CovPointCloud,
    pose: &Pose,
    corr: &[Correspondence],
    info: &[Matrix3<f64>],
) -> f64 {
    corr.iter()
        .zip(info)
        .map(|(c, m)| {
            let d = target.points[c.tgt] - pose.transform_point(&source.points[c.src]);
            d.dot(&(m * d))
        })
        .sum()
}

/// Value of the G-ICP objective at `pose` with correspondences found at `pose`
/// under the inlier gate.
pub fn gicp_cost(
    source: &CovPointCloud,
    target: &CovPointCloud,
    pose: &Pose,
    max_corr_dist: f64,
) -> f64 {
    let tree = KdTree::new(&target.points);
    let (corr, _) = correspondences(source, &tree, pose, max_corr_dist);
    let info = information(source, target, pose, &corr);
    fixed_cost(source, target, pose, &corr, &info)
}

fn correspondences(
    source: &CovPointCloud,
    tree: &KdTree,
    pose: &Pose,
    max_dist: f64,
) -> (Vec<Correspondence>, f64) {
    let max_sq = max_dist * max_dist;
    let mut sq_sum = 0.0;
    let corr = source
        .points
        .iter()
        .enumerate()
        .filter_map(|(i, p)| {
            let nn = tree.nearest(&pose.transform_point(p))?;
            (nn.dist_sq < max_sq).then(|| {
                sq_sum += nn.dist_sq;
                Correspondence {
                    src: i,
                    tgt: nn.index,
                }
            })
        })
        .collect();
    (corr, sq_sum)
}

fn information(
    source: &CovPointCloud,
    target: &CovPointCloud,
    pose: &Pose,
    corr: &[Correspondence],
) -> Vec<Matrix3<f64>> {
    let r = pose.rotation_matrix();
    corr.iter()
        .map(|c| {
            let combined =
                target.covariances[c.tgt] + r * source.covariances[c.src] * r.transpose();
            combined.try_inverse().unwrap_or_else(Matrix3::identity)
        })
        .collect()
}

/// One damped Gauss–Newton step on fixed correspondences. Returns the
/// accepted pose, its cost and the norm of the applied twist.
fn gauss_newton_step(
    source: &CovPointCloud,
    target: &CovPointCloud,
    pose: &Pose,
    corr: &[Correspondence],
    info: &[Matrix3<f64>],
) -> (Pose, f64, f64) {
    let mut h = Matrix6::<f64>::zeros();
    let mut g = Vector6::<f64>::zeros();
    for (c, m) in corr.iter().zip(info) {
        let ta = pose.transform_point(&source.points[c.src]);
        let d = target.points[c.tgt] - ta;
        // d(exp(ξ) T) ≈ d + [Ta]ₓ ω − v
        let mut j = nalgebra::Matrix3x6::<f64>::zeros();
        j.fixed_view_mut::<3, 3>(0, 0).copy_from(&hat(&ta));
        j.fixed_view_mut::<3, 3>(0, 3)
            .copy_from(&(-Matrix3::identity()));
        let jt_m = j.transpose() * m;
        h += jt_m * j;
        g += jt_m * d;
    }
    let cost0 = fixed_cost(source, target, pose, corr, info);
    let damping = 1e-9 * h.trace().max(1e-12);
    let h_damped = h + Matrix6::identity() * damping;
    let Some(step) = h_damped.cholesky().map(|ch| -ch.solve(&g)) else {
        return (*pose, cost0, 0.0);
    };
    let mut scale = 1.0;
    for _ in 0..12 {
        let xi = Twist(step * scale);
        let cand = Pose::exp(&xi).compose(pose);
        let cost = fixed_cost(source, target, &cand, corr, info);
        if cost <= cost0 {
            return (cand, cost, xi.norm());
        }
        scale *= 0.5;
    }
    (*pose, cost0, 0.0)
}

pub fn gicp_align(
    source: &CovPointCloud,
    target: &CovPointCloud,
    init: &Pose,
    cfg: &GicpConfig,
) -> Result<AlignmentResult> {
    if source.len() < 50 || target.len() < 50 {
        return Err(Error::TooFewPoints {
            needed: 50,
            got: source.len().min(target.len()),
        });
    }
    let tree = KdTree::new(&target.points);
    let mut pose = *init;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.max_iter {
        let (corr, _) = correspondences(source, &tree, &pose, cfg.max_corr_dist);
        if corr.len() < cfg.min_correspondences {
            return Err(Error::TrackingLost(corr.len()));
        }
        let info = information(source, target, &pose, &corr);
        let (next, _, step_norm) = gauss_newton_step(source, target, &pose, &corr, &info);
        pose = next;
        iterations += 1;
        if step_norm < cfg.convergence_eps {
            converged = true;
            break;
        }
    }
    let (corr, sq_sum) = correspondences(source, &tree, &pose, cfg.max_corr_dist);
    if corr.len() < cfg.min_correspondences {
        return Err(Error::TrackingLost(corr.len()));
    }
    Ok(AlignmentResult {
        pose,
        inlier_ratio: corr.len() as f64 / source.len() as f64,
        rmse: (sq_sum / corr.len() as f64).sqrt(),
        iterations,
        converged,
    })
}

/// Averages points falling in the same voxel. Output order follows the voxel
/// key, which makes the result independent of input order.
pub fn voxel_downsample(points: &[Vector3<f64>], voxel: f64) -> Vec<Vector3<f64>> {
    let mut cells: BTreeMap<(i64, i64, i64), (Vector3<f64>, usize)> = BTreeMap::new();
    for p in points {
        let key = (
            (p.x / voxel).floor() as i64,
            (p.y / voxel).floor() as i64,
            (p.z / voxel).floor() as i64,
        );
        let e = cells.entry(key).or_insert((Vector3::zeros(), 0));
        e.0 += p;
        e.1 += 1;
    }
    cells.into_values().map(|(s, n)| s / n as f64).collect()
}

/// Camera-frame points of every valid depth pixel.
pub fn depth_points(depth: &Raster, k: &CameraIntrinsics) -> Vec<Vector3<f64>> {
    let mut out = Vec::new();
    for y in 0..depth.height {
        for x in 0..depth.width {
            if let Ok(p) = backproject(x as f64, y as f64, depth.get(x, y), k) {
                out.push(p);
            }
        }
    }
    out
}

/// Builds the camera-frame source cloud of a depth image.
pub fn source_cloud(
    depth: &Raster,
    k: &CameraIntrinsics,
    cfg: &GicpConfig,
) -> Result<CovPointCloud> {
    let pts = depth_points(depth, k);
    if pts.len() < 50 {
        return Err(Error::Empty("depth image has fewer than 50 valid pixels"));
    }
    let down = voxel_downsample(&pts, cfg.voxel_size);
    estimate_covariances(&down, cfg.k_neighbors)
}

/// Tracks one depth frame against map samples (world frame) starting from the
/// previous pose. Returns the camera-to-world alignment and the camera-frame
/// source cloud whose covariances seed new Gaussians.
pub fn track_frame(
    depth: &Raster,
    k: &CameraIntrinsics,
    map_samples: &CovPointCloud,
    prev_pose: &Pose,
    cfg: &GicpConfig,
) -> Result<(AlignmentResult, CovPointCloud)> {
    let source = source_cloud(depth, k, cfg)?;
    let result = gicp_align(&source, map_samples, prev_pose, cfg)?;
    Ok((result, source))
}

pub fn is_keyframe(result: &AlignmentResult, threshold: f64) -> bool {
    result.inlier_ratio < threshold
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn planar(n: usize, rng: &mut ChaCha8Rng) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    0.0,
                )
            })
            .collect()
    }

    #[test]
    fn planar_normals() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cloud = estimate_covariances(&planar(300, &mut rng), 10).unwrap();
        for c in &cloud.covariances {
            let eig = SymmetricEigen::new(*c);
            let i = eig.eigenvalues.imin();
            let n = eig.eigenvectors.column(i);
            assert!(n.z.abs() > 0.999);
        }
    }

    #[test]
    fn regularized_spectrum_is_fixed() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ball: Vec<_> = (0..400)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )
            })
            .collect();
        let cloud = estimate_covariances(&ball, 10).unwrap();
        for c in &cloud.covariances {
            let mut ev: Vec<f64> = SymmetricEigen::new(*c)
                .eigenvalues
                .iter()
                .copied()
                .collect();
            ev.sort_by(f64::total_cmp);
            assert!(
                (ev[0] - 1e-3).abs() < 1e-12
                    && (ev[1] - 1.0).abs() < 1e-12
                    && (ev[2] - 1.0).abs() < 1e-12
            );
            assert!((c - c.transpose()).norm() < 1e-12);
        }
    }

    #[test]
    fn too_few_points() {
        let pts = vec![Vector3::zeros(), Vector3::x(), Vector3::y()];
        assert!(matches!(
            estimate_covariances(&pts, 4),
            Err(Error::TooFewPoints { .. })
        ));
    }

    #[test]
    fn keyframe_threshold_is_strict() {
        let mut r = AlignmentResult {
            pose: Pose::identity(),
            inlier_ratio: 0.79,
            rmse: 0.0,
            iterations: 0,
            converged: true,
        };
        assert!(is_keyframe(&r, 0.80));
        r.inlier_ratio = 0.80;
        assert!(!is_keyframe(&r, 0.80));
        r.inlier_ratio = 1.0;
        assert!(!is_keyframe(&r, 0.80));
    }

    #[test]
    fn disjoint_clouds_lose_tracking() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = estimate_covariances(&planar(200, &mut rng), 10).unwrap();
        let b = a.transformed(&Pose::from_translation(Vector3::new(10.0, 0.0, 0.0)));
        let r = gicp_align(&a, &b, &Pose::identity(), &GicpConfig::default());
        assert!(matches!(r, Err(Error::TrackingLost(_))));
    }

    #[test]
    fn empty_depth_is_rejected() {
        let k = CameraIntrinsics::new(50.0, 50.0, 16.0, 16.0, 32, 32).unwrap();
        let depth = Raster::zeros(32, 32, 1);
        let r = track_frame(
            &depth,
            &k,
            &CovPointCloud::default(),
            &Pose::identity(),
            &GicpConfig::default(),
        );
        assert!(matches!(r, Err(Error::Empty(_))));
    }

    #[test]
    fn voxel_downsample_averages() {
        let pts = vec![
            Vector3::new(0.01, 0.01, 0.01),
            Vector3::new(0.03, 0.01, 0.01),
            Vector3::new(0.2, 0.0, 0.0),
        ];
        let d = voxel_downsample(&pts, 0.05);
        assert_eq!(d.len(), 2);
        assert!((d[0] - Vector3::new(0.02, 0.01, 0.01)).norm() < 1e-12);
    }
}
