#![allow(dead_code)]

use lego_slam::gicp::estimate_covariances;
use lego_slam::map::LanguageGaussian;
use lego_slam::{CameraIntrinsics, CovPointCloud, GaussianMap, Pose, Raster, Twist};
use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn intrinsics(w: usize, h: usize, f: f64) -> CameraIntrinsics {
    CameraIntrinsics::new(f, f, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0, w, h).unwrap()
}

pub fn random_unit_quat(rng: &mut ChaCha8Rng) -> [f64; 4] {
    let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    q.map(|v| v / n)
}

pub fn gaussian(
    position: Vector3<f64>,
    scale: f64,
    opacity_logit: f64,
    feature: Vec<f64>,
) -> LanguageGaussian {
    LanguageGaussian {
        id: 0,
        position,
        rotation: [1.0, 0.0, 0.0, 0.0],
        log_scale: Vector3::repeat(scale.ln()),
        opacity_logit,
        color: Vector3::new(0.5, 0.5, 0.5),
        feature,
        anchor: 0,
    }
}

/// Random Gaussians in front of an identity camera with the given field of view.
pub fn random_scene(
    rng: &mut ChaCha8Rng,
    n: usize,
    dim: usize,
    k: &CameraIntrinsics,
) -> GaussianMap {
    let mut map = GaussianMap::new(dim);
    let (hx, hy) = (0.5 * k.width as f64 / k.fx, 0.5 * k.height as f64 / k.fy);
    for _ in 0..n {
        let z = rng.random_range(1.5..3.0);
        let position = Vector3::new(
            rng.random_range(-0.8..0.8) * hx * z,
            rng.random_range(-0.8..0.8) * hy * z,
            z,
        );
        let g = LanguageGaussian {
            id: 0,
            position,
            rotation: random_unit_quat(rng),
            log_scale: Vector3::from_fn(|_, _| rng.random_range(0.04f64..0.2).ln()),
            opacity_logit: rng.random_range(-1.0..2.0),
            color: Vector3::from_fn(|_, _| rng.random_range(0.0..1.0)),
            feature: (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
            anchor: 0,
        };
        map.push(g);
    }
    map
}

pub fn random_raster(rng: &mut ChaCha8Rng, w: usize, h: usize, c: usize) -> Raster {
    let data = (0..w * h * c)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    Raster::from_data(w, h, c, data).unwrap()
}

pub fn random_twist(rng: &mut ChaCha8Rng, max_angle: f64, max_trans: f64) -> Twist {
    let axis = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)).normalize();
    let dir = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)).normalize();
    Twist::new(
        axis * rng.random_range(0.0..max_angle),
        dir * rng.random_range(0.0..max_trans),
    )
}

/// Points on a room corner (floor and two walls) with a sphere and a box,
/// a well-conditioned structure for registration.
pub fn structured_points(rng: &mut ChaCha8Rng, n: usize, noise: f64) -> Vec<Vector3<f64>> {
    let mut pts = Vec::with_capacity(n);
    while pts.len() < n {
        let u: f64 = rng.random_range(-1.0..1.0);
        let v: f64 = rng.random_range(-1.0..1.0);
        let p = match pts.len() % 5 {
            0 => Vector3::new(u, v, 0.0),
            1 => Vector3::new(-1.0, u, 0.5 + 0.5 * v),
            2 => Vector3::new(u, -1.0, 0.5 + 0.5 * v),
            3 => {
                let d = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)).normalize();
                Vector3::new(0.3, 0.2, 0.35) + d * 0.25
            }
            _ => {
                // box faces
                let face = rng.random_range(0..3);
                let s: f64 = if rng.random_bool(0.5) { 0.15 } else { -0.15 };
                let mut p = Vector3::new(u * 0.15, v * 0.15, 0.0);
                p[face] = s;
                p + Vector3::new(-0.4, 0.4, 0.2)
            }
        };
        let jitter = Vector3::from_fn(|_, _| rng.random_range(-noise..=noise));
        pts.push(p + jitter);
    }
    pts
}

pub fn cloud(points: &[Vector3<f64>]) -> CovPointCloud {
    estimate_covariances(points, 10).unwrap()
}

pub fn transform_all(pose: &Pose, pts: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
    pts.iter().map(|p| pose.transform_point(p)).collect()
}

pub fn rotation_about_z(angle: f64) -> UnitQuaternion<f64> {
    UnitQuaternion::from_axis_angle(&Vector3::z_axis(), angle)
}

pub const GROUPS: [&str; 6] = [
    "position",
    "rotation",
    "log_scale",
    "opacity",
    "color",
    "feature",
];

/// Largest relative error per attribute group between analytic and central
/// finite-difference gradients of a random linear functional of the render.
#[derive(Debug, Default, Clone)]
pub struct GradCheck {
    pub max_rel: [f64; 6],
    pub checked: usize,
    pub skipped: usize,
}

fn functional(
    out: &lego_slam::RenderOutput,
    c_rgb: &Raster,
    c_depth: &Raster,
    c_feat: &Raster,
) -> f64 {
    let dot = |a: &Raster, b: &Raster| a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum::<f64>();
    dot(&out.rgb, c_rgb) + dot(&out.depth, c_depth) + dot(&out.feat, c_feat)
}

fn param_mut(g: &mut LanguageGaussian, group: usize, c: usize) -> &mut f64 {
    match group {
        0 => &mut g.position[c],
        1 => &mut g.rotation[c],
        2 => &mut g.log_scale[c],
        3 => &mut g.opacity_logit,
        4 => &mut g.color[c],
        _ => &mut g.feature[c],
    }
}

pub fn gradient_check(
    map: &GaussianMap,
    k: &CameraIntrinsics,
    rng: &mut ChaCha8Rng,
    h: f64,
) -> GradCheck {
    use lego_slam::{render, render_backward};
    let cam = Pose::identity();
    let (w, hgt) = (k.width, k.height);
    let c_rgb = random_raster(rng, w, hgt, 3);
    let c_depth = random_raster(rng, w, hgt, 1);
    let c_feat = random_raster(rng, w, hgt, map.feature_dim);
    let base = render(map, &cam, k);
    let structure = base.structure();
    let grads = render_backward(map, &base, &c_rgb, &c_depth, &c_feat).unwrap();
    let mut report = GradCheck::default();
    for i in 0..map.len() {
        for group in 0..6 {
            let comps = match group {
                0 | 2 | 4 => 3,
                1 => 4,
                3 => 1,
                _ => map.feature_dim,
            };
            for c in 0..comps {
                let analytic = match group {
                    0 => grads.position[i][c],
                    1 => grads.rotation[i][c],
                    2 => grads.log_scale[i][c],
                    3 => grads.opacity_logit[i],
                    4 => grads.color[i][c],
                    _ => grads.feature_row(i)[c],
                };
                let eval = |delta: f64| {
                    let mut m = map.clone();
                    *param_mut(&mut m.gaussians[i], group, c) += delta;
                    let out = render(&m, &cam, k);
                    (
                        functional(&out, &c_rgb, &c_depth, &c_feat),
                        out.structure() == structure,
                    )
                };
                let (lp, sp) = eval(h);
                let (lm, sm) = eval(-h);
                if !(sp && sm) {
                    report.skipped += 1;
                    continue;
                }
                let numeric = (lp - lm) / (2.0 * h);
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                report.max_rel[group] = report.max_rel[group].max(rel);
                report.checked += 1;
            }
        }
    }
    report
}
