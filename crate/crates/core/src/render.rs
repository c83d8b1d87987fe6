//! CPU splatting renderer with an analytic backward pass.
//!
//! Gaussians are projected with the first-order (EWA) approximation, sorted
//! globally front to back by camera depth (ties by ID) and alpha-composited
//! per pixel. RGB, depth and the compact feature channels share one
//! compositing pass. The forward pass records every pixel's contributors so
//! the backward pass can replay them without sorting again.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Pose};
use crate::map::{sigmoid, GaussianMap, LanguageGaussian};
use crate::raster::Raster;

pub const NEAR_PLANE: f64 = 0.01;
pub const DILATION: f64 = 0.3;
pub const ALPHA_MAX: f64 = 0.99;
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
const DEPTH_EPS: f64 = 1e-6;
/// Centers further off-axis than this multiple of the half field of view are
/// culled; the linearized projection is meaningless there.
pub const GUARD_BAND: f64 = 1.3;

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedGaussian {
    /// Index into `GaussianMap::gaussians`.
    pub source: usize,
    pub id: u64,
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    pub conic: Matrix2<f64>,
    pub depth: f64,
    pub opacity: f64,
    /// Inclusive pixel bounds `(x0, x1, y0, y1)` of the region where alpha can reach 1/255.
    pub bounds: (usize, usize, usize, usize),
}

/// Rotation matrix of a (not necessarily unit) quaternion `(w, x, y, z)`,
/// normalized first.
pub fn quat_to_matrix(q: &[f64; 4]) -> Matrix3<f64> {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Gradient of a loss with respect to the raw quaternion given its gradient
/// with respect to the rotation matrix.
fn quat_backward(q: &[f64; 4], d_r: &Matrix3<f64>) -> [f64; 4] {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    let dw = Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0) * 2.0;
    let dx = Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x) * 2.0;
    let dy = Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y) * 2.0;
    let dz = Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0) * 2.0;
    let g = [d_r.dot(&dw), d_r.dot(&dx), d_r.dot(&dy), d_r.dot(&dz)];
    let unit = [w, x, y, z];
    let radial: f64 = g.iter().zip(&unit).map(|(a, b)| a * b).sum();
    [
        (g[0] - unit[0] * radial) / n,
        (g[1] - unit[1] * radial) / n,
        (g[2] - unit[2] * radial) / n,
        (g[3] - unit[3] * radial) / n,
    ]
}

/// Intermediate quantities of the projection shared by forward and backward.
struct Projection {
    w: Matrix3<f64>,
    pc: Vector3<f64>,
    j: Matrix2x3<f64>,
    rot: Matrix3<f64>,
    scale2: Vector3<f64>,
    m: Matrix3<f64>,
    cov2d: Matrix2<f64>,
}

fn projection_jacobian(pc: &Vector3<f64>, k: &CameraIntrinsics) -> Matrix2x3<f64> {
    let iz = 1.0 / pc.z;
    Matrix2x3::new(
        k.fx * iz,
        0.0,
        -k.fx * pc.x * iz * iz,
        0.0,
        k.fy * iz,
        -k.fy * pc.y * iz * iz,
    )
}

fn project_internal(
    g: &LanguageGaussian,
    w: &Matrix3<f64>,
    t_cw: &Vector3<f64>,
    k: &CameraIntrinsics,
) -> Option<Projection> {
    let pc = w * g.position + t_cw;
    if pc.z <= NEAR_PLANE {
        return None;
    }
    let j = projection_jacobian(&pc, k);
    let rot = quat_to_matrix(&g.rotation);
    let scale2 = g.log_scale.map(|s| (2.0 * s).exp());
    let sigma = rot * Matrix3::from_diagonal(&scale2) * rot.transpose();
    let m = w * sigma * w.transpose();
    let cov2d = j * m * j.transpose() + Matrix2::identity() * DILATION;
    Some(Projection {
        w: *w,
        pc,
        j,
        rot,
        scale2,
        m,
        cov2d,
    })
}

fn world_to_camera(cam_pose: &Pose) -> (Matrix3<f64>, Vector3<f64>) {
    let inv = cam_pose.inverse();
    (inv.rotation_matrix(), inv.translation)
}

/// Projects one Gaussian into the camera. `None` means culled: behind the
/// near plane, too transparent to ever reach alpha 1/255, or with its
/// visible footprint entirely outside the image.
pub fn project_gaussian(
    g: &LanguageGaussian,
    source: usize,
    cam_pose: &Pose,
    k: &CameraIntrinsics,
) -> Option<ProjectedGaussian> {
    let (w, t) = world_to_camera(cam_pose);
    project_with(g, source, &w, &t, k)
}

fn project_with(
    g: &LanguageGaussian,
    source: usize,
    w: &Matrix3<f64>,
    t: &Vector3<f64>,
    k: &CameraIntrinsics,
) -> Option<ProjectedGaussian> {
    let p = project_internal(g, w, t, k)?;
    let opacity = sigmoid(g.opacity_logit);
    let det = p.cov2d.determinant();
    if !(det > 0.0) {
        return None;
    }
    let conic = Matrix2::new(
        p.cov2d[(1, 1)],
        -p.cov2d[(0, 1)],
        -p.cov2d[(1, 0)],
        p.cov2d[(0, 0)],
    ) / det;
    let (lim_x, lim_y) = (
        GUARD_BAND * 0.5 * k.width as f64 / k.fx,
        GUARD_BAND * 0.5 * k.height as f64 / k.fy,
    );
    if (p.pc.x / p.pc.z).abs() > lim_x || (p.pc.y / p.pc.z).abs() > lim_y {
        return None;
    }
    let mean2d = Vector2::new(k.fx * p.pc.x / p.pc.z + k.cx, k.fy * p.pc.y / p.pc.z + k.cy);
    // alpha >= 1/255 requires δᵀ Q δ <= 2 ln(255 o)
    let level = 2.0 * (opacity / ALPHA_MIN).ln();
    if !(level > 0.0) {
        return None;
    }
    let rx = (level * p.cov2d[(0, 0)]).sqrt();
    let ry = (level * p.cov2d[(1, 1)]).sqrt();
    let x0 = (mean2d.x - rx).ceil().max(0.0);
    let x1 = (mean2d.x + rx).floor().min(k.width as f64 - 1.0);
    let y0 = (mean2d.y - ry).ceil().max(0.0);
    let y1 = (mean2d.y + ry).floor().min(k.height as f64 - 1.0);
    if !(x0 <= x1 && y0 <= y1) {
        return None;
    }
    Some(ProjectedGaussian {
        source,
        id: g.id,
        mean2d,
        cov2d: p.cov2d,
        conic,
        depth: p.pc.z,
        opacity,
        bounds: (x0 as usize, x1 as usize, y0 as usize, y1 as usize),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Contribution {
    /// Index into `RenderOutput::projected`.
    proj: u32,
    alpha: f64,
    gauss: f64,
    transmittance: f64,
    clamped: bool,
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub rgb: Raster,
    pub depth: Raster,
    pub feat: Raster,
    pub acc_alpha: Raster,
    pub cam_pose: Pose,
    pub intrinsics: CameraIntrinsics,
    /// Visible Gaussians in compositing order.
    pub projected: Vec<ProjectedGaussian>,
    depth_num: Vec<f64>,
    contributors: Vec<Vec<Contribution>>,
}

impl RenderOutput {
    pub fn width(&self) -> usize {
        self.rgb.width
    }

    pub fn height(&self) -> usize {
        self.rgb.height
    }

    /// Number of Gaussians blended at a pixel.
    pub fn contributor_count(&self, pixel: usize) -> usize {
        self.contributors[pixel].len()
    }

    /// Transmittance in front of each contributor at a pixel, in compositing order.
    pub fn transmittances(&self, pixel: usize) -> Vec<f64> {
        self.contributors[pixel]
            .iter()
            .map(|c| c.transmittance)
            .collect()
    }

    /// Map-level IDs of the contributors at a pixel with their clamp state;
    /// two renders with equal structures are on the same smooth piece of the
    /// rendering function.
    pub fn structure(&self) -> Vec<Vec<(u64, bool)>> {
        self.contributors
            .iter()
            .map(|list| {
                list.iter()
                    .map(|c| (self.projected[c.proj as usize].id, c.clamped))
                    .collect()
            })
            .collect()
    }
}

/// Renders RGB, depth, compact features and accumulated opacity.
pub fn render(map: &GaussianMap, cam_pose: &Pose, k: &CameraIntrinsics) -> RenderOutput {
    let (w, t) = world_to_camera(cam_pose);
    let mut projected: Vec<ProjectedGaussian> = map
        .gaussians
        .iter()
        .enumerate()
        .filter_map(|(i, g)| project_with(g, i, &w, &t, k))
        .collect();
    projected.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.id.cmp(&b.id)));

    let (width, height) = (k.width, k.height);
    let npix = width * height;
    let dim = map.feature_dim;
    let mut contributors: Vec<Vec<Contribution>> = vec![Vec::new(); npix];
    for (pi, pg) in projected.iter().enumerate() {
        let (x0, x1, y0, y1) = pg.bounds;
        let (a, b, c) = (pg.conic[(0, 0)], pg.conic[(0, 1)], pg.conic[(1, 1)]);
        for y in y0..=y1 {
            let dy = y as f64 - pg.mean2d.y;
            for x in x0..=x1 {
                let dx = x as f64 - pg.mean2d.x;
                let power = -0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy);
                let gauss = power.exp();
                let raw = pg.opacity * gauss;
                if raw < ALPHA_MIN {
                    continue;
                }
                let clamped = raw > ALPHA_MAX;
                contributors[y * width + x].push(Contribution {
                    proj: pi as u32,
                    alpha: if clamped { ALPHA_MAX } else { raw },
                    gauss,
                    transmittance: 0.0,
                    clamped,
                });
            }
        }
    }

    let mut rgb = Raster::zeros(width, height, 3);
    let mut depth = Raster::zeros(width, height, 1);
    let mut feat = Raster::zeros(width, height, dim);
    let mut acc_alpha = Raster::zeros(width, height, 1);
    let mut depth_num = vec![0.0; npix];
    for (p, list) in contributors.iter_mut().enumerate() {
        let mut tr = 1.0;
        let mut acc = 0.0;
        let mut dnum = 0.0;
        let mut col = Vector3::zeros();
        let out_feat = feat.pixel_mut(p);
        for c in list.iter_mut() {
            let pg = &projected[c.proj as usize];
            let g = &map.gaussians[pg.source];
            c.transmittance = tr;
            let wgt = c.alpha * tr;
            col += g.color * wgt;
            for (o, f) in out_feat.iter_mut().zip(&g.feature) {
                *o += f * wgt;
            }
            dnum += pg.depth * wgt;
            acc += wgt;
            tr *= 1.0 - c.alpha;
        }
        rgb.pixel_mut(p).copy_from_slice(col.as_slice());
        acc_alpha.data[p] = acc;
        depth_num[p] = dnum;
        depth.data[p] = dnum / acc.max(DEPTH_EPS);
    }

    RenderOutput {
        rgb,
        depth,
        feat,
        acc_alpha,
        cam_pose: *cam_pose,
        intrinsics: *k,
        projected,
        depth_num,
        contributors,
    }
}

/// Gradients with respect to every stored attribute, indexed like `GaussianMap::gaussians`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub position: Vec<Vector3<f64>>,
    pub rotation: Vec<[f64; 4]>,
    pub log_scale: Vec<Vector3<f64>>,
    pub opacity_logit: Vec<f64>,
    pub color: Vec<Vector3<f64>>,
    /// Row-major `n × d`.
    pub feature: Vec<f64>,
    pub feature_dim: usize,
}

impl Gradients {
    pub fn zeros(n: usize, dim: usize) -> Self {
        Gradients {
            position: vec![Vector3::zeros(); n],
            rotation: vec![[0.0; 4]; n],
            log_scale: vec![Vector3::zeros(); n],
            opacity_logit: vec![0.0; n],
            color: vec![Vector3::zeros(); n],
            feature: vec![0.0; n * dim],
            feature_dim: dim,
        }
    }

    pub fn feature_row(&self, i: usize) -> &[f64] {
        &self.feature[i * self.feature_dim..(i + 1) * self.feature_dim]
    }
}

/// Per-projected-Gaussian accumulators in screen space.
#[derive(Clone)]
struct ScreenGrad {
    mean2d: Vector2<f64>,
    conic: Matrix2<f64>,
    opacity: f64,
    depth: f64,
    color: Vector3<f64>,
}

/// Backpropagates image-space cotangents to the Gaussian attributes.
pub fn render_backward(
    map: &GaussianMap,
    out: &RenderOutput,
    grad_rgb: &Raster,
    grad_depth: &Raster,
    grad_feat: &Raster,
) -> Result<Gradients> {
    grad_rgb.ensure_shape(&out.rgb, "rgb cotangent")?;
    grad_depth.ensure_shape(&out.depth, "depth cotangent")?;
    grad_feat.ensure_shape(&out.feat, "feature cotangent")?;
    if out.projected.iter().any(|p| p.source >= map.len()) {
        return Err(Error::ShapeMismatch(
            "render output does not match the map".into(),
        ));
    }
    let dim = map.feature_dim;
    let mut grads = Gradients::zeros(map.len(), dim);
    let mut screen = vec![
        ScreenGrad {
            mean2d: Vector2::zeros(),
            conic: Matrix2::zeros(),
            opacity: 0.0,
            depth: 0.0,
            color: Vector3::zeros(),
        };
        out.projected.len()
    ];
    let width = out.width();

    for (p, list) in out.contributors.iter().enumerate() {
        if list.is_empty() {
            continue;
        }
        let g_rgb = Vector3::from_column_slice(grad_rgb.pixel(p));
        let g_feat = grad_feat.pixel(p);
        let g_depth = grad_depth.data[p];
        let acc = out.acc_alpha.data[p];
        let denom = acc.max(DEPTH_EPS);
        let g_num = g_depth / denom;
        let g_acc = if acc > DEPTH_EPS {
            -g_depth * out.depth_num[p] / (denom * denom)
        } else {
            0.0
        };
        if g_rgb == Vector3::zeros()
            && g_feat.iter().all(|&v| v == 0.0)
            && g_num == 0.0
            && g_acc == 0.0
        {
            continue;
        }
        let (px, py) = ((p % width) as f64, (p / width) as f64);
        let mut behind = 0.0;
        for c in list.iter().rev() {
            let pg = &out.projected[c.proj as usize];
            let g = &map.gaussians[pg.source];
            let wgt = c.alpha * c.transmittance;
            let fdot: f64 = g.feature.iter().zip(g_feat).map(|(a, b)| a * b).sum();
            let s = g.color.dot(&g_rgb) + fdot + pg.depth * g_num + g_acc;
            let d_alpha = c.transmittance * s - behind / (1.0 - c.alpha);
            behind += s * wgt;

            let sg = &mut screen[c.proj as usize];
            sg.color += g_rgb * wgt;
            sg.depth += g_num * wgt;
            let frow = &mut grads.feature[pg.source * dim..(pg.source + 1) * dim];
            for (o, gf) in frow.iter_mut().zip(g_feat) {
                *o += gf * wgt;
            }
            if c.clamped {
                continue;
            }
            sg.opacity += d_alpha * c.gauss;
            let d_power = d_alpha * c.alpha;
            let delta = Vector2::new(px - pg.mean2d.x, py - pg.mean2d.y);
            sg.mean2d += pg.conic * delta * d_power;
            sg.conic -= delta * delta.transpose() * (0.5 * d_power);
        }
    }

    let (w, t) = world_to_camera(&out.cam_pose);
    let k = &out.intrinsics;
    for (pg, sg) in out.projected.iter().zip(&screen) {
        let i = pg.source;
        let g = &map.gaussians[i];
        grads.color[i] += sg.color;
        grads.opacity_logit[i] += sg.opacity * pg.opacity * (1.0 - pg.opacity);

        let pr = project_internal(g, &w, &t, k).expect("projected gaussian must re-project");
        let (x, y, z) = (pr.pc.x, pr.pc.y, pr.pc.z);
        let iz = 1.0 / z;
        let iz2 = iz * iz;

        let d_cov2d = -pg.conic * sg.conic * pg.conic;
        let d_m = pr.j.transpose() * d_cov2d * pr.j;
        let d_j = d_cov2d * pr.j * pr.m * 2.0;
        let d_sigma = pr.w.transpose() * d_m * pr.w;
        let lam = Matrix3::from_diagonal(&pr.scale2);
        let d_rot = d_sigma * pr.rot * lam * 2.0;
        let rt_ds_r = pr.rot.transpose() * d_sigma * pr.rot;
        for a in 0..3 {
            grads.log_scale[i][a] += rt_ds_r[(a, a)] * 2.0 * pr.scale2[a];
        }
        let dq = quat_backward(&g.rotation, &d_rot);
        for (r, d) in grads.rotation[i].iter_mut().zip(dq.iter()) {
            *r += d;
        }

        let mut d_pc = Vector3::zeros();
        // mean2d
        d_pc.x += sg.mean2d.x * k.fx * iz;
        d_pc.y += sg.mean2d.y * k.fy * iz;
        d_pc.z += -sg.mean2d.x * k.fx * x * iz2 - sg.mean2d.y * k.fy * y * iz2;
        // projection Jacobian entries
        d_pc.z += d_j[(0, 0)] * (-k.fx * iz2) + d_j[(1, 1)] * (-k.fy * iz2);
        d_pc.x += d_j[(0, 2)] * (-k.fx * iz2);
        d_pc.y += d_j[(1, 2)] * (-k.fy * iz2);
        d_pc.z +=
            d_j[(0, 2)] * (2.0 * k.fx * x * iz2 * iz) + d_j[(1, 2)] * (2.0 * k.fy * y * iz2 * iz);
        // composited depth
        d_pc.z += sg.depth;
        grads.position[i] += pr.w.transpose() * d_pc;
    }
    Ok(grads)
}
