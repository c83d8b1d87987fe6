//! Analytic ray-cast scenes used as ground truth. Nothing here depends on the
//! splatting renderer.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Pose};
use crate::raster::{FeatureMap, Raster};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    /// Rectangle in the local z = 0 plane with half extents `size.x`, `size.y`.
    Plane,
    /// Radius `size.x`.
    Sphere,
    /// Box with half extents `size`.
    Cuboid,
}

impl Shape {
    fn name(self) -> &'static str {
        match self {
            Shape::Plane => "plane",
            Shape::Sphere => "sphere",
            Shape::Cuboid => "box",
        }
    }

    fn parse(s: &str) -> Option<Shape> {
        match s {
            "plane" => Some(Shape::Plane),
            "sphere" => Some(Shape::Sphere),
            "box" => Some(Shape::Cuboid),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    /// World <- local.
    pub pose: Pose,
    pub size: Vector3<f64>,
    pub class: usize,
    pub albedo: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Trajectory {
    /// Circle around `center` at `height`, looking at `target`.
    Orbit {
        center: Vector3<f64>,
        radius: f64,
        height: f64,
        target: Vector3<f64>,
        turns: f64,
    },
    /// Square of half side `half_side` around `center`. Looks at `target`, or
    /// radially outward and slightly down when `outward` is set.
    SquareLoop {
        center: Vector3<f64>,
        half_side: f64,
        height: f64,
        target: Vector3<f64>,
        laps: f64,
        outward: bool,
    },
    /// Serpentine rows along x, looking at `target`.
    Lawnmower {
        origin: Vector3<f64>,
        length: f64,
        rows: usize,
        spacing: f64,
        target: Vector3<f64>,
    },
}

/// Camera pose at `eye` looking at `target` with world +z up.
pub fn look_at(eye: &Vector3<f64>, target: &Vector3<f64>) -> Pose {
    let z = (target - eye).normalize();
    let mut x = z.cross(&Vector3::z());
    if x.norm() < 1e-9 {
        x = Vector3::x();
    }
    let x = x.normalize();
    let y = z.cross(&x);
    Pose::from_rotation_matrix(&Matrix3::from_columns(&[x, y, z]), *eye)
}

impl Trajectory {
    /// Pose at phase `s` in [0, 1).
    pub fn pose_at(&self, s: f64) -> Pose {
        match *self {
            Trajectory::Orbit {
                center,
                radius,
                height,
                target,
                turns,
            } => {
                let a = 2.0 * PI * turns * s;
                let eye = center + Vector3::new(radius * a.cos(), radius * a.sin(), height);
                look_at(&eye, &target)
            }
            Trajectory::SquareLoop {
                center,
                half_side,
                height,
                target,
                laps,
                outward,
            } => {
                let u = (s * laps).fract() * 4.0;
                let side = u.floor();
                let t = u - side;
                let h = half_side;
                let (x, y) = match side as i32 {
                    0 => (-h + 2.0 * h * t, -h),
                    1 => (h, -h + 2.0 * h * t),
                    2 => (h - 2.0 * h * t, h),
                    _ => (-h, h - 2.0 * h * t),
                };
                let eye = center + Vector3::new(x, y, height);
                if outward {
                    look_at(
                        &eye,
                        &(eye + Vector3::new(x, y, 0.0).normalize() - Vector3::new(0.0, 0.0, 0.2)),
                    )
                } else {
                    look_at(&eye, &target)
                }
            }
            Trajectory::Lawnmower {
                origin,
                length,
                rows,
                spacing,
                target,
            } => {
                let rows = rows.max(1);
                let u = s * rows as f64;
                let row = (u.floor() as usize).min(rows - 1);
                let t = u - row as f64;
                let x = if row.is_multiple_of(2) {
                    t * length
                } else {
                    (1.0 - t) * length
                };
                let eye = origin + Vector3::new(x, row as f64 * spacing, 0.0);
                look_at(&eye, &(target + Vector3::new(x, row as f64 * spacing, 0.0)))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSceneSpec {
    pub primitives: Vec<Primitive>,
    /// Unit-norm feature prototype per class ID.
    pub prototypes: Vec<Vec<f64>>,
    pub trajectory: Trajectory,
    pub frames: usize,
    pub intrinsics: CameraIntrinsics,
    pub depth_sigma: f64,
    pub feature_sigma: f64,
    /// Seconds between frames.
    pub frame_interval: f64,
}

/// One generated frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub index: usize,
    pub timestamp: f64,
    pub rgb: Raster,
    pub depth: Raster,
    pub feat: Option<FeatureMap>,
    pub gt_pose: Option<Pose>,
}

const LIGHT: [f64; 3] = [0.4, -0.3, 0.85];
const AMBIENT: f64 = 0.35;

struct Hit {
    t: f64,
    normal: Vector3<f64>,
    primitive: usize,
}

fn intersect(
    p: &Primitive,
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
) -> Option<(f64, Vector3<f64>)> {
    let r = p.pose.rotation_matrix();
    let o = r.transpose() * (origin - p.pose.translation);
    let d = r.transpose() * dir;
    let local = match p.shape {
        Shape::Plane => {
            if d.z.abs() < 1e-12 {
                return None;
            }
            let t = -o.z / d.z;
            let hit = o + d * t;
            if t <= 0.0 || hit.x.abs() > p.size.x || hit.y.abs() > p.size.y {
                return None;
            }
            (t, Vector3::z())
        }
        Shape::Sphere => {
            let a = d.norm_squared();
            let b = 2.0 * o.dot(&d);
            let c = o.norm_squared() - p.size.x * p.size.x;
            let disc = b * b - 4.0 * a * c;
            if disc < 0.0 {
                return None;
            }
            let sq = disc.sqrt();
            let t0 = (-b - sq) / (2.0 * a);
            let t1 = (-b + sq) / (2.0 * a);
            let t = if t0 > 0.0 {
                t0
            } else if t1 > 0.0 {
                t1
            } else {
                return None;
            };
            (t, (o + d * t) / p.size.x)
        }
        Shape::Cuboid => {
            let mut t_near = f64::NEG_INFINITY;
            let mut t_far = f64::INFINITY;
            let mut n_near = Vector3::zeros();
            let mut n_far = Vector3::zeros();
            for a in 0..3 {
                if d[a].abs() < 1e-12 {
                    if o[a].abs() > p.size[a] {
                        return None;
                    }
                    continue;
                }
                let mut t1 = (-p.size[a] - o[a]) / d[a];
                let mut t2 = (p.size[a] - o[a]) / d[a];
                let mut sign = -1.0;
                if t1 > t2 {
                    std::mem::swap(&mut t1, &mut t2);
                    sign = 1.0;
                }
                if t1 > t_near {
                    t_near = t1;
                    n_near = Vector3::zeros();
                    n_near[a] = sign;
                }
                if t2 < t_far {
                    t_far = t2;
                    n_far = Vector3::zeros();
                    n_far[a] = -sign;
                }
            }
            if t_near > t_far || t_far <= 0.0 {
                return None;
            }
            if t_near > 0.0 {
                (t_near, n_near)
            } else {
                (t_far, n_far)
            }
        }
    };
    Some((local.0, r * local.1))
}

fn cast(primitives: &[Primitive], origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    for (i, p) in primitives.iter().enumerate() {
        if let Some((t, n)) = intersect(p, origin, dir) {
            if best.as_ref().is_none_or(|b| t < b.t) {
                best = Some(Hit {
                    t,
                    normal: n,
                    primitive: i,
                });
            }
        }
    }
    best
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 {
            return Err(Error::Config(format!(
                "synthetic sequence needs at least 2 frames, got {}",
                self.frames
            )));
        }
        let dim = self.prototypes.first().map(Vec::len).unwrap_or(0);
        for (c, p) in self.prototypes.iter().enumerate() {
            let n = p.iter().map(|v| v * v).sum::<f64>().sqrt();
            if p.len() != dim || dim == 0 || (n - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "class {c} prototype must be unit norm with dimension {dim}"
                )));
            }
        }
        if let Some(p) = self
            .primitives
            .iter()
            .find(|p| p.class >= self.prototypes.len())
        {
            return Err(Error::Config(format!(
                "primitive class {} has no prototype",
                p.class
            )));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.prototypes.first().map(Vec::len).unwrap_or(0)
    }

    pub fn gt_pose(&self, index: usize) -> Pose {
        self.trajectory.pose_at(index as f64 / self.frames as f64)
    }

    /// Trajectory length: summed distance between consecutive frame positions.
    pub fn path_length(&self) -> f64 {
        (1..self.frames)
            .map(|i| (self.gt_pose(i).translation - self.gt_pose(i - 1).translation).norm())
            .sum()
    }

    /// Class of the surface seen at each pixel from `pose`, `None` for background.
    pub fn label_image(&self, pose: &Pose) -> Vec<Option<usize>> {
        let k = &self.intrinsics;
        let r = pose.rotation_matrix();
        (0..k.height)
            .flat_map(|y| (0..k.width).map(move |x| (x, y)))
            .map(|(x, y)| {
                let d = r * Vector3::new((x as f64 - k.cx) / k.fx, (y as f64 - k.cy) / k.fy, 1.0);
                cast(&self.primitives, &pose.translation, &d)
                    .map(|h| self.primitives[h.primitive].class)
            })
            .collect()
    }

    /// Ray-casts one frame. Colors are quantized to 8 bits and depth and
    /// features to single precision so the files hold exactly these values.
    pub fn render_frame(&self, index: usize, seed: u64) -> Frame {
        let k = &self.intrinsics;
        let pose = self.gt_pose(index);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index as u64);
        let dim = self.feature_dim();
        let (w, h) = (k.width, k.height);
        let mut rgb = Raster::zeros(w, h, 3);
        let mut depth = Raster::zeros(w, h, 1);
        let mut feat = FeatureMap::zeros(w, h, dim);
        let light = Vector3::from(LIGHT).normalize();
        let r = pose.rotation_matrix();
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let d_cam = Vector3::new((x as f64 - k.cx) / k.fx, (y as f64 - k.cy) / k.fy, 1.0);
                let Some(hit) = cast(&self.primitives, &pose.translation, &(r * d_cam)) else {
                    continue;
                };
                let prim = &self.primitives[hit.primitive];
                let shade = AMBIENT + (1.0 - AMBIENT) * hit.normal.dot(&light).abs();
                for c in 0..3 {
                    rgb.data[p * 3 + c] =
                        ((prim.albedo[c] * shade).clamp(0.0, 1.0) * 255.0).round() / 255.0;
                }
                let noise: f64 = StandardNormal.sample(&mut rng);
                depth.data[p] = ((hit.t + self.depth_sigma * noise).max(1e-3) as f32) as f64;
                let proto = &self.prototypes[prim.class];
                let mut f: Vec<f64> = proto
                    .iter()
                    .map(|v| {
                        let n: f64 = StandardNormal.sample(&mut rng);
                        v + self.feature_sigma * n
                    })
                    .collect();
                let n = f.iter().map(|v| v * v).sum::<f64>().sqrt();
                f.iter_mut().for_each(|v| *v = ((*v / n) as f32) as f64);
                feat.pixel_mut(p).copy_from_slice(&f);
            }
        }
        Frame {
            index,
            timestamp: index as f64 * self.frame_interval,
            rgb,
            depth,
            feat: Some(feat),
            gt_pose: Some(pose),
        }
    }

    /// Nearest-prototype labels of a ground-truth feature map; zero features are `None`.
    pub fn labels_from_features(&self, feat: &FeatureMap) -> Vec<Option<usize>> {
        (0..feat.pixel_count())
            .map(|p| {
                let f = feat.pixel(p);
                if f.iter().all(|&v| v == 0.0) {
                    return None;
                }
                let mut best = (f64::NEG_INFINITY, 0);
                for (c, proto) in self.prototypes.iter().enumerate() {
                    let s: f64 = f.iter().zip(proto).map(|(a, b)| a * b).sum();
                    if s > best.0 {
                        best = (s, c);
                    }
                }
                Some(best.1)
            })
            .collect()
    }

    /// Samples of the feature distribution used for codec pretraining and
    /// the codebook: prototypes plus the same noise as the frames.
    pub fn feature_corpus(&self, per_class: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(per_class * self.prototypes.len());
        for _ in 0..per_class {
            for proto in &self.prototypes {
                let mut f: Vec<f64> = proto
                    .iter()
                    .map(|v| {
                        let n: f64 = StandardNormal.sample(&mut rng);
                        v + self.feature_sigma * n
                    })
                    .collect();
                let n = f.iter().map(|v| v * v).sum::<f64>().sqrt();
                f.iter_mut().for_each(|v| *v /= n);
                out.push(f);
            }
        }
        out
    }
}

/// Random unit prototypes, one per class.
pub fn random_prototypes(classes: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..classes)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x / n).collect()
        })
        .collect()
}

/// Parameters of the built-in room scene.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoomOptions {
    /// 4 (floor, wall, sphere, box) or 8 (floor, four walls, sphere, two boxes).
    pub classes: usize,
    pub feature_dim: usize,
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub seed: u64,
}

impl Default for RoomOptions {
    fn default() -> Self {
        RoomOptions {
            classes: 4,
            feature_dim: 32,
            width: 64,
            height: 64,
            frames: 200,
            seed: 0,
        }
    }
}

fn prim(shape: Shape, pose: Pose, size: Vector3<f64>, class: usize, albedo: [f64; 3]) -> Primitive {
    Primitive {
        shape,
        pose,
        size,
        class,
        albedo,
    }
}

/// A 6 m × 6 m walled room with a sphere and boxes near its centre.
pub fn room_scene(opts: &RoomOptions, trajectory: Trajectory) -> SyntheticSceneSpec {
    let eight = opts.classes >= 8;
    let wall = |i: usize| if eight { 1 + i } else { 1 };
    let (sphere_c, box_c, box2_c) = if eight { (5, 6, 7) } else { (2, 3, 3) };
    let half = 3.0;
    let wh = 1.5;
    let rx = |a: f64| {
        Pose::from_rotation_matrix(
            &nalgebra::Rotation3::from_axis_angle(&Vector3::x_axis(), a).into_inner(),
            Vector3::zeros(),
        )
    };
    let ry = |a: f64| {
        Pose::from_rotation_matrix(
            &nalgebra::Rotation3::from_axis_angle(&Vector3::y_axis(), a).into_inner(),
            Vector3::zeros(),
        )
    };
    let at = |p: Pose, t: Vector3<f64>| Pose::new(p.rotation, t);
    let mut primitives = vec![
        prim(
            Shape::Plane,
            Pose::identity(),
            Vector3::new(half, half, 0.0),
            0,
            [0.55, 0.5, 0.42],
        ),
        prim(
            Shape::Plane,
            at(ry(PI / 2.0), Vector3::new(half, 0.0, wh)),
            Vector3::new(wh, half, 0.0),
            wall(0),
            [0.8, 0.78, 0.7],
        ),
        prim(
            Shape::Plane,
            at(ry(PI / 2.0), Vector3::new(-half, 0.0, wh)),
            Vector3::new(wh, half, 0.0),
            wall(1),
            [0.62, 0.7, 0.8],
        ),
        prim(
            Shape::Plane,
            at(rx(PI / 2.0), Vector3::new(0.0, half, wh)),
            Vector3::new(half, wh, 0.0),
            wall(2),
            [0.75, 0.65, 0.6],
        ),
        prim(
            Shape::Plane,
            at(rx(PI / 2.0), Vector3::new(0.0, -half, wh)),
            Vector3::new(half, wh, 0.0),
            wall(3),
            [0.6, 0.75, 0.62],
        ),
        prim(
            Shape::Sphere,
            Pose::from_translation(Vector3::new(0.35, 0.25, 0.4)),
            Vector3::new(0.4, 0.4, 0.4),
            sphere_c,
            [0.85, 0.25, 0.2],
        ),
        prim(
            Shape::Cuboid,
            Pose::new(
                nalgebra::UnitQuaternion::from_euler_angles(0.0, 0.0, 0.35),
                Vector3::new(-0.5, -0.35, 0.35),
            ),
            Vector3::new(0.3, 0.25, 0.35),
            box_c,
            [0.2, 0.35, 0.8],
        ),
    ];
    // Boxes and shelves along every wall keep outward views well conditioned
    // for registration.
    for wall_i in 0..4 {
        let a = wall_i as f64 * PI / 2.0;
        let (normal, along) = (
            Vector3::new(a.cos(), a.sin(), 0.0),
            Vector3::new(-a.sin(), a.cos(), 0.0),
        );
        for j in 0..6 {
            let i = wall_i * 6 + j;
            let offset = -2.25 + 0.9 * j as f64 + 0.1 * ((i * 7 % 5) as f64 - 2.0);
            let hw = 0.15 + 0.05 * (i * 3 % 4) as f64;
            let hh = 0.2 + 0.08 * (i * 5 % 4) as f64;
            let hd = 0.15 + 0.05 * (i % 3) as f64;
            let z = if i % 3 == 1 {
                0.9 + 0.1 * (i % 4) as f64
            } else {
                hh
            };
            let c = normal * (half - 0.35 - hd) + along * offset + Vector3::new(0.0, 0.0, z);
            let yaw = a + 0.25 * ((i * 11 % 5) as f64 - 2.0) / 2.0;
            let t = i as f64 / 23.0;
            let albedo = [
                0.25 + 0.6 * t,
                0.75 - 0.5 * t,
                0.3 + 0.5 * (1.0 - (2.0 * t - 1.0).abs()),
            ];
            let pose = Pose::new(
                nalgebra::UnitQuaternion::from_euler_angles(0.0, 0.0, yaw),
                c,
            );
            primitives.push(prim(
                Shape::Cuboid,
                pose,
                Vector3::new(hd, hw, hh),
                box2_c,
                albedo,
            ));
        }
    }
    primitives.push(prim(
        Shape::Sphere,
        Pose::from_translation(Vector3::new(-1.6, 0.3, 0.3)),
        Vector3::new(0.3, 0.3, 0.3),
        sphere_c,
        [0.9, 0.7, 0.2],
    ));
    let f = opts.width as f64 * 0.85;
    SyntheticSceneSpec {
        primitives,
        prototypes: random_prototypes(opts.classes, opts.feature_dim, opts.seed ^ 0x5eed),
        trajectory,
        frames: opts.frames,
        intrinsics: CameraIntrinsics::new(
            f,
            f,
            (opts.width as f64 - 1.0) / 2.0,
            (opts.height as f64 - 1.0) / 2.0,
            opts.width,
            opts.height,
        )
        .expect("valid room intrinsics"),
        depth_sigma: 0.002,
        feature_sigma: 0.02,
        frame_interval: 1.0 / 30.0,
    }
}

/// Default inward-looking orbit around the room centre.
pub fn default_orbit() -> Trajectory {
    Trajectory::Orbit {
        center: Vector3::zeros(),
        radius: 1.6,
        height: 1.3,
        target: Vector3::new(0.0, 0.0, 0.4),
        turns: 1.0,
    }
}

/// Outward-looking square loop around the room centre; only its start and
/// end observe the same walls.
pub fn default_square_loop() -> Trajectory {
    Trajectory::SquareLoop {
        center: Vector3::zeros(),
        half_side: 1.0,
        height: 1.2,
        target: Vector3::new(0.0, 0.0, 0.4),
        laps: 1.0,
        outward: true,
    }
}

/// Generates every frame of the sequence.
pub fn generate_sequence(spec: &SyntheticSceneSpec, seed: u64) -> Result<Vec<Frame>> {
    spec.validate()?;
    Ok((0..spec.frames)
        .map(|i| spec.render_frame(i, seed))
        .collect())
}

/// Pose from `tx ty tz qw qx qy qz`; an already-unit quaternion is kept
/// bit for bit.
fn stored_pose(v: &[f64]) -> Pose {
    let q = nalgebra::Quaternion::new(v[3], v[4], v[5], v[6]);
    let t = Vector3::new(v[0], v[1], v[2]);
    if (q.norm() - 1.0).abs() < 1e-12 {
        Pose::new(nalgebra::UnitQuaternion::new_unchecked(q), t)
    } else {
        Pose::from_wxyz(v[3], v[4], v[5], v[6], t)
    }
}

fn fmt_pose(p: &Pose) -> String {
    let q = p.rotation.quaternion();
    format!(
        "{} {} {} {} {} {} {}",
        p.translation.x, p.translation.y, p.translation.z, q.w, q.i, q.j, q.k
    )
}

fn fmt_vec(v: &Vector3<f64>) -> String {
    format!("{} {} {}", v.x, v.y, v.z)
}

impl SyntheticSceneSpec {
    /// Text form: one record per line, values in shortest round-trip notation.
    pub fn to_text(&self) -> String {
        let k = &self.intrinsics;
        let mut s = String::new();
        let _ = writeln!(
            s,
            "intrinsics {} {} {} {} {} {}",
            k.fx, k.fy, k.cx, k.cy, k.width, k.height
        );
        let _ = writeln!(s, "frames {}", self.frames);
        let _ = writeln!(s, "frame_interval {}", self.frame_interval);
        let _ = writeln!(s, "noise {} {}", self.depth_sigma, self.feature_sigma);
        let _ = match self.trajectory {
            Trajectory::Orbit {
                center,
                radius,
                height,
                target,
                turns,
            } => {
                writeln!(
                    s,
                    "trajectory orbit {} {} {} {} {}",
                    fmt_vec(&center),
                    radius,
                    height,
                    fmt_vec(&target),
                    turns
                )
            }
            Trajectory::SquareLoop {
                center,
                half_side,
                height,
                target,
                laps,
                outward,
            } => {
                let o = u8::from(outward);
                writeln!(
                    s,
                    "trajectory square {} {} {} {} {} {o}",
                    fmt_vec(&center),
                    half_side,
                    height,
                    fmt_vec(&target),
                    laps
                )
            }
            Trajectory::Lawnmower {
                origin,
                length,
                rows,
                spacing,
                target,
            } => {
                writeln!(
                    s,
                    "trajectory lawnmower {} {} {} {} {}",
                    fmt_vec(&origin),
                    length,
                    rows,
                    spacing,
                    fmt_vec(&target)
                )
            }
        };
        for (c, p) in self.prototypes.iter().enumerate() {
            let vals: Vec<String> = p.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(s, "class {} {}", c, vals.join(" "));
        }
        for p in &self.primitives {
            let _ = writeln!(
                s,
                "primitive {} {} {} {} {} {} {}",
                p.shape.name(),
                p.class,
                p.albedo[0],
                p.albedo[1],
                p.albedo[2],
                fmt_vec(&p.size),
                fmt_pose(&p.pose)
            );
        }
        s
    }

    pub fn from_text(text: &str, file: &Path) -> Result<Self> {
        let perr = |line: usize, msg: &str| Error::Parse {
            file: file.display().to_string(),
            line,
            msg: msg.to_string(),
        };
        let mut intrinsics = None;
        let mut frames = None;
        let mut frame_interval = 1.0 / 30.0;
        let mut noise = (0.0, 0.0);
        let mut trajectory = None;
        let mut prototypes: Vec<(usize, Vec<f64>)> = Vec::new();
        let mut primitives = Vec::new();
        for (ln, raw) in text.lines().enumerate() {
            let line_no = ln + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut it = line.split_whitespace();
            let key = it.next().unwrap_or("");
            let rest: Vec<&str> = it.collect();
            let nums = |from: usize| -> Result<Vec<f64>> {
                rest[from..]
                    .iter()
                    .map(|t| {
                        t.parse::<f64>()
                            .map_err(|_| perr(line_no, &format!("bad number '{t}'")))
                    })
                    .collect()
            };
            match key {
                "intrinsics" => {
                    let v = nums(0)?;
                    if v.len() != 6 {
                        return Err(perr(line_no, "intrinsics needs fx fy cx cy width height"));
                    }
                    intrinsics = Some(
                        CameraIntrinsics::new(v[0], v[1], v[2], v[3], v[4] as usize, v[5] as usize)
                            .map_err(|e| perr(line_no, &e.to_string()))?,
                    );
                }
                "frames" => {
                    frames = Some(
                        nums(0)?
                            .first()
                            .copied()
                            .ok_or_else(|| perr(line_no, "missing count"))?
                            as usize,
                    )
                }
                "frame_interval" => {
                    frame_interval = *nums(0)?
                        .first()
                        .ok_or_else(|| perr(line_no, "missing value"))?
                }
                "noise" => {
                    let v = nums(0)?;
                    if v.len() != 2 {
                        return Err(perr(line_no, "noise needs depth and feature sigma"));
                    }
                    noise = (v[0], v[1]);
                }
                "trajectory" => {
                    let kind = rest.first().copied().unwrap_or("");
                    let v = nums(1)?;
                    let v3 = |i: usize| Vector3::new(v[i], v[i + 1], v[i + 2]);
                    trajectory = Some(match (kind, v.len()) {
                        ("orbit", 9) => Trajectory::Orbit {
                            center: v3(0),
                            radius: v[3],
                            height: v[4],
                            target: v3(5),
                            turns: v[8],
                        },
                        ("square", 10) => Trajectory::SquareLoop {
                            center: v3(0),
                            half_side: v[3],
                            height: v[4],
                            target: v3(5),
                            laps: v[8],
                            outward: v[9] != 0.0,
                        },
                        ("lawnmower", 9) => Trajectory::Lawnmower {
                            origin: v3(0),
                            length: v[3],
                            rows: v[4] as usize,
                            spacing: v[5],
                            target: v3(6),
                        },
                        _ => return Err(perr(line_no, "unknown trajectory")),
                    });
                }
                "class" => {
                    let v = nums(0)?;
                    if v.len() < 2 {
                        return Err(perr(line_no, "class needs an id and a prototype"));
                    }
                    prototypes.push((v[0] as usize, v[1..].to_vec()));
                }
                "primitive" => {
                    let shape = rest
                        .first()
                        .and_then(|s| Shape::parse(s))
                        .ok_or_else(|| perr(line_no, "unknown shape"))?;
                    let v = nums(1)?;
                    if v.len() != 14 {
                        return Err(perr(
                            line_no,
                            "primitive needs class, albedo, size and pose",
                        ));
                    }
                    primitives.push(Primitive {
                        shape,
                        class: v[0] as usize,
                        albedo: [v[1], v[2], v[3]],
                        size: Vector3::new(v[4], v[5], v[6]),
                        pose: stored_pose(&v[7..14]),
                    });
                }
                other => return Err(perr(line_no, &format!("unknown record '{other}'"))),
            }
        }
        prototypes.sort_by_key(|(c, _)| *c);
        if prototypes.iter().enumerate().any(|(i, (c, _))| i != *c) {
            return Err(perr(0, "class IDs must be 0..n without gaps"));
        }
        let spec = SyntheticSceneSpec {
            primitives,
            prototypes: prototypes.into_iter().map(|(_, p)| p).collect(),
            trajectory: trajectory.ok_or_else(|| perr(0, "missing trajectory"))?,
            frames: frames.ok_or_else(|| perr(0, "missing frames"))?,
            intrinsics: intrinsics.ok_or_else(|| perr(0, "missing intrinsics"))?,
            depth_sigma: noise.0,
            feature_sigma: noise.1,
            frame_interval,
        };
        Ok(spec)
    }
}
