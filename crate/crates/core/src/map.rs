//! The language-embedded Gaussian map and its keyframes.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, Quaternion, SymmetricEigen, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::CodecParams;
use crate::error::{Error, Result};
use crate::geometry::{backproject, project, CameraIntrinsics, Pose};
use crate::gicp::{plane_covariance, CovPointCloud};
use crate::kdtree::KdTree;
use crate::raster::{FeatureMap, Raster};

pub const MAP_MAGIC: &[u8; 8] = b"LEGOMAP1";
pub const MIN_SCALE: f64 = 1e-4;
pub const MAX_SCALE: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct LanguageGaussian {
    pub id: u64,
    pub position: Vector3<f64>,
    /// Unit quaternion `(w, x, y, z)`.
    pub rotation: [f64; 4],
    pub log_scale: Vector3<f64>,
    pub opacity_logit: f64,
    pub color: Vector3<f64>,
    pub feature: Vec<f64>,
    /// Keyframe that created this Gaussian.
    pub anchor: u64,
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl LanguageGaussian {
    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn scale(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }

    pub fn unit_rotation(&self) -> UnitQuaternion<f64> {
        let [w, x, y, z] = self.rotation;
        UnitQuaternion::new_normalize(Quaternion::new(w, x, y, z))
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.unit_rotation().to_rotation_matrix().into_inner()
    }

    pub fn covariance(&self) -> Matrix3<f64> {
        let r = self.rotation_matrix();
        let s2 = self.log_scale.map(|s| (2.0 * s).exp());
        r * Matrix3::from_diagonal(&s2) * r.transpose()
    }

    /// Plane-like registration covariance whose thin axis is this Gaussian's
    /// smallest scale axis.
    pub fn registration_covariance(&self) -> Matrix3<f64> {
        let r = self.rotation_matrix();
        let mut axes = [0usize, 1, 2];
        axes.sort_by(|&a, &b| {
            self.log_scale[a]
                .total_cmp(&self.log_scale[b])
                .then(a.cmp(&b))
        });
        let v = Matrix3::from_columns(&[r.column(axes[0]), r.column(axes[1]), r.column(axes[2])]);
        plane_covariance(&v)
    }

    fn is_valid(&self, dim: usize) -> bool {
        let qn = self.rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
        self.position.iter().all(|v| v.is_finite())
            && self.rotation.iter().all(|v| v.is_finite())
            && (qn - 1.0).abs() < 1e-6
            && self
                .log_scale
                .iter()
                .all(|s| s.is_finite() && s.exp() < 10.0)
            && self.opacity_logit.is_finite()
            && self.color.iter().all(|v| v.is_finite())
            && self.feature.len() == dim
            && self.feature.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Keyframe {
    pub id: u64,
    /// Index of the frame in the input sequence.
    pub frame_index: usize,
    pub timestamp: f64,
    /// World <- camera.
    pub pose: Pose,
    pub rgb: Raster,
    pub depth: Raster,
    /// High-dimensional teacher features; absent for geometry-only datasets.
    pub feat_gt: Option<FeatureMap>,
    pub signature: Option<Vec<f64>>,
    /// Camera-frame tracking cloud, reused for loop verification.
    pub source: CovPointCloud,
}

impl Keyframe {
    pub fn validate(&self) -> Result<()> {
        let (w, h) = (self.rgb.width, self.rgb.height);
        let ok = self.rgb.channels == 3
            && self.depth.channels == 1
            && self.depth.width == w
            && self.depth.height == h
            && self
                .feat_gt
                .as_ref()
                .is_none_or(|f| f.width == w && f.height == h && f.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "keyframe {} images disagree",
                self.id
            )))
        }
    }
}

/// How new Gaussians get their compact features.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FeatureInit {
    /// Encode the teacher feature at the pixel.
    Encoder,
    /// Uniform in `[-amplitude, amplitude]`, seeded.
    Random {
        seed: u64,
        amplitude: f64,
    },
    Zero,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMap {
    pub feature_dim: usize,
    pub gaussians: Vec<LanguageGaussian>,
    pub keyframes: BTreeSet<u64>,
    next_id: u64,
}

impl GaussianMap {
    pub fn new(feature_dim: usize) -> Self {
        GaussianMap {
            feature_dim,
            gaussians: Vec::new(),
            keyframes: BTreeSet::new(),
            next_id: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn register_keyframe(&mut self, id: u64) {
        self.keyframes.insert(id);
    }

    /// Adds a Gaussian, assigning it a fresh ID.
    pub fn push(&mut self, mut g: LanguageGaussian) -> u64 {
        g.id = self.next_id;
        self.next_id += 1;
        self.keyframes.insert(g.anchor);
        let id = g.id;
        self.gaussians.push(g);
        id
    }

    /// Keeps the Gaussians whose flag is true.
    pub fn retain_mask(&mut self, keep: &[bool]) {
        let mut it = keep.iter();
        self.gaussians.retain(|_| *it.next().unwrap());
    }

    /// Checks every attribute of every Gaussian for finiteness and range.
    pub fn validate(&self) -> Result<()> {
        for g in &self.gaussians {
            if !g.is_valid(self.feature_dim) {
                return Err(Error::ShapeMismatch(format!(
                    "gaussian {} has invalid attributes",
                    g.id
                )));
            }
            if !self.keyframes.contains(&g.anchor) {
                return Err(Error::UnknownKeyframe(g.anchor));
            }
        }
        Ok(())
    }

    /// Moves every Gaussian anchored to `kf_id` rigidly by `delta`.
    pub fn apply_rigid_correction(&mut self, kf_id: u64, delta: &Pose) -> Result<()> {
        if !self.keyframes.contains(&kf_id) {
            return Err(Error::UnknownKeyframe(kf_id));
        }
        if *delta == Pose::identity() {
            return Ok(());
        }
        let dq = delta.rotation.quaternion();
        for g in self.gaussians.iter_mut().filter(|g| g.anchor == kf_id) {
            g.position = delta.transform_point(&g.position);
            let [w, x, y, z] = g.rotation;
            let q = dq * Quaternion::new(w, x, y, z);
            let n = q.norm();
            g.rotation = [q.w / n, q.i / n, q.j / n, q.k / n];
        }
        Ok(())
    }

    /// Uniform random subsample of the Gaussians whose centres fall inside the
    /// camera frustum, with registration covariances, in world coordinates.
    pub fn frustum_samples(
        &self,
        pose: &Pose,
        k: &CameraIntrinsics,
        max: usize,
        seed: u64,
    ) -> CovPointCloud {
        let inv = pose.inverse();
        let visible: Vec<usize> = self
            .gaussians
            .iter()
            .enumerate()
            .filter(|(_, g)| {
                let pc = inv.transform_point(&g.position);
                pc.z > 0.01
                    && project(&pc, k)
                        .map(|(u, v, _)| k.contains(u, v))
                        .unwrap_or(false)
            })
            .map(|(i, _)| i)
            .collect();
        let chosen: Vec<usize> = if visible.len() > max {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx = rand::seq::index::sample(&mut rng, visible.len(), max).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| visible[i]).collect()
        } else {
            visible
        };
        CovPointCloud {
            points: chosen.iter().map(|&i| self.gaussians[i].position).collect(),
            covariances: chosen
                .iter()
                .map(|&i| self.gaussians[i].registration_covariance())
                .collect(),
        }
    }

    /// Centres of the Gaussians anchored to any of `anchors`, with registration covariances.
    pub fn anchored_cloud(&self, anchors: &[u64]) -> CovPointCloud {
        let sel: Vec<&LanguageGaussian> = self
            .gaussians
            .iter()
            .filter(|g| anchors.contains(&g.anchor))
            .collect();
        CovPointCloud {
            points: sel.iter().map(|g| g.position).collect(),
            covariances: sel.iter().map(|g| g.registration_covariance()).collect(),
        }
    }

    /// Inserts one Gaussian per selected pixel with valid depth.
    ///
    /// Rotation and scale come from the tracking covariance of the nearest
    /// source point: its axes give the rotation and its `(eps, 1, 1)` shape,
    /// scaled by the pixel footprint `depth / fx`, gives the extent.
    pub fn insert_from_keyframe(
        &mut self,
        kf: &Keyframe,
        k: &CameraIntrinsics,
        source_cov: &CovPointCloud,
        coverage: &[bool],
        codec: Option<&CodecParams>,
        init: FeatureInit,
    ) -> Result<Vec<u64>> {
        let (w, h) = (kf.depth.width, kf.depth.height);
        if coverage.len() != w * h {
            return Err(Error::ShapeMismatch(format!(
                "coverage mask has {} entries for {}x{}",
                coverage.len(),
                w,
                h
            )));
        }
        self.register_keyframe(kf.id);
        if !coverage.iter().any(|&c| c) {
            return Ok(Vec::new());
        }
        let tree = KdTree::new(&source_cov.points);
        let r_wc = kf.pose.rotation_matrix();
        let mut rng = match init {
            FeatureInit::Random { seed, .. } => Some(ChaCha8Rng::seed_from_u64(
                seed ^ kf.id.wrapping_mul(0x9e37_79b9),
            )),
            _ => None,
        };
        let mut ids = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let idx = y * w + x;
                if !coverage[idx] {
                    continue;
                }
                let depth = kf.depth.get(x, y);
                let Ok(pc) = backproject(x as f64, y as f64, depth, k) else {
                    continue;
                };
                let cov_cam = tree
                    .nearest(&pc)
                    .map(|nn| source_cov.covariances[nn.index])
                    .unwrap_or_else(|| plane_covariance(&Matrix3::identity()));
                let footprint = depth / k.fx;
                let (rotation, log_scale) =
                    rotation_and_scale(&(r_wc * cov_cam * r_wc.transpose()), footprint);
                let feature = match (init, &kf.feat_gt, codec) {
                    (FeatureInit::Encoder, Some(f), Some(c)) => c.encode_vec(f.at(x, y)),
                    (FeatureInit::Random { amplitude, .. }, _, _) => {
                        let rng = rng.as_mut().unwrap();
                        (0..self.feature_dim)
                            .map(|_| rng.random_range(-amplitude..amplitude))
                            .collect()
                    }
                    _ => vec![0.0; self.feature_dim],
                };
                if feature.len() != self.feature_dim {
                    return Err(Error::DimensionMismatch {
                        expected: self.feature_dim,
                        found: feature.len(),
                    });
                }
                let rgb = kf.rgb.at(x, y);
                ids.push(self.push(LanguageGaussian {
                    id: 0,
                    position: kf.pose.transform_point(&pc),
                    rotation,
                    log_scale,
                    opacity_logit: 0.0,
                    color: Vector3::new(rgb[0], rgb[1], rgb[2]),
                    feature,
                    anchor: kf.id,
                }));
            }
        }
        Ok(ids)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(20 + self.len() * (64 + 4 * self.feature_dim));
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path, expected_dim: Option<usize>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice(), expected_dim)
    }

    /// Serialized size in bytes of a map with `count` Gaussians of feature dimension `dim`.
    pub fn file_size(count: usize, dim: usize) -> usize {
        8 + 4 + 8 + count * bytes_per_gaussian(dim)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAP_MAGIC)?;
        w.write_all(&(self.feature_dim as u32).to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        let put = |v: f64, w: &mut W| w.write_all(&(v as f32).to_le_bytes());
        for g in &self.gaussians {
            for v in g.position.iter() {
                put(*v, w)?;
            }
            for v in g.rotation {
                put(v, w)?;
            }
            for v in g.log_scale.iter() {
                put(*v, w)?;
            }
            put(g.opacity_logit, w)?;
            for v in g.color.iter() {
                put(*v, w)?;
            }
            for v in &g.feature {
                put(*v, w)?;
            }
            w.write_all(&g.anchor.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R, expected_dim: Option<usize>) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Truncated("map header".into()))?;
        if &magic != MAP_MAGIC {
            return Err(Error::BadMagic {
                expected: "LEGOMAP1",
            });
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b4)
            .map_err(|_| Error::Truncated("map header".into()))?;
        let dim = u32::from_le_bytes(b4) as usize;
        if let Some(expected) = expected_dim {
            if expected != dim {
                return Err(Error::DimensionMismatch {
                    expected,
                    found: dim,
                });
            }
        }
        r.read_exact(&mut b8)
            .map_err(|_| Error::Truncated("map header".into()))?;
        let count = u64::from_le_bytes(b8);
        let mut map = GaussianMap::new(dim);
        let mut vals = vec![0.0f64; 14 + dim];
        for i in 0..count {
            for v in vals.iter_mut() {
                r.read_exact(&mut b4)
                    .map_err(|_| Error::Truncated(format!("gaussian {i} of {count}")))?;
                *v = f32::from_le_bytes(b4) as f64;
            }
            r.read_exact(&mut b8)
                .map_err(|_| Error::Truncated(format!("gaussian {i} of {count}")))?;
            map.push(LanguageGaussian {
                id: 0,
                position: Vector3::new(vals[0], vals[1], vals[2]),
                rotation: [vals[3], vals[4], vals[5], vals[6]],
                log_scale: Vector3::new(vals[7], vals[8], vals[9]),
                opacity_logit: vals[10],
                color: Vector3::new(vals[11], vals[12], vals[13]),
                feature: vals[14..].to_vec(),
                anchor: u64::from_le_bytes(b8),
            });
        }
        Ok(map)
    }
}

pub fn bytes_per_gaussian(dim: usize) -> usize {
    4 * (3 + 4 + 3 + 1 + 3 + dim) + 8
}

/// Rotation quaternion `(w, x, y, z)` and clamped log-scales of a world-frame
/// covariance whose spectrum is expressed in units of `footprint²`.
fn rotation_and_scale(cov: &Matrix3<f64>, footprint: f64) -> ([f64; 4], Vector3<f64>) {
    let eig = SymmetricEigen::new((cov + cov.transpose()) * 0.5);
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&a, &b| {
        eig.eigenvalues[a]
            .total_cmp(&eig.eigenvalues[b])
            .then(a.cmp(&b))
    });
    let mut r = Matrix3::from_columns(&[
        eig.eigenvectors.column(idx[0]).into_owned(),
        eig.eigenvectors.column(idx[1]).into_owned(),
        eig.eigenvectors.column(idx[2]).into_owned(),
    ]);
    if r.determinant() < 0.0 {
        r.set_column(2, &(-r.column(2)));
    }
    let q = UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(r));
    let scale = Vector3::new(
        eig.eigenvalues[idx[0]].max(0.0).sqrt(),
        eig.eigenvalues[idx[1]].max(0.0).sqrt(),
        eig.eigenvalues[idx[2]].max(0.0).sqrt(),
    ) * footprint;
    let log_scale = scale.map(|s| s.clamp(MIN_SCALE, MAX_SCALE).ln());
    ([q.w, q.i, q.j, q.k], log_scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gicp::estimate_covariances;
    use std::f64::consts::FRAC_PI_2;

    fn k16() -> CameraIntrinsics {
        CameraIntrinsics::new(20.0, 20.0, 8.0, 8.0, 16, 16).unwrap()
    }

    fn flat_keyframe(id: u64, depth: f64) -> Keyframe {
        let k = k16();
        let mut d = Raster::zeros(16, 16, 1);
        d.data.iter_mut().for_each(|v| *v = depth);
        let mut rgb = Raster::zeros(16, 16, 3);
        rgb.data
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v = (i % 3) as f64 * 0.25);
        let pts = crate::gicp::depth_points(&d, &k);
        Keyframe {
            id,
            frame_index: id as usize,
            timestamp: id as f64,
            pose: Pose::identity(),
            rgb,
            depth: d,
            feat_gt: Some(FeatureMap::zeros(16, 16, 8)),
            signature: None,
            source: estimate_covariances(&pts, 10).unwrap(),
        }
    }

    fn gaussian(pos: Vector3<f64>, anchor: u64) -> LanguageGaussian {
        LanguageGaussian {
            id: 0,
            position: pos,
            rotation: [1.0, 0.0, 0.0, 0.0],
            log_scale: Vector3::repeat(0.01f64.ln()),
            opacity_logit: 0.0,
            color: Vector3::new(0.5, 0.5, 0.5),
            feature: vec![0.0; 4],
            anchor,
        }
    }

    #[test]
    fn empty_coverage_adds_nothing() {
        let kf = flat_keyframe(0, 2.0);
        let mut map = GaussianMap::new(4);
        let ids = map
            .insert_from_keyframe(
                &kf,
                &k16(),
                &kf.source,
                &vec![false; 256],
                None,
                FeatureInit::Zero,
            )
            .unwrap();
        assert!(ids.is_empty() && map.is_empty());
    }

    #[test]
    fn single_center_pixel() {
        let mut kf = flat_keyframe(3, 2.0);
        kf.pose = Pose::from_translation(Vector3::new(1.0, 0.0, 0.0));
        let mut cov = vec![false; 256];
        cov[8 * 16 + 8] = true;
        let codec = CodecParams::new(8, 16, 4, 0);
        let mut map = GaussianMap::new(4);
        let ids = map
            .insert_from_keyframe(
                &kf,
                &k16(),
                &kf.source,
                &cov,
                Some(&codec),
                FeatureInit::Encoder,
            )
            .unwrap();
        assert_eq!(ids.len(), 1);
        let g = &map.gaussians[0];
        assert!((g.position - Vector3::new(1.0, 0.0, 2.0)).norm() < 1e-12);
        assert_eq!(g.anchor, 3);
        assert_eq!(g.opacity(), 0.5);
        // the flat wall gives a thin Gaussian whose normal is the optical axis
        let r = g.rotation_matrix();
        let thin = g.log_scale.imin();
        assert!(r.column(thin).z.abs() > 0.999);
        assert!(map.validate().is_ok());
    }

    #[test]
    fn inserted_centres_project_inside() {
        let kf = flat_keyframe(0, 1.5);
        let mut map = GaussianMap::new(4);
        map.insert_from_keyframe(
            &kf,
            &k16(),
            &kf.source,
            &vec![true; 256],
            None,
            FeatureInit::Zero,
        )
        .unwrap();
        assert_eq!(map.len(), 256);
        for g in &map.gaussians {
            let (u, v, _) = project(&g.position, &k16()).unwrap();
            assert!(k16().contains(u + 1e-9, v + 1e-9));
        }
    }

    #[test]
    fn identity_correction_is_bitwise_noop() {
        let mut map = GaussianMap::new(4);
        map.push(gaussian(Vector3::new(-0.0, 1.0, 2.0), 0));
        let before = map.clone();
        map.apply_rigid_correction(0, &Pose::identity()).unwrap();
        assert_eq!(map, before);
    }

    #[test]
    fn translation_correction() {
        let mut map = GaussianMap::new(4);
        map.push(gaussian(Vector3::new(0.1, 0.2, 0.3), 0));
        map.push(gaussian(Vector3::new(0.5, 0.2, 0.3), 1));
        map.apply_rigid_correction(0, &Pose::from_translation(Vector3::new(1.0, 0.0, 0.0)))
            .unwrap();
        assert_eq!(map.gaussians[0].position, Vector3::new(1.1, 0.2, 0.3));
        assert_eq!(map.gaussians[1].position, Vector3::new(0.5, 0.2, 0.3));
    }

    #[test]
    fn rotation_correction() {
        let mut map = GaussianMap::new(4);
        map.push(gaussian(Vector3::new(1.0, 0.0, 0.0), 0));
        let before_scale = map.gaussians[0].log_scale;
        map.apply_rigid_correction(0, &Pose::rot_z(FRAC_PI_2))
            .unwrap();
        let g = &map.gaussians[0];
        assert!((g.position - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-12);
        let expected = Pose::rot_z(FRAC_PI_2).rotation;
        assert!(g.unit_rotation().angle_to(&expected) < 1e-12);
        assert_eq!(g.log_scale, before_scale);
    }

    #[test]
    fn unknown_keyframe_correction() {
        let mut map = GaussianMap::new(4);
        assert!(matches!(
            map.apply_rigid_correction(7, &Pose::identity()),
            Err(Error::UnknownKeyframe(7))
        ));
    }

    #[test]
    fn serialization_errors() {
        let mut map = GaussianMap::new(32);
        let mut g = gaussian(Vector3::zeros(), 0);
        g.feature = vec![0.25; 32];
        map.push(g);
        let mut buf = Vec::new();
        map.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), GaussianMap::file_size(1, 32));
        assert!(matches!(
            GaussianMap::read_from(&mut buf.as_slice(), Some(16)),
            Err(Error::DimensionMismatch {
                expected: 16,
                found: 32
            })
        ));
        assert!(matches!(
            GaussianMap::read_from(&mut &buf[..buf.len() - 3], None),
            Err(Error::Truncated(_))
        ));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(
            GaussianMap::read_from(&mut bad.as_slice(), None),
            Err(Error::BadMagic { .. })
        ));
    }

    #[test]
    fn empty_map_round_trip() {
        let map = GaussianMap::new(16);
        let mut buf = Vec::new();
        map.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 20);
        let back = GaussianMap::read_from(&mut buf.as_slice(), Some(16)).unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn validator_catches_nan() {
        let mut map = GaussianMap::new(4);
        map.push(gaussian(Vector3::zeros(), 0));
        assert!(map.validate().is_ok());
        map.gaussians[0].feature[2] = f64::NAN;
        assert!(map.validate().is_err());
    }
}
