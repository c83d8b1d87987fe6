//! On-disk datasets: the synthetic layout written by `generate`, and TUM RGB-D.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb};
use nalgebra::{Quaternion, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Pose};
use crate::raster::{FeatureMap, Raster};
use crate::synthetic::{Frame, SyntheticSceneSpec};

pub const DEPTH_MAGIC: &[u8; 8] = b"LEGODPT1";
pub const FEAT_MAGIC: &[u8; 8] = b"LEGOFEA1";
const TUM_DEPTH_SCALE: f64 = 5000.0;
const TUM_MAX_DT: f64 = 0.02;

/// A loaded sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub intrinsics: CameraIntrinsics,
    pub frames: Vec<Frame>,
    /// Present for synthetic datasets; carries class prototypes for evaluation.
    pub scene: Option<SyntheticSceneSpec>,
}

impl Dataset {
    pub fn from_synthetic(spec: &SyntheticSceneSpec, frames: Vec<Frame>) -> Self {
        Dataset {
            intrinsics: spec.intrinsics,
            frames,
            scene: Some(spec.clone()),
        }
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.frames
            .first()
            .and_then(|f| f.feat.as_ref())
            .map(|f| f.channels)
    }
}

fn frame_name(i: usize) -> String {
    format!("{i:06}")
}

/// Writes an RGB raster in [0,1] as an 8-bit PNG.
pub fn write_rgb_png(path: &Path, img: &Raster) -> Result<()> {
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> =
        ImageBuffer::from_fn(img.width as u32, img.height as u32, |x, y| {
            let p = img.at(x as usize, y as usize);
            Rgb([to_u8(p[0]), to_u8(p[1]), to_u8(p[2])])
        });
    buf.save(path)?;
    Ok(())
}

/// Writes a single-channel raster in [0,1] as an 8-bit grayscale PNG; values are clamped.
pub fn write_gray_png(path: &Path, img: &Raster) -> Result<()> {
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_fn(img.width as u32, img.height as u32, |x, y| {
            Luma([to_u8(img.get(x as usize, y as usize))])
        });
    buf.save(path)?;
    Ok(())
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn read_rgb_png(path: &Path) -> Result<Raster> {
    let img = image::open(path)
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img
        .into_raw()
        .into_iter()
        .map(|v| v as f64 / 255.0)
        .collect();
    Raster::from_data(w, h, 3, data)
}

fn write_raw(path: &Path, magic: &[u8; 8], dims: &[u32], data: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + 4 * dims.len() + 4 * data.len());
    buf.extend_from_slice(magic);
    for d in dims {
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for v in data {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

fn read_raw(
    path: &Path,
    magic: &[u8; 8],
    ndims: usize,
    expect: &'static str,
) -> Result<(Vec<usize>, Vec<f64>)> {
    let bytes = fs::read(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
    let header = 8 + 4 * ndims;
    if bytes.len() < header {
        return Err(Error::Truncated(format!("{} header", path.display())));
    }
    if &bytes[..8] != magic {
        return Err(Error::BadMagic { expected: expect });
    }
    let dims: Vec<usize> = (0..ndims)
        .map(|i| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    let n: usize = dims.iter().product();
    if bytes.len() != header + 4 * n {
        return Err(Error::Truncated(format!(
            "{}: expected {} values",
            path.display(),
            n
        )));
    }
    let data = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok((dims, data))
}

/// Depth file: magic, u32 height, u32 width, then f32 meters row-major.
pub fn write_depth(path: &Path, depth: &Raster) -> Result<()> {
    write_raw(
        path,
        DEPTH_MAGIC,
        &[depth.height as u32, depth.width as u32],
        &depth.data,
    )
}

pub fn read_depth(path: &Path) -> Result<Raster> {
    let (d, data) = read_raw(path, DEPTH_MAGIC, 2, "LEGODPT1")?;
    Raster::from_data(d[1], d[0], 1, data)
}

/// Feature file: magic, u32 height, u32 width, u32 channels, then f32 row-major.
pub fn write_features(path: &Path, feat: &FeatureMap) -> Result<()> {
    write_raw(
        path,
        FEAT_MAGIC,
        &[feat.height as u32, feat.width as u32, feat.channels as u32],
        &feat.data,
    )
}

pub fn read_features(path: &Path) -> Result<FeatureMap> {
    let (d, data) = read_raw(path, FEAT_MAGIC, 3, "LEGOFEA1")?;
    FeatureMap::from_data(d[1], d[0], d[2], data)
}

/// TUM trajectory line: `timestamp tx ty tz qx qy qz qw`.
pub fn format_tum_pose(t: f64, p: &Pose) -> String {
    let q = p.rotation.quaternion();
    format!(
        "{} {} {} {} {} {} {} {}",
        t, p.translation.x, p.translation.y, p.translation.z, q.i, q.j, q.k, q.w
    )
}

pub fn write_trajectory(path: &Path, traj: &[(f64, Pose)]) -> Result<()> {
    let mut s = String::new();
    for (t, p) in traj {
        s.push_str(&format_tum_pose(*t, p));
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

/// Parses TUM-format pose lines; `#` starts a comment.
pub fn read_trajectory(path: &Path) -> Result<Vec<(f64, Pose)>> {
    let text = fs::read_to_string(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| parse_err(path, i + 1, "non-numeric pose field"))?;
        if v.len() != 8 {
            return Err(parse_err(path, i + 1, "expected 8 fields"));
        }
        let q = Quaternion::new(v[7], v[4], v[5], v[6]);
        if !(q.norm() > 0.0) {
            return Err(parse_err(path, i + 1, "zero quaternion"));
        }
        let rot = if (q.norm() - 1.0).abs() < 1e-12 {
            UnitQuaternion::new_unchecked(q)
        } else {
            UnitQuaternion::new_normalize(q)
        };
        out.push((v[0], Pose::new(rot, Vector3::new(v[1], v[2], v[3]))));
    }
    Ok(out)
}

fn parse_err(path: &Path, line: usize, msg: &str) -> Error {
    Error::Parse {
        file: path.display().to_string(),
        line,
        msg: msg.to_string(),
    }
}

/// Writes the synthetic dataset layout.
pub fn write_dataset(dir: &Path, spec: &SyntheticSceneSpec, frames: &[Frame]) -> Result<()> {
    for sub in ["rgb", "depth", "feat"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    fs::write(dir.join("scene.txt"), spec.to_text())?;
    let mut poses = Vec::new();
    for f in frames {
        let name = frame_name(f.index);
        write_rgb_png(&dir.join("rgb").join(format!("{name}.png")), &f.rgb)?;
        write_depth(&dir.join("depth").join(format!("{name}.depth")), &f.depth)?;
        if let Some(feat) = &f.feat {
            write_features(&dir.join("feat").join(format!("{name}.feat")), feat)?;
        }
        if let Some(p) = f.gt_pose {
            poses.push((f.timestamp, p));
        }
    }
    write_trajectory(&dir.join("poses.txt"), &poses)
}

/// Reads a dataset written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let scene_path = dir.join("scene.txt");
    let text =
        fs::read_to_string(&scene_path).map_err(|_| Error::MissingFile(scene_path.clone()))?;
    let spec = SyntheticSceneSpec::from_text(&text, &scene_path)?;
    let poses = read_trajectory(&dir.join("poses.txt"))?;
    let mut frames = Vec::new();
    for i in 0..spec.frames {
        let name = frame_name(i);
        let rgb_path = dir.join("rgb").join(format!("{name}.png"));
        if !rgb_path.exists() {
            return Err(Error::MissingFile(rgb_path));
        }
        let rgb = read_rgb_png(&rgb_path)?;
        let depth = read_depth(&dir.join("depth").join(format!("{name}.depth")))?;
        let feat_path = dir.join("feat").join(format!("{name}.feat"));
        let feat = if feat_path.exists() {
            Some(read_features(&feat_path)?)
        } else {
            None
        };
        let (w, h) = (spec.intrinsics.width, spec.intrinsics.height);
        let shapes_ok = rgb.width == w
            && rgb.height == h
            && depth.width == w
            && depth.height == h
            && feat.as_ref().is_none_or(|f| f.width == w && f.height == h);
        if !shapes_ok {
            return Err(Error::Dataset(format!(
                "frame {i} does not match the {w}x{h} intrinsics"
            )));
        }
        let (timestamp, gt_pose) = match poses.get(i) {
            Some((t, p)) => (*t, Some(*p)),
            None => (i as f64 * spec.frame_interval, None),
        };
        frames.push(Frame {
            index: i,
            timestamp,
            rgb,
            depth,
            feat,
            gt_pose,
        });
    }
    Ok(Dataset {
        intrinsics: spec.intrinsics,
        frames,
        scene: Some(spec),
    })
}

/// Parses a TUM `timestamp filename` list.
fn read_tum_list(path: &Path) -> Result<Vec<(f64, PathBuf)>> {
    let text = fs::read_to_string(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let (Some(t), Some(f)) = (it.next(), it.next()) else {
            return Err(parse_err(path, i + 1, "expected 'timestamp filename'"));
        };
        let t: f64 = t
            .parse()
            .map_err(|_| parse_err(path, i + 1, "bad timestamp"))?;
        out.push((t, base.join(f)));
    }
    Ok(out)
}

/// Index of the entry nearest to `t` within `max_dt`. Distances within
/// 1e-9 s count as ties and resolve to the earlier entry.
pub fn nearest_timestamp<T>(list: &[(f64, T)], t: f64, max_dt: f64) -> Option<usize> {
    const TIE: f64 = 1e-9;
    let mut best: Option<(f64, usize)> = None;
    for (i, (ti, _)) in list.iter().enumerate() {
        let d = (ti - t).abs();
        if d <= max_dt + TIE && best.is_none_or(|(bd, _)| d < bd - TIE) {
            best = Some((d, i));
        }
    }
    best.map(|(_, i)| i)
}

/// Default Freiburg-1 intrinsics at full 640×480 resolution.
pub fn tum_intrinsics() -> CameraIntrinsics {
    CameraIntrinsics::new(517.3, 516.5, 318.6, 255.3, 640, 480).expect("valid TUM intrinsics")
}

/// Decodes a 16-bit TUM depth PNG into meters; zero stays invalid.
pub fn read_tum_depth(path: &Path) -> Result<Raster> {
    let img = image::open(path)
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?
        .to_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img
        .into_raw()
        .into_iter()
        .map(|v| v as f64 / TUM_DEPTH_SCALE)
        .collect();
    Raster::from_data(w, h, 1, data)
}

/// Loads a TUM RGB-D sequence, downsampled by an integer factor. Frames are
/// RGB images paired with the nearest depth image within 0.02 s.
pub fn load_tum_rgbd(dir: &Path, downsample: usize, max_frames: Option<usize>) -> Result<Dataset> {
    let rgb_list = read_tum_list(&dir.join("rgb.txt"))?;
    let depth_list = read_tum_list(&dir.join("depth.txt"))?;
    let gt_path = dir.join("groundtruth.txt");
    let gt = if gt_path.exists() {
        read_trajectory(&gt_path)?
    } else {
        Vec::new()
    };
    let factor = downsample.max(1);
    let mut frames = Vec::new();
    for (t, rgb_path) in &rgb_list {
        if max_frames.is_some_and(|m| frames.len() >= m) {
            break;
        }
        let Some(di) = nearest_timestamp(&depth_list, *t, TUM_MAX_DT) else {
            continue;
        };
        let rgb = read_rgb_png(rgb_path)?.downsample(factor);
        let depth = read_tum_depth(&depth_list[di].1)?.downsample(factor);
        let gt_pose = nearest_timestamp(&gt, *t, TUM_MAX_DT).map(|i| gt[i].1);
        frames.push(Frame {
            index: frames.len(),
            timestamp: *t,
            rgb,
            depth,
            feat: None,
            gt_pose,
        });
    }
    if frames.is_empty() {
        return Err(Error::Dataset(format!(
            "no rgb/depth pairs within {TUM_MAX_DT} s in {}",
            dir.display()
        )));
    }
    Ok(Dataset {
        intrinsics: tum_intrinsics().downsampled(factor),
        frames,
        scene: None,
    })
}
