//! Trajectory, image and segmentation metrics.

use nalgebra::{Matrix3, Vector3};

use crate::dataset::nearest_timestamp;
use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::mapping::ssim;
use crate::query::VOID;
use crate::raster::Raster;

pub const PSNR_CAP: f64 = 99.0;
const ASSOCIATION_DT: f64 = 0.02;

/// Rigid transform (no scale) that best maps `src` onto `dst` in the least-squares sense.
pub fn align_rigid(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Pose {
    let n = src.len() as f64;
    let mu_s = src.iter().sum::<Vector3<f64>>() / n;
    let mu_d = dst.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        cov += (d - mu_d) * (s - mu_s).transpose();
    }
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut fix = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        fix[(2, 2)] = -1.0;
    }
    let r = u * fix * vt;
    Pose::from_rotation_matrix(&r, mu_d - r * mu_s)
}

/// Absolute trajectory error: RMSE of translational residuals after rigid
/// alignment of `est` to `gt`, pairing poses by nearest timestamp.
pub fn ate_rmse(est: &[(f64, Pose)], gt: &[(f64, Pose)]) -> Result<f64> {
    let mut a = Vec::new();
    let mut b = Vec::new();
    for (t, p) in est {
        if let Some(i) = nearest_timestamp(gt, *t, ASSOCIATION_DT) {
            a.push(p.translation);
            b.push(gt[i].1.translation);
        }
    }
    if a.len() < 3 {
        return Err(Error::TooFewPoints {
            needed: 3,
            got: a.len(),
        });
    }
    let t = align_rigid(&a, &b);
    let sq: f64 = a
        .iter()
        .zip(&b)
        .map(|(p, q)| (t.transform_point(p) - q).norm_squared())
        .sum();
    Ok((sq / a.len() as f64).sqrt())
}

/// Peak signal-to-noise ratio for images in [0,1], capped at 99 dB.
pub fn psnr(a: &Raster, b: &Raster) -> Result<f64> {
    a.ensure_shape(b, "psnr operand")?;
    if a.data.is_empty() {
        return Err(Error::Empty("image"));
    }
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_CAP))
}

pub fn image_metrics(a: &Raster, b: &Raster) -> Result<(f64, f64)> {
    Ok((psnr(a, b)?, ssim(a, b)?))
}

/// Mean IoU over classes present in the ground truth and pixel accuracy,
/// both over pixels whose ground-truth label is not [`VOID`].
pub fn miou_accuracy(pred: &[usize], gt: &[usize]) -> Result<(f64, f64)> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions for {} labels",
            pred.len(),
            gt.len()
        )));
    }
    let mut conf = Confusion::default();
    conf.add(pred, gt);
    conf.scores()
}

/// Accumulates counts across images before scoring.
#[derive(Debug, Clone, Default)]
pub struct Confusion {
    tp: Vec<u64>,
    fp: Vec<u64>,
    fn_: Vec<u64>,
    present: Vec<bool>,
    valid: u64,
    correct: u64,
}

impl Confusion {
    fn grow(&mut self, c: usize) {
        if c >= self.tp.len() {
            self.tp.resize(c + 1, 0);
            self.fp.resize(c + 1, 0);
            self.fn_.resize(c + 1, 0);
            self.present.resize(c + 1, false);
        }
    }

    pub fn add(&mut self, pred: &[usize], gt: &[usize]) {
        for (&p, &g) in pred.iter().zip(gt) {
            if g == VOID {
                continue;
            }
            self.valid += 1;
            self.grow(g);
            self.present[g] = true;
            if p == g {
                self.correct += 1;
                self.tp[g] += 1;
            } else {
                self.fn_[g] += 1;
                if p != VOID {
                    self.grow(p);
                    self.fp[p] += 1;
                }
            }
        }
    }

    pub fn scores(&self) -> Result<(f64, f64)> {
        if self.valid == 0 {
            return Err(Error::Empty("all pixels are void"));
        }
        let classes: Vec<usize> = (0..self.present.len())
            .filter(|&c| self.present[c])
            .collect();
        let miou = classes
            .iter()
            .map(|&c| self.tp[c] as f64 / (self.tp[c] + self.fp[c] + self.fn_[c]) as f64)
            .sum::<f64>()
            / classes.len() as f64;
        Ok((miou, self.correct as f64 / self.valid as f64))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_cases() {
        let a = Raster::from_data(2, 1, 1, vec![0.2, 0.5]).unwrap();
        let b = Raster::from_data(2, 1, 1, vec![0.3, 0.6]).unwrap();
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    }

    #[test]
    fn iou_hand_count() {
        // class 0: 80 GT pixels, 60 predicted correctly, plus 20 false positives from class 1
        let mut gt = vec![0usize; 80];
        gt.extend(vec![1usize; 40]);
        let mut pred = vec![0usize; 60];
        pred.extend(vec![1usize; 20]);
        pred.extend(vec![0usize; 20]);
        pred.extend(vec![1usize; 20]);
        let mut conf = Confusion::default();
        conf.add(&pred, &gt);
        assert!(
            (conf.tp[0] as f64 / (conf.tp[0] + conf.fp[0] + conf.fn_[0]) as f64 - 0.6).abs()
                < 1e-12
        );
    }

    #[test]
    fn swapped_and_void() {
        assert_eq!(miou_accuracy(&[1, 0], &[0, 1]).unwrap(), (0.0, 0.0));
        assert_eq!(
            miou_accuracy(&[0, 1, 5], &[0, 1, VOID]).unwrap(),
            (1.0, 1.0)
        );
        assert!(miou_accuracy(&[0], &[VOID]).is_err());
    }
}
