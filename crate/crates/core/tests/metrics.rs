use lego_slam::mapping::{ssim, SSIM_C1};
use lego_slam::metrics::{ate_rmse, image_metrics, miou_accuracy, psnr};
use lego_slam::{Pose, Raster, Twist};
use nalgebra::Vector3;

fn line_trajectory(n: usize) -> Vec<(f64, Pose)> {
    (0..n)
        .map(|i| {
            let t = i as f64;
            let p = Pose::exp(&Twist::new(
                Vector3::new(0.0, 0.0, 0.01 * t),
                Vector3::new(0.05 * t, 0.3 * (0.1 * t).sin(), 1.0),
            ));
            (t, p)
        })
        .collect()
}

#[test]
fn ate_is_zero_for_identical_and_rigidly_moved_trajectories() {
    let gt = line_trajectory(50);
    assert!(ate_rmse(&gt, &gt).unwrap() < 1e-12);
    let g = Pose::exp(&Twist::new(
        Vector3::new(0.3, -0.2, 1.0),
        Vector3::new(4.0, -2.0, 0.5),
    ));
    let moved: Vec<_> = gt.iter().map(|(t, p)| (*t, g.compose(p))).collect();
    assert!(ate_rmse(&moved, &gt).unwrap() < 1e-9);
}

#[test]
fn one_outlier_in_a_hundred() {
    let gt = line_trajectory(100);
    let mut est = gt.clone();
    est[37].1.translation.y += 0.3;
    // Translation-only alignment spreads the outlier by 0.3/100; rotation can
    // only lower the residual further.
    let translation_only = ((0.3f64 - 0.003).powi(2) + 99.0 * 0.003f64.powi(2)) / 100.0;
    let rmse = ate_rmse(&est, &gt).unwrap();
    assert!(rmse <= translation_only.sqrt() + 1e-12);
    assert!((rmse - 0.3 / 10.0).abs() < 1e-3, "{rmse}");
}

#[test]
fn ate_needs_three_pairs() {
    let gt = line_trajectory(2);
    assert!(ate_rmse(&gt, &gt).is_err());
}

#[test]
fn psnr_of_uniform_offset() {
    let a = Raster::from_data(4, 4, 3, vec![0.4; 48]).unwrap();
    let b = Raster::from_data(4, 4, 3, vec![0.5; 48]).unwrap();
    assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    let (p, s) = image_metrics(&a, &b).unwrap();
    assert_eq!(p, psnr(&b, &a).unwrap());
    let expected = (2.0 * 0.4 * 0.5 + SSIM_C1) / (0.4f64 * 0.4 + 0.5 * 0.5 + SSIM_C1);
    assert!((s - expected).abs() < 1e-9);
    assert_eq!(s, ssim(&a, &b).unwrap());
    assert!(psnr(&a, &Raster::zeros(4, 4, 1)).is_err());
}

#[test]
fn miou_examples() {
    assert_eq!(
        miou_accuracy(&[0, 1, 1, 0], &[0, 1, 1, 0]).unwrap(),
        (1.0, 1.0)
    );
    assert_eq!(
        miou_accuracy(&[1, 1, 0, 0], &[0, 0, 1, 1]).unwrap(),
        (0.0, 0.0)
    );
    // class 0: 80 GT pixels, 60 hit, 20 false positives taken from class 1
    let mut gt = vec![0usize; 80];
    gt.extend([1; 40]);
    let mut pred = vec![0usize; 60];
    pred.extend([1; 20]);
    pred.extend([0; 20]);
    pred.extend([1; 20]);
    let (miou, acc) = miou_accuracy(&pred, &gt).unwrap();
    let iou0 = 60.0 / 100.0;
    let iou1 = 20.0 / (40.0 + 20.0);
    assert!((miou - (iou0 + iou1) / 2.0).abs() < 1e-12);
    assert!((acc - 80.0 / 120.0).abs() < 1e-12);
}
