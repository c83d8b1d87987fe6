mod common;

use common::*;
use lego_slam::render::{project_gaussian, ALPHA_MAX};
use lego_slam::{render, render_backward, GaussianMap, Pose, Raster};
use nalgebra::Vector3;

#[test]
fn gradients_match_finite_differences() {
    let k = intrinsics(16, 16, 18.0);
    let mut r = rng(11);
    let mut worst = [0.0f64; 6];
    let mut checked = 0;
    for _ in 0..5 {
        let map = random_scene(&mut r, 12, 3, &k);
        let rep = gradient_check(&map, &k, &mut r, 1e-4);
        checked += rep.checked;
        for (w, e) in worst.iter_mut().zip(rep.max_rel) {
            *w = w.max(e);
        }
    }
    assert!(checked > 500, "too few smooth components: {checked}");
    for (name, e) in GROUPS.iter().zip(worst) {
        assert!(e < 1e-3, "{name}: relative error {e}");
    }
}

#[test]
fn far_off_axis_gaussian_is_culled() {
    let k = intrinsics(16, 16, 18.0);
    let g = gaussian(Vector3::new(5.0, 0.0, 0.5), 0.2, 3.0, vec![0.0; 2]);
    assert!(project_gaussian(&g, 0, &Pose::identity(), &k).is_none());
}

#[test]
fn opaque_front_splat_hides_the_back_one() {
    let k = intrinsics(16, 16, 18.0);
    let mut map = GaussianMap::new(1);
    let mut front = gaussian(Vector3::new(0.0, 0.0, 1.0), 0.5, 20.0, vec![1.0]);
    front.color = Vector3::new(1.0, 0.0, 0.0);
    let mut back = gaussian(Vector3::new(0.0, 0.0, 2.0), 0.5, 20.0, vec![-1.0]);
    back.color = Vector3::new(0.0, 0.0, 1.0);
    map.push(back);
    map.push(front);
    let out = render(&map, &Pose::identity(), &k);
    let c = 8 * 16 + 8;
    let px = out.rgb.pixel(c);
    // Alpha saturates at ALPHA_MAX, so the back splat leaks (1 - ALPHA_MAX)².
    assert!((px[0] - ALPHA_MAX).abs() < 1e-3, "{px:?}");
    assert!(px[2] < 0.011, "{px:?}");
    assert!(out.feat.pixel(c)[0] > 0.97);
}

#[test]
fn backward_is_linear_in_the_cotangent() {
    let k = intrinsics(16, 16, 18.0);
    let mut r = rng(5);
    let map = random_scene(&mut r, 8, 2, &k);
    let out = render(&map, &Pose::identity(), &k);
    let a = random_raster(&mut r, 16, 16, 3);
    let zero_d = Raster::zeros(16, 16, 1);
    let zero_f = Raster::zeros(16, 16, 2);
    let g1 = render_backward(&map, &out, &a, &zero_d, &zero_f).unwrap();
    let mut a2 = a.clone();
    a2.data.iter_mut().for_each(|v| *v *= 2.0);
    let g2 = render_backward(&map, &out, &a2, &zero_d, &zero_f).unwrap();
    for (x, y) in g1.position.iter().zip(&g2.position) {
        assert!((x * 2.0 - y).norm() <= 1e-12 * (1.0 + y.norm()));
    }
    assert!(g1.feature.iter().all(|&v| v == 0.0));
}

#[test]
fn render_is_deterministic() {
    let k = intrinsics(16, 16, 18.0);
    let map = random_scene(&mut rng(9), 20, 4, &k);
    let a = render(&map, &Pose::identity(), &k);
    let b = render(&map, &Pose::identity(), &k);
    assert_eq!(a.rgb, b.rgb);
    assert_eq!(a.depth, b.depth);
    assert_eq!(a.feat, b.feat);
}
