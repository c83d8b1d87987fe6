//! Joint map optimization: photometric, depth and feature-distillation losses
//! over an active window of keyframes.

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::codec::CodecParams;
use crate::error::{Error, Result};
use crate::geometry::CameraIntrinsics;
use crate::map::{GaussianMap, Keyframe, MAX_SCALE, MIN_SCALE};
use crate::optim::RowAdam;
use crate::raster::Raster;
use crate::render::{render, render_backward, RenderOutput};

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;
pub const LOGIT_LIMIT: f64 = 9.0;

fn ssim_kernel() -> [f64; 2 * SSIM_RADIUS + 1] {
    let mut k = [0.0; 2 * SSIM_RADIUS + 1];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - SSIM_RADIUS as f64;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian filtering of one channel with zero padding.
fn blur(src: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let r = k.len() / 2;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                let xx = x as isize + t as isize - r as isize;
                if xx >= 0 && (xx as usize) < w {
                    acc += kv * src[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                let yy = y as isize + t as isize - r as isize;
                if yy >= 0 && (yy as usize) < h {
                    acc += kv * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Windowed local statistics. The window is renormalized by its mass inside
/// the image so border pixels see a proper weighted average.
struct Window {
    w: usize,
    h: usize,
    kernel: [f64; 2 * SSIM_RADIUS + 1],
    inv_mass: Vec<f64>,
}

impl Window {
    fn new(w: usize, h: usize) -> Self {
        let kernel = ssim_kernel();
        let mass = blur(&vec![1.0; w * h], w, h, &kernel);
        Window {
            w,
            h,
            kernel,
            inv_mass: mass.iter().map(|m| 1.0 / m).collect(),
        }
    }

    fn mean(&self, src: &[f64]) -> Vec<f64> {
        let mut out = blur(src, self.w, self.h, &self.kernel);
        out.iter_mut()
            .zip(&self.inv_mass)
            .for_each(|(o, m)| *o *= m);
        out
    }

    /// Adjoint of `mean`.
    fn mean_adjoint(&self, g: &[f64]) -> Vec<f64> {
        let scaled: Vec<f64> = g.iter().zip(&self.inv_mass).map(|(a, m)| a * m).collect();
        blur(&scaled, self.w, self.h, &self.kernel)
    }
}

fn channel(img: &Raster, c: usize) -> Vec<f64> {
    img.data
        .iter()
        .skip(c)
        .step_by(img.channels)
        .copied()
        .collect()
}

/// Mean SSIM and optionally its gradient with respect to `a`.
fn ssim_impl(a: &Raster, b: &Raster, want_grad: bool) -> Result<(f64, Option<Raster>)> {
    a.ensure_shape(b, "ssim operand")?;
    if a.data.is_empty() {
        return Err(Error::Empty("image"));
    }
    let (w, h, ch) = (a.width, a.height, a.channels);
    let win = Window::new(w, h);
    let n = (w * h * ch) as f64;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| Raster::zeros(w, h, ch));
    for c in 0..ch {
        let xa = channel(a, c);
        let xb = channel(b, c);
        let sq = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
        let mu_a = win.mean(&xa);
        let mu_b = win.mean(&xb);
        let e_aa = win.mean(&sq(&xa, &xa));
        let e_bb = win.mean(&sq(&xb, &xb));
        let e_ab = win.mean(&sq(&xa, &xb));
        let mut d_mu = vec![0.0; w * h];
        let mut d_eaa = vec![0.0; w * h];
        let mut d_eab = vec![0.0; w * h];
        for p in 0..w * h {
            let (ma, mb) = (mu_a[p], mu_b[p]);
            let a1 = 2.0 * ma * mb + SSIM_C1;
            let a2 = 2.0 * (e_ab[p] - ma * mb) + SSIM_C2;
            let b1 = ma * ma + mb * mb + SSIM_C1;
            let b2 = (e_aa[p] - ma * ma) + (e_bb[p] - mb * mb) + SSIM_C2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            if want_grad {
                d_mu[p] =
                    (2.0 * mb * (a2 - a1) / (b1 * b2) - 2.0 * ma * s * (1.0 / b1 - 1.0 / b2)) / n;
                d_eaa[p] = -s / b2 / n;
                d_eab[p] = 2.0 * a1 / (b1 * b2) / n;
            }
        }
        if let Some(g) = grad.as_mut() {
            let g_mu = win.mean_adjoint(&d_mu);
            let g_aa = win.mean_adjoint(&d_eaa);
            let g_ab = win.mean_adjoint(&d_eab);
            for p in 0..w * h {
                g.data[p * ch + c] = g_mu[p] + 2.0 * xa[p] * g_aa[p] + xb[p] * g_ab[p];
            }
        }
    }
    Ok((total / n, grad))
}

/// Structural similarity with an 11×11 Gaussian window (σ = 1.5), averaged
/// over pixels and channels.
pub fn ssim(a: &Raster, b: &Raster) -> Result<f64> {
    ssim_impl(a, b, false).map(|(s, _)| s)
}

/// SSIM and its gradient with respect to `a`.
pub fn ssim_with_grad(a: &Raster, b: &Raster) -> Result<(f64, Raster)> {
    ssim_impl(a, b, true).map(|(s, g)| (s, g.expect("gradient requested")))
}

fn l1_sign(d: f64) -> f64 {
    if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub w_depth: f64,
    pub w_feat: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_depth: 0.5,
            w_feat: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_rgb: f64,
    pub l_depth: f64,
    pub l_feat: f64,
    pub l_total: f64,
    pub weights: LossWeights,
}

/// Image-space cotangents of `l_total`.
#[derive(Debug, Clone)]
pub struct LossGradients {
    pub rgb: Raster,
    pub depth: Raster,
    pub feat: Raster,
}

/// Depth is valid where it is finite and positive.
pub fn valid_depth(d: f64) -> bool {
    d.is_finite() && d > 0.0
}

/// Evaluates the joint loss of a render against a keyframe.
pub fn compute_losses(
    out: &RenderOutput,
    kf: &Keyframe,
    codec: Option<&CodecParams>,
    weights: LossWeights,
) -> Result<LossBreakdown> {
    losses_impl(out, kf, codec, weights, false).map(|(l, _)| l)
}

/// Joint loss and its image-space gradient.
pub fn compute_losses_with_grad(
    out: &RenderOutput,
    kf: &Keyframe,
    codec: Option<&CodecParams>,
    weights: LossWeights,
) -> Result<(LossBreakdown, LossGradients)> {
    losses_impl(out, kf, codec, weights, true).map(|(l, g)| (l, g.expect("gradient requested")))
}

fn losses_impl(
    out: &RenderOutput,
    kf: &Keyframe,
    codec: Option<&CodecParams>,
    weights: LossWeights,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<LossGradients>)> {
    out.rgb.ensure_shape(&kf.rgb, "keyframe rgb")?;
    out.depth.ensure_shape(&kf.depth, "keyframe depth")?;
    let (w, h) = (out.width(), out.height());

    let n_rgb = out.rgb.data.len() as f64;
    let l1_rgb = out
        .rgb
        .data
        .iter()
        .zip(&kf.rgb.data)
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / n_rgb;
    let (s, s_grad) = ssim_impl(&out.rgb, &kf.rgb, want_grad)?;
    let l_rgb = 0.8 * l1_rgb + 0.2 * (1.0 - s) / 2.0;

    let mask: Vec<bool> = (0..w * h)
        .map(|p| valid_depth(kf.depth.data[p]) && out.acc_alpha.data[p] > 0.5)
        .collect();
    let n_depth = mask.iter().filter(|&&m| m).count();
    let l_depth = if n_depth == 0 {
        0.0
    } else {
        (0..w * h)
            .filter(|&p| mask[p])
            .map(|p| (out.depth.data[p] - kf.depth.data[p]).abs())
            .sum::<f64>()
            / n_depth as f64
    };

    let mut feat_grad = Raster::zeros(w, h, out.feat.channels);
    let l_feat = match (codec, &kf.feat_gt) {
        (Some(codec), Some(gt)) => {
            if gt.width != w || gt.height != h || gt.channels != codec.high_dim() {
                return Err(Error::ShapeMismatch(
                    "keyframe features do not match the codec".into(),
                ));
            }
            let scale = 1.0 / gt.data.len() as f64;
            let coef = if want_grad {
                weights.w_feat * scale
            } else {
                0.0
            };
            let (decoded, g) = codec.decode_with_backward(&out.feat, |p, dec, gy| {
                for ((o, d), t) in gy.iter_mut().zip(dec).zip(gt.pixel(p)) {
                    *o = coef * l1_sign(d - t);
                }
            })?;
            if want_grad && weights.w_feat != 0.0 {
                feat_grad = g;
            }
            decoded
                .data
                .iter()
                .zip(&gt.data)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                * scale
        }
        _ => 0.0,
    };

    let breakdown = LossBreakdown {
        l_rgb,
        l_depth,
        l_feat,
        l_total: l_rgb + weights.w_depth * l_depth + weights.w_feat * l_feat,
        weights,
    };
    if !want_grad {
        return Ok((breakdown, None));
    }

    let s_grad = s_grad.expect("gradient requested");
    let mut rgb = Raster::zeros(w, h, 3);
    for (i, g) in rgb.data.iter_mut().enumerate() {
        *g = 0.8 * l1_sign(out.rgb.data[i] - kf.rgb.data[i]) / n_rgb - 0.1 * s_grad.data[i];
    }
    let mut depth = Raster::zeros(w, h, 1);
    if n_depth > 0 && weights.w_depth != 0.0 {
        let c = weights.w_depth / n_depth as f64;
        for p in (0..w * h).filter(|&p| mask[p]) {
            depth.data[p] = c * l1_sign(out.depth.data[p] - kf.depth.data[p]);
        }
    }
    Ok((
        breakdown,
        Some(LossGradients {
            rgb,
            depth,
            feat: feat_grad,
        }),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearningRates {
    pub position: f64,
    pub rotation: f64,
    pub log_scale: f64,
    pub opacity_logit: f64,
    pub color: f64,
    pub feature: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            position: 1.6e-4,
            rotation: 1e-3,
            log_scale: 5e-3,
            opacity_logit: 5e-2,
            color: 2.5e-3,
            feature: 2.5e-3,
        }
    }
}

/// Adam moments for each attribute group, one row per live Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub position: RowAdam,
    pub rotation: RowAdam,
    pub log_scale: RowAdam,
    pub opacity_logit: RowAdam,
    pub color: RowAdam,
    pub feature: RowAdam,
}

impl OptimizerState {
    pub fn new(feature_dim: usize, lr: LearningRates) -> Self {
        OptimizerState {
            position: RowAdam::new(3, lr.position),
            rotation: RowAdam::new(4, lr.rotation),
            log_scale: RowAdam::new(3, lr.log_scale),
            opacity_logit: RowAdam::new(1, lr.opacity_logit),
            color: RowAdam::new(3, lr.color),
            feature: RowAdam::new(feature_dim, lr.feature),
        }
    }

    fn groups_mut(&mut self) -> [&mut RowAdam; 6] {
        [
            &mut self.position,
            &mut self.rotation,
            &mut self.log_scale,
            &mut self.opacity_logit,
            &mut self.color,
            &mut self.feature,
        ]
    }

    pub fn rows(&self) -> usize {
        self.position.rows()
    }

    /// Adds zeroed rows for Gaussians appended to the map since the last call.
    pub fn sync(&mut self, map: &GaussianMap) {
        let missing = map.len().saturating_sub(self.rows());
        for g in self.groups_mut() {
            g.push_rows(missing);
        }
    }

    /// Drops the rows of removed Gaussians.
    pub fn retain(&mut self, keep: &[bool]) {
        for g in self.groups_mut() {
            g.retain(keep);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MappingConfig {
    pub weights: LossWeights,
    pub recent: usize,
    pub random_older: usize,
}

impl Default for MappingConfig {
    fn default() -> Self {
        MappingConfig {
            weights: LossWeights::default(),
            recent: 8,
            random_older: 4,
        }
    }
}

/// The most recent `recent` keyframes plus up to `random_older` older ones
/// drawn uniformly. Input must be in creation order.
pub fn active_window(
    keyframe_ids: &[u64],
    recent: usize,
    random_older: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<u64> {
    let split = keyframe_ids.len().saturating_sub(recent);
    let (older, newest) = keyframe_ids.split_at(split);
    let mut picked: Vec<usize> = sample(rng, older.len(), random_older.min(older.len())).into_vec();
    picked.sort_unstable();
    picked
        .into_iter()
        .map(|i| older[i])
        .chain(newest.iter().copied())
        .collect()
}

/// True once the map has had its warm-up iterations and enough keyframes
/// have arrived since the last adaptation.
pub fn encoder_gate(global_iteration: u64, keyframes_since_adapt: u64) -> bool {
    encoder_gate_with(global_iteration, keyframes_since_adapt, 500, 10)
}

/// [`encoder_gate`] with explicit warmup and period.
pub fn encoder_gate_with(
    global_iteration: u64,
    keyframes_since_adapt: u64,
    warmup: u64,
    every: u64,
) -> bool {
    global_iteration >= warmup && keyframes_since_adapt >= every
}

/// Applies one Adam step to every Gaussian from a gradient set.
pub fn apply_gradients(
    map: &mut GaussianMap,
    grads: &crate::render::Gradients,
    state: &mut OptimizerState,
) {
    state.sync(map);
    let (lo, hi) = (MIN_SCALE.ln(), MAX_SCALE.ln());
    let dim = map.feature_dim;
    for (i, g) in map.gaussians.iter_mut().enumerate() {
        state
            .position
            .step_row(i, g.position.as_mut_slice(), grads.position[i].as_slice());
        state
            .rotation
            .step_row(i, &mut g.rotation, &grads.rotation[i]);
        state
            .log_scale
            .step_row(i, g.log_scale.as_mut_slice(), grads.log_scale[i].as_slice());
        state.opacity_logit.step_row(
            i,
            std::slice::from_mut(&mut g.opacity_logit),
            &[grads.opacity_logit[i]],
        );
        state
            .color
            .step_row(i, g.color.as_mut_slice(), grads.color[i].as_slice());
        state
            .feature
            .step_row(i, &mut g.feature, &grads.feature[i * dim..(i + 1) * dim]);
        let n = g.rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            g.rotation.iter_mut().for_each(|v| *v /= n);
        } else {
            g.rotation = [1.0, 0.0, 0.0, 0.0];
        }
        g.log_scale.iter_mut().for_each(|s| *s = s.clamp(lo, hi));
        g.opacity_logit = g.opacity_logit.clamp(-LOGIT_LIMIT, LOGIT_LIMIT);
    }
}

/// Runs `iterations` optimization steps, each on one keyframe drawn
/// uniformly from `window`. Returns the loss of every iteration.
#[allow(clippy::too_many_arguments)]
pub fn mapping_round(
    map: &mut GaussianMap,
    window: &[&Keyframe],
    k: &CameraIntrinsics,
    iterations: usize,
    codec: Option<&CodecParams>,
    state: &mut OptimizerState,
    cfg: &MappingConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<LossBreakdown>> {
    if window.is_empty() {
        return Err(Error::Empty("mapping window"));
    }
    let mut trace = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let kf = window[rng.random_range(0..window.len())];
        let out = render(map, &kf.pose, k);
        let (loss, g) = compute_losses_with_grad(&out, kf, codec, cfg.weights)?;
        let grads = render_backward(map, &out, &g.rgb, &g.depth, &g.feat)?;
        apply_gradients(map, &grads, state);
        trace.push(loss);
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn image(w: usize, h: usize, f: impl Fn(usize, usize) -> f64) -> Raster {
        let mut r = Raster::zeros(w, h, 1);
        for y in 0..h {
            for x in 0..w {
                r.data[y * w + x] = f(x, y);
            }
        }
        r
    }

    #[test]
    fn ssim_self_is_one() {
        let a = image(20, 17, |x, y| ((x * 7 + y * 3) % 11) as f64 / 10.0);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_inverted_checker_is_negative() {
        let a = image(16, 16, |x, y| ((x + y) % 2) as f64);
        let b = image(16, 16, |x, y| 1.0 - ((x + y) % 2) as f64);
        assert!(ssim(&a, &b).unwrap() < 0.0);
    }

    #[test]
    fn ssim_constant_closed_form() {
        let (v, w) = (0.3, 0.7);
        let a = image(13, 9, |_, _| v);
        let b = image(13, 9, |_, _| w);
        let expected = (2.0 * v * w + SSIM_C1) * SSIM_C2 / ((v * v + w * w + SSIM_C1) * SSIM_C2);
        assert!((ssim(&a, &b).unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn ssim_shape_mismatch() {
        assert!(ssim(&Raster::zeros(4, 4, 1), &Raster::zeros(4, 5, 1)).is_err());
    }

    #[test]
    fn ssim_gradient_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Raster::from_data(
            12,
            10,
            2,
            (0..240).map(|_| rng.random_range(0.0..1.0)).collect(),
        )
        .unwrap();
        let b = Raster::from_data(
            12,
            10,
            2,
            (0..240).map(|_| rng.random_range(0.0..1.0)).collect(),
        )
        .unwrap();
        let (_, g) = ssim_with_grad(&a, &b).unwrap();
        let h = 1e-6;
        for i in [0, 7, 33, 120, 239] {
            let mut ap = a.clone();
            ap.data[i] += h;
            let mut am = a.clone();
            am.data[i] -= h;
            let fd = (ssim(&ap, &b).unwrap() - ssim(&am, &b).unwrap()) / (2.0 * h);
            assert!(
                (fd - g.data[i]).abs() < 1e-7 * (1.0 + fd.abs()),
                "{i}: {fd} vs {}",
                g.data[i]
            );
        }
    }

    #[test]
    fn gate() {
        assert!(!encoder_gate(0, 100));
        assert!(encoder_gate(501, 10));
        assert!(!encoder_gate(1_000_000, 9));
    }

    #[test]
    fn window_takes_recent_and_older() {
        let ids: Vec<u64> = (0..20).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = active_window(&ids, 8, 4, &mut rng);
        assert_eq!(w.len(), 12);
        assert_eq!(&w[4..], &ids[12..]);
        assert!(w[..4].iter().all(|&i| i < 12));
        assert_eq!(active_window(&ids[..3], 8, 4, &mut rng), vec![0, 1, 2]);
    }
}
