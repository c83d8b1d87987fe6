//! Scene-adaptive feature codec.
//!
//! The encoder compresses D-dimensional per-pixel language features to the
//! map's compact d-dimensional space and the decoder lifts them back. Both are
//! two affine layers with a ReLU in between, applied independently at every
//! pixel (a stack of 1×1 convolutions).

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::raster::FeatureMap;

pub const CODEC_MAGIC: &[u8; 10] = b"LEGOCODEC1";
pub const DEFAULT_HIDDEN: usize = 64;

/// Fully connected layer, `out = W x + b`, with `W` stored row-major `outputs × inputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn new(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / (inputs + outputs) as f64).sqrt();
        Dense {
            inputs,
            outputs,
            weight: (0..inputs * outputs)
                .map(|_| rng.random_range(-bound..bound))
                .collect(),
            bias: vec![0.0; outputs],
        }
    }

    fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    #[inline]
    fn forward(&self, x: &[f64], out: &mut [f64]) {
        for (o, (row, b)) in out
            .iter_mut()
            .zip(self.weight.chunks_exact(self.inputs).zip(&self.bias))
        {
            *o = b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
    }

    /// Accumulates parameter gradients (if `grads` is given) and writes the
    /// input gradient into `gx`.
    #[inline]
    fn backward(&self, x: &[f64], gy: &[f64], grads: Option<&mut [f64]>, gx: &mut [f64]) {
        gx.iter_mut().for_each(|v| *v = 0.0);
        for (o, &g) in gy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let row = &self.weight[o * self.inputs..(o + 1) * self.inputs];
            for (gxi, w) in gx.iter_mut().zip(row) {
                *gxi += g * w;
            }
        }
        if let Some(grads) = grads {
            let (gw, gb) = grads.split_at_mut(self.weight.len());
            for (o, &g) in gy.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                for (gwi, xi) in gw[o * self.inputs..(o + 1) * self.inputs].iter_mut().zip(x) {
                    *gwi += g * xi;
                }
                gb[o] += g;
            }
        }
    }

    fn params(&self) -> impl Iterator<Item = &f64> {
        self.weight.iter().chain(&self.bias)
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weight.iter_mut().chain(self.bias.iter_mut())
    }
}

/// Two dense layers with a ReLU between them.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub first: Dense,
    pub second: Dense,
}

/// Activations kept from a forward pass for backpropagation.
struct Trace {
    pre: Vec<f64>,
    act: Vec<f64>,
}

impl Mlp {
    fn new(inputs: usize, hidden: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        Mlp {
            first: Dense::new(inputs, hidden, rng),
            second: Dense::new(hidden, outputs, rng),
        }
    }

    pub fn inputs(&self) -> usize {
        self.first.inputs
    }

    pub fn outputs(&self) -> usize {
        self.second.outputs
    }

    pub fn param_count(&self) -> usize {
        self.first.param_count() + self.second.param_count()
    }

    fn forward_traced(&self, x: &[f64], out: &mut [f64], trace: &mut Trace) {
        self.first.forward(x, &mut trace.pre);
        for (a, &p) in trace.act.iter_mut().zip(&trace.pre) {
            *a = p.max(0.0);
        }
        self.second.forward(&trace.act, out);
    }

    pub fn forward(&self, x: &[f64], out: &mut [f64]) {
        let mut trace = self.trace();
        self.forward_traced(x, out, &mut trace);
    }

    fn trace(&self) -> Trace {
        Trace {
            pre: vec![0.0; self.first.outputs],
            act: vec![0.0; self.first.outputs],
        }
    }

    fn backward(
        &self,
        x: &[f64],
        trace: &Trace,
        gy: &[f64],
        grads: Option<&mut [f64]>,
        gx: &mut [f64],
    ) {
        let mut g_act = vec![0.0; self.first.outputs];
        let split = self.first.param_count();
        let (g1, g2) = match grads {
            Some(g) => {
                let (a, b) = g.split_at_mut(split);
                (Some(a), Some(b))
            }
            None => (None, None),
        };
        self.second.backward(&trace.act, gy, g2, &mut g_act);
        for (g, &p) in g_act.iter_mut().zip(&trace.pre) {
            if p <= 0.0 {
                *g = 0.0;
            }
        }
        self.first.backward(x, &g_act, g1, gx);
    }

    fn params(&self) -> Vec<f64> {
        self.first
            .params()
            .chain(self.second.params())
            .copied()
            .collect()
    }

    fn set_params(&mut self, p: &[f64]) {
        for (dst, src) in self
            .first
            .params_mut()
            .chain(self.second.params_mut())
            .zip(p)
        {
            *dst = *src;
        }
    }

    fn zero_biases(&mut self) {
        self.first.bias.iter_mut().for_each(|b| *b = 0.0);
        self.second.bias.iter_mut().for_each(|b| *b = 0.0);
    }

    fn is_finite(&self) -> bool {
        self.first
            .params()
            .chain(self.second.params())
            .all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodecParams {
    pub encoder: Mlp,
    pub decoder: Mlp,
}

/// Result of [`pretrain`].
#[derive(Debug, Clone)]
pub struct Pretrained {
    pub params: CodecParams,
    pub final_l1: f64,
}

fn l1_sign(diff: f64) -> f64 {
    if diff > 0.0 {
        1.0
    } else if diff < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl CodecParams {
    /// Randomly initialized codec (Glorot-uniform weights, zero biases).
    pub fn new(high_dim: usize, hidden: usize, code_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        CodecParams {
            encoder: Mlp::new(high_dim, hidden, code_dim, &mut rng),
            decoder: Mlp::new(code_dim, hidden, high_dim, &mut rng),
        }
    }

    pub fn high_dim(&self) -> usize {
        self.encoder.inputs()
    }

    pub fn code_dim(&self) -> usize {
        self.encoder.outputs()
    }

    pub fn hidden(&self) -> usize {
        self.encoder.first.outputs
    }

    pub fn param_count(&self) -> usize {
        self.encoder.param_count() + self.decoder.param_count()
    }

    pub fn with_zero_biases(mut self) -> Self {
        self.encoder.zero_biases();
        self.decoder.zero_biases();
        self
    }

    pub fn is_finite(&self) -> bool {
        self.encoder.is_finite() && self.decoder.is_finite()
    }

    pub fn encode_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.code_dim()];
        self.encoder.forward(x, &mut out);
        out
    }

    pub fn decode_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.high_dim()];
        self.decoder.forward(x, &mut out);
        out
    }

    pub fn encode_query(&self, q: &[f64]) -> Result<Vec<f64>> {
        if q.len() != self.high_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.high_dim(),
                found: q.len(),
            });
        }
        Ok(self.encode_vec(q))
    }

    pub fn encode(&self, x: &FeatureMap) -> Result<FeatureMap> {
        apply_per_pixel(&self.encoder, x)
    }

    pub fn decode(&self, x: &FeatureMap) -> Result<FeatureMap> {
        apply_per_pixel(&self.decoder, x)
    }

    /// Gradient of `Σ_pixels <g, decode(x)>` with respect to `x`, decoder frozen.
    /// Also returns the decoded map so callers can form the loss.
    pub fn decode_with_backward<F>(
        &self,
        x: &FeatureMap,
        mut cotangent: F,
    ) -> Result<(FeatureMap, FeatureMap)>
    where
        F: FnMut(usize, &[f64], &mut [f64]),
    {
        check_channels(&self.decoder, x)?;
        let high = self.high_dim();
        let mut decoded = FeatureMap::zeros(x.width, x.height, high);
        let mut grad = FeatureMap::zeros(x.width, x.height, x.channels);
        let mut trace = self.decoder.trace();
        let mut gy = vec![0.0; high];
        for p in 0..x.pixel_count() {
            let xin = x.pixel(p);
            self.decoder
                .forward_traced(xin, decoded.pixel_mut(p), &mut trace);
            cotangent(p, decoded.pixel(p), &mut gy);
            self.decoder
                .backward(xin, &trace, &gy, None, grad.pixel_mut(p));
        }
        Ok((decoded, grad))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CODEC_MAGIC)?;
        for v in [self.high_dim(), self.hidden(), self.code_dim()] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        for layer in [
            &self.encoder.first,
            &self.encoder.second,
            &self.decoder.first,
            &self.decoder.second,
        ] {
            for v in layer.params() {
                w.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 10];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Truncated("codec header".into()))?;
        if &magic != CODEC_MAGIC {
            return Err(Error::BadMagic {
                expected: "LEGOCODEC1",
            });
        }
        let mut dims = [0usize; 3];
        for d in dims.iter_mut() {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)
                .map_err(|_| Error::Truncated("codec header".into()))?;
            *d = u32::from_le_bytes(b) as usize;
        }
        let [high, hidden, code] = dims;
        let mut params = CodecParams::new(high, hidden, code, 0);
        for layer in [
            &mut params.encoder.first,
            &mut params.encoder.second,
            &mut params.decoder.first,
            &mut params.decoder.second,
        ] {
            for v in layer.params_mut() {
                let mut b = [0u8; 4];
                r.read_exact(&mut b)
                    .map_err(|_| Error::Truncated("codec weights".into()))?;
                *v = f32::from_le_bytes(b) as f64;
            }
        }
        Ok(params)
    }
}

fn check_channels(net: &Mlp, x: &FeatureMap) -> Result<()> {
    if x.channels != net.inputs() {
        return Err(Error::DimensionMismatch {
            expected: net.inputs(),
            found: x.channels,
        });
    }
    Ok(())
}

fn apply_per_pixel(net: &Mlp, x: &FeatureMap) -> Result<FeatureMap> {
    check_channels(net, x)?;
    let mut out = FeatureMap::zeros(x.width, x.height, net.outputs());
    let mut trace = net.trace();
    for p in 0..x.pixel_count() {
        net.forward_traced(x.pixel(p), out.pixel_mut(p), &mut trace);
    }
    Ok(out)
}

/// Mean absolute reconstruction error `L1(decode(encode(x)), x)` over a set of vectors.
pub fn reconstruction_l1(params: &CodecParams, corpus: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for x in corpus {
        let y = params.decode_vec(&params.encode_vec(x));
        total += y.iter().zip(x).map(|(a, b)| (a - b).abs()).sum::<f64>();
    }
    total / (corpus.len() * params.high_dim()).max(1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainConfig {
    pub code_dim: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            code_dim: 16,
            hidden: DEFAULT_HIDDEN,
            epochs: 200,
            batch: 1024,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Trains the codec as an autoencoder under an L1 reconstruction loss with
/// first-moment-free Adam.
pub fn pretrain(corpus: &[Vec<f64>], cfg: &PretrainConfig) -> Result<Pretrained> {
    let Some(first) = corpus.first() else {
        return Err(Error::Empty("pretraining corpus"));
    };
    let high = first.len();
    if let Some(bad) = corpus.iter().find(|x| x.len() != high) {
        return Err(Error::DimensionMismatch {
            expected: high,
            found: bad.len(),
        });
    }
    let mut params = CodecParams::new(high, cfg.hidden, cfg.code_dim, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_c0de);
    let enc_n = params.encoder.param_count();
    let total = params.param_count();
    let mut flat: Vec<f64> = params
        .encoder
        .params()
        .into_iter()
        .chain(params.decoder.params())
        .collect();
    let mut opt = Adam::new(total, cfg.lr, 0.0);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut grads = vec![0.0; total];
    let mut enc_trace = params.encoder.trace();
    let mut dec_trace = params.decoder.trace();
    let mut code = vec![0.0; cfg.code_dim];
    let mut recon = vec![0.0; high];
    let mut gy = vec![0.0; high];
    let mut g_code = vec![0.0; cfg.code_dim];
    let mut gx = vec![0.0; high];
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch.max(1)) {
            grads.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / (batch.len() * high) as f64;
            let (g_enc, g_dec) = grads.split_at_mut(enc_n);
            for &i in batch {
                let x = &corpus[i];
                params.encoder.forward_traced(x, &mut code, &mut enc_trace);
                params
                    .decoder
                    .forward_traced(&code, &mut recon, &mut dec_trace);
                for ((g, r), xi) in gy.iter_mut().zip(&recon).zip(x) {
                    *g = l1_sign(r - xi) * scale;
                }
                params
                    .decoder
                    .backward(&code, &dec_trace, &gy, Some(&mut *g_dec), &mut g_code);
                params
                    .encoder
                    .backward(x, &enc_trace, &g_code, Some(&mut *g_enc), &mut gx);
            }
            opt.step(&mut flat, &grads);
            params.encoder.set_params(&flat[..enc_n]);
            params.decoder.set_params(&flat[enc_n..]);
        }
    }
    let final_l1 = reconstruction_l1(&params, corpus);
    Ok(Pretrained { params, final_l1 })
}

/// Mean `L1(encode(F_gt), F_render)` over pixels and code channels.
pub fn encoder_loss(params: &CodecParams, f_gt: &FeatureMap, f_render: &FeatureMap) -> Result<f64> {
    let enc = params.encode(f_gt)?;
    enc.ensure_shape(f_render, "encoder target")?;
    Ok(enc
        .data
        .iter()
        .zip(&f_render.data)
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / enc.data.len() as f64)
}

/// Fits the encoder so that encoding the teacher features reproduces the
/// map's rendered compact features. The decoder is left untouched.
pub fn adapt_encoder(
    params: &CodecParams,
    pairs: &[(&FeatureMap, &FeatureMap)],
    steps: usize,
    lr: f64,
) -> Result<CodecParams> {
    let mut out = params.clone();
    if steps == 0 || pairs.is_empty() {
        return Ok(out);
    }
    for (f_gt, f_render) in pairs {
        check_channels(&params.encoder, f_gt)?;
        if f_render.channels != params.code_dim()
            || f_render.width != f_gt.width
            || f_render.height != f_gt.height
        {
            return Err(Error::ShapeMismatch("encoder adaptation pair".into()));
        }
    }
    let n = out.encoder.param_count();
    let mut flat = out.encoder.params();
    let mut opt = Adam::new(n, lr, 0.9);
    let mut grads = vec![0.0; n];
    let mut trace = out.encoder.trace();
    let code_dim = out.code_dim();
    let mut code = vec![0.0; code_dim];
    let mut gy = vec![0.0; code_dim];
    let mut gx = vec![0.0; out.high_dim()];
    for step in 0..steps {
        let (f_gt, f_render) = pairs[step % pairs.len()];
        grads.iter_mut().for_each(|g| *g = 0.0);
        let scale = 1.0 / (f_gt.pixel_count() * code_dim) as f64;
        for p in 0..f_gt.pixel_count() {
            let x = f_gt.pixel(p);
            out.encoder.forward_traced(x, &mut code, &mut trace);
            for ((g, c), t) in gy.iter_mut().zip(&code).zip(f_render.pixel(p)) {
                *g = l1_sign(c - t) * scale;
            }
            out.encoder
                .backward(x, &trace, &gy, Some(&mut grads), &mut gx);
        }
        opt.step(&mut flat, &grads);
        out.encoder.set_params(&flat);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_map(w: usize, h: usize, c: usize, seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap::from_data(
            w,
            h,
            c,
            (0..w * h * c)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn zero_in_zero_out() {
        let c = CodecParams::new(32, 64, 16, 3).with_zero_biases();
        let z = FeatureMap::zeros(4, 4, 32);
        assert!(c.encode(&z).unwrap().data.iter().all(|&v| v == 0.0));
        assert!(c
            .decode(&FeatureMap::zeros(4, 4, 16))
            .unwrap()
            .data
            .iter()
            .all(|&v| v == 0.0));
        assert!(c
            .encode_query(&[0.0; 32])
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn per_pixel_independence() {
        let c = CodecParams::new(32, 64, 16, 4);
        let x = random_map(5, 3, 32, 9);
        let enc = c.encode(&x).unwrap();
        for p in 0..x.pixel_count() {
            assert_eq!(enc.pixel(p), c.encode_vec(x.pixel(p)).as_slice());
            let single = FeatureMap::from_data(1, 1, 32, x.pixel(p).to_vec()).unwrap();
            assert_eq!(
                c.encode(&single).unwrap().data,
                c.encode_query(x.pixel(p)).unwrap()
            );
        }
        let code = random_map(2, 2, 16, 1);
        let dec = c.decode(&code).unwrap();
        assert_eq!(dec.pixel(3), c.decode_vec(code.pixel(3)).as_slice());
    }

    #[test]
    fn channel_mismatch() {
        let c = CodecParams::new(32, 64, 16, 4);
        assert!(matches!(
            c.encode(&FeatureMap::zeros(2, 2, 16)),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            c.decode(&FeatureMap::zeros(2, 2, 32)),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            c.encode_query(&[1.0; 31]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn empty_corpus() {
        assert!(matches!(
            pretrain(&[], &PretrainConfig::default()),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn adaptation_zero_steps_is_noop() {
        let c = CodecParams::new(8, 16, 4, 1);
        let gt = random_map(4, 4, 8, 2);
        let r = random_map(4, 4, 4, 3);
        assert_eq!(adapt_encoder(&c, &[(&gt, &r)], 0, 1e-4).unwrap(), c);
    }

    #[test]
    fn adaptation_shape_mismatch() {
        let c = CodecParams::new(8, 16, 4, 1);
        let gt = random_map(4, 4, 8, 2);
        let r = random_map(4, 3, 4, 3);
        assert!(adapt_encoder(&c, &[(&gt, &r)], 1, 1e-4).is_err());
    }

    #[test]
    fn decoder_backward_matches_finite_differences() {
        let c = CodecParams::new(6, 10, 3, 5);
        let x = random_map(2, 1, 3, 6);
        let w: Vec<f64> = (0..6).map(|i| 0.3 * i as f64 - 0.7).collect();
        let (_, grad) = c
            .decode_with_backward(&x, |_, _, g| g.copy_from_slice(&w))
            .unwrap();
        let f = |m: &FeatureMap| -> f64 {
            let d = c.decode(m).unwrap();
            d.data
                .chunks(6)
                .map(|px| px.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>())
                .sum()
        };
        for i in 0..x.data.len() {
            let h = 1e-6;
            let mut xp = x.clone();
            xp.data[i] += h;
            let mut xm = x.clone();
            xm.data[i] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            assert!((fd - grad.data[i]).abs() < 1e-6, "{fd} vs {}", grad.data[i]);
        }
    }

    #[test]
    fn file_round_trip() {
        let c = CodecParams::new(8, 16, 4, 1);
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 10 + 12 + 4 * c.param_count());
        let back = CodecParams::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back.param_count(), c.param_count());
        let mut buf2 = Vec::new();
        back.write_to(&mut buf2).unwrap();
        assert_eq!(buf, buf2);
        assert!(matches!(
            CodecParams::read_from(&mut &buf[..30]),
            Err(Error::Truncated(_))
        ));
        assert!(matches!(
            CodecParams::read_from(&mut &b"LEGOCODEC2xxxxxxxxxxxxx"[..]),
            Err(Error::BadMagic { .. })
        ));
    }
}
