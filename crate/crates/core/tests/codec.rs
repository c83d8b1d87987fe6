mod common;

use common::*;
use lego_slam::codec::{adapt_encoder, encoder_loss, pretrain, reconstruction_l1, PretrainConfig};
use lego_slam::{CodecParams, Raster};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// One-hot class prototypes in `dim` dimensions with small Gaussian noise.
fn one_hot_corpus(
    classes: usize,
    dim: usize,
    per_class: usize,
    sigma: f64,
    seed: u64,
) -> Vec<Vec<f64>> {
    let mut r = rng(seed);
    let noise = Normal::new(0.0, sigma).unwrap();
    let mut out = Vec::new();
    for i in 0..per_class * classes {
        let c = i % classes;
        out.push(
            (0..dim)
                .map(|j| f64::from(u8::from(j == c)) + noise.sample(&mut r))
                .collect(),
        );
    }
    out
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

#[test]
fn eight_class_pretraining_reaches_target() {
    let corpus = one_hot_corpus(8, 32, 250, 0.005, 1);
    let cfg = PretrainConfig {
        code_dim: 16,
        epochs: 300,
        batch: 256,
        seed: 4,
        ..PretrainConfig::default()
    };
    let p = pretrain(&corpus, &cfg).unwrap();
    assert!(p.final_l1 < 0.02, "final L1 {}", p.final_l1);
    assert_eq!(p.final_l1, reconstruction_l1(&p.params, &corpus));
    for x in corpus.iter().step_by(97) {
        let y = p.params.decode_vec(&p.params.encode_vec(x));
        assert!(l1(x, &y) < 0.05);
    }
}

#[test]
fn overcomplete_code_is_nearly_lossless() {
    let corpus = one_hot_corpus(8, 32, 1, 0.0, 2);
    let cfg = PretrainConfig {
        code_dim: 32,
        epochs: 40000,
        batch: 8,
        lr: 1e-4,
        seed: 1,
        ..PretrainConfig::default()
    };
    let p = pretrain(&corpus, &cfg).unwrap();
    assert!(p.final_l1 < 1e-3, "final L1 {}", p.final_l1);
}

#[test]
fn pretraining_is_deterministic() {
    let corpus = one_hot_corpus(4, 16, 50, 0.01, 3);
    let cfg = PretrainConfig {
        code_dim: 8,
        hidden: 16,
        epochs: 5,
        batch: 32,
        seed: 9,
        ..PretrainConfig::default()
    };
    let a = pretrain(&corpus, &cfg).unwrap();
    let b = pretrain(&corpus, &cfg).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.final_l1.to_bits(), b.final_l1.to_bits());
}

fn pair(seed: u64, w: usize, h: usize, high: usize, code: usize) -> (Raster, Raster) {
    let mut r = rng(seed);
    (
        random_raster(&mut r, w, h, high),
        random_raster(&mut r, w, h, code),
    )
}

#[test]
fn adaptation_descends_and_freezes_the_decoder() {
    let params = CodecParams::new(12, 16, 4, 5);
    let (gt, rendered) = pair(6, 4, 3, 12, 4);
    let mut cur = params.clone();
    let mut prev = encoder_loss(&cur, &gt, &rendered).unwrap();
    let start = prev;
    for _ in 0..40 {
        cur = adapt_encoder(&cur, &[(&gt, &rendered)], 1, 1e-4).unwrap();
        let l = encoder_loss(&cur, &gt, &rendered).unwrap();
        assert!(l <= prev + 1e-9, "{l} > {prev}");
        prev = l;
    }
    assert!(prev < start);
    assert_eq!(cur.decoder, params.decoder);
}

#[test]
fn adaptation_is_deterministic() {
    let params = CodecParams::new(12, 16, 4, 5);
    let (gt, rendered) = pair(7, 5, 5, 12, 4);
    let a = adapt_encoder(&params, &[(&gt, &rendered)], 30, 1e-3).unwrap();
    let b = adapt_encoder(&params, &[(&gt, &rendered)], 30, 1e-3).unwrap();
    assert_eq!(a, b);
}

#[test]
fn query_matches_one_pixel_encoding() {
    let params = CodecParams::new(10, 12, 3, 8);
    let mut r = rng(8);
    let q: Vec<f64> = (0..10).map(|_| r.random_range(-1.0..1.0)).collect();
    let img = Raster::from_data(1, 1, 10, q.clone()).unwrap();
    assert_eq!(
        params.encode_query(&q).unwrap(),
        params.encode(&img).unwrap().data
    );
    assert!(params.encode_query(&q[..9]).is_err());
    let zero = params.clone().with_zero_biases();
    assert!(zero
        .encode_query(&[0.0; 10])
        .unwrap()
        .iter()
        .all(|&v| v == 0.0));
}
