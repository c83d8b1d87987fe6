//! Flat `key = value` run configuration.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for '{key}'")))
}

macro_rules! run_config {
    ($($(#[doc = $doc:literal])* $name:ident : $ty:ty = $default:expr),* $(,)?) => {
        /// Every tunable of a run. Each key has a default; unknown keys are rejected.
        #[derive(Debug, Clone, PartialEq)]
        pub struct RunConfig {
            $($(#[doc = $doc])* pub $name: $ty,)*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                RunConfig { $($name: $default,)* }
            }
        }

        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($name)),*];

            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($name) => self.$name = parse_value(key, value)?,)*
                    _ => return Err(Error::Config(format!("unknown key '{key}'"))),
                }
                Ok(())
            }

            /// All keys with their current values, in declaration order.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$((stringify!($name), show(&self.$name))),*]
            }
        }
    };
}

fn show<T: Display>(v: &T) -> String {
    v.to_string()
}

run_config! {
    seed: u64 = 0,
    /// Compact feature dimension stored per Gaussian.
    feature_dim: usize = 16,
    codec_hidden: usize = 64,
    pretrain_epochs: usize = 60,
    pretrain_batch: usize = 1024,
    pretrain_lr: f64 = 1e-3,
    corpus_per_class: usize = 2000,
    codebook_k: usize = 64,
    keyframe_threshold: f64 = 0.8,
    /// Forces a keyframe after this many frames without one; 0 disables.
    keyframe_max_interval: usize = 0,
    gicp_max_corr: f64 = 0.1,
    gicp_max_iter: usize = 30,
    gicp_k_neighbors: usize = 10,
    voxel_size: f64 = 0.05,
    map_samples: usize = 20000,
    /// Mapping iterations after each keyframe.
    mapping_iters: usize = 60,
    w_depth: f64 = 0.5,
    w_feat: f64 = 1.0,
    window_recent: usize = 8,
    window_random: usize = 4,
    lr_position: f64 = 1.6e-4,
    lr_rotation: f64 = 1e-3,
    lr_scale: f64 = 5e-3,
    lr_opacity: f64 = 5e-2,
    lr_color: f64 = 2.5e-3,
    lr_feature: f64 = 2.5e-3,
    adapt_every: u64 = 10,
    adapt_steps: usize = 50,
    adapt_warmup: u64 = 500,
    adapt_lr: f64 = 1e-4,
    /// encoder, random or zero.
    feature_init: String = "encoder".to_string(),
    random_feature_amplitude: f64 = 0.5,
    coverage_alpha: f64 = 0.5,
    coverage_depth_abs: f64 = 0.05,
    coverage_depth_rel: f64 = 0.05,
    /// Insert a jittered copy of every new Gaussian.
    duplicate_insertion: bool = false,
    duplicate_jitter: f64 = 0.005,
    prune: bool = true,
    prune_language: bool = true,
    prune_period: u64 = 200,
    prune_k: usize = 8,
    tau_dist: f64 = 0.02,
    tau_sim: f64 = 0.9,
    alpha_min: f64 = 0.05,
    scale_max: f64 = 0.5,
    loop_closure: bool = true,
    loop_similarity: f64 = 0.7,
    loop_recency_gap: u64 = 20,
    loop_radius: f64 = 3.0,
    loop_min_inlier_ratio: f64 = 0.6,
    loop_max_rmse: f64 = 0.05,
    pose_graph_iters: usize = 50,
    /// Per-frame perturbation applied to every tracked pose (meters along camera x).
    drift_translation: f64 = 0.0,
    /// Per-frame yaw perturbation (radians about camera y).
    drift_yaw: f64 = 0.0,
    /// 0 means all frames.
    max_frames: usize = 0,
    save_renders: bool = true,
    tum_downsample: usize = 8,
}

impl RunConfig {
    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value'", i + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.feature_dim == 0 {
            return bad("feature_dim must be positive");
        }
        if !(self.tau_sim > -1.0 && self.tau_sim <= 1.0)
            || !(self.tau_dist > 0.0)
            || self.prune_period == 0
        {
            return bad("prune thresholds out of range");
        }
        if !(0.0..=1.0).contains(&self.keyframe_threshold) {
            return bad("keyframe_threshold must be in [0, 1]");
        }
        if !matches!(self.feature_init.as_str(), "encoder" | "random" | "zero") {
            return bad("feature_init must be encoder, random or zero");
        }
        if self.codebook_k < 2 || self.tum_downsample == 0 || self.pretrain_batch == 0 {
            return bad("codebook_k >= 2, tum_downsample >= 1 and pretrain_batch >= 1 required");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_reject() {
        let c = RunConfig::parse("# comment\nseed = 7\nprune = false # trailing\n\nw_feat=0.25\n")
            .unwrap();
        assert_eq!((c.seed, c.prune, c.w_feat), (7, false, 0.25));
        assert!(matches!(
            RunConfig::parse("nope = 1"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::parse("seed = x"),
            Err(Error::Config(_))
        ));
        assert!(matches!(RunConfig::parse("seed"), Err(Error::Config(_))));
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.set("tau_sim", "0.85").unwrap();
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
        assert_eq!(RunConfig::KEYS.len(), c.entries().len());
    }
}
