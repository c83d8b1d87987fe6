//! Run orchestration: tracking, keyframe insertion, mapping, pruning,
//! encoder adaptation and loop closure, followed by evaluation on the online map.

use std::collections::hash_map::DefaultHasher;
use std::fs;
use std::hash::{Hash, Hasher};
use std::path::Path;
use std::time::Instant;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::codec::{adapt_encoder, pretrain, CodecParams, PretrainConfig};
use crate::config::RunConfig;
use crate::dataset::{write_rgb_png, write_trajectory, Dataset};
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Pose, Twist};
use crate::gicp::{is_keyframe, source_cloud, track_frame, GicpConfig};
use crate::loop_closure::{
    build_codebook, compute_signature, detect_candidates, optimize_pose_graph,
    propagate_corrections, rmse_information, verify_candidate, Codebook, LoopConfig, PoseEdge,
    PoseGraph,
};
use crate::map::{FeatureInit, GaussianMap, Keyframe};
use crate::mapping::{
    active_window, compute_losses, encoder_gate_with, mapping_round, valid_depth, LearningRates,
    LossBreakdown, LossWeights, MappingConfig, OptimizerState,
};
use crate::metrics::{ate_rmse, image_metrics, Confusion};
use crate::prune::{prune, PruneConfig};
use crate::query::{segment, VOID};
use crate::render::render;
use crate::synthetic::{Frame, SyntheticSceneSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct KeyframeMetrics {
    pub frame: usize,
    pub keyframe: u64,
    pub psnr: f64,
    pub ssim: f64,
    pub l_feat: f64,
    /// Map size right after this keyframe's mapping round.
    pub gaussian_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopEvent {
    pub frame: usize,
    pub keyframe: u64,
    pub candidate: u64,
    pub similarity: f64,
    pub accepted: bool,
    pub rmse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneEvent {
    pub iteration: u64,
    pub removed_language: usize,
    pub removed_geometric: usize,
    pub kept: usize,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub trajectory: Vec<(f64, Pose)>,
    pub gt_trajectory: Vec<(f64, Pose)>,
    pub map: GaussianMap,
    pub keyframes: Vec<Keyframe>,
    pub codec: Option<CodecParams>,
    pub keyframe_metrics: Vec<KeyframeMetrics>,
    pub ate_rmse: Option<f64>,
    pub miou: Option<f64>,
    pub accuracy: Option<f64>,
    pub fps: f64,
    pub loop_events: Vec<LoopEvent>,
    pub prune_events: Vec<PruneEvent>,
    pub loss_trace: Vec<LossBreakdown>,
    pub loop_closures: usize,
    /// Frame at which tracking was lost, if the run stopped early.
    pub tracking_lost: Option<usize>,
}

impl RunResult {
    pub fn mean_psnr(&self) -> f64 {
        mean(self.keyframe_metrics.iter().map(|m| m.psnr))
    }

    pub fn mean_l_feat(&self) -> f64 {
        mean(self.keyframe_metrics.iter().map(|m| m.l_feat))
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = it.collect();
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// First iteration after which the trailing `window`-iteration mean of
/// `l_feat` is below `threshold`.
pub fn iterations_to_threshold(
    trace: &[LossBreakdown],
    threshold: f64,
    window: usize,
) -> Option<usize> {
    let w = window.max(1);
    (w..=trace.len()).find(|&end| {
        trace[end - w..end].iter().map(|l| l.l_feat).sum::<f64>() / (w as f64) < threshold
    })
}

/// Offline models trained on the scene's feature corpus.
#[derive(Debug, Clone)]
pub struct Models {
    pub codec: CodecParams,
    pub codebook: Codebook,
    /// Mean reconstruction L1 on the training corpus.
    pub final_l1: f64,
}

pub fn pretrain_models(cfg: &RunConfig, scene: &SyntheticSceneSpec) -> Result<Models> {
    let corpus = scene.feature_corpus(cfg.corpus_per_class, cfg.seed);
    let pcfg = PretrainConfig {
        code_dim: cfg.feature_dim,
        hidden: cfg.codec_hidden,
        epochs: cfg.pretrain_epochs,
        batch: cfg.pretrain_batch,
        lr: cfg.pretrain_lr,
        seed: cfg.seed,
    };
    let trained = pretrain(&corpus, &pcfg)?;
    let codebook = build_codebook(&corpus, cfg.codebook_k, cfg.seed)?;
    Ok(Models {
        codec: trained.params,
        codebook,
        final_l1: trained.final_l1,
    })
}

/// Digest of the serialized map, used to check that evaluation is read-only.
pub fn map_digest(map: &GaussianMap) -> u64 {
    let mut buf = Vec::new();
    map.write_to(&mut buf).expect("in-memory write");
    let mut h = DefaultHasher::new();
    buf.hash(&mut h);
    h.finish()
}

/// Online state of one run.
pub struct Pipeline {
    cfg: RunConfig,
    k: CameraIntrinsics,
    gicp: GicpConfig,
    loop_cfg: LoopConfig,
    prune_cfg: PruneConfig,
    mapping_cfg: MappingConfig,
    codec: Option<CodecParams>,
    codebook: Option<Codebook>,
    map: GaussianMap,
    keyframes: Vec<Keyframe>,
    state: OptimizerState,
    rng: ChaCha8Rng,
    odometry: Vec<PoseEdge>,
    loop_edges: Vec<PoseEdge>,
    /// Per processed frame: timestamp, reference keyframe and pose relative to it.
    frames: Vec<(f64, u64, Pose)>,
    gt: Vec<(f64, Pose)>,
    prev_pose: Option<Pose>,
    global_iter: u64,
    since_prune: u64,
    since_adapt: u64,
    kf_records: Vec<(usize, u64, usize)>,
    loop_events: Vec<LoopEvent>,
    prune_events: Vec<PruneEvent>,
    loss_trace: Vec<LossBreakdown>,
    loop_closures: usize,
}

impl Pipeline {
    pub fn new(
        cfg: &RunConfig,
        k: CameraIntrinsics,
        codec: Option<CodecParams>,
        codebook: Option<Codebook>,
    ) -> Result<Self> {
        cfg.validate()?;
        if let Some(c) = &codec {
            if c.code_dim() != cfg.feature_dim {
                return Err(Error::Config(format!(
                    "codec produces {}-dimensional codes but feature_dim is {}",
                    c.code_dim(),
                    cfg.feature_dim
                )));
            }
        }
        let gicp = GicpConfig {
            max_corr_dist: cfg.gicp_max_corr,
            max_iter: cfg.gicp_max_iter,
            k_neighbors: cfg.gicp_k_neighbors,
            voxel_size: cfg.voxel_size,
            ..GicpConfig::default()
        };
        let loop_cfg = LoopConfig {
            similarity_threshold: cfg.loop_similarity,
            recency_gap: cfg.loop_recency_gap,
            radius: cfg.loop_radius,
            min_inlier_ratio: cfg.loop_min_inlier_ratio,
            max_rmse: cfg.loop_max_rmse,
            max_iter: cfg.pose_graph_iters,
            ..LoopConfig::default()
        };
        let prune_cfg = PruneConfig {
            k_neighbors: cfg.prune_k,
            tau_dist: cfg.tau_dist,
            tau_sim: cfg.tau_sim,
            alpha_min: cfg.alpha_min,
            scale_max: cfg.scale_max,
            period: cfg.prune_period,
        };
        let mapping_cfg = MappingConfig {
            weights: LossWeights {
                w_depth: cfg.w_depth,
                w_feat: cfg.w_feat,
            },
            recent: cfg.window_recent,
            random_older: cfg.window_random,
        };
        let lr = LearningRates {
            position: cfg.lr_position,
            rotation: cfg.lr_rotation,
            log_scale: cfg.lr_scale,
            opacity_logit: cfg.lr_opacity,
            color: cfg.lr_color,
            feature: cfg.lr_feature,
        };
        Ok(Pipeline {
            cfg: cfg.clone(),
            k,
            gicp,
            loop_cfg,
            prune_cfg,
            mapping_cfg,
            codec,
            codebook,
            map: GaussianMap::new(cfg.feature_dim),
            keyframes: Vec::new(),
            state: OptimizerState::new(cfg.feature_dim, lr),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            odometry: Vec::new(),
            loop_edges: Vec::new(),
            frames: Vec::new(),
            gt: Vec::new(),
            prev_pose: None,
            global_iter: 0,
            since_prune: 0,
            since_adapt: 0,
            kf_records: Vec::new(),
            loop_events: Vec::new(),
            prune_events: Vec::new(),
            loss_trace: Vec::new(),
            loop_closures: 0,
        })
    }

    pub fn map(&self) -> &GaussianMap {
        &self.map
    }

    pub fn keyframes(&self) -> &[Keyframe] {
        &self.keyframes
    }

    fn feature_init(&self) -> FeatureInit {
        match self.cfg.feature_init.as_str() {
            "encoder" => FeatureInit::Encoder,
            "random" => FeatureInit::Random {
                seed: self.cfg.seed,
                amplitude: self.cfg.random_feature_amplitude,
            },
            _ => FeatureInit::Zero,
        }
    }

    fn drift(&self) -> Option<Pose> {
        (self.cfg.drift_translation != 0.0 || self.cfg.drift_yaw != 0.0).then(|| {
            Pose::exp(&Twist::new(
                Vector3::new(0.0, self.cfg.drift_yaw, 0.0),
                Vector3::new(self.cfg.drift_translation, 0.0, 0.0),
            ))
        })
    }

    /// Processes one frame. Returns `Error::TrackingLost` when alignment fails.
    pub fn process(&mut self, frame: &Frame) -> Result<()> {
        if let Some(p) = frame.gt_pose {
            self.gt.push((frame.timestamp, p));
        }
        let (pose, source, keyframe, rmse) = match self.prev_pose {
            None => {
                let source = source_cloud(&frame.depth, &self.k, &self.gicp)?;
                (
                    frame.gt_pose.unwrap_or_else(Pose::identity),
                    source,
                    true,
                    0.0,
                )
            }
            Some(prev) => {
                let samples = self.map.frustum_samples(
                    &prev,
                    &self.k,
                    self.cfg.map_samples,
                    self.cfg.seed ^ frame.index as u64,
                );
                let (res, source) =
                    match track_frame(&frame.depth, &self.k, &samples, &prev, &self.gicp) {
                        Ok(r) => r,
                        Err(Error::TooFewPoints { got, .. }) => {
                            return Err(Error::TrackingLost(got))
                        }
                        Err(Error::Empty(_)) => return Err(Error::TrackingLost(0)),
                        Err(e) => return Err(e),
                    };
                let mut pose = res.pose;
                if let Some(d) = self.drift() {
                    pose = pose.compose(&d);
                }
                let last = self.keyframes.last().map_or(0, |k| k.frame_index);
                let overdue = self.cfg.keyframe_max_interval > 0
                    && frame.index >= last + self.cfg.keyframe_max_interval;
                (
                    pose,
                    source,
                    overdue || is_keyframe(&res, self.cfg.keyframe_threshold),
                    res.rmse,
                )
            }
        };
        let mut pose = pose;
        if keyframe {
            pose = self.add_keyframe(frame, pose, source, rmse)?;
        }
        let reference = self.keyframes.last().expect("first frame is a keyframe");
        let rel = reference.pose.inverse().compose(&pose);
        self.frames.push((frame.timestamp, reference.id, rel));
        self.prev_pose = Some(pose);
        Ok(())
    }

    fn coverage(&self, frame: &Frame, pose: &Pose) -> Vec<bool> {
        let depth = &frame.depth.data;
        if self.map.is_empty() {
            return depth.iter().map(|&d| valid_depth(d)).collect();
        }
        let out = render(&self.map, pose, &self.k);
        (0..depth.len())
            .map(|p| {
                let d = depth[p];
                valid_depth(d)
                    && (out.acc_alpha.data[p] < self.cfg.coverage_alpha
                        || (out.depth.data[p] - d).abs()
                            > self
                                .cfg
                                .coverage_depth_abs
                                .max(self.cfg.coverage_depth_rel * d))
            })
            .collect()
    }

    fn add_keyframe(
        &mut self,
        frame: &Frame,
        pose: Pose,
        source: crate::gicp::CovPointCloud,
        rmse: f64,
    ) -> Result<Pose> {
        let id = self.keyframes.len() as u64;
        let signature = match (&self.codebook, &frame.feat) {
            (Some(cb), Some(f)) => Some(compute_signature(f, cb)?),
            _ => None,
        };
        let kf = Keyframe {
            id,
            frame_index: frame.index,
            timestamp: frame.timestamp,
            pose,
            rgb: frame.rgb.clone(),
            depth: frame.depth.clone(),
            feat_gt: frame.feat.clone(),
            signature,
            source,
        };
        kf.validate()?;
        if let Some(prev) = self.keyframes.last() {
            self.odometry.push(PoseEdge {
                from: prev.id,
                to: id,
                measurement: prev.pose.inverse().compose(&pose),
                information: rmse_information(rmse),
            });
        }
        let coverage = self.coverage(frame, &pose);
        let codec = self.codec.as_ref().filter(|_| kf.feat_gt.is_some());
        let init = self.feature_init();
        let ids = self
            .map
            .insert_from_keyframe(&kf, &self.k, &kf.source, &coverage, codec, init)?;
        if self.cfg.duplicate_insertion {
            let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0xd0b1e ^ id);
            let start = self.map.len() - ids.len();
            for i in start..self.map.len() {
                let mut g = self.map.gaussians[i].clone();
                for a in 0..3 {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    g.position[a] += self.cfg.duplicate_jitter * n;
                }
                self.map.push(g);
            }
        }
        self.keyframes.push(kf);
        self.state.sync(&self.map);

        self.run_mapping()?;
        self.kf_records.push((frame.index, id, self.map.len()));

        self.since_adapt += 1;
        if encoder_gate_with(
            self.global_iter,
            self.since_adapt,
            self.cfg.adapt_warmup,
            self.cfg.adapt_every,
        ) {
            self.adapt()?;
        }

        let mut pose = pose;
        if self.cfg.loop_closure && self.close_loops(frame.index)? {
            pose = self.keyframes[id as usize].pose;
        }
        Ok(pose)
    }

    fn run_mapping(&mut self) -> Result<()> {
        let ids: Vec<u64> = self.keyframes.iter().map(|k| k.id).collect();
        let window_ids = active_window(
            &ids,
            self.mapping_cfg.recent,
            self.mapping_cfg.random_older,
            &mut self.rng,
        );
        let mut remaining = self.cfg.mapping_iters as u64;
        while remaining > 0 {
            let chunk = if self.cfg.prune {
                remaining.min(self.cfg.prune_period - self.since_prune)
            } else {
                remaining
            };
            let window: Vec<&Keyframe> = window_ids
                .iter()
                .map(|&i| &self.keyframes[i as usize])
                .collect();
            let trace = mapping_round(
                &mut self.map,
                &window,
                &self.k,
                chunk as usize,
                self.codec.as_ref(),
                &mut self.state,
                &self.mapping_cfg,
                &mut self.rng,
            )?;
            self.loss_trace.extend(trace);
            remaining -= chunk;
            self.global_iter += chunk;
            if self.cfg.prune {
                self.since_prune += chunk;
                if self.since_prune >= self.cfg.prune_period {
                    self.since_prune = 0;
                    let report = prune(
                        &mut self.map,
                        &self.prune_cfg,
                        Some(&mut self.state),
                        self.cfg.prune_language,
                    );
                    self.prune_events.push(PruneEvent {
                        iteration: self.global_iter,
                        removed_language: report.removed_language.len(),
                        removed_geometric: report.removed_geometric.len(),
                        kept: report.kept,
                    });
                }
            }
        }
        Ok(())
    }

    fn adapt(&mut self) -> Result<()> {
        let Some(codec) = self.codec.as_ref() else {
            return Ok(());
        };
        let ids: Vec<u64> = self.keyframes.iter().map(|k| k.id).collect();
        let window = active_window(&ids, self.mapping_cfg.recent, 0, &mut self.rng);
        let renders: Vec<(usize, crate::raster::FeatureMap)> = window
            .iter()
            .filter(|&&i| self.keyframes[i as usize].feat_gt.is_some())
            .map(|&i| {
                (
                    i as usize,
                    render(&self.map, &self.keyframes[i as usize].pose, &self.k).feat,
                )
            })
            .collect();
        if renders.is_empty() {
            return Ok(());
        }
        let pairs: Vec<(&crate::raster::FeatureMap, &crate::raster::FeatureMap)> = renders
            .iter()
            .map(|(i, f)| (self.keyframes[*i].feat_gt.as_ref().expect("filtered"), f))
            .collect();
        let adapted = adapt_encoder(codec, &pairs, self.cfg.adapt_steps, self.cfg.adapt_lr)?;
        self.codec = Some(adapted);
        self.since_adapt = 0;
        Ok(())
    }

    /// Detects, verifies and closes loops for the newest keyframe. Returns
    /// whether poses were corrected.
    fn close_loops(&mut self, frame_index: usize) -> Result<bool> {
        let current = self.keyframes.last().expect("keyframe just added");
        if current.signature.is_none() {
            return Ok(false);
        }
        let past: Vec<&Keyframe> = self.keyframes[..self.keyframes.len() - 1].iter().collect();
        let candidates = detect_candidates(current, &past, &self.loop_cfg);
        let mut accepted = Vec::new();
        for (cand, sim) in candidates {
            let v = verify_candidate(
                current,
                &self.keyframes[cand as usize],
                &self.map,
                &self.loop_cfg,
                &self.gicp,
            );
            self.loop_events.push(LoopEvent {
                frame: frame_index,
                keyframe: current.id,
                candidate: cand,
                similarity: sim,
                accepted: v.accepted,
                rmse: v.rmse,
            });
            if let Some(e) = v.edge {
                accepted.push(e);
            }
        }
        if accepted.is_empty() {
            return Ok(false);
        }
        self.loop_edges.extend(accepted);
        let graph = PoseGraph {
            nodes: self.keyframes.iter().map(|k| (k.id, k.pose)).collect(),
            edges: self
                .odometry
                .iter()
                .chain(&self.loop_edges)
                .copied()
                .collect(),
        };
        let sol = optimize_pose_graph(&graph, self.loop_cfg.max_iter)?;
        propagate_corrections(&mut self.map, &mut self.keyframes, &sol.poses)?;
        self.loop_closures += 1;
        Ok(true)
    }

    /// Current estimate of every processed frame's pose.
    pub fn trajectory(&self) -> Vec<(f64, Pose)> {
        self.frames
            .iter()
            .map(|(t, kf, rel)| (*t, self.keyframes[*kf as usize].pose.compose(rel)))
            .collect()
    }

    /// Evaluates the online map without modifying it.
    pub fn finish(
        self,
        dataset: &Dataset,
        elapsed_s: f64,
        tracking_lost: Option<usize>,
    ) -> Result<RunResult> {
        let digest = map_digest(&self.map);
        let trajectory = self.trajectory();
        let ate = if self.gt.len() >= 3 {
            ate_rmse(&trajectory, &self.gt).ok()
        } else {
            None
        };

        let queries: Option<Vec<Vec<f64>>> = match (&dataset.scene, &self.codec) {
            (Some(scene), Some(codec)) => Some(
                scene
                    .prototypes
                    .iter()
                    .map(|p| codec.encode_query(p))
                    .collect::<Result<_>>()?,
            ),
            _ => None,
        };
        let mut conf = Confusion::default();
        let mut keyframe_metrics = Vec::new();
        for (kf, &(frame, _, count)) in self.keyframes.iter().zip(&self.kf_records) {
            let out = render(&self.map, &kf.pose, &self.k);
            let (psnr, ssim) = image_metrics(&out.rgb, &kf.rgb)?;
            let l_feat = match &self.codec {
                Some(c) if kf.feat_gt.is_some() => {
                    compute_losses(&out, kf, Some(c), self.mapping_cfg.weights)?.l_feat
                }
                _ => 0.0,
            };
            if let (Some(q), Some(scene), Some(gt_feat)) = (&queries, &dataset.scene, &kf.feat_gt) {
                let pred = segment(&out.feat, q)?;
                let gt: Vec<usize> = scene
                    .labels_from_features(gt_feat)
                    .into_iter()
                    .map(|l| l.unwrap_or(VOID))
                    .collect();
                conf.add(&pred, &gt);
            }
            keyframe_metrics.push(KeyframeMetrics {
                frame,
                keyframe: kf.id,
                psnr,
                ssim,
                l_feat,
                gaussian_count: count,
            });
        }
        let (miou, accuracy) = match conf.scores() {
            Ok((m, a)) if queries.is_some() => (Some(m), Some(a)),
            _ => (None, None),
        };
        if map_digest(&self.map) != digest {
            return Err(Error::ShapeMismatch("evaluation modified the map".into()));
        }
        let frames = self.frames.len();
        Ok(RunResult {
            trajectory,
            gt_trajectory: self.gt,
            map: self.map,
            keyframes: self.keyframes,
            codec: self.codec,
            keyframe_metrics,
            ate_rmse: ate,
            miou,
            accuracy,
            fps: if elapsed_s > 0.0 {
                frames as f64 / elapsed_s
            } else {
                0.0
            },
            loop_events: self.loop_events,
            prune_events: self.prune_events,
            loss_trace: self.loss_trace,
            loop_closures: self.loop_closures,
            tracking_lost,
        })
    }
}

/// Runs the whole sequence. Tracking loss stops the run early and is
/// reported in the result rather than as an error.
pub fn run_pipeline(
    cfg: &RunConfig,
    dataset: &Dataset,
    codec: Option<CodecParams>,
    codebook: Option<Codebook>,
) -> Result<RunResult> {
    let start = Instant::now();
    let mut p = Pipeline::new(cfg, dataset.intrinsics, codec, codebook)?;
    let limit = if cfg.max_frames == 0 {
        dataset.frames.len()
    } else {
        cfg.max_frames.min(dataset.frames.len())
    };
    let mut lost = None;
    for frame in &dataset.frames[..limit] {
        match p.process(frame) {
            Ok(()) => {}
            Err(Error::TrackingLost(_)) => {
                lost = Some(frame.index);
                break;
            }
            Err(e) => return Err(e),
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    p.finish(dataset, elapsed, lost)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Metrics CSV: one row per keyframe, then a summary block.
pub fn metrics_csv(r: &RunResult) -> String {
    let mut s = String::from("frame,psnr,ssim,l_feat,gaussian_count\n");
    for m in &r.keyframe_metrics {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            m.frame, m.psnr, m.ssim, m.l_feat, m.gaussian_count
        ));
    }
    s.push_str("summary,ate_rmse,miou,accuracy,fps\n");
    s.push_str(&format!(
        "summary,{},{},{},{}\n",
        opt(r.ate_rmse),
        opt(r.miou),
        opt(r.accuracy),
        r.fps
    ));
    s
}

pub fn loop_log_csv(r: &RunResult) -> String {
    let mut s = String::from("frame,candidate,similarity,accepted,rmse\n");
    for e in &r.loop_events {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            e.frame, e.candidate, e.similarity, e.accepted, e.rmse
        ));
    }
    s
}

pub fn prune_log_csv(r: &RunResult) -> String {
    let mut s = String::from("iteration,removed_language,removed_geometric,kept\n");
    for e in &r.prune_events {
        s.push_str(&format!(
            "{},{},{},{}\n",
            e.iteration, e.removed_language, e.removed_geometric, e.kept
        ));
    }
    s
}

/// Writes trajectory, map, codec, logs, metrics and keyframe renders.
pub fn write_artifacts(
    r: &RunResult,
    k: &CameraIntrinsics,
    out: &Path,
    save_renders: bool,
) -> Result<()> {
    fs::create_dir_all(out)?;
    write_trajectory(&out.join("trajectory.txt"), &r.trajectory)?;
    r.map.save(&out.join("map.lgm"))?;
    if let Some(c) = &r.codec {
        c.save(&out.join("codec.bin"))?;
    }
    fs::write(out.join("metrics.csv"), metrics_csv(r))?;
    fs::write(out.join("loop_log.csv"), loop_log_csv(r))?;
    fs::write(out.join("prune_log.csv"), prune_log_csv(r))?;
    if save_renders {
        let dir = out.join("renders");
        fs::create_dir_all(&dir)?;
        for kf in &r.keyframes {
            let img = render(&r.map, &kf.pose, k);
            write_rgb_png(&dir.join(format!("kf_{:04}.png", kf.id)), &img.rgb)?;
        }
    }
    Ok(())
}
