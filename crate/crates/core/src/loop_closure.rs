//! Place recognition over language-codebook histograms, geometric
//! verification against a local submap, and pose-graph optimization.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix6, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{Pose, Twist};
use crate::gicp::{gicp_align, GicpConfig};
use crate::map::{GaussianMap, Keyframe};
use crate::prune::cosine;
use crate::raster::FeatureMap;

pub const CODEBOOK_MAGIC: &[u8; 7] = b"LEGOCB1";

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    /// Row-major `k × dim`.
    pub centroids: Vec<f64>,
    pub k: usize,
    pub dim: usize,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl Codebook {
    pub fn centroid(&self, i: usize) -> &[f64] {
        &self.centroids[i * self.dim..(i + 1) * self.dim]
    }

    /// Index of the nearest centroid, lowest index on ties.
    pub fn assign(&self, x: &[f64]) -> usize {
        let mut best = (f64::INFINITY, 0);
        for c in 0..self.k {
            let d = dist2(x, self.centroid(c));
            if d < best.0 {
                best = (d, c);
            }
        }
        best.1
    }

    pub fn inertia(&self, samples: &[Vec<f64>]) -> f64 {
        samples
            .iter()
            .map(|s| dist2(s, self.centroid(self.assign(s))))
            .sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
        Self::read_from(&mut bytes.as_slice())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CODEBOOK_MAGIC)?;
        w.write_all(&(self.k as u32).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        for v in &self.centroids {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 7];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Truncated("codebook header".into()))?;
        if &magic != CODEBOOK_MAGIC {
            return Err(Error::BadMagic {
                expected: "LEGOCB1",
            });
        }
        let mut word = [0u8; 4];
        let mut read_u32 = |r: &mut R| -> Result<usize> {
            r.read_exact(&mut word)
                .map_err(|_| Error::Truncated("codebook header".into()))?;
            Ok(u32::from_le_bytes(word) as usize)
        };
        let k = read_u32(r)?;
        let dim = read_u32(r)?;
        if k < 2 || dim == 0 {
            return Err(Error::Truncated(format!("codebook with k={k}, D={dim}")));
        }
        let mut centroids = Vec::with_capacity(k * dim);
        for _ in 0..k * dim {
            r.read_exact(&mut word)
                .map_err(|_| Error::Truncated("codebook centroids".into()))?;
            let v = f32::from_le_bytes(word) as f64;
            if !v.is_finite() {
                return Err(Error::Truncated("non-finite centroid".into()));
            }
            centroids.push(v);
        }
        Ok(Codebook { centroids, k, dim })
    }
}

/// k-means with k-means++ seeding and Lloyd refinement until the relative
/// inertia change drops below 1e-4 (at most 100 iterations).
pub fn build_codebook(samples: &[Vec<f64>], k: usize, seed: u64) -> Result<Codebook> {
    if k < 2 {
        return Err(Error::Config(format!("codebook needs k >= 2, got {k}")));
    }
    if samples.len() < k {
        return Err(Error::TooFewPoints {
            needed: k,
            got: samples.len(),
        });
    }
    let dim = samples[0].len();
    if let Some(bad) = samples.iter().find(|s| s.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: bad.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centroids: Vec<f64> = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..samples.len());
    centroids.extend_from_slice(&samples[first]);
    let mut d2: Vec<f64> = samples.iter().map(|s| dist2(s, &samples[first])).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random_range(0.0..total);
            let mut idx = d2.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if r < d {
                    idx = i;
                    break;
                }
                r -= d;
            }
            idx
        } else {
            rng.random_range(0..samples.len())
        };
        centroids.extend_from_slice(&samples[pick]);
        for (d, s) in d2.iter_mut().zip(samples) {
            *d = d.min(dist2(s, &samples[pick]));
        }
    }
    let mut cb = Codebook { centroids, k, dim };

    let mut prev = f64::INFINITY;
    let mut labels = vec![0usize; samples.len()];
    for _ in 0..100 {
        let mut inertia = 0.0;
        for (l, s) in labels.iter_mut().zip(samples) {
            *l = cb.assign(s);
            inertia += dist2(s, cb.centroid(*l));
        }
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (l, s) in labels.iter().zip(samples) {
            counts[*l] += 1;
            for (a, v) in sums[l * dim..(l + 1) * dim].iter_mut().zip(s) {
                *a += v;
            }
        }
        let mut taken = BTreeSet::new();
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..dim {
                    cb.centroids[c * dim + j] = sums[c * dim + j] / counts[c] as f64;
                }
            } else {
                // reseed from the sample farthest from its centroid
                let far = (0..samples.len())
                    .filter(|i| !taken.contains(i))
                    .max_by(|&a, &b| {
                        let da = dist2(&samples[a], cb.centroid(labels[a]));
                        let db = dist2(&samples[b], cb.centroid(labels[b]));
                        da.total_cmp(&db).then(b.cmp(&a))
                    })
                    .unwrap_or(0);
                taken.insert(far);
                cb.centroids[c * dim..(c + 1) * dim].copy_from_slice(&samples[far]);
            }
        }
        let change = if prev.is_finite() && prev > 0.0 {
            (prev - inertia).abs() / prev
        } else {
            f64::INFINITY
        };
        if inertia == 0.0 || change < 1e-4 {
            break;
        }
        prev = inertia;
    }
    Ok(cb)
}

/// Normalized histogram of nearest-centroid assignments over pixels with a
/// nonzero feature. All zeros when every pixel is void.
pub fn compute_signature(feat: &FeatureMap, cb: &Codebook) -> Result<Vec<f64>> {
    if feat.channels != cb.dim {
        return Err(Error::DimensionMismatch {
            expected: cb.dim,
            found: feat.channels,
        });
    }
    let mut hist = vec![0.0; cb.k];
    let mut n = 0usize;
    for p in 0..feat.pixel_count() {
        let f = feat.pixel(p);
        if f.iter().all(|&v| v == 0.0) {
            continue;
        }
        hist[cb.assign(f)] += 1.0;
        n += 1;
    }
    if n > 0 {
        hist.iter_mut().for_each(|h| *h /= n as f64);
    }
    Ok(hist)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoopConfig {
    pub similarity_threshold: f64,
    pub recency_gap: u64,
    pub radius: f64,
    pub max_candidates: usize,
    pub min_inlier_ratio: f64,
    pub max_rmse: f64,
    /// Temporal neighbours on each side of the candidate included in the submap.
    pub submap_neighbors: u64,
    pub max_iter: usize,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            similarity_threshold: 0.7,
            recency_gap: 20,
            radius: 3.0,
            max_candidates: 2,
            min_inlier_ratio: 0.6,
            max_rmse: 0.05,
            submap_neighbors: 1,
            max_iter: 50,
        }
    }
}

/// Up to `max_candidates` past keyframes that are old enough, nearby and
/// similar, best first. Keyframe IDs double as creation indices.
pub fn detect_candidates(
    current: &Keyframe,
    past: &[&Keyframe],
    cfg: &LoopConfig,
) -> Vec<(u64, f64)> {
    let Some(sig) = current.signature.as_ref() else {
        return Vec::new();
    };
    let mut cands: Vec<(u64, f64)> = past
        .iter()
        .filter(|kf| kf.id + cfg.recency_gap <= current.id)
        .filter(|kf| (kf.pose.translation - current.pose.translation).norm() <= cfg.radius)
        .filter_map(|kf| kf.signature.as_ref().map(|s| (kf.id, cosine(sig, s))))
        .filter(|(_, s)| *s > cfg.similarity_threshold)
        .collect();
    cands.sort_by(|a, b| b.1.total_cmp(&a.1).then(b.0.cmp(&a.0)));
    cands.truncate(cfg.max_candidates);
    cands
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseEdge {
    pub from: u64,
    pub to: u64,
    /// Relative pose `T_from⁻¹ T_to`.
    pub measurement: Pose,
    pub information: Matrix6<f64>,
}

/// Isotropic edge information from an alignment RMSE.
pub fn rmse_information(rmse: f64) -> Matrix6<f64> {
    let r = rmse.max(1e-3);
    Matrix6::identity() / (r * r)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verification {
    pub candidate: u64,
    pub accepted: bool,
    pub inlier_ratio: f64,
    pub rmse: f64,
    pub edge: Option<PoseEdge>,
}

/// Aligns the current keyframe's cloud to the Gaussians anchored at the
/// candidate and its temporal neighbours. Alignment failures reject.
pub fn verify_candidate(
    current: &Keyframe,
    candidate: &Keyframe,
    map: &GaussianMap,
    cfg: &LoopConfig,
    gicp: &GicpConfig,
) -> Verification {
    let lo = candidate.id.saturating_sub(cfg.submap_neighbors);
    let anchors: Vec<u64> = (lo..=candidate.id + cfg.submap_neighbors)
        .filter(|&a| a < current.id)
        .collect();
    let submap = map.anchored_cloud(&anchors);
    let reject = |inlier_ratio, rmse| Verification {
        candidate: candidate.id,
        accepted: false,
        inlier_ratio,
        rmse,
        edge: None,
    };
    let Ok(res) = gicp_align(&current.source, &submap, &current.pose, gicp) else {
        return reject(0.0, f64::INFINITY);
    };
    if res.inlier_ratio < cfg.min_inlier_ratio || res.rmse > cfg.max_rmse {
        return reject(res.inlier_ratio, res.rmse);
    }
    Verification {
        candidate: candidate.id,
        accepted: true,
        inlier_ratio: res.inlier_ratio,
        rmse: res.rmse,
        edge: Some(PoseEdge {
            from: candidate.id,
            to: current.id,
            measurement: candidate.pose.inverse().compose(&res.pose),
            information: rmse_information(res.rmse),
        }),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseGraph {
    pub nodes: BTreeMap<u64, Pose>,
    pub edges: Vec<PoseEdge>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphSolution {
    pub poses: BTreeMap<u64, Pose>,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
}

fn edge_residual(e: &PoseEdge, ti: &Pose, tj: &Pose) -> Vector6<f64> {
    e.measurement
        .inverse()
        .compose(&ti.inverse())
        .compose(tj)
        .log()
        .0
}

impl PoseGraph {
    pub fn anchor(&self) -> Option<u64> {
        self.nodes.keys().next().copied()
    }

    pub fn cost_of(&self, poses: &BTreeMap<u64, Pose>) -> f64 {
        self.edges
            .iter()
            .map(|e| {
                let r = edge_residual(e, &poses[&e.from], &poses[&e.to]);
                (r.transpose() * e.information * r)[0]
            })
            .sum()
    }

    pub fn cost(&self) -> f64 {
        self.cost_of(&self.nodes)
    }

    fn check(&self) -> Result<()> {
        for e in &self.edges {
            for n in [e.from, e.to] {
                if !self.nodes.contains_key(&n) {
                    return Err(Error::UnknownKeyframe(n));
                }
            }
        }
        let Some(anchor) = self.anchor() else {
            return Ok(());
        };
        let mut adj: BTreeMap<u64, Vec<u64>> = BTreeMap::new();
        for e in &self.edges {
            adj.entry(e.from).or_default().push(e.to);
            adj.entry(e.to).or_default().push(e.from);
        }
        let mut seen = BTreeSet::from([anchor]);
        let mut queue = VecDeque::from([anchor]);
        while let Some(n) = queue.pop_front() {
            for &m in adj.get(&n).into_iter().flatten() {
                if seen.insert(m) {
                    queue.push_back(m);
                }
            }
        }
        if seen.len() == self.nodes.len() {
            Ok(())
        } else {
            Err(Error::DisconnectedGraph)
        }
    }
}

const JACOBIAN_STEP: f64 = 1e-6;

/// Levenberg–Marquardt over left perturbations of every node except the
/// lowest-ID anchor, which is never written.
pub fn optimize_pose_graph(graph: &PoseGraph, max_iter: usize) -> Result<GraphSolution> {
    graph.check()?;
    let mut poses = graph.nodes.clone();
    let initial_cost = graph.cost();
    let mut sol = GraphSolution {
        poses: poses.clone(),
        initial_cost,
        final_cost: initial_cost,
        iterations: 0,
    };
    let Some(anchor) = graph.anchor() else {
        return Ok(sol);
    };
    let free: Vec<u64> = poses.keys().copied().filter(|&n| n != anchor).collect();
    if free.is_empty() || graph.edges.is_empty() || initial_cost < 1e-18 {
        return Ok(sol);
    }
    let slot: BTreeMap<u64, usize> = free.iter().enumerate().map(|(i, &n)| (n, i)).collect();
    let n = free.len() * 6;
    let mut cost = initial_cost;
    let mut lambda = 1e-4;
    for it in 0..max_iter {
        let mut h = DMatrix::<f64>::zeros(n, n);
        let mut b = DVector::<f64>::zeros(n);
        for e in &graph.edges {
            let (ti, tj) = (poses[&e.from], poses[&e.to]);
            let r = edge_residual(e, &ti, &tj);
            let mut blocks: Vec<(usize, nalgebra::Matrix6<f64>)> = Vec::new();
            for (node, is_from) in [(e.from, true), (e.to, false)] {
                let Some(&s) = slot.get(&node) else { continue };
                let mut jac = Matrix6::<f64>::zeros();
                for a in 0..6 {
                    let mut d = Vector6::zeros();
                    d[a] = JACOBIAN_STEP;
                    let plus = Pose::exp(&Twist(d)).compose(if is_from { &ti } else { &tj });
                    let minus = Pose::exp(&Twist(-d)).compose(if is_from { &ti } else { &tj });
                    let (rp, rm) = if is_from {
                        (edge_residual(e, &plus, &tj), edge_residual(e, &minus, &tj))
                    } else {
                        (edge_residual(e, &ti, &plus), edge_residual(e, &ti, &minus))
                    };
                    jac.set_column(a, &((rp - rm) / (2.0 * JACOBIAN_STEP)));
                }
                blocks.push((s, jac));
            }
            for &(sa, ja) in &blocks {
                let jt_o = ja.transpose() * e.information;
                let mut bv = b.fixed_rows_mut::<6>(sa * 6);
                bv += jt_o * r;
                for &(sb, jb) in &blocks {
                    let mut hv = h.fixed_view_mut::<6, 6>(sa * 6, sb * 6);
                    hv += jt_o * jb;
                }
            }
        }
        let mut accepted = false;
        for _ in 0..10 {
            let mut hd = h.clone();
            for i in 0..n {
                hd[(i, i)] += lambda * h[(i, i)].max(1e-9);
            }
            let Some(chol) = hd.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let delta = -chol.solve(&b);
            let mut cand = poses.clone();
            for (&node, &s) in &slot {
                let xi = Twist(delta.fixed_rows::<6>(s * 6).into_owned());
                cand.insert(node, Pose::exp(&xi).compose(&poses[&node]));
            }
            let c = graph.cost_of(&cand);
            if c < cost {
                let rel = (cost - c) / cost;
                poses = cand;
                cost = c;
                lambda = (lambda * 0.1).max(1e-12);
                accepted = true;
                sol.iterations = it + 1;
                if rel < 1e-9 {
                    sol.poses = poses;
                    sol.final_cost = cost;
                    return Ok(sol);
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted || cost < 1e-18 {
            break;
        }
    }
    sol.poses = poses;
    sol.final_cost = cost;
    Ok(sol)
}

/// Moves each keyframe to its optimized pose and carries its anchored
/// Gaussians along rigidly. Keyframes whose pose did not change are untouched.
pub fn propagate_corrections(
    map: &mut GaussianMap,
    keyframes: &mut [Keyframe],
    poses: &BTreeMap<u64, Pose>,
) -> Result<BTreeMap<u64, Pose>> {
    let mut deltas = BTreeMap::new();
    for kf in keyframes.iter_mut() {
        let Some(new) = poses.get(&kf.id) else {
            continue;
        };
        if *new == kf.pose {
            continue;
        }
        let delta = new.compose(&kf.pose.inverse());
        map.apply_rigid_correction(kf.id, &delta)?;
        kf.pose = *new;
        deltas.insert(kf.id, delta);
    }
    Ok(deltas)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    #[test]
    fn signature_halves() {
        let cb = Codebook {
            centroids: vec![0.0, 1.0, 1.0, 0.0, -1.0, 0.0],
            k: 3,
            dim: 2,
        };
        let f = FeatureMap::from_data(2, 1, 2, vec![0.1, 0.9, 0.9, 0.1]).unwrap();
        let s = compute_signature(&f, &cb).unwrap();
        assert_eq!(s, vec![0.5, 0.5, 0.0]);
        assert!(compute_signature(&FeatureMap::zeros(2, 1, 3), &cb).is_err());
    }

    #[test]
    fn codebook_round_trip() {
        let cb = Codebook {
            centroids: vec![0.5, -1.25, 3.0, 0.0],
            k: 2,
            dim: 2,
        };
        let mut buf = Vec::new();
        cb.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 7 + 8 + 16);
        assert_eq!(Codebook::read_from(&mut buf.as_slice()).unwrap(), cb);
        assert!(matches!(
            Codebook::read_from(&mut &buf[..20]),
            Err(Error::Truncated(_))
        ));
    }

    #[test]
    fn disconnected_graph_errors() {
        let nodes = BTreeMap::from([
            (0, Pose::identity()),
            (1, Pose::identity()),
            (2, Pose::identity()),
        ]);
        let edges = vec![PoseEdge {
            from: 0,
            to: 1,
            measurement: Pose::identity(),
            information: Matrix6::identity(),
        }];
        assert!(matches!(
            optimize_pose_graph(&PoseGraph { nodes, edges }, 10),
            Err(Error::DisconnectedGraph)
        ));
    }

    #[test]
    fn single_node() {
        let g = PoseGraph {
            nodes: BTreeMap::from([(0, Pose::from_translation(Vector3::x()))]),
            edges: vec![],
        };
        assert_eq!(optimize_pose_graph(&g, 10).unwrap().poses, g.nodes);
    }
}
