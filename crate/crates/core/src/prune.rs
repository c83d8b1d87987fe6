//! Map compaction: geometric heuristics plus a language-guided redundancy rule.

use std::collections::BTreeSet;

use nalgebra::Vector3;

use crate::kdtree::KdTree;
use crate::map::GaussianMap;
use crate::mapping::OptimizerState;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PruneConfig {
    pub k_neighbors: usize,
    pub tau_dist: f64,
    pub tau_sim: f64,
    pub alpha_min: f64,
    pub scale_max: f64,
    pub period: u64,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            k_neighbors: 8,
            tau_dist: 0.02,
            tau_sim: 0.9,
            alpha_min: 0.05,
            scale_max: 0.5,
            period: 200,
        }
    }
}

impl PruneConfig {
    pub fn is_valid(&self) -> bool {
        self.tau_sim > -1.0
            && self.tau_sim <= 1.0
            && self.tau_dist > 0.0
            && self.period >= 1
            && self.k_neighbors >= 1
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PruneReport {
    pub removed_language: BTreeSet<u64>,
    pub removed_geometric: BTreeSet<u64>,
    pub kept: usize,
}

impl PruneReport {
    pub fn removed(&self) -> usize {
        self.removed_language.union(&self.removed_geometric).count()
    }
}

/// Cosine similarity; zero when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Greedy sweep in ascending ID order: each surviving Gaussian marks its
/// close, semantically similar neighbours, which then stop marking others.
pub fn find_language_redundant(map: &GaussianMap, cfg: &PruneConfig) -> BTreeSet<u64> {
    let mut marked = BTreeSet::new();
    if map.len() < 2 {
        return marked;
    }
    let positions: Vec<_> = map.gaussians.iter().map(|g| g.position).collect();
    let tree = KdTree::new(&positions);
    let mut order: Vec<usize> = (0..map.len()).collect();
    order.sort_by_key(|&i| map.gaussians[i].id);
    let mut dead = vec![false; map.len()];
    let tau2 = cfg.tau_dist * cfg.tau_dist;
    for &i in &order {
        if dead[i] {
            continue;
        }
        let gi = &map.gaussians[i];
        for j in live_neighbors(&tree, &dead, i, &gi.position, cfg.k_neighbors) {
            let n = &map.gaussians[j];
            if (n.position - gi.position).norm_squared() < tau2
                && cosine(&gi.feature, &n.feature) > cfg.tau_sim
            {
                dead[j] = true;
                marked.insert(n.id);
            }
        }
    }
    marked
}

/// The `k` nearest live Gaussians other than `own`. Dead entries stay in the
/// tree, so the query widens until enough live ones are found.
fn live_neighbors(
    tree: &KdTree,
    dead: &[bool],
    own: usize,
    q: &Vector3<f64>,
    k: usize,
) -> Vec<usize> {
    let mut want = k + 1;
    loop {
        let nbrs = tree.knn(q, want);
        let live: Vec<usize> = nbrs
            .iter()
            .map(|n| n.index)
            .filter(|&j| j != own && !dead[j])
            .take(k)
            .collect();
        if live.len() == k || nbrs.len() == tree.len() {
            return live;
        }
        want = (want * 2).min(tree.len());
    }
}

/// Gaussians that are nearly transparent or overly large.
pub fn find_geometric(map: &GaussianMap, cfg: &PruneConfig) -> BTreeSet<u64> {
    map.gaussians
        .iter()
        .filter(|g| g.opacity() < cfg.alpha_min || g.scale().max() > cfg.scale_max)
        .map(|g| g.id)
        .collect()
}

/// Deletes the union of both rules and compacts the optimizer rows to match.
pub fn prune(
    map: &mut GaussianMap,
    cfg: &PruneConfig,
    state: Option<&mut OptimizerState>,
    use_language: bool,
) -> PruneReport {
    let removed_language = if use_language {
        find_language_redundant(map, cfg)
    } else {
        BTreeSet::new()
    };
    let removed_geometric: BTreeSet<u64> = find_geometric(map, cfg)
        .into_iter()
        .filter(|id| !removed_language.contains(id))
        .collect();
    let keep: Vec<bool> = map
        .gaussians
        .iter()
        .map(|g| !removed_language.contains(&g.id) && !removed_geometric.contains(&g.id))
        .collect();
    if let Some(state) = state {
        state.sync(map);
        state.retain(&keep);
    }
    map.retain_mask(&keep);
    PruneReport {
        removed_language,
        removed_geometric,
        kept: map.len(),
    }
}
