//! A static 3-d tree over a point slice, rebuilt whenever the point set changes.
//!
//! Results are exact and ties in distance resolve to the lower point index,
//! so queries are deterministic.

use nalgebra::Vector3;

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<Vector3<f64>>,
    /// Permutation of point indices; leaves own contiguous ranges of it.
    order: Vec<usize>,
    nodes: Vec<Node>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub dist_sq: f64,
}

fn better(a: &Neighbor, b: &Neighbor) -> bool {
    a.dist_sq < b.dist_sq || (a.dist_sq == b.dist_sq && a.index < b.index)
}

impl KdTree {
    pub fn new(points: &[Vector3<f64>]) -> Self {
        let mut tree = KdTree {
            points: points.to_vec(),
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        if !points.is_empty() {
            tree.build(0, points.len());
        }
        tree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, index: usize) -> &Vector3<f64> {
        &self.points[index]
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for &i in &self.order[start..end] {
            lo = lo.inf(&self.points[i]);
            hi = hi.sup(&self.points[i]);
        }
        let axis = (hi - lo).imax();
        let mid = start + (end - start) / 2;
        let points = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b))
        });
        let value = self.points[self.order[mid]][axis];
        self.nodes.push(Node::Leaf { start: 0, end: 0 });
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        self.nodes[id] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    pub fn nearest(&self, query: &Vector3<f64>) -> Option<Neighbor> {
        self.knn(query, 1).into_iter().next()
    }

    /// The `k` nearest points sorted by increasing distance.
    pub fn knn(&self, query: &Vector3<f64>, k: usize) -> Vec<Neighbor> {
        let mut best: Vec<Neighbor> = Vec::with_capacity(k + 1);
        if k == 0 || self.points.is_empty() {
            return best;
        }
        self.search(0, query, k, &mut best);
        best
    }

    fn search(&self, node: usize, q: &Vector3<f64>, k: usize, best: &mut Vec<Neighbor>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let cand = Neighbor {
                        index: i,
                        dist_sq: (self.points[i] - q).norm_squared(),
                    };
                    if best.len() == k && !better(&cand, &best[k - 1]) {
                        continue;
                    }
                    let pos = best.partition_point(|b| better(b, &cand));
                    best.insert(pos, cand);
                    best.truncate(k);
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.search(near, q, k, best);
                // equality keeps index-based tie breaking exact across the split
                if best.len() < k || diff * diff <= best[k - 1].dist_sq {
                    self.search(far, q, k, best);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute(points: &[Vector3<f64>], q: &Vector3<f64>, k: usize) -> Vec<Neighbor> {
        let mut all: Vec<Neighbor> = points
            .iter()
            .enumerate()
            .map(|(index, p)| Neighbor {
                index,
                dist_sq: (p - q).norm_squared(),
            })
            .collect();
        all.sort_by(|a, b| a.dist_sq.total_cmp(&b.dist_sq).then(a.index.cmp(&b.index)));
        all.truncate(k);
        all
    }

    #[test]
    fn empty_tree() {
        let t = KdTree::new(&[]);
        assert!(t.nearest(&Vector3::zeros()).is_none());
    }

    #[test]
    fn duplicate_points_tie_to_lower_index() {
        let pts = vec![Vector3::new(1.0, 0.0, 0.0); 20];
        let t = KdTree::new(&pts);
        let nn = t.knn(&Vector3::zeros(), 3);
        assert_eq!(
            nn.iter().map(|n| n.index).collect::<Vec<_>>(),
            vec![0, 1, 2]
        );
    }

    proptest! {
        #[test]
        fn matches_brute_force(
            pts in prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 1..200),
            q in prop::array::uniform3(-1.5f64..1.5),
            k in 1usize..12,
        ) {
            let pts: Vec<Vector3<f64>> = pts.into_iter().map(Vector3::from).collect();
            let q = Vector3::from(q);
            let t = KdTree::new(&pts);
            prop_assert_eq!(t.knn(&q, k), brute(&pts, &q, k));
        }
    }
}
