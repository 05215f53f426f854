//! Static k-d tree with bucketed leaves.
//!
//! Results are exact and ordered by `(squared distance, point index)`, so ties
//! resolve identically to a linear scan over the points in insertion order.

use std::cmp::Ordering;

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { dim: usize, value: f64, left: usize, right: usize },
}

#[derive(Debug, Clone)]
pub struct KdTree<const D: usize> {
    points: Vec<[f64; D]>,
    perm: Vec<usize>,
    /// Points in leaf order, `sorted[i] = points[perm[i]]`.
    sorted: Vec<[f64; D]>,
    nodes: Vec<Node>,
}

/// A neighbor: index into the original point list and squared distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub dist2: f64,
}

fn order(a: &Neighbor, b: &Neighbor) -> Ordering {
    a.dist2.total_cmp(&b.dist2).then(a.index.cmp(&b.index))
}

fn dist2<const D: usize>(a: &[f64; D], b: &[f64; D]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl<const D: usize> KdTree<D> {
    pub fn new(points: Vec<[f64; D]>) -> Self {
        let mut perm: Vec<usize> = (0..points.len()).collect();
        let mut nodes = Vec::new();
        if !points.is_empty() {
            build(&points, &mut perm, 0, &mut nodes);
        }
        let sorted = perm.iter().map(|&i| points[i]).collect();
        Self { points, perm, sorted, nodes }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, index: usize) -> &[f64; D] {
        &self.points[index]
    }

    pub fn points(&self) -> &[[f64; D]] {
        &self.points
    }

    pub fn nearest(&self, query: &[f64; D]) -> Option<Neighbor> {
        if self.points.is_empty() {
            return None;
        }
        let mut best = Neighbor { index: usize::MAX, dist2: f64::INFINITY };
        self.nearest_rec(0, query, &mut [0.0; D], 0.0, &mut best);
        Some(best)
    }

    /// `off` holds the per-axis distance from the query to the node's cell and
    /// `rd` its squared norm, a lower bound on any distance inside the cell.
    fn nearest_rec(&self, node: usize, q: &[f64; D], off: &mut [f64; D], rd: f64, best: &mut Neighbor) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for (i, p) in self.sorted[start..end].iter().enumerate() {
                    let cand = Neighbor { index: self.perm[start + i], dist2: dist2(p, q) };
                    if order(&cand, best) == Ordering::Less {
                        *best = cand;
                    }
                }
            }
            Node::Split { dim, value, left, right } => {
                let diff = q[dim] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.nearest_rec(near, q, off, rd, best);
                let old = off[dim];
                let rd_far = rd - old * old + diff * diff;
                if rd_far <= best.dist2 {
                    off[dim] = diff;
                    self.nearest_rec(far, q, off, rd_far, best);
                    off[dim] = old;
                }
            }
        }
    }

    /// The `k` nearest points, ascending. Returns all points when `k >= len`.
    pub fn knn(&self, query: &[f64; D], k: usize) -> Vec<Neighbor> {
        let mut out: Vec<Neighbor> = Vec::with_capacity(k + 1);
        if k == 0 || self.points.is_empty() {
            return out;
        }
        self.knn_rec(0, query, k, &mut [0.0; D], 0.0, &mut out);
        out
    }

    fn knn_rec(&self, node: usize, q: &[f64; D], k: usize, off: &mut [f64; D], rd: f64, out: &mut Vec<Neighbor>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for (i, p) in self.sorted[start..end].iter().enumerate() {
                    let cand = Neighbor { index: self.perm[start + i], dist2: dist2(p, q) };
                    if out.len() == k && order(&cand, out.last().expect("k > 0")) != Ordering::Less {
                        continue;
                    }
                    let pos = out.partition_point(|n| order(n, &cand) == Ordering::Less);
                    out.insert(pos, cand);
                    out.truncate(k);
                }
            }
            Node::Split { dim, value, left, right } => {
                let diff = q[dim] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.knn_rec(near, q, k, off, rd, out);
                let worst = if out.len() < k { f64::INFINITY } else { out[k - 1].dist2 };
                let old = off[dim];
                let rd_far = rd - old * old + diff * diff;
                if rd_far <= worst {
                    off[dim] = diff;
                    self.knn_rec(far, q, k, off, rd_far, out);
                    off[dim] = old;
                }
            }
        }
    }
}

fn build<const D: usize>(points: &[[f64; D]], perm: &mut [usize], offset: usize, nodes: &mut Vec<Node>) -> usize {
    let id = nodes.len();
    if perm.len() <= LEAF_SIZE {
        nodes.push(Node::Leaf { start: offset, end: offset + perm.len() });
        return id;
    }
    let dim = (0..D)
        .map(|d| {
            let (lo, hi) = perm.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
                (lo.min(points[i][d]), hi.max(points[i][d]))
            });
            (d, hi - lo)
        })
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(d, _)| d)
        .unwrap_or(0);
    let mid = perm.len() / 2;
    perm.select_nth_unstable_by(mid, |&a, &b| points[a][dim].total_cmp(&points[b][dim]));
    let value = points[perm[mid]][dim];
    // placeholder, patched after children are built
    nodes.push(Node::Leaf { start: 0, end: 0 });
    let (lo, hi) = perm.split_at_mut(mid);
    let left = build(points, lo, offset, nodes);
    let right = build(points, hi, offset + mid, nodes);
    nodes[id] = Node::Split { dim, value, left, right };
    id
}

/// Brute-force nearest neighbor, ties to the lowest index.
pub fn nearest_linear<const D: usize>(points: &[[f64; D]], query: &[f64; D]) -> Option<Neighbor> {
    points
        .iter()
        .enumerate()
        .map(|(index, p)| Neighbor { index, dist2: dist2(p, query) })
        .min_by(order)
}

/// Brute-force k nearest neighbors, ascending by `(distance, index)`.
pub fn knn_linear<const D: usize>(points: &[[f64; D]], query: &[f64; D], k: usize) -> Vec<Neighbor> {
    let mut all: Vec<Neighbor> =
        points.iter().enumerate().map(|(index, p)| Neighbor { index, dist2: dist2(p, query) }).collect();
    all.sort_by(order);
    all.truncate(k);
    all
}
