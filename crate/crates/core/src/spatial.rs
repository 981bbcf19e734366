//! Exact nearest-neighbour queries over 3D points.
//!
//! Ties are broken towards the lowest point index in every query, so the
//! k-d tree path and the brute-force path return identical answers.

use crate::cloud::{dist2, Point};

/// Clouds smaller than this are searched by brute force.
pub const BRUTE_FORCE_BELOW: usize = 64;
const LEAF_SIZE: usize = 12;

#[inline]
fn better(d2: f64, i: usize, best_d2: f64, best_i: usize) -> bool {
    d2 < best_d2 || (d2 == best_d2 && i < best_i)
}

/// Brute-force nearest neighbour: `(index, squared distance)`.
pub fn nearest_brute(points: &[Point], q: &Point) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, p) in points.iter().enumerate() {
        let d2 = dist2(p, q);
        match best {
            Some((bi, bd)) if !better(d2, i, bd, bi) => {}
            _ => best = Some((i, d2)),
        }
    }
    best
}

#[derive(Debug, Clone)]
struct Node {
    lo: usize,
    hi: usize,
    min: Point,
    max: Point,
    /// `None` for leaves.
    children: Option<(usize, usize)>,
}

impl Node {
    /// Squared distance from `q` to the node's bounding box, summed like
    /// [`dist2`] so it never rounds above the distance to a contained point.
    #[inline]
    fn box_d2(&self, q: &Point) -> f64 {
        let gap = |a: usize| {
            if q[a] < self.min[a] {
                self.min[a] - q[a]
            } else if q[a] > self.max[a] {
                q[a] - self.max[a]
            } else {
                0.0
            }
        };
        let (dx, dy, dz) = (gap(0), gap(1), gap(2));
        dx * dx + dy * dy + dz * dz
    }
}

/// Median-split k-d tree with per-node bounding boxes.
#[derive(Debug, Clone)]
pub struct KdTree {
    pts: Vec<Point>,
    ids: Vec<usize>,
    nodes: Vec<Node>,
}

impl KdTree {
    pub fn build(points: &[Point]) -> Self {
        let mut items: Vec<(Point, usize)> = points.iter().copied().zip(0..).collect();
        let mut nodes = Vec::with_capacity(4 * points.len() / LEAF_SIZE + 1);
        if !items.is_empty() {
            let n = items.len();
            Self::build_range(&mut items, 0, n, &mut nodes);
        }
        let (pts, ids) = items.into_iter().unzip();
        KdTree { pts, ids, nodes }
    }

    fn build_range(items: &mut [(Point, usize)], lo: usize, hi: usize, nodes: &mut Vec<Node>) -> usize {
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for (p, _) in &items[lo..hi] {
            for a in 0..3 {
                min[a] = min[a].min(p[a]);
                max[a] = max[a].max(p[a]);
            }
        }
        let id = nodes.len();
        nodes.push(Node { lo, hi, min, max, children: None });
        if hi - lo <= LEAF_SIZE {
            return id;
        }
        let axis = (0..3)
            .max_by(|&a, &b| (max[a] - min[a]).total_cmp(&(max[b] - min[b])))
            .unwrap();
        let mid = (lo + hi) / 2;
        items[lo..hi].select_nth_unstable_by(mid - lo, |x, y| x.0[axis].total_cmp(&y.0[axis]));
        let left = Self::build_range(items, lo, mid, nodes);
        let right = Self::build_range(items, mid, hi, nodes);
        nodes[id].children = Some((left, right));
        id
    }

    pub fn len(&self) -> usize {
        self.pts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pts.is_empty()
    }

    /// Children ordered by box distance to `q`, closer first.
    #[inline]
    fn ordered(&self, left: usize, right: usize, q: &Point) -> [(usize, f64); 2] {
        let (dl, dr) = (self.nodes[left].box_d2(q), self.nodes[right].box_d2(q));
        if dr < dl {
            [(right, dr), (left, dl)]
        } else {
            [(left, dl), (right, dr)]
        }
    }

    /// `(index, squared distance)` of the nearest point.
    pub fn nearest(&self, q: &Point) -> Option<(usize, f64)> {
        if self.pts.is_empty() {
            return None;
        }
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(0, q, &mut best);
        Some(best)
    }

    fn search(&self, node: usize, q: &Point, best: &mut (usize, f64)) {
        let n = &self.nodes[node];
        match n.children {
            None => {
                for k in n.lo..n.hi {
                    let d2 = dist2(&self.pts[k], q);
                    if better(d2, self.ids[k], best.1, best.0) {
                        *best = (self.ids[k], d2);
                    }
                }
            }
            Some((left, right)) => {
                for (child, d2) in self.ordered(left, right, q) {
                    // `<=` so equidistant points with lower indices are still visited
                    if d2 <= best.1 {
                        self.search(child, q, best);
                    }
                }
            }
        }
    }

    /// The `k` nearest points sorted by `(distance, index)`.
    pub fn k_nearest(&self, q: &Point, k: usize) -> Vec<(usize, f64)> {
        let mut heap: Vec<(usize, f64)> = Vec::with_capacity(k + 1);
        if k > 0 && !self.pts.is_empty() {
            self.search_k(0, q, k, &mut heap);
        }
        heap
    }

    fn worst(heap: &[(usize, f64)], k: usize) -> f64 {
        if heap.len() < k {
            f64::INFINITY
        } else {
            heap[heap.len() - 1].1
        }
    }

    fn search_k(&self, node: usize, q: &Point, k: usize, heap: &mut Vec<(usize, f64)>) {
        let n = &self.nodes[node];
        match n.children {
            None => {
                for j in n.lo..n.hi {
                    let cand = (self.ids[j], dist2(&self.pts[j], q));
                    if heap.len() == k {
                        let (wi, wd) = heap[k - 1];
                        if !better(cand.1, cand.0, wd, wi) {
                            continue;
                        }
                        heap.pop();
                    }
                    let pos = heap
                        .iter()
                        .position(|&(i, d)| better(cand.1, cand.0, d, i))
                        .unwrap_or(heap.len());
                    heap.insert(pos, cand);
                }
            }
            Some((left, right)) => {
                for (child, d2) in self.ordered(left, right, q) {
                    if d2 <= Self::worst(heap, k) {
                        self.search_k(child, q, k, heap);
                    }
                }
            }
        }
    }

    /// Number of points within Euclidean distance `r` (inclusive).
    pub fn count_within(&self, q: &Point, r: f64) -> usize {
        if self.pts.is_empty() {
            return 0;
        }
        self.count_node(0, q, r * r)
    }

    fn count_node(&self, node: usize, q: &Point, r2: f64) -> usize {
        let n = &self.nodes[node];
        if n.box_d2(q) > r2 {
            return 0;
        }
        match n.children {
            None => self.pts[n.lo..n.hi].iter().filter(|p| dist2(p, q) <= r2).count(),
            Some((left, right)) => self.count_node(left, q, r2) + self.count_node(right, q, r2),
        }
    }
}

/// Nearest-neighbour index that picks brute force for small clouds.
#[derive(Debug, Clone)]
pub enum NnIndex<'a> {
    Brute(&'a [Point]),
    Tree(KdTree),
}

impl<'a> NnIndex<'a> {
    pub fn build(points: &'a [Point]) -> Self {
        if points.len() < BRUTE_FORCE_BELOW {
            NnIndex::Brute(points)
        } else {
            NnIndex::Tree(KdTree::build(points))
        }
    }

    /// `(index, squared distance)`; `None` only for an empty point set.
    #[inline]
    pub fn nearest(&self, q: &Point) -> Option<(usize, f64)> {
        match self {
            NnIndex::Brute(points) => nearest_brute(points, q),
            NnIndex::Tree(tree) => tree.nearest(q),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_points(n: usize, seed: u64) -> Vec<Point> {
        let mut rng = seeded(seed);
        (0..n).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect()
    }

    #[test]
    fn tree_matches_brute_force_exactly() {
        for seed in 0..20 {
            let pts = random_points(500 + seed as usize * 37, seed);
            let tree = KdTree::build(&pts);
            for q in random_points(200, seed + 1000) {
                assert_eq!(tree.nearest(&q), nearest_brute(&pts, &q));
            }
        }
    }

    #[test]
    fn ties_go_to_lowest_index() {
        // a lattice with many duplicates and equidistant neighbours
        let mut pts = Vec::new();
        for _ in 0..3 {
            for i in 0..5 {
                for j in 0..5 {
                    for k in 0..5 {
                        pts.push([i as f64, j as f64, k as f64]);
                    }
                }
            }
        }
        let tree = KdTree::build(&pts);
        for q in [[0.5, 0.5, 0.5], [2.0, 2.0, 2.0], [1.5, 3.0, 0.0], [4.5, 4.5, 4.5]] {
            let t = tree.nearest(&q).unwrap();
            assert_eq!(Some(t), nearest_brute(&pts, &q));
            assert!(t.0 < 125);
        }
    }

    #[test]
    fn k_nearest_matches_sorted_brute_force() {
        let pts = random_points(300, 4);
        let tree = KdTree::build(&pts);
        for q in random_points(30, 5) {
            let mut all: Vec<(usize, f64)> = pts.iter().enumerate().map(|(i, p)| (i, dist2(p, &q))).collect();
            all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            assert_eq!(tree.k_nearest(&q, 10), all[..10].to_vec());
        }
    }

    #[test]
    fn count_within_matches_scan() {
        let pts = random_points(400, 6);
        let tree = KdTree::build(&pts);
        for q in random_points(20, 7) {
            let brute = pts.iter().filter(|p| dist2(p, &q) <= 0.09).count();
            assert_eq!(tree.count_within(&q, 0.3), brute);
        }
    }

    proptest! {
        #[test]
        fn index_agrees_with_brute(n in 1usize..200, seed in any::<u64>()) {
            let pts = random_points(n, seed);
            let idx = NnIndex::build(&pts);
            for q in random_points(10, seed ^ 1) {
                prop_assert_eq!(idx.nearest(&q), nearest_brute(&pts, &q));
            }
        }
    }
}
