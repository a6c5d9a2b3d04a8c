//! Agglomerative dendrograms, dendrogram cuts, k-means, and cluster
//! representatives.
//!
//! Merges are chosen by the total order `(distance, smaller slot, larger
//! slot)`, where a cluster's slot is the smallest example position it
//! contains. Exactly tied distances therefore always resolve toward the
//! cluster holding the earliest example.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;
use crate::vectors::{cosine_distance, euclidean_norm, squared_distance, DifferenceSpace};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClusterError {
    #[error("need at least 2 vectors, got {0}")]
    TooFewVectors(usize),
    #[error("k = {k} out of range [{lo}, {hi}]")]
    KOutOfRange { k: usize, lo: usize, hi: usize },
    #[error("invalid dendrogram: {0}")]
    InvalidDendrogram(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Linkage {
    /// Ward's minimum-variance criterion on Euclidean distances.
    #[default]
    WardEuclidean,
    /// Mean pairwise cosine distance (UPGMA).
    AverageCosine,
}

impl std::str::FromStr for Linkage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ward-euclidean" | "ward" => Ok(Linkage::WardEuclidean),
            "average-cosine" => Ok(Linkage::AverageCosine),
            other => Err(format!("unknown linkage {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub left: usize,
    pub right: usize,
    pub height: f64,
    pub size: usize,
}

/// Full merge tree. Nodes `0..n_leaves` are examples; merge `i` creates node
/// `n_leaves + i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDendrogram")]
pub struct Dendrogram {
    n_leaves: usize,
    merges: Vec<Merge>,
    #[serde(skip)]
    first_leaf: Vec<usize>,
}

#[derive(Deserialize)]
struct RawDendrogram {
    n_leaves: usize,
    merges: Vec<Merge>,
}

impl TryFrom<RawDendrogram> for Dendrogram {
    type Error = ClusterError;

    fn try_from(raw: RawDendrogram) -> Result<Self, Self::Error> {
        Dendrogram::from_merges(raw.n_leaves, raw.merges)
    }
}

/// One step of refinement: the cluster at `k` that splits in two at `k + 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub parent_node: usize,
    pub child_nodes: [usize; 2],
    pub parent: Vec<usize>,
    pub children: [Vec<usize>; 2],
}

impl Dendrogram {
    /// Validates the structural invariants of a merge list.
    pub fn from_merges(n_leaves: usize, merges: Vec<Merge>) -> Result<Self, ClusterError> {
        let bad = |msg: String| Err(ClusterError::InvalidDendrogram(msg));
        if n_leaves < 2 {
            return bad(format!("need at least 2 leaves, got {n_leaves}"));
        }
        if merges.len() != n_leaves - 1 {
            return bad(format!("{} merges for {n_leaves} leaves", merges.len()));
        }
        let total = 2 * n_leaves - 1;
        let mut used = vec![false; total];
        let mut size = vec![1usize; total];
        for (i, m) in merges.iter().enumerate() {
            let node = n_leaves + i;
            for child in [m.left, m.right] {
                if child >= node {
                    return bad(format!("merge {i} references node {child} before it exists"));
                }
                if used[child] {
                    return bad(format!("node {child} merged twice"));
                }
                used[child] = true;
            }
            if m.left == m.right {
                return bad(format!("merge {i} joins node {} with itself", m.left));
            }
            if !(m.height.is_finite() && m.height >= 0.0) {
                return bad(format!("merge {i} has invalid height {}", m.height));
            }
            size[node] = size[m.left] + size[m.right];
            if m.size != size[node] {
                return bad(format!("merge {i} size {} != {}", m.size, size[node]));
            }
        }
        let mut first_leaf: Vec<usize> = (0..total).collect();
        for (i, m) in merges.iter().enumerate() {
            first_leaf[n_leaves + i] = first_leaf[m.left].min(first_leaf[m.right]);
        }
        Ok(Dendrogram {
            n_leaves,
            merges,
            first_leaf,
        })
    }

    pub fn n_leaves(&self) -> usize {
        self.n_leaves
    }

    pub fn merges(&self) -> &[Merge] {
        &self.merges
    }

    pub fn root(&self) -> usize {
        2 * self.n_leaves - 2
    }

    /// Smallest example position under `node`.
    pub fn first_leaf(&self, node: usize) -> usize {
        self.first_leaf[node]
    }

    pub fn children(&self, node: usize) -> Option<(usize, usize)> {
        node.checked_sub(self.n_leaves)
            .and_then(|i| self.merges.get(i))
            .map(|m| (m.left, m.right))
    }

    /// Example positions under `node`, ascending.
    pub fn members(&self, node: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack = vec![node];
        while let Some(n) = stack.pop() {
            match self.children(n) {
                Some((l, r)) => {
                    stack.push(l);
                    stack.push(r);
                }
                None => out.push(n),
            }
        }
        out.sort_unstable();
        out
    }

    fn check_k(&self, k: usize, hi: usize) -> Result<(), ClusterError> {
        if k == 0 || k > hi {
            return Err(ClusterError::KOutOfRange { k, lo: 1, hi });
        }
        Ok(())
    }

    /// Cluster nodes present after undoing the top `k - 1` merges, ordered by
    /// their smallest example position.
    pub fn cut_nodes(&self, k: usize) -> Result<Vec<usize>, ClusterError> {
        self.check_k(k, self.n_leaves)?;
        let performed = self.n_leaves - k;
        let mut alive = vec![true; self.n_leaves + performed];
        for m in &self.merges[..performed] {
            alive[m.left] = false;
            alive[m.right] = false;
        }
        let mut nodes: Vec<usize> = (0..alive.len()).filter(|&n| alive[n]).collect();
        nodes.sort_by_key(|&n| self.first_leaf[n]);
        Ok(nodes)
    }

    pub fn cut(&self, k: usize) -> Result<ClusterAssignment, ClusterError> {
        let nodes = self.cut_nodes(k)?;
        let members: Vec<Vec<usize>> = nodes.iter().map(|&n| self.members(n)).collect();
        Ok(ClusterAssignment::from_members(self.n_leaves, members))
    }

    /// The cluster of `cut(k)` that is split in `cut(k + 1)`, with its two halves.
    /// The child holding the smaller example position comes first.
    pub fn split_next(&self, k: usize) -> Result<Split, ClusterError> {
        self.check_k(k, self.n_leaves - 1)?;
        let index = self.n_leaves - 1 - k;
        let parent_node = self.n_leaves + index;
        let m = self.merges[index];
        let (a, b) = if self.first_leaf[m.left] < self.first_leaf[m.right] {
            (m.left, m.right)
        } else {
            (m.right, m.left)
        };
        Ok(Split {
            parent_node,
            child_nodes: [a, b],
            parent: self.members(parent_node),
            children: [self.members(a), self.members(b)],
        })
    }
}

/// A partition of example positions into `k` non-empty clusters, numbered by
/// ascending smallest member.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub k: usize,
    pub labels: Vec<usize>,
    pub members: Vec<Vec<usize>>,
}

impl ClusterAssignment {
    /// Builds from raw labels of any numbering; clusters are renumbered.
    pub fn from_labels(raw: &[usize]) -> Self {
        let mut remap = std::collections::HashMap::new();
        let mut members: Vec<Vec<usize>> = Vec::new();
        let mut labels = Vec::with_capacity(raw.len());
        for (pos, &r) in raw.iter().enumerate() {
            let next = remap.len();
            let c = *remap.entry(r).or_insert(next);
            if c == members.len() {
                members.push(Vec::new());
            }
            members[c].push(pos);
            labels.push(c);
        }
        ClusterAssignment {
            k: members.len(),
            labels,
            members,
        }
    }

    fn from_members(n: usize, mut members: Vec<Vec<usize>>) -> Self {
        members.sort_by_key(|m| m[0]);
        let mut labels = vec![0; n];
        for (c, m) in members.iter().enumerate() {
            for &p in m {
                labels[p] = c;
            }
        }
        ClusterAssignment {
            k: members.len(),
            labels,
            members,
        }
    }
}

struct Condensed {
    n: usize,
    values: Vec<f64>,
}

impl Condensed {
    fn index(&self, i: usize, j: usize) -> usize {
        let (i, j) = if i < j { (i, j) } else { (j, i) };
        self.n * i - i * (i + 1) / 2 + j - i - 1
    }

    fn get(&self, i: usize, j: usize) -> f64 {
        self.values[self.index(i, j)]
    }

    fn set(&mut self, i: usize, j: usize, v: f64) {
        let idx = self.index(i, j);
        self.values[idx] = v;
    }
}

/// Candidate order: distance, then the slot pair.
fn precedes(d1: f64, i1: usize, j1: usize, d2: f64, i2: usize, j2: usize) -> bool {
    let key1 = (i1.min(j1), i1.max(j1));
    let key2 = (i2.min(j2), i2.max(j2));
    d1 < d2 || (d1 == d2 && key1 < key2)
}

/// Builds the full merge tree of `space` under `linkage`.
pub fn build_dendrogram(space: &DifferenceSpace, linkage: Linkage) -> Result<Dendrogram, ClusterError> {
    let n = space.len();
    if n < 2 {
        return Err(ClusterError::TooFewVectors(n));
    }
    let mut dist = Condensed {
        n,
        values: Vec::with_capacity(n * (n - 1) / 2),
    };
    for i in 0..n {
        let vi = space.vector(i);
        for j in i + 1..n {
            let vj = space.vector(j);
            dist.values.push(match linkage {
                Linkage::WardEuclidean => squared_distance(vi, vj),
                Linkage::AverageCosine => cosine_distance(vi, vj),
            });
        }
    }

    // Slot s holds the cluster whose smallest member is s.
    let mut active = vec![true; n];
    let mut size = vec![1usize; n];
    let mut node = (0..n).collect::<Vec<_>>();

    let best_in_row = |dist: &Condensed, active: &[bool], i: usize| -> usize {
        let mut best = usize::MAX;
        let mut best_d = f64::INFINITY;
        for (j, &alive) in active.iter().enumerate() {
            if j == i || !alive {
                continue;
            }
            let d = dist.get(i, j);
            if best == usize::MAX || precedes(d, i, j, best_d, i, best) {
                best = j;
                best_d = d;
            }
        }
        best
    };
    let mut nearest: Vec<usize> = (0..n).map(|i| best_in_row(&dist, &active, i)).collect();

    let mut merges = Vec::with_capacity(n - 1);
    for step in 0..n - 1 {
        let mut a = usize::MAX;
        let mut b = usize::MAX;
        let mut best_d = f64::INFINITY;
        for i in 0..n {
            if !active[i] {
                continue;
            }
            let j = nearest[i];
            let d = dist.get(i, j);
            if a == usize::MAX || precedes(d, i, j, best_d, a, b) {
                a = i;
                b = j;
                best_d = d;
            }
        }
        let (a, b) = (a.min(b), a.max(b));
        let (na, nb) = (size[a], size[b]);

        let height = match linkage {
            Linkage::WardEuclidean => best_d.max(0.0).sqrt(),
            Linkage::AverageCosine => best_d,
        };
        let (left, right) = (node[a].min(node[b]), node[a].max(node[b]));
        merges.push(Merge {
            left,
            right,
            height,
            size: na + nb,
        });

        active[b] = false;
        for x in 0..n {
            if !active[x] || x == a {
                continue;
            }
            let nx = size[x];
            let updated = match linkage {
                Linkage::WardEuclidean => {
                    let (na, nb, nx) = (na as f64, nb as f64, nx as f64);
                    ((na + nx) * dist.get(x, a) + (nb + nx) * dist.get(x, b) - nx * best_d) / (na + nb + nx)
                }
                Linkage::AverageCosine => (na as f64 * dist.get(x, a) + nb as f64 * dist.get(x, b)) / (na + nb) as f64,
            };
            dist.set(x, a, updated);
        }
        size[a] = na + nb;
        node[a] = n + step;

        if step + 2 == n {
            break;
        }
        nearest[a] = best_in_row(&dist, &active, a);
        for x in 0..n {
            if !active[x] || x == a {
                continue;
            }
            if nearest[x] == a || nearest[x] == b {
                nearest[x] = best_in_row(&dist, &active, x);
            } else {
                let cur = nearest[x];
                if precedes(dist.get(x, a), x, a, dist.get(x, cur), x, cur) {
                    nearest[x] = a;
                }
            }
        }
    }
    Dendrogram::from_merges(n, merges)
}

/// Sum of squared distances from each point to its cluster mean.
pub fn inertia(space: &DifferenceSpace, assignment: &ClusterAssignment) -> f64 {
    assignment
        .members
        .iter()
        .map(|m| {
            let c = centroid(space, m);
            m.iter().map(|&p| squared_distance(space.vector(p), &c)).sum::<f64>()
        })
        .sum()
}

pub const KMEANS_MAX_ITER: usize = 300;

/// Lloyd's algorithm from a greedy k-means++ initialization.
pub fn kmeans(space: &DifferenceSpace, k: usize, seed: u64) -> Result<ClusterAssignment, ClusterError> {
    let n = space.len();
    if k < 2 || k > n {
        return Err(ClusterError::KOutOfRange { k, lo: 2, hi: n });
    }
    let mut rng = rng::stream(seed, "kmeans", &[]);
    let mut centers = greedy_kmeans_pp(space, k, &mut rng);
    let mut labels = vec![usize::MAX; n];

    for _ in 0..KMEANS_MAX_ITER {
        let next: Vec<usize> = (0..n).map(|p| closest_center(space.vector(p), &centers).0).collect();
        let changed = next != labels;
        labels = next;
        repair_empty(space, &mut labels, &mut centers);
        if !changed {
            break;
        }
        recompute_centers(space, &labels, &mut centers);
    }
    repair_empty(space, &mut labels, &mut centers);
    Ok(ClusterAssignment::from_labels(&labels))
}

fn closest_center(v: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.iter().enumerate() {
        let d = squared_distance(v, center);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn greedy_kmeans_pp<R: Rng>(space: &DifferenceSpace, k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let n = space.len();
    let trials = 2 + (k as f64).ln().floor() as usize;
    let first = rng.random_range(0..n);
    let mut centers = vec![space.vector(first).to_vec()];
    let mut potential: Vec<f64> = (0..n).map(|p| squared_distance(space.vector(p), &centers[0])).collect();

    while centers.len() < k {
        let total: f64 = potential.iter().sum();
        let mut best: Option<(usize, f64, Vec<f64>)> = None;
        for _ in 0..trials {
            let candidate = if total > 0.0 {
                let target = rng.random::<f64>() * total;
                let mut acc = 0.0;
                let mut pick = n - 1;
                for (p, &w) in potential.iter().enumerate() {
                    acc += w;
                    if acc > target && w > 0.0 {
                        pick = p;
                        break;
                    }
                }
                pick
            } else {
                rng.random_range(0..n)
            };
            let updated: Vec<f64> = potential
                .iter()
                .enumerate()
                .map(|(p, &d)| d.min(squared_distance(space.vector(p), space.vector(candidate))))
                .collect();
            let score: f64 = updated.iter().sum();
            if best.as_ref().is_none_or(|b| score < b.1) {
                best = Some((candidate, score, updated));
            }
        }
        let (chosen, _, updated) = best.expect("at least two trials");
        centers.push(space.vector(chosen).to_vec());
        potential = updated;
    }
    centers
}

fn recompute_centers(space: &DifferenceSpace, labels: &[usize], centers: &mut [Vec<f64>]) {
    let dim = space.dim();
    let mut sums = vec![vec![0.0; dim]; centers.len()];
    let mut counts = vec![0usize; centers.len()];
    for (p, &c) in labels.iter().enumerate() {
        counts[c] += 1;
        for (s, x) in sums[c].iter_mut().zip(space.vector(p)) {
            *s += x;
        }
    }
    for (c, center) in centers.iter_mut().enumerate() {
        if counts[c] > 0 {
            for (dst, s) in center.iter_mut().zip(&sums[c]) {
                *dst = s / counts[c] as f64;
            }
        }
    }
}

/// Moves the point farthest from its center (among clusters with more than
/// one member) into each empty cluster.
fn repair_empty(space: &DifferenceSpace, labels: &mut [usize], centers: &mut [Vec<f64>]) {
    loop {
        let mut counts = vec![0usize; centers.len()];
        for &c in labels.iter() {
            counts[c] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let mut far = None;
        let mut far_d = f64::NEG_INFINITY;
        for (p, &c) in labels.iter().enumerate() {
            if counts[c] < 2 {
                continue;
            }
            let d = squared_distance(space.vector(p), &centers[c]);
            if d > far_d {
                far = Some(p);
                far_d = d;
            }
        }
        let p = far.expect("k <= n guarantees a donor cluster");
        labels[p] = empty;
        centers[empty] = space.vector(p).to_vec();
    }
}

fn centroid(space: &DifferenceSpace, members: &[usize]) -> Vec<f64> {
    let mut c = vec![0.0; space.dim()];
    for &p in members {
        for (dst, x) in c.iter_mut().zip(space.vector(p)) {
            *dst += x;
        }
    }
    let m = members.len() as f64;
    c.iter_mut().for_each(|x| *x /= m);
    c
}

/// How a single example is picked from a cluster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Representative {
    /// Member closest in cosine distance to the cluster mean.
    #[default]
    CosineCenter,
    EuclideanCenter,
    MaxNorm,
    Random(u64),
}

impl std::str::FromStr for Representative {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cosine-center" => Ok(Representative::CosineCenter),
            "euclidean-center" => Ok(Representative::EuclideanCenter),
            "max-norm" => Ok(Representative::MaxNorm),
            "random" => Ok(Representative::Random(0)),
            other => match other.strip_prefix("random:") {
                Some(seed) => seed
                    .parse()
                    .map(Representative::Random)
                    .map_err(|e| format!("bad random seed {seed:?}: {e}")),
                None => Err(format!("unknown representative strategy {other:?}")),
            },
        }
    }
}

impl std::fmt::Display for Representative {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Representative::CosineCenter => f.write_str("cosine-center"),
            Representative::EuclideanCenter => f.write_str("euclidean-center"),
            Representative::MaxNorm => f.write_str("max-norm"),
            Representative::Random(seed) => write!(f, "random:{seed}"),
        }
    }
}

impl TryFrom<String> for Representative {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Representative> for String {
    fn from(r: Representative) -> Self {
        r.to_string()
    }
}

const ZERO_CENTROID: f64 = 1e-12;

/// Picks one member position of a cluster.
///
/// # Panics
///
/// Panics if `members` is empty.
pub fn representative(space: &DifferenceSpace, members: &[usize], strategy: Representative) -> usize {
    assert!(!members.is_empty(), "representative of an empty cluster");
    if members.len() == 1 {
        return members[0];
    }
    let argmin = |score: &dyn Fn(usize) -> f64| -> usize {
        let mut best = members[0];
        let mut best_s = score(best);
        for &p in &members[1..] {
            let s = score(p);
            if s < best_s || (s == best_s && p < best) {
                best = p;
                best_s = s;
            }
        }
        best
    };
    match strategy {
        Representative::CosineCenter => {
            let c = centroid(space, members);
            if euclidean_norm(&c) < ZERO_CENTROID {
                argmin(&|p| squared_distance(space.vector(p), &c))
            } else {
                argmin(&|p| cosine_distance(space.vector(p), &c))
            }
        }
        Representative::EuclideanCenter => {
            let c = centroid(space, members);
            argmin(&|p| squared_distance(space.vector(p), &c))
        }
        Representative::MaxNorm => argmin(&|p| -space.norms()[p]),
        Representative::Random(seed) => {
            let mut sorted = members.to_vec();
            sorted.sort_unstable();
            let mut r = rng::stream(seed, "representative", &[sorted[0] as u64]);
            sorted[r.random_range(0..sorted.len())]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vectors::SpaceMode;

    fn space(rows: &[&[f64]]) -> DifferenceSpace {
        DifferenceSpace::from_rows(
            (0..rows.len()).map(|i| i.to_string()).collect(),
            rows.iter().map(|r| r.to_vec()).collect(),
            SpaceMode::Subtract,
        )
        .unwrap()
    }

    #[test]
    fn well_separated_points() {
        let s = space(&[&[0.0], &[0.1], &[10.0]]);
        let d = build_dendrogram(&s, Linkage::WardEuclidean).unwrap();
        assert_eq!((d.merges()[0].left, d.merges()[0].right), (0, 1));
        assert!((d.merges()[0].height - 0.1).abs() < 1e-12);
        let cut = d.cut(2).unwrap();
        assert_eq!(cut.members, vec![vec![0, 1], vec![2]]);
        let split = d.split_next(2).unwrap();
        assert_eq!(split.parent, vec![0, 1]);
        assert_eq!(split.children, [vec![0], vec![1]]);
    }

    #[test]
    fn ward_height_matches_centroid_formula() {
        // {0, 0.1} merged with {10}: sqrt(2 * 2 * 1 / 3) * |0.05 - 10|
        let s = space(&[&[0.0], &[0.1], &[10.0]]);
        let d = build_dendrogram(&s, Linkage::WardEuclidean).unwrap();
        let expected = (4.0f64 / 3.0).sqrt() * 9.95;
        assert!((d.merges()[1].height - expected).abs() < 1e-9);
    }

    #[test]
    fn extreme_cuts() {
        let s = space(&[&[0.0, 1.0], &[3.0, 1.0], &[0.5, 0.5], &[9.0, 9.0]]);
        let d = build_dendrogram(&s, Linkage::WardEuclidean).unwrap();
        assert_eq!(d.cut(1).unwrap().members, vec![vec![0, 1, 2, 3]]);
        let all = d.cut(4).unwrap();
        assert_eq!(all.members, vec![vec![0], vec![1], vec![2], vec![3]]);
        assert!(matches!(d.cut(0), Err(ClusterError::KOutOfRange { .. })));
        assert!(matches!(d.cut(5), Err(ClusterError::KOutOfRange { .. })));
        assert!(d.split_next(4).is_err());
        let root = d.split_next(1).unwrap();
        assert_eq!(root.parent, vec![0, 1, 2, 3]);
        assert_eq!(root.parent_node, d.root());
    }

    #[test]
    fn too_few_vectors() {
        let s = space(&[&[1.0], &[2.0]]).subset(&[0]);
        assert_eq!(
            build_dendrogram(&s, Linkage::WardEuclidean),
            Err(ClusterError::TooFewVectors(1))
        );
    }

    #[test]
    fn exact_ties_prefer_smallest_position() {
        // Equidistant points on a line: every adjacent pair is tied.
        let s = space(&[&[0.0], &[1.0], &[2.0], &[3.0]]);
        let d = build_dendrogram(&s, Linkage::WardEuclidean).unwrap();
        assert_eq!((d.merges()[0].left, d.merges()[0].right), (0, 1));
        assert_eq!((d.merges()[1].left, d.merges()[1].right), (2, 3));
    }

    #[test]
    fn average_cosine_groups_directions() {
        let s = space(&[&[1.0, 0.0], &[0.0, 1.0], &[2.0, 0.1], &[0.1, 3.0]]);
        let d = build_dendrogram(&s, Linkage::AverageCosine).unwrap();
        assert_eq!(d.cut(2).unwrap().members, vec![vec![0, 2], vec![1, 3]]);
        assert!(d.merges().iter().all(|m| m.height >= 0.0 && m.height.is_finite()));
    }

    #[test]
    fn dendrogram_json_round_trip_validates() {
        let s = space(&[&[0.0], &[0.1], &[10.0]]);
        let d = build_dendrogram(&s, Linkage::WardEuclidean).unwrap();
        let text = serde_json::to_string(&d).unwrap();
        assert!(text.starts_with("{\"n_leaves\":3,\"merges\":["));
        let back: Dendrogram = serde_json::from_str(&text).unwrap();
        assert_eq!(back, d);
        let broken = r#"{"n_leaves":3,"merges":[{"left":0,"right":1,"height":0.1,"size":2},{"left":0,"right":2,"height":1.0,"size":3}]}"#;
        assert!(serde_json::from_str::<Dendrogram>(broken).is_err());
    }

    #[test]
    fn representative_of_singleton() {
        let s = space(&[&[1.0, 0.0], &[0.0, 1.0]]);
        for strategy in [
            Representative::CosineCenter,
            Representative::EuclideanCenter,
            Representative::MaxNorm,
            Representative::Random(3),
        ] {
            assert_eq!(representative(&s, &[1], strategy), 1);
        }
    }

    #[test]
    fn cosine_center_prefers_smaller_angle() {
        let s = space(&[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]);
        let r = representative(&s, &[0, 1, 2], Representative::CosineCenter);
        assert_eq!(r, 0);
    }

    #[test]
    fn zero_centroid_falls_back_to_euclidean() {
        let s = space(&[&[1.0, 0.0], &[-1.0, 0.0], &[0.0, 0.1], &[0.0, -0.1]]);
        let r = representative(&s, &[0, 1, 2, 3], Representative::CosineCenter);
        assert_eq!(r, 2);
    }

    #[test]
    fn zero_member_is_least_preferred() {
        let s = space(&[&[0.0, 0.0], &[1.0, 0.0], &[1.0, 0.5]]);
        assert_eq!(representative(&s, &[0, 1, 2], Representative::CosineCenter), 2);
    }

    #[test]
    fn max_norm_ties_break_low() {
        let s = space(&[&[1.0, 0.0], &[0.0, 2.0], &[2.0, 0.0]]);
        assert_eq!(representative(&s, &[2, 0, 1], Representative::MaxNorm), 1);
    }

    #[test]
    fn representative_strategy_parsing() {
        for text in ["cosine-center", "euclidean-center", "max-norm", "random:17"] {
            let r: Representative = text.parse().unwrap();
            assert_eq!(r.to_string(), text);
        }
        assert!("nearest".parse::<Representative>().is_err());
    }

    #[test]
    fn kmeans_singletons() {
        let s = space(&[&[0.0], &[1.0], &[5.0], &[7.5]]);
        let a = kmeans(&s, 4, 1).unwrap();
        assert_eq!(a.k, 4);
        assert_eq!(inertia(&s, &a), 0.0);
    }

    #[test]
    fn kmeans_with_duplicates_keeps_k_clusters() {
        let s = space(&[&[1.0], &[1.0], &[1.0], &[2.0]]);
        let a = kmeans(&s, 3, 5).unwrap();
        assert_eq!(a.k, 3);
        assert!(a.members.iter().all(|m| !m.is_empty()));
    }

    #[test]
    fn kmeans_range() {
        let s = space(&[&[0.0], &[1.0], &[5.0]]);
        assert!(kmeans(&s, 1, 0).is_err());
        assert!(kmeans(&s, 4, 0).is_err());
    }
}
