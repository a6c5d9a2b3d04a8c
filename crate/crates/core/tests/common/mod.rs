//! Slow, obviously-correct reference implementations used as test oracles.
#![allow(dead_code)]

use diffuse_core::vectors::{cosine_distance, squared_distance};
use diffuse_core::{Dendrogram, DifferenceSpace, SpaceMode};
use rand::Rng;
use rand_distr::StandardNormal;

pub fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("x{i:04}")).collect()
}

pub fn gaussian_rows<R: Rng>(rng: &mut R, n: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect())
        .collect()
}

pub fn space_of(rows: Vec<Vec<f64>>) -> DifferenceSpace {
    DifferenceSpace::from_rows(ids(rows.len()), rows, SpaceMode::Raw).unwrap()
}

pub fn random_space<R: Rng>(rng: &mut R, n: usize, dim: usize) -> DifferenceSpace {
    space_of(gaussian_rows(rng, n, dim))
}

/// Well-separated Gaussian blobs; returns the rows and each row's blob.
pub fn blobs<R: Rng>(rng: &mut R, sizes: &[usize], dim: usize, separation: f64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rows = Vec::new();
    let mut membership = Vec::new();
    for (b, &size) in sizes.iter().enumerate() {
        let mut center = vec![0.0; dim];
        center[b % dim] = separation * (1 + b / dim) as f64;
        for _ in 0..size {
            rows.push(
                center
                    .iter()
                    .map(|c| c + rng.sample::<f64, _>(StandardNormal))
                    .collect(),
            );
            membership.push(b);
        }
    }
    (rows, membership)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefMerge {
    pub left: usize,
    pub right: usize,
    pub height: f64,
    pub size: usize,
}

struct Cluster {
    node: usize,
    members: Vec<usize>,
}

/// Agglomerates by recomputing every pairwise cluster distance at each step.
/// Candidates are ordered by distance, then by the pair of smallest member
/// positions.
fn agglomerate(space: &DifferenceSpace, linkage: impl Fn(&[usize], &[usize]) -> f64) -> Vec<RefMerge> {
    let n = space.len();
    let mut clusters: Vec<Cluster> = (0..n)
        .map(|i| Cluster {
            node: i,
            members: vec![i],
        })
        .collect();
    let mut merges = Vec::new();
    while clusters.len() > 1 {
        let mut best: Option<(f64, usize, usize, usize, usize)> = None;
        for a in 0..clusters.len() {
            for b in a + 1..clusters.len() {
                let d = linkage(&clusters[a].members, &clusters[b].members);
                let sa = clusters[a].members[0];
                let sb = clusters[b].members[0];
                let key = (d, sa.min(sb), sa.max(sb));
                let better = match best {
                    None => true,
                    Some((bd, b0, b1, _, _)) => key.0 < bd || (key.0 == bd && (key.1, key.2) < (b0, b1)),
                };
                if better {
                    best = Some((key.0, key.1, key.2, a, b));
                }
            }
        }
        let (d, _, _, a, b) = best.unwrap();
        let cb = clusters.remove(b);
        let ca = &mut clusters[a];
        merges.push(RefMerge {
            left: ca.node.min(cb.node),
            right: ca.node.max(cb.node),
            height: d,
            size: ca.members.len() + cb.members.len(),
        });
        ca.members.extend(cb.members);
        ca.members.sort_unstable();
        ca.node = n + merges.len() - 1;
    }
    merges
}

fn centroid(space: &DifferenceSpace, members: &[usize]) -> Vec<f64> {
    let mut c = vec![0.0; space.dim()];
    for &m in members {
        for (ci, x) in c.iter_mut().zip(space.vector(m)) {
            *ci += x;
        }
    }
    c.iter().map(|x| x / members.len() as f64).collect()
}

/// Ward distance from cluster centroids:
/// sqrt(2 |A| |B| / (|A| + |B|)) * |c_A - c_B|.
pub fn brute_ward(space: &DifferenceSpace) -> Vec<RefMerge> {
    agglomerate(space, |a, b| {
        let (na, nb) = (a.len() as f64, b.len() as f64);
        (2.0 * na * nb / (na + nb) * squared_distance(&centroid(space, a), &centroid(space, b))).sqrt()
    })
}

/// Mean cosine distance over all cross-cluster member pairs.
pub fn brute_average_cosine(space: &DifferenceSpace) -> Vec<RefMerge> {
    agglomerate(space, |a, b| {
        let total: f64 = a
            .iter()
            .flat_map(|&i| b.iter().map(move |&j| (i, j)))
            .map(|(i, j)| cosine_distance(space.vector(i), space.vector(j)))
            .sum();
        total / (a.len() * b.len()) as f64
    })
}

pub fn binomial(n: u64, k: u64) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut c: u128 = 1;
    for i in 0..k {
        c = c * (n - i) as u128 / (i + 1) as u128;
    }
    c
}

/// Exact upper tails by integer enumeration: entry `j` is the number of
/// size-`draws` samples with at least `j` successes, and the last value is
/// the total count of samples.
pub fn exact_tails(population: u64, successes: u64, draws: u64) -> (Vec<u128>, u128) {
    let total = binomial(population, draws);
    let mut tails = vec![0u128; draws as usize + 2];
    for j in (0..=draws).rev() {
        let ways = binomial(successes, j) * binomial(population - successes, draws - j);
        tails[j as usize] = tails[j as usize + 1] + ways;
    }
    (tails, total)
}

/// P(X > k_minus_1) for a hypergeometric X, exactly enumerated.
pub fn exact_sf(k_minus_1: i64, population: u64, successes: u64, draws: u64) -> f64 {
    let (tails, total) = exact_tails(population, successes, draws);
    let j = (k_minus_1 + 1).max(0) as usize;
    ratio(tails.get(j).copied().unwrap_or(0), total)
}

/// Quotient of two integers below 2^113, good to a few ulps.
pub fn ratio(num: u128, den: u128) -> f64 {
    num as f64 / den as f64
}

fn set_of(members: &[Vec<usize>]) -> std::collections::BTreeSet<Vec<usize>> {
    members.iter().cloned().collect()
}

/// Checks that each cut refines the previous one by splitting exactly one
/// cluster in two, and that `split_next` names that cluster.
pub fn check_refinement_chain(d: &Dendrogram) {
    let n = d.n_leaves();
    let mut prev = set_of(&d.cut(1).unwrap().members);
    for k in 1..n {
        let next_assignment = d.cut(k + 1).unwrap();
        assert_eq!(next_assignment.k, k + 1);
        let next = set_of(&next_assignment.members);
        let gone: Vec<_> = prev.difference(&next).cloned().collect();
        let new: Vec<_> = next.difference(&prev).cloned().collect();
        assert_eq!(gone.len(), 1, "k={k}");
        assert_eq!(new.len(), 2, "k={k}");
        let mut union: Vec<usize> = new.concat();
        union.sort_unstable();
        assert_eq!(union, gone[0], "k={k}");
        let split = d.split_next(k).unwrap();
        let mut parent = split.parent.clone();
        parent.sort_unstable();
        assert_eq!(parent, gone[0]);
        let mut children: Vec<Vec<usize>> = split
            .children
            .iter()
            .map(|c| {
                let mut c = c.clone();
                c.sort_unstable();
                c
            })
            .collect();
        children.sort();
        let mut expected = new.clone();
        expected.sort();
        assert_eq!(children, expected, "k={k}");
        prev = next;
    }
    assert!(prev.iter().all(|c| c.len() == 1));
}
