//! Budgeted example selection: cluster-based selection over difference
//! vectors, and the random, max-norm, and input-clustering baselines.

use std::collections::BTreeMap;

use rand::seq::index;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::{
    build_dendrogram, kmeans, representative, ClusterAssignment, ClusterError, Dendrogram, Linkage, Representative,
};
use crate::rng;
use crate::vectors::{DifferenceSpace, EmbeddingMatrix, SpaceMode};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SelectionError {
    #[error("budget {budget} exceeds pool of {pool}")]
    BudgetExceedsPool { budget: usize, pool: usize },
    #[error("budget must be positive")]
    ZeroBudget,
    #[error(transparent)]
    Cluster(#[from] ClusterError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Diffuse,
    Random,
    MaxNorm,
    InputCluster,
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "diffuse" => Ok(Strategy::Diffuse),
            "random" => Ok(Strategy::Random),
            "max-norm" => Ok(Strategy::MaxNorm),
            "input-cluster" => Ok(Strategy::InputCluster),
            other => Err(format!("unknown strategy {other:?}")),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Strategy::Diffuse => "diffuse",
            Strategy::Random => "random",
            Strategy::MaxNorm => "max-norm",
            Strategy::InputCluster => "input-cluster",
        })
    }
}

/// Partitioning used by the cluster-based strategies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClusterMethod {
    #[default]
    WardEuclidean,
    AverageCosine,
    Kmeans,
}

impl std::str::FromStr for ClusterMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "kmeans" => Ok(ClusterMethod::Kmeans),
            other => other.parse::<Linkage>().map(ClusterMethod::from),
        }
    }
}

impl From<Linkage> for ClusterMethod {
    fn from(l: Linkage) -> Self {
        match l {
            Linkage::WardEuclidean => ClusterMethod::WardEuclidean,
            Linkage::AverageCosine => ClusterMethod::AverageCosine,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClusterOptions {
    #[serde(default)]
    pub method: ClusterMethod,
    #[serde(default)]
    pub representative: Representative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionPlan {
    pub strategy: Strategy,
    pub budget: usize,
    pub seed: u64,
    pub selected: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub cluster_of: Option<BTreeMap<String, usize>>,
}

fn check_budget(budget: usize, pool: usize) -> Result<(), SelectionError> {
    if budget == 0 {
        return Err(SelectionError::ZeroBudget);
    }
    if budget > pool {
        return Err(SelectionError::BudgetExceedsPool { budget, pool });
    }
    Ok(())
}

/// Partition of `space` into `k` clusters under `method`.
pub fn partition(
    space: &DifferenceSpace,
    k: usize,
    method: ClusterMethod,
    seed: u64,
) -> Result<ClusterAssignment, SelectionError> {
    check_budget(k, space.len())?;
    if k == space.len() {
        // all singletons; also avoids building a tree for a 1-element pool
        return Ok(ClusterAssignment::from_labels(&(0..k).collect::<Vec<_>>()));
    }
    if k == 1 {
        return Ok(ClusterAssignment::from_labels(&vec![0; space.len()]));
    }
    match method {
        ClusterMethod::WardEuclidean => Ok(build_dendrogram(space, Linkage::WardEuclidean)?.cut(k)?),
        ClusterMethod::AverageCosine => Ok(build_dendrogram(space, Linkage::AverageCosine)?.cut(k)?),
        ClusterMethod::Kmeans => Ok(kmeans(space, k, seed)?),
    }
}

/// One representative per cluster, in ascending cluster order.
pub fn plan_from_clusters(
    space: &DifferenceSpace,
    assignment: &ClusterAssignment,
    strategy: Strategy,
    rep: Representative,
    seed: u64,
) -> SelectionPlan {
    let selected = assignment
        .members
        .iter()
        .map(|m| space.ids()[representative(space, m, rep)].clone())
        .collect();
    let cluster_of = space
        .ids()
        .iter()
        .zip(&assignment.labels)
        .map(|(id, &c)| (id.clone(), c))
        .collect();
    SelectionPlan {
        strategy,
        budget: assignment.k,
        seed,
        selected,
        cluster_of: Some(cluster_of),
    }
}

/// Cuts a prebuilt dendrogram at `budget` and picks representatives. Lets
/// callers evaluate many budgets against one tree.
pub fn select_from_dendrogram(
    space: &DifferenceSpace,
    dendrogram: &Dendrogram,
    budget: usize,
    rep: Representative,
) -> Result<SelectionPlan, SelectionError> {
    check_budget(budget, space.len())?;
    let assignment = dendrogram.cut(budget)?;
    Ok(plan_from_clusters(space, &assignment, Strategy::Diffuse, rep, 0))
}

/// Clusters the difference vectors into `budget` groups and selects one
/// representative from each.
pub fn select_diffuse(
    space: &DifferenceSpace,
    budget: usize,
    options: ClusterOptions,
    seed: u64,
) -> Result<SelectionPlan, SelectionError> {
    let assignment = partition(space, budget, options.method, seed)?;
    Ok(plan_from_clusters(
        space,
        &assignment,
        Strategy::Diffuse,
        options.representative,
        seed,
    ))
}

/// Same flow as [`select_diffuse`] over the input embeddings themselves.
pub fn select_input_cluster(
    inputs: &EmbeddingMatrix,
    budget: usize,
    options: ClusterOptions,
    seed: u64,
) -> Result<SelectionPlan, SelectionError> {
    let space = DifferenceSpace::from_matrix(inputs, SpaceMode::Raw);
    let assignment = partition(&space, budget, options.method, seed)?;
    Ok(plan_from_clusters(
        &space,
        &assignment,
        Strategy::InputCluster,
        options.representative,
        seed,
    ))
}

/// Uniform sample without replacement; output in pool order.
pub fn select_random(pool: &[String], budget: usize, seed: u64) -> Result<SelectionPlan, SelectionError> {
    let positions = random_positions(pool.len(), budget, seed)?;
    Ok(SelectionPlan {
        strategy: Strategy::Random,
        budget,
        seed,
        selected: positions.into_iter().map(|p| pool[p].clone()).collect(),
        cluster_of: None,
    })
}

pub fn random_positions(pool: usize, budget: usize, seed: u64) -> Result<Vec<usize>, SelectionError> {
    check_budget(budget, pool)?;
    let mut rng = rng::stream(seed, "select-random", &[]);
    let mut positions = index::sample(&mut rng, pool, budget).into_vec();
    positions.sort_unstable();
    Ok(positions)
}

/// The `budget` largest-norm examples, ties to the smaller position; output
/// in pool order.
pub fn select_max_norm(space: &DifferenceSpace, budget: usize) -> Result<SelectionPlan, SelectionError> {
    check_budget(budget, space.len())?;
    let mut order: Vec<usize> = (0..space.len()).collect();
    let norms = space.norms();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
    let mut top = order[..budget].to_vec();
    top.sort_unstable();
    Ok(SelectionPlan {
        strategy: Strategy::MaxNorm,
        budget,
        seed: 0,
        selected: top.into_iter().map(|p| space.ids()[p].clone()).collect(),
        cluster_of: None,
    })
}
