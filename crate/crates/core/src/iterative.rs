//! Risk-thresholded iterative annotation.
//!
//! A session starts from `n_min` clusters of the difference-vector
//! dendrogram and asks the oracle about one representative per cluster.
//! While the hypergeometric risk of the current vote exceeds `p`, the next
//! cluster in dendrogram order is split: its old representative leaves the
//! vote and the two child representatives join it. The loop stops once the
//! risk is at most `p` or the budget cannot fund another split.
//!
//! All state changes go through [`SessionState::apply`], so a session is a
//! pure fold over its [`SessionEvent`] log and can be replayed after a crash.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::{build_dendrogram, representative, ClusterError, Dendrogram, Linkage, Representative};
use crate::estimator::{risk_from_counts, Counts, Preference, WinStats};
use crate::oracle::{Oracle, OracleError};
use crate::rng;
use crate::vectors::DifferenceSpace;

#[derive(Debug, Error)]
pub enum IterativeError {
    #[error("invalid session config: {0}")]
    InvalidConfig(String),
    #[error("pool of {pool} is smaller than the minimum of {n_min} annotations")]
    PoolTooSmall { pool: usize, n_min: usize },
    #[error("label for {0:?}, which is not pending")]
    NotPending(String),
    #[error("no label for pending example {0:?}")]
    MissingLabel(String),
    #[error("{0} labels are still pending")]
    PendingLabels(usize),
    #[error("session is not awaiting labels")]
    NotAwaiting,
    #[error("event log: {0}")]
    Replay(String),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error("oracle failed: {0}")]
    OracleFailed(OracleError),
    #[error("oracle failed: {source}")]
    Oracle {
        source: OracleError,
        /// Session state at the time of failure; resume with `submit_labels`.
        state: Box<SessionState>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    /// Risk threshold in (0, 1).
    pub p: f64,
    pub n_min: usize,
    pub b_max: usize,
    #[serde(default)]
    pub representative: Representative,
    #[serde(default)]
    pub linkage: Linkage,
    #[serde(default)]
    pub seed: u64,
}

impl SessionConfig {
    pub fn new(p: f64, n_min: usize, b_max: usize) -> Self {
        SessionConfig {
            p,
            n_min,
            b_max,
            representative: Representative::default(),
            linkage: Linkage::default(),
            seed: 0,
        }
    }

    pub fn validate(&self, pool: usize) -> Result<(), IterativeError> {
        if !(self.p > 0.0 && self.p < 1.0) {
            return Err(IterativeError::InvalidConfig(format!("p = {} not in (0, 1)", self.p)));
        }
        if self.n_min == 0 || self.n_min > self.b_max {
            return Err(IterativeError::InvalidConfig(format!(
                "need 1 <= n_min <= b_max, got n_min = {}, b_max = {}",
                self.n_min, self.b_max
            )));
        }
        if pool < self.n_min {
            return Err(IterativeError::PoolTooSmall {
                pool,
                n_min: self.n_min,
            });
        }
        if self.b_max > pool {
            return Err(IterativeError::InvalidConfig(format!(
                "b_max = {} exceeds pool of {pool}",
                self.b_max
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SessionStatus {
    AwaitingLabels,
    ConcludedWinnerA,
    ConcludedWinnerB,
    Inconclusive,
}

impl SessionStatus {
    pub fn is_terminal(self) -> bool {
        self != SessionStatus::AwaitingLabels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    A,
    B,
    #[serde(rename = "inconclusive")]
    Inconclusive,
}

impl std::fmt::Display for Outcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Outcome::A => "A",
            Outcome::B => "B",
            Outcome::Inconclusive => "inconclusive",
        })
    }
}

/// A cluster of the current cut and the example voting for it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActiveCluster {
    pub node: usize,
    pub representative: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SessionEvent {
    Created {
        config: SessionConfig,
        pool_size: usize,
        k: usize,
        clusters: Vec<ActiveCluster>,
    },
    BatchIssued {
        ids: Vec<String>,
    },
    LabelReceived {
        id: String,
        label: Preference,
    },
    Split {
        k: usize,
        parent: usize,
        discarded: String,
        children: [ActiveCluster; 2],
    },
    Concluded {
        winner: Preference,
        risk: f64,
    },
    Inconclusive {
        risk: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub config: SessionConfig,
    pub pool_size: usize,
    pub dendrogram: Dendrogram,
    pub k: usize,
    /// Current cut, ordered by smallest member position.
    pub clusters: Vec<ActiveCluster>,
    /// Every oracle answer so far, including discarded representatives.
    pub annotations: BTreeMap<String, Preference>,
    pub pending: Vec<String>,
    pub annotated_count: usize,
    pub status: SessionStatus,
    pub current_risk: f64,
}

impl SessionState {
    /// Clusters the pool and issues the first batch of `n_min` representatives.
    pub fn start(space: &DifferenceSpace, config: SessionConfig) -> Result<(Self, Vec<SessionEvent>), IterativeError> {
        config.validate(space.len())?;
        let dendrogram = build_dendrogram(space, config.linkage)?;
        let clusters = dendrogram
            .cut_nodes(config.n_min)?
            .into_iter()
            .map(|node| ActiveCluster {
                node,
                representative: space.ids()[representative(space, &dendrogram.members(node), config.representative)]
                    .clone(),
            })
            .collect();
        let created = SessionEvent::Created {
            k: config.n_min,
            config,
            pool_size: space.len(),
            clusters,
        };
        let mut state = Self::from_created(&created, dendrogram)?;
        let events = std::iter::once(created).chain(state.settle(space)?).collect();
        Ok((state, events))
    }

    fn from_created(event: &SessionEvent, dendrogram: Dendrogram) -> Result<Self, IterativeError> {
        let SessionEvent::Created {
            config,
            pool_size,
            clusters,
            ..
        } = event
        else {
            return Err(IterativeError::Replay("log must start with a created event".into()));
        };
        if dendrogram.n_leaves() != *pool_size {
            return Err(IterativeError::Replay(format!(
                "log was created for a pool of {pool_size}, got {}",
                dendrogram.n_leaves()
            )));
        }
        Ok(SessionState {
            config: config.clone(),
            pool_size: *pool_size,
            dendrogram,
            k: clusters.len(),
            clusters: clusters.clone(),
            annotations: BTreeMap::new(),
            pending: Vec::new(),
            annotated_count: 0,
            status: SessionStatus::AwaitingLabels,
            current_risk: 1.0,
        })
    }

    /// Rebuilds a session from its event log.
    pub fn replay<'a, I>(space: &DifferenceSpace, events: I) -> Result<Self, IterativeError>
    where
        I: IntoIterator<Item = &'a SessionEvent>,
    {
        let mut events = events.into_iter();
        let first = events
            .next()
            .ok_or_else(|| IterativeError::Replay("empty event log".into()))?;
        let SessionEvent::Created { config, .. } = first else {
            return Err(IterativeError::Replay("log must start with a created event".into()));
        };
        let dendrogram = build_dendrogram(space, config.linkage)?;
        let mut state = Self::from_created(first, dendrogram)?;
        for event in events {
            state.apply(event)?;
        }
        Ok(state)
    }

    /// Examples whose labels currently vote.
    pub fn decision_set(&self) -> Vec<String> {
        self.clusters.iter().map(|c| c.representative.clone()).collect()
    }

    pub fn decision_counts(&self) -> Counts {
        Counts::from_labels(
            self.clusters
                .iter()
                .filter_map(|c| self.annotations.get(&c.representative).copied()),
        )
    }

    pub fn decision_stats(&self) -> Option<WinStats> {
        WinStats::from_counts(self.decision_counts()).ok()
    }

    pub fn outcome(&self) -> Option<Outcome> {
        match self.status {
            SessionStatus::AwaitingLabels => None,
            SessionStatus::ConcludedWinnerA => Some(Outcome::A),
            SessionStatus::ConcludedWinnerB => Some(Outcome::B),
            SessionStatus::Inconclusive => Some(Outcome::Inconclusive),
        }
    }

    fn unlabeled_decision_members(&self) -> Vec<String> {
        self.clusters
            .iter()
            .filter(|c| !self.annotations.contains_key(&c.representative))
            .map(|c| c.representative.clone())
            .collect()
    }

    /// The single state transition function.
    pub fn apply(&mut self, event: &SessionEvent) -> Result<(), IterativeError> {
        let fail = |msg: String| Err(IterativeError::Replay(msg));
        if self.status.is_terminal() {
            return fail(format!("event after termination: {event:?}"));
        }
        match event {
            SessionEvent::Created { .. } => return fail("duplicate created event".into()),
            SessionEvent::BatchIssued { ids } => {
                if !self.pending.is_empty() {
                    return fail("batch issued while labels are pending".into());
                }
                self.pending = ids.clone();
            }
            SessionEvent::LabelReceived { id, label } => {
                let Some(i) = self.pending.iter().position(|p| p == id) else {
                    return fail(format!("label for non-pending {id:?}"));
                };
                self.pending.remove(i);
                self.annotations.insert(id.clone(), *label);
                self.annotated_count = self.annotations.len();
            }
            SessionEvent::Split {
                k,
                parent,
                discarded,
                children,
            } => {
                if *k != self.k + 1 {
                    return fail(format!("split to k = {k} from k = {}", self.k));
                }
                let Some(i) = self.clusters.iter().position(|c| c.node == *parent) else {
                    return fail(format!("split of inactive node {parent}"));
                };
                if &self.clusters[i].representative != discarded {
                    return fail(format!("split discards {discarded:?}, not the representative"));
                }
                self.clusters.remove(i);
                self.clusters.extend(children.iter().cloned());
                let dendrogram = &self.dendrogram;
                self.clusters.sort_by_key(|c| dendrogram.first_leaf(c.node));
                self.k = *k;
            }
            SessionEvent::Concluded { winner, .. } => {
                self.status = match winner {
                    Preference::A => SessionStatus::ConcludedWinnerA,
                    Preference::B => SessionStatus::ConcludedWinnerB,
                    Preference::Tie => return fail("concluded with a tie".into()),
                };
            }
            SessionEvent::Inconclusive { .. } => self.status = SessionStatus::Inconclusive,
        }
        if self.pending.is_empty() && self.unlabeled_decision_members().is_empty() {
            // all-tie votes carry no evidence
            self.current_risk = risk_from_counts(self.decision_counts(), self.pool_size as u64).unwrap_or(1.0);
        }
        Ok(())
    }

    fn emit(&mut self, event: SessionEvent, out: &mut Vec<SessionEvent>) -> Result<(), IterativeError> {
        self.apply(&event)?;
        out.push(event);
        Ok(())
    }

    /// Ingests one label per pending example, then advances until new labels
    /// are needed or the session ends.
    pub fn submit_labels(
        &mut self,
        space: &DifferenceSpace,
        labels: &BTreeMap<String, Preference>,
    ) -> Result<Vec<SessionEvent>, IterativeError> {
        if self.status.is_terminal() {
            return Err(IterativeError::NotAwaiting);
        }
        if let Some(id) = labels.keys().find(|id| !self.pending.contains(id)) {
            return Err(IterativeError::NotPending(id.clone()));
        }
        if let Some(id) = self.pending.iter().find(|id| !labels.contains_key(*id)) {
            return Err(IterativeError::MissingLabel(id.clone()));
        }
        let mut events = Vec::new();
        for id in self.pending.clone() {
            let label = labels[&id];
            self.emit(SessionEvent::LabelReceived { id, label }, &mut events)?;
        }
        events.extend(self.settle(space)?);
        Ok(events)
    }

    /// Runs [`advance`](Self::advance) until labels are pending or the session ends.
    pub fn settle(&mut self, space: &DifferenceSpace) -> Result<Vec<SessionEvent>, IterativeError> {
        let mut events = Vec::new();
        while !self.status.is_terminal() && self.pending.is_empty() {
            events.extend(self.advance(space)?);
        }
        Ok(events)
    }

    /// One step of the stopping rule: conclude, give up, or split the next
    /// cluster. Representatives that still need labels are issued as a batch.
    pub fn advance(&mut self, space: &DifferenceSpace) -> Result<Vec<SessionEvent>, IterativeError> {
        if self.status.is_terminal() {
            return Err(IterativeError::NotAwaiting);
        }
        if !self.pending.is_empty() {
            return Err(IterativeError::PendingLabels(self.pending.len()));
        }
        let mut events = Vec::new();
        let unlabeled = self.unlabeled_decision_members();
        if !unlabeled.is_empty() {
            self.emit(SessionEvent::BatchIssued { ids: unlabeled }, &mut events)?;
            return Ok(events);
        }

        let risk = self.current_risk;
        if risk <= self.config.p {
            let winner = self.decision_stats().map(|s| s.winner).unwrap_or(Preference::Tie);
            let event = if winner == Preference::Tie {
                SessionEvent::Inconclusive { risk }
            } else {
                SessionEvent::Concluded { winner, risk }
            };
            self.emit(event, &mut events)?;
            return Ok(events);
        }
        if self.annotated_count + 2 > self.config.b_max || self.k >= self.pool_size {
            self.emit(SessionEvent::Inconclusive { risk }, &mut events)?;
            return Ok(events);
        }

        let split = self.dendrogram.split_next(self.k)?;
        let discarded = self
            .clusters
            .iter()
            .find(|c| c.node == split.parent_node)
            .map(|c| c.representative.clone())
            .ok_or_else(|| IterativeError::Replay(format!("node {} is not in the current cut", split.parent_node)))?;
        let child = |i: usize| ActiveCluster {
            node: split.child_nodes[i],
            representative: space.ids()[representative(space, &split.children[i], self.config.representative)].clone(),
        };
        let children = [child(0), child(1)];
        self.emit(
            SessionEvent::Split {
                k: self.k + 1,
                parent: split.parent_node,
                discarded,
                children,
            },
            &mut events,
        )?;
        let unlabeled = self.unlabeled_decision_members();
        if !unlabeled.is_empty() {
            self.emit(SessionEvent::BatchIssued { ids: unlabeled }, &mut events)?;
        }
        Ok(events)
    }
}

#[derive(Debug, Clone)]
pub struct IterativeRun {
    pub state: SessionState,
    pub events: Vec<SessionEvent>,
    pub outcome: Outcome,
    pub annotated_count: usize,
}

/// Drives a session to termination with a programmatic oracle.
pub fn run_iterative<O: Oracle + ?Sized>(
    space: &DifferenceSpace,
    config: SessionConfig,
    oracle: &mut O,
) -> Result<IterativeRun, IterativeError> {
    let (mut state, mut events) = SessionState::start(space, config)?;
    while !state.status.is_terminal() {
        let batch = state.pending.clone();
        let answers = match oracle.label(&batch) {
            Ok(a) if a.len() == batch.len() => a,
            Ok(a) => {
                let source = OracleError::Failed(format!("{} answers for {} examples", a.len(), batch.len()));
                return Err(IterativeError::Oracle {
                    source,
                    state: Box::new(state),
                });
            }
            Err(source) => {
                return Err(IterativeError::Oracle {
                    source,
                    state: Box::new(state),
                })
            }
        };
        let labels = batch.into_iter().zip(answers).collect();
        events.extend(state.submit_labels(space, &labels)?);
    }
    let outcome = state.outcome().expect("terminal");
    let annotated_count = state.annotated_count;
    Ok(IterativeRun {
        state,
        events,
        outcome,
        annotated_count,
    })
}

/// Result of the random-order baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomRun {
    pub outcome: Outcome,
    pub annotated_count: usize,
    pub risk: f64,
    pub counts: Counts,
}

/// Baseline with the same stopping rule: examples are annotated in a seeded
/// random order, `n_min` first and then two per round, and all of them vote.
pub fn run_iterative_random<O: Oracle + ?Sized>(
    pool: &[String],
    config: &SessionConfig,
    oracle: &mut O,
) -> Result<RandomRun, IterativeError> {
    config.validate(pool.len())?;
    let mut order: Vec<usize> = (0..pool.len()).collect();
    {
        use rand::seq::SliceRandom;
        let mut r = rng::stream(config.seed, "iterative-random", &[]);
        order.shuffle(&mut r);
    }
    let mut counts = Counts::default();
    let mut next = 0;
    let mut take = |n: usize, counts: &mut Counts, next: &mut usize| -> Result<(), IterativeError> {
        let ids: Vec<String> = order[*next..*next + n].iter().map(|&p| pool[p].clone()).collect();
        *next += n;
        let labels = oracle.label(&ids).map_err(IterativeError::OracleFailed)?;
        counts.extend(labels);
        Ok(())
    };
    take(config.n_min, &mut counts, &mut next)?;
    loop {
        let risk = risk_from_counts(counts, pool.len() as u64).unwrap_or(1.0);
        if risk <= config.p {
            let outcome = match WinStats::from_counts(counts).map(|s| s.winner) {
                Ok(Preference::A) => Outcome::A,
                Ok(Preference::B) => Outcome::B,
                _ => Outcome::Inconclusive,
            };
            return Ok(RandomRun {
                outcome,
                annotated_count: next,
                risk,
                counts,
            });
        }
        if next + 2 > config.b_max || next + 2 > pool.len() {
            return Ok(RandomRun {
                outcome: Outcome::Inconclusive,
                annotated_count: next,
                risk,
                counts,
            });
        }
        take(2, &mut counts, &mut next)?;
    }
}
