//! Annotation-efficient comparison of two text-generation models.
//!
//! Output embeddings of the two models are subtracted per example, the
//! difference vectors are clustered, and one representative per cluster is
//! sent to a preference oracle. The iterative variant keeps splitting
//! clusters until a hypergeometric risk bound says the leader is unlikely to
//! be a fluke.

pub mod clustering;
pub mod estimator;
pub mod harness;
pub mod iterative;
pub mod oracle;
pub mod rng;
pub mod selection;
pub mod synth;
pub mod vectors;

pub use clustering::{build_dendrogram, ClusterAssignment, Dendrogram, Linkage, Merge, Representative};
pub use estimator::{hypergeom_sf, risk, winning_stats, Counts, Preference, WinStats};
pub use iterative::{run_iterative, Outcome, SessionConfig, SessionEvent, SessionState, SessionStatus};
pub use oracle::{Oracle, ScoreTable};
pub use selection::{select_diffuse, select_input_cluster, select_max_norm, select_random, SelectionPlan, Strategy};
pub use vectors::{pair_space, DifferenceSpace, EmbeddingFormat, EmbeddingMatrix, SpaceMode};
