//! Offline experiment protocols over score and embedding corpora.
//!
//! Every `(pair, seed)` job draws a test subset, labels it with the score
//! oracle, and compares selection strategies against the fully annotated
//! subset. Jobs are independent and run in parallel; aggregation happens
//! afterwards in job order, so results do not depend on scheduling.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::{build_dendrogram, ClusterError, Dendrogram, Linkage, Representative};
use crate::estimator::{Counts, Preference, WinStats};
use crate::iterative::{run_iterative, run_iterative_random, IterativeError, Outcome, SessionConfig};
use crate::oracle::{simulated_preference, OracleError, ScoreTable};
use crate::rng;
use crate::selection::{
    partition, plan_from_clusters, random_positions, select_from_dendrogram, select_max_norm, ClusterMethod,
    SelectionError, Strategy,
};
use crate::synth::SynthCorpus;
use crate::vectors::{pair_space, DifferenceSpace, EmbeddingFormat, EmbeddingMatrix, SpaceMode, VectorError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("no embeddings for model {0:?}")]
    MissingModel(String),
    #[error("input embeddings are required by the input-cluster strategy")]
    MissingInputs,
    #[error("{path}: {source}")]
    Vectors { path: PathBuf, source: VectorError },
    #[error("{path}: {source}")]
    Scores { path: PathBuf, source: OracleError },
    #[error(transparent)]
    Vector(#[from] VectorError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Iterative(#[from] IterativeError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelPair {
    pub model_a: String,
    pub model_b: String,
}

impl ModelPair {
    pub fn name(&self) -> String {
        format!("{}|{}", self.model_a, self.model_b)
    }
}

/// A strategy plus its options. In config files either a bare strategy name
/// or an object with `strategy`, `clustering`, `representative` and `label`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "StrategyRepr")]
pub struct StrategySpec {
    pub strategy: Strategy,
    pub clustering: ClusterMethod,
    pub representative: Representative,
    pub label: String,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum StrategyRepr {
    Name(Strategy),
    Full {
        strategy: Strategy,
        #[serde(default)]
        clustering: ClusterMethod,
        #[serde(default)]
        representative: Representative,
        #[serde(default)]
        label: Option<String>,
    },
}

impl From<StrategyRepr> for StrategySpec {
    fn from(r: StrategyRepr) -> Self {
        match r {
            StrategyRepr::Name(s) => StrategySpec::new(s),
            StrategyRepr::Full {
                strategy,
                clustering,
                representative,
                label,
            } => StrategySpec {
                strategy,
                clustering,
                representative,
                label: label.unwrap_or_else(|| strategy.to_string()),
            },
        }
    }
}

impl StrategySpec {
    pub fn new(strategy: Strategy) -> Self {
        Self {
            strategy,
            clustering: ClusterMethod::default(),
            representative: Representative::default(),
            label: strategy.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IterativeStrategy {
    Diffuse,
    Random,
}

impl std::fmt::Display for IterativeStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            IterativeStrategy::Diffuse => "diffuse",
            IterativeStrategy::Random => "random",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterativeParams {
    pub thresholds: Vec<f64>,
    #[serde(default = "default_n_min")]
    pub n_min: usize,
    #[serde(default = "default_b_max")]
    pub b_max: usize,
    #[serde(default = "default_iterative_strategies")]
    pub strategies: Vec<IterativeStrategy>,
}

fn default_n_min() -> usize {
    5
}

fn default_b_max() -> usize {
    200
}

fn default_iterative_strategies() -> Vec<IterativeStrategy> {
    vec![IterativeStrategy::Diffuse, IterativeStrategy::Random]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormParams {
    /// Cluster count for the cluster table and the selected-norm comparison.
    #[serde(default = "default_norm_k")]
    pub k: usize,
    #[serde(default = "default_norm_bins")]
    pub bins: usize,
    #[serde(default = "default_histogram_bins")]
    pub histogram_bins: usize,
}

fn default_norm_k() -> usize {
    50
}

fn default_norm_bins() -> usize {
    50
}

fn default_histogram_bins() -> usize {
    20
}

impl Default for NormParams {
    fn default() -> Self {
        Self {
            k: default_norm_k(),
            bins: default_norm_bins(),
            histogram_bins: default_histogram_bins(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub strategies: Vec<StrategySpec>,
    pub budgets: Vec<usize>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_fraction")]
    pub subset_fraction: f64,
    pub metric: String,
    pub pairs: Vec<ModelPair>,
    #[serde(default)]
    pub mode: SpaceMode,
    #[serde(default)]
    pub iterative: Option<IterativeParams>,
    #[serde(default)]
    pub norms: Option<NormParams>,
}

fn default_fraction() -> f64 {
    0.8
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::Config(m.to_string()));
        if self.pairs.is_empty() {
            return bad("no model pairs");
        }
        if self.seeds.is_empty() {
            return bad("no seeds");
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return bad("seeds must be unique");
        }
        if self.budgets.first() == Some(&0) || self.budgets.windows(2).any(|w| w[0] >= w[1]) {
            return bad("budgets must be positive and strictly ascending");
        }
        if !(self.subset_fraction > 0.0 && self.subset_fraction <= 1.0) {
            return bad("subset_fraction must lie in (0, 1]");
        }
        let mut labels: Vec<&str> = self.strategies.iter().map(|s| s.label.as_str()).collect();
        labels.sort_unstable();
        if labels.windows(2).any(|w| w[0] == w[1]) {
            return bad("strategy labels must be unique");
        }
        if let Some(it) = &self.iterative {
            if it.thresholds.iter().any(|&p| !(p > 0.0 && p < 1.0)) {
                return bad("iterative thresholds must lie in (0, 1)");
            }
            if it.n_min == 0 || it.n_min > it.b_max {
                return bad("iterative parameters need 1 <= n_min <= b_max");
            }
        }
        if let Some(n) = &self.norms {
            if n.k < 1 || n.bins < 1 || n.histogram_bins < 1 {
                return bad("norm analysis sizes must be positive");
            }
        }
        Ok(())
    }

    pub fn from_path(path: &Path) -> Result<Self, HarnessError> {
        let config: Self = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        config.validate()?;
        Ok(config)
    }
}

/// Embeddings and scores for an experiment.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub embeddings: BTreeMap<String, EmbeddingMatrix>,
    pub inputs: Option<EmbeddingMatrix>,
    pub scores: ScoreTable,
}

impl From<SynthCorpus> for Corpus {
    fn from(s: SynthCorpus) -> Self {
        Corpus {
            embeddings: s.embeddings,
            inputs: Some(s.inputs),
            scores: s.scores,
        }
    }
}

fn read_matrix(path: &Path) -> Result<EmbeddingMatrix, HarnessError> {
    let file = File::open(path)?;
    EmbeddingMatrix::read(BufReader::new(file)).map_err(|source| HarnessError::Vectors {
        path: path.to_path_buf(),
        source,
    })
}

impl Corpus {
    /// Reads `embeddings/<model>.{jsonl,bin}`, optional `inputs.{jsonl,bin}`
    /// and `scores.jsonl` from `dir`.
    pub fn load(dir: &Path) -> Result<Self, HarnessError> {
        let mut embeddings = BTreeMap::new();
        let mut entries: Vec<PathBuf> = fs::read_dir(dir.join("embeddings"))?
            .map(|e| e.map(|e| e.path()))
            .collect::<Result<_, _>>()?;
        entries.sort();
        for path in entries {
            let ext = path.extension().and_then(|e| e.to_str());
            if !matches!(ext, Some("jsonl") | Some("bin")) {
                continue;
            }
            let model = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default()
                .to_string();
            if embeddings.contains_key(&model) {
                return Err(HarnessError::Config(format!(
                    "model {model:?} has more than one embedding file"
                )));
            }
            embeddings.insert(model, read_matrix(&path)?);
        }
        let mut inputs = None;
        for name in ["inputs.bin", "inputs.jsonl"] {
            let path = dir.join(name);
            if path.exists() {
                inputs = Some(read_matrix(&path)?);
                break;
            }
        }
        let path = dir.join("scores.jsonl");
        let scores = ScoreTable::read_jsonl(BufReader::new(File::open(&path)?))
            .map_err(|source| HarnessError::Scores { path, source })?;
        Ok(Corpus {
            embeddings,
            inputs,
            scores,
        })
    }

    /// Writes the layout read by [`Corpus::load`].
    pub fn save(&self, dir: &Path, format: EmbeddingFormat) -> Result<(), HarnessError> {
        let ext = match format {
            EmbeddingFormat::Jsonl => "jsonl",
            EmbeddingFormat::RawBinary => "bin",
        };
        fs::create_dir_all(dir.join("embeddings"))?;
        for (model, m) in &self.embeddings {
            let mut w = BufWriter::new(File::create(dir.join("embeddings").join(format!("{model}.{ext}")))?);
            m.write_format(&mut w, format)?;
            w.flush()?;
        }
        if let Some(inputs) = &self.inputs {
            let mut w = BufWriter::new(File::create(dir.join(format!("inputs.{ext}")))?);
            inputs.write_format(&mut w, format)?;
            w.flush()?;
        }
        let mut w = BufWriter::new(File::create(dir.join("scores.jsonl"))?);
        for r in self.scores.records() {
            serde_json::to_writer(&mut w, &r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    fn model(&self, name: &str) -> Result<&EmbeddingMatrix, HarnessError> {
        self.embeddings
            .get(name)
            .ok_or_else(|| HarnessError::MissingModel(name.to_string()))
    }

    pub fn space(&self, pair: &ModelPair, mode: SpaceMode) -> Result<DifferenceSpace, HarnessError> {
        Ok(pair_space(
            self.model(&pair.model_a)?,
            self.model(&pair.model_b)?,
            mode,
        )?)
    }

    /// Replayed label of every example in `space`, in space order.
    pub fn labels(&self, pair: &ModelPair, metric: &str, ids: &[String]) -> Result<Vec<Preference>, HarnessError> {
        Ok(ids
            .iter()
            .map(|id| simulated_preference(&self.scores, id, &pair.model_a, &pair.model_b, metric))
            .collect::<Result<_, _>>()?)
    }
}

/// Prepared data for one pair: its space and per-position labels.
struct PairData {
    space: DifferenceSpace,
    labels: Vec<Preference>,
    inputs: Option<DifferenceSpace>,
}

fn prepare(config: &ExperimentConfig, corpus: &Corpus, need_inputs: bool) -> Result<Vec<PairData>, HarnessError> {
    config
        .pairs
        .par_iter()
        .map(|pair| {
            let space = corpus.space(pair, config.mode)?;
            let labels = corpus.labels(pair, &config.metric, space.ids())?;
            let inputs = if need_inputs {
                let m = corpus.inputs.as_ref().ok_or(HarnessError::MissingInputs)?;
                let rows = space
                    .ids()
                    .iter()
                    .map(|id| {
                        m.row_by_id(id)
                            .map(<[f64]>::to_vec)
                            .ok_or_else(|| HarnessError::Config(format!("no input embedding for example {id:?}")))
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                Some(DifferenceSpace::from_rows(space.ids().to_vec(), rows, SpaceMode::Raw)?)
            } else {
                None
            };
            Ok(PairData { space, labels, inputs })
        })
        .collect()
}

/// Sorted positions of the test subset for one `(pair, seed)`.
pub fn test_subset(pool: usize, fraction: f64, seed: u64, pair_index: usize) -> Vec<usize> {
    let size = ((pool as f64 * fraction).round() as usize).clamp(2.min(pool), pool);
    if size == pool {
        return (0..pool).collect();
    }
    let mut r = rng::stream(seed, "subset", &[pair_index as u64]);
    let mut positions = index::sample(&mut r, pool, size).into_vec();
    positions.sort_unstable();
    positions
}

fn selection_seed(seed: u64, pair_index: usize, budget: usize) -> u64 {
    rng::derive_seed(seed, "select", &[pair_index as u64, budget as u64])
}

fn stats_of(labels: &[Preference], positions: impl IntoIterator<Item = usize>) -> WinStats {
    WinStats::from_counts(Counts::from_labels(positions.into_iter().map(|p| labels[p]))).expect("non-empty selection")
}

/// Outcome of one selection at one budget.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectionRecord {
    pub pair: usize,
    pub seed: u64,
    pub strategy: String,
    pub budget: usize,
    pub sample_margin: f64,
    pub test_margin: f64,
    pub success: bool,
}

impl SelectionRecord {
    /// Signed error of the sample margin, positive when the sample overstates
    /// the test winner's lead. `None` when the test set is tied.
    pub fn deviation(&self) -> Option<f64> {
        if self.test_margin == 0.0 {
            return None;
        }
        let s = self.test_margin.signum();
        Some(s * self.sample_margin - s * self.test_margin)
    }
}

struct JobOutput {
    records: Vec<SelectionRecord>,
    norm: Option<JobNorms>,
}

struct JobNorms {
    diffuse: Vec<f64>,
    random: Vec<f64>,
    bin_success: Vec<bool>,
    bin_norm: Vec<f64>,
}

fn selections(
    data: &PairData,
    positions: &[usize],
    spec: &StrategySpec,
    budgets: &[usize],
    seed: u64,
    pair_index: usize,
) -> Result<Vec<(usize, Vec<usize>)>, HarnessError> {
    let test = data.space.subset(positions);
    let n = test.len();
    let budgets: Vec<usize> = budgets.iter().copied().filter(|&b| b <= n).collect();
    let cluster_space = match spec.strategy {
        Strategy::InputCluster => Some(
            data.inputs
                .as_ref()
                .ok_or(HarnessError::MissingInputs)?
                .subset(positions),
        ),
        Strategy::Diffuse => Some(test.clone()),
        _ => None,
    };
    let mut out = Vec::with_capacity(budgets.len());
    match (spec.strategy, cluster_space) {
        (Strategy::Random, _) => {
            for b in budgets {
                out.push((b, random_positions(n, b, selection_seed(seed, pair_index, b))?));
            }
        }
        (Strategy::MaxNorm, _) => {
            for b in budgets {
                let plan = select_max_norm(&test, b)?;
                out.push((b, ids_to_positions(&test, &plan.selected)));
            }
        }
        (_, Some(space)) => {
            let tree: Option<Dendrogram> = match spec.clustering {
                ClusterMethod::WardEuclidean if n >= 2 => Some(build_dendrogram(&space, Linkage::WardEuclidean)?),
                ClusterMethod::AverageCosine if n >= 2 => Some(build_dendrogram(&space, Linkage::AverageCosine)?),
                _ => None,
            };
            for b in budgets {
                let plan = match &tree {
                    Some(t) => select_from_dendrogram(&space, t, b, spec.representative)?,
                    None => {
                        let s = selection_seed(seed, pair_index, b);
                        let assignment = partition(&space, b, spec.clustering, s)?;
                        plan_from_clusters(&space, &assignment, spec.strategy, spec.representative, s)
                    }
                };
                out.push((b, ids_to_positions(&space, &plan.selected)));
            }
        }
        (_, None) => unreachable!("cluster strategies always have a space"),
    }
    Ok(out)
}

fn ids_to_positions(space: &DifferenceSpace, ids: &[String]) -> Vec<usize> {
    let index: HashMap<&str, usize> = space.ids().iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    ids.iter().map(|id| index[id.as_str()]).collect()
}

fn run_job(
    config: &ExperimentConfig,
    data: &PairData,
    pair_index: usize,
    seed: u64,
    with_records: bool,
) -> Result<JobOutput, HarnessError> {
    let positions = test_subset(data.space.len(), config.subset_fraction, seed, pair_index);
    let test_labels: Vec<Preference> = positions.iter().map(|&p| data.labels[p]).collect();
    let test_stats = stats_of(&test_labels, 0..test_labels.len());
    let mut records = Vec::new();
    if with_records {
        for spec in &config.strategies {
            for (budget, chosen) in selections(data, &positions, spec, &config.budgets, seed, pair_index)? {
                let sample = stats_of(&test_labels, chosen);
                records.push(SelectionRecord {
                    pair: pair_index,
                    seed,
                    strategy: spec.label.clone(),
                    budget,
                    sample_margin: sample.margin(),
                    test_margin: test_stats.margin(),
                    success: sample.winner == test_stats.winner,
                });
            }
        }
    }
    let norm = match &config.norms {
        Some(params) => Some(job_norms(
            data,
            &positions,
            &test_labels,
            test_stats.winner,
            params,
            seed,
            pair_index,
        )?),
        None => None,
    };
    Ok(JobOutput { records, norm })
}

fn job_norms(
    data: &PairData,
    positions: &[usize],
    test_labels: &[Preference],
    winner: Preference,
    params: &NormParams,
    seed: u64,
    pair_index: usize,
) -> Result<JobNorms, HarnessError> {
    let test = data.space.subset(positions);
    let norms = test.norms();
    let k = params.k.min(test.len());
    let spec = StrategySpec::new(Strategy::Diffuse);
    let (_, diffuse) = selections(data, positions, &spec, &[k], seed, pair_index)?.remove(0);
    let random = random_positions(test.len(), k, selection_seed(seed, pair_index, k))?;

    let mut order: Vec<usize> = (0..test.len()).collect();
    order.sort_by(|&a, &b| norms[a].total_cmp(&norms[b]).then(a.cmp(&b)));
    let bins = params.bins.min(test.len());
    let mut bin_success = Vec::with_capacity(bins);
    let mut bin_norm = Vec::with_capacity(bins);
    for b in 0..bins {
        let lo = b * order.len() / bins;
        let hi = (b + 1) * order.len() / bins;
        let members = &order[lo..hi];
        bin_success.push(stats_of(test_labels, members.iter().copied()).winner == winner);
        bin_norm.push(members.iter().map(|&p| norms[p]).sum::<f64>() / members.len() as f64);
    }
    Ok(JobNorms {
        diffuse: diffuse.iter().map(|&p| norms[p]).collect(),
        random: random.iter().map(|&p| norms[p]).collect(),
        bin_success,
        bin_norm,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuccessRow {
    pub strategy: String,
    pub budget: usize,
    pub runs: usize,
    pub success_rate: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationRow {
    pub strategy: String,
    pub budget: usize,
    pub runs: usize,
    pub mean_deviation: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterNormRow {
    pub pair: String,
    pub cluster: usize,
    pub size: usize,
    pub fraction: f64,
    pub mean_norm: f64,
    pub largest: bool,
    pub pool_median_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub strategy: String,
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub count: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormBinRow {
    pub bin: usize,
    pub runs: usize,
    pub mean_norm: f64,
    pub success_rate: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormSummary {
    pub diffuse_median_norm: f64,
    pub random_median_norm: f64,
    /// Pairs whose largest cluster has a mean norm below the pool median.
    pub largest_cluster_below_median: usize,
    pub pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormTables {
    pub clusters: Vec<ClusterNormRow>,
    pub histogram: Vec<HistogramRow>,
    pub bins: Vec<NormBinRow>,
    pub summary: NormSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterativeRecord {
    pub pair: usize,
    pub seed: u64,
    pub strategy: String,
    pub p: f64,
    pub outcome: Outcome,
    pub annotated: usize,
    pub test_winner: Preference,
    pub test_distance: f64,
}

impl IterativeRecord {
    pub fn class(&self) -> OutcomeClass {
        match (self.outcome, self.test_winner) {
            (Outcome::Inconclusive, _) => OutcomeClass::Inconclusive,
            (Outcome::A, Preference::A) | (Outcome::B, Preference::B) => OutcomeClass::Success,
            _ => OutcomeClass::Error,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutcomeClass {
    Success,
    Error,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterativeRow {
    pub strategy: String,
    pub p: f64,
    pub runs: usize,
    pub mean_annotations: f64,
    pub std_error_annotations: f64,
    pub success: f64,
    pub error: f64,
    pub inconclusive: f64,
    /// Wrong winners among concluded runs.
    pub error_rate_concluded: Option<f64>,
    pub mean_distance_success: Option<f64>,
    pub mean_distance_error: Option<f64>,
    pub mean_distance_inconclusive: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub success: Vec<SuccessRow>,
    pub deviation: Vec<DeviationRow>,
    pub iterative: Option<Vec<IterativeRow>>,
    pub norms: Option<NormTables>,
}

fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

fn rate_se(successes: usize, runs: usize) -> (f64, f64) {
    if runs == 0 {
        return (f64::NAN, f64::NAN);
    }
    let r = successes as f64 / runs as f64;
    (r, (r * (1.0 - r) / runs as f64).sqrt())
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let m = values.len() / 2;
    if values.len() % 2 == 1 {
        values[m]
    } else {
        0.5 * (values[m - 1] + values[m])
    }
}

fn jobs(config: &ExperimentConfig) -> Vec<(usize, u64)> {
    (0..config.pairs.len())
        .flat_map(|p| config.seeds.iter().map(move |&s| (p, s)))
        .collect()
}

/// Raw per-run selection outcomes, in `(pair, seed, strategy, budget)` order.
pub fn selection_records(config: &ExperimentConfig, corpus: &Corpus) -> Result<Vec<SelectionRecord>, HarnessError> {
    config.validate()?;
    let need_inputs = config.strategies.iter().any(|s| s.strategy == Strategy::InputCluster);
    let data = prepare(config, corpus, need_inputs)?;
    let config = ExperimentConfig {
        norms: None,
        ..config.clone()
    };
    let outputs = jobs(&config)
        .par_iter()
        .map(|&(p, s)| run_job(&config, &data[p], p, s, true))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(outputs.into_iter().flat_map(|o| o.records).collect())
}

fn group<'a>(
    config: &ExperimentConfig,
    records: &'a [SelectionRecord],
) -> Vec<((String, usize), Vec<&'a SelectionRecord>)> {
    let mut groups: BTreeMap<(usize, usize), Vec<&SelectionRecord>> = BTreeMap::new();
    let order: HashMap<&str, usize> = config
        .strategies
        .iter()
        .enumerate()
        .map(|(i, s)| (s.label.as_str(), i))
        .collect();
    for r in records {
        groups
            .entry((order[r.strategy.as_str()], r.budget))
            .or_default()
            .push(r);
    }
    groups
        .into_iter()
        .map(|((s, b), rs)| ((config.strategies[s].label.clone(), b), rs))
        .collect()
}

pub fn success_table(config: &ExperimentConfig, records: &[SelectionRecord]) -> Vec<SuccessRow> {
    group(config, records)
        .into_iter()
        .map(|((strategy, budget), rs)| {
            let (success_rate, std_error) = rate_se(rs.iter().filter(|r| r.success).count(), rs.len());
            SuccessRow {
                strategy,
                budget,
                runs: rs.len(),
                success_rate,
                std_error,
            }
        })
        .collect()
}

pub fn deviation_table(config: &ExperimentConfig, records: &[SelectionRecord]) -> Vec<DeviationRow> {
    group(config, records)
        .into_iter()
        .map(|((strategy, budget), rs)| {
            let devs: Vec<f64> = rs.iter().filter_map(|r| r.deviation()).collect();
            let (mean_deviation, std_error) = mean_se(&devs);
            DeviationRow {
                strategy,
                budget,
                runs: devs.len(),
                mean_deviation,
                std_error,
            }
        })
        .collect()
}

/// Success rate of every configured strategy at every budget.
pub fn run_success_rate(config: &ExperimentConfig, corpus: &Corpus) -> Result<Vec<SuccessRow>, HarnessError> {
    Ok(success_table(config, &selection_records(config, corpus)?))
}

/// Mean signed deviation of the sample margin from the test margin.
pub fn deviation_analysis(config: &ExperimentConfig, corpus: &Corpus) -> Result<Vec<DeviationRow>, HarnessError> {
    Ok(deviation_table(config, &selection_records(config, corpus)?))
}

/// Member fraction and mean norm of each cluster of the full pool cut at `k`.
pub fn cluster_norms(space: &DifferenceSpace, k: usize, pair: &str) -> Result<Vec<ClusterNormRow>, HarnessError> {
    let k = k.min(space.len());
    let assignment = partition(space, k, ClusterMethod::WardEuclidean, 0)?;
    let norms = space.norms();
    let pool_median_norm = median(&mut norms.to_vec());
    let largest = assignment
        .members
        .iter()
        .enumerate()
        .max_by(|(i, a), (j, b)| a.len().cmp(&b.len()).then(j.cmp(i)))
        .map(|(i, _)| i)
        .unwrap_or(0);
    Ok(assignment
        .members
        .iter()
        .enumerate()
        .map(|(c, m)| ClusterNormRow {
            pair: pair.to_string(),
            cluster: c,
            size: m.len(),
            fraction: m.len() as f64 / space.len() as f64,
            mean_norm: m.iter().map(|&i| norms[i]).sum::<f64>() / m.len() as f64,
            largest: c == largest,
            pool_median_norm,
        })
        .collect())
}

/// Cluster-size, selected-norm and norm-bin analyses across all pairs.
pub fn norm_analyses(config: &ExperimentConfig, corpus: &Corpus) -> Result<NormTables, HarnessError> {
    config.validate()?;
    let params = config.norms.clone().unwrap_or_default();
    let config = ExperimentConfig {
        norms: Some(params.clone()),
        ..config.clone()
    };
    let data = prepare(&config, corpus, false)?;
    let outputs = jobs(&config)
        .par_iter()
        .map(|&(p, s)| run_job(&config, &data[p], p, s, false).map(|o| o.norm.expect("norms requested")))
        .collect::<Result<Vec<_>, _>>()?;

    let mut clusters = Vec::new();
    let mut below = 0;
    let per_pair = config
        .pairs
        .par_iter()
        .zip(&data)
        .map(|(pair, d)| cluster_norms(&d.space, params.k, &pair.name()))
        .collect::<Result<Vec<_>, _>>()?;
    for rows in per_pair {
        if rows.iter().any(|r| r.largest && r.mean_norm < r.pool_median_norm) {
            below += 1;
        }
        clusters.extend(rows);
    }

    let mut diffuse: Vec<f64> = outputs.iter().flat_map(|o| o.diffuse.iter().copied()).collect();
    let mut random: Vec<f64> = outputs.iter().flat_map(|o| o.random.iter().copied()).collect();
    let lo = diffuse.iter().chain(&random).copied().fold(f64::INFINITY, f64::min);
    let hi = diffuse.iter().chain(&random).copied().fold(f64::NEG_INFINITY, f64::max);
    let mut histogram = Vec::new();
    for (name, values) in [("diffuse", &diffuse), ("random", &random)] {
        histogram.extend(histogram_rows(name, values, lo, hi, params.histogram_bins));
    }

    let nbins = outputs.iter().map(|o| o.bin_success.len()).max().unwrap_or(0);
    let bins = (0..nbins)
        .map(|b| {
            let hits: Vec<bool> = outputs.iter().filter_map(|o| o.bin_success.get(b).copied()).collect();
            let norms: Vec<f64> = outputs.iter().filter_map(|o| o.bin_norm.get(b).copied()).collect();
            let (success_rate, std_error) = rate_se(hits.iter().filter(|&&h| h).count(), hits.len());
            NormBinRow {
                bin: b,
                runs: hits.len(),
                mean_norm: norms.iter().sum::<f64>() / norms.len() as f64,
                success_rate,
                std_error,
            }
        })
        .collect();

    Ok(NormTables {
        clusters,
        histogram,
        bins,
        summary: NormSummary {
            diffuse_median_norm: median(&mut diffuse),
            random_median_norm: median(&mut random),
            largest_cluster_below_median: below,
            pairs: config.pairs.len(),
        },
    })
}

fn histogram_rows(name: &str, values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<HistogramRow> {
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for &v in values {
        let b = (((v - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(b, count)| HistogramRow {
            strategy: name.to_string(),
            bin_lo: lo + b as f64 * width,
            bin_hi: lo + (b + 1) as f64 * width,
            count,
            fraction: if values.is_empty() {
                0.0
            } else {
                count as f64 / values.len() as f64
            },
        })
        .collect()
}

/// Raw iterative runs, in `(pair, seed, threshold, strategy)` order.
pub fn iterative_records(config: &ExperimentConfig, corpus: &Corpus) -> Result<Vec<IterativeRecord>, HarnessError> {
    config.validate()?;
    let params = config
        .iterative
        .clone()
        .ok_or_else(|| HarnessError::Config("no iterative parameters".into()))?;
    let data = prepare(config, corpus, false)?;
    let outputs = jobs(config)
        .par_iter()
        .map(|&(p, seed)| {
            let d = &data[p];
            let positions = test_subset(d.space.len(), config.subset_fraction, seed, p);
            let test = d.space.subset(&positions);
            let labels: HashMap<String, Preference> = positions
                .iter()
                .map(|&i| (d.space.ids()[i].clone(), d.labels[i]))
                .collect();
            let truth = stats_of(&d.labels, positions.iter().copied());
            let mut out = Vec::new();
            for &threshold in &params.thresholds {
                for &strategy in &params.strategies {
                    let mut session = SessionConfig::new(threshold, params.n_min, params.b_max.min(test.len()));
                    session.seed = rng::derive_seed(seed, "iterative", &[p as u64]);
                    let mut oracle = labels.clone();
                    let (outcome, annotated) = match strategy {
                        IterativeStrategy::Diffuse => {
                            let run = run_iterative(&test, session, &mut oracle)?;
                            (run.outcome, run.annotated_count)
                        }
                        IterativeStrategy::Random => {
                            let run = run_iterative_random(test.ids(), &session, &mut oracle)?;
                            (run.outcome, run.annotated_count)
                        }
                    };
                    out.push(IterativeRecord {
                        pair: p,
                        seed,
                        strategy: strategy.to_string(),
                        p: threshold,
                        outcome,
                        annotated,
                        test_winner: truth.winner,
                        test_distance: truth.distance,
                    });
                }
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;
    Ok(outputs.into_iter().flatten().collect())
}

pub fn iterative_table(params: &IterativeParams, records: &[IterativeRecord]) -> Vec<IterativeRow> {
    let mut rows = Vec::new();
    for &p in &params.thresholds {
        for strategy in &params.strategies {
            let name = strategy.to_string();
            let rs: Vec<&IterativeRecord> = records.iter().filter(|r| r.p == p && r.strategy == name).collect();
            let n = rs.len();
            let annotations: Vec<f64> = rs.iter().map(|r| r.annotated as f64).collect();
            let (mean_annotations, std_error_annotations) = mean_se(&annotations);
            let of = |c: OutcomeClass| rs.iter().filter(|r| r.class() == c).copied().collect::<Vec<_>>();
            let (s, e, i) = (
                of(OutcomeClass::Success),
                of(OutcomeClass::Error),
                of(OutcomeClass::Inconclusive),
            );
            let frac = |v: &[&IterativeRecord]| if n == 0 { 0.0 } else { v.len() as f64 / n as f64 };
            let dist = |v: &[&IterativeRecord]| {
                (!v.is_empty()).then(|| v.iter().map(|r| r.test_distance).sum::<f64>() / v.len() as f64)
            };
            let concluded = s.len() + e.len();
            rows.push(IterativeRow {
                strategy: name,
                p,
                runs: n,
                mean_annotations,
                std_error_annotations,
                success: frac(&s),
                error: frac(&e),
                inconclusive: frac(&i),
                error_rate_concluded: (concluded > 0).then(|| e.len() as f64 / concluded as f64),
                mean_distance_success: dist(&s),
                mean_distance_error: dist(&e),
                mean_distance_inconclusive: dist(&i),
            });
        }
    }
    rows
}

/// Iterative outcome table for every threshold and strategy.
pub fn run_iterative_experiment(config: &ExperimentConfig, corpus: &Corpus) -> Result<Vec<IterativeRow>, HarnessError> {
    let records = iterative_records(config, corpus)?;
    Ok(iterative_table(config.iterative.as_ref().expect("validated"), &records))
}

/// Every analysis enabled in `config`.
pub fn run_experiment(config: &ExperimentConfig, corpus: &Corpus) -> Result<ExperimentResult, HarnessError> {
    let mut result = ExperimentResult::default();
    if !config.strategies.is_empty() && !config.budgets.is_empty() {
        let records = selection_records(config, corpus)?;
        result.success = success_table(config, &records);
        result.deviation = deviation_table(config, &records);
    }
    if config.iterative.is_some() {
        result.iterative = Some(run_iterative_experiment(config, corpus)?);
    }
    if config.norms.is_some() {
        result.norms = Some(norm_analyses(config, corpus)?);
    }
    Ok(result)
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    config: &'a ExperimentConfig,
    files: Vec<&'static str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    norm_summary: Option<&'a NormSummary>,
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

impl ExperimentResult {
    /// Writes one CSV per analysis plus `manifest.json`.
    pub fn write(&self, config: &ExperimentConfig, dir: &Path) -> Result<(), HarnessError> {
        fs::create_dir_all(dir)?;
        let mut files = Vec::new();
        if !self.success.is_empty() {
            write_csv(&dir.join("success_rate.csv"), &self.success)?;
            write_csv(&dir.join("deviation.csv"), &self.deviation)?;
            files.extend(["success_rate.csv", "deviation.csv"]);
        }
        if let Some(rows) = &self.iterative {
            write_csv(&dir.join("iterative.csv"), rows)?;
            files.push("iterative.csv");
        }
        if let Some(n) = &self.norms {
            write_csv(&dir.join("cluster_norms.csv"), &n.clusters)?;
            write_csv(&dir.join("norm_histogram.csv"), &n.histogram)?;
            write_csv(&dir.join("norm_bins.csv"), &n.bins)?;
            files.extend(["cluster_norms.csv", "norm_histogram.csv", "norm_bins.csv"]);
        }
        let manifest = Manifest {
            config,
            files,
            norm_summary: self.norms.as_ref().map(|n| &n.summary),
        };
        let mut w = BufWriter::new(File::create(dir.join("manifest.json"))?);
        serde_json::to_writer_pretty(&mut w, &manifest)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthConfig};

    fn corpus() -> (Corpus, Vec<ModelPair>) {
        let s = generate(&SynthConfig {
            pairs: 3,
            pool: 60,
            dim: 6,
            unanimous: true,
            ..SynthConfig::default()
        });
        let pairs = s
            .pairs
            .iter()
            .map(|p| ModelPair {
                model_a: p.model_a.clone(),
                model_b: p.model_b.clone(),
            })
            .collect();
        (s.into(), pairs)
    }

    fn config(pairs: Vec<ModelPair>) -> ExperimentConfig {
        ExperimentConfig {
            strategies: vec![
                StrategySpec::new(Strategy::Diffuse),
                StrategySpec::new(Strategy::Random),
                StrategySpec::new(Strategy::MaxNorm),
                StrategySpec::new(Strategy::InputCluster),
            ],
            budgets: vec![1, 5, 48],
            seeds: vec![0, 1],
            subset_fraction: 0.8,
            metric: "synthetic".into(),
            pairs,
            mode: SpaceMode::Subtract,
            iterative: None,
            norms: None,
        }
    }

    #[test]
    fn config_parsing_accepts_names_and_objects() {
        let text = r#"{
            "strategies": ["random", {"strategy": "diffuse", "clustering": "kmeans", "representative": "max-norm", "label": "km"}],
            "budgets": [5, 10], "seeds": [1, 2], "metric": "f1",
            "pairs": [{"model_a": "x", "model_b": "y"}],
            "iterative": {"thresholds": [0.2]}
        }"#;
        let c: ExperimentConfig = serde_json::from_str(text).unwrap();
        c.validate().unwrap();
        assert_eq!(c.strategies[0], StrategySpec::new(Strategy::Random));
        assert_eq!(c.strategies[1].clustering, ClusterMethod::Kmeans);
        assert_eq!(c.strategies[1].representative, Representative::MaxNorm);
        assert_eq!(c.strategies[1].label, "km");
        assert_eq!(c.subset_fraction, 0.8);
        assert_eq!(c.iterative.as_ref().unwrap().n_min, 5);
        assert_eq!(c.iterative.as_ref().unwrap().b_max, 200);
    }

    #[test]
    fn config_validation() {
        let (_, pairs) = corpus();
        let mut c = config(pairs);
        c.budgets = vec![5, 5];
        assert!(c.validate().is_err());
        c.budgets = vec![5];
        c.seeds = vec![3, 3];
        assert!(c.validate().is_err());
        c.seeds = vec![3];
        c.subset_fraction = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn full_budget_always_succeeds_with_zero_deviation() {
        let (corpus, pairs) = corpus();
        let c = config(pairs);
        let records = selection_records(&c, &corpus).unwrap();
        // 3 + 1 pairs, 2 seeds, 4 strategies, 3 budgets
        assert_eq!(records.len(), 4 * 2 * 4 * 3);
        for r in records.iter().filter(|r| r.budget == 48) {
            assert!(r.success, "{r:?}");
            assert!(r.deviation().is_none_or(|d| d == 0.0));
        }
        let unanimous = 3;
        assert!(records.iter().filter(|r| r.pair == unanimous).all(|r| r.success));
        let table = success_table(&c, &records);
        assert_eq!(table.len(), 12);
        assert_eq!(table[0].strategy, "diffuse");
        assert!(table
            .iter()
            .all(|r| (0.0..=1.0).contains(&r.success_rate) && r.runs == 8));
    }

    #[test]
    fn budgets_beyond_the_subset_are_skipped() {
        let (corpus, pairs) = corpus();
        let mut c = config(pairs);
        c.budgets = vec![5, 49];
        let records = selection_records(&c, &corpus).unwrap();
        assert!(records.iter().all(|r| r.budget == 5));
    }

    #[test]
    fn missing_model_is_an_error() {
        let (corpus, mut pairs) = corpus();
        pairs[0].model_b = "nope".into();
        assert!(matches!(
            run_success_rate(&config(pairs), &corpus),
            Err(HarnessError::MissingModel(m)) if m == "nope"
        ));
    }

    #[test]
    fn subsets_are_seeded_and_sized() {
        let a = test_subset(100, 0.8, 7, 0);
        assert_eq!(a.len(), 80);
        assert_eq!(a, test_subset(100, 0.8, 7, 0));
        assert_ne!(a, test_subset(100, 0.8, 8, 0));
        assert_ne!(a, test_subset(100, 0.8, 7, 1));
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(test_subset(10, 1.0, 0, 0), (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn iterative_table_partitions_outcomes() {
        let (corpus, pairs) = corpus();
        let mut c = config(pairs);
        c.iterative = Some(IterativeParams {
            thresholds: vec![0.2, 1.0 - 1e-9],
            n_min: 5,
            b_max: 40,
            strategies: default_iterative_strategies(),
        });
        let records = iterative_records(&c, &corpus).unwrap();
        assert!(records.iter().all(|r| r.annotated <= 40));
        let rows = iterative_table(c.iterative.as_ref().unwrap(), &records);
        assert_eq!(rows.len(), 4);
        for r in &rows {
            assert!((r.success + r.error + r.inconclusive - 1.0).abs() < 1e-12);
        }
        // a near-certain threshold stops at the first batch unless that
        // batch is exactly balanced, where the risk is 1
        let lax: Vec<_> = records.iter().filter(|r| r.p > 0.5).collect();
        assert!(lax
            .iter()
            .filter(|r| r.annotated == 5)
            .all(|r| r.outcome != Outcome::Inconclusive));
        assert!(lax
            .iter()
            .filter(|r| r.pair == 3)
            .all(|r| r.annotated == 5 && r.outcome == Outcome::A));
        assert!(lax.iter().filter(|r| r.annotated == 5).count() * 2 > lax.len());
    }

    #[test]
    fn no_room_to_iterate_is_always_inconclusive() {
        let (corpus, pairs) = corpus();
        let mut c = config(pairs[..3].to_vec());
        c.iterative = Some(IterativeParams {
            thresholds: vec![1e-9],
            n_min: 5,
            b_max: 5,
            strategies: default_iterative_strategies(),
        });
        let rows = run_iterative_experiment(&c, &corpus).unwrap();
        assert!(rows.iter().all(|r| r.inconclusive == 1.0 && r.mean_annotations == 5.0));
    }

    #[test]
    fn constant_norms_report_that_norm() {
        let ids: Vec<String> = (0..12).map(|i| format!("e{i}")).collect();
        let rows: Vec<Vec<f64>> = (0..12)
            .map(|i| {
                let t = i as f64 * 0.5;
                vec![2.0 * t.cos(), 2.0 * t.sin()]
            })
            .collect();
        let space = DifferenceSpace::from_rows(ids, rows, SpaceMode::Subtract).unwrap();
        let table = cluster_norms(&space, 4, "p").unwrap();
        assert_eq!(table.len(), 4);
        assert!(table.iter().all(|r| (r.mean_norm - 2.0).abs() < 1e-12));
        assert!((table.iter().map(|r| r.fraction).sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(table.iter().filter(|r| r.largest).count(), 1);
    }

    #[test]
    fn norm_tables_are_consistent() {
        let (corpus, pairs) = corpus();
        let mut c = config(pairs);
        c.norms = Some(NormParams {
            k: 10,
            bins: 8,
            histogram_bins: 5,
        });
        let t = norm_analyses(&c, &corpus).unwrap();
        assert_eq!(t.bins.len(), 8);
        assert!(t.bins.iter().all(|b| b.runs == 8));
        assert!(t.bins.windows(2).all(|w| w[0].mean_norm <= w[1].mean_norm));
        for s in ["diffuse", "random"] {
            let rows: Vec<_> = t.histogram.iter().filter(|h| h.strategy == s).collect();
            assert_eq!(rows.len(), 5);
            assert_eq!(rows.iter().map(|h| h.count).sum::<usize>(), 8 * 10);
        }
        for pair in &c.pairs {
            let f: f64 = t
                .clusters
                .iter()
                .filter(|r| r.pair == pair.name())
                .map(|r| r.fraction)
                .sum();
            assert!((f - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn results_are_reproducible_on_disk() {
        let (corpus, pairs) = corpus();
        let mut c = config(pairs);
        c.norms = Some(NormParams::default());
        c.iterative = Some(IterativeParams {
            thresholds: vec![0.2],
            n_min: 5,
            b_max: 20,
            strategies: default_iterative_strategies(),
        });
        let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
        for d in &dirs {
            run_experiment(&c, &corpus).unwrap().write(&c, d.path()).unwrap();
        }
        for f in [
            "success_rate.csv",
            "deviation.csv",
            "iterative.csv",
            "cluster_norms.csv",
            "norm_histogram.csv",
            "norm_bins.csv",
            "manifest.json",
        ] {
            let a = fs::read(dirs[0].path().join(f)).unwrap();
            assert_eq!(a, fs::read(dirs[1].path().join(f)).unwrap(), "{f}");
            assert!(!a.is_empty());
        }
    }

    #[test]
    fn corpus_round_trips_through_both_formats() {
        let (corpus, pairs) = corpus();
        for format in [EmbeddingFormat::Jsonl, EmbeddingFormat::RawBinary] {
            let dir = tempfile::tempdir().unwrap();
            corpus.save(dir.path(), format).unwrap();
            let back = Corpus::load(dir.path()).unwrap();
            assert_eq!(back.embeddings, corpus.embeddings);
            assert_eq!(back.inputs, corpus.inputs);
            assert_eq!(back.scores.records(), corpus.scores.records());
            let c = config(pairs.clone());
            assert_eq!(
                selection_records(&c, &back).unwrap(),
                selection_records(&c, &corpus).unwrap()
            );
        }
    }
}
