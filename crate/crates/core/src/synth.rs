//! Synthetic comparison corpus with a known norm/quality relationship.
//!
//! For every model pair, each example gets a quality gap `g ~ N(mu, 1)` with
//! a pair-level shift `mu ~ U(-0.5, 0.5)`. Model A's embedding is the shared
//! input embedding plus `g * u + eps`, where `u` is a random unit direction
//! for the pair and `eps` is isotropic Gaussian noise; model B's embedding is
//! the input embedding itself. Model A scores `g` and model B scores 0, with
//! gaps inside the tie band clamped to 0, so the replayed preference is the
//! sign of `g`.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::oracle::{ScoreRecord, ScoreTable};
use crate::rng;
use crate::vectors::EmbeddingMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub pairs: usize,
    pub pool: usize,
    pub dim: usize,
    /// Per-coordinate standard deviation of the isotropic noise.
    pub noise: f64,
    pub shift_range: f64,
    pub tie_band: f64,
    /// Adds one extra pair on which model A wins every example.
    pub unanimous: bool,
    pub metric: String,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            pairs: 100,
            pool: 500,
            dim: 32,
            noise: 1.0,
            shift_range: 0.5,
            tie_band: 0.05,
            unanimous: false,
            metric: "synthetic".into(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthPair {
    pub model_a: String,
    pub model_b: String,
    pub shift: f64,
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub inputs: EmbeddingMatrix,
    pub embeddings: BTreeMap<String, EmbeddingMatrix>,
    pub scores: ScoreTable,
    pub pairs: Vec<SynthPair>,
}

pub fn example_ids(pool: usize) -> Vec<String> {
    (0..pool).map(|i| format!("ex{i:05}")).collect()
}

// Values are rounded through f32 so the corpus survives the binary format
// bit for bit.
fn f32_round(x: f64) -> f64 {
    x as f32 as f64
}

fn unit_vector<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = crate::vectors::euclidean_norm(&v);
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

pub fn generate(config: &SynthConfig) -> SynthCorpus {
    assert!(
        config.pool >= 2 && config.dim >= 1,
        "synthetic corpus needs pool >= 2 and dim >= 1"
    );
    let ids = example_ids(config.pool);
    let mut base_rng = rng::stream(config.seed, "synth-inputs", &[]);
    let base: Vec<Vec<f64>> = (0..config.pool)
        .map(|_| {
            (0..config.dim)
                .map(|_| f32_round(base_rng.sample(StandardNormal)))
                .collect()
        })
        .collect();
    let inputs = EmbeddingMatrix::new(ids.clone(), base.clone()).expect("finite synthetic inputs");
    let noise = Normal::new(0.0, config.noise).expect("noise must be finite and non-negative");

    let mut embeddings = BTreeMap::new();
    let mut scores = ScoreTable::new();
    let mut pairs = Vec::new();
    let total = config.pairs + usize::from(config.unanimous);
    for p in 0..total {
        let unanimous = p == config.pairs;
        let mut r = rng::stream(config.seed, "synth-pair", &[p as u64]);
        let shift = if unanimous {
            0.0
        } else {
            r.random_range(-config.shift_range..=config.shift_range)
        };
        let u = unit_vector(&mut r, config.dim);
        let mut rows_a = Vec::with_capacity(config.pool);
        let (name_a, name_b) = if unanimous {
            ("unanimous-a".to_string(), "unanimous-b".to_string())
        } else {
            (format!("pair{p:03}-a"), format!("pair{p:03}-b"))
        };
        for (id, b) in ids.iter().zip(&base) {
            let z: f64 = r.sample(StandardNormal);
            let gap = if unanimous {
                config.tie_band + z.abs()
            } else {
                shift + z
            };
            let row = b
                .iter()
                .zip(&u)
                .map(|(&bi, &ui)| f32_round(bi + gap * ui + noise.sample(&mut r)))
                .collect();
            rows_a.push(row);
            let score = if gap.abs() < config.tie_band { 0.0 } else { gap };
            for (model, s) in [(&name_a, score), (&name_b, 0.0)] {
                scores
                    .insert(ScoreRecord {
                        id: id.clone(),
                        model: model.clone(),
                        metric: config.metric.clone(),
                        score: s,
                    })
                    .expect("synthetic keys are unique");
            }
        }
        embeddings.insert(
            name_a.clone(),
            EmbeddingMatrix::new(ids.clone(), rows_a).expect("finite synthetic rows"),
        );
        embeddings.insert(name_b.clone(), inputs.clone());
        pairs.push(SynthPair {
            model_a: name_a,
            model_b: name_b,
            shift,
        });
    }
    SynthCorpus {
        inputs,
        embeddings,
        scores,
        pairs,
    }
}
