//! Preference oracles and the score-replay oracle.
//!
//! A score table maps `(example, model, metric)` to a precomputed metric
//! score. The replay oracle prefers whichever model scored higher on an
//! example, reporting a tie on equal scores.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimator::{winning_stats, Preference, WinStats};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("no {metric:?} score for example {id:?} under model {model:?}")]
    MissingScore { id: String, model: String, metric: String },
    #[error("line {line}: duplicate score for ({id:?}, {model:?}, {metric:?})")]
    DuplicateScore {
        line: usize,
        id: String,
        model: String,
        metric: String,
    },
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("empty pool")]
    EmptyPool,
    #[error("oracle failed: {0}")]
    Failed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Anything that can judge a batch of examples.
pub trait Oracle {
    fn label(&mut self, ids: &[String]) -> Result<Vec<Preference>, OracleError>;
}

/// Adapts a per-example closure into an [`Oracle`].
pub struct FnOracle<F>(pub F);

impl<F> Oracle for FnOracle<F>
where
    F: FnMut(&str) -> Result<Preference, OracleError>,
{
    fn label(&mut self, ids: &[String]) -> Result<Vec<Preference>, OracleError> {
        ids.iter().map(|id| (self.0)(id)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub id: String,
    pub model: String,
    pub metric: String,
    pub score: f64,
}

#[derive(Debug, Clone, Default)]
pub struct ScoreTable {
    scores: HashMap<(String, String, String), f64>,
}

impl ScoreTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, record: ScoreRecord) -> Result<(), OracleError> {
        self.insert_at(0, record)
    }

    fn insert_at(&mut self, line: usize, r: ScoreRecord) -> Result<(), OracleError> {
        if !r.score.is_finite() {
            return Err(OracleError::Malformed {
                line,
                reason: format!("non-finite score for {:?}", r.id),
            });
        }
        let key = (r.id, r.model, r.metric);
        if self.scores.contains_key(&key) {
            let (id, model, metric) = key;
            return Err(OracleError::DuplicateScore {
                line,
                id,
                model,
                metric,
            });
        }
        self.scores.insert(key, r.score);
        Ok(())
    }

    pub fn read_jsonl<R: Read>(reader: R) -> Result<Self, OracleError> {
        let mut table = ScoreTable::new();
        for (i, line) in BufReader::new(reader).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: ScoreRecord = serde_json::from_str(&line).map_err(|e| OracleError::Malformed {
                line: i + 1,
                reason: e.to_string(),
            })?;
            table.insert_at(i + 1, record)?;
        }
        Ok(table)
    }

    /// Records sorted by (id, model, metric).
    pub fn records(&self) -> Vec<ScoreRecord> {
        let mut out: Vec<ScoreRecord> = self
            .scores
            .iter()
            .map(|((id, model, metric), &score)| ScoreRecord {
                id: id.clone(),
                model: model.clone(),
                metric: metric.clone(),
                score,
            })
            .collect();
        out.sort_by(|a, b| (&a.id, &a.model, &a.metric).cmp(&(&b.id, &b.model, &b.metric)));
        out
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn score(&self, id: &str, model: &str, metric: &str) -> Result<f64, OracleError> {
        self.scores
            .get(&(id.to_string(), model.to_string(), metric.to_string()))
            .copied()
            .ok_or_else(|| OracleError::MissingScore {
                id: id.to_string(),
                model: model.to_string(),
                metric: metric.to_string(),
            })
    }
}

pub fn simulated_preference(
    table: &ScoreTable,
    id: &str,
    model_a: &str,
    model_b: &str,
    metric: &str,
) -> Result<Preference, OracleError> {
    let a = table.score(id, model_a, metric)?;
    let b = table.score(id, model_b, metric)?;
    Ok(if a > b {
        Preference::A
    } else if a < b {
        Preference::B
    } else {
        Preference::Tie
    })
}

/// Winning statistics under full annotation of `pool`.
pub fn ground_truth(
    table: &ScoreTable,
    pool: &[String],
    model_a: &str,
    model_b: &str,
    metric: &str,
) -> Result<WinStats, OracleError> {
    if pool.is_empty() {
        return Err(OracleError::EmptyPool);
    }
    let labels = pool
        .iter()
        .map(|id| simulated_preference(table, id, model_a, model_b, metric))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(winning_stats(labels).expect("pool is non-empty"))
}

/// Replays stored metric scores as preference judgements.
#[derive(Debug, Clone)]
pub struct ScoreOracle<'a> {
    pub table: &'a ScoreTable,
    pub model_a: String,
    pub model_b: String,
    pub metric: String,
}

impl Oracle for ScoreOracle<'_> {
    fn label(&mut self, ids: &[String]) -> Result<Vec<Preference>, OracleError> {
        ids.iter()
            .map(|id| simulated_preference(self.table, id, &self.model_a, &self.model_b, &self.metric))
            .collect()
    }
}

/// Precomputed per-example labels, e.g. from a full replay.
impl Oracle for HashMap<String, Preference> {
    fn label(&mut self, ids: &[String]) -> Result<Vec<Preference>, OracleError> {
        ids.iter()
            .map(|id| {
                self.get(id)
                    .copied()
                    .ok_or_else(|| OracleError::Failed(format!("no label for {id:?}")))
            })
            .collect()
    }
}

/// One model output, as shown to annotators or sent to an encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputRecord {
    pub id: String,
    #[serde(default)]
    pub input: String,
    pub output: String,
}

pub fn read_outputs<R: Read>(reader: R) -> Result<Vec<OutputRecord>, OracleError> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| OracleError::Malformed {
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(rows: &[(&str, f64, f64)]) -> ScoreTable {
        let mut t = ScoreTable::new();
        for (id, a, b) in rows {
            for (model, score) in [("ma", *a), ("mb", *b)] {
                t.insert(ScoreRecord {
                    id: id.to_string(),
                    model: model.into(),
                    metric: "rouge2".into(),
                    score,
                })
                .unwrap();
            }
        }
        t
    }

    #[test]
    fn comparisons() {
        let t = table(&[("x", 0.8, 0.3), ("y", 0.5, 0.5), ("z", 0.1, 0.2)]);
        assert_eq!(
            simulated_preference(&t, "x", "ma", "mb", "rouge2").unwrap(),
            Preference::A
        );
        assert_eq!(
            simulated_preference(&t, "y", "ma", "mb", "rouge2").unwrap(),
            Preference::Tie
        );
        assert_eq!(
            simulated_preference(&t, "z", "ma", "mb", "rouge2").unwrap(),
            Preference::B
        );
        assert_eq!(
            simulated_preference(&t, "x", "mb", "ma", "rouge2").unwrap(),
            Preference::B
        );
    }

    #[test]
    fn missing_score_names_the_key() {
        let t = table(&[("x", 0.8, 0.3)]);
        match simulated_preference(&t, "x", "ma", "mc", "rouge2") {
            Err(OracleError::MissingScore { id, model, metric }) => {
                assert_eq!((id.as_str(), model.as_str(), metric.as_str()), ("x", "mc", "rouge2"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ground_truth_examples() {
        let t = table(&[("1", 1.0, 0.0), ("2", 1.0, 0.0), ("3", 0.0, 1.0), ("4", 0.5, 0.5)]);
        let ids: Vec<String> = ["1", "2", "3", "4"].iter().map(|s| s.to_string()).collect();
        let g = ground_truth(&t, &ids, "ma", "mb", "rouge2").unwrap();
        assert_eq!(g.winner, Preference::A);
        assert_eq!(g.distance, 0.25);
        let g = ground_truth(&t, &ids[..2], "ma", "mb", "rouge2").unwrap();
        assert_eq!((g.winner, g.distance), (Preference::A, 1.0));
        let g = ground_truth(&t, &ids[1..3], "ma", "mb", "rouge2").unwrap();
        assert_eq!((g.winner, g.distance), (Preference::Tie, 0.0));
        assert!(ground_truth(&t, &[], "ma", "mb", "rouge2").is_err());
    }

    #[test]
    fn parses_score_jsonl() {
        let text = "{\"id\":\"1\",\"model\":\"m\",\"metric\":\"f1\",\"score\":0.5}\n\n{\"id\":\"1\",\"model\":\"n\",\"metric\":\"f1\",\"score\":1}\n";
        let t = ScoreTable::read_jsonl(text.as_bytes()).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.score("1", "n", "f1").unwrap(), 1.0);
        let dup = "{\"id\":\"1\",\"model\":\"m\",\"metric\":\"f1\",\"score\":0.5}\n{\"id\":\"1\",\"model\":\"m\",\"metric\":\"f1\",\"score\":0.6}\n";
        assert!(matches!(
            ScoreTable::read_jsonl(dup.as_bytes()),
            Err(OracleError::DuplicateScore { line: 2, .. })
        ));
    }

    #[test]
    fn parses_outputs() {
        let text = "{\"id\":\"1\",\"input\":\"q\",\"output\":\"a\"}\n";
        let out = read_outputs(text.as_bytes()).unwrap();
        assert_eq!(out[0].output, "a");
        assert!(read_outputs("{\"id\":1}".as_bytes()).is_err());
    }
}
