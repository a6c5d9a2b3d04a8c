//! Winning-model statistics and the hypergeometric stopping risk.
//!
//! A comparison between models `A` and `B` reduces to a multiset of
//! per-example preference labels. [`winning_stats`] turns those labels into
//! win probabilities, a winner, and the winning distance `|p_A - p_B|`.
//!
//! [`risk`] scores how surprising the leading model's vote count would be if
//! the full pool were split 50/50 between the two models. It is the upper tail
//! of a hypergeometric distribution, evaluated by [`hypergeom_sf`] in log space.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimatorError {
    #[error("label set is empty")]
    Empty,
    #[error("label set contains only ties")]
    AllTies,
    #[error("invalid hypergeometric parameters: {0}")]
    InvalidParameters(String),
}

/// Oracle verdict for a single example.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Preference {
    A,
    B,
    Tie,
}

impl Preference {
    /// The same verdict with model roles exchanged.
    pub fn swapped(self) -> Self {
        match self {
            Preference::A => Preference::B,
            Preference::B => Preference::A,
            Preference::Tie => Preference::Tie,
        }
    }
}

impl std::fmt::Display for Preference {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Preference::A => "A",
            Preference::B => "B",
            Preference::Tie => "Tie",
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub a: usize,
    pub b: usize,
    pub tie: usize,
}

impl Counts {
    pub fn from_labels<I: IntoIterator<Item = Preference>>(labels: I) -> Self {
        let mut counts = Counts::default();
        for label in labels {
            counts.push(label);
        }
        counts
    }

    pub fn push(&mut self, label: Preference) {
        match label {
            Preference::A => self.a += 1,
            Preference::B => self.b += 1,
            Preference::Tie => self.tie += 1,
        }
    }

    pub fn extend<I: IntoIterator<Item = Preference>>(&mut self, labels: I) {
        labels.into_iter().for_each(|l| self.push(l));
    }

    pub fn total(&self) -> usize {
        self.a + self.b + self.tie
    }
}

/// Win probabilities over a labelled set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WinStats {
    pub counts: Counts,
    pub p_a: f64,
    pub p_b: f64,
    pub p_tie: f64,
    pub winner: Preference,
    pub distance: f64,
}

impl WinStats {
    pub fn from_counts(counts: Counts) -> Result<Self, EstimatorError> {
        let total = counts.total();
        if total == 0 {
            return Err(EstimatorError::Empty);
        }
        let total = total as f64;
        let p_a = counts.a as f64 / total;
        let p_b = counts.b as f64 / total;
        let p_tie = counts.tie as f64 / total;
        let winner = match counts.a.cmp(&counts.b) {
            std::cmp::Ordering::Greater => Preference::A,
            std::cmp::Ordering::Less => Preference::B,
            std::cmp::Ordering::Equal => Preference::Tie,
        };
        Ok(WinStats {
            counts,
            p_a,
            p_b,
            p_tie,
            winner,
            distance: (p_a - p_b).abs(),
        })
    }

    /// `p_A - p_B`; positive when `A` is ahead.
    pub fn margin(&self) -> f64 {
        self.p_a - self.p_b
    }
}

pub fn winning_stats<I: IntoIterator<Item = Preference>>(labels: I) -> Result<WinStats, EstimatorError> {
    WinStats::from_counts(Counts::from_labels(labels))
}

/// Probability of the leading model collecting at least its observed number
/// of votes if the pool were evenly split between the two models.
///
/// Ties count toward the sample size but never toward the leader's votes.
/// Equal vote counts carry no evidence and return `1.0`.
pub fn risk<I: IntoIterator<Item = Preference>>(labels: I, pool_size: u64) -> Result<f64, EstimatorError> {
    risk_from_counts(Counts::from_labels(labels), pool_size)
}

pub fn risk_from_counts(counts: Counts, pool_size: u64) -> Result<f64, EstimatorError> {
    if counts.total() == 0 {
        return Err(EstimatorError::Empty);
    }
    if counts.a == 0 && counts.b == 0 {
        return Err(EstimatorError::AllTies);
    }
    if counts.a == counts.b {
        return Ok(1.0);
    }
    let lead = counts.a.max(counts.b) as i64;
    hypergeom_sf(lead - 1, pool_size, pool_size / 2, counts.total() as u64)
}

/// `P(X > k_minus_1)` for `X ~ Hypergeometric(population, successes, draws)`.
///
/// Terms of the upper tail are evaluated as log-probabilities and combined
/// with log-sum-exp. Each log-pmf uses the saddle-point form of the
/// log-gamma ratios so that no large log-factorials are subtracted.
pub fn hypergeom_sf(k_minus_1: i64, population: u64, successes: u64, draws: u64) -> Result<f64, EstimatorError> {
    if successes > population || draws > population {
        return Err(EstimatorError::InvalidParameters(format!(
            "need successes <= population and draws <= population, got N={population}, K={successes}, n={draws}"
        )));
    }
    if k_minus_1 < -1 || k_minus_1 > draws as i64 {
        return Err(EstimatorError::InvalidParameters(format!(
            "k-1 must lie in [-1, {draws}], got {k_minus_1}"
        )));
    }
    let first = (k_minus_1 + 1) as u64;
    let support_lo = draws.saturating_sub(population - successes);
    let support_hi = draws.min(successes);
    if first <= support_lo {
        return Ok(1.0);
    }
    if first > support_hi {
        return Ok(0.0);
    }

    let logs: Vec<f64> = (first..=support_hi)
        .map(|x| ln_hypergeom_pmf(x, population, successes, draws))
        .collect();
    let peak = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if peak == f64::NEG_INFINITY {
        return Ok(0.0);
    }
    let scaled: f64 = logs.iter().map(|l| (l - peak).exp()).sum();
    Ok((peak + scaled.ln()).exp().min(1.0))
}

/// Natural log of `P(X = x)`; `-inf` outside the support.
pub fn ln_hypergeom_pmf(x: u64, population: u64, successes: u64, draws: u64) -> f64 {
    let failures = population - successes;
    if x > draws || x > successes || draws - x > failures {
        return f64::NEG_INFINITY;
    }
    if draws == 0 {
        return 0.0;
    }
    let total = population as f64;
    let p = draws as f64 / total;
    let q = (population - draws) as f64 / total;
    ln_binom_raw(x as f64, successes as f64, p, q) + ln_binom_raw((draws - x) as f64, failures as f64, p, q)
        - ln_binom_raw(draws as f64, total, p, q)
}

// Saddle-point binomial log-density (Loader 2000).
fn ln_binom_raw(x: f64, n: f64, p: f64, q: f64) -> f64 {
    if p == 0.0 {
        return if x == 0.0 { 0.0 } else { f64::NEG_INFINITY };
    }
    if q == 0.0 {
        return if x == n { 0.0 } else { f64::NEG_INFINITY };
    }
    if x == 0.0 {
        if n == 0.0 {
            return 0.0;
        }
        return if p < 0.1 {
            -deviance(n, n * q) - n * p
        } else {
            n * q.ln()
        };
    }
    if x == n {
        return if q < 0.1 {
            -deviance(n, n * p) - n * q
        } else {
            n * p.ln()
        };
    }
    if x < 0.0 || x > n {
        return f64::NEG_INFINITY;
    }
    let lc =
        stirling_error(n) - stirling_error(x) - stirling_error(n - x) - deviance(x, n * p) - deviance(n - x, n * q);
    let lf = LN_2PI + x.ln() + (-x / n).ln_1p();
    lc - 0.5 * lf
}

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `ln(n!) - [(n + 1/2) ln n - n + ln sqrt(2 pi)]` at integer `n`.
const STIRLING_ERROR_SMALL: [f64; 16] = [
    0.0,
    0.081_061_466_795_327_26,
    0.041_340_695_955_409_3,
    0.027_677_925_684_998_34,
    0.020_790_672_103_765_093,
    0.016_644_691_189_821_192,
    0.013_876_128_823_070_748,
    0.011_896_709_945_891_77,
    0.010_411_265_261_972_096,
    0.009_255_462_182_712_733,
    0.008_330_563_433_362_87,
    0.007_573_675_487_951_841,
    0.006_942_840_107_209_53,
    0.006_408_994_188_004_207,
    0.005_951_370_112_758_848,
    0.005_554_733_551_962_801,
];

fn stirling_error(n: f64) -> f64 {
    const S0: f64 = 1.0 / 12.0;
    const S1: f64 = 1.0 / 360.0;
    const S2: f64 = 1.0 / 1260.0;
    const S3: f64 = 1.0 / 1680.0;
    const S4: f64 = 1.0 / 1188.0;
    if n <= 15.0 {
        // callers only pass integers
        return STIRLING_ERROR_SMALL[n as usize];
    }
    let nn = n * n;
    if n > 500.0 {
        return (S0 - S1 / nn) / n;
    }
    if n > 80.0 {
        return (S0 - (S1 - S2 / nn) / nn) / n;
    }
    if n > 35.0 {
        return (S0 - (S1 - (S2 - S3 / nn) / nn) / nn) / n;
    }
    (S0 - (S1 - (S2 - (S3 - S4 / nn) / nn) / nn) / nn) / n
}

/// `x ln(x / np) + np - x`, with a series for `x` close to `np`.
fn deviance(x: f64, np: f64) -> f64 {
    if (x - np).abs() < 0.1 * (x + np) {
        let mut v = (x - np) / (x + np);
        let mut s = (x - np) * v;
        if s.abs() < f64::MIN_POSITIVE {
            return s;
        }
        let mut ej = 2.0 * x * v;
        v *= v;
        for j in 1..1000 {
            ej *= v;
            let next = s + ej / (2 * j + 1) as f64;
            if next == s {
                return next;
            }
            s = next;
        }
    }
    x * (x / np).ln() + np - x
}
