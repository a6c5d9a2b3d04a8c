mod common;

use common::{exact_sf, exact_tails, ratio};
use diffuse_core::estimator::{hypergeom_sf, risk};
use diffuse_core::Preference;

#[test]
fn matches_enumeration_on_every_small_case() {
    let mut checked = 0u64;
    let mut worst = 0.0f64;
    for population in 0..=60u64 {
        for successes in 0..=population {
            for draws in 0..=population {
                let (tails, total) = exact_tails(population, successes, draws);
                for k_minus_1 in -1..=draws as i64 {
                    let exact = ratio(tails[(k_minus_1 + 1) as usize], total);
                    let got = hypergeom_sf(k_minus_1, population, successes, draws).unwrap();
                    let err = (got - exact).abs();
                    worst = worst.max(err);
                    assert!(
                        err <= 1e-10,
                        "sf({k_minus_1}, {population}, {successes}, {draws}) = {got}, exact {exact}"
                    );
                    checked += 1;
                }
            }
        }
    }
    let expected: u64 = (0..=60u64).map(|n| (n + 1) * (0..=n).map(|d| d + 2).sum::<u64>()).sum();
    assert_eq!(checked, expected);
    assert!(worst <= 1e-10);
}

#[test]
fn worked_values() {
    assert!((hypergeom_sf(2, 10, 5, 4).unwrap() - 55.0 / 210.0).abs() < 1e-12);
    assert!((exact_sf(2, 10, 5, 4) - 55.0 / 210.0).abs() < 1e-15);
    assert_eq!(hypergeom_sf(-1, 500, 250, 10).unwrap(), 1.0);
    assert!((hypergeom_sf(7, 500, 250, 10).unwrap() - 0.0529).abs() <= 5e-4);
}

#[test]
fn risk_of_five_unanimous_votes() {
    let product: f64 = (0..5).map(|i| (250.0 - i as f64) / (500.0 - i as f64)).product();
    let got = risk(vec![Preference::A; 5], 500).unwrap();
    assert!((got - product).abs() < 1e-12, "{got} vs {product}");
    assert!((got - 0.03063).abs() < 5e-5);
}

#[test]
fn eight_of_ten_matches_the_worked_example() {
    let mut labels = vec![Preference::A; 8];
    labels.extend([Preference::B, Preference::Tie]);
    let got = risk(labels, 500).unwrap();
    assert!((got - 0.0529).abs() <= 5e-4);
    assert!((got - hypergeom_sf(7, 500, 250, 10).unwrap()).abs() < 1e-15);
}

#[test]
fn large_populations_stay_accurate() {
    // beyond the u128 range of the enumeration, compare against a
    // recurrence on consecutive pmf ratios
    for &(population, successes, draws) in &[
        (10_000u64, 5_000u64, 200u64),
        (1_000_000, 500_000, 1_000),
        (100_000, 3_000, 400),
    ] {
        let lo = draws.saturating_sub(population - successes);
        let hi = draws.min(successes);
        // pmf(j+1)/pmf(j) = (K-j)(n-j) / ((j+1)(N-K-n+j+1))
        let mut ln = vec![0.0f64; (hi - lo + 1) as usize];
        for j in lo..hi {
            let r = ((successes - j) as f64 * (draws - j) as f64)
                / ((j + 1) as f64 * (population - successes - draws + j + 1) as f64);
            ln[(j - lo + 1) as usize] = ln[(j - lo) as usize] + r.ln();
        }
        let m = ln.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = ln.iter().map(|l| (l - m).exp()).sum();
        for k in [lo + (hi - lo) / 3, (lo + hi) / 2, lo + 2 * (hi - lo) / 3] {
            let tail: f64 = ln[(k - lo) as usize..].iter().map(|l| (l - m).exp()).sum::<f64>() / z;
            let got = hypergeom_sf(k as i64 - 1, population, successes, draws).unwrap();
            assert!(
                (got - tail).abs() <= 1e-9,
                "sf({}, {population}, {successes}, {draws}) = {got} vs {tail}",
                k - 1
            );
        }
    }
}
