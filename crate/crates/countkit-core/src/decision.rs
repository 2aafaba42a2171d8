//! Decision functions mapping raw head outputs to integer count estimates.
//!
//! - classification: most likely class (ties toward the smaller index)
//! - Gaussian regression: round half away from zero, clamped at 0
//! - Poisson regression: posterior median via the closed-form approximation
//!   `floor(λ + 1/3 - 0.02/λ)`; the exact CDF median (smallest m with
//!   cumulative probability >= 1/2) is kept alongside as an oracle, and the
//!   distribution mode `floor(λ)` is available for comparison runs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{HeadKind, HeadOutput};

#[derive(Debug, Error)]
pub enum DecisionError {
    #[error("poisson rate must be positive, got {0}")]
    NonPositiveLambda(f64),
}

/// Which rule maps a Poisson rate to an integer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoissonRule {
    /// Posterior median (the default).
    Median,
    /// Distribution mode floor(λ); kept for comparison runs only.
    Mode,
}

/// An integer count estimate together with the raw output it came from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CountEstimate {
    pub k_hat: usize,
    pub head: HeadKind,
    pub raw: HeadOutput,
}

/// Index of the maximum probability; ties break toward the smaller index.
pub fn decide_classification(probs: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, &p) in probs.iter().enumerate().skip(1) {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

/// Round half away from zero, clamped below at 0.
pub fn decide_gaussian(y: f64) -> usize {
    debug_assert!(y.is_finite());
    y.round().max(0.0) as usize
}

/// Poisson posterior median via the closed-form approximation
/// `floor(λ + 1/3 - 0.02/λ)`, clamped below at 0.
pub fn decide_poisson(lambda: f64) -> Result<usize, DecisionError> {
    if !(lambda > 0.0) {
        return Err(DecisionError::NonPositiveLambda(lambda));
    }
    let m = (lambda + 1.0 / 3.0 - 0.02 / lambda).floor();
    Ok(m.max(0.0) as usize)
}

/// Distribution mode floor(λ).
pub fn decide_poisson_mode(lambda: f64) -> Result<usize, DecisionError> {
    if !(lambda > 0.0) {
        return Err(DecisionError::NonPositiveLambda(lambda));
    }
    Ok(lambda.floor().max(0.0) as usize)
}

/// Exact Poisson median: the smallest m with CDF(m) >= 1/2.
///
/// Probabilities follow the recurrence `p_{k+1} = p_k * λ / (k + 1)`, carried
/// in log space with a running log-sum-exp so rates up to 1e4 stay stable.
/// A 1e-12 slack in log domain absorbs exact-boundary cases such as
/// λ = ln 2, where CDF(0) is exactly one half.
pub fn poisson_median_exact(lambda: f64) -> usize {
    assert!(lambda > 0.0, "lambda must be positive");
    let ln_half = 0.5f64.ln();
    let ln_lambda = lambda.ln();
    let mut ln_p = -lambda; // ln P(0)
    let mut ln_cdf = ln_p;
    let mut k = 0usize;
    while ln_cdf < ln_half - 1e-12 {
        k += 1;
        ln_p += ln_lambda - (k as f64).ln();
        // ln_cdf = logaddexp(ln_cdf, ln_p)
        let (hi, lo) = if ln_cdf >= ln_p { (ln_cdf, ln_p) } else { (ln_p, ln_cdf) };
        ln_cdf = hi + (lo - hi).exp().ln_1p();
        if k > 1_000_000 {
            break; // unreachable for sane rates
        }
    }
    k
}

/// Map a head output to a count estimate with the default rules.
pub fn decide(output: &HeadOutput) -> Result<CountEstimate, DecisionError> {
    decide_with(output, PoissonRule::Median)
}

pub fn decide_with(
    output: &HeadOutput,
    poisson_rule: PoissonRule,
) -> Result<CountEstimate, DecisionError> {
    let (k_hat, head) = match output {
        HeadOutput::Classification(p) => (decide_classification(p), HeadKind::Classification),
        HeadOutput::Gaussian(y) => (decide_gaussian(*y), HeadKind::GaussianRegression),
        HeadOutput::Poisson(lambda) => {
            let k = match poisson_rule {
                PoissonRule::Median => decide_poisson(*lambda)?,
                PoissonRule::Mode => decide_poisson_mode(*lambda)?,
            };
            (k, HeadKind::PoissonRegression)
        }
    };
    Ok(CountEstimate { k_hat, head, raw: output.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classification_argmax_and_ties() {
        let mut one_hot = vec![0.0; 11];
        one_hot[4] = 1.0;
        assert_eq!(decide_classification(&one_hot), 4);
        assert_eq!(decide_classification(&vec![1.0 / 11.0; 11]), 0);
        assert_eq!(decide_classification(&[0.1, 0.2, 0.7]), 2);
    }

    #[test]
    fn gaussian_rounding() {
        assert_eq!(decide_gaussian(3.2), 3);
        assert_eq!(decide_gaussian(2.5), 3); // half away from zero
        assert_eq!(decide_gaussian(-0.4), 0); // clamp
        assert_eq!(decide_gaussian(-5.0), 0);
        assert_eq!(decide_gaussian(0.49), 0);
    }

    #[test]
    fn poisson_decision_examples() {
        assert_eq!(decide_poisson(1e-9).unwrap(), 0);
        assert_eq!(decide_poisson(4.0).unwrap(), 4);
        assert_eq!(poisson_median_exact(4.0), 4);
        assert_eq!(decide_poisson(0.5).unwrap(), 0);
        assert_eq!(poisson_median_exact(0.5), 0);
        assert!(decide_poisson(0.0).is_err());
        assert!(decide_poisson(-1.0).is_err());
        assert_eq!(decide_poisson_mode(2.7).unwrap(), 2);
    }

    #[test]
    fn exact_median_known_values() {
        // λ = ln 2: P(0) = 1/2 exactly, so the median is 0.
        assert_eq!(poisson_median_exact(2.0f64.ln()), 0);
        // λ = 2: CDF = 0.135, 0.406, 0.677 -> median 2.
        assert_eq!(poisson_median_exact(2.0), 2);
        // large rate stays stable
        let m = poisson_median_exact(1e4);
        assert!((m as f64 - 1e4).abs() < 2.0, "median {m}");
    }

    /// Brute-force argmin over k_hat of the expected absolute error
    /// sum_k |k_hat - k| P(k | λ).
    fn median_by_expected_abs_error(lambda: f64) -> usize {
        let k_top = (3.0 * lambda + 20.0).ceil() as usize;
        // probabilities by direct recurrence
        let mut probs = Vec::with_capacity(k_top + 1);
        let mut p = (-lambda).exp();
        probs.push(p);
        for k in 1..=k_top {
            p *= lambda / k as f64;
            probs.push(p);
        }
        let mut best = 0usize;
        let mut best_cost = f64::INFINITY;
        for k_hat in 0..=k_top {
            let cost: f64 = probs
                .iter()
                .enumerate()
                .map(|(k, &pk)| (k_hat as f64 - k as f64).abs() * pk)
                .sum();
            if cost < best_cost {
                best_cost = cost;
                best = k_hat;
            }
        }
        best
    }

    #[test]
    fn exact_median_minimizes_expected_absolute_error() {
        for &lambda in &[0.1, 0.5, 1.0, 2.0, 5.0, 10.0] {
            assert_eq!(
                poisson_median_exact(lambda),
                median_by_expected_abs_error(lambda),
                "lambda {lambda}"
            );
        }
    }

    #[test]
    fn approximation_tracks_exact_median_on_grid() {
        let mut disagreements = 0usize;
        let mut total = 0usize;
        for i in 1..=400 {
            let lambda = i as f64 * 0.05;
            let approx = decide_poisson(lambda).unwrap();
            let exact = poisson_median_exact(lambda);
            total += 1;
            if approx != exact {
                disagreements += 1;
                assert!(
                    approx.abs_diff(exact) <= 1,
                    "lambda {lambda}: approx {approx}, exact {exact}"
                );
                // disagreements only occur where the approximation sits on an
                // integer boundary
                let frac = lambda + 1.0 / 3.0 - 0.02 / lambda;
                let dist = (frac - frac.round()).abs();
                assert!(
                    dist < 1e-3,
                    "lambda {lambda}: non-boundary disagreement (distance {dist})"
                );
            }
        }
        assert!(
            disagreements * 100 <= total,
            "{disagreements} of {total} grid points disagree"
        );
    }

    #[test]
    fn decisions_are_monotone() {
        // Gaussian and Poisson rules never decrease in their scalar input.
        let mut prev_g = 0usize;
        let mut prev_p = 0usize;
        let mut y = -2.0;
        while y < 20.0 {
            let g = decide_gaussian(y);
            assert!(g >= prev_g);
            prev_g = g;
            if y > 0.0 {
                let p = decide_poisson(y).unwrap();
                assert!(p >= prev_p);
                prev_p = p;
            }
            y += 0.01;
        }

        // Classification: moving mass to a higher index never lowers k_hat.
        let base = vec![0.5, 0.3, 0.2];
        let shifted = vec![0.2, 0.3, 0.5];
        assert!(decide_classification(&shifted) >= decide_classification(&base));
    }

    #[test]
    fn decide_dispatches_by_head() {
        let e = decide(&HeadOutput::Classification(vec![0.1, 0.8, 0.1])).unwrap();
        assert_eq!(e.k_hat, 1);
        assert_eq!(e.head, HeadKind::Classification);
        let e = decide(&HeadOutput::Gaussian(2.6)).unwrap();
        assert_eq!(e.k_hat, 3);
        let e = decide(&HeadOutput::Poisson(4.0)).unwrap();
        assert_eq!(e.k_hat, 4);
        let e = decide_with(&HeadOutput::Poisson(4.9), PoissonRule::Mode).unwrap();
        assert_eq!(e.k_hat, 4);
    }
}
