//! Hypergeometric risk score, baseline disproportionality measures and the
//! similarity-penalized fitness.
//!
//! All scores use the natural logarithm. The tail probability is computed
//! in log space from a precomputed log-factorial table, so it stays finite
//! for datasets of any size.

use thiserror::Error;

use crate::atc::{AtcTree, Cocktail};
use crate::distance::similarity;
use crate::real::Real;

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("invalid counts: x={x}, n_c={n_c}, k={k}, n={n}")]
    InvalidCounts { n: usize, k: usize, n_c: usize, x: usize },
}

/// The 2x2 ingredients of every score: population size N, AE cases K,
/// cocktail takers n_C, AE cases among takers x.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CocktailCounts {
    pub n: usize,
    pub k: usize,
    pub n_c: usize,
    pub x: usize,
}

impl CocktailCounts {
    pub fn new(n: usize, k: usize, n_c: usize, x: usize) -> Result<Self, ScoreError> {
        if x <= n_c && n_c <= n && x <= k && k <= n {
            Ok(CocktailCounts { n, k, n_c, x })
        } else {
            Err(ScoreError::InvalidCounts { n, k, n_c, x })
        }
    }
}

/// Table of ln(n!) for n up to a fixed maximum; built once per dataset.
#[derive(Debug, Clone)]
pub struct LogFactorial<R: Real> {
    table: Vec<R>,
}

impl<R: Real> LogFactorial<R> {
    pub fn new(max_n: usize) -> Self {
        let mut table = Vec::with_capacity(max_n + 1);
        // accumulate in f64 regardless of R to keep the running sum exactish
        let mut acc = 0f64;
        table.push(R::zero());
        for i in 1..=max_n {
            acc += (i as f64).ln();
            table.push(R::of(acc));
        }
        LogFactorial { table }
    }

    pub fn ln_factorial(&self, n: usize) -> R {
        self.table[n]
    }

    pub fn ln_choose(&self, n: usize, k: usize) -> R {
        debug_assert!(k <= n);
        self.table[n] - self.table[k] - self.table[n - k]
    }
}

/// Score context for a dataset of `N` patients.
#[derive(Debug, Clone)]
pub struct Scorer<R: Real> {
    lf: LogFactorial<R>,
}

impl<R: Real> Scorer<R> {
    pub fn new(max_n: usize) -> Self {
        Scorer { lf: LogFactorial::new(max_n) }
    }

    pub fn log_factorials(&self) -> &LogFactorial<R> {
        &self.lf
    }

    /// ln P(X >= x) for X ~ Hypergeometric(N, K, n_C); always <= 0.
    pub fn hypergeom_log_sf(&self, c: &CocktailCounts) -> R {
        let upper = c.k.min(c.n_c);
        let lower = (c.n_c + c.k).saturating_sub(c.n);
        if c.x <= lower {
            return R::zero();
        }
        debug_assert!(c.x <= upper, "counts invariant");
        let ln_denom = self.lf.ln_choose(c.n, c.n_c);
        // log-sum-exp over the upper tail
        let mut terms: Vec<R> = Vec::with_capacity(upper - c.x + 1);
        let mut max = R::neg_infinity();
        for m in c.x..=upper {
            let t = self.lf.ln_choose(c.k, m) + self.lf.ln_choose(c.n - c.k, c.n_c - m) - ln_denom;
            if t > max {
                max = t;
            }
            terms.push(t);
        }
        let sum: R = terms.into_iter().map(|t| (t - max).exp()).sum();
        (max + sum.ln()).min(R::zero())
    }

    /// H(C) = -ln P(X >= x); zero whenever x carries no signal.
    pub fn score_h(&self, c: &CocktailCounts) -> R {
        -self.hypergeom_log_sf(c)
    }
}

/// Relative risk (x/n_C) / (K/N); `None` when a denominator vanishes.
pub fn score_rr<R: Real>(c: &CocktailCounts) -> Option<R> {
    if c.n_c == 0 || c.k == 0 {
        return None;
    }
    let taker_rate = R::of_usize(c.x) / R::of_usize(c.n_c);
    let base_rate = R::of_usize(c.k) / R::of_usize(c.n);
    Some(taker_rate / base_rate)
}

/// Proportional reporting ratio (x/n_C) / ((K-x)/(N-n_C)).
pub fn score_prr<R: Real>(c: &CocktailCounts) -> Option<R> {
    if c.n_c == 0 || c.n_c == c.n || c.k == c.x {
        return None;
    }
    let taker_rate = R::of_usize(c.x) / R::of_usize(c.n_c);
    let rest_rate = R::of_usize(c.k - c.x) / R::of_usize(c.n - c.n_c);
    Some(taker_rate / rest_rate)
}

/// Conventional PRR signal rule: PRR >= threshold with at least 3 cases.
pub fn prr_signal<R: Real>(c: &CocktailCounts, prr: Option<R>, threshold: R) -> bool {
    matches!(prr, Some(v) if v >= threshold && c.x >= 3)
}

/// H divided by the summed similarity of `target` to the population.
///
/// `target` must be a member, so the denominator includes Sim(C, C) = 1
/// and the penalized score never exceeds the raw one.
pub fn score_h_pen<R: Real>(
    h: R,
    target: &Cocktail,
    population: &[Cocktail],
    tree: &AtcTree,
) -> R {
    let denom: R = population.iter().map(|c| similarity::<R>(tree, target, c)).sum();
    h / denom
}
