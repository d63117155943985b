//! Metropolis-Hastings sampling of the null score distribution for
//! cocktails of a fixed size, and empirical p-value assignment.
//!
//! The target is exp(H(C)/T) restricted to cocktails present in the
//! dataset; its normalizing constant cancels in the acceptance ratio and
//! is never computed. Proposals mix a global uniform kernel (probability
//! p_R) with a local free-neighbor move, each applied with its own
//! Hastings correction.

use std::collections::HashMap;
use std::io::{Read, Write};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::atc::{AtcTree, Cocktail, NodeId};
use crate::dataset::ExposureIndex;
use crate::real::Real;
use crate::scoring::{CocktailCounts, Scorer};

#[derive(Debug, Error)]
pub enum McmcError {
    #[error("invalid MCMC configuration: {0}")]
    InvalidConfig(String),
    #[error("no exposed cocktail of size {0} found to start the chain")]
    NoExposedCocktail(usize),
    #[error("distribution i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("distribution csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// Shape of the "completely random movement" kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RandomKernel {
    /// Resample the whole size-k set uniformly.
    #[default]
    FullResample,
    /// Replace a single member by a uniform outside node.
    OneNode,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McmcConfig {
    /// Cocktail size the state space is restricted to.
    pub k: usize,
    /// Temperature T of the target exp(H/T).
    pub temperature: f64,
    /// Probability of the random kernel at each step.
    pub p_random: f64,
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    /// A state must be taken by at least this many patients.
    pub min_patients: usize,
    pub min_depth: u32,
    pub random_kernel: RandomKernel,
    /// Retain visited cocktails alongside their scores.
    pub keep_cocktails: bool,
}

impl McmcConfig {
    pub fn new(k: usize, temperature: f64, iterations: usize, seed: u64) -> Self {
        McmcConfig {
            k,
            temperature,
            p_random: 0.1,
            iterations,
            burn_in: iterations / 10,
            thin: 10,
            seed,
            min_patients: 1,
            min_depth: 1,
            random_kernel: RandomKernel::default(),
            keep_cocktails: false,
        }
    }

    pub fn validate(&self, tree: &AtcTree) -> Result<(), McmcError> {
        let err = |m: String| Err(McmcError::InvalidConfig(m));
        if self.k == 0 {
            return err("k must be >= 1".into());
        }
        let eligible = eligible_count(tree, self.min_depth);
        if self.k > eligible {
            return err(format!("k = {} exceeds the {} eligible nodes", self.k, eligible));
        }
        if self.temperature <= 0.0 {
            return err("temperature must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.p_random) {
            return err("p_random must lie in [0, 1]".into());
        }
        if self.iterations <= self.burn_in {
            return err("iterations must exceed burn_in".into());
        }
        if self.thin == 0 {
            return err("thin must be >= 1".into());
        }
        if self.min_patients == 0 {
            return err("min_patients must be >= 1".into());
        }
        Ok(())
    }
}

fn eligible_count(tree: &AtcTree, min_depth: u32) -> usize {
    (0..tree.len()).filter(|&id| tree.depth(id) >= min_depth).count()
}

fn ln_binom(n: usize, k: usize) -> f64 {
    (0..k).map(|i| ((n - i) as f64).ln() - ((i + 1) as f64).ln()).sum()
}

/// A proposal with the log transition densities of the kernel that
/// produced it (forward) and of the same kernel for the reverse move.
#[derive(Debug, Clone)]
pub struct Proposal {
    pub cocktail: Cocktail,
    pub log_q_forward: f64,
    pub log_q_backward: f64,
}

/// Draw one proposal from the kernel mixture.
pub fn propose<Rg: Rng>(
    current: &Cocktail,
    config: &McmcConfig,
    tree: &AtcTree,
    eligible: &[NodeId],
    rng: &mut Rg,
) -> Proposal {
    debug_assert_eq!(current.len(), config.k);
    if rng.random_bool(config.p_random) {
        match config.random_kernel {
            RandomKernel::FullResample => {
                let picks = rand::seq::index::sample(rng, eligible.len(), config.k);
                let cocktail = Cocktail::new(picks.iter().map(|i| eligible[i]));
                let lq = -ln_binom(eligible.len(), config.k);
                Proposal { cocktail, log_q_forward: lq, log_q_backward: lq }
            }
            RandomKernel::OneNode => {
                let at = current.nodes()[rng.random_range(0..config.k)];
                let replacement = loop {
                    let n = eligible[rng.random_range(0..eligible.len())];
                    if !current.contains(n) {
                        break n;
                    }
                };
                let lq = -(config.k as f64).ln() - ((eligible.len() - config.k) as f64).ln();
                Proposal {
                    cocktail: current.with_replaced(at, replacement),
                    log_q_forward: lq,
                    log_q_backward: lq,
                }
            }
        }
    } else {
        let at = current.nodes()[rng.random_range(0..config.k)];
        let neighbors: Vec<NodeId> = tree
            .free_neighbors(current, at)
            .into_iter()
            .filter(|&n| tree.depth(n) >= config.min_depth)
            .collect();
        match neighbors.choose(rng) {
            None => {
                // no legal local move from this member: self-loop
                Proposal { cocktail: current.clone(), log_q_forward: 0.0, log_q_backward: 0.0 }
            }
            Some(&to) => {
                let cocktail = current.with_replaced(at, to);
                let back: Vec<NodeId> = tree
                    .free_neighbors(&cocktail, to)
                    .into_iter()
                    .filter(|&n| tree.depth(n) >= config.min_depth)
                    .collect();
                let k_ln = (config.k as f64).ln();
                Proposal {
                    cocktail,
                    log_q_forward: -k_ln - (neighbors.len() as f64).ln(),
                    log_q_backward: -k_ln - (back.len() as f64).ln(),
                }
            }
        }
    }
}

/// ln of the Metropolis-Hastings ratio; accept when ln u is below it.
pub fn acceptance_log_ratio<R: Real>(
    h_current: R,
    h_proposal: R,
    log_q_forward: f64,
    log_q_backward: f64,
    temperature: f64,
) -> f64 {
    (h_proposal - h_current).to_f64_lossy() / temperature + log_q_backward - log_q_forward
}

/// MCMC sample of the null score distribution for size-k cocktails.
#[derive(Debug, Clone)]
pub struct NullDistribution<R: Real> {
    pub k: usize,
    pub temperature: f64,
    pub p_random: f64,
    pub iterations: usize,
    pub chains: usize,
    pub samples: Vec<R>,
    pub acceptance_rate: f64,
    pub cocktails: Option<Vec<Cocktail>>,
}

/// Serialized metadata accompanying a sample file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NullHeader {
    pub k: usize,
    pub temperature: f64,
    pub p_random: f64,
    pub iterations: usize,
    pub chains: usize,
    pub n_samples: usize,
    pub acceptance_rate: f64,
}

impl<R: Real> NullDistribution<R> {
    pub fn header(&self) -> NullHeader {
        NullHeader {
            k: self.k,
            temperature: self.temperature,
            p_random: self.p_random,
            iterations: self.iterations,
            chains: self.chains,
            n_samples: self.samples.len(),
            acceptance_rate: self.acceptance_rate,
        }
    }

    pub fn write_samples_csv<W: Write>(&self, writer: W) -> Result<(), McmcError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["H"])?;
        for s in &self.samples {
            w.write_record([crate::fmt::sig6(s.to_f64_lossy())])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_samples_csv<Rd: Read>(
        header: NullHeader,
        reader: Rd,
    ) -> Result<Self, McmcError> {
        let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let mut samples = Vec::new();
        for record in r.records() {
            let record = record?;
            let v: f64 = record.get(0).unwrap_or("0").parse().unwrap_or(0.0);
            samples.push(R::of(v));
        }
        Ok(NullDistribution {
            k: header.k,
            temperature: header.temperature,
            p_random: header.p_random,
            iterations: header.iterations,
            chains: header.chains,
            samples,
            acceptance_rate: header.acceptance_rate,
            cocktails: None,
        })
    }
}

/// Uniform starting state: a size-k subset of a random patient's exposed
/// nodes, so n_C >= 1 by construction.
fn initial_state<Rg: Rng>(
    config: &McmcConfig,
    tree: &AtcTree,
    index: &ExposureIndex,
    rng: &mut Rg,
) -> Result<Cocktail, McmcError> {
    let exposed_patients: Vec<usize> = (0..index.n())
        .filter(|&p| tree.roots().iter().any(|&r| index.node_bitset(r).get(p)))
        .collect();
    if exposed_patients.is_empty() {
        return Err(McmcError::NoExposedCocktail(config.k));
    }
    for _ in 0..10_000 {
        let p = *exposed_patients.choose(rng).expect("nonempty");
        let nodes: Vec<NodeId> = index
            .exposed_nodes_of_patient(p)
            .into_iter()
            .filter(|&v| tree.depth(v) >= config.min_depth)
            .collect();
        if nodes.len() < config.k {
            continue;
        }
        let picks = rand::seq::index::sample(rng, nodes.len(), config.k);
        let c = Cocktail::new(picks.iter().map(|i| nodes[i]));
        if index.cocktail_counts(&c).0 >= config.min_patients {
            return Ok(c);
        }
    }
    Err(McmcError::NoExposedCocktail(config.k))
}

/// Run one chain. Proposals not taken by `min_patients` patients are
/// rejected outright, conditioning the walk on presence in the dataset.
pub fn run_chain<R: Real>(
    config: &McmcConfig,
    tree: &AtcTree,
    index: &ExposureIndex,
) -> Result<NullDistribution<R>, McmcError> {
    config.validate(tree)?;
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    let scorer: Scorer<R> = Scorer::new(index.n());
    let eligible: Vec<NodeId> =
        (0..tree.len()).filter(|&id| tree.depth(id) >= config.min_depth).collect();
    let score = |c: &Cocktail, memo: &mut HashMap<Cocktail, (usize, R)>| -> (usize, R) {
        *memo.entry(c.clone()).or_insert_with(|| {
            let (n_c, x) = index.cocktail_counts(c);
            let counts = CocktailCounts { n: index.n(), k: index.k(), n_c, x };
            (n_c, scorer.score_h(&counts))
        })
    };

    let mut memo: HashMap<Cocktail, (usize, R)> = HashMap::new();
    let mut current = initial_state(config, tree, index, &mut rng)?;
    let (_, mut h_current) = score(&current, &mut memo);

    let retained = (config.iterations - config.burn_in).div_ceil(config.thin);
    let mut samples: Vec<R> = Vec::with_capacity(retained);
    let mut cocktails: Option<Vec<Cocktail>> =
        config.keep_cocktails.then(|| Vec::with_capacity(retained));
    let mut accepted = 0usize;
    for it in 0..config.iterations {
        let proposal = propose(&current, config, tree, &eligible, &mut rng);
        let (n_c, h_prop) = score(&proposal.cocktail, &mut memo);
        if n_c >= config.min_patients {
            let ratio = acceptance_log_ratio(
                h_current,
                h_prop,
                proposal.log_q_forward,
                proposal.log_q_backward,
                config.temperature,
            );
            if ratio >= 0.0 || rng.random::<f64>().ln() < ratio {
                current = proposal.cocktail;
                h_current = h_prop;
                accepted += 1;
            }
        }
        if it >= config.burn_in && (it - config.burn_in) % config.thin == 0 {
            samples.push(h_current);
            if let Some(kept) = cocktails.as_mut() {
                kept.push(current.clone());
            }
        }
    }
    Ok(NullDistribution {
        k: config.k,
        temperature: config.temperature,
        p_random: config.p_random,
        iterations: config.iterations,
        chains: 1,
        samples,
        acceptance_rate: accepted as f64 / config.iterations as f64,
        cocktails,
    })
}

/// Run several chains in parallel with derived per-chain seeds and pool
/// the post-burn-in samples in chain order.
pub fn run_chains<R: Real>(
    config: &McmcConfig,
    n_chains: usize,
    tree: &AtcTree,
    index: &ExposureIndex,
) -> Result<NullDistribution<R>, McmcError> {
    if n_chains == 0 {
        return Err(McmcError::InvalidConfig("need at least one chain".into()));
    }
    let results: Vec<Result<NullDistribution<R>, McmcError>> = (0..n_chains)
        .into_par_iter()
        .map(|chain| {
            let mut chain_config = config.clone();
            chain_config.seed = config.seed.wrapping_add(chain as u64);
            run_chain(&chain_config, tree, index)
        })
        .collect();
    let mut pooled: Option<NullDistribution<R>> = None;
    for r in results {
        let dist = r?;
        match pooled.as_mut() {
            None => pooled = Some(dist),
            Some(p) => {
                p.samples.extend(dist.samples);
                if let (Some(a), Some(b)) = (p.cocktails.as_mut(), dist.cocktails) {
                    a.extend(b);
                }
                p.acceptance_rate += dist.acceptance_rate;
            }
        }
    }
    let mut pooled = pooled.expect("n_chains >= 1");
    pooled.chains = n_chains;
    pooled.acceptance_rate /= n_chains as f64;
    Ok(pooled)
}

/// Add-one empirical p-value: (1 + #{samples >= h}) / (M + 1).
pub fn empirical_pvalue<R: Real>(h: R, samples: &[R]) -> R {
    debug_assert!(!samples.is_empty());
    let ge = samples.iter().filter(|&&s| s >= h).count();
    R::of_usize(1 + ge) / R::of_usize(samples.len() + 1)
}

/// Importance-reweighted p-value that debiases samples drawn at
/// temperature T toward the uniform null: weights are exp(-H/T).
pub fn empirical_pvalue_reweighted<R: Real>(h: R, samples: &[R], temperature: f64) -> R {
    debug_assert!(!samples.is_empty());
    let t = R::of(temperature);
    let mut num = R::zero();
    let mut den = R::zero();
    for &s in samples {
        let w = (-s / t).exp();
        den += w;
        if s >= h {
            num += w;
        }
    }
    let mean_w = den / R::of_usize(samples.len());
    (num + mean_w) / (den + mean_w)
}

/// Heuristic near-uniform temperature: 1000 times the standard deviation
/// of H over a random probe of exposed size-k cocktails.
pub fn suggest_temperature<R: Real>(
    tree: &AtcTree,
    index: &ExposureIndex,
    k: usize,
    min_depth: u32,
    seed: u64,
) -> Result<f64, McmcError> {
    let config = McmcConfig { min_depth, ..McmcConfig::new(k, 1.0, 10, seed) };
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let scorer: Scorer<R> = Scorer::new(index.n());
    let mut scores: Vec<f64> = Vec::with_capacity(200);
    for _ in 0..200 {
        let c = initial_state(&config, tree, index, &mut rng)?;
        let (n_c, x) = index.cocktail_counts(&c);
        let counts = CocktailCounts { n: index.n(), k: index.k(), n_c, x };
        scores.push(scorer.score_h(&counts).to_f64_lossy());
    }
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / scores.len() as f64;
    Ok((1000.0 * var.sqrt()).max(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{ExposureIndex, Patient, ReportSet};
    use crate::testutil::{hand_reports, toy_tree};
    use std::collections::HashMap;

    fn toy_setup() -> (AtcTree, ExposureIndex) {
        let tree = toy_tree();
        let index = ExposureIndex::build(&hand_reports(), &tree);
        (tree, index)
    }

    #[test]
    fn full_resample_density_is_uniform_over_subsets() {
        let (tree, _) = toy_setup();
        let config = McmcConfig::new(2, 1.0, 100, 1);
        let eligible: Vec<NodeId> = (0..tree.len()).collect();
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let current = Cocktail::new([4, 2]);
        let mut forced = config.clone();
        forced.p_random = 1.0;
        for _ in 0..50 {
            let p = propose(&current, &forced, &tree, &eligible, &mut rng);
            assert_eq!(p.cocktail.len(), 2);
            let expect = -ln_binom(7, 2); // 1 / C(7,2)
            assert!((p.log_q_forward - expect).abs() < 1e-12);
            assert_eq!(p.log_q_forward, p.log_q_backward);
        }
    }

    #[test]
    fn local_kernel_densities_match_neighbor_counts() {
        let (tree, _) = toy_setup();
        let mut config = McmcConfig::new(2, 1.0, 100, 1);
        config.p_random = 0.0;
        let eligible: Vec<NodeId> = (0..tree.len()).collect();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        // figure cocktail {2,3} = preorder {4,2}
        let current = Cocktail::new([4, 2]);
        // enumerate many proposals and check densities against hand counts
        let mut seen: HashMap<Cocktail, (f64, f64)> = HashMap::new();
        for _ in 0..2000 {
            let p = propose(&current, &config, &tree, &eligible, &mut rng);
            seen.insert(p.cocktail.clone(), (p.log_q_forward, p.log_q_backward));
        }
        // move 4 -> 6 gives {2,6}: forward 1/2 * 1/|{0,5,6}|
        let target = Cocktail::new([2, 6]);
        let (qf, qb) = seen[&target];
        assert!((qf - (0.5f64 * (1.0 / 3.0)).ln()).abs() < 1e-12);
        // backward from {2,6}: 6's free neighbors are {4}; density 1/2 * 1
        assert!((qb - 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn acceptance_ratio_arithmetic() {
        // equal scores, symmetric kernel
        assert_eq!(acceptance_log_ratio(2.0f64, 2.0, -1.0, -1.0, 1.0), 0.0);
        // uphill by T ln 2: ratio ln 2 > 0, always accepted
        let r = acceptance_log_ratio(1.0f64, 1.0 + 3.0 * 2f64.ln(), -1.0, -1.0, 3.0);
        assert!((r - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn downhill_acceptance_frequency_is_exp_minus_one() {
        // Monte Carlo of the accept rule at ratio = -1
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let trials = 100_000;
        let accepted = (0..trials)
            .filter(|_| {
                let ratio = acceptance_log_ratio(2.0f64, 1.0, 0.0, 0.0, 1.0);
                ratio >= 0.0 || rng.random::<f64>().ln() < ratio
            })
            .count();
        let rate = accepted as f64 / trials as f64;
        assert!((rate - (-1f64).exp()).abs() < 0.01, "rate {rate}");
    }

    #[test]
    fn chain_is_deterministic_per_seed() {
        let (tree, index) = toy_setup();
        let config = McmcConfig::new(2, 1.0, 5000, 11);
        let a: NullDistribution<f64> = run_chain(&config, &tree, &index).unwrap();
        let b: NullDistribution<f64> = run_chain(&config, &tree, &index).unwrap();
        assert_eq!(a.samples, b.samples);
        assert_eq!(a.acceptance_rate, b.acceptance_rate);
    }

    #[test]
    fn chain_never_visits_unexposed_states() {
        let (tree, index) = toy_setup();
        let mut config = McmcConfig::new(2, 1.0, 20_000, 5);
        config.keep_cocktails = true;
        let dist: NullDistribution<f64> = run_chain(&config, &tree, &index).unwrap();
        for c in dist.cocktails.as_ref().unwrap() {
            assert!(index.cocktail_counts(c).0 >= 1);
        }
    }

    #[test]
    fn degenerate_dataset_yields_constant_samples() {
        let tree = toy_tree();
        // nobody has the AE: every cocktail scores H = 0
        let reports = ReportSet::new(vec![
            Patient { drugs: vec![2, 5], ae: false },
            Patient { drugs: vec![3, 6], ae: false },
        ]);
        let index = ExposureIndex::build(&reports, &tree);
        let config = McmcConfig::new(2, 1.0, 2000, 7);
        let dist: NullDistribution<f64> = run_chain(&config, &tree, &index).unwrap();
        assert!(dist.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn no_exposed_size_k_cocktail_is_rejected_at_startup() {
        let tree = toy_tree();
        let reports = ReportSet::new(vec![Patient { drugs: vec![2], ae: false }]);
        let index = ExposureIndex::build(&reports, &tree);
        // the lone patient exposes 3 nodes (2, 1, 0); k = 4 is impossible
        let config = McmcConfig::new(4, 1.0, 100, 1);
        assert!(matches!(
            run_chain::<f64>(&config, &tree, &index),
            Err(McmcError::NoExposedCocktail(4))
        ));
    }

    /// All exposed size-2 cocktails with their exact target weights.
    fn enumerate_target(
        tree: &AtcTree,
        index: &ExposureIndex,
        temperature: f64,
    ) -> HashMap<Cocktail, f64> {
        let scorer: Scorer<f64> = Scorer::new(index.n());
        let mut weights = HashMap::new();
        for a in 0..tree.len() {
            for b in (a + 1)..tree.len() {
                let c = Cocktail::new([a, b]);
                let (n_c, x) = index.cocktail_counts(&c);
                if n_c >= 1 {
                    let h = scorer
                        .score_h(&CocktailCounts { n: index.n(), k: index.k(), n_c, x });
                    weights.insert(c, (h / temperature).exp());
                }
            }
        }
        let total: f64 = weights.values().sum();
        for w in weights.values_mut() {
            *w /= total;
        }
        weights
    }

    fn total_variation(
        empirical: &HashMap<Cocktail, f64>,
        target: &HashMap<Cocktail, f64>,
    ) -> f64 {
        let mut tv = 0.0;
        for (c, &p) in target {
            tv += (p - empirical.get(c).copied().unwrap_or(0.0)).abs();
        }
        for (c, &p) in empirical {
            if !target.contains_key(c) {
                tv += p;
            }
        }
        tv / 2.0
    }

    fn empirical_distribution(dist: &NullDistribution<f64>) -> HashMap<Cocktail, f64> {
        let kept = dist.cocktails.as_ref().unwrap();
        let mut freq: HashMap<Cocktail, f64> = HashMap::new();
        for c in kept {
            *freq.entry(c.clone()).or_insert(0.0) += 1.0;
        }
        for v in freq.values_mut() {
            *v /= kept.len() as f64;
        }
        freq
    }

    #[test]
    fn stationary_distribution_matches_enumeration_at_unit_temperature() {
        let (tree, index) = toy_setup();
        let mut config = McmcConfig::new(2, 1.0, 1_000_000, 17);
        config.keep_cocktails = true;
        config.thin = 1;
        let dist: NullDistribution<f64> = run_chain(&config, &tree, &index).unwrap();
        let target = enumerate_target(&tree, &index, 1.0);
        let tv = total_variation(&empirical_distribution(&dist), &target);
        assert!(tv <= 0.05, "total variation {tv}");
    }

    #[test]
    fn high_temperature_approaches_uniform_over_exposed() {
        let (tree, index) = toy_setup();
        let mut config = McmcConfig::new(2, 1e9, 500_000, 19);
        config.keep_cocktails = true;
        config.thin = 1;
        let dist: NullDistribution<f64> = run_chain(&config, &tree, &index).unwrap();
        let target = enumerate_target(&tree, &index, 1e9);
        // at T = 1e9 the target is numerically uniform over exposed states
        let tv = total_variation(&empirical_distribution(&dist), &target);
        assert!(tv <= 0.05, "total variation {tv}");
    }

    #[test]
    fn pooled_chains_concatenate_samples() {
        let (tree, index) = toy_setup();
        let config = McmcConfig::new(2, 1.0, 2000, 23);
        let pooled: NullDistribution<f64> = run_chains(&config, 3, &tree, &index).unwrap();
        let expected: usize = (0..3)
            .map(|chain| {
                let mut c = config.clone();
                c.seed = config.seed + chain;
                run_chain::<f64>(&c, &tree, &index).unwrap().samples.len()
            })
            .sum();
        assert_eq!(pooled.samples.len(), expected);
        assert_eq!(pooled.chains, 3);
    }

    #[test]
    fn empirical_pvalue_add_one_rule() {
        let samples: Vec<f64> = (0..999).map(|i| i as f64 / 1000.0).collect();
        // below the minimum: p = 1
        assert_eq!(empirical_pvalue(-1.0, &samples), 1.0);
        // above the maximum with M = 999
        assert_eq!(empirical_pvalue(2.0, &samples), 1.0 / 1000.0);
        // median of 1001 distinct samples
        let samples: Vec<f64> = (0..1001).map(|i| i as f64).collect();
        let p = empirical_pvalue(500.0, &samples);
        assert!((p - 0.5).abs() <= 1.0 / 1002.0 + 1e-12);
    }

    #[test]
    fn empirical_pvalue_monotone_nonincreasing() {
        let samples: Vec<f64> = vec![0.5, 1.5, 1.5, 3.0, 7.25];
        let mut prev = f64::INFINITY;
        for i in 0..100 {
            let p = empirical_pvalue(i as f64 * 0.1, &samples);
            assert!(p <= prev);
            assert!(p > 0.0 && p <= 1.0);
            prev = p;
        }
    }

    #[test]
    fn reweighted_pvalue_collapses_to_plain_at_high_temperature() {
        let samples: Vec<f64> = (0..100).map(|i| i as f64 / 10.0).collect();
        for h in [0.05f64, 2.0, 5.0, 9.9] {
            let plain = empirical_pvalue(h, &samples);
            let rw = empirical_pvalue_reweighted(h, &samples, 1e12);
            assert!((plain - rw).abs() < 1e-6, "h={h}: {plain} vs {rw}");
        }
    }

    #[test]
    fn null_distribution_csv_round_trip() {
        let (tree, index) = toy_setup();
        let config = McmcConfig::new(2, 2.0, 2000, 29);
        let dist: NullDistribution<f64> = run_chain(&config, &tree, &index).unwrap();
        let mut buf = Vec::new();
        dist.write_samples_csv(&mut buf).unwrap();
        let back: NullDistribution<f64> =
            NullDistribution::read_samples_csv(dist.header(), buf.as_slice()).unwrap();
        assert_eq!(back.samples.len(), dist.samples.len());
        assert_eq!(back.k, 2);
        for (a, b) in back.samples.iter().zip(&dist.samples) {
            assert!((a - b).abs() <= 1e-4 * b.abs().max(1.0));
        }
    }
}
