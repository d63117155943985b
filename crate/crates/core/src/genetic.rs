//! Genetic search over the cocktail space.
//!
//! A population of variable-size cocktails evolves under tournament
//! selection on similarity-penalized scores, subtree-exchange crossover
//! and two mutation kernels. Every cocktail ever evaluated with at least
//! one exposed patient is folded into a deduplicated archive.

use std::collections::HashMap;
use std::io::{Read, Write};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use thiserror::Error;

use crate::atc::{AtcTree, Cocktail, NodeId};
use crate::dataset::ExposureIndex;
use crate::distance::similarity;
use crate::real::Real;
use crate::scoring::{score_prr, score_rr, CocktailCounts, Scorer};

#[derive(Debug, Error)]
pub enum GaError {
    #[error("invalid GA configuration: {0}")]
    InvalidConfig(String),
    #[error("dataset has no exposed patient; nothing to search")]
    NoExposure,
    #[error("archive i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("archive csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("archive references unknown code: {0}")]
    UnknownCode(String),
}

/// Hyperparameters of one GA run.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct GaConfig {
    /// m: population size.
    pub population_size: usize,
    /// d: tournament draw size.
    pub tournament_size: usize,
    /// alpha: add/delete balance; addition probability is min(1, alpha/k).
    pub alpha: f64,
    pub iterations: usize,
    pub crossover_prob: f64,
    /// Share of local mutation versus add/delete mutation.
    pub local_mutation_prob: f64,
    pub elitism: usize,
    pub seed: u64,
    /// Nodes shallower than this never enter mutation or init proposals.
    pub min_depth: u32,
    /// Poisson mean of initial cocktail sizes.
    pub lambda_init: f64,
    /// Select tournaments on raw H instead of the penalized score.
    pub select_on_raw_h: bool,
}

impl Default for GaConfig {
    fn default() -> Self {
        GaConfig {
            population_size: 200,
            tournament_size: 4,
            alpha: 1.0,
            iterations: 200,
            crossover_prob: 0.7,
            local_mutation_prob: 0.5,
            elitism: 2,
            seed: 0,
            min_depth: 1,
            lambda_init: 2.0,
            select_on_raw_h: false,
        }
    }
}

impl GaConfig {
    pub fn validate(&self) -> Result<(), GaError> {
        let err = |m: &str| Err(GaError::InvalidConfig(m.to_string()));
        if self.population_size < 2 {
            return err("population size must be >= 2");
        }
        if self.tournament_size < 2 || self.tournament_size > self.population_size {
            return err("tournament size must satisfy 2 <= d <= m");
        }
        if self.alpha <= 0.0 {
            return err("alpha must be positive");
        }
        if !(0.0..=1.0).contains(&self.crossover_prob)
            || !(0.0..=1.0).contains(&self.local_mutation_prob)
        {
            return err("probabilities must lie in [0, 1]");
        }
        if self.elitism >= self.population_size {
            return err("elitism must be smaller than the population size");
        }
        if self.lambda_init <= 0.0 {
            return err("lambda_init must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArchiveEntry<R: Real> {
    pub n_c: usize,
    pub x: usize,
    pub h: R,
    pub iteration_found: usize,
    pub run_id: usize,
}

/// Deduplicated map of every exposed cocktail seen, with its score.
#[derive(Debug, Clone, Default)]
pub struct Archive<R: Real> {
    entries: HashMap<Cocktail, ArchiveEntry<R>>,
    /// Dataset margins, carried for RR/PRR columns in exports.
    pub n: usize,
    pub k: usize,
}

impl<R: Real> Archive<R> {
    pub fn new(n: usize, k: usize) -> Self {
        Archive { entries: HashMap::new(), n, k }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, c: &Cocktail) -> Option<&ArchiveEntry<R>> {
        self.entries.get(c)
    }

    pub fn contains(&self, c: &Cocktail) -> bool {
        self.entries.contains_key(c)
    }

    pub fn record(&mut self, cocktail: Cocktail, entry: ArchiveEntry<R>) {
        self.entries
            .entry(cocktail)
            .and_modify(|e| {
                if entry.h > e.h
                    || (entry.h == e.h
                        && (entry.run_id, entry.iteration_found) < (e.run_id, e.iteration_found))
                {
                    *e = entry;
                }
            })
            .or_insert(entry);
    }

    /// Fold `other` in, keeping the max-H entry per cocktail.
    pub fn merge(&mut self, other: Archive<R>) {
        for (c, e) in other.entries {
            self.record(c, e);
        }
    }

    /// Entries sorted by H descending, ties by cocktail for determinism.
    pub fn sorted(&self) -> Vec<(&Cocktail, &ArchiveEntry<R>)> {
        let mut v: Vec<_> = self.entries.iter().collect();
        v.sort_by(|a, b| b.1.h.partial_cmp(&a.1.h).unwrap().then_with(|| a.0.cmp(b.0)));
        v
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Cocktail, &ArchiveEntry<R>)> {
        self.entries.iter()
    }

    pub fn write_csv<W: Write>(&self, tree: &AtcTree, writer: W) -> Result<(), GaError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["cocktail_codes", "n_c", "x", "H", "rr", "prr", "iteration_found", "run_id"])?;
        for (c, e) in self.sorted() {
            let counts = CocktailCounts { n: self.n, k: self.k, n_c: e.n_c, x: e.x };
            w.write_record([
                c.codes(tree),
                e.n_c.to_string(),
                e.x.to_string(),
                crate::fmt::sig6(e.h.to_f64_lossy()),
                crate::fmt::opt_sig6(score_rr::<f64>(&counts)),
                crate::fmt::opt_sig6(score_prr::<f64>(&counts)),
                e.iteration_found.to_string(),
                e.run_id.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Read back an exported archive; RR/PRR columns are recomputed on
    /// demand and ignored here.
    pub fn read_csv<Rd: Read>(tree: &AtcTree, n: usize, k: usize, reader: Rd) -> Result<Self, GaError> {
        let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let mut archive = Archive::new(n, k);
        for record in r.records() {
            let record = record?;
            let mut nodes = Vec::new();
            for code in record.get(0).unwrap_or("").split(';') {
                nodes.push(tree.id_of(code).ok_or_else(|| GaError::UnknownCode(code.into()))?);
            }
            let parse_usize = |i: usize| record.get(i).unwrap_or("0").parse::<usize>().unwrap_or(0);
            let h = record.get(3).unwrap_or("0").parse::<f64>().unwrap_or(0.0);
            archive.record(
                Cocktail::new(nodes),
                ArchiveEntry {
                    n_c: parse_usize(1),
                    x: parse_usize(2),
                    h: R::of(h),
                    iteration_found: parse_usize(6),
                    run_id: parse_usize(7),
                },
            );
        }
        Ok(archive)
    }
}

fn eligible_nodes(tree: &AtcTree, min_depth: u32) -> Vec<NodeId> {
    (0..tree.len()).filter(|&id| tree.depth(id) >= min_depth).collect()
}

fn truncated_poisson_size<Rg: Rng>(lambda: f64, cap: usize, rng: &mut Rg) -> usize {
    let poisson = Poisson::new(lambda).expect("positive lambda");
    loop {
        let s = poisson.sample(rng) as usize;
        if s >= 1 {
            return s.min(cap);
        }
    }
}

/// Random population of exposed cocktails; sizes follow a truncated
/// Poisson(lambda_init).
pub fn init_population<Rg: Rng>(
    config: &GaConfig,
    tree: &AtcTree,
    index: &ExposureIndex,
    rng: &mut Rg,
) -> Result<Vec<Cocktail>, GaError> {
    if index.has_no_exposure() {
        return Err(GaError::NoExposure);
    }
    let eligible = eligible_nodes(tree, config.min_depth);
    if eligible.is_empty() {
        return Err(GaError::InvalidConfig("min_depth excludes every node".into()));
    }
    let exposed_patients: Vec<usize> = (0..index.n())
        .filter(|&p| tree.roots().iter().any(|&r| index.node_bitset(r).get(p)))
        .collect();
    let mut population = Vec::with_capacity(config.population_size);
    for _ in 0..config.population_size {
        let mut member = None;
        for _ in 0..1000 {
            let size = truncated_poisson_size(config.lambda_init, eligible.len(), rng);
            let candidate = Cocktail::new(
                rand::seq::index::sample(rng, eligible.len(), size).iter().map(|i| eligible[i]),
            );
            if index.cocktail_counts(&candidate).0 >= 1 {
                member = Some(candidate);
                break;
            }
        }
        let member = member.unwrap_or_else(|| {
            // fallback: a random single drug taken by a random patient
            let p = *exposed_patients.choose(rng).expect("exposure checked above");
            let leaves = index.leaves_of_patient(p, tree);
            Cocktail::new([*leaves.choose(rng).expect("exposed patient has a leaf")])
        });
        population.push(member);
    }
    Ok(population)
}

/// Exchange the parts of two cocktails falling in the subtree rooted at `v`.
///
/// An offspring that would become empty is replaced by its parent.
pub fn crossover_at(x: &Cocktail, y: &Cocktail, tree: &AtcTree, v: NodeId) -> (Cocktail, Cocktail) {
    let (enter, exit) = tree.subtree_interval(v);
    let in_subtree = |n: NodeId| enter <= n && n < exit;
    let child_x: Vec<NodeId> = x
        .iter()
        .filter(|&n| !in_subtree(n))
        .chain(y.iter().filter(|&n| in_subtree(n)))
        .collect();
    let child_y: Vec<NodeId> = y
        .iter()
        .filter(|&n| !in_subtree(n))
        .chain(x.iter().filter(|&n| in_subtree(n)))
        .collect();
    (
        Cocktail::try_new(child_x).unwrap_or_else(|| x.clone()),
        Cocktail::try_new(child_y).unwrap_or_else(|| y.clone()),
    )
}

/// Crossover at an internal node drawn uniformly.
pub fn crossover<Rg: Rng>(
    x: &Cocktail,
    y: &Cocktail,
    tree: &AtcTree,
    rng: &mut Rg,
) -> (Cocktail, Cocktail) {
    let internal: Vec<NodeId> = tree.internal_nodes().collect();
    match internal.choose(rng) {
        Some(&v) => crossover_at(x, y, tree, v),
        None => (x.clone(), y.clone()),
    }
}

/// Move a uniformly chosen member to one of its free neighbors; identity
/// when the chosen member has none.
pub fn mutate_local<Rg: Rng>(
    c: &Cocktail,
    tree: &AtcTree,
    min_depth: u32,
    rng: &mut Rg,
) -> Cocktail {
    let at = c.nodes()[rng.random_range(0..c.len())];
    let neighbors: Vec<NodeId> = tree
        .free_neighbors(c, at)
        .into_iter()
        .filter(|&n| tree.depth(n) >= min_depth)
        .collect();
    match neighbors.choose(rng) {
        Some(&n) => c.with_replaced(at, n),
        None => c.clone(),
    }
}

/// With probability min(1, alpha/k) add a uniform node outside the
/// cocktail; otherwise remove a uniform member (identity at k = 1).
pub fn mutate_add_delete<Rg: Rng>(
    c: &Cocktail,
    eligible: &[NodeId],
    alpha: f64,
    rng: &mut Rg,
) -> Cocktail {
    let k = c.len();
    let p_add = (alpha / k as f64).min(1.0);
    if rng.random_bool(p_add) {
        // every operator keeps members inside the eligible set, so k is
        // exactly the number of eligible nodes already taken
        if k >= eligible.len() {
            return c.clone();
        }
        loop {
            let n = eligible[rng.random_range(0..eligible.len())];
            if !c.contains(n) {
                return c.with_added(n);
            }
        }
    } else {
        let victim = c.nodes()[rng.random_range(0..k)];
        c.with_removed(victim).unwrap_or_else(|| c.clone())
    }
}

/// Run one seeded GA instance and return its archive.
pub fn run_ga<R: Real>(
    config: &GaConfig,
    tree: &AtcTree,
    index: &ExposureIndex,
    run_id: usize,
) -> Result<Archive<R>, GaError> {
    config.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    let scorer: Scorer<R> = Scorer::new(index.n());
    let eligible = eligible_nodes(tree, config.min_depth);
    let internal: Vec<NodeId> = tree.internal_nodes().collect();
    let mut population = init_population(config, tree, index, &mut rng)?;
    let mut archive = Archive::new(index.n(), index.k());
    // score memo across generations; cocktails recur constantly
    let mut memo: HashMap<Cocktail, (usize, usize, R)> = HashMap::new();

    for generation in 0..=config.iterations {
        // evaluation
        let scored: Vec<(usize, usize, R)> = population
            .iter()
            .map(|c| {
                *memo.entry(c.clone()).or_insert_with(|| {
                    let (n_c, x) = index.cocktail_counts(c);
                    let counts = CocktailCounts { n: index.n(), k: index.k(), n_c, x };
                    (n_c, x, scorer.score_h(&counts))
                })
            })
            .collect();
        for (c, &(n_c, x, h)) in population.iter().zip(&scored) {
            if n_c >= 1 {
                archive.record(
                    c.clone(),
                    ArchiveEntry { n_c, x, h, iteration_found: generation, run_id },
                );
            }
        }
        if generation == config.iterations {
            break;
        }

        // penalized fitness over the current population
        let m = population.len();
        let mut sim_sums = vec![R::zero(); m];
        for i in 0..m {
            sim_sums[i] += R::one(); // Sim(C, C)
            for j in (i + 1)..m {
                let s = similarity::<R>(tree, &population[i], &population[j]);
                sim_sums[i] += s;
                sim_sums[j] += s;
            }
        }
        let fitness: Vec<R> = scored
            .iter()
            .zip(&sim_sums)
            .map(|(&(_, _, h), &denom)| if config.select_on_raw_h { h } else { h / denom })
            .collect();

        // elites by raw H, deterministic tie-break on the cocktail itself
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| {
            scored[b].2
                .partial_cmp(&scored[a].2)
                .unwrap()
                .then_with(|| population[a].cmp(&population[b]))
        });
        let elites: Vec<Cocktail> =
            order.iter().take(config.elitism).map(|&i| population[i].clone()).collect();

        // mating pool via tournaments of d distinct draws
        let pool_size = config.population_size - config.elitism;
        let mut pool: Vec<&Cocktail> = Vec::with_capacity(pool_size);
        for _ in 0..pool_size {
            let draw = rand::seq::index::sample(&mut rng, m, config.tournament_size);
            let winner = draw
                .iter()
                .min_by(|&a, &b| fitness[b].partial_cmp(&fitness[a]).unwrap().then(a.cmp(&b)))
                .expect("tournament nonempty");
            pool.push(&population[winner]);
        }

        // crossover + one mutation per offspring
        let mut next: Vec<Cocktail> = elites;
        let mutate = |c: &Cocktail, rng: &mut ChaCha12Rng| {
            if rng.random_bool(config.local_mutation_prob) {
                mutate_local(c, tree, config.min_depth, rng)
            } else {
                mutate_add_delete(c, &eligible, config.alpha, rng)
            }
        };
        let mut pairs = pool.chunks(2);
        for pair in &mut pairs {
            match pair {
                [x, y] => {
                    let (a, b) = if rng.random_bool(config.crossover_prob) && !internal.is_empty() {
                        let v = internal[rng.random_range(0..internal.len())];
                        crossover_at(x, y, tree, v)
                    } else {
                        ((*x).clone(), (*y).clone())
                    };
                    next.push(mutate(&a, &mut rng));
                    next.push(mutate(&b, &mut rng));
                }
                [x] => next.push(mutate(x, &mut rng)),
                _ => unreachable!(),
            }
        }
        next.truncate(config.population_size);
        population = next;
    }
    Ok(archive)
}

/// Launch independent seeded runs in parallel and merge their archives,
/// keeping the max-H entry per cocktail. Deterministic: merge order is
/// the config order.
pub fn run_many<R: Real>(
    configs: &[GaConfig],
    tree: &AtcTree,
    index: &ExposureIndex,
) -> Result<Archive<R>, GaError> {
    let results: Vec<Result<Archive<R>, GaError>> = configs
        .par_iter()
        .enumerate()
        .map(|(run_id, config)| run_ga(config, tree, index, run_id))
        .collect();
    let mut merged = Archive::new(index.n(), index.k());
    for r in results {
        merged.merge(r?);
    }
    Ok(merged)
}
