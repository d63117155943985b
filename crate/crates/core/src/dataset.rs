//! Patient reports, the per-node exposure index, and the synthetic
//! benchmark simulator.
//!
//! Exposure semantics: a patient is exposed to a tree node when they take
//! at least one leaf drug from its subtree, so a parent's patient bitset
//! is always a superset of each child's.

use std::collections::HashSet;
use std::fs::File;
use std::io::Read;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::atc::{AtcTree, Cocktail, NodeId};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error reading reports: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error reading reports: {0}")]
    Csv(#[from] csv::Error),
    #[error("unknown ATC code in reports: {0}")]
    UnknownCode(String),
    #[error("non-leaf ATC code in reports: {0}")]
    NonLeafCode(String),
    #[error("report file contains no usable rows")]
    Empty,
    #[error("scenario needs at least {min} patients, got {got}")]
    TooFewPatients { min: usize, got: usize },
    #[error("scenario fractions exceed 1: {0}")]
    FractionOverflow(f64),
    #[error("scenario error: {0}")]
    Scenario(String),
}

/// One report row: the leaf drugs taken and the adverse-event flag.
#[derive(Debug, Clone)]
pub struct Patient {
    pub drugs: Vec<NodeId>,
    pub ae: bool,
}

/// N patient reports; K of them carry the adverse event.
#[derive(Debug, Clone)]
pub struct ReportSet {
    patients: Vec<Patient>,
    n_ae: usize,
}

impl ReportSet {
    pub fn new(patients: Vec<Patient>) -> Self {
        let n_ae = patients.iter().filter(|p| p.ae).count();
        ReportSet { patients, n_ae }
    }

    pub fn patients(&self) -> &[Patient] {
        &self.patients
    }

    /// N, the number of patients.
    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }

    /// K, the number of patients with the adverse event.
    pub fn n_ae(&self) -> usize {
        self.n_ae
    }

    /// Write rows as `patient_id,atc_codes,ae` CSV.
    pub fn write_csv<W: std::io::Write>(&self, tree: &AtcTree, writer: W) -> Result<(), DataError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["patient_id", "atc_codes", "ae"])?;
        for (i, p) in self.patients.iter().enumerate() {
            let mut codes: Vec<&str> = p.drugs.iter().map(|&d| tree.code(d)).collect();
            codes.sort_unstable();
            w.write_record([
                format!("p{}", i + 1).as_str(),
                codes.join(";").as_str(),
                if p.ae { "1" } else { "0" },
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// What to do with report codes that do not resolve to a tree leaf.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UnknownCodePolicy {
    /// Drop the code, counting it in [`IngestStats`].
    #[default]
    Skip,
    /// Fail the whole ingestion.
    Fail,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IngestStats {
    pub skipped_codes: usize,
    pub dropped_rows: usize,
}

/// Parse `patient_id,atc_codes,ae` CSV rows into a [`ReportSet`].
///
/// Codes within a row are deduplicated; rows with zero valid codes are
/// dropped and counted.
pub fn ingest_reports<R: Read>(
    reader: R,
    tree: &AtcTree,
    policy: UnknownCodePolicy,
) -> Result<(ReportSet, IngestStats), DataError> {
    let mut csv_reader = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let mut patients = Vec::new();
    let mut stats = IngestStats::default();
    for record in csv_reader.records() {
        let record = record?;
        let codes = record.get(1).unwrap_or("");
        let ae = matches!(record.get(2).map(str::trim), Some("1"));
        let mut drugs: Vec<NodeId> = Vec::new();
        for code in codes.split(';').map(str::trim).filter(|c| !c.is_empty()) {
            match tree.id_of(code) {
                Some(id) if tree.is_leaf(id) => drugs.push(id),
                Some(_) => match policy {
                    UnknownCodePolicy::Fail => return Err(DataError::NonLeafCode(code.into())),
                    UnknownCodePolicy::Skip => stats.skipped_codes += 1,
                },
                None => match policy {
                    UnknownCodePolicy::Fail => return Err(DataError::UnknownCode(code.into())),
                    UnknownCodePolicy::Skip => stats.skipped_codes += 1,
                },
            }
        }
        drugs.sort_unstable();
        drugs.dedup();
        if drugs.is_empty() {
            stats.dropped_rows += 1;
            continue;
        }
        patients.push(Patient { drugs, ae });
    }
    if patients.is_empty() {
        return Err(DataError::Empty);
    }
    Ok((ReportSet::new(patients), stats))
}

pub fn ingest_reports_file<P: AsRef<Path>>(
    path: P,
    tree: &AtcTree,
    policy: UnknownCodePolicy,
) -> Result<(ReportSet, IngestStats), DataError> {
    ingest_reports(File::open(path)?, tree, policy)
}

/// Fixed-size bitset over patients.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitset {
    words: Vec<u64>,
}

impl Bitset {
    pub fn new(bits: usize) -> Self {
        Bitset { words: vec![0; bits.div_ceil(64)] }
    }

    pub fn set(&mut self, bit: usize) {
        self.words[bit / 64] |= 1 << (bit % 64);
    }

    pub fn get(&self, bit: usize) -> bool {
        self.words[bit / 64] >> (bit % 64) & 1 == 1
    }

    pub fn or_assign(&mut self, other: &Bitset) {
        for (w, o) in self.words.iter_mut().zip(&other.words) {
            *w |= o;
        }
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }
}

/// Per-node patient bitsets plus the adverse-event mask.
#[derive(Debug, Clone)]
pub struct ExposureIndex {
    per_node: Vec<Bitset>,
    ae_mask: Bitset,
    n: usize,
    k: usize,
}

impl ExposureIndex {
    /// Build in one pass: set leaf bits, then OR each node into its parent
    /// in reverse preorder (children always have larger ids).
    pub fn build(reports: &ReportSet, tree: &AtcTree) -> Self {
        let n = reports.len();
        let mut per_node = vec![Bitset::new(n); tree.len()];
        let mut ae_mask = Bitset::new(n);
        for (p, patient) in reports.patients().iter().enumerate() {
            if patient.ae {
                ae_mask.set(p);
            }
            for &d in &patient.drugs {
                per_node[d].set(p);
            }
        }
        for id in (0..tree.len()).rev() {
            if let Some(parent) = tree.parent(id) {
                let (head, tail) = per_node.split_at_mut(id);
                head[parent].or_assign(&tail[0]);
            }
        }
        ExposureIndex { per_node, ae_mask, n, k: reports.n_ae() }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn node_bitset(&self, id: NodeId) -> &Bitset {
        &self.per_node[id]
    }

    pub fn ae_mask(&self) -> &Bitset {
        &self.ae_mask
    }

    pub fn node_count(&self, id: NodeId) -> usize {
        self.per_node[id].count_ones()
    }

    /// `(n_C, x)`: patients exposed to every member of the cocktail, and
    /// those among them with the adverse event.
    pub fn cocktail_counts(&self, cocktail: &Cocktail) -> (usize, usize) {
        let nodes = cocktail.nodes();
        let first = &self.per_node[nodes[0]];
        let mut n_c = 0usize;
        let mut x = 0usize;
        for wi in 0..first.words.len() {
            let mut w = first.words[wi];
            for &node in &nodes[1..] {
                w &= self.per_node[node].words[wi];
                if w == 0 {
                    break;
                }
            }
            n_c += w.count_ones() as usize;
            x += (w & self.ae_mask.words[wi]).count_ones() as usize;
        }
        (n_c, x)
    }

    /// All nodes patient `p` is exposed to.
    pub fn exposed_nodes_of_patient(&self, p: usize) -> Vec<NodeId> {
        (0..self.per_node.len()).filter(|&v| self.per_node[v].get(p)).collect()
    }

    /// Leaf drugs patient `p` takes.
    pub fn leaves_of_patient(&self, p: usize, tree: &AtcTree) -> Vec<NodeId> {
        tree.leaves().filter(|&v| self.per_node[v].get(p)).collect()
    }

    /// True when no patient is exposed to anything.
    pub fn has_no_exposure(&self) -> bool {
        self.per_node.iter().all(|b| b.count_ones() == 0)
    }
}

/// One planted high-risk cocktail in a simulation scenario.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlantedSpec {
    pub size: usize,
    pub fraction: f64,
    pub ae_prob: f64,
    /// Fixed leaf codes; sampled as random distinct leaves when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub codes: Option<Vec<String>>,
}

/// Simulation scenario configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub n_patients: usize,
    pub planted: Vec<PlantedSpec>,
    /// Fraction of patients per (size-1)-subset decoy of each planted
    /// cocktail of size >= 3.
    pub decoy_fraction_per_combo: f64,
    pub background_ae_prob: f64,
    /// Poisson mean for background cocktail sizes.
    pub lambda: f64,
    /// Adverse-event probability for decoy patients; defaults to the
    /// background probability ("no elevated risk"). Set to 0 for a strict
    /// no-risk reading.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decoy_ae_prob: Option<f64>,
}

impl ScenarioSpec {
    /// The reference scenario: two size-3 and two size-2 planted cocktails,
    /// pairwise decoys of the size-3 ones, Poisson(4) background.
    pub fn default_scenario() -> Self {
        ScenarioSpec {
            n_patients: 200_000,
            planted: vec![
                PlantedSpec { size: 3, fraction: 0.01, ae_prob: 1.0 / 100.0, codes: None },
                PlantedSpec { size: 3, fraction: 0.01, ae_prob: 1.0 / 200.0, codes: None },
                PlantedSpec { size: 2, fraction: 0.01, ae_prob: 1.0 / 100.0, codes: None },
                PlantedSpec { size: 2, fraction: 0.01, ae_prob: 1.0 / 200.0, codes: None },
            ],
            decoy_fraction_per_combo: 0.015,
            background_ae_prob: 1.0 / 15_000.0,
            lambda: 4.0,
            decoy_ae_prob: None,
        }
    }

    /// Variant with only size-2 planted cocktails.
    pub fn two_only() -> Self {
        let mut s = Self::default_scenario();
        for p in &mut s.planted {
            p.size = 2;
        }
        s
    }

    /// Variant with only size-3 planted cocktails.
    pub fn three_only() -> Self {
        let mut s = Self::default_scenario();
        for p in &mut s.planted {
            p.size = 3;
        }
        s
    }

    /// Variant mixing sizes 2, 3 and 4.
    pub fn mixed() -> Self {
        let mut s = Self::default_scenario();
        s.planted[0].size = 2;
        s.planted[1].size = 3;
        s.planted[2].size = 4;
        s.planted.truncate(3);
        s
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "default" => Some(Self::default_scenario()),
            "two-only" => Some(Self::two_only()),
            "three-only" => Some(Self::three_only()),
            "mixed" => Some(Self::mixed()),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlantedTruth {
    pub codes: Vec<String>,
    pub node_ids: Vec<NodeId>,
    pub ae_prob: f64,
    pub n_assigned: usize,
    /// Realized exposure including coincidental background takers.
    pub realized_n_c: usize,
    pub realized_x: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecoyTruth {
    pub codes: Vec<String>,
    pub node_ids: Vec<NodeId>,
    pub n_assigned: usize,
}

/// Planted/decoy composition of a simulated dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruth {
    pub planted: Vec<PlantedTruth>,
    pub decoys: Vec<DecoyTruth>,
    pub n_background: usize,
}

/// Simulate a report set under `spec`. Deterministic given the RNG stream.
pub fn simulate<R: Rng>(
    spec: &ScenarioSpec,
    tree: &AtcTree,
    rng: &mut R,
) -> Result<(ReportSet, GroundTruth), DataError> {
    const MIN_PATIENTS: usize = 1000;
    if spec.n_patients < MIN_PATIENTS {
        return Err(DataError::TooFewPatients { min: MIN_PATIENTS, got: spec.n_patients });
    }
    let leaves: Vec<NodeId> = tree.leaves().collect();
    if leaves.is_empty() {
        return Err(DataError::Scenario("tree has no leaves".into()));
    }

    // Resolve planted cocktails: fixed codes or random distinct leaves.
    let mut used: HashSet<NodeId> = HashSet::new();
    let mut planted_nodes: Vec<Vec<NodeId>> = Vec::new();
    for p in &spec.planted {
        let nodes: Vec<NodeId> = match &p.codes {
            Some(codes) => {
                let mut ids = Vec::new();
                for code in codes {
                    let id = tree
                        .id_of(code)
                        .ok_or_else(|| DataError::UnknownCode(code.clone()))?;
                    if !tree.is_leaf(id) {
                        return Err(DataError::NonLeafCode(code.clone()));
                    }
                    ids.push(id);
                }
                ids.sort_unstable();
                ids.dedup();
                if ids.len() != p.size {
                    return Err(DataError::Scenario(format!(
                        "planted cocktail has {} distinct codes, expected {}",
                        ids.len(),
                        p.size
                    )));
                }
                ids
            }
            None => {
                let free: Vec<NodeId> =
                    leaves.iter().copied().filter(|l| !used.contains(l)).collect();
                if free.len() < p.size {
                    return Err(DataError::Scenario("not enough free leaves to plant".into()));
                }
                let mut ids: Vec<NodeId> =
                    rand::seq::index::sample(rng, free.len(), p.size).iter().map(|i| free[i]).collect();
                ids.sort_unstable();
                ids
            }
        };
        used.extend(nodes.iter().copied());
        planted_nodes.push(nodes);
    }

    // Decoys: every (size-1)-subset of each planted cocktail of size >= 3.
    let mut decoy_sets: Vec<Vec<NodeId>> = Vec::new();
    for nodes in &planted_nodes {
        if nodes.len() >= 3 {
            for skip in 0..nodes.len() {
                let subset: Vec<NodeId> = nodes
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| *i != skip)
                    .map(|(_, &n)| n)
                    .collect();
                decoy_sets.push(subset);
            }
        }
    }

    let n = spec.n_patients;
    let planted_counts: Vec<usize> =
        spec.planted.iter().map(|p| (p.fraction * n as f64).round() as usize).collect();
    let decoy_count = (spec.decoy_fraction_per_combo * n as f64).round() as usize;
    let assigned: usize =
        planted_counts.iter().sum::<usize>() + decoy_count * decoy_sets.len();
    if assigned > n {
        let total = spec.planted.iter().map(|p| p.fraction).sum::<f64>()
            + spec.decoy_fraction_per_combo * decoy_sets.len() as f64;
        return Err(DataError::FractionOverflow(total));
    }
    let n_background = n - assigned;

    let decoy_ae_prob = spec.decoy_ae_prob.unwrap_or(spec.background_ae_prob);
    let poisson = Poisson::new(spec.lambda)
        .map_err(|e| DataError::Scenario(format!("bad lambda: {e}")))?;

    let mut patients: Vec<Patient> = Vec::with_capacity(n);
    for (pi, p) in spec.planted.iter().enumerate() {
        for _ in 0..planted_counts[pi] {
            patients.push(Patient {
                drugs: planted_nodes[pi].clone(),
                ae: rng.random_bool(p.ae_prob),
            });
        }
    }
    for subset in &decoy_sets {
        for _ in 0..decoy_count {
            patients.push(Patient { drugs: subset.clone(), ae: rng.random_bool(decoy_ae_prob) });
        }
    }
    for _ in 0..n_background {
        let mut size = poisson.sample(rng) as usize;
        while size == 0 {
            size = poisson.sample(rng) as usize;
        }
        size = size.min(tree.len());
        // Nodes are drawn uniformly over the whole tree; an internal draw
        // stands for its family and is recorded as a uniformly chosen leaf
        // of that subtree, which keeps the report leaf-only while exposing
        // the patient to the drawn node.
        let picks = rand::seq::index::sample(rng, tree.len(), size);
        let mut drugs: Vec<NodeId> = Vec::with_capacity(size);
        for node in picks {
            if tree.is_leaf(node) {
                drugs.push(node);
            } else {
                let (enter, exit) = tree.subtree_interval(node);
                let subtree_leaves: Vec<NodeId> =
                    (enter..exit).filter(|&v| tree.is_leaf(v)).collect();
                drugs.push(*subtree_leaves.choose(rng).expect("subtree has a leaf"));
            }
        }
        drugs.sort_unstable();
        drugs.dedup();
        patients.push(Patient { drugs, ae: rng.random_bool(spec.background_ae_prob) });
    }

    let reports = ReportSet::new(patients);
    let index = ExposureIndex::build(&reports, tree);
    let planted_truth = planted_nodes
        .iter()
        .zip(&spec.planted)
        .zip(&planted_counts)
        .map(|((nodes, p), &count)| {
            let (realized_n_c, realized_x) =
                index.cocktail_counts(&Cocktail::new(nodes.iter().copied()));
            PlantedTruth {
                codes: nodes.iter().map(|&id| tree.code(id).to_string()).collect(),
                node_ids: nodes.clone(),
                ae_prob: p.ae_prob,
                n_assigned: count,
                realized_n_c,
                realized_x,
            }
        })
        .collect();
    let decoys = decoy_sets
        .iter()
        .map(|nodes| DecoyTruth {
            codes: nodes.iter().map(|&id| tree.code(id).to_string()).collect(),
            node_ids: nodes.clone(),
            n_assigned: decoy_count,
        })
        .collect();
    Ok((reports, GroundTruth { planted: planted_truth, decoys, n_background }))
}
