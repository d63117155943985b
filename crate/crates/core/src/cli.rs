//! Batch pipeline: simulate reports, search for cocktails, sample the
//! null score distribution, and assemble the final report.
//!
//! Every subcommand writes a `manifest.json` next to its outputs with the
//! resolved configuration, the seeds used and SHA-256 digests of every
//! input file, so any run can be reproduced from its output directory.
//!
//! Exit codes: 0 success, 2 usage error, 3 bad input data, 4 internal
//! failure.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::atc::AtcTree;
use crate::cluster::{
    cluster_report, dbscan, default_eps, embed_2d, read_tags, DbscanParams, FamilyTag,
};
use crate::dataset::{ingest_reports_file, simulate, ExposureIndex, ScenarioSpec, UnknownCodePolicy};
use crate::distance::distance_matrix;
use crate::fmt::{opt_sig6, sig6};
use crate::genetic::{run_many, Archive, GaConfig};
use crate::mcmc::{
    empirical_pvalue, empirical_pvalue_reweighted, run_chains, suggest_temperature, McmcConfig,
    NullDistribution, NullHeader,
};
use crate::scoring::{score_prr, score_rr, CocktailCounts};
use crate::Scalar;

pub const EXIT_DATA: i32 = 3;
pub const EXIT_INTERNAL: i32 = 4;

#[derive(Debug)]
pub enum CliError {
    /// Bad or missing input: exit 3.
    Data(String),
    /// Everything else: exit 4.
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Data(_) => EXIT_DATA,
            CliError::Internal(_) => EXIT_INTERNAL,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Data(m) | CliError::Internal(m) => m,
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn data_err<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Data(e.to_string())
}

fn internal_err<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Internal(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "cocktail-miner", version, about = "Detect high-risk drug cocktails in case safety reports")]
pub struct Cli {
    /// Print the resolved configuration as JSON and exit without running.
    #[arg(long, global = true)]
    pub dump_config: bool,
    /// Worker thread count; falls back to COCKTAIL_MINER_THREADS, then all cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic report set with known planted cocktails.
    Simulate(SimulateArgs),
    /// Run the genetic search and export the archive of scored cocktails.
    Search(SearchArgs),
    /// Sample null score distributions by MCMC, one per cocktail size.
    Sample(SampleArgs),
    /// Assign p-values, cluster the significant cocktails and export tables.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Drug hierarchy CSV (code,label).
    #[arg(long)]
    pub tree: PathBuf,
    /// Output directory; created if missing.
    #[arg(long)]
    pub out: PathBuf,
    /// Scenario preset name (default, two-only, three-only, mixed) or a
    /// JSON scenario file.
    #[arg(long, default_value = "default")]
    pub scenario: String,
    /// Override the scenario's patient count.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[arg(long)]
    pub tree: PathBuf,
    /// Case reports CSV (patient_id,atc_codes,ae).
    #[arg(long)]
    pub reports: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON file with search settings; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Independent seeded runs to merge.
    #[arg(long, default_value_t = 8)]
    pub runs: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub population: Option<usize>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub tournament_size: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub crossover_prob: Option<f64>,
    #[arg(long)]
    pub local_mutation_prob: Option<f64>,
    #[arg(long)]
    pub elitism: Option<usize>,
    #[arg(long)]
    pub min_depth: Option<u32>,
    #[arg(long)]
    pub lambda_init: Option<f64>,
    /// Select tournament winners on raw score instead of the
    /// similarity-penalized one.
    #[arg(long)]
    pub select_raw_h: bool,
    /// Unknown drug codes in reports: skip or fail.
    #[arg(long, default_value = "skip")]
    pub unknown_codes: UnknownCodes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum UnknownCodes {
    Skip,
    Fail,
}

impl From<UnknownCodes> for UnknownCodePolicy {
    fn from(u: UnknownCodes) -> Self {
        match u {
            UnknownCodes::Skip => UnknownCodePolicy::Skip,
            UnknownCodes::Fail => UnknownCodePolicy::Fail,
        }
    }
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub tree: PathBuf,
    #[arg(long)]
    pub reports: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Cocktail sizes to sample, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "2,3")]
    pub sizes: Vec<usize>,
    /// Sampling temperature; derived from a score probe when omitted.
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long, default_value_t = 200_000)]
    pub iterations: usize,
    /// Defaults to a tenth of the iterations.
    #[arg(long)]
    pub burn_in: Option<usize>,
    #[arg(long, default_value_t = 10)]
    pub thin: usize,
    #[arg(long, default_value_t = 4)]
    pub chains: usize,
    /// Probability of the global uniform move at each step.
    #[arg(long, default_value_t = 0.1)]
    pub p_random: f64,
    #[arg(long, default_value_t = 1)]
    pub min_patients: usize,
    #[arg(long, default_value_t = 1)]
    pub min_depth: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "skip")]
    pub unknown_codes: UnknownCodes,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub tree: PathBuf,
    #[arg(long)]
    pub reports: PathBuf,
    /// Archive CSV produced by `search`.
    #[arg(long)]
    pub archive: PathBuf,
    /// Directory holding null_k{K}.csv / null_k{K}.json from `sample`.
    #[arg(long)]
    pub null_dir: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Keep cocktails with p-value below this.
    #[arg(long, default_value_t = 0.05)]
    pub p_threshold: f64,
    /// Importance-reweight p-values toward the uniform null.
    #[arg(long)]
    pub reweight: bool,
    /// Neighborhood radius; lower quartile of pairwise distances when omitted.
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long, default_value_t = 4)]
    pub min_pts: usize,
    /// Drug family tags CSV (family,prefix) for cluster summaries.
    #[arg(long)]
    pub tags: Option<PathBuf>,
    /// Keep only the strongest candidates before p-value screening.
    #[arg(long)]
    pub top: Option<usize>,
    /// Restrict to these cocktail sizes, comma separated; all by default.
    #[arg(long, value_delimiter = ',')]
    pub sizes: Vec<usize>,
    #[arg(long, default_value = "skip")]
    pub unknown_codes: UnknownCodes,
}

/// Reproducibility record written next to every output set.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool_version: &'static str,
    pub subcommand: String,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    /// Input path -> SHA-256 of its bytes.
    pub inputs: BTreeMap<String, String>,
    /// Wall-clock creation time; the only field that varies between
    /// otherwise identical runs.
    pub created_unix: u64,
}

fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(data_err)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

fn write_manifest(
    out: &Path,
    subcommand: &str,
    config: serde_json::Value,
    seeds: Vec<u64>,
    input_paths: &[&Path],
) -> CliResult {
    let mut inputs = BTreeMap::new();
    for p in input_paths {
        inputs.insert(p.display().to_string(), sha256_file(p)?);
    }
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION"),
        subcommand: subcommand.to_string(),
        config,
        seeds,
        inputs,
        created_unix: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    };
    let f = File::create(out.join("manifest.json")).map_err(internal_err)?;
    serde_json::to_writer_pretty(BufWriter::new(f), &manifest).map_err(internal_err)?;
    Ok(())
}

fn ensure_out_dir(out: &Path) -> CliResult {
    std::fs::create_dir_all(out).map_err(data_err)
}

fn load_tree(path: &Path) -> CliResult<AtcTree> {
    AtcTree::load_file(path).map_err(data_err)
}

fn load_reports(
    path: &Path,
    tree: &AtcTree,
    policy: UnknownCodes,
) -> CliResult<(crate::dataset::ReportSet, ExposureIndex)> {
    let (reports, stats) = ingest_reports_file(path, tree, policy.into()).map_err(data_err)?;
    if stats.skipped_codes > 0 || stats.dropped_rows > 0 {
        eprintln!(
            "warning: skipped {} unknown codes, dropped {} empty rows",
            stats.skipped_codes, stats.dropped_rows
        );
    }
    let index = ExposureIndex::build(&reports, tree);
    Ok((reports, index))
}

fn config_threads(cli_threads: Option<usize>) -> Option<usize> {
    cli_threads.or_else(|| {
        std::env::var("COCKTAIL_MINER_THREADS").ok().and_then(|v| v.parse().ok())
    })
}

/// Parse arguments, run, and map errors to exit codes. Usage errors exit
/// with code 2 inside clap.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap exits 2 on usage errors, 0 on --help/--version
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    if let Some(n) = config_threads(cli.threads) {
        // a prior global pool (e.g. in tests) is fine to keep
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let result = match &cli.command {
        Command::Simulate(args) => cmd_simulate(args, cli.dump_config),
        Command::Search(args) => cmd_search(args, cli.dump_config),
        Command::Sample(args) => cmd_sample(args, cli.dump_config),
        Command::Report(args) => cmd_report(args, cli.dump_config),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

fn dump_and_exit(config: &impl Serialize) -> CliResult {
    let s = serde_json::to_string_pretty(config).map_err(internal_err)?;
    println!("{s}");
    Ok(())
}

// ---------------------------------------------------------------- simulate

#[derive(Debug, Serialize)]
struct SimulateConfig<'a> {
    tree: &'a Path,
    out: &'a Path,
    scenario: ScenarioSpec,
    seed: u64,
}

fn resolve_scenario(arg: &str, n_override: Option<usize>) -> CliResult<ScenarioSpec> {
    let mut spec = match ScenarioSpec::preset(arg) {
        Some(s) => s,
        None => {
            let f = File::open(arg)
                .map_err(|e| CliError::Data(format!("scenario {arg:?}: {e}")))?;
            serde_json::from_reader(f)
                .map_err(|e| CliError::Data(format!("scenario {arg:?}: {e}")))?
        }
    };
    if let Some(n) = n_override {
        spec.n_patients = n;
    }
    Ok(spec)
}

fn cmd_simulate(args: &SimulateArgs, dump: bool) -> CliResult {
    let scenario = resolve_scenario(&args.scenario, args.n)?;
    let config = SimulateConfig {
        tree: &args.tree,
        out: &args.out,
        scenario: scenario.clone(),
        seed: args.seed,
    };
    if dump {
        return dump_and_exit(&config);
    }
    let tree = load_tree(&args.tree)?;
    let mut rng = ChaCha12Rng::seed_from_u64(args.seed);
    let (reports, truth) = simulate(&scenario, &tree, &mut rng).map_err(data_err)?;
    ensure_out_dir(&args.out)?;
    let f = File::create(args.out.join("reports.csv")).map_err(internal_err)?;
    reports.write_csv(&tree, BufWriter::new(f)).map_err(internal_err)?;
    let f = File::create(args.out.join("ground_truth.json")).map_err(internal_err)?;
    serde_json::to_writer_pretty(BufWriter::new(f), &truth).map_err(internal_err)?;
    write_manifest(
        &args.out,
        "simulate",
        serde_json::to_value(&config).map_err(internal_err)?,
        vec![args.seed],
        &[&args.tree],
    )?;
    println!(
        "simulated {} patients ({} planted cocktails) into {}",
        reports.len(),
        truth.planted.len(),
        args.out.display()
    );
    Ok(())
}

// ------------------------------------------------------------------ search

#[derive(Debug, Serialize)]
struct SearchConfig<'a> {
    tree: &'a Path,
    reports: &'a Path,
    out: &'a Path,
    runs: usize,
    ga: GaConfig,
}

fn resolve_ga_config(args: &SearchArgs) -> CliResult<GaConfig> {
    let mut ga = match &args.config {
        None => GaConfig::default(),
        Some(path) => {
            // partial files are fine: absent fields keep their defaults
            let base = serde_json::to_value(GaConfig::default()).map_err(internal_err)?;
            let f = File::open(path).map_err(data_err)?;
            let overlay: serde_json::Value = serde_json::from_reader(f).map_err(data_err)?;
            let merged = merge_json(base, overlay);
            serde_json::from_value(merged).map_err(data_err)?
        }
    };
    if let Some(v) = args.seed {
        ga.seed = v;
    }
    if let Some(v) = args.population {
        ga.population_size = v;
    }
    if let Some(v) = args.iterations {
        ga.iterations = v;
    }
    if let Some(v) = args.tournament_size {
        ga.tournament_size = v;
    }
    if let Some(v) = args.alpha {
        ga.alpha = v;
    }
    if let Some(v) = args.crossover_prob {
        ga.crossover_prob = v;
    }
    if let Some(v) = args.local_mutation_prob {
        ga.local_mutation_prob = v;
    }
    if let Some(v) = args.elitism {
        ga.elitism = v;
    }
    if let Some(v) = args.min_depth {
        ga.min_depth = v;
    }
    if let Some(v) = args.lambda_init {
        ga.lambda_init = v;
    }
    if args.select_raw_h {
        ga.select_on_raw_h = true;
    }
    ga.validate().map_err(data_err)?;
    Ok(ga)
}

/// Overlay non-null fields of `overlay` onto `base`, recursively.
fn merge_json(base: serde_json::Value, overlay: serde_json::Value) -> serde_json::Value {
    match (base, overlay) {
        (serde_json::Value::Object(mut b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                let merged = match b.remove(&k) {
                    Some(existing) => merge_json(existing, v),
                    None => v,
                };
                b.insert(k, merged);
            }
            serde_json::Value::Object(b)
        }
        (b, serde_json::Value::Null) => b,
        (_, o) => o,
    }
}

fn cmd_search(args: &SearchArgs, dump: bool) -> CliResult {
    if args.runs == 0 {
        return Err(CliError::Data("--runs must be >= 1".into()));
    }
    let ga = resolve_ga_config(args)?;
    let config = SearchConfig {
        tree: &args.tree,
        reports: &args.reports,
        out: &args.out,
        runs: args.runs,
        ga: ga.clone(),
    };
    if dump {
        return dump_and_exit(&config);
    }
    let tree = load_tree(&args.tree)?;
    let (_, index) = load_reports(&args.reports, &tree, args.unknown_codes)?;
    let configs: Vec<GaConfig> = (0..args.runs)
        .map(|i| GaConfig { seed: ga.seed.wrapping_add(i as u64), ..ga.clone() })
        .collect();
    let seeds: Vec<u64> = configs.iter().map(|c| c.seed).collect();
    let archive: Archive<Scalar> = run_many(&configs, &tree, &index).map_err(data_err)?;
    ensure_out_dir(&args.out)?;
    let f = File::create(args.out.join("archive.csv")).map_err(internal_err)?;
    archive.write_csv(&tree, BufWriter::new(f)).map_err(internal_err)?;
    let mut input_paths: Vec<&Path> = vec![&args.tree, &args.reports];
    if let Some(c) = &args.config {
        input_paths.push(c);
    }
    write_manifest(
        &args.out,
        "search",
        serde_json::to_value(&config).map_err(internal_err)?,
        seeds,
        &input_paths,
    )?;
    println!("archived {} cocktails into {}", archive.len(), args.out.display());
    Ok(())
}

// ------------------------------------------------------------------ sample

#[derive(Debug, Serialize)]
struct SampleConfig<'a> {
    tree: &'a Path,
    reports: &'a Path,
    out: &'a Path,
    sizes: Vec<usize>,
    /// Per size, resolved after the probe when not given explicitly.
    temperatures: Vec<f64>,
    iterations: usize,
    burn_in: usize,
    thin: usize,
    chains: usize,
    p_random: f64,
    min_patients: usize,
    min_depth: u32,
    seed: u64,
}

pub fn null_file_stem(k: usize) -> String {
    format!("null_k{k}")
}

fn cmd_sample(args: &SampleArgs, dump: bool) -> CliResult {
    if args.sizes.is_empty() || args.sizes.contains(&0) {
        return Err(CliError::Data("--sizes must list sizes >= 1".into()));
    }
    let burn_in = args.burn_in.unwrap_or(args.iterations / 10);
    let tree = load_tree(&args.tree)?;
    let (_, index) = load_reports(&args.reports, &tree, args.unknown_codes)?;
    // sizes with no exposed cocktail are skipped with a warning
    let mut resolved: Vec<(usize, f64)> = Vec::new();
    for &k in &args.sizes {
        let t = match args.temperature {
            Some(t) => t,
            None => match suggest_temperature::<Scalar>(&tree, &index, k, args.min_depth, args.seed)
            {
                Ok(t) => t,
                Err(crate::mcmc::McmcError::NoExposedCocktail(_)) => {
                    eprintln!("warning: no exposed cocktail of size {k}; size skipped");
                    continue;
                }
                Err(e) => return Err(data_err(e)),
            },
        };
        resolved.push((k, t));
    }
    let config = SampleConfig {
        tree: &args.tree,
        reports: &args.reports,
        out: &args.out,
        sizes: resolved.iter().map(|&(k, _)| k).collect(),
        temperatures: resolved.iter().map(|&(_, t)| t).collect(),
        iterations: args.iterations,
        burn_in,
        thin: args.thin,
        chains: args.chains,
        p_random: args.p_random,
        min_patients: args.min_patients,
        min_depth: args.min_depth,
        seed: args.seed,
    };
    if dump {
        return dump_and_exit(&config);
    }
    ensure_out_dir(&args.out)?;
    let mut seeds = Vec::new();
    for &(k, t) in &resolved {
        // size-specific seed block so adding a size never shifts others
        let base_seed = args.seed.wrapping_add(1000 * k as u64);
        let mcmc = McmcConfig {
            k,
            temperature: t,
            p_random: args.p_random,
            iterations: args.iterations,
            burn_in,
            thin: args.thin,
            seed: base_seed,
            min_patients: args.min_patients,
            min_depth: args.min_depth,
            random_kernel: Default::default(),
            keep_cocktails: false,
        };
        seeds.extend((0..args.chains as u64).map(|c| base_seed.wrapping_add(c)));
        let dist: NullDistribution<Scalar> = match run_chains(&mcmc, args.chains, &tree, &index) {
            Ok(d) => d,
            Err(crate::mcmc::McmcError::NoExposedCocktail(_)) => {
                eprintln!("warning: no exposed cocktail of size {k}; size skipped");
                continue;
            }
            Err(e) => return Err(data_err(e)),
        };
        let stem = null_file_stem(k);
        let f = File::create(args.out.join(format!("{stem}.csv"))).map_err(internal_err)?;
        dist.write_samples_csv(BufWriter::new(f)).map_err(internal_err)?;
        let f = File::create(args.out.join(format!("{stem}.json"))).map_err(internal_err)?;
        serde_json::to_writer_pretty(BufWriter::new(f), &dist.header()).map_err(internal_err)?;
        println!(
            "size {k}: {} samples at T = {} (acceptance {:.3})",
            dist.samples.len(),
            sig6(t),
            dist.acceptance_rate
        );
    }
    write_manifest(
        &args.out,
        "sample",
        serde_json::to_value(&config).map_err(internal_err)?,
        seeds,
        &[&args.tree, &args.reports],
    )?;
    Ok(())
}

// ------------------------------------------------------------------ report

#[derive(Debug, Serialize)]
struct ReportConfig<'a> {
    tree: &'a Path,
    reports: &'a Path,
    archive: &'a Path,
    null_dir: &'a Path,
    out: &'a Path,
    p_threshold: f64,
    reweight: bool,
    eps: Option<f64>,
    min_pts: usize,
    tags: Option<&'a Path>,
    top: Option<usize>,
    sizes: Vec<usize>,
}

fn load_null(dir: &Path, k: usize) -> CliResult<Option<NullDistribution<Scalar>>> {
    let stem = null_file_stem(k);
    let csv_path = dir.join(format!("{stem}.csv"));
    let json_path = dir.join(format!("{stem}.json"));
    if !csv_path.exists() {
        return Ok(None);
    }
    let header: NullHeader = serde_json::from_reader(
        File::open(&json_path)
            .map_err(|e| CliError::Data(format!("{}: {e}", json_path.display())))?,
    )
    .map_err(data_err)?;
    let dist = NullDistribution::read_samples_csv(
        header,
        File::open(&csv_path).map_err(data_err)?,
    )
    .map_err(data_err)?;
    if dist.samples.is_empty() {
        return Err(CliError::Data(format!("{} holds no samples", csv_path.display())));
    }
    Ok(Some(dist))
}

fn cmd_report(args: &ReportArgs, dump: bool) -> CliResult {
    let config = ReportConfig {
        tree: &args.tree,
        reports: &args.reports,
        archive: &args.archive,
        null_dir: &args.null_dir,
        out: &args.out,
        p_threshold: args.p_threshold,
        reweight: args.reweight,
        eps: args.eps,
        min_pts: args.min_pts,
        tags: args.tags.as_deref(),
        top: args.top,
        sizes: args.sizes.clone(),
    };
    if dump {
        return dump_and_exit(&config);
    }
    let tree = load_tree(&args.tree)?;
    let (_, index) = load_reports(&args.reports, &tree, args.unknown_codes)?;
    let archive: Archive<Scalar> = Archive::read_csv(
        &tree,
        index.n(),
        index.k(),
        File::open(&args.archive).map_err(data_err)?,
    )
    .map_err(data_err)?;
    let tags: Vec<FamilyTag> = match &args.tags {
        None => Vec::new(),
        Some(p) => read_tags(File::open(p).map_err(data_err)?).map_err(data_err)?,
    };

    let mut candidates = archive.sorted();
    if !args.sizes.is_empty() {
        candidates.retain(|(c, _)| args.sizes.contains(&c.len()));
    }
    if let Some(top) = args.top {
        candidates.truncate(top);
    }

    // one null distribution per represented size; all must be present
    let mut sizes: Vec<usize> = candidates.iter().map(|(c, _)| c.len()).collect();
    sizes.sort_unstable();
    sizes.dedup();
    let mut nulls: BTreeMap<usize, NullDistribution<Scalar>> = BTreeMap::new();
    let mut missing = Vec::new();
    for &k in &sizes {
        match load_null(&args.null_dir, k)? {
            Some(d) => {
                nulls.insert(k, d);
            }
            None => missing.push(k.to_string()),
        }
    }
    if !missing.is_empty() {
        return Err(CliError::Data(format!(
            "no null distribution for cocktail sizes [{}] in {}; rerun `sample --sizes {}`",
            missing.join(", "),
            args.null_dir.display(),
            missing.join(",")
        )));
    }

    struct Row<'a> {
        cocktail: &'a crate::atc::Cocktail,
        entry: &'a crate::genetic::ArchiveEntry<Scalar>,
        p_value: Scalar,
    }
    let significant: Vec<Row> = candidates
        .iter()
        .filter_map(|&(cocktail, entry)| {
            let null = &nulls[&cocktail.len()];
            let p_value = if args.reweight {
                empirical_pvalue_reweighted(entry.h, &null.samples, null.temperature)
            } else {
                empirical_pvalue(entry.h, &null.samples)
            };
            (p_value <= args.p_threshold).then_some(Row { cocktail, entry, p_value })
        })
        .collect();

    let cocktails: Vec<crate::atc::Cocktail> =
        significant.iter().map(|r| r.cocktail.clone()).collect();
    let matrix = distance_matrix::<Scalar>(&tree, &cocktails);
    let eps = args.eps.unwrap_or_else(|| default_eps(&matrix));
    let labels = dbscan(&matrix, &DbscanParams { eps, min_pts: args.min_pts })
        .map_err(data_err)?;
    let coords = embed_2d::<Scalar>(&matrix);

    ensure_out_dir(&args.out)?;

    // results.csv: one row per significant cocktail, strongest first
    let f = File::create(args.out.join("results.csv")).map_err(internal_err)?;
    let mut w = csv::Writer::from_writer(BufWriter::new(f));
    w.write_record(["cocktail_codes", "n_c", "x", "H", "rr", "prr", "p_value", "cluster", "families"])
        .map_err(internal_err)?;
    for (i, row) in significant.iter().enumerate() {
        let counts = CocktailCounts {
            n: index.n(),
            k: index.k(),
            n_c: row.entry.n_c,
            x: row.entry.x,
        };
        let families = crate::cluster::families_of(row.cocktail, &tree, &tags).join(";");
        w.write_record([
            row.cocktail.codes(&tree),
            row.entry.n_c.to_string(),
            row.entry.x.to_string(),
            sig6(row.entry.h),
            opt_sig6(score_rr::<Scalar>(&counts)),
            opt_sig6(score_prr::<Scalar>(&counts)),
            sig6(row.p_value),
            labels[i].map(|c| c.to_string()).unwrap_or_default(),
            families,
        ])
        .map_err(internal_err)?;
    }
    w.flush().map_err(internal_err)?;

    // coords.csv: 2-D embedding for plotting
    let f = File::create(args.out.join("coords.csv")).map_err(internal_err)?;
    let mut w = csv::Writer::from_writer(BufWriter::new(f));
    w.write_record(["cocktail_codes", "x", "y", "cluster"]).map_err(internal_err)?;
    for (i, c) in cocktails.iter().enumerate() {
        w.write_record([
            c.codes(&tree),
            sig6(coords[i][0]),
            sig6(coords[i][1]),
            labels[i].map(|c| c.to_string()).unwrap_or_default(),
        ])
        .map_err(internal_err)?;
    }
    w.flush().map_err(internal_err)?;

    // cluster_table.csv: long-form family counts per cluster
    let summaries = cluster_report(&cocktails, &labels, &tree, &tags);
    let f = File::create(args.out.join("cluster_table.csv")).map_err(internal_err)?;
    let mut w = csv::Writer::from_writer(BufWriter::new(f));
    w.write_record(["cluster", "size", "family", "count", "dominant"]).map_err(internal_err)?;
    for s in &summaries {
        if s.family_counts.is_empty() {
            w.write_record([s.cluster.to_string(), s.size.to_string(), String::new(), String::new(), String::new()])
                .map_err(internal_err)?;
            continue;
        }
        for (family, count) in &s.family_counts {
            let dominant = s.dominant_family.as_deref() == Some(family.as_str());
            w.write_record([
                s.cluster.to_string(),
                s.size.to_string(),
                family.clone(),
                count.to_string(),
                dominant.to_string(),
            ])
            .map_err(internal_err)?;
        }
    }
    w.flush().map_err(internal_err)?;

    let mut input_paths: Vec<PathBuf> = vec![args.tree.clone(), args.reports.clone(), args.archive.clone()];
    for &k in &sizes {
        input_paths.push(args.null_dir.join(format!("{}.csv", null_file_stem(k))));
        input_paths.push(args.null_dir.join(format!("{}.json", null_file_stem(k))));
    }
    if let Some(t) = &args.tags {
        input_paths.push(t.clone());
    }
    let input_refs: Vec<&Path> = input_paths.iter().map(PathBuf::as_path).collect();
    write_manifest(
        &args.out,
        "report",
        serde_json::to_value(&config).map_err(internal_err)?,
        Vec::new(),
        &input_refs,
    )?;
    println!(
        "{} of {} candidates significant at p < {}; {} clusters",
        significant.len(),
        candidates.len(),
        args.p_threshold,
        summaries.len()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merge_json_overlays_fields() {
        let base = serde_json::json!({"a": 1, "b": {"c": 2, "d": 3}});
        let overlay = serde_json::json!({"b": {"c": 9}, "e": 5});
        let merged = merge_json(base, overlay);
        assert_eq!(merged, serde_json::json!({"a": 1, "b": {"c": 9, "d": 3}, "e": 5}));
    }

    #[test]
    fn ga_config_resolution_precedence() {
        use clap::Parser;
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = dir.path().join("ga.json");
        std::fs::write(&cfg_path, r#"{"iterations": 50, "alpha": 2.5}"#).unwrap();
        let cli = Cli::try_parse_from([
            "cocktail-miner",
            "search",
            "--tree", "t.csv",
            "--reports", "r.csv",
            "--out", "o",
            "--config", cfg_path.to_str().unwrap(),
            "--iterations", "75",
        ])
        .unwrap();
        let Command::Search(args) = &cli.command else { panic!() };
        let ga = resolve_ga_config(args).unwrap();
        // flag beats file, file beats default, default fills the rest
        assert_eq!(ga.iterations, 75);
        assert_eq!(ga.alpha, 2.5);
        assert_eq!(ga.population_size, GaConfig::default().population_size);
    }

    #[test]
    fn usage_error_exits_2() {
        assert_eq!(run(["cocktail-miner", "no-such-command"]), 2);
        assert_eq!(run(["cocktail-miner", "search"]), 2); // missing required args
    }

    #[test]
    fn missing_input_file_exits_3() {
        let code = run([
            "cocktail-miner",
            "simulate",
            "--tree", "/nonexistent/tree.csv",
            "--out", "/tmp/never-created",
        ]);
        assert_eq!(code, EXIT_DATA);
    }

    #[test]
    fn scenario_presets_resolve() {
        assert!(resolve_scenario("default", None).is_ok());
        assert!(resolve_scenario("mixed", Some(5000)).map(|s| s.n_patients).unwrap() == 5000);
        assert!(resolve_scenario("/no/such/file.json", None).is_err());
    }
}
