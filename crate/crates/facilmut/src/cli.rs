//! The `facilmut` command-line harness: batch experiment execution with
//! per-run CSV/JSON artifacts, post-hoc champion analysis, the
//! cross-approach comparison report, and grammar validation.
//!
//! All artifacts are deterministic: floats are serialized with 17
//! significant digits, maps are ordered, nothing records wall-clock time,
//! and per-run seeding makes results independent of `--jobs`.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::ser::{Formatter, PrettyFormatter};

use crate::evolution::{self, Approach, Archive, EvolutionConfig, GenerationStats, Individual};
use crate::fitness::{post_hoc, Bindings, CompiledExpr, FitnessTaskConfig};
use crate::grammar::{Grammar, FM_GRAMMAR};
use crate::metrics::{build_comparison, RunRecord};
use crate::seeds;
use crate::sge::{map, ExprNode, Genotype, MutationPolicy};
use crate::{Real, RealEvolutionConfig, RealRunRecord, RealTaskConfig};

pub const GENERATIONS_CSV_HEADER: &str =
    "generation,best_fitness,mean_fitness,new_evaluations,archive_hits,preselection_rejections";

const DEFAULT_SEED_BASE: u64 = 1;
const DEFAULT_SEED_COUNT: u64 = 5;

#[derive(Debug, Parser)]
#[command(
    name = "facilmut",
    version,
    about = "Evolve gradient-update expressions with per-non-terminal mutation rates"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Execute a batch of evolutionary runs and write their artifacts
    Run(RunArgs),
    /// Re-train each approach's champion from a finished batch
    Posthoc(PosthocArgs),
    /// Build the cross-approach comparison report for a finished batch
    Compare(CompareArgs),
    /// Parse a grammar file and report whether it is usable for evolution
    Validate(ValidateArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Experiment spec file (JSON)
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Output directory (overrides the spec and FACILMUT_OUT)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Maximum concurrent runs (default: one per core)
    #[arg(long)]
    jobs: Option<usize>,
    /// First master seed of a generated seed range
    #[arg(long)]
    seed_base: Option<u64>,
    /// Number of master seeds in the generated range
    #[arg(long)]
    seeds: Option<u64>,
    /// Approaches to run, comma separated (FMX, FM, OM, OMX)
    #[arg(long, value_delimiter = ',')]
    approach: Option<Vec<String>>,
}

#[derive(Debug, Args)]
struct PosthocArgs {
    /// A run directory or a batch directory of run directories
    path: PathBuf,
    /// Independent retraining repetitions per champion
    #[arg(long, default_value_t = 15)]
    repetitions: usize,
}

#[derive(Debug, Args)]
struct CompareArgs {
    /// A batch directory of run directories
    path: PathBuf,
}

#[derive(Debug, Args)]
struct ValidateArgs {
    /// Grammar file to check
    grammar: PathBuf,
}

/// Command failures split by exit code: usage and configuration problems
/// exit 1, failures during execution exit 2.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn runtime(msg: impl Into<String>) -> CliError {
    CliError::Runtime(msg.into())
}

/// Parse arguments from the process environment and execute; returns the
/// process exit code.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Posthoc(args) => cmd_posthoc(args),
        Command::Compare(args) => cmd_compare(args),
        Command::Validate(args) => cmd_validate(args),
    };
    match result {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            2
        }
    }
}

// ---------------------------------------------------------------------------
// experiment specs

/// On-disk experiment description. Every field is optional; command-line
/// flags override spec fields, and absent fields fall back to defaults
/// (all four approaches, seeds 1..=5, the bundled grammar).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpecFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub approaches: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds: Option<SpecSeeds>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grammar_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overrides: Option<Overrides>,
}

/// Seeds are either listed explicitly or generated as a contiguous range.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SpecSeeds {
    List(Vec<u64>),
    Range { base_seed: u64, count: u64 },
}

/// Sparse overrides of the preset evolution and task parameters. The
/// approach-defining fields (crossover rate, mutation policy) are
/// deliberately not overridable: changing them would change which approach
/// is being run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Overrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub population_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generations: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elitism_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tournament_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_depth: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<TaskOverrides>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fitness_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub holdout_test_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_epochs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub early_stop_patience: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_separation: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nonviable_fitness: Option<f64>,
}

/// A fully resolved experiment: what to run, where, and under which
/// parameter overrides.
#[derive(Debug, Clone)]
pub struct ResolvedSpec {
    pub approaches: Vec<Approach>,
    pub seeds: Vec<u64>,
    pub grammar_path: Option<PathBuf>,
    pub overrides: Overrides,
    pub output_dir: Option<PathBuf>,
}

fn parse_approaches(names: &[String]) -> Result<Vec<Approach>, CliError> {
    let mut requested = Vec::new();
    for name in names {
        let a = Approach::from_name(name)
            .ok_or_else(|| usage(format!("unknown approach {name:?} (expected FMX, FM, OM, or OMX)")))?;
        if !requested.contains(&a) {
            requested.push(a);
        }
    }
    if requested.is_empty() {
        return Err(usage("at least one approach is required"));
    }
    // canonical presentation order regardless of how they were listed
    Ok(Approach::ALL.into_iter().filter(|a| requested.contains(a)).collect())
}

fn expand_seeds(seeds: &SpecSeeds) -> Result<Vec<u64>, CliError> {
    let list = match seeds {
        SpecSeeds::List(list) => list.clone(),
        SpecSeeds::Range { base_seed, count } => {
            (0..*count).map(|i| base_seed.wrapping_add(i)).collect()
        }
    };
    if list.is_empty() {
        return Err(usage("at least one seed is required"));
    }
    let mut deduped = Vec::new();
    for s in list {
        if !deduped.contains(&s) {
            deduped.push(s);
        }
    }
    Ok(deduped)
}

fn resolve_spec(args: &RunArgs) -> Result<ResolvedSpec, CliError> {
    let file: ExperimentSpecFile = match &args.spec {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| usage(format!("cannot read spec {}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| usage(format!("invalid spec {}: {e}", path.display())))?
        }
        None => ExperimentSpecFile::default(),
    };

    let approaches = match (&args.approach, &file.approaches) {
        (Some(flags), _) => parse_approaches(flags)?,
        (None, Some(listed)) => parse_approaches(listed)?,
        (None, None) => Approach::ALL.to_vec(),
    };

    let seeds = if args.seed_base.is_some() || args.seeds.is_some() {
        expand_seeds(&SpecSeeds::Range {
            base_seed: args.seed_base.unwrap_or(DEFAULT_SEED_BASE),
            count: args.seeds.unwrap_or(DEFAULT_SEED_COUNT),
        })?
    } else if let Some(seeds) = &file.seeds {
        expand_seeds(seeds)?
    } else {
        expand_seeds(&SpecSeeds::Range {
            base_seed: DEFAULT_SEED_BASE,
            count: DEFAULT_SEED_COUNT,
        })?
    };

    Ok(ResolvedSpec {
        approaches,
        seeds,
        grammar_path: file.grammar_path,
        overrides: file.overrides.unwrap_or_default(),
        output_dir: args.out.clone().or(file.output_dir),
    })
}

fn resolve_output_dir(spec: &ResolvedSpec) -> Result<PathBuf, CliError> {
    if let Some(dir) = &spec.output_dir {
        return Ok(dir.clone());
    }
    if let Ok(dir) = std::env::var("FACILMUT_OUT") {
        if !dir.is_empty() {
            return Ok(PathBuf::from(dir));
        }
    }
    Err(usage(
        "no output directory: pass --out, set output_dir in the spec, or set FACILMUT_OUT",
    ))
}

/// Approach preset for `master_seed` with the spec's sparse overrides
/// applied.
pub fn build_config(approach: Approach, master_seed: u64, o: &Overrides) -> RealEvolutionConfig {
    let mut cfg = RealEvolutionConfig::preset(approach, master_seed);
    if let Some(v) = o.population_size {
        cfg.population_size = v;
    }
    if let Some(v) = o.generations {
        cfg.generations = v;
    }
    if let Some(v) = o.elitism_fraction {
        cfg.elitism_fraction = v;
    }
    if let Some(v) = o.tournament_size {
        cfg.tournament_size = v;
    }
    if let Some(v) = o.max_depth {
        cfg.max_depth = v;
    }
    if let Some(t) = &o.task {
        if let Some(v) = t.feature_dim {
            cfg.task.feature_dim = v;
        }
        if let Some(v) = t.train_size {
            cfg.task.train_size = v;
        }
        if let Some(v) = t.validation_size {
            cfg.task.validation_size = v;
        }
        if let Some(v) = t.fitness_size {
            cfg.task.fitness_size = v;
        }
        if let Some(v) = t.holdout_test_size {
            cfg.task.holdout_test_size = v;
        }
        if let Some(v) = t.max_epochs {
            cfg.task.max_epochs = v;
        }
        if let Some(v) = t.early_stop_patience {
            cfg.task.early_stop_patience = v;
        }
        if let Some(v) = t.data_seed {
            cfg.task.data_seed = v;
        }
        if let Some(v) = t.class_separation {
            cfg.task.class_separation = v;
        }
        if let Some(v) = t.nonviable_fitness {
            cfg.task.nonviable_fitness = v;
        }
    }
    cfg
}

pub fn run_dir_name(approach: Approach, master_seed: u64) -> String {
    format!("{approach}_{master_seed}")
}

// ---------------------------------------------------------------------------
// deterministic JSON

/// Pretty JSON with every f64 rendered at full precision (17 significant
/// digits) so artifacts round-trip exactly and byte-compare across runs.
struct FullPrecision<'a> {
    inner: PrettyFormatter<'a>,
}

impl Formatter for FullPrecision<'_> {
    fn write_f64<W>(&mut self, writer: &mut W, value: f64) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        if value.is_finite() {
            write!(writer, "{value:.16e}")
        } else {
            writer.write_all(b"null")
        }
    }

    fn begin_array<W>(&mut self, writer: &mut W) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        self.inner.begin_array(writer)
    }

    fn end_array<W>(&mut self, writer: &mut W) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        self.inner.end_array(writer)
    }

    fn begin_array_value<W>(&mut self, writer: &mut W, first: bool) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        self.inner.begin_array_value(writer, first)
    }

    fn end_array_value<W>(&mut self, writer: &mut W) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        self.inner.end_array_value(writer)
    }

    fn begin_object<W>(&mut self, writer: &mut W) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        self.inner.begin_object(writer)
    }

    fn end_object<W>(&mut self, writer: &mut W) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        self.inner.end_object(writer)
    }

    fn begin_object_key<W>(&mut self, writer: &mut W, first: bool) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        self.inner.begin_object_key(writer, first)
    }

    fn begin_object_value<W>(&mut self, writer: &mut W) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        self.inner.begin_object_value(writer)
    }
}

/// Serialize with the deterministic full-precision formatter.
pub fn to_json_string<T: Serialize>(value: &T) -> String {
    let mut out = Vec::new();
    let formatter = FullPrecision { inner: PrettyFormatter::new() };
    let mut ser = serde_json::Serializer::with_formatter(&mut out, formatter);
    value.serialize(&mut ser).expect("in-memory JSON serialization cannot fail");
    String::from_utf8(out).expect("serde_json emits UTF-8")
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> io::Result<()> {
    let mut text = to_json_string(value);
    text.push('\n');
    fs::write(path, text)
}

// ---------------------------------------------------------------------------
// artifact schemas

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskJson {
    pub feature_dim: usize,
    pub train_size: usize,
    pub validation_size: usize,
    pub fitness_size: usize,
    pub holdout_test_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub data_seed: u64,
    pub class_separation: f64,
    pub nonviable_fitness: f64,
}

impl TaskJson {
    pub fn from_task(task: &RealTaskConfig) -> TaskJson {
        TaskJson {
            feature_dim: task.feature_dim,
            train_size: task.train_size,
            validation_size: task.validation_size,
            fitness_size: task.fitness_size,
            holdout_test_size: task.holdout_test_size,
            max_epochs: task.max_epochs,
            early_stop_patience: task.early_stop_patience,
            data_seed: task.data_seed,
            class_separation: task.class_separation,
            nonviable_fitness: task.nonviable_fitness,
        }
    }

    pub fn to_task(&self) -> RealTaskConfig {
        FitnessTaskConfig {
            feature_dim: self.feature_dim,
            train_size: self.train_size,
            validation_size: self.validation_size,
            fitness_size: self.fitness_size,
            holdout_test_size: self.holdout_test_size,
            max_epochs: self.max_epochs,
            early_stop_patience: self.early_stop_patience,
            data_seed: self.data_seed,
            class_separation: self.class_separation,
            nonviable_fitness: self.nonviable_fitness,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigJson {
    pub approach: String,
    pub population_size: usize,
    pub generations: usize,
    pub elitism_fraction: f64,
    pub tournament_size: usize,
    pub max_depth: usize,
    pub crossover_rate: f64,
    pub mutation_rates: BTreeMap<String, f64>,
    pub default_mutation_rate: f64,
    pub master_seed: u64,
    pub task: TaskJson,
}

impl ConfigJson {
    pub fn from_config(cfg: &RealEvolutionConfig) -> ConfigJson {
        ConfigJson {
            approach: cfg.approach.name().to_string(),
            population_size: cfg.population_size,
            generations: cfg.generations,
            elitism_fraction: cfg.elitism_fraction,
            tournament_size: cfg.tournament_size,
            max_depth: cfg.max_depth,
            crossover_rate: cfg.crossover_rate,
            mutation_rates: cfg.mutation_policy.rates().clone(),
            default_mutation_rate: cfg.mutation_policy.default_rate(),
            master_seed: cfg.master_seed,
            task: TaskJson::from_task(&cfg.task),
        }
    }

    pub fn to_config(&self) -> Result<RealEvolutionConfig, String> {
        let approach = Approach::from_name(&self.approach)
            .ok_or_else(|| format!("unknown approach {:?}", self.approach))?;
        let mutation_policy =
            MutationPolicy::new(self.mutation_rates.clone(), self.default_mutation_rate)
                .map_err(|e| e.to_string())?;
        Ok(EvolutionConfig {
            approach,
            population_size: self.population_size,
            generations: self.generations,
            elitism_fraction: self.elitism_fraction,
            tournament_size: self.tournament_size,
            max_depth: self.max_depth,
            crossover_rate: self.crossover_rate,
            mutation_policy,
            master_seed: self.master_seed,
            task: self.task.to_task(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationStatsJson {
    pub generation: usize,
    pub best_fitness: f64,
    pub mean_fitness: f64,
    pub fitness_histogram: Vec<u32>,
    pub new_evaluations: usize,
    pub archive_hits: usize,
    pub preselection_rejections: usize,
}

impl GenerationStatsJson {
    fn from_stats(s: &GenerationStats<Real>) -> GenerationStatsJson {
        GenerationStatsJson {
            generation: s.generation,
            best_fitness: s.best_fitness,
            mean_fitness: s.mean_fitness,
            fitness_histogram: s.fitness_histogram.to_vec(),
            new_evaluations: s.new_evaluations,
            archive_hits: s.archive_hits,
            preselection_rejections: s.preselection_rejections,
        }
    }

    fn to_stats(&self) -> Result<GenerationStats<Real>, String> {
        let fitness_histogram: [u32; evolution::HISTOGRAM_BINS] = self
            .fitness_histogram
            .clone()
            .try_into()
            .map_err(|_| format!("histogram must have {} bins", evolution::HISTOGRAM_BINS))?;
        Ok(GenerationStats {
            generation: self.generation,
            best_fitness: self.best_fitness,
            mean_fitness: self.mean_fitness,
            fitness_histogram,
            new_evaluations: self.new_evaluations,
            archive_hits: self.archive_hits,
            preselection_rejections: self.preselection_rejections,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndividualJson {
    /// Codon lists keyed by non-terminal name.
    pub genotype: BTreeMap<String, Vec<usize>>,
    /// Canonical expression string.
    pub phenotype: String,
    pub consumed: Vec<usize>,
    pub fitness: f64,
    pub evaluated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunJson {
    pub config: ConfigJson,
    /// The exact grammar text this run used; makes the directory
    /// self-contained for later analysis.
    pub grammar_text: String,
    pub generation_stats: Vec<GenerationStatsJson>,
    pub best_individual: IndividualJson,
    pub archive_size: usize,
    pub unique_viable_count: usize,
    pub evaluations_performed: usize,
}

pub fn run_json(record: &RealRunRecord, grammar: &Grammar, grammar_text: &str) -> RunJson {
    RunJson {
        config: ConfigJson::from_config(&record.config),
        grammar_text: grammar_text.to_string(),
        generation_stats: record
            .generation_stats
            .iter()
            .map(GenerationStatsJson::from_stats)
            .collect(),
        best_individual: IndividualJson {
            genotype: record.best_individual.genotype.to_named(grammar),
            phenotype: record.best_individual.phenotype.canonical.clone(),
            consumed: record.best_individual.consumed.clone(),
            fitness: record.best_individual.fitness,
            evaluated: record.best_individual.evaluated,
        },
        archive_size: record.archive_size,
        unique_viable_count: record.unique_viable_count,
        evaluations_performed: record.evaluations_performed,
    }
}

/// Rebuild an in-memory run record from its artifact, re-deriving the
/// champion's expression tree from the stored genotype and verifying it
/// still maps to the stored phenotype.
pub fn to_run_record(run: &RunJson) -> Result<RealRunRecord, String> {
    let grammar =
        Grammar::parse(&run.grammar_text).map_err(|e| format!("embedded grammar: {e}"))?;
    let config = run.config.to_config()?;
    let mut genotype = Genotype::from_named(&run.best_individual.genotype, &grammar)
        .ok_or("stored genotype does not fit the embedded grammar")?;
    // a complete stored genotype consumes no random draws during mapping
    let mut rng = seeds::stream(&[config.master_seed, seeds::TAG_POSTHOC]);
    let outcome =
        map(&grammar, &mut genotype, config.max_depth, &mut rng).map_err(|e| e.to_string())?;
    if outcome.appended.iter().sum::<usize>() != 0 {
        return Err("stored genotype is incomplete for its grammar".to_string());
    }
    if outcome.phenotype.canonical != run.best_individual.phenotype {
        return Err(format!(
            "stored genotype maps to {} but the record claims {}",
            outcome.phenotype.canonical, run.best_individual.phenotype
        ));
    }
    if outcome.consumed != run.best_individual.consumed {
        return Err("stored codon-use counts disagree with remapping".to_string());
    }
    let generation_stats: Vec<GenerationStats<Real>> = run
        .generation_stats
        .iter()
        .map(GenerationStatsJson::to_stats)
        .collect::<Result<_, _>>()?;
    if generation_stats.is_empty() {
        return Err("record has no generation stats".to_string());
    }
    Ok(RunRecord {
        config,
        generation_stats,
        best_individual: Individual {
            genotype,
            phenotype: outcome.phenotype,
            consumed: outcome.consumed,
            fitness: run.best_individual.fitness,
            evaluated: run.best_individual.evaluated,
        },
        archive: Archive::new(),
        archive_size: run.archive_size,
        unique_viable_count: run.unique_viable_count,
        evaluations_performed: run.evaluations_performed,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestJson {
    pub jobs: Vec<ManifestJob>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestJob {
    pub approach: String,
    pub seed: u64,
    pub dir: String,
    /// "ok", "failed", or "skipped" (not started because an earlier run
    /// failed).
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PosthocJson {
    pub repetitions: usize,
    pub champions: Vec<ChampionJson>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChampionJson {
    pub approach: String,
    pub master_seed: u64,
    pub phenotype: String,
    pub evolution_fitness: f64,
    pub mean_test_accuracy: f64,
    pub std_test_accuracy: f64,
    pub mean_validation_accuracy: f64,
    pub per_repetition_test_accuracy: Vec<f64>,
}

// ---------------------------------------------------------------------------
// run

pub fn generations_csv(stats: &[GenerationStats<Real>]) -> String {
    let mut out = String::from(GENERATIONS_CSV_HEADER);
    out.push('\n');
    for s in stats {
        out.push_str(&format!(
            "{},{:.16e},{:.16e},{},{},{}\n",
            s.generation,
            s.best_fitness,
            s.mean_fitness,
            s.new_evaluations,
            s.archive_hits,
            s.preselection_rejections,
        ));
    }
    out
}

struct JobOutcome {
    approach: Approach,
    seed: u64,
    dir: String,
    status: &'static str,
    error: Option<String>,
    best_fitness: Option<f64>,
    evaluations: Option<usize>,
}

fn execute_run(
    config: &RealEvolutionConfig,
    grammar: &Grammar,
    grammar_text: &str,
    out_dir: &Path,
) -> Result<(f64, usize), String> {
    let record = evolution::run(config, grammar).map_err(|e| e.to_string())?;
    let dir = out_dir.join(run_dir_name(config.approach, config.master_seed));
    fs::create_dir_all(&dir).map_err(|e| format!("create {}: {e}", dir.display()))?;
    let csv_path = dir.join("generations.csv");
    fs::write(&csv_path, generations_csv(&record.generation_stats))
        .map_err(|e| format!("write {}: {e}", csv_path.display()))?;
    let json_path = dir.join("run.json");
    write_json(&json_path, &run_json(&record, grammar, grammar_text))
        .map_err(|e| format!("write {}: {e}", json_path.display()))?;
    Ok((record.best_individual.fitness, record.evaluations_performed))
}

fn cmd_run(args: RunArgs) -> Result<(), CliError> {
    let spec = resolve_spec(&args)?;
    let out_dir = resolve_output_dir(&spec)?;

    let grammar_text = match &spec.grammar_path {
        Some(path) => fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read grammar {}: {e}", path.display())))?,
        None => FM_GRAMMAR.to_string(),
    };
    let grammar =
        Grammar::parse(&grammar_text).map_err(|e| usage(format!("grammar error: {e}")))?;
    evolution::check_bindable(&grammar, &Bindings::<Real>::default())
        .map_err(|e| usage(format!("grammar is not usable for training: {e}")))?;

    // all jobs share one config shape; reject bad parameters before launching
    for &approach in &spec.approaches {
        let cfg = build_config(approach, spec.seeds[0], &spec.overrides);
        cfg.validate()
            .map_err(|e| usage(format!("invalid configuration for {approach}: {e}")))?;
        if cfg.max_depth < grammar.start().min_depth {
            return Err(usage(format!(
                "max_depth {} is below the grammar's minimal derivation depth {}",
                cfg.max_depth,
                grammar.start().min_depth
            )));
        }
    }

    fs::create_dir_all(&out_dir)
        .map_err(|e| usage(format!("cannot create output dir {}: {e}", out_dir.display())))?;

    let jobs: Vec<(Approach, u64)> = spec
        .approaches
        .iter()
        .flat_map(|&a| spec.seeds.iter().map(move |&s| (a, s)))
        .collect();

    let mut pool_builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = args.jobs {
        if n == 0 {
            return Err(usage("--jobs must be at least 1"));
        }
        pool_builder = pool_builder.num_threads(n);
    }
    let pool = pool_builder
        .build()
        .map_err(|e| runtime(format!("cannot build thread pool: {e}")))?;

    let abort = AtomicBool::new(false);
    let outcomes: Vec<JobOutcome> = pool.install(|| {
        jobs.par_iter()
            .map(|&(approach, seed)| {
                let dir = run_dir_name(approach, seed);
                if abort.load(Ordering::Relaxed) {
                    return JobOutcome {
                        approach,
                        seed,
                        dir,
                        status: "skipped",
                        error: None,
                        best_fitness: None,
                        evaluations: None,
                    };
                }
                let cfg = build_config(approach, seed, &spec.overrides);
                match execute_run(&cfg, &grammar, &grammar_text, &out_dir) {
                    Ok((best, evals)) => JobOutcome {
                        approach,
                        seed,
                        dir,
                        status: "ok",
                        error: None,
                        best_fitness: Some(best),
                        evaluations: Some(evals),
                    },
                    Err(msg) => {
                        abort.store(true, Ordering::Relaxed);
                        JobOutcome {
                            approach,
                            seed,
                            dir,
                            status: "failed",
                            error: Some(msg),
                            best_fitness: None,
                            evaluations: None,
                        }
                    }
                }
            })
            .collect()
    });

    let manifest = ManifestJson {
        jobs: outcomes
            .iter()
            .map(|o| ManifestJob {
                approach: o.approach.name().to_string(),
                seed: o.seed,
                dir: o.dir.clone(),
                status: o.status.to_string(),
                error: o.error.clone(),
            })
            .collect(),
    };
    let manifest_path = out_dir.join("manifest.json");
    write_json(&manifest_path, &manifest)
        .map_err(|e| runtime(format!("write {}: {e}", manifest_path.display())))?;

    for o in &outcomes {
        match o.status {
            "ok" => println!(
                "{} seed {}: ok  best {:.4}  evaluations {}  -> {}",
                o.approach,
                o.seed,
                o.best_fitness.unwrap(),
                o.evaluations.unwrap(),
                o.dir
            ),
            "failed" => println!(
                "{} seed {}: FAILED ({})",
                o.approach,
                o.seed,
                o.error.as_deref().unwrap_or("unknown error")
            ),
            _ => println!("{} seed {}: skipped", o.approach, o.seed),
        }
    }
    println!("manifest: {}", manifest_path.display());

    let failed = outcomes.iter().filter(|o| o.status == "failed").count();
    if failed > 0 {
        return Err(runtime(format!(
            "{failed} run(s) failed; partial outputs listed in {}",
            manifest_path.display()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// posthoc / compare

/// Load every run record under `path`: either a single run directory
/// (containing run.json) or a batch directory of run directories.
fn load_records(path: &Path) -> Result<Vec<RealRunRecord>, CliError> {
    if !path.is_dir() {
        return Err(usage(format!("{} is not a directory", path.display())));
    }
    let mut run_files = Vec::new();
    if path.join("run.json").is_file() {
        run_files.push(path.join("run.json"));
    } else {
        let mut subdirs: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| runtime(format!("read {}: {e}", path.display())))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        subdirs.sort();
        for dir in subdirs {
            let f = dir.join("run.json");
            if f.is_file() {
                run_files.push(f);
            }
        }
    }
    if run_files.is_empty() {
        return Err(runtime(format!("no run.json found under {}", path.display())));
    }
    run_files
        .iter()
        .map(|f| {
            let text = fs::read_to_string(f)
                .map_err(|e| runtime(format!("read {}: {e}", f.display())))?;
            let json: RunJson = serde_json::from_str(&text)
                .map_err(|e| runtime(format!("parse {}: {e}", f.display())))?;
            to_run_record(&json).map_err(|e| runtime(format!("{}: {e}", f.display())))
        })
        .collect()
}

/// Best record per approach: highest evolution fitness, ties broken toward
/// the earliest master seed.
pub fn select_champions(records: &[RealRunRecord]) -> BTreeMap<Approach, &RealRunRecord> {
    let mut sorted: Vec<&RealRunRecord> = records.iter().collect();
    sorted.sort_by_key(|r| (r.approach(), r.master_seed()));
    let mut champions: BTreeMap<Approach, &RealRunRecord> = BTreeMap::new();
    for r in sorted {
        champions
            .entry(r.approach())
            .and_modify(|best| {
                if r.best_fitness() > best.best_fitness() {
                    *best = r;
                }
            })
            .or_insert(r);
    }
    champions
}

fn cmd_posthoc(args: PosthocArgs) -> Result<(), CliError> {
    if args.repetitions == 0 {
        return Err(usage("--repetitions must be at least 1"));
    }
    let records = load_records(&args.path)?;
    let champions = select_champions(&records);

    let mut out = Vec::new();
    for (approach, record) in &champions {
        let expr =
            CompiledExpr::compile(&record.best_individual.phenotype.root, &Bindings::default())
                .map_err(|e| runtime(format!("champion of {approach} does not compile: {e}")))?;
        let report = post_hoc(&expr, &record.config.task, args.repetitions);
        println!(
            "{} champion (seed {}): {}  evolution fitness {:.4}  post-hoc test {:.4} ± {:.4}  validation {:.4}",
            approach,
            record.master_seed(),
            record.best_individual.phenotype.canonical,
            record.best_fitness(),
            report.mean_test_accuracy,
            report.std_test_accuracy,
            report.mean_validation_accuracy,
        );
        out.push(ChampionJson {
            approach: approach.name().to_string(),
            master_seed: record.master_seed(),
            phenotype: record.best_individual.phenotype.canonical.clone(),
            evolution_fitness: record.best_fitness(),
            mean_test_accuracy: report.mean_test_accuracy,
            std_test_accuracy: report.std_test_accuracy,
            mean_validation_accuracy: report.mean_validation_accuracy,
            per_repetition_test_accuracy: report.per_repetition_test_accuracy,
        });
    }

    let posthoc_path = args.path.join("posthoc.json");
    write_json(&posthoc_path, &PosthocJson { repetitions: args.repetitions, champions: out })
        .map_err(|e| runtime(format!("write {}: {e}", posthoc_path.display())))?;
    println!("post-hoc report: {}", posthoc_path.display());
    Ok(())
}

fn cmd_compare(args: CompareArgs) -> Result<(), CliError> {
    let records = load_records(&args.path)?;
    let report = build_comparison(&records).map_err(|e| usage(e.to_string()))?;
    let csv_path = args.path.join("comparison.csv");
    fs::write(&csv_path, report.to_csv())
        .map_err(|e| runtime(format!("write {}: {e}", csv_path.display())))?;
    print!("{}", report.text_table());
    println!("comparison table: {}", csv_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// validate

fn cmd_validate(args: ValidateArgs) -> Result<(), CliError> {
    let text = fs::read_to_string(&args.grammar)
        .map_err(|e| usage(format!("cannot read {}: {e}", args.grammar.display())))?;
    let grammar = Grammar::parse(&text).map_err(|e| usage(format!("grammar error: {e}")))?;

    println!("start symbol: <{}>", grammar.start().name);
    println!("non-terminals:");
    for nt in grammar.nonterminals() {
        println!(
            "  <{}>: {} production(s), min depth {}, {}",
            nt.name,
            nt.productions.len(),
            nt.min_depth,
            if nt.recursive { "recursive" } else { "non-recursive" },
        );
    }

    let bindings = Bindings::<Real>::default();
    let mut unbound = Vec::new();
    println!("terminals:");
    for t in grammar.terminals() {
        let kind = if matches!(t, "+" | "-" | "*" | "/") {
            "binary operator".to_string()
        } else {
            match CompiledExpr::compile(&ExprNode::Leaf(t.to_string()), &bindings) {
                Ok(CompiledExpr::Grad) => "gradient input".to_string(),
                Ok(CompiledExpr::Weight) => "weight input".to_string(),
                Ok(CompiledExpr::Const(v)) => format!("constant {v}"),
                Ok(_) => "expression".to_string(),
                Err(e) => {
                    unbound.push(t.to_string());
                    format!("UNBOUND ({e})")
                }
            }
        };
        println!("  {t}: {kind}");
    }

    if unbound.is_empty() {
        println!("grammar is valid and every terminal binds");
        Ok(())
    } else {
        Err(usage(format!(
            "terminal(s) cannot be interpreted: {}",
            unbound.join(", ")
        )))
    }
}
