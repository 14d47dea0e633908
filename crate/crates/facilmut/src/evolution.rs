//! The generational loop: tournament selection, elitism, optional crossover,
//! policy-driven mutation, and fitness assignment through a run-scoped
//! archive with gradient-usage pre-selection.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::fitness::{
    generate_task, train_and_score, Bindings, CompiledExpr, FitnessTaskConfig, TaskConfigError,
    TaskData, TrainingResult,
};
use crate::grammar::Grammar;
use crate::metrics::RunRecord;
use crate::scalar::Scalar;
use crate::seeds::{self, TAG_INIT, TAG_REPRO};
use crate::sge::{
    crossover, map, mutate, Genotype, MapError, MutationPolicy, Phenotype, PolicyError,
};

pub const GRADIENT_TOKEN: &str = "grad";
pub const VIABILITY_THRESHOLD: f64 = 0.5;
pub const HISTOGRAM_BINS: usize = 20;

/// The four benchmark setups: heterogeneous per-non-terminal mutation rates
/// with low crossover (Fmx) or none (Fm), and a homogeneous 0.15 rate with
/// no crossover (Om) or heavy crossover (Omx).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Approach {
    Fmx,
    Fm,
    Om,
    Omx,
}

impl Approach {
    pub const ALL: [Approach; 4] = [Approach::Fmx, Approach::Fm, Approach::Om, Approach::Omx];

    pub fn name(self) -> &'static str {
        match self {
            Approach::Fmx => "FMX",
            Approach::Fm => "FM",
            Approach::Om => "OM",
            Approach::Omx => "OMX",
        }
    }

    pub fn from_name(s: &str) -> Option<Approach> {
        match s.to_ascii_uppercase().as_str() {
            "FMX" => Some(Approach::Fmx),
            "FM" => Some(Approach::Fm),
            "OM" => Some(Approach::Om),
            "OMX" => Some(Approach::Omx),
            _ => None,
        }
    }
}

impl std::fmt::Display for Approach {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Tiered mutation rates: high churn on constants, moderate on the
/// constant/variable boundary, low everywhere else.
pub fn heterogeneous_policy() -> MutationPolicy {
    let mut rates = BTreeMap::new();
    rates.insert("const".to_string(), 0.15);
    rates.insert("var_const".to_string(), 0.05);
    MutationPolicy::new(rates, 0.01).expect("rates in range")
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvolutionConfig<S: Scalar> {
    pub approach: Approach,
    pub population_size: usize,
    pub generations: usize,
    pub elitism_fraction: f64,
    pub tournament_size: usize,
    pub max_depth: usize,
    pub crossover_rate: f64,
    pub mutation_policy: MutationPolicy,
    pub master_seed: u64,
    pub task: FitnessTaskConfig<S>,
}

impl<S: Scalar> EvolutionConfig<S> {
    /// The named setup with its published parameters: population 100 for 200
    /// generations, 1% elitism, size-2 tournaments, depth cap 17, and the
    /// approach-specific crossover rate and mutation policy.
    pub fn preset(approach: Approach, master_seed: u64) -> EvolutionConfig<S> {
        let (crossover_rate, mutation_policy) = match approach {
            Approach::Fmx => (0.01, heterogeneous_policy()),
            Approach::Fm => (0.0, heterogeneous_policy()),
            Approach::Om => (0.0, MutationPolicy::homogeneous(0.15)),
            Approach::Omx => (0.9, MutationPolicy::homogeneous(0.15)),
        };
        EvolutionConfig {
            approach,
            population_size: 100,
            generations: 200,
            elitism_fraction: 0.01,
            tournament_size: 2,
            max_depth: 17,
            crossover_rate,
            mutation_policy,
            master_seed,
            task: FitnessTaskConfig::default(),
        }
    }

    pub fn elite_count(&self) -> usize {
        (self.elitism_fraction * self.population_size as f64).ceil() as usize
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.population_size == 0 {
            return Err(ConfigError::EmptyPopulation);
        }
        if self.tournament_size == 0 {
            return Err(ConfigError::ZeroTournament);
        }
        if !(0.0..=1.0).contains(&self.elitism_fraction) {
            return Err(ConfigError::FractionOutOfRange("elitism_fraction"));
        }
        if !(0.0..=1.0).contains(&self.crossover_rate) {
            return Err(ConfigError::FractionOutOfRange("crossover_rate"));
        }
        if self.elite_count() >= self.population_size {
            return Err(ConfigError::ElitesFillPopulation);
        }
        self.task.validate()?;
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("population_size must be positive")]
    EmptyPopulation,
    #[error("tournament_size must be positive")]
    ZeroTournament,
    #[error("{0} must lie in [0, 1]")]
    FractionOutOfRange(&'static str),
    #[error("elitism leaves no room for offspring")]
    ElitesFillPopulation,
    #[error(transparent)]
    Task(#[from] TaskConfigError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Map(#[from] MapError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Individual<S> {
    pub genotype: Genotype,
    pub phenotype: Phenotype,
    /// Codon-use counts from this individual's mapping; the mutation mask for
    /// its offspring.
    pub consumed: Vec<usize>,
    pub fitness: S,
    /// True when the fitness came from actual training rather than the
    /// archive or pre-selection.
    pub evaluated: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Preselected,
    ArchiveHit,
    Evaluated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchiveEntry<S> {
    pub fitness: S,
    pub first_seen_generation: usize,
    /// Value of the run's true-evaluation counter right after this entry was
    /// recorded.
    pub evaluation_count_at_insert: usize,
}

/// Run-scoped memoization of canonical phenotype -> fitness. A canonical
/// string is trained at most once per run; entries for non-gradient
/// phenotypes carry the placeholder fitness and never count as evaluations.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Archive<S> {
    entries: BTreeMap<String, ArchiveEntry<S>>,
    pub evaluations_performed: usize,
}

impl<S: Scalar> Archive<S> {
    pub fn new() -> Archive<S> {
        Archive { entries: BTreeMap::new(), evaluations_performed: 0 }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, canonical: &str) -> Option<&ArchiveEntry<S>> {
        self.entries.get(canonical)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArchiveEntry<S>)> {
        self.entries.iter()
    }

    pub(crate) fn record_preselected(&mut self, canonical: &str, fitness: S, generation: usize) {
        let count = self.evaluations_performed;
        self.entries.entry(canonical.to_string()).or_insert(ArchiveEntry {
            fitness,
            first_seen_generation: generation,
            evaluation_count_at_insert: count,
        });
    }

    pub(crate) fn record_evaluated(&mut self, canonical: &str, fitness: S, generation: usize) {
        self.evaluations_performed += 1;
        let count = self.evaluations_performed;
        self.entries.insert(
            canonical.to_string(),
            ArchiveEntry {
                fitness,
                first_seen_generation: generation,
                evaluation_count_at_insert: count,
            },
        );
    }
}

pub fn uses_gradient(phenotype: &Phenotype) -> bool {
    phenotype.root.contains_leaf(GRADIENT_TOKEN)
}

/// Fitness source for the engine; the library ships the logistic-task
/// implementation, tests substitute counters or stubs.
pub trait Evaluator<S>: Sync {
    fn evaluate(&self, phenotype: &Phenotype) -> TrainingResult<S>;
}

/// Trains the logistic model on the synthetic task with the expression
/// compiled from the phenotype. Compilation failures are configuration
/// errors (unbindable grammar terminals) and are checked up front via
/// [`check_bindable`].
pub struct TaskEvaluator<S: Scalar> {
    data: TaskData<S>,
    cfg: FitnessTaskConfig<S>,
    bindings: Bindings<S>,
}

impl<S: Scalar> TaskEvaluator<S> {
    pub fn new(cfg: FitnessTaskConfig<S>) -> TaskEvaluator<S> {
        TaskEvaluator { data: generate_task(&cfg), cfg, bindings: Bindings::default() }
    }
}

impl<S: Scalar> Evaluator<S> for TaskEvaluator<S> {
    fn evaluate(&self, phenotype: &Phenotype) -> TrainingResult<S> {
        let expr = CompiledExpr::compile(&phenotype.root, &self.bindings)
            .unwrap_or_else(|e| panic!("unbindable phenotype {}: {e}", phenotype.canonical));
        train_and_score(&expr, &self.data, &self.cfg)
    }
}

/// Every terminal the grammar can emit must compile: operators in operator
/// position, everything else as a leaf binding or literal.
pub fn check_bindable<S: Scalar>(
    grammar: &Grammar,
    bindings: &Bindings<S>,
) -> Result<(), crate::fitness::CompileError> {
    use crate::sge::ExprNode;
    for t in grammar.terminals() {
        if matches!(t, "+" | "-" | "*" | "/") {
            continue;
        }
        CompiledExpr::compile(&ExprNode::Leaf(t.to_string()), bindings)?;
    }
    Ok(())
}

/// Assign fitness through pre-selection and the archive. Non-gradient
/// phenotypes take the placeholder without training (recorded so repeats are
/// cheap, never counted as evaluations); known canonicals reuse the archived
/// value; new gradient-using canonicals train once.
pub fn assign_fitness<S: Scalar>(
    phenotype: &Phenotype,
    archive: &mut Archive<S>,
    evaluator: &impl Evaluator<S>,
    generation: usize,
    nonviable_fitness: S,
) -> (S, Provenance) {
    if !uses_gradient(phenotype) {
        archive.record_preselected(&phenotype.canonical, nonviable_fitness, generation);
        return (nonviable_fitness, Provenance::Preselected);
    }
    if let Some(entry) = archive.get(&phenotype.canonical) {
        return (entry.fitness, Provenance::ArchiveHit);
    }
    let result = evaluator.evaluate(phenotype);
    archive.record_evaluated(&phenotype.canonical, result.fitness_accuracy, generation);
    (result.fitness_accuracy, Provenance::Evaluated)
}

/// Fittest of `k` uniform draws with replacement; ties among the drawn are
/// broken uniformly. Returns an index into `population`.
pub fn tournament_select<S: Scalar>(
    population: &[Individual<S>],
    k: usize,
    rng: &mut impl rand::Rng,
) -> usize {
    debug_assert!(!population.is_empty() && k >= 1);
    let mut drawn = Vec::with_capacity(k);
    for _ in 0..k {
        drawn.push(rng.random_range(0..population.len()));
    }
    let best = drawn
        .iter()
        .map(|&i| population[i].fitness)
        .fold(S::of(f64::NEG_INFINITY), |a, b| if b > a { b } else { a });
    let tied: Vec<usize> = drawn
        .iter()
        .copied()
        .filter(|&i| population[i].fitness == best)
        .collect();
    tied[rng.random_range(0..tied.len())]
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationStats<S> {
    pub generation: usize,
    pub best_fitness: S,
    pub mean_fitness: S,
    /// Population fitness counts over 20 equal bins of [0, 1].
    pub fitness_histogram: [u32; HISTOGRAM_BINS],
    pub new_evaluations: usize,
    pub archive_hits: usize,
    pub preselection_rejections: usize,
}

fn population_stats<S: Scalar>(
    generation: usize,
    population: &[Individual<S>],
    counts: &AssignmentCounts,
) -> GenerationStats<S> {
    let mut best = S::of(f64::NEG_INFINITY);
    let mut sum = S::zero();
    let mut histogram = [0u32; HISTOGRAM_BINS];
    for ind in population {
        if ind.fitness > best {
            best = ind.fitness;
        }
        sum = sum + ind.fitness;
        let bin = (ind.fitness.as_f64() * HISTOGRAM_BINS as f64) as usize;
        histogram[bin.min(HISTOGRAM_BINS - 1)] += 1;
    }
    GenerationStats {
        generation,
        best_fitness: best,
        mean_fitness: sum / S::of(population.len() as f64),
        fitness_histogram: histogram,
        new_evaluations: counts.evaluated,
        archive_hits: counts.hits,
        preselection_rejections: counts.preselected,
    }
}

#[derive(Debug, Default, Clone, Copy)]
struct AssignmentCounts {
    evaluated: usize,
    hits: usize,
    preselected: usize,
}

/// Offspring before fitness assignment.
struct Bred<S> {
    genotype: Genotype,
    phenotype: Phenotype,
    consumed: Vec<usize>,
    _scalar: std::marker::PhantomData<S>,
}

/// Turn mapped offspring into fitness-assigned individuals, evaluating new
/// gradient-using canonicals at most once. Duplicate canonicals within the
/// batch resolve exactly as sequential processing would: the first slot
/// evaluates, later slots hit the archive. Actual training runs in parallel;
/// bookkeeping is replayed in slot order, so results are identical to a
/// sequential pass.
fn assign_batch<S: Scalar>(
    bred: Vec<Bred<S>>,
    archive: &mut Archive<S>,
    evaluator: &(impl Evaluator<S> + Sync),
    generation: usize,
    nonviable_fitness: S,
) -> (Vec<Individual<S>>, AssignmentCounts) {
    // slots needing real training, deduplicated by canonical in slot order
    let mut first_slot_of: BTreeMap<&str, usize> = BTreeMap::new();
    let mut to_train: Vec<usize> = Vec::new();
    for (i, b) in bred.iter().enumerate() {
        if uses_gradient(&b.phenotype)
            && archive.get(&b.phenotype.canonical).is_none()
            && !first_slot_of.contains_key(b.phenotype.canonical.as_str())
        {
            first_slot_of.insert(&b.phenotype.canonical, i);
            to_train.push(i);
        }
    }
    let results: Vec<TrainingResult<S>> = to_train
        .par_iter()
        .map(|&i| evaluator.evaluate(&bred[i].phenotype))
        .collect();
    let fitness_of: BTreeMap<usize, S> = to_train
        .iter()
        .zip(&results)
        .map(|(&i, r)| (i, r.fitness_accuracy))
        .collect();

    let mut counts = AssignmentCounts::default();
    let mut out = Vec::with_capacity(bred.len());
    for (i, b) in bred.into_iter().enumerate() {
        let (fitness, provenance) = if !uses_gradient(&b.phenotype) {
            archive.record_preselected(&b.phenotype.canonical, nonviable_fitness, generation);
            (nonviable_fitness, Provenance::Preselected)
        } else if let Some(entry) = archive.get(&b.phenotype.canonical) {
            (entry.fitness, Provenance::ArchiveHit)
        } else {
            let f = fitness_of[&i];
            archive.record_evaluated(&b.phenotype.canonical, f, generation);
            (f, Provenance::Evaluated)
        };
        match provenance {
            Provenance::Evaluated => counts.evaluated += 1,
            Provenance::ArchiveHit => counts.hits += 1,
            Provenance::Preselected => counts.preselected += 1,
        }
        out.push(Individual {
            genotype: b.genotype,
            phenotype: b.phenotype,
            consumed: b.consumed,
            fitness,
            evaluated: provenance == Provenance::Evaluated,
        });
    }
    (out, counts)
}

/// Random initial population; slot i draws from its own derived stream.
pub fn initial_population<S: Scalar>(
    config: &EvolutionConfig<S>,
    grammar: &Grammar,
    archive: &mut Archive<S>,
    evaluator: &(impl Evaluator<S> + Sync),
) -> Result<(Vec<Individual<S>>, GenerationStats<S>), ConfigError> {
    let mut bred = Vec::with_capacity(config.population_size);
    for slot in 0..config.population_size {
        let mut rng = seeds::stream(&[config.master_seed, TAG_INIT, slot as u64]);
        let mut genotype = Genotype::empty(grammar);
        let outcome = map(grammar, &mut genotype, config.max_depth, &mut rng)?;
        bred.push(Bred {
            genotype,
            phenotype: outcome.phenotype,
            consumed: outcome.consumed,
            _scalar: std::marker::PhantomData,
        });
    }
    let (population, counts) =
        assign_batch(bred, archive, evaluator, 0, config.task.nonviable_fitness);
    let stats = population_stats(0, &population, &counts);
    Ok((population, stats))
}

/// Indices of the `elite_count` fittest individuals, ties resolved toward the
/// earlier index.
fn elite_indices<S: Scalar>(population: &[Individual<S>], elite_count: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..population.len()).collect();
    order.sort_by(|&a, &b| {
        population[b]
            .fitness
            .partial_cmp(&population[a].fitness)
            .expect("fitness is never NaN")
            .then(a.cmp(&b))
    });
    order.truncate(elite_count);
    order
}

/// One generation: elites are copied verbatim, remaining slots are filled by
/// tournament parents, rate-gated crossover, policy mutation, mapping, and
/// archive-mediated fitness assignment.
pub fn step_generation<S: Scalar>(
    population: &[Individual<S>],
    archive: &mut Archive<S>,
    config: &EvolutionConfig<S>,
    grammar: &Grammar,
    evaluator: &(impl Evaluator<S> + Sync),
    generation: usize,
) -> (Vec<Individual<S>>, GenerationStats<S>) {
    let elite_count = config.elite_count();
    let elites: Vec<Individual<S>> = elite_indices(population, elite_count)
        .into_iter()
        .map(|i| population[i].clone())
        .collect();

    let mut bred = Vec::with_capacity(config.population_size - elite_count);
    for slot in elite_count..config.population_size {
        let mut rng =
            seeds::stream(&[config.master_seed, TAG_REPRO, generation as u64, slot as u64]);
        let a = tournament_select(population, config.tournament_size, &mut rng);
        let crossed = rng.random_bool(config.crossover_rate);
        let (child, mask) = if crossed {
            let b = tournament_select(population, config.tournament_size, &mut rng);
            let (child, take_a) = crossover(
                &population[a].genotype,
                &population[b].genotype,
                &mut rng,
            );
            // each codon list's active count travels with its source parent
            let mask: Vec<usize> = take_a
                .iter()
                .enumerate()
                .map(|(i, &from_a)| {
                    if from_a {
                        population[a].consumed[i]
                    } else {
                        population[b].consumed[i]
                    }
                })
                .collect();
            (child, mask)
        } else {
            (population[a].genotype.clone(), population[a].consumed.clone())
        };
        let mutated = mutate(&child, grammar, &config.mutation_policy, &mask, &mut rng);
        let mut genotype = mutated;
        let outcome = map(grammar, &mut genotype, config.max_depth, &mut rng)
            .expect("validated config maps any genotype");
        bred.push(Bred {
            genotype,
            phenotype: outcome.phenotype,
            consumed: outcome.consumed,
            _scalar: std::marker::PhantomData,
        });
    }

    let (offspring, counts) =
        assign_batch(bred, archive, evaluator, generation, config.task.nonviable_fitness);
    let mut next = elites;
    next.extend(offspring);
    let stats = population_stats(generation, &next, &counts);
    (next, stats)
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Grammar(#[from] crate::grammar::GrammarError),
    #[error(transparent)]
    Binding(#[from] crate::fitness::CompileError),
}

/// Full run against the built-in task evaluator.
pub fn run<S: Scalar>(
    config: &EvolutionConfig<S>,
    grammar: &Grammar,
) -> Result<RunRecord<S>, RunError> {
    check_bindable(grammar, &Bindings::<S>::default())?;
    let evaluator = TaskEvaluator::new(config.task.clone());
    run_with_evaluator(config, grammar, &evaluator)
}

/// Full run with an injected evaluator (the instrumentation hook the tests
/// use). Deterministic: identical configs produce identical records.
pub fn run_with_evaluator<S: Scalar>(
    config: &EvolutionConfig<S>,
    grammar: &Grammar,
    evaluator: &(impl Evaluator<S> + Sync),
) -> Result<RunRecord<S>, RunError> {
    config.validate()?;
    if config.max_depth < grammar.start().min_depth {
        return Err(ConfigError::Map(MapError::DepthTooSmall {
            max_depth: config.max_depth,
            required: grammar.start().min_depth,
        })
        .into());
    }

    let mut archive = Archive::new();
    let (mut population, stats0) =
        initial_population(config, grammar, &mut archive, evaluator)?;
    let mut generation_stats = vec![stats0];
    let mut best = best_of(&population).clone();

    for generation in 1..=config.generations {
        let (next, stats) =
            step_generation(&population, &mut archive, config, grammar, evaluator, generation);
        population = next;
        let gen_best = best_of(&population);
        if gen_best.fitness > best.fitness {
            best = gen_best.clone();
        }
        generation_stats.push(stats);
    }

    let unique_viable_count =
        crate::metrics::unique_viable_behaviors(&archive, S::of(VIABILITY_THRESHOLD));
    Ok(RunRecord {
        config: config.clone(),
        generation_stats,
        best_individual: best,
        archive_size: archive.len(),
        unique_viable_count,
        evaluations_performed: archive.evaluations_performed,
        archive,
    })
}

fn best_of<S: Scalar>(population: &[Individual<S>]) -> &Individual<S> {
    let mut best = &population[0];
    for ind in &population[1..] {
        if ind.fitness > best.fitness {
            best = ind;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::FM_GRAMMAR;
    use crate::sge::ExprNode;

    type F = f64;

    fn grammar() -> Grammar {
        Grammar::parse(FM_GRAMMAR).unwrap()
    }

    /// Deterministic stub: fitness is a cheap hash of the canonical string,
    /// scaled into (0, 1).
    struct HashEvaluator;

    impl Evaluator<F> for HashEvaluator {
        fn evaluate(&self, phenotype: &Phenotype) -> TrainingResult<F> {
            let mut h: u64 = 0xcbf29ce484222325;
            for b in phenotype.canonical.bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
            let fitness = (h % 10_000) as f64 / 10_000.0;
            TrainingResult {
                fitness_accuracy: fitness,
                best_validation_accuracy: fitness,
                epochs_run: 1,
                diverged: false,
            }
        }
    }

    fn small_config(approach: Approach, seed: u64) -> EvolutionConfig<F> {
        let mut cfg = EvolutionConfig::preset(approach, seed);
        cfg.population_size = 20;
        cfg.generations = 8;
        cfg.task.train_size = 40;
        cfg.task.validation_size = 20;
        cfg.task.fitness_size = 20;
        cfg.task.holdout_test_size = 20;
        cfg.task.max_epochs = 20;
        cfg
    }

    #[test]
    fn presets_carry_published_parameters() {
        for (approach, crossover, homogeneous) in [
            (Approach::Fmx, 0.01, false),
            (Approach::Fm, 0.0, false),
            (Approach::Om, 0.0, true),
            (Approach::Omx, 0.9, true),
        ] {
            let cfg = EvolutionConfig::<F>::preset(approach, 1);
            assert_eq!(cfg.crossover_rate, crossover);
            assert_eq!(cfg.population_size, 100);
            assert_eq!(cfg.generations, 200);
            assert_eq!(cfg.elitism_fraction, 0.01);
            assert_eq!(cfg.tournament_size, 2);
            assert_eq!(cfg.max_depth, 17);
            if homogeneous {
                assert!(cfg.mutation_policy.rates().is_empty());
                assert_eq!(cfg.mutation_policy.default_rate(), 0.15);
            } else {
                assert_eq!(cfg.mutation_policy.rate_for("const"), 0.15);
                assert_eq!(cfg.mutation_policy.rate_for("var_const"), 0.05);
                assert_eq!(cfg.mutation_policy.rate_for("func"), 0.01);
                assert_eq!(cfg.mutation_policy.rate_for("expr"), 0.01);
            }
            assert_eq!(cfg.elite_count(), 1);
            cfg.validate().unwrap();
        }
    }

    #[test]
    fn gradient_detection_matches_examples() {
        let leaf = |t: &str| Phenotype::new(ExprNode::Leaf(t.into()));
        assert!(uses_gradient(&leaf("grad")));
        assert!(!uses_gradient(&leaf("alpha")));
        let nested = Phenotype::new(ExprNode::Binary {
            op: '+',
            left: Box::new(ExprNode::Binary {
                op: '*',
                left: Box::new(ExprNode::Leaf("grad".into())),
                right: Box::new(ExprNode::Leaf("0.01".into())),
            }),
            right: Box::new(ExprNode::Binary {
                op: '*',
                left: Box::new(ExprNode::Leaf("w".into())),
                right: Box::new(ExprNode::Leaf("0.0".into())),
            }),
        });
        assert!(uses_gradient(&nested));
    }

    #[test]
    fn assign_fitness_provenance_paths() {
        let mut archive = Archive::<F>::new();
        let ev = HashEvaluator;
        let alpha = Phenotype::new(ExprNode::Leaf("alpha".into()));
        let (f, p) = assign_fitness(&alpha, &mut archive, &ev, 0, 0.1);
        assert_eq!((f, p), (0.1, Provenance::Preselected));
        assert_eq!(archive.evaluations_performed, 0);
        // repeat of a non-gradient phenotype stays pre-selected
        let (_, p) = assign_fitness(&alpha, &mut archive, &ev, 1, 0.1);
        assert_eq!(p, Provenance::Preselected);
        assert_eq!(archive.get("alpha").unwrap().first_seen_generation, 0);

        let grad = Phenotype::new(ExprNode::Leaf("grad".into()));
        let (f1, p) = assign_fitness(&grad, &mut archive, &ev, 1, 0.1);
        assert_eq!(p, Provenance::Evaluated);
        assert_eq!(archive.evaluations_performed, 1);
        let (f2, p) = assign_fitness(&grad, &mut archive, &ev, 2, 0.1);
        assert_eq!(p, Provenance::ArchiveHit);
        assert_eq!(f1, f2);
        assert_eq!(archive.evaluations_performed, 1);
        assert_eq!(archive.get("grad").unwrap().evaluation_count_at_insert, 1);
    }

    #[test]
    fn tournament_prefers_the_fitter_draw() {
        let g = grammar();
        let mut rng = seeds::stream(&[1]);
        let mut population = Vec::new();
        for (i, f) in [0.9, 0.1].into_iter().enumerate() {
            let mut geno =
                crate::sge::random_genotype(&g, 17, &mut seeds::stream(&[i as u64])).unwrap();
            let out = map(&g, &mut geno, 17, &mut rng).unwrap();
            population.push(Individual {
                genotype: geno,
                phenotype: out.phenotype,
                consumed: out.consumed,
                fitness: f,
                evaluated: false,
            });
        }
        // size-2 tournaments must never lose to the weak individual when the
        // strong one is drawn; over many draws the strong one dominates
        let mut wins = 0;
        for _ in 0..1000 {
            if tournament_select(&population, 2, &mut rng) == 0 {
                wins += 1;
            }
        }
        assert!(wins > 700, "strong individual won only {wins}/1000");
        // k=1 is a uniform draw; both appear
        let mut seen = [false; 2];
        for _ in 0..100 {
            seen[tournament_select(&population, 1, &mut rng)] = true;
        }
        assert!(seen[0] && seen[1]);
    }

    #[test]
    fn tournament_ties_are_uniform_chi_square() {
        let g = grammar();
        let mut rng = seeds::stream(&[2]);
        let n = 10usize;
        let mut population = Vec::new();
        for i in 0..n {
            let mut geno =
                crate::sge::random_genotype(&g, 17, &mut seeds::stream(&[i as u64])).unwrap();
            let out = map(&g, &mut geno, 17, &mut rng).unwrap();
            population.push(Individual {
                genotype: geno,
                phenotype: out.phenotype,
                consumed: out.consumed,
                fitness: 0.5,
                evaluated: false,
            });
        }
        let draws = 100_000usize;
        let mut counts = vec![0usize; n];
        for _ in 0..draws {
            counts[tournament_select(&population, 2, &mut rng)] += 1;
        }
        let expected = draws as f64 / n as f64;
        let chi2: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        // chi-square critical value for df=9 at p=0.001 is 27.88
        assert!(chi2 < 27.88, "chi-square {chi2:.2} over uniform-tie draws");
    }

    #[test]
    fn generation_accounting_partitions_offspring() {
        let g = grammar();
        let cfg = small_config(Approach::Fmx, 5);
        let ev = HashEvaluator;
        let mut archive = Archive::new();
        let (pop, stats0) = initial_population(&cfg, &g, &mut archive, &ev).unwrap();
        assert_eq!(
            stats0.new_evaluations + stats0.archive_hits + stats0.preselection_rejections,
            cfg.population_size
        );
        let (_, stats1) = step_generation(&pop, &mut archive, &cfg, &g, &ev, 1);
        assert_eq!(
            stats1.new_evaluations + stats1.archive_hits + stats1.preselection_rejections,
            cfg.population_size - cfg.elite_count()
        );
        assert_eq!(
            stats1.fitness_histogram.iter().sum::<u32>() as usize,
            cfg.population_size
        );
    }

    #[test]
    fn elites_survive_verbatim() {
        let g = grammar();
        let cfg = small_config(Approach::Om, 11);
        let ev = HashEvaluator;
        let mut archive = Archive::new();
        let (mut pop, _) = initial_population(&cfg, &g, &mut archive, &ev).unwrap();
        for generation in 1..=5 {
            let elite_idx = elite_indices(&pop, cfg.elite_count());
            let elites_before: Vec<Individual<F>> =
                elite_idx.iter().map(|&i| pop[i].clone()).collect();
            let (next, _) = step_generation(&pop, &mut archive, &cfg, &g, &ev, generation);
            for (k, e) in elites_before.iter().enumerate() {
                assert_eq!(next[k].genotype, e.genotype);
                assert_eq!(next[k].phenotype.canonical, e.phenotype.canonical);
                assert_eq!(
                    next[k].fitness.to_bits(),
                    e.fitness.to_bits(),
                    "elite fitness must be copied bit for bit"
                );
            }
            pop = next;
        }
    }

    #[test]
    fn best_fitness_never_decreases() {
        let g = grammar();
        for seed in [3u64, 7, 13] {
            let cfg = small_config(Approach::Fmx, seed);
            let rec = run_with_evaluator(&cfg, &g, &HashEvaluator).unwrap();
            assert_eq!(rec.generation_stats.len(), cfg.generations + 1);
            let mut prev = f64::NEG_INFINITY;
            for s in &rec.generation_stats {
                assert!(
                    s.best_fitness >= prev,
                    "best fitness dropped at generation {}",
                    s.generation
                );
                prev = s.best_fitness;
            }
        }
    }

    #[test]
    fn zero_generations_yields_only_initial_stats() {
        let g = grammar();
        let mut cfg = small_config(Approach::Fm, 2);
        cfg.generations = 0;
        let rec = run_with_evaluator(&cfg, &g, &HashEvaluator).unwrap();
        assert_eq!(rec.generation_stats.len(), 1);
        assert_eq!(rec.generation_stats[0].generation, 0);
    }

    #[test]
    fn identical_seeds_reproduce_identical_records() {
        let g = grammar();
        let cfg = small_config(Approach::Omx, 21);
        let a = run_with_evaluator(&cfg, &g, &HashEvaluator).unwrap();
        let b = run_with_evaluator(&cfg, &g, &HashEvaluator).unwrap();
        assert_eq!(a.best_individual, b.best_individual);
        assert_eq!(a.generation_stats, b.generation_stats);
        assert_eq!(a.evaluations_performed, b.evaluations_performed);
        let c = run_with_evaluator(
            &EvolutionConfig { master_seed: 22, ..cfg.clone() },
            &g,
            &HashEvaluator,
        )
        .unwrap();
        assert_ne!(
            a.generation_stats, c.generation_stats,
            "different seeds should explore differently"
        );
    }

    #[test]
    fn archive_counts_distinct_gradient_users_only() {
        let g = grammar();
        let cfg = small_config(Approach::Omx, 31);
        let rec = run_with_evaluator(&cfg, &g, &HashEvaluator).unwrap();
        let gradient_entries = rec
            .archive
            .iter()
            .filter(|(c, _)| c.contains("grad"))
            .count();
        assert_eq!(rec.evaluations_performed, gradient_entries);
        assert!(rec.archive_size >= gradient_entries);
        let from_stats: usize =
            rec.generation_stats.iter().map(|s| s.new_evaluations).sum();
        assert_eq!(rec.evaluations_performed, from_stats);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let g = grammar();
        let mut cfg = small_config(Approach::Fm, 1);
        cfg.population_size = 0;
        assert!(matches!(
            run_with_evaluator(&cfg, &g, &HashEvaluator),
            Err(RunError::Config(ConfigError::EmptyPopulation))
        ));
        let mut cfg = small_config(Approach::Fm, 1);
        cfg.max_depth = 2;
        assert!(matches!(
            run_with_evaluator(&cfg, &g, &HashEvaluator),
            Err(RunError::Config(ConfigError::Map(_)))
        ));
        let mut cfg = small_config(Approach::Fm, 1);
        cfg.crossover_rate = 1.5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn unbindable_grammar_is_rejected_up_front() {
        let g = Grammar::parse("<s> ::= gamma | grad").unwrap();
        let cfg = small_config(Approach::Fm, 1);
        assert!(matches!(run(&cfg, &g), Err(RunError::Binding(_))));
        let ok = Grammar::parse("<s> ::= grad | alpha | 0.5").unwrap();
        check_bindable(&ok, &Bindings::<F>::default()).unwrap();
    }
}
