//! Grammar-guided genetic programming over gradient-update expressions.
//!
//! The crate evolves small optimizer expressions — update rules built from
//! the gradient, the current weight, and tuned constants — with a
//! structured-grammatical-evolution representation: one codon list per
//! grammar non-terminal, per-non-terminal mutation rates, optional low-rate
//! crossover, a run-scoped phenotype archive that trains each distinct
//! expression at most once, and pre-selection that skips training for
//! expressions that ignore the gradient.
//!
//! Fitness is the test accuracy of a logistic-regression model trained with
//! the candidate update rule on a synthetic two-Gaussian classification
//! task, which keeps whole experiment batches runnable on a laptop while
//! preserving the search dynamics of interest.
//!
//! Modules:
//! - [`grammar`]: BNF parsing, minimum expansion depths, recursion flags.
//! - [`sge`]: genotypes, depth-bounded mapping, mutation, crossover.
//! - [`seeds`]: deterministic stream derivation for reproducible runs.
//! - [`fitness`]: the synthetic task, expression compiler, training loop.
//! - [`stats`]: Welch's t-test, Cohen's d, significance stars.
//! - [`evolution`]: the generational loop, archive, and presets.
//! - [`metrics`]: run records and the cross-approach comparison report.
//! - [`cli`]: the `facilmut` experiment harness.
//!
//! Numeric code is generic over [`scalar::Scalar`] (implemented for `f32`
//! and `f64`); the [`Real`] alias fixes the default precision used by the
//! binary.

pub mod cli;
pub mod evolution;
pub mod fitness;
pub mod grammar;
pub mod metrics;
pub mod scalar;
pub mod seeds;
pub mod sge;
pub mod stats;

/// Default scalar type used by the command-line harness.
pub type Real = f64;

pub type RealTaskConfig = fitness::FitnessTaskConfig<Real>;
pub type RealEvolutionConfig = evolution::EvolutionConfig<Real>;
pub type RealRunRecord = metrics::RunRecord<Real>;
pub type RealPostHocReport = fitness::PostHocReport<Real>;

pub use evolution::Approach;
pub use grammar::Grammar;
pub use scalar::Scalar;
