//! Run-level records and the four-metric comparison across approaches:
//! best fitness, final-generation population fitness, unique viable
//! behaviors, and training-evaluation counts, with Welch tests, Cohen's d,
//! and star annotations for every approach pair.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::evolution::{Approach, Archive, EvolutionConfig, GenerationStats, Individual};
use crate::scalar::Scalar;
use crate::stats::{cohens_d, significance_stars, welch_t_test, CohensD, WelchResult};

/// Everything a finished run reports: the configuration it ran under, the
/// per-generation stats stream, the best individual seen at any point, and
/// the archive with its summary counts.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord<S: Scalar> {
    pub config: EvolutionConfig<S>,
    pub generation_stats: Vec<GenerationStats<S>>,
    pub best_individual: Individual<S>,
    pub archive: Archive<S>,
    pub archive_size: usize,
    /// Distinct canonical phenotypes whose archived fitness exceeds the
    /// viability threshold, over the whole run.
    pub unique_viable_count: usize,
    pub evaluations_performed: usize,
}

impl<S: Scalar> RunRecord<S> {
    pub fn approach(&self) -> Approach {
        self.config.approach
    }

    pub fn master_seed(&self) -> u64 {
        self.config.master_seed
    }

    pub fn best_fitness(&self) -> S {
        self.best_individual.fitness
    }

    pub fn final_mean_fitness(&self) -> S {
        self.generation_stats
            .last()
            .expect("a run always records at least the initial generation")
            .mean_fitness
    }
}

/// Count of distinct canonical strings in the archive with recorded fitness
/// strictly above `threshold`.
pub fn unique_viable_behaviors<S: Scalar>(archive: &Archive<S>, threshold: S) -> usize {
    archive.iter().filter(|(_, e)| e.fitness > threshold).count()
}

/// The four comparison metrics, one sample per run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Metric {
    /// Fitness of the best individual found during evolution. Post-hoc test
    /// accuracy is a separate, separately-labeled report.
    BestFitness,
    /// Mean population fitness at the final generation.
    FinalMeanFitness,
    /// Distinct viable canonical phenotypes discovered over the run.
    UniqueViableBehaviors,
    /// Actual training events; the run's computational cost.
    EvaluationsPerformed,
}

impl Metric {
    pub const ALL: [Metric; 4] = [
        Metric::BestFitness,
        Metric::FinalMeanFitness,
        Metric::UniqueViableBehaviors,
        Metric::EvaluationsPerformed,
    ];

    /// Machine-readable identifier used in CSV output.
    pub fn column_name(self) -> &'static str {
        match self {
            Metric::BestFitness => "best_fitness",
            Metric::FinalMeanFitness => "final_mean_fitness",
            Metric::UniqueViableBehaviors => "unique_viable_behaviors",
            Metric::EvaluationsPerformed => "evaluations_performed",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Metric::BestFitness => "Best fitness (evolution)",
            Metric::FinalMeanFitness => "Final population fitness",
            Metric::UniqueViableBehaviors => "Unique viable behaviors",
            Metric::EvaluationsPerformed => "Training evaluations",
        }
    }

    /// Evaluations are a cost: fewer is better. Everything else is a gain.
    pub fn higher_is_better(self) -> bool {
        !matches!(self, Metric::EvaluationsPerformed)
    }

    pub fn extract<S: Scalar>(self, record: &RunRecord<S>) -> f64 {
        match self {
            Metric::BestFitness => record.best_fitness().as_f64(),
            Metric::FinalMeanFitness => record.final_mean_fitness().as_f64(),
            Metric::UniqueViableBehaviors => record.unique_viable_count as f64,
            Metric::EvaluationsPerformed => record.evaluations_performed as f64,
        }
    }

    fn format_mean(self, value: f64) -> String {
        match self {
            Metric::BestFitness | Metric::FinalMeanFitness => format!("{value:.4}"),
            Metric::UniqueViableBehaviors | Metric::EvaluationsPerformed => {
                format!("{value:.1}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApproachSamples {
    pub approach: Approach,
    /// One value per run, ordered by master seed.
    pub values: Vec<f64>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseTest {
    pub metric: Metric,
    pub approach_a: Approach,
    pub approach_b: Approach,
    pub mean_a: f64,
    pub mean_b: f64,
    pub welch: WelchResult,
    pub effect: CohensD,
    pub stars: &'static str,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricComparison {
    pub metric: Metric,
    /// Per-approach samples, in canonical approach order.
    pub samples: Vec<ApproachSamples>,
    /// All unordered approach pairs, in canonical order.
    pub pairwise: Vec<PairwiseTest>,
    /// Approach with the best mean, respecting the metric's direction.
    pub best: Approach,
    pub runner_up: Approach,
    /// Effect size of the best approach's samples against the runner-up's.
    pub best_vs_runner_up: CohensD,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonReport {
    /// Approaches present, in canonical order.
    pub approaches: Vec<Approach>,
    /// Runs per approach, parallel to `approaches`.
    pub runs_per_approach: Vec<usize>,
    pub metrics: Vec<MetricComparison>,
}

#[derive(Debug, Error, PartialEq)]
pub enum ComparisonError {
    #[error("need at least two approaches to compare, found {0}")]
    TooFewApproaches(usize),
    #[error("approach {approach} has {found} run(s); at least two are required")]
    InsufficientRuns { approach: Approach, found: usize },
}

/// Build the full comparison from a batch of finished runs. Records may
/// arrive in any order; grouping and ordering are canonical, so the report
/// is a pure function of the set of runs.
pub fn build_comparison<S: Scalar>(
    records: &[RunRecord<S>],
) -> Result<ComparisonReport, ComparisonError> {
    let mut groups: BTreeMap<Approach, Vec<&RunRecord<S>>> = BTreeMap::new();
    for r in records {
        groups.entry(r.approach()).or_default().push(r);
    }
    if groups.len() < 2 {
        return Err(ComparisonError::TooFewApproaches(groups.len()));
    }
    for group in groups.values_mut() {
        if group.len() < 2 {
            return Err(ComparisonError::InsufficientRuns {
                approach: group[0].approach(),
                found: group.len(),
            });
        }
        group.sort_by_key(|r| r.master_seed());
    }

    let approaches: Vec<Approach> = groups.keys().copied().collect();
    let runs_per_approach: Vec<usize> = approaches.iter().map(|a| groups[a].len()).collect();

    let mut metrics = Vec::with_capacity(Metric::ALL.len());
    for metric in Metric::ALL {
        let samples: Vec<ApproachSamples> = approaches
            .iter()
            .map(|&approach| {
                let values: Vec<f64> =
                    groups[&approach].iter().map(|r| metric.extract(r)).collect();
                let mean = values.iter().sum::<f64>() / values.len() as f64;
                ApproachSamples { approach, values, mean }
            })
            .collect();

        let mut pairwise = Vec::new();
        for i in 0..samples.len() {
            for j in i + 1..samples.len() {
                let (a, b) = (&samples[i], &samples[j]);
                let welch = welch_t_test(&a.values, &b.values);
                let effect = cohens_d(&a.values, &b.values);
                pairwise.push(PairwiseTest {
                    metric,
                    approach_a: a.approach,
                    approach_b: b.approach,
                    mean_a: a.mean,
                    mean_b: b.mean,
                    stars: significance_stars(welch.p_two_sided),
                    welch,
                    effect,
                });
            }
        }

        // rank by mean in the metric's preferred direction; canonical order
        // breaks exact ties
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.sort_by(|&x, &y| {
            let (mx, my) = (samples[x].mean, samples[y].mean);
            let cmp = mx.partial_cmp(&my).expect("metric means are finite");
            if metric.higher_is_better() { cmp.reverse() } else { cmp }.then(x.cmp(&y))
        });
        let best = samples[order[0]].approach;
        let runner_up = samples[order[1]].approach;
        let best_vs_runner_up =
            cohens_d(&samples[order[0]].values, &samples[order[1]].values);

        metrics.push(MetricComparison {
            metric,
            samples,
            pairwise,
            best,
            runner_up,
            best_vs_runner_up,
        });
    }

    Ok(ComparisonReport { approaches, runs_per_approach, metrics })
}

pub const COMPARISON_CSV_HEADER: &str =
    "metric,approach_a,approach_b,mean_a,mean_b,t,degrees_of_freedom,p_two_sided,cohens_d,effect_size,stars";

fn csv_f64(v: f64) -> String {
    format!("{v:.16e}")
}

impl ComparisonReport {
    pub fn pair(&self, metric: Metric, a: Approach, b: Approach) -> Option<&PairwiseTest> {
        self.metrics
            .iter()
            .find(|m| m.metric == metric)?
            .pairwise
            .iter()
            .find(|p| {
                (p.approach_a == a && p.approach_b == b)
                    || (p.approach_a == b && p.approach_b == a)
            })
    }

    pub fn samples(&self, metric: Metric, approach: Approach) -> Option<&ApproachSamples> {
        self.metrics
            .iter()
            .find(|m| m.metric == metric)?
            .samples
            .iter()
            .find(|s| s.approach == approach)
    }

    /// One row per pairwise test per metric; floats carry full precision.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(COMPARISON_CSV_HEADER);
        out.push('\n');
        for m in &self.metrics {
            for p in &m.pairwise {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{},{},{}\n",
                    m.metric.column_name(),
                    p.approach_a,
                    p.approach_b,
                    csv_f64(p.mean_a),
                    csv_f64(p.mean_b),
                    csv_f64(p.welch.t),
                    csv_f64(p.welch.degrees_of_freedom),
                    csv_f64(p.welch.p_two_sided),
                    csv_f64(p.effect.d),
                    p.effect.band,
                    p.stars,
                ));
            }
        }
        out
    }

    /// Summary table, one row per approach and one column per metric. The
    /// best cell in each column is bracketed and annotated with the
    /// effect-size band of best versus runner-up; pairwise tests follow.
    pub fn text_table(&self) -> String {
        let mut header: Vec<String> = vec!["Approach".to_string()];
        header.extend(self.metrics.iter().map(|m| m.metric.display_name().to_string()));

        let mut rows: Vec<Vec<String>> = Vec::new();
        for (idx, &approach) in self.approaches.iter().enumerate() {
            let mut row = vec![format!("{approach} (n={})", self.runs_per_approach[idx])];
            for m in &self.metrics {
                let mean = m.samples[idx].mean;
                let cell = if m.best == approach {
                    format!("[{} {}]", m.metric.format_mean(mean), m.best_vs_runner_up.band)
                } else {
                    m.metric.format_mean(mean)
                };
                row.push(cell);
            }
            rows.push(row);
        }

        let columns = header.len();
        let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
        for row in &rows {
            for (c, cell) in row.iter().enumerate() {
                widths[c] = widths[c].max(cell.len());
            }
        }

        let render = |cells: &[String]| -> String {
            let mut line = String::new();
            for (c, cell) in cells.iter().enumerate() {
                line.push_str(&format!("{:<width$}", cell, width = widths[c]));
                if c + 1 < columns {
                    line.push_str("  ");
                }
            }
            line.trim_end().to_string()
        };

        let mut out = String::new();
        out.push_str(&render(&header));
        out.push('\n');
        out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (columns - 1)));
        out.push('\n');
        for row in &rows {
            out.push_str(&render(row));
            out.push('\n');
        }
        out.push_str(
            "brackets: best per metric; letter: effect-size band of best vs runner-up\n",
        );
        out.push('\n');
        out.push_str("Pairwise Welch tests (two-sided):\n");
        for m in &self.metrics {
            out.push_str(&format!("  {}:\n", m.metric.display_name()));
            for p in &m.pairwise {
                out.push_str(&format!(
                    "    {:>4} vs {:<4}  p={:.4e}  d={:+.3} [{}] {}\n",
                    p.approach_a.name(),
                    p.approach_b.name(),
                    p.welch.p_two_sided,
                    p.effect.d,
                    p.effect.band,
                    p.stars,
                ));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::{Grammar, FM_GRAMMAR};
    use crate::sge::{ExprNode, Genotype, Phenotype};

    fn grammar() -> Grammar {
        Grammar::parse(FM_GRAMMAR).unwrap()
    }

    fn archive_with(entries: &[(&str, f64)]) -> Archive<f64> {
        let mut a = Archive::new();
        for &(canonical, fitness) in entries {
            a.record_evaluated(canonical, fitness, 0);
        }
        a
    }

    #[test]
    fn empty_archive_has_no_viable_behaviors() {
        assert_eq!(unique_viable_behaviors(&Archive::<f64>::new(), 0.5), 0);
    }

    #[test]
    fn viability_counts_distinct_canonicals_strictly_above_threshold() {
        let a = archive_with(&[("grad", 0.6), ("(grad + 0.0)", 0.6), ("alpha", 0.1)]);
        assert_eq!(unique_viable_behaviors(&a, 0.5), 2);
        let boundary = archive_with(&[("grad", 0.5)]);
        assert_eq!(unique_viable_behaviors(&boundary, 0.5), 0);
    }

    #[test]
    fn viability_is_monotone_in_threshold() {
        let a = archive_with(&[
            ("a", 0.1),
            ("b", 0.3),
            ("c", 0.5),
            ("d", 0.59),
            ("e", 0.6),
            ("f", 0.95),
        ]);
        let mut prev = usize::MAX;
        for t in [0.0, 0.3, 0.5, 0.59, 0.6, 0.9, 1.0] {
            let count = unique_viable_behaviors(&a, t);
            assert!(count <= prev, "count rose from {prev} to {count} at threshold {t}");
            prev = count;
        }
        assert_eq!(unique_viable_behaviors(&a, 0.0), 6);
        assert_eq!(unique_viable_behaviors(&a, 1.0), 0);
    }

    fn record(
        g: &Grammar,
        approach: Approach,
        seed: u64,
        best: f64,
        final_mean: f64,
        unique: usize,
        evals: usize,
    ) -> RunRecord<f64> {
        let stats = GenerationStats {
            generation: 0,
            best_fitness: best,
            mean_fitness: final_mean,
            fitness_histogram: [0; crate::evolution::HISTOGRAM_BINS],
            new_evaluations: evals,
            archive_hits: 0,
            preselection_rejections: 0,
        };
        RunRecord {
            config: EvolutionConfig::preset(approach, seed),
            generation_stats: vec![stats],
            best_individual: Individual {
                genotype: Genotype::empty(g),
                phenotype: Phenotype::new(ExprNode::Leaf("grad".into())),
                consumed: vec![0; g.len()],
                fitness: best,
                evaluated: true,
            },
            archive: Archive::new(),
            archive_size: unique,
            unique_viable_count: unique,
            evaluations_performed: evals,
        }
    }

    fn four_approach_batch(g: &Grammar) -> Vec<RunRecord<f64>> {
        let mut records = Vec::new();
        let specs = [
            (Approach::Fmx, [0.80, 0.84], [0.60, 0.64], [40, 44], [200, 210]),
            (Approach::Fm, [0.78, 0.82], [0.58, 0.61], [30, 33], [150, 160]),
            (Approach::Om, [0.74, 0.76], [0.30, 0.33], [12, 14], [220, 230]),
            (Approach::Omx, [0.73, 0.77], [0.10, 0.12], [7, 9], [700, 720]),
        ];
        for (approach, best, mean, unique, evals) in specs {
            for i in 0..2 {
                records.push(record(
                    g,
                    approach,
                    i as u64 + 1,
                    best[i],
                    mean[i],
                    unique[i],
                    evals[i],
                ));
            }
        }
        records
    }

    #[test]
    fn four_approaches_give_six_pairwise_tests_per_metric() {
        let g = grammar();
        let report = build_comparison(&four_approach_batch(&g)).unwrap();
        assert_eq!(report.approaches.len(), 4);
        assert_eq!(report.metrics.len(), 4);
        for m in &report.metrics {
            assert_eq!(m.pairwise.len(), 6);
        }
        let first = &report.metrics[0].pairwise[0];
        assert_eq!((first.approach_a, first.approach_b), (Approach::Fmx, Approach::Fm));
    }

    #[test]
    fn two_approaches_give_one_pairwise_test_per_metric() {
        let g = grammar();
        let records = vec![
            record(&g, Approach::Fm, 1, 0.8, 0.5, 10, 100),
            record(&g, Approach::Fm, 2, 0.7, 0.4, 12, 110),
            record(&g, Approach::Om, 1, 0.6, 0.3, 5, 120),
            record(&g, Approach::Om, 2, 0.5, 0.2, 6, 130),
        ];
        let report = build_comparison(&records).unwrap();
        for m in &report.metrics {
            assert_eq!(m.pairwise.len(), 1);
        }
    }

    #[test]
    fn identical_run_sets_show_no_significance() {
        let g = grammar();
        let records = vec![
            record(&g, Approach::Fmx, 1, 0.8, 0.5, 10, 100),
            record(&g, Approach::Fmx, 2, 0.6, 0.4, 12, 120),
            record(&g, Approach::Om, 1, 0.8, 0.5, 10, 100),
            record(&g, Approach::Om, 2, 0.6, 0.4, 12, 120),
        ];
        let report = build_comparison(&records).unwrap();
        for m in &report.metrics {
            let p = &m.pairwise[0];
            assert_eq!(p.welch.p_two_sided, 1.0, "{:?}", m.metric);
            assert_eq!(p.welch.t, 0.0);
            assert_eq!(p.stars, "");
            assert_eq!(p.effect.d, 0.0);
        }
    }

    #[test]
    fn insufficient_samples_are_rejected() {
        let g = grammar();
        let one_approach = vec![
            record(&g, Approach::Fm, 1, 0.8, 0.5, 10, 100),
            record(&g, Approach::Fm, 2, 0.7, 0.4, 12, 110),
        ];
        assert_eq!(
            build_comparison(&one_approach).unwrap_err(),
            ComparisonError::TooFewApproaches(1)
        );
        let short_group = vec![
            record(&g, Approach::Fm, 1, 0.8, 0.5, 10, 100),
            record(&g, Approach::Fm, 2, 0.7, 0.4, 12, 110),
            record(&g, Approach::Om, 1, 0.6, 0.3, 5, 120),
        ];
        assert_eq!(
            build_comparison(&short_group).unwrap_err(),
            ComparisonError::InsufficientRuns { approach: Approach::Om, found: 1 }
        );
        assert_eq!(build_comparison::<f64>(&[]).unwrap_err(), ComparisonError::TooFewApproaches(0));
    }

    #[test]
    fn best_per_metric_respects_direction() {
        let g = grammar();
        let report = build_comparison(&four_approach_batch(&g)).unwrap();
        let by_metric: BTreeMap<Metric, &MetricComparison> =
            report.metrics.iter().map(|m| (m.metric, m)).collect();
        assert_eq!(by_metric[&Metric::BestFitness].best, Approach::Fmx);
        assert_eq!(by_metric[&Metric::FinalMeanFitness].best, Approach::Fmx);
        assert_eq!(by_metric[&Metric::UniqueViableBehaviors].best, Approach::Fmx);
        // the cost metric prefers fewer evaluations
        assert_eq!(by_metric[&Metric::EvaluationsPerformed].best, Approach::Fm);
        assert_eq!(by_metric[&Metric::EvaluationsPerformed].runner_up, Approach::Fmx);
    }

    #[test]
    fn sample_values_are_ordered_by_seed() {
        let g = grammar();
        // insert records in reversed seed order
        let records = vec![
            record(&g, Approach::Fm, 9, 0.9, 0.5, 10, 100),
            record(&g, Approach::Fm, 1, 0.1, 0.4, 12, 110),
            record(&g, Approach::Om, 2, 0.6, 0.3, 5, 120),
            record(&g, Approach::Om, 1, 0.5, 0.2, 6, 130),
        ];
        let report = build_comparison(&records).unwrap();
        let fm = report.samples(Metric::BestFitness, Approach::Fm).unwrap();
        assert_eq!(fm.values, vec![0.1, 0.9]);
    }

    #[test]
    fn csv_has_one_row_per_pair_per_metric() {
        let g = grammar();
        let report = build_comparison(&four_approach_batch(&g)).unwrap();
        let csv = report.to_csv();
        let lines: Vec<&str> = csv.trim_end().lines().collect();
        assert_eq!(lines[0], COMPARISON_CSV_HEADER);
        assert_eq!(lines.len(), 1 + 4 * 6);
        for line in &lines[1..] {
            assert_eq!(line.split(',').count(), 11, "bad row: {line}");
        }
        assert!(lines[1].starts_with("best_fitness,FMX,FM,"));
    }

    #[test]
    fn pair_lookup_works_in_both_orientations() {
        let g = grammar();
        let report = build_comparison(&four_approach_batch(&g)).unwrap();
        let ab = report.pair(Metric::BestFitness, Approach::Fmx, Approach::Omx).unwrap();
        let ba = report.pair(Metric::BestFitness, Approach::Omx, Approach::Fmx).unwrap();
        assert_eq!(ab, ba);
        assert!(report.pair(Metric::BestFitness, Approach::Fmx, Approach::Fmx).is_none());
    }

    #[test]
    fn text_table_marks_best_cells() {
        let g = grammar();
        let report = build_comparison(&four_approach_batch(&g)).unwrap();
        let table = report.text_table();
        for m in Metric::ALL {
            assert!(table.contains(m.display_name()), "missing column {m:?}");
        }
        for a in Approach::ALL {
            assert!(table.contains(a.name()), "missing row {a:?}");
        }
        // exactly one bracketed best cell per metric column
        assert_eq!(table.matches('[').count(), 4 + 6 * 4, "best markers plus pairwise bands");
        assert!(table.contains("(n=2)"));
    }

    #[test]
    fn report_is_independent_of_record_order() {
        let g = grammar();
        let mut records = four_approach_batch(&g);
        let forward = build_comparison(&records).unwrap();
        records.reverse();
        let reversed = build_comparison(&records).unwrap();
        assert_eq!(forward, reversed);
        assert_eq!(forward.to_csv(), reversed.to_csv());
        assert_eq!(forward.text_table(), reversed.text_table());
    }
}
