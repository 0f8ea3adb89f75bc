//! Sliding-window experiments and parameter sweeps.

use std::collections::HashSet;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{schedule_windows, select_test, select_training, Corpus, OnParseError, Schedule, Window};
use crate::error::{ConfigError, HarnessError, TrainError};
use crate::metrics::{self, aggregate, evaluate_all, AggregateReport, ReportRow, DEFAULT_COVERAGES, DEFAULT_SAMPLES};
use crate::model::{train_with, TrainConfig, WeightingAlgo};
use crate::optim::LbfgsConfig;
use crate::seed;
use crate::tokenize::{Field, FieldSet, Tokenizer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Glob patterns of NDJSON corpus files.
    #[serde(default)]
    pub corpus: Vec<String>,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default = "default_algorithms")]
    pub algorithms: Vec<WeightingAlgo>,
    #[serde(default = "default_fields")]
    pub fields: FieldSet,
    #[serde(default = "default_min_instances")]
    pub min_instances: usize,
    #[serde(default = "default_max_components")]
    pub max_components: usize,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_error_epsilon")]
    pub error_epsilon_km: f64,
    #[serde(default)]
    pub lbfgs: LbfgsConfig,
    /// Monte-Carlo samples per estimate.
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_coverages")]
    pub coverages: Vec<f64>,
    /// Worker threads; 0 uses the global pool.
    #[serde(default)]
    pub threads: usize,
    /// Off leaves the runtime column empty so reports are reproducible.
    #[serde(default = "yes")]
    pub record_timing: bool,
    #[serde(default)]
    pub skip_bad_lines: bool,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

fn default_algorithms() -> Vec<WeightingAlgo> {
    vec![WeightingAlgo::ErrSae { alpha: 4.0 }]
}
fn default_fields() -> FieldSet {
    FieldSet::ALL
}
fn default_min_instances() -> usize {
    3
}
fn default_max_components() -> usize {
    20
}
fn default_lambda() -> f64 {
    1.0
}
fn default_error_epsilon() -> f64 {
    crate::weighting::ERROR_EPSILON_KM
}
fn default_samples() -> usize {
    DEFAULT_SAMPLES
}
fn default_coverages() -> Vec<f64> {
    DEFAULT_COVERAGES.to_vec()
}
fn yes() -> bool {
    true
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        toml::from_str("").expect("all fields have defaults")
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.schedule.validate()?;
        if self.fields.is_empty() {
            return Err(ConfigError::Invalid("fields must not be empty".into()));
        }
        if self.algorithms.is_empty() {
            return Err(ConfigError::Invalid("at least one algorithm is required".into()));
        }
        if self.samples == 0 {
            return Err(ConfigError::Invalid("samples must be >= 1".into()));
        }
        if self.max_components == 0 {
            return Err(ConfigError::Invalid("max_components must be >= 1".into()));
        }
        if let Some(b) = self.coverages.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(ConfigError::Invalid(format!("coverage {b} outside (0, 1)")));
        }
        Ok(())
    }

    pub fn train_config(&self, algorithm: WeightingAlgo, seed: u64) -> TrainConfig {
        TrainConfig {
            algorithm,
            fields: self.fields,
            min_instances: self.min_instances,
            max_components: self.max_components,
            lambda: self.lambda,
            error_epsilon_km: self.error_epsilon_km,
            seed,
            lbfgs: self.lbfgs,
        }
    }

    pub fn load_corpus(&self) -> Result<Corpus, HarnessError> {
        let policy = if self.skip_bad_lines { OnParseError::Skip } else { OnParseError::Abort };
        Ok(Corpus::load(&self.corpus, policy)?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SkipReason {
    NoTrainingData,
    NoNgrams,
    NoTestData,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    /// One row per (window, algorithm) that ran.
    pub rows: Vec<ReportRow>,
    /// One row per algorithm averaging its window rows.
    pub summaries: Vec<ReportRow>,
    pub scheduled: usize,
    pub skipped: Vec<(usize, SkipReason)>,
}

impl ExperimentReport {
    pub fn write_csv<W: Write>(&self, w: W) -> io::Result<()> {
        let all: Vec<ReportRow> = self.rows.iter().chain(&self.summaries).cloned().collect();
        metrics::write_csv(w, &all)
    }

    pub fn table(&self) -> String {
        let all: Vec<ReportRow> = self.rows.iter().chain(&self.summaries).cloned().collect();
        metrics::format_table(&all)
    }

    pub fn summary(&self, algorithm: WeightingAlgo) -> Option<&AggregateReport> {
        let name = algorithm.to_string();
        self.summaries.iter().find(|r| r.algorithm == name).map(|r| &r.report)
    }
}

/// Runs `f` on a pool of `threads` workers, or the global pool for 0.
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T, HarnessError> {
    if threads == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| HarnessError::Config(ConfigError::Invalid(e.to_string())))?;
    Ok(pool.install(f))
}

pub fn run_experiment_files(cfg: &ExperimentConfig) -> Result<ExperimentReport, HarnessError> {
    let corpus = cfg.load_corpus()?;
    run_experiment(&corpus, cfg)
}

pub fn run_experiment(corpus: &Corpus, cfg: &ExperimentConfig) -> Result<ExperimentReport, HarnessError> {
    cfg.validate()?;
    let span = corpus.span().ok_or(HarnessError::EmptyCorpus)?;
    let windows = schedule_windows(span.start, span.end, &cfg.schedule);
    with_threads(cfg.threads, || {
        let mut rows = Vec::new();
        let mut skipped = Vec::new();
        for w in &windows {
            match run_window(corpus, cfg, w)? {
                Ok(mut r) => rows.append(&mut r),
                Err(reason) => {
                    log::info!("window {} skipped: {reason:?}", w.index);
                    skipped.push((w.index, reason));
                }
            }
        }
        let summaries = cfg.algorithms.iter().map(|a| summarize(&rows, &a.to_string(), cfg)).collect();
        Ok(ExperimentReport { rows, summaries, scheduled: windows.len(), skipped })
    })?
}

fn run_window(
    corpus: &Corpus,
    cfg: &ExperimentConfig,
    w: &Window,
) -> Result<Result<Vec<ReportRow>, SkipReason>, HarnessError> {
    let master = cfg.schedule.rng_seed;
    let wseed = seed::subseed_n(master, w.index as u64);
    let training = select_training(&corpus.records, &w.train);
    if training.is_empty() {
        return Ok(Err(SkipReason::NoTrainingData));
    }
    let users: HashSet<String> = training.iter().map(|r| r.user_id.clone()).collect();
    let tests = select_test(
        &corpus.records,
        &w.test,
        &users,
        cfg.schedule.test_sample_size,
        seed::subseed(wseed, "test-sample"),
    );
    if tests.is_empty() {
        return Ok(Err(SkipReason::NoTestData));
    }
    assert!(tests.iter().all(|t| !users.contains(&t.user_id)), "test user appears in training");

    let tokenizer = Tokenizer::default();
    let messages: Vec<_> = tests.par_iter().map(|r| tokenizer.tokenize(r, cfg.fields)).collect();
    let mut rows = Vec::new();
    for algo in &cfg.algorithms {
        let started = Instant::now();
        let name = algo.to_string();
        let tcfg = cfg.train_config(*algo, seed::subseed(wseed, "train"));
        let model = match train_with(&training, &tcfg, &tokenizer, Some(w.train)) {
            Ok(m) => m,
            Err(TrainError::NoNgrams(_)) => return Ok(Err(SkipReason::NoNgrams)),
            Err(e) => return Err(e.into()),
        };
        let located: Vec<_> = messages
            .par_iter()
            .map(|m| model.locate(m).map(|d| (d, m.origin.expect("test records are geotagged"))))
            .collect();
        let no_estimate = located.iter().filter(|l| l.is_none()).count();
        let items: Vec<_> = located.into_iter().flatten().collect();
        let evals = evaluate_all(&items, cfg.samples, &cfg.coverages, seed::subseed(wseed, &format!("metrics/{name}")));
        let report = aggregate(&evals, no_estimate, &cfg.coverages);
        let runtime_s = cfg.record_timing.then(|| started.elapsed().as_secs_f64());
        rows.push(ReportRow { window: w.index.to_string(), algorithm: name, report, runtime_s });
    }
    Ok(Ok(rows))
}

fn finite_mean_std(v: impl Iterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = v.filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 { (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    (m, sd)
}

/// Unweighted mean over windows; the std columns hold the spread of the
/// per-window means.
fn summarize(rows: &[ReportRow], algorithm: &str, cfg: &ExperimentConfig) -> ReportRow {
    let mine: Vec<&AggregateReport> = rows.iter().filter(|r| r.algorithm == algorithm).map(|r| &r.report).collect();
    let (mcae, mcae_std) = finite_mean_std(mine.iter().map(|r| r.mcae));
    let (msae, msae_std) = finite_mean_std(mine.iter().map(|r| r.msae));
    let per_beta = |get: fn(&AggregateReport, f64) -> f64| -> Vec<(f64, f64)> {
        cfg.coverages.iter().map(|&b| (b, finite_mean_std(mine.iter().map(|r| get(r, b))).0)).collect()
    };
    let report = AggregateReport {
        n_tests: mine.iter().map(|r| r.n_tests).sum(),
        n_no_estimate: mine.iter().map(|r| r.n_no_estimate).sum(),
        success_rate: finite_mean_std(mine.iter().map(|r| r.success_rate)).0,
        mcae,
        mcae_std,
        msae,
        msae_std,
        median_cae: finite_mean_std(mine.iter().map(|r| r.median_cae)).0,
        median_sae: finite_mean_std(mine.iter().map(|r| r.median_sae)).0,
        mpra: per_beta(AggregateReport::mpra_at),
        oc: per_beta(AggregateReport::oc_at),
    };
    let runtime_s = if cfg.record_timing {
        Some(rows.iter().filter(|r| r.algorithm == algorithm).filter_map(|r| r.runtime_s).sum())
    } else {
        None
    };
    ReportRow { window: "summary".into(), algorithm: algorithm.into(), report, runtime_s }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldRow {
    pub fields: FieldSet,
    pub mcae: f64,
    pub success_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldSummary {
    pub field: Field,
    pub alone_mcae: f64,
    pub alone_success_rate: f64,
    /// Mean over subsets lacking the field of MCAE(S) − MCAE(S ∪ field).
    pub mcae_improvement: f64,
    /// Mean over subsets lacking the field of success(S ∪ field) − success(S).
    pub success_improvement: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldSweep {
    /// Sorted by MCAE ascending.
    pub rows: Vec<FieldRow>,
    pub per_field: Vec<FieldSummary>,
}

/// Per-field summary from a subset table; `rows` may be in any order.
pub fn field_improvements(rows: &[FieldRow]) -> Vec<FieldSummary> {
    let find = |s: FieldSet| rows.iter().find(|r| r.fields == s);
    Field::ALL
        .iter()
        .map(|&f| {
            let alone = find(FieldSet::empty().with(f));
            let (mut dm, mut nm, mut ds, mut ns) = (0.0, 0, 0.0, 0);
            for s in FieldSet::nonempty_subsets().filter(|s| !s.contains(f)) {
                if let (Some(a), Some(b)) = (find(s), find(s.with(f))) {
                    if a.mcae.is_finite() && b.mcae.is_finite() {
                        dm += a.mcae - b.mcae;
                        nm += 1;
                    }
                    if a.success_rate.is_finite() && b.success_rate.is_finite() {
                        ds += b.success_rate - a.success_rate;
                        ns += 1;
                    }
                }
            }
            FieldSummary {
                field: f,
                alone_mcae: alone.map_or(f64::NAN, |r| r.mcae),
                alone_success_rate: alone.map_or(f64::NAN, |r| r.success_rate),
                mcae_improvement: if nm > 0 { dm / nm as f64 } else { f64::NAN },
                success_improvement: if ns > 0 { ds / ns as f64 } else { f64::NAN },
            }
        })
        .collect()
}

/// Runs the first configured algorithm on all 31 non-empty field subsets.
pub fn field_subset_sweep(corpus: &Corpus, base: &ExperimentConfig) -> Result<FieldSweep, HarnessError> {
    let algo = *base.algorithms.first().ok_or_else(|| ConfigError::Invalid("no algorithm".into()))?;
    let mut rows = Vec::new();
    for fields in FieldSet::nonempty_subsets() {
        let cfg = ExperimentConfig { fields, algorithms: vec![algo], ..base.clone() };
        let rep = run_experiment(corpus, &cfg)?;
        let s = &rep.summaries[0].report;
        rows.push(FieldRow { fields, mcae: s.mcae, success_rate: s.success_rate });
    }
    rows.sort_by(|a, b| {
        a.mcae.is_nan().cmp(&b.mcae.is_nan()).then(a.mcae.total_cmp(&b.mcae)).then(a.fields.bits().cmp(&b.fields.bits()))
    });
    let per_field = field_improvements(&rows);
    Ok(FieldSweep { rows, per_field })
}

impl FieldSweep {
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "fields,mcae,success_rate")?;
        for r in &self.rows {
            writeln!(w, "\"{}\",{},{}", r.fields, r.mcae, r.success_rate)?;
        }
        writeln!(w)?;
        writeln!(w, "field,alone_mcae,alone_success_rate,mcae_improvement,success_improvement")?;
        for f in &self.per_field {
            writeln!(
                w,
                "{},{},{},{},{}",
                f.field, f.alone_mcae, f.alone_success_rate, f.mcae_improvement, f.success_improvement
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub value: f64,
    pub mcae: f64,
    /// Spread of per-window MCAE.
    pub mcae_std: f64,
    pub success_rate: f64,
    pub windows: usize,
    pub runtime_s: Option<f64>,
}

fn sweep(
    corpus: &Corpus,
    cfg: &ExperimentConfig,
    values: &[f64],
    set: fn(&mut Schedule, f64),
) -> Result<Vec<SweepPoint>, HarnessError> {
    if values.is_empty() {
        return Err(ConfigError::Invalid("sweep needs at least one value".into()).into());
    }
    if corpus.records.is_empty() {
        return Err(HarnessError::EmptyCorpus);
    }
    let algo = *cfg.algorithms.first().ok_or_else(|| ConfigError::Invalid("no algorithm".into()))?;
    values
        .iter()
        .map(|&v| {
            let mut c = ExperimentConfig { algorithms: vec![algo], ..cfg.clone() };
            set(&mut c.schedule, v);
            let rep = run_experiment(corpus, &c)?;
            let s = &rep.summaries[0];
            Ok(SweepPoint {
                value: v,
                mcae: s.report.mcae,
                mcae_std: s.report.mcae_std,
                success_rate: s.report.success_rate,
                windows: rep.rows.len(),
                runtime_s: s.runtime_s,
            })
        })
        .collect()
}

/// One experiment per gap length, in days.
pub fn gap_sweep(corpus: &Corpus, cfg: &ExperimentConfig, gaps: &[f64]) -> Result<Vec<SweepPoint>, HarnessError> {
    sweep(corpus, cfg, gaps, |s, v| s.gap_days = v)
}

/// One experiment per training duration, in days.
pub fn training_size_sweep(
    corpus: &Corpus,
    cfg: &ExperimentConfig,
    sizes: &[f64],
) -> Result<Vec<SweepPoint>, HarnessError> {
    sweep(corpus, cfg, sizes, |s, v| s.training_days = v)
}

pub fn write_sweep_csv<W: Write>(mut w: W, name: &str, points: &[SweepPoint]) -> io::Result<()> {
    writeln!(w, "{name},mcae,mcae_std,success_rate,windows,runtime_s")?;
    for p in points {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            p.value,
            p.mcae,
            p.mcae_std,
            p.success_rate,
            p.windows,
            p.runtime_s.map(|t| format!("{t:.3}")).unwrap_or_default()
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_and_validation() {
        let c = ExperimentConfig::default();
        assert_eq!(c.algorithms, [WeightingAlgo::ErrSae { alpha: 4.0 }]);
        assert_eq!(c.samples, 1000);
        assert_eq!(c.coverages, [0.5, 0.9]);
        let c = ExperimentConfig::from_toml(
            r#"
            corpus = ["a/*.ndjson"]
            algorithms = ["err-sae4", "all-tweets"]
            fields = "tx,lo"
            record_timing = false
            [schedule]
            training_days = 2
            stride_days = 13
            "#,
        )
        .unwrap();
        assert_eq!(c.schedule.stride_days, 13.0);
        assert_eq!(c.fields.len(), 2);
        assert!(ExperimentConfig::from_toml("algorithms = [\"bogus\"]").is_err());
        assert!(ExperimentConfig::from_toml("coverages = [1.5]").is_err());
        assert!(ExperimentConfig::from_toml("unknown_key = 1").is_err());
        assert!(ExperimentConfig::from_toml("[schedule]\nstride_days = 0").is_err());
    }

    fn row(bits: u8, mcae: f64, success: f64) -> FieldRow {
        FieldRow { fields: FieldSet::from_bits(bits), mcae, success_rate: success }
    }

    #[test]
    fn improvements_by_brute_force() {
        // mcae = 1000 − 100·(number of fields) − 50·[tx present]
        let rows: Vec<FieldRow> = (1u8..32)
            .map(|b| {
                let s = FieldSet::from_bits(b);
                row(b, 1000.0 - 100.0 * s.len() as f64 - if s.contains(Field::Tx) { 50.0 } else { 0.0 }, 0.5)
            })
            .collect();
        let sum = field_improvements(&rows);
        let tx = sum.iter().find(|f| f.field == Field::Tx).unwrap();
        assert!((tx.mcae_improvement - 150.0).abs() < 1e-9);
        let lo = sum.iter().find(|f| f.field == Field::Lo).unwrap();
        assert!((lo.mcae_improvement - 100.0).abs() < 1e-9);
        assert_eq!(lo.success_improvement, 0.0);
        assert_eq!(tx.alone_mcae, 850.0);
    }
}
