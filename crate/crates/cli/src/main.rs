use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use chrono::{DateTime, NaiveDate, Utc};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use geogmm::corpus::{days, select_training, Corpus, OnParseError, TimeInterval};
use geogmm::error::{HarnessError, TrainError};
use geogmm::harness::{self, ExperimentConfig};
use geogmm::metrics::{self, aggregate, evaluate_all, ReportRow};
use geogmm::model::{train_with, LocationModel, TrainConfig, WeightingAlgo};
use geogmm::synthgen::{self, SynthConfig};
use geogmm::tokenize::{FieldSet, Tokenizer};
use geogmm::{seed, GeoPoint};

#[derive(Parser)]
#[command(name = "geogmm", version, about = "Text geolocation with per-n-gram gaussian mixtures")]
struct Cli {
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a location model on a time slice of a corpus.
    Train(TrainArgs),
    /// Estimate locations for messages with a trained model.
    Locate(LocateArgs),
    /// Score a trained model on geotagged messages.
    Evaluate(EvaluateArgs),
    /// Run a windowed experiment described by a TOML file.
    Experiment(ExperimentArgs),
    /// Repeat an experiment over field subsets, gaps or training sizes.
    Sweep(SweepArgs),
    /// Generate a synthetic corpus from a city file.
    Synth(SynthArgs),
}

#[derive(clap::Args)]
struct TrainArgs {
    /// Corpus file glob (repeatable).
    #[arg(long, required = true)]
    corpus: Vec<String>,
    /// First training day (YYYY-MM-DD or RFC 3339); defaults to the corpus start.
    #[arg(long)]
    from: Option<String>,
    #[arg(long, default_value_t = 1.0)]
    days: f64,
    #[arg(long, default_value = "all")]
    fields: FieldSet,
    /// Weighting algorithm: err-sae, one, all-tweets, qpr-<property>, opt-{id,attr,both}.
    #[arg(long, default_value = "err-sae")]
    algo: String,
    /// Exponent for err-sae.
    #[arg(long, default_value_t = 4.0)]
    alpha: f64,
    #[arg(long, default_value_t = 3)]
    min_instances: usize,
    #[arg(long, default_value_t = 20)]
    max_components: usize,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Skip unparseable corpus lines instead of failing.
    #[arg(long)]
    skip_bad_lines: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct LocateArgs {
    #[arg(long)]
    model: PathBuf,
    /// NDJSON messages in corpus format.
    #[arg(long)]
    input: PathBuf,
    /// Defaults to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of highest-share n-grams to list per message.
    #[arg(long, default_value_t = 5)]
    top: usize,
    /// Also dump the density on a grid with this spacing in degrees.
    #[arg(long)]
    grid_step: Option<f64>,
}

#[derive(clap::Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    /// Geotagged NDJSON messages.
    #[arg(long)]
    test: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0.5,0.9")]
    coverages: Vec<f64>,
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV report path; defaults to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct ExperimentArgs {
    #[arg(long)]
    config: PathBuf,
    /// Leave the runtime column empty (reproducible output).
    #[arg(long)]
    no_timing: bool,
    #[arg(long)]
    threads: Option<usize>,
    /// CSV report path; overrides `output` in the config, else stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepKind {
    Fields,
    Gap,
    TrainSize,
}

#[derive(clap::Args)]
struct SweepArgs {
    #[arg(long, value_enum)]
    kind: SweepKind,
    #[arg(long)]
    config: PathBuf,
    /// Values in days for gap and train-size sweeps.
    #[arg(long, value_delimiter = ',')]
    values: Vec<f64>,
    #[arg(long)]
    no_timing: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct SynthArgs {
    /// City file (TOML).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_messages: Option<usize>,
    /// Defaults to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Failure classes, mapped to exit codes.
enum Failure {
    Data(anyhow::Error),
    Numerical(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        let e = e.into();
        let numerical = e.chain().any(|c| {
            matches!(c.downcast_ref::<TrainError>(), Some(TrainError::Optimization(_)))
                || matches!(c.downcast_ref::<HarnessError>(), Some(HarnessError::Train(TrainError::Optimization(_))))
        });
        if numerical {
            Failure::Numerical(e)
        } else {
            Failure::Data(e)
        }
    }
}

type Result<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let outcome = match cli.command {
        Command::Train(a) => train_cmd(a),
        Command::Locate(a) => locate_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Experiment(a) => experiment_cmd(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::Synth(a) => synth_cmd(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Data(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Numerical(e)) => {
            eprintln!("numerical failure: {e:#}");
            ExitCode::from(3)
        }
    }
}

fn output(path: Option<&Path>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn parse_time(s: &str) -> anyhow::Result<DateTime<Utc>> {
    if let Ok(d) = NaiveDate::parse_from_str(s, "%Y-%m-%d") {
        return Ok(d.and_hms_opt(0, 0, 0).expect("midnight exists").and_utc());
    }
    Ok(DateTime::parse_from_rfc3339(s).map_err(|_| anyhow!("bad date {s:?}"))?.to_utc())
}

fn parse_algo(name: &str, alpha: f64) -> anyhow::Result<WeightingAlgo> {
    let id = if name == "err-sae" { format!("err-sae{alpha}") } else { name.to_owned() };
    id.parse().map_err(|e: String| anyhow!(e))
}

fn read_messages(path: &Path) -> anyhow::Result<Vec<geogmm::RawRecord>> {
    let (records, _) = geogmm::corpus::read_corpus_file(path, OnParseError::Abort)?;
    Ok(records)
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let algorithm = parse_algo(&a.algo, a.alpha)?;
    let policy = if a.skip_bad_lines { OnParseError::Skip } else { OnParseError::Abort };
    let corpus = Corpus::load(&a.corpus, policy)?;
    let span = corpus.span().ok_or_else(|| anyhow!("corpus is empty"))?;
    let start = match &a.from {
        Some(s) => parse_time(s)?,
        None => span.start,
    };
    let interval = TimeInterval { start, end: start + days(a.days) };
    let training = select_training(&corpus.records, &interval);
    let cfg = TrainConfig {
        algorithm,
        fields: a.fields,
        min_instances: a.min_instances,
        max_components: a.max_components,
        lambda: a.lambda,
        seed: a.seed,
        ..TrainConfig::new(algorithm)
    };
    let model = train_with(&training, &cfg, &Tokenizer::default(), Some(interval))?;
    model.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    eprintln!(
        "trained {} on {} messages: {} n-grams -> {}",
        algorithm,
        training.len(),
        model.entries.len(),
        a.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct NgramShare {
    ngram: String,
    share: f64,
}

#[derive(Serialize)]
struct LocateLine {
    id: String,
    lon: Option<f64>,
    lat: Option<f64>,
    ngrams: Vec<NgramShare>,
    #[serde(skip_serializing_if = "Option::is_none")]
    grid: Option<Vec<[f64; 3]>>,
}

fn locate_cmd(a: LocateArgs) -> Result<()> {
    let model = LocationModel::load(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let records = read_messages(&a.input)?;
    let mut out = output(a.out.as_deref())?;
    for r in &records {
        let line = match model.locate_record(r) {
            None => LocateLine { id: r.id.clone(), lon: None, lat: None, ngrams: Vec::new(), grid: None },
            Some(md) => {
                let mut shares = md.contributions.clone();
                shares.sort_by(|x, y| y.1.total_cmp(&x.1).then_with(|| x.0.cmp(&y.0)));
                shares.truncate(a.top);
                let grid = a.grid_step.filter(|s| *s > 0.0).map(|step| {
                    let mut g = Vec::new();
                    let mut lat = -90.0 + step / 2.0;
                    while lat < 90.0 {
                        let mut lon = -180.0 + step / 2.0;
                        while lon < 180.0 {
                            g.push([lon, lat, md.gmm.density(GeoPoint::wrapped(lon, lat))]);
                            lon += step;
                        }
                        lat += step;
                    }
                    g
                });
                LocateLine {
                    id: r.id.clone(),
                    lon: Some(md.point_estimate.lon),
                    lat: Some(md.point_estimate.lat),
                    ngrams: shares.into_iter().map(|(g, s)| NgramShare { ngram: g.to_string(), share: s }).collect(),
                    grid,
                }
            }
        };
        serde_json::to_writer(&mut out, &line).map_err(anyhow::Error::from)?;
        writeln!(out).map_err(anyhow::Error::from)?;
    }
    out.flush().map_err(anyhow::Error::from)?;
    Ok(())
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    if a.samples == 0 || a.coverages.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
        return Err(Failure::Data(anyhow!("samples must be >= 1 and coverages in (0, 1)")));
    }
    let model = LocationModel::load(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let records: Vec<_> = read_messages(&a.test)?.into_iter().filter(|r| r.origin.is_some()).collect();
    let located: Vec<_> =
        records.iter().map(|r| model.locate_record(r).map(|d| (d, r.origin.expect("filtered")))).collect();
    let no_estimate = located.iter().filter(|l| l.is_none()).count();
    let items: Vec<_> = located.into_iter().flatten().collect();
    let evals = evaluate_all(&items, a.samples, &a.coverages, seed::subseed(a.seed, "evaluate"));
    let row = ReportRow {
        window: a.test.display().to_string(),
        algorithm: model.config.algorithm.to_string(),
        report: aggregate(&evals, no_estimate, &a.coverages),
        runtime_s: None,
    };
    let mut out = output(a.out.as_deref())?;
    metrics::write_csv(&mut out, std::slice::from_ref(&row)).map_err(anyhow::Error::from)?;
    out.flush().map_err(anyhow::Error::from)?;
    if a.out.is_some() {
        print!("{}", metrics::format_table(&[row]));
    }
    Ok(())
}

fn experiment_cmd(a: ExperimentArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    if a.no_timing {
        cfg.record_timing = false;
    }
    if let Some(t) = a.threads {
        cfg.threads = t;
    }
    let report = harness::run_experiment_files(&cfg)?;
    let path = a.out.or(cfg.output.clone());
    let mut out = output(path.as_deref())?;
    report.write_csv(&mut out).map_err(anyhow::Error::from)?;
    out.flush().map_err(anyhow::Error::from)?;
    eprint!("{}", report.table());
    eprintln!("{} windows scheduled, {} skipped", report.scheduled, report.skipped.len());
    Ok(())
}

fn sweep_cmd(a: SweepArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    if a.no_timing {
        cfg.record_timing = false;
    }
    let corpus = cfg.load_corpus()?;
    let mut out = output(a.out.as_deref())?;
    match a.kind {
        SweepKind::Fields => {
            let s = harness::field_subset_sweep(&corpus, &cfg)?;
            s.write_csv(&mut out).map_err(anyhow::Error::from)?;
        }
        SweepKind::Gap => {
            let pts = harness::gap_sweep(&corpus, &cfg, &a.values)?;
            harness::write_sweep_csv(&mut out, "gap_days", &pts).map_err(anyhow::Error::from)?;
        }
        SweepKind::TrainSize => {
            let pts = harness::training_size_sweep(&corpus, &cfg, &a.values)?;
            harness::write_sweep_csv(&mut out, "training_days", &pts).map_err(anyhow::Error::from)?;
        }
    }
    out.flush().map_err(anyhow::Error::from)?;
    Ok(())
}

fn synth_cmd(a: SynthArgs) -> Result<()> {
    let mut cfg = SynthConfig::load(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.n_messages {
        cfg.n_messages = n;
    }
    let records = synthgen::generate(&cfg);
    let mut out = output(a.out.as_deref())?;
    synthgen::write(&mut out, &records).map_err(anyhow::Error::from)?;
    out.flush().map_err(anyhow::Error::from)?;
    Ok(())
}
