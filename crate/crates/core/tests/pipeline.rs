mod common;

use std::collections::HashSet;

use geogmm::corpus::{schedule_windows, Corpus, Schedule};
use geogmm::error::HarnessError;
use geogmm::geo::geodesic_distance;
use geogmm::harness::{
    field_subset_sweep, gap_sweep, run_experiment, training_size_sweep, write_sweep_csv, ExperimentConfig, SkipReason,
};
use geogmm::metrics::{median, sae, CSV_HEADER};
use geogmm::model::{train, LocationModel, TrainConfig, WeightingAlgo};
use geogmm::synthgen::{generate, SynthConfig};
use geogmm::tokenize::{Field, FieldSet};
use geogmm::GeoPoint;

use common::day;

fn small_corpus(days: f64, n: usize, seed: u64) -> Corpus {
    let mut cfg = SynthConfig::grid(4, 3, 0.3, n, seed);
    cfg.start = day(0);
    cfg.days = days;
    Corpus::from_records(generate(&cfg))
}

fn quick_config() -> ExperimentConfig {
    ExperimentConfig {
        schedule: Schedule {
            training_days: 1.0,
            test_days: 1.0,
            gap_days: 0.0,
            stride_days: 6.0,
            test_sample_size: 100,
            rng_seed: 3,
        },
        algorithms: vec!["err-sae4".parse().unwrap()],
        samples: 200,
        record_timing: false,
        ..ExperimentConfig::default()
    }
}

#[test]
fn twelve_day_corpus_runs_two_windows() {
    let corpus = small_corpus(12.0, 4000, 1);
    let cfg = ExperimentConfig { algorithms: vec!["err-sae4".parse().unwrap(), WeightingAlgo::AllTweets], ..quick_config() };
    let rep = run_experiment(&corpus, &cfg).unwrap();
    let span = corpus.span().unwrap();
    assert_eq!(rep.scheduled, schedule_windows(span.start, span.end, &cfg.schedule).len());
    assert_eq!(rep.scheduled, 2);
    assert!(rep.skipped.is_empty());
    assert_eq!(rep.rows.len(), 4);
    assert_eq!(rep.summaries.len(), 2);
    for algo in &cfg.algorithms {
        let per: Vec<f64> =
            rep.rows.iter().filter(|r| r.algorithm == algo.to_string()).map(|r| r.report.mcae).collect();
        let s = rep.summary(*algo).unwrap();
        assert!((s.mcae - per.iter().sum::<f64>() / per.len() as f64).abs() < 1e-9);
    }
    let mut csv = Vec::new();
    rep.write_csv(&mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert_eq!(text.lines().next().unwrap(), CSV_HEADER);
    assert_eq!(text.lines().count(), 1 + 4 + 2);
    assert!(rep.table().contains("summary"));
}

#[test]
fn empty_window_is_skipped_and_counted() {
    let mut cfg = SynthConfig::grid(3, 3, 0.3, 600, 2);
    cfg.start = day(0);
    cfg.days = 3.0;
    let mut records = generate(&cfg);
    cfg.start = day(12);
    cfg.seed = 3;
    records.extend(generate(&cfg).into_iter().map(|mut r| {
        r.id = format!("b{}", r.id);
        r.user_id = format!("b{}", r.user_id);
        r
    }));
    let corpus = Corpus::from_records(records);
    let rep = run_experiment(&corpus, &quick_config()).unwrap();
    assert_eq!(rep.scheduled, 3);
    assert_eq!(rep.skipped, vec![(1, SkipReason::NoTrainingData)]);
    assert_eq!(rep.rows.len(), rep.scheduled - rep.skipped.len());
}

#[test]
fn empty_corpus_is_an_error() {
    let corpus = Corpus::from_records(vec![]);
    assert!(matches!(run_experiment(&corpus, &quick_config()), Err(HarnessError::EmptyCorpus)));
    assert!(matches!(gap_sweep(&corpus, &quick_config(), &[0.0]), Err(HarnessError::EmptyCorpus)));
}

#[test]
fn report_csv_is_reproducible_without_timing() {
    let corpus = small_corpus(8.0, 2000, 4);
    let cfg = quick_config();
    let a = run_experiment(&corpus, &cfg).unwrap();
    let b = run_experiment(&corpus, &ExperimentConfig { threads: 2, ..cfg }).unwrap();
    let (mut x, mut y) = (Vec::new(), Vec::new());
    a.write_csv(&mut x).unwrap();
    b.write_csv(&mut y).unwrap();
    assert_eq!(x, y);
}

#[test]
fn field_sweep_covers_all_subsets() {
    let corpus = small_corpus(2.0, 1500, 5);
    let cfg = ExperimentConfig { samples: 100, ..quick_config() };
    let sweep = field_subset_sweep(&corpus, &cfg).unwrap();
    assert_eq!(sweep.rows.len(), 31);
    let distinct: HashSet<u8> = sweep.rows.iter().map(|r| r.fields.bits()).collect();
    assert_eq!(distinct.len(), 31);
    assert!(sweep.rows.windows(2).all(|w| w[0].mcae <= w[1].mcae || w[1].mcae.is_nan()));
    let ln = sweep.rows.iter().find(|r| r.fields == FieldSet::empty().with(Field::Ln)).unwrap();
    assert_eq!(ln.success_rate, 1.0);
    // description is always empty in this corpus
    let ds = sweep.rows.iter().find(|r| r.fields == FieldSet::empty().with(Field::Ds)).unwrap();
    assert!(ds.mcae.is_nan() || ds.success_rate == 0.0);
    assert_eq!(sweep.per_field.len(), 5);
    let mut csv = Vec::new();
    sweep.write_csv(&mut csv).unwrap();
    assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 1 + 31 + 1 + 1 + 5);
}

#[test]
fn gap_and_training_size_sweeps() {
    let corpus = small_corpus(14.0, 3000, 6);
    let cfg = quick_config();
    let gaps = gap_sweep(&corpus, &cfg, &[0.0, 2.0]).unwrap();
    assert_eq!(gaps.len(), 2);
    assert!(gaps.iter().all(|p| p.windows > 0 && p.success_rate > 0.9));
    let sizes = training_size_sweep(&corpus, &cfg, &[0.5, 2.0]).unwrap();
    assert_eq!(sizes.iter().map(|p| p.value).collect::<Vec<_>>(), vec![0.5, 2.0]);
    let mut csv = Vec::new();
    write_sweep_csv(&mut csv, "training_days", &sizes).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert!(text.starts_with("training_days,mcae"));
    assert_eq!(text.lines().count(), 3);
    assert!(gap_sweep(&corpus, &cfg, &[]).is_err());
}

#[test]
fn two_city_recovery() {
    let sigma = 0.5;
    let mut cfg = SynthConfig::grid(2, 4, sigma, 3000, 8);
    cfg.shared.clear();
    let records = generate(&cfg);
    let model = train(&records[..2500], &TrainConfig::new("err-sae4".parse().unwrap())).unwrap();
    let mut errs = Vec::new();
    for r in &records[2500..] {
        let md = model.locate_record(r).expect("every message has a language");
        errs.push(sae(&md, r.origin.unwrap()));
    }
    assert_eq!(errs.len(), 500);
    assert!(median(&errs) < 3.0 * sigma * 111.195, "median SAE {}", median(&errs));
}

#[test]
fn single_gmm_peak_lies_in_its_city() {
    let mut cfg = SynthConfig::grid(3, 2, 0.3, 2000, 9);
    cfg.shared.clear();
    let records = generate(&cfg);
    let model = train(&records, &TrainConfig::new(WeightingAlgo::One)).unwrap();
    for c in &cfg.cities {
        let token = &c.vocabulary[0].token;
        let entry = model.entries.iter().find(|(g, _)| g.field == Field::Tx && &g.gram == token).unwrap().1;
        let center = GeoPoint::new(c.lon, c.lat).unwrap();
        assert!(geodesic_distance(entry.gmm.point_estimate(), center) < 100.0, "{token}");
    }
}

#[test]
fn saved_model_locates_identically() {
    let mut cfg = SynthConfig::grid(4, 3, 0.4, 1200, 10);
    cfg.start = day(0);
    let records = generate(&cfg);
    let model = train(&records[..1100], &TrainConfig::new("opt-attr".parse().unwrap())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bin");
    model.save(&path).unwrap();
    let back = LocationModel::load(&path).unwrap();
    assert_eq!(back.hash(), model.hash());
    for r in &records[1100..] {
        let a = model.locate_record(r).map(|m| m.point_estimate);
        let b = back.locate_record(r).map(|m| m.point_estimate);
        assert_eq!(a, b);
    }
}
