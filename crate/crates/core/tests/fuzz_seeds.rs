//! Replays the checked-in fuzz seeds through the same checks the fuzz
//! targets make, and parses the sample config files.

use std::fs;
use std::path::{Path, PathBuf};

use geogmm::corpus::parse_record;
use geogmm::harness::ExperimentConfig;
use geogmm::synthgen::SynthConfig;
use geogmm::tokenize::{normalize_option, FieldSet};
use geogmm::{LocationModel, WeightingAlgo};

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn seeds(target: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let dir = root().join("fuzz/corpus").join(target);
    let mut out: Vec<_> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            let b = fs::read(&p).unwrap();
            (p, b)
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

#[test]
fn record_seeds() {
    let mut ok = 0;
    for (p, b) in seeds("parse_record") {
        if let Ok(r) = parse_record(&b, 1) {
            assert_eq!(parse_record(r.to_json_line().as_bytes(), 1).unwrap(), r, "{}", p.display());
            ok += 1;
        }
    }
    assert!(ok >= 2);
}

#[test]
fn model_seeds_load_and_reencode() {
    for (p, b) in seeds("load_model") {
        let m = LocationModel::from_bytes(&b).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        assert_eq!(m.to_bytes(), b);
        let mut cut = b.clone();
        cut.truncate(b.len() / 2);
        assert!(LocationModel::from_bytes(&cut).is_err());
    }
}

#[test]
fn tokenize_seeds() {
    for (_, b) in seeds("tokenize") {
        let text = String::from_utf8(b).unwrap();
        assert!(normalize_option(&text).chars().all(char::is_alphanumeric));
    }
}

#[test]
fn config_seeds_parse() {
    for (p, b) in seeds("city_config") {
        SynthConfig::from_toml(std::str::from_utf8(&b).unwrap()).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    }
    for (p, b) in seeds("experiment_config") {
        ExperimentConfig::from_toml(std::str::from_utf8(&b).unwrap()).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    }
    SynthConfig::load(&root().join("configs/cities.toml")).unwrap();
    ExperimentConfig::load(&root().join("configs/experiment.toml")).unwrap();
}

#[test]
fn identifier_seeds_round_trip() {
    for (p, b) in seeds("identifiers") {
        let text = String::from_utf8(b).unwrap();
        let algo = text.parse::<WeightingAlgo>().ok();
        let fields = text.parse::<FieldSet>().ok();
        assert!(algo.is_some() || fields.is_some(), "{}", p.display());
        if let Some(a) = algo {
            assert_eq!(a.to_string().parse::<WeightingAlgo>().unwrap(), a);
        }
        if let Some(f) = fields {
            assert_eq!(f.to_string().parse::<FieldSet>().unwrap(), f);
        }
    }
}
