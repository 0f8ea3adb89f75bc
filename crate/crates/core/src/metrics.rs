//! Accuracy, precision and calibration of density estimates.
//!
//! All sample-based metrics share one sample set per estimate. Samples are
//! drawn in raw plate carrée coordinates; densities are evaluated at the
//! raw point while distances and projected areas use the wrapped point.

use std::fmt::Write as _;
use std::io::{self, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geo::{convex_hull, geodesic_distance, mollweide_project, polygon_area, GeoPoint, Polygon};
use crate::gmm::Gmm2D;
use crate::model::MessageDensity;
use crate::seed;

pub const DEFAULT_SAMPLES: usize = 1000;
pub const DEFAULT_COVERAGES: [f64; 2] = [0.5, 0.9];

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub raw: Vec<[f64; 2]>,
    pub points: Vec<GeoPoint>,
    pub log_density: Vec<f64>,
}

pub fn draw_samples(g: &Gmm2D, n: usize, seed: u64) -> SampleSet {
    let mut rng = seed::rng(seed);
    let raw = g.sample_raw(n, &mut rng);
    let points = raw.iter().map(|p| GeoPoint::wrapped(p[0], p[1])).collect();
    let log_density = raw.iter().map(|p| g.log_density_raw(*p)).collect();
    SampleSet { raw, points, log_density }
}

/// Mean distance from `origin` to the samples.
pub fn cae_from(s: &SampleSet, origin: GeoPoint) -> f64 {
    s.points.iter().map(|p| geodesic_distance(*p, origin)).sum::<f64>() / s.points.len() as f64
}

pub fn cae(g: &Gmm2D, origin: GeoPoint, n: usize, seed: u64) -> f64 {
    cae_from(&draw_samples(g, n, seed), origin)
}

pub fn sae(md: &MessageDensity, origin: GeoPoint) -> f64 {
    geodesic_distance(md.point_estimate, origin)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRegion {
    /// One hull per component cluster, in Mollweide km.
    pub hulls: Vec<Polygon>,
    /// km²
    pub area: f64,
}

/// Hulls of the top `ceil(n·beta)` samples by density, clustered by most
/// probable component. Clusters under three points add no area.
pub fn prediction_region_from(g: &Gmm2D, s: &SampleSet, beta: f64) -> PredictionRegion {
    let n = s.raw.len();
    let take = ((n as f64 * beta).ceil() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| s.log_density[b].total_cmp(&s.log_density[a]).then(a.cmp(&b)));
    let mut clusters = vec![Vec::new(); g.n_components()];
    for &i in &order[..take] {
        clusters[g.most_probable_component(s.raw[i])].push(mollweide_project(s.points[i]));
    }
    let hulls: Vec<Polygon> = clusters.iter().filter(|c| c.len() >= 3).map(|c| convex_hull(c)).collect();
    let area = hulls.iter().map(polygon_area).sum();
    PredictionRegion { hulls, area }
}

pub fn prediction_region(g: &Gmm2D, beta: f64, n: usize, seed: u64) -> PredictionRegion {
    prediction_region_from(g, &draw_samples(g, n, seed), beta)
}

/// Fraction of samples less likely than `origin`.
pub fn region_rank_from(g: &Gmm2D, s: &SampleSet, origin: GeoPoint) -> f64 {
    let f = g.log_density(origin);
    s.log_density.iter().filter(|v| **v < f).count() as f64 / s.log_density.len() as f64
}

pub fn region_rank(g: &Gmm2D, origin: GeoPoint, n: usize, seed: u64) -> f64 {
    region_rank_from(g, &draw_samples(g, n, seed), origin)
}

/// Fraction of origins inside their estimate's `beta` prediction region,
/// i.e. with rank above `1 - beta`.
pub fn observed_coverage(ranks: &[f64], beta: f64) -> f64 {
    ranks.iter().filter(|r| **r > 1.0 - beta).count() as f64 / ranks.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateEvaluation {
    pub cae: f64,
    pub sae: f64,
    /// `(beta, km²)` per requested coverage.
    pub pra: Vec<(f64, f64)>,
    pub region_rank: f64,
    pub sample_size: usize,
}

pub fn evaluate(md: &MessageDensity, origin: GeoPoint, n: usize, coverages: &[f64], seed: u64) -> EstimateEvaluation {
    let s = draw_samples(&md.gmm, n, seed);
    EstimateEvaluation {
        cae: cae_from(&s, origin),
        sae: sae(md, origin),
        pra: coverages.iter().map(|&b| (b, prediction_region_from(&md.gmm, &s, b).area)).collect(),
        region_rank: region_rank_from(&md.gmm, &s, origin),
        sample_size: n,
    }
}

/// Evaluates many estimates in parallel, each with its own sub-seed.
pub fn evaluate_all(
    items: &[(MessageDensity, GeoPoint)],
    n: usize,
    coverages: &[f64],
    seed: u64,
) -> Vec<EstimateEvaluation> {
    items
        .par_iter()
        .enumerate()
        .map(|(i, (md, y))| evaluate(md, *y, n, coverages, seed::subseed_n(seed, i as u64)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub n_tests: usize,
    pub n_no_estimate: usize,
    pub success_rate: f64,
    pub mcae: f64,
    pub mcae_std: f64,
    pub msae: f64,
    pub msae_std: f64,
    pub median_cae: f64,
    pub median_sae: f64,
    pub mpra: Vec<(f64, f64)>,
    pub oc: Vec<(f64, f64)>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let k = s.len() / 2;
    if s.len() % 2 == 1 {
        s[k]
    } else {
        (s[k - 1] + s[k]) / 2.0
    }
}

/// Summarizes the located messages of one test set. `coverages` is used
/// when `evals` is empty.
pub fn aggregate(evals: &[EstimateEvaluation], no_estimate: usize, coverages: &[f64]) -> AggregateReport {
    let caes: Vec<f64> = evals.iter().map(|e| e.cae).collect();
    let saes: Vec<f64> = evals.iter().map(|e| e.sae).collect();
    let ranks: Vec<f64> = evals.iter().map(|e| e.region_rank).collect();
    let (mcae, mcae_std) = mean_std(&caes);
    let (msae, msae_std) = mean_std(&saes);
    let total = evals.len() + no_estimate;
    let betas: Vec<f64> = match evals.first() {
        Some(e) => e.pra.iter().map(|p| p.0).collect(),
        None => coverages.to_vec(),
    };
    let mpra = betas
        .iter()
        .enumerate()
        .map(|(k, &b)| (b, mean_std(&evals.iter().map(|e| e.pra[k].1).collect::<Vec<_>>()).0))
        .collect();
    let oc = betas
        .iter()
        .map(|&b| (b, if ranks.is_empty() { f64::NAN } else { observed_coverage(&ranks, b) }))
        .collect();
    AggregateReport {
        n_tests: evals.len(),
        n_no_estimate: no_estimate,
        success_rate: if total == 0 { f64::NAN } else { evals.len() as f64 / total as f64 },
        mcae,
        mcae_std,
        msae,
        msae_std,
        median_cae: median(&caes),
        median_sae: median(&saes),
        mpra,
        oc,
    }
}

impl AggregateReport {
    fn lookup(v: &[(f64, f64)], beta: f64) -> f64 {
        v.iter().find(|p| (p.0 - beta).abs() < 1e-12).map_or(f64::NAN, |p| p.1)
    }

    pub fn mpra_at(&self, beta: f64) -> f64 {
        Self::lookup(&self.mpra, beta)
    }

    pub fn oc_at(&self, beta: f64) -> f64 {
        Self::lookup(&self.oc, beta)
    }
}

/// One CSV/table line.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub window: String,
    pub algorithm: String,
    pub report: AggregateReport,
    /// `None` when timing is disabled.
    pub runtime_s: Option<f64>,
}

pub const CSV_HEADER: &str =
    "window,algorithm,mcae,mcae_std,msae,msae_std,mpra50,oc50,oc90,success_rate,n_tests,runtime_s";

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

pub fn write_csv<W: Write>(mut w: W, rows: &[ReportRow]) -> io::Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for row in rows {
        let r = &row.report;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            csv_field(&row.window),
            csv_field(&row.algorithm),
            r.mcae,
            r.mcae_std,
            r.msae,
            r.msae_std,
            r.mpra_at(0.5),
            r.oc_at(0.5),
            r.oc_at(0.9),
            r.success_rate,
            r.n_tests,
            row.runtime_s.map(|t| format!("{t:.3}")).unwrap_or_default(),
        )?;
    }
    Ok(())
}

/// Fixed-width table for terminals.
pub fn format_table(rows: &[ReportRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<10} {:<22} {:>16} {:>10} {:>10} {:>12} {:>6} {:>6} {:>8} {:>6} {:>8}",
        "window", "algorithm", "MCAE km", "medCAE", "MSAE", "MPRA50 km²", "OC50", "OC90", "success", "n", "time s"
    );
    for row in rows {
        let r = &row.report;
        let _ = writeln!(
            out,
            "{:<10} {:<22} {:>16} {:>10.0} {:>10.0} {:>12.0} {:>6.3} {:>6.3} {:>7.1}% {:>6} {:>8}",
            row.window,
            row.algorithm,
            format!("{:.0} ± {:.0}", r.mcae, r.mcae_std),
            r.median_cae,
            r.msae,
            r.mpra_at(0.5),
            r.oc_at(0.5),
            r.oc_at(0.9),
            100.0 * r.success_rate,
            r.n_tests,
            row.runtime_s.map(|t| format!("{t:.2}")).unwrap_or_else(|| "-".into()),
        );
    }
    out
}
