//! Per-n-gram mixture weights.
//!
//! Three families: quality properties of the fitted mixture, inverse
//! training error raised to a power, and logistic weights whose parameters
//! are learned by minimizing the weight-averaged training error.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::OptimizeError;
use crate::geo::{geodesic_distance, GeoPoint};
use crate::gmm::Gmm2D;
use crate::optim::{self, LbfgsConfig, LbfgsResult};

/// Raw statistics describing how crisp or well-fitting an n-gram mixture is.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityProperties {
    pub n_points: f64,
    /// Trace of the sample covariance of the fitted points, deg².
    pub spatial_variance: f64,
    pub n_components: f64,
    /// Sum over components of the sum of all four covariance entries.
    pub covar_sum: f64,
    /// Sum over components of the product of all four covariance entries.
    pub covar_sum_prod: f64,
    pub aic: f64,
    pub bic: f64,
}

/// The fifteen weighting properties.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QualityProperty {
    Points,
    Variance,
    Components,
    CovarSum,
    CovarSumProd,
    VariancePerPoint,
    ComponentsPerPoint,
    CovarSumPerPoint,
    CovarSumProdPerPoint,
    PointsPerComponent,
    VariancePerComponent,
    CovarSumPerComponent,
    CovarSumProdPerComponent,
    Aic,
    Bic,
}

impl QualityProperty {
    pub const ALL: [QualityProperty; 15] = [
        QualityProperty::Points,
        QualityProperty::Variance,
        QualityProperty::Components,
        QualityProperty::CovarSum,
        QualityProperty::CovarSumProd,
        QualityProperty::VariancePerPoint,
        QualityProperty::ComponentsPerPoint,
        QualityProperty::CovarSumPerPoint,
        QualityProperty::CovarSumProdPerPoint,
        QualityProperty::PointsPerComponent,
        QualityProperty::VariancePerComponent,
        QualityProperty::CovarSumPerComponent,
        QualityProperty::CovarSumProdPerComponent,
        QualityProperty::Aic,
        QualityProperty::Bic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            QualityProperty::Points => "points",
            QualityProperty::Variance => "variance",
            QualityProperty::Components => "components",
            QualityProperty::CovarSum => "covar-sum",
            QualityProperty::CovarSumProd => "covar-sum-prod",
            QualityProperty::VariancePerPoint => "variance-per-point",
            QualityProperty::ComponentsPerPoint => "components-per-point",
            QualityProperty::CovarSumPerPoint => "covar-sum-per-point",
            QualityProperty::CovarSumProdPerPoint => "covar-sum-prod-per-point",
            QualityProperty::PointsPerComponent => "points-per-component",
            QualityProperty::VariancePerComponent => "variance-per-component",
            QualityProperty::CovarSumPerComponent => "covar-sum-per-component",
            QualityProperty::CovarSumProdPerComponent => "covar-sum-prod-per-component",
            QualityProperty::Aic => "aic",
            QualityProperty::Bic => "bic",
        }
    }

    /// Goodness-of-fit criteria become weights by subtraction from the
    /// maximum; everything else by inversion.
    pub fn is_criterion(self) -> bool {
        matches!(self, QualityProperty::Aic | QualityProperty::Bic)
    }
}

impl fmt::Display for QualityProperty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for QualityProperty {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        QualityProperty::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown quality property {s:?}"))
    }
}

impl QualityProperties {
    pub fn get(&self, p: QualityProperty) -> f64 {
        use QualityProperty::*;
        match p {
            Points => self.n_points,
            Variance => self.spatial_variance,
            Components => self.n_components,
            CovarSum => self.covar_sum,
            CovarSumProd => self.covar_sum_prod,
            VariancePerPoint => self.spatial_variance / self.n_points,
            ComponentsPerPoint => self.n_components / self.n_points,
            CovarSumPerPoint => self.covar_sum / self.n_points,
            CovarSumProdPerPoint => self.covar_sum_prod / self.n_points,
            PointsPerComponent => self.n_points / self.n_components,
            VariancePerComponent => self.spatial_variance / self.n_components,
            CovarSumPerComponent => self.covar_sum / self.n_components,
            CovarSumProdPerComponent => self.covar_sum_prod / self.n_components,
            Aic => self.aic,
            Bic => self.bic,
        }
    }

    pub fn values(&self) -> [f64; 15] {
        QualityProperty::ALL.map(|p| self.get(p))
    }
}

/// Computes the raw properties of `g`, fitted to `points`.
pub fn quality_properties(g: &Gmm2D, points: &[GeoPoint]) -> QualityProperties {
    let n = points.len();
    let spatial_variance = if n < 2 {
        0.0
    } else {
        let nf = n as f64;
        let mx = points.iter().map(|p| p.lon).sum::<f64>() / nf;
        let my = points.iter().map(|p| p.lat).sum::<f64>() / nf;
        let ss: f64 = points.iter().map(|p| (p.lon - mx).powi(2) + (p.lat - my).powi(2)).sum();
        ss / (nf - 1.0)
    };
    let covar_sum = g.components.iter().map(|c| c.cov.entries().iter().sum::<f64>()).sum();
    let covar_sum_prod = g.components.iter().map(|c| c.cov.entries().iter().product::<f64>()).sum();
    let (aic, bic) = g.information_criteria();
    QualityProperties {
        n_points: n.max(1) as f64,
        spatial_variance,
        n_components: g.n_components() as f64,
        covar_sum,
        covar_sum_prod,
        aic,
        bic,
    }
}

/// Added to inverted property magnitudes so zero values stay finite.
pub const QPR_EPSILON: f64 = 1e-12;

/// Raw weights for every model n-gram from one quality property.
pub fn weight_qpr(props: &[QualityProperties], scheme: QualityProperty) -> Vec<f64> {
    let vals: Vec<f64> = props.iter().map(|p| p.get(scheme)).collect();
    if scheme.is_criterion() {
        let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        vals.iter().map(|v| (max - v).max(0.0)).collect()
    } else {
        vals.iter().map(|v| 1.0 / (v.abs() + QPR_EPSILON)).collect()
    }
}

/// Added to mean errors before exponentiation, in km.
pub const ERROR_EPSILON_KM: f64 = 1.0;

/// `1 / (e + eps)^alpha`.
pub fn weight_inverse_error(mean_error_km: f64, alpha: f64, eps: f64) -> f64 {
    (mean_error_km + eps).powf(-alpha)
}

/// Scales `weights` to sum to one. All-zero input yields equal shares.
pub fn normalize(weights: &[f64]) -> Vec<f64> {
    let total: f64 = weights.iter().sum();
    if total > 0.0 && total.is_finite() {
        weights.iter().map(|w| w / total).collect()
    } else {
        vec![1.0 / weights.len() as f64; weights.len()]
    }
}

/// Training error of each n-gram's point estimate against every training
/// message containing it.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ErrorTable {
    /// Mean error `e_j` per n-gram, km.
    pub mean_error: Vec<f64>,
    /// Number of messages `N_j` per n-gram.
    pub count: Vec<usize>,
    /// Per message: `(n-gram index, e_ij)` for its model n-grams.
    pub messages: Vec<Vec<(usize, f64)>>,
}

/// `estimates[j]` is n-gram j's point estimate; each message lists the
/// n-gram indices it contains and its true origin.
pub fn training_errors(estimates: &[GeoPoint], messages: &[(Vec<usize>, GeoPoint)]) -> ErrorTable {
    let mut sum = vec![0.0; estimates.len()];
    let mut count = vec![0usize; estimates.len()];
    let mut rows = Vec::with_capacity(messages.len());
    for (grams, origin) in messages {
        let row: Vec<(usize, f64)> = grams
            .iter()
            .map(|&j| {
                let e = geodesic_distance(estimates[j], *origin);
                sum[j] += e;
                count[j] += 1;
                (j, e)
            })
            .collect();
        rows.push(row);
    }
    let mean_error = sum.iter().zip(&count).map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 }).collect();
    ErrorTable { mean_error, count, messages: rows }
}

/// Which features an n-gram carries during weight optimization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureMode {
    /// One indicator feature per n-gram.
    Id,
    /// The standardized quality properties.
    Attr,
    Both,
}

impl FeatureMode {
    pub fn name(self) -> &'static str {
        match self {
            FeatureMode::Id => "id",
            FeatureMode::Attr => "attr",
            FeatureMode::Both => "both",
        }
    }
}

/// Sparse feature rows, one per n-gram.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub dim: usize,
    pub rows: Vec<Vec<(usize, f64)>>,
}

/// Centers and scales each column to zero mean and unit (population)
/// variance. Constant columns become zero.
pub fn standardize(columns: &[[f64; 15]]) -> Vec<[f64; 15]> {
    let n = columns.len() as f64;
    let mut out = columns.to_vec();
    if columns.is_empty() {
        return out;
    }
    for k in 0..15 {
        let mean = columns.iter().map(|c| c[k]).sum::<f64>() / n;
        let var = columns.iter().map(|c| (c[k] - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        for row in out.iter_mut() {
            row[k] = if sd > 0.0 && sd.is_finite() { (row[k] - mean) / sd } else { 0.0 };
        }
    }
    out
}

pub fn build_features(props: &[QualityProperties], mode: FeatureMode) -> Features {
    let n = props.len();
    let attrs = match mode {
        FeatureMode::Id => Vec::new(),
        _ => standardize(&props.iter().map(QualityProperties::values).collect::<Vec<_>>()),
    };
    let (id_dim, attr_off) = match mode {
        FeatureMode::Id => (n, n),
        FeatureMode::Attr => (0, 0),
        FeatureMode::Both => (n, n),
    };
    let dim = match mode {
        FeatureMode::Id => n,
        FeatureMode::Attr => 15,
        FeatureMode::Both => n + 15,
    };
    let rows = (0..n)
        .map(|j| {
            let mut row = Vec::new();
            if id_dim > 0 {
                row.push((j, 1.0));
            }
            if let Some(a) = attrs.get(j) {
                row.extend(a.iter().enumerate().map(|(k, v)| (attr_off + k, *v)));
            }
            row
        })
        .collect();
    Features { dim, rows }
}

fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `1 / (1 + exp(-phi·theta))`; features beyond `theta` count as zero.
pub fn delta_logistic(phi: &[(usize, f64)], theta: &[f64]) -> f64 {
    let z: f64 = phi.iter().map(|&(k, v)| v * theta.get(k).copied().unwrap_or(0.0)).sum();
    logistic(z)
}

/// Weight-averaged training error plus an L2 penalty.
pub struct Objective<'a> {
    pub table: &'a ErrorTable,
    pub features: &'a Features,
    pub lambda: f64,
}

impl Objective<'_> {
    /// Messages with at least one featured n-gram.
    pub fn active_messages(&self) -> usize {
        self.table.messages.iter().filter(|m| !m.is_empty()).count()
    }

    fn deltas(&self, theta: &[f64]) -> Vec<f64> {
        self.features.rows.iter().map(|row| delta_logistic(row, theta)).collect()
    }

    pub fn value(&self, theta: &[f64]) -> f64 {
        let delta = self.deltas(theta);
        let mut total = 0.0;
        for msg in self.table.messages.iter().filter(|m| !m.is_empty()) {
            let (mut num, mut den) = (0.0, 0.0);
            for &(j, e) in msg {
                num += e * delta[j];
                den += delta[j];
            }
            total += num / den;
        }
        total + 0.5 * self.lambda * theta.iter().map(|t| t * t).sum::<f64>()
    }

    /// Value and gradient in one pass.
    pub fn value_and_gradient(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        let delta = self.deltas(theta);
        for (g, t) in grad.iter_mut().zip(theta) {
            *g = self.lambda * t;
        }
        let mut total = 0.0;
        for msg in self.table.messages.iter().filter(|m| !m.is_empty()) {
            let (mut num, mut den) = (0.0, 0.0);
            for &(j, e) in msg {
                num += e * delta[j];
                den += delta[j];
            }
            total += num / den;
            let den2 = den * den;
            for &(j, e) in msg {
                let d = delta[j];
                let coef = d * (1.0 - d) * (e * den - num) / den2;
                if coef == 0.0 {
                    continue;
                }
                for &(k, v) in &self.features.rows[j] {
                    grad[k] += v * coef;
                }
            }
        }
        total + 0.5 * self.lambda * theta.iter().map(|t| t * t).sum::<f64>()
    }

    pub fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; theta.len()];
        self.value_and_gradient(theta, &mut g);
        g
    }
}

/// Outcome of learning logistic weights.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizedWeights {
    pub theta: Vec<f64>,
    pub deltas: Vec<f64>,
    pub result: LbfgsResult,
    pub skipped_messages: usize,
}

/// Minimizes the objective from θ = 0 with L-BFGS.
pub fn optimize_theta(
    table: &ErrorTable,
    features: &Features,
    lambda: f64,
    cfg: &LbfgsConfig,
) -> Result<OptimizedWeights, OptimizeError> {
    let obj = Objective { table, features, lambda };
    let skipped = table.messages.len() - obj.active_messages();
    if skipped > 0 {
        log::info!("{skipped} training messages have no featured n-grams and are skipped");
    }
    let result = optim::minimize(|x, g| obj.value_and_gradient(x, g), vec![0.0; features.dim], cfg)?;
    let deltas = obj.deltas(&result.x);
    Ok(OptimizedWeights { theta: result.x.clone(), deltas, result, skipped_messages: skipped })
}
