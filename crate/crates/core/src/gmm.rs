//! Two-dimensional gaussian mixtures over plate carrée (lon, lat) degrees:
//! EM fitting, density evaluation, sampling and information criteria.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::geo::GeoPoint;
use crate::seed;

/// Lower bound on covariance eigenvalues after every M-step, in deg².
pub const COV_FLOOR: f64 = 1e-6;

/// Symmetric 2×2 covariance matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cov2 {
    pub xx: f64,
    pub xy: f64,
    pub yy: f64,
}

impl Cov2 {
    pub fn isotropic(var: f64) -> Self {
        Cov2 { xx: var, xy: 0.0, yy: var }
    }

    pub fn det(&self) -> f64 {
        self.xx * self.yy - self.xy * self.xy
    }

    pub fn trace(&self) -> f64 {
        self.xx + self.yy
    }

    /// Smallest eigenvalue.
    pub fn min_eigenvalue(&self) -> f64 {
        let half_tr = self.trace() / 2.0;
        let disc = ((self.xx - self.yy) / 2.0).hypot(self.xy);
        half_tr - disc
    }

    /// Raises every eigenvalue below `floor` to `floor`, keeping the
    /// eigenvectors.
    pub fn clamp_eigenvalues(&self, floor: f64) -> Cov2 {
        let half_tr = self.trace() / 2.0;
        let disc = ((self.xx - self.yy) / 2.0).hypot(self.xy);
        let (hi, lo) = (half_tr + disc, half_tr - disc);
        if lo >= floor {
            return *self;
        }
        if self.xy == 0.0 {
            return Cov2 { xx: self.xx.max(floor), xy: 0.0, yy: self.yy.max(floor) };
        }
        let (vx, vy) = (hi - self.yy, self.xy);
        let norm = vx.hypot(vy);
        let (vx, vy) = (vx / norm, vy / norm);
        let (hi, lo) = (hi.max(floor), floor);
        Cov2 {
            xx: hi * vx * vx + lo * vy * vy,
            xy: (hi - lo) * vx * vy,
            yy: hi * vy * vy + lo * vx * vx,
        }
    }

    /// Entries in row-major order, off-diagonal repeated.
    pub fn entries(&self) -> [f64; 4] {
        [self.xx, self.xy, self.xy, self.yy]
    }

    /// Lower Cholesky factor `(l11, l21, l22)`.
    fn cholesky(&self) -> (f64, f64, f64) {
        let l11 = self.xx.max(0.0).sqrt();
        let l21 = if l11 > 0.0 { self.xy / l11 } else { 0.0 };
        let l22 = (self.yy - l21 * l21).max(0.0).sqrt();
        (l11, l21, l22)
    }
}

/// One weighted bivariate normal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussComponent {
    pub weight: f64,
    /// `[lon, lat]` in degrees.
    pub mean: [f64; 2],
    pub cov: Cov2,
}

impl GaussComponent {
    pub fn new(weight: f64, mean: [f64; 2], cov: Cov2) -> Self {
        GaussComponent { weight, mean, cov }
    }

    /// Log of the (unweighted) normal pdf at `y`.
    pub fn log_pdf(&self, y: [f64; 2]) -> f64 {
        let det = self.cov.det();
        let dx = y[0] - self.mean[0];
        let dy = y[1] - self.mean[1];
        let maha = (self.cov.yy * dx * dx - 2.0 * self.cov.xy * dx * dy + self.cov.xx * dy * dy) / det;
        -(2.0 * PI).ln() - 0.5 * det.ln() - 0.5 * maha
    }

    pub fn mean_point(&self) -> GeoPoint {
        GeoPoint::wrapped(self.mean[0], self.mean[1])
    }
}

/// A mixture of 2D gaussians with fit statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gmm2D {
    pub components: Vec<GaussComponent>,
    /// Number of points the mixture was fitted to (0 for composed mixtures).
    pub n_points: usize,
    /// Total log-likelihood of the fitted points at convergence.
    pub log_likelihood: f64,
}

pub fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl Gmm2D {
    /// Wraps components whose weights already sum to one.
    pub fn from_components(components: Vec<GaussComponent>) -> Self {
        Gmm2D { components, n_points: 0, log_likelihood: f64::NAN }
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    pub fn log_density_raw(&self, y: [f64; 2]) -> f64 {
        log_sum_exp(self.components.iter().map(|c| c.weight.ln() + c.log_pdf(y)))
    }

    /// Log of the mixture density at `y`, per deg².
    pub fn log_density(&self, y: GeoPoint) -> f64 {
        self.log_density_raw([y.lon, y.lat])
    }

    pub fn density(&self, y: GeoPoint) -> f64 {
        self.log_density(y).exp()
    }

    /// Index of the component with the largest weighted density at `y`;
    /// ties go to the lower index.
    pub fn most_probable_component(&self, y: [f64; 2]) -> usize {
        let mut best = 0;
        let mut best_v = f64::NEG_INFINITY;
        for (k, c) in self.components.iter().enumerate() {
            let v = c.weight.ln() + c.log_pdf(y);
            if v > best_v {
                best_v = v;
                best = k;
            }
        }
        best
    }

    /// Weighted average of the component means.
    pub fn point_estimate(&self) -> GeoPoint {
        let total: f64 = self.components.iter().map(|c| c.weight).sum();
        let (mut lon, mut lat) = (0.0, 0.0);
        for c in &self.components {
            lon += c.weight * c.mean[0];
            lat += c.weight * c.mean[1];
        }
        GeoPoint::wrapped(lon / total, lat / total)
    }

    /// Draws `n` points in raw plate carrée coordinates (may fall outside
    /// the valid lon/lat box near the edges of the map).
    pub fn sample_raw<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<[f64; 2]> {
        let chol: Vec<_> = self.components.iter().map(|c| c.cov.cholesky()).collect();
        let total: f64 = self.components.iter().map(|c| c.weight).sum();
        (0..n)
            .map(|_| {
                let u: f64 = rng.random::<f64>() * total;
                let mut acc = 0.0;
                let mut k = self.components.len() - 1;
                for (i, c) in self.components.iter().enumerate() {
                    acc += c.weight;
                    if u < acc {
                        k = i;
                        break;
                    }
                }
                let z1: f64 = rng.sample(StandardNormal);
                let z2: f64 = rng.sample(StandardNormal);
                let (l11, l21, l22) = chol[k];
                let m = self.components[k].mean;
                [m[0] + l11 * z1, m[1] + l21 * z1 + l22 * z2]
            })
            .collect()
    }

    /// Draws `n` points, wrapping longitude and clamping latitude.
    pub fn sample(&self, n: usize, seed: u64) -> Vec<GeoPoint> {
        let mut rng = seed::rng(seed);
        self.sample_raw(n, &mut rng).into_iter().map(|p| GeoPoint::wrapped(p[0], p[1])).collect()
    }

    /// Number of free parameters: r−1 weights, 2r means, 3r covariance entries.
    pub fn free_parameters(&self) -> usize {
        6 * self.components.len() - 1
    }

    /// `(AIC, BIC)` from the stored log-likelihood and point count.
    pub fn information_criteria(&self) -> (f64, f64) {
        let k = self.free_parameters() as f64;
        let aic = 2.0 * k - 2.0 * self.log_likelihood;
        let bic = k * (self.n_points.max(1) as f64).ln() - 2.0 * self.log_likelihood;
        (aic, bic)
    }
}

/// Logarithm base for the component-count rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogBase {
    #[default]
    Natural,
    Two,
    Ten,
}

/// `r = max(1, floor(min(cap, log(n) / 2)))`.
pub fn choose_components_with(n: usize, cap: usize, base: LogBase) -> usize {
    let n = n.max(1) as f64;
    let l = match base {
        LogBase::Natural => n.ln(),
        LogBase::Two => n.log2(),
        LogBase::Ten => n.log10(),
    };
    let r = (cap as f64).min(l / 2.0).floor();
    (r as usize).max(1)
}

pub fn choose_components(n: usize, cap: usize) -> usize {
    choose_components_with(n, cap, LogBase::Natural)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub max_iter: usize,
    /// Stop once the mean per-point log-likelihood improves by less than this.
    pub tol: f64,
    pub cov_floor: f64,
    /// Components lighter than this are dropped after fitting.
    pub prune_below: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig { max_iter: 200, tol: 1e-4, cov_floor: COV_FLOOR, prune_below: 1e-6 }
    }
}

/// A fitted mixture plus the log-likelihood after each E-step.
#[derive(Debug, Clone)]
pub struct EmFit {
    pub gmm: Gmm2D,
    pub trace: Vec<f64>,
    pub converged: bool,
}

fn sq_dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

fn data_covariance(points: &[[f64; 2]], floor: f64) -> Cov2 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p[0]).sum::<f64>() / n;
    let my = points.iter().map(|p| p[1]).sum::<f64>() / n;
    let mut c = Cov2 { xx: 0.0, xy: 0.0, yy: 0.0 };
    for p in points {
        let (dx, dy) = (p[0] - mx, p[1] - my);
        c.xx += dx * dx;
        c.xy += dx * dy;
        c.yy += dy * dy;
    }
    Cov2 { xx: c.xx / n, xy: c.xy / n, yy: c.yy / n }.clamp_eigenvalues(floor)
}

/// k-means++ seeding of `r` means from distinct data points.
fn kmeanspp<R: Rng>(points: &[[f64; 2]], r: usize, rng: &mut R) -> Vec<[f64; 2]> {
    let mut means = vec![points[rng.random_range(0..points.len())]];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(*p, means[0])).collect();
    while means.len() < r {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            break;
        }
        let u = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = points.len() - 1;
        for (i, d) in d2.iter().enumerate() {
            acc += d;
            if u < acc && *d > 0.0 {
                pick = i;
                break;
            }
        }
        let m = points[pick];
        means.push(m);
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(*p, m));
        }
    }
    means
}

fn nearest(p: [f64; 2], means: &[[f64; 2]]) -> usize {
    let mut best = 0;
    for (j, m) in means.iter().enumerate().skip(1) {
        if sq_dist(p, *m) < sq_dist(p, means[best]) {
            best = j;
        }
    }
    best
}

/// A few rounds of k-means refinement. Means that lose all points stay put.
fn lloyd(points: &[[f64; 2]], mut means: Vec<[f64; 2]>, rounds: usize) -> Vec<[f64; 2]> {
    let mut labels = vec![usize::MAX; points.len()];
    for _ in 0..rounds {
        let mut changed = false;
        for (l, p) in labels.iter_mut().zip(points) {
            let j = nearest(*p, &means);
            changed |= *l != j;
            *l = j;
        }
        if !changed {
            break;
        }
        let mut sums = vec![[0.0, 0.0, 0.0]; means.len()];
        for (l, p) in labels.iter().zip(points) {
            sums[*l][0] += p[0];
            sums[*l][1] += p[1];
            sums[*l][2] += 1.0;
        }
        for (m, s) in means.iter_mut().zip(&sums) {
            if s[2] > 0.0 {
                *m = [s[0] / s[2], s[1] / s[2]];
            }
        }
    }
    means
}

/// Starting components from a hard nearest-mean assignment. Clusters with
/// fewer than two points borrow the covariance of the whole sample.
fn hard_components(points: &[[f64; 2]], means: &[[f64; 2]], shared: Cov2, floor: f64) -> Vec<GaussComponent> {
    let n = points.len() as f64;
    let labels: Vec<usize> = points.iter().map(|p| nearest(*p, means)).collect();
    let mut out = Vec::with_capacity(means.len());
    for j in 0..means.len() {
        let members: Vec<[f64; 2]> = labels.iter().zip(points).filter(|(l, _)| **l == j).map(|(_, p)| *p).collect();
        if members.is_empty() {
            continue;
        }
        let cov = if members.len() >= 2 { data_covariance(&members, floor) } else { shared };
        let k = members.len() as f64;
        let mean = [members.iter().map(|p| p[0]).sum::<f64>() / k, members.iter().map(|p| p[1]).sum::<f64>() / k];
        out.push(GaussComponent::new(k / n, mean, cov));
    }
    out
}

fn count_distinct(points: &[[f64; 2]]) -> usize {
    let mut v: Vec<(u64, u64)> = points.iter().map(|p| (p[0].to_bits(), p[1].to_bits())).collect();
    v.sort_unstable();
    v.dedup();
    v.len()
}

/// Fits a mixture of at most `r` components by expectation maximization.
pub fn fit_em(points: &[GeoPoint], r: usize, seed: u64) -> Gmm2D {
    fit_em_with(points, r, seed, &EmConfig::default()).gmm
}

pub fn fit_em_with(points: &[GeoPoint], r: usize, seed: u64, cfg: &EmConfig) -> EmFit {
    let xs: Vec<[f64; 2]> = points.iter().map(|p| [p.lon, p.lat]).collect();
    fit_em_raw(&xs, r, seed, cfg)
}

pub fn fit_em_raw(xs: &[[f64; 2]], r: usize, seed: u64, cfg: &EmConfig) -> EmFit {
    assert!(!xs.is_empty(), "fit_em needs at least one point");
    let n = xs.len();
    let r = r.max(1).min(count_distinct(xs));
    let mut rng = seed::rng(seed);
    let shared = data_covariance(xs, cfg.cov_floor);
    let means = lloyd(xs, kmeanspp(xs, r, &mut rng), 20);
    let mut comps = hard_components(xs, &means, shared, cfg.cov_floor);

    let mut trace = Vec::new();
    let mut resp = vec![0.0; n * comps.len()];
    let mut converged = false;
    let mut ll = f64::NEG_INFINITY;
    for _ in 0..cfg.max_iter.max(1) {
        // E-step
        let k = comps.len();
        resp.resize(n * k, 0.0);
        let log_w: Vec<f64> = comps.iter().map(|c| c.weight.ln()).collect();
        let mut total = 0.0;
        for (i, x) in xs.iter().enumerate() {
            let row = &mut resp[i * k..(i + 1) * k];
            for (j, c) in comps.iter().enumerate() {
                row[j] = log_w[j] + c.log_pdf(*x);
            }
            let lse = log_sum_exp(row.iter().copied());
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
            total += lse;
        }
        let prev = ll;
        ll = total;
        trace.push(ll);
        if (ll - prev) / (n as f64) < cfg.tol {
            converged = true;
            break;
        }

        // M-step
        let mut next = Vec::with_capacity(k);
        for j in 0..k {
            let nk: f64 = (0..n).map(|i| resp[i * k + j]).sum();
            if nk <= 1e-12 * n as f64 {
                continue;
            }
            let mut m = [0.0; 2];
            for (i, x) in xs.iter().enumerate() {
                let w = resp[i * k + j];
                m[0] += w * x[0];
                m[1] += w * x[1];
            }
            m[0] /= nk;
            m[1] /= nk;
            let mut c = Cov2 { xx: 0.0, xy: 0.0, yy: 0.0 };
            for (i, x) in xs.iter().enumerate() {
                let w = resp[i * k + j];
                let (dx, dy) = (x[0] - m[0], x[1] - m[1]);
                c.xx += w * dx * dx;
                c.xy += w * dx * dy;
                c.yy += w * dy * dy;
            }
            let cov = Cov2 { xx: c.xx / nk, xy: c.xy / nk, yy: c.yy / nk }.clamp_eigenvalues(cfg.cov_floor);
            next.push(GaussComponent::new(nk / n as f64, m, cov));
        }
        if next.len() != k {
            resp = vec![0.0; n * next.len()];
        }
        let wsum: f64 = next.iter().map(|c| c.weight).sum();
        for c in &mut next {
            c.weight /= wsum;
        }
        comps = next;
    }

    let before = comps.len();
    comps.retain(|c| c.weight >= cfg.prune_below);
    if comps.is_empty() {
        unreachable!("at least one component carries weight >= 1/r");
    }
    let mut gmm = Gmm2D::from_components(comps);
    if gmm.components.len() != before {
        let wsum: f64 = gmm.components.iter().map(|c| c.weight).sum();
        for c in &mut gmm.components {
            c.weight /= wsum;
        }
    }
    gmm.n_points = n;
    gmm.log_likelihood = xs.iter().map(|x| gmm.log_density_raw(*x)).sum();
    EmFit { gmm, trace, converged }
}
