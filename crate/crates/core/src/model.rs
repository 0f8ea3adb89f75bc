//! The trained n-gram → mixture map, message location and model files.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{RawRecord, TimeInterval};
use crate::error::{LoadError, TrainError};
use crate::geo::GeoPoint;
use crate::gmm::{choose_components, fit_em, Cov2, GaussComponent, Gmm2D};
use crate::optim::LbfgsConfig;
use crate::seed;
use crate::tokenize::{Field, FieldSet, Message, NGram, Tokenizer};
use crate::weighting::{
    self, build_features, optimize_theta, quality_properties, training_errors, weight_inverse_error, weight_qpr,
    FeatureMode, QualityProperties, QualityProperty,
};

/// How per-n-gram mixture weights are assigned.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum WeightingAlgo {
    /// Every n-gram weighs 1.
    One,
    /// A single mixture over all training origins, returned for every message.
    AllTweets,
    /// Inverse mean training error raised to `alpha`.
    ErrSae { alpha: f64 },
    /// Inverse of a quality property (or max minus, for AIC/BIC).
    Qpr(QualityProperty),
    /// Logistic weights learned by minimizing training error.
    Opt(FeatureMode),
}

impl fmt::Display for WeightingAlgo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WeightingAlgo::One => f.write_str("one"),
            WeightingAlgo::AllTweets => f.write_str("all-tweets"),
            WeightingAlgo::ErrSae { alpha } => write!(f, "err-sae{alpha}"),
            WeightingAlgo::Qpr(p) => write!(f, "qpr-{p}"),
            WeightingAlgo::Opt(m) => write!(f, "opt-{}", m.name()),
        }
    }
}

impl FromStr for WeightingAlgo {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "one" => return Ok(WeightingAlgo::One),
            "all-tweets" => return Ok(WeightingAlgo::AllTweets),
            "opt-id" => return Ok(WeightingAlgo::Opt(FeatureMode::Id)),
            "opt-attr" => return Ok(WeightingAlgo::Opt(FeatureMode::Attr)),
            "opt-both" => return Ok(WeightingAlgo::Opt(FeatureMode::Both)),
            _ => {}
        }
        if let Some(a) = s.strip_prefix("err-sae") {
            let alpha: f64 = a.parse().map_err(|_| format!("bad exponent in {s:?}"))?;
            if !(alpha > 0.0 && alpha.is_finite()) {
                return Err(format!("exponent must be positive in {s:?}"));
            }
            return Ok(WeightingAlgo::ErrSae { alpha });
        }
        if let Some(p) = s.strip_prefix("qpr-") {
            return p.parse().map(WeightingAlgo::Qpr);
        }
        Err(format!("unknown weighting algorithm {s:?}"))
    }
}

impl TryFrom<String> for WeightingAlgo {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<WeightingAlgo> for String {
    fn from(a: WeightingAlgo) -> String {
        a.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub algorithm: WeightingAlgo,
    #[serde(default = "default_fields")]
    pub fields: FieldSet,
    #[serde(default = "default_min_instances")]
    pub min_instances: usize,
    /// Upper bound on mixture components; 1 gives single-gaussian models.
    #[serde(default = "default_max_components")]
    pub max_components: usize,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// km, added to mean errors before inverting.
    #[serde(default = "default_error_epsilon")]
    pub error_epsilon_km: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub lbfgs: LbfgsConfig,
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
    weighting::ERROR_EPSILON_KM
}

impl TrainConfig {
    pub fn new(algorithm: WeightingAlgo) -> Self {
        TrainConfig {
            algorithm,
            fields: default_fields(),
            min_instances: default_min_instances(),
            max_components: default_max_components(),
            lambda: default_lambda(),
            error_epsilon_km: default_error_epsilon(),
            seed: 0,
            lbfgs: LbfgsConfig::default(),
        }
    }
}

/// Everything the model keeps about one n-gram.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelEntry {
    pub gmm: Gmm2D,
    /// Unnormalized, ≥ 0.
    pub weight: f64,
    pub properties: QualityProperties,
    /// Mean training error of this n-gram's point estimate, km.
    pub mean_error: f64,
    /// Training messages containing the n-gram.
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSummary {
    pub iterations: usize,
    pub converged: bool,
    pub initial_objective: f64,
    pub final_objective: f64,
    pub grad_norm: f64,
    pub skipped_messages: usize,
    pub theta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub interval: Option<TimeInterval>,
    /// Hex SHA-256 over the serialized training records.
    pub corpus_sha256: String,
    pub n_training: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocationModel {
    pub config: TrainConfig,
    pub entries: BTreeMap<NGram, ModelEntry>,
    /// Present only for the all-tweets baseline.
    pub global: Option<Gmm2D>,
    pub provenance: Provenance,
    pub optimizer: Option<OptimizerSummary>,
}

/// The density estimate for one message.
#[derive(Debug, Clone, PartialEq)]
pub struct MessageDensity {
    pub gmm: Gmm2D,
    /// Known n-grams and their normalized weight shares.
    pub contributions: Vec<(NGram, f64)>,
    pub point_estimate: GeoPoint,
}

pub fn corpus_hash(records: &[RawRecord]) -> String {
    let mut h = Sha256::new();
    for r in records {
        h.update(r.to_json_line().as_bytes());
        h.update(b"\n");
    }
    hex(&h.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Trains with the default tokenizer.
pub fn train(records: &[RawRecord], cfg: &TrainConfig) -> Result<LocationModel, TrainError> {
    train_with(records, cfg, &Tokenizer::default(), None)
}

pub fn train_with(
    records: &[RawRecord],
    cfg: &TrainConfig,
    tokenizer: &Tokenizer<'_>,
    interval: Option<TimeInterval>,
) -> Result<LocationModel, TrainError> {
    if records.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    if cfg.fields.is_empty() {
        return Err(TrainError::NoFields);
    }
    if let Some(r) = records.iter().find(|r| r.origin.is_none()) {
        return Err(TrainError::MissingOrigin(r.id.clone()));
    }
    let provenance = Provenance { interval, corpus_sha256: corpus_hash(records), n_training: records.len() };
    let origins: Vec<GeoPoint> = records.iter().map(|r| r.origin.expect("checked above")).collect();

    if cfg.algorithm == WeightingAlgo::AllTweets {
        let r = choose_components(origins.len(), cfg.max_components);
        let g = fit_em(&origins, r, seed::subseed(cfg.seed, "all-tweets"));
        return Ok(LocationModel {
            config: cfg.clone(),
            entries: BTreeMap::new(),
            global: Some(g),
            provenance,
            optimizer: None,
        });
    }

    let messages: Vec<Message> = records.par_iter().map(|r| tokenizer.tokenize(r, cfg.fields)).collect();
    let mut postings: HashMap<&NGram, Vec<usize>> = HashMap::new();
    for (i, m) in messages.iter().enumerate() {
        for g in &m.ngrams {
            postings.entry(g).or_default().push(i);
        }
    }
    let mut kept: Vec<(&NGram, Vec<usize>)> =
        postings.into_iter().filter(|(_, v)| v.len() >= cfg.min_instances.max(1)).collect();
    if kept.is_empty() {
        return Err(TrainError::NoNgrams(cfg.min_instances));
    }
    kept.sort_by(|a, b| a.0.cmp(b.0));
    log::debug!("fitting {} n-gram mixtures", kept.len());

    let fitted: Vec<(Gmm2D, QualityProperties)> = kept
        .par_iter()
        .map(|(gram, idx)| {
            let pts: Vec<GeoPoint> = idx.iter().map(|&i| origins[i]).collect();
            let r = choose_components(pts.len(), cfg.max_components);
            let g = fit_em(&pts, r, seed::subseed(cfg.seed, &gram.to_string()));
            let q = quality_properties(&g, &pts);
            (g, q)
        })
        .collect();

    let index: HashMap<&NGram, usize> = kept.iter().enumerate().map(|(j, (g, _))| (*g, j)).collect();
    let estimates: Vec<GeoPoint> = fitted.iter().map(|(g, _)| g.point_estimate()).collect();
    let per_message: Vec<(Vec<usize>, GeoPoint)> = messages
        .iter()
        .zip(&origins)
        .map(|(m, o)| (m.ngrams.iter().filter_map(|g| index.get(g).copied()).collect(), *o))
        .collect();
    let table = training_errors(&estimates, &per_message);
    let props: Vec<QualityProperties> = fitted.iter().map(|(_, q)| *q).collect();

    let mut optimizer = None;
    let weights: Vec<f64> = match cfg.algorithm {
        WeightingAlgo::One => vec![1.0; kept.len()],
        WeightingAlgo::Qpr(p) => weight_qpr(&props, p),
        WeightingAlgo::ErrSae { alpha } => table
            .mean_error
            .iter()
            .map(|&e| weight_inverse_error(e, alpha, cfg.error_epsilon_km))
            .collect(),
        WeightingAlgo::Opt(mode) => {
            let features = build_features(&props, mode);
            let w = optimize_theta(&table, &features, cfg.lambda, &cfg.lbfgs)?;
            optimizer = Some(OptimizerSummary {
                iterations: w.result.iterations,
                converged: w.result.converged,
                initial_objective: w.result.trace[0],
                final_objective: w.result.value,
                grad_norm: w.result.grad_norm,
                skipped_messages: w.skipped_messages,
                theta: w.theta,
            });
            w.deltas
        }
        WeightingAlgo::AllTweets => unreachable!(),
    };

    let entries = kept
        .into_iter()
        .zip(fitted)
        .enumerate()
        .map(|(j, ((gram, _), (gmm, properties)))| {
            let entry = ModelEntry {
                gmm,
                weight: weights[j],
                properties,
                mean_error: table.mean_error[j],
                count: table.count[j],
            };
            (gram.clone(), entry)
        })
        .collect();
    Ok(LocationModel { config: cfg.clone(), entries, global: None, provenance, optimizer })
}

impl LocationModel {
    /// Tokenizes `r` with the model's fields and locates it.
    pub fn locate_record(&self, r: &RawRecord) -> Option<MessageDensity> {
        self.locate(&Tokenizer::default().tokenize(r, self.config.fields))
    }

    /// Mixes the densities of the message's known n-grams; `None` when it
    /// has none.
    pub fn locate(&self, msg: &Message) -> Option<MessageDensity> {
        if let Some(g) = &self.global {
            return Some(MessageDensity { gmm: g.clone(), contributions: Vec::new(), point_estimate: g.point_estimate() });
        }
        let known: Vec<(&NGram, &ModelEntry)> =
            msg.ngrams.iter().filter_map(|g| self.entries.get_key_value(g)).collect();
        if known.is_empty() {
            return None;
        }
        let raw: Vec<f64> = known.iter().map(|(_, e)| e.weight).collect();
        let shares = weighting::normalize(&raw);
        let mut comps = Vec::new();
        for ((_, e), share) in known.iter().zip(&shares) {
            for c in &e.gmm.components {
                comps.push(GaussComponent { weight: share * c.weight, ..*c });
            }
        }
        // shares can underflow a component's weight to zero
        comps.retain(|c| c.weight > 0.0);
        let gmm = Gmm2D::from_components(comps);
        let point_estimate = gmm.point_estimate();
        let contributions = known.into_iter().map(|(g, _)| g.clone()).zip(shares).collect();
        Some(MessageDensity { gmm, contributions, point_estimate })
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(&self.to_bytes())?;
        f.flush()
    }

    pub fn load(path: &Path) -> Result<Self, LoadError> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Hex SHA-256 of the serialized model.
    pub fn hash(&self) -> String {
        let b = self.to_bytes();
        hex(&b[b.len() - 32..])
    }
}

// Model file layout, little endian throughout:
//   magic (8) | version u32 | manifest length u64 | manifest JSON
//   | has_global u8 [gmm] | entry count u64 | entries | SHA-256 of all prior bytes (32)
// entry: field u8 | gram length u32 | gram UTF-8 | weight f64 | mean_error f64
//   | count u64 | 7 property f64 | gmm
// gmm: n_points u64 | log_likelihood f64 | k u32 | k × (weight, mx, my, sxx, sxy, syy) f64

pub const MAGIC: &[u8; 8] = b"GEOGMMv\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: TrainConfig,
    provenance: Provenance,
    optimizer: Option<OptimizerSummary>,
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_bits().to_le_bytes());
}

fn put_gmm(out: &mut Vec<u8>, g: &Gmm2D) {
    out.extend_from_slice(&(g.n_points as u64).to_le_bytes());
    put_f64(out, g.log_likelihood);
    out.extend_from_slice(&(g.components.len() as u32).to_le_bytes());
    for c in &g.components {
        for v in [c.weight, c.mean[0], c.mean[1], c.cov.xx, c.cov.xy, c.cov.yy] {
            put_f64(out, v);
        }
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], LoadError> {
        let end = self.pos.checked_add(n).ok_or(LoadError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(LoadError::Truncated)?;
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, LoadError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, LoadError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64, LoadError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64, LoadError> {
        Ok(f64::from_bits(self.u64()?))
    }
    fn len(&mut self, what: &str) -> Result<usize, LoadError> {
        let n = self.u64()?;
        if n > (self.buf.len() - self.pos) as u64 {
            return Err(LoadError::Malformed(format!("{what} count {n} exceeds file size")));
        }
        Ok(n as usize)
    }
    fn gmm(&mut self) -> Result<Gmm2D, LoadError> {
        let n_points = self.u64()? as usize;
        let log_likelihood = self.f64()?;
        let k = self.u32()? as usize;
        if k == 0 || k.saturating_mul(48) > self.buf.len() - self.pos {
            return Err(LoadError::Malformed(format!("bad component count {k}")));
        }
        let mut components = Vec::with_capacity(k);
        for _ in 0..k {
            let v: [f64; 6] = [self.f64()?, self.f64()?, self.f64()?, self.f64()?, self.f64()?, self.f64()?];
            if v.iter().any(|x| !x.is_finite()) || v[0] < 0.0 {
                return Err(LoadError::Malformed("non-finite component".into()));
            }
            components.push(GaussComponent::new(v[0], [v[1], v[2]], Cov2 { xx: v[3], xy: v[4], yy: v[5] }));
        }
        Ok(Gmm2D { components, n_points, log_likelihood })
    }
}

impl LocationModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let manifest = Manifest {
            config: self.config.clone(),
            provenance: self.provenance.clone(),
            optimizer: self.optimizer.clone(),
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        match &self.global {
            Some(g) => {
                out.push(1);
                put_gmm(&mut out, g);
            }
            None => out.push(0),
        }
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for (gram, e) in &self.entries {
            out.push(gram.field as u8);
            out.extend_from_slice(&(gram.gram.len() as u32).to_le_bytes());
            out.extend_from_slice(gram.gram.as_bytes());
            put_f64(&mut out, e.weight);
            put_f64(&mut out, e.mean_error);
            out.extend_from_slice(&(e.count as u64).to_le_bytes());
            let p = &e.properties;
            for v in [p.n_points, p.spatial_variance, p.n_components, p.covar_sum, p.covar_sum_prod, p.aic, p.bic] {
                put_f64(&mut out, v);
            }
            put_gmm(&mut out, &e.gmm);
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, LoadError> {
        if buf.len() < MAGIC.len() {
            return Err(if MAGIC.starts_with(buf) { LoadError::Truncated } else { LoadError::BadMagic });
        }
        if &buf[..8] != MAGIC {
            return Err(LoadError::BadMagic);
        }
        let version = u32::from_le_bytes(buf.get(8..12).ok_or(LoadError::Truncated)?.try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(LoadError::Version { found: version, supported: FORMAT_VERSION });
        }
        if buf.len() < 12 + 32 {
            return Err(LoadError::Truncated);
        }
        let (body, sum) = buf.split_at(buf.len() - 32);
        if Sha256::digest(body).as_slice() != sum {
            return Err(LoadError::Checksum);
        }
        let mut c = Cursor { buf: body, pos: 12 };
        let n = c.len("manifest")?;
        let manifest: Manifest =
            serde_json::from_slice(c.take(n)?).map_err(|e| LoadError::Malformed(format!("manifest: {e}")))?;
        let global = match c.u8()? {
            0 => None,
            1 => Some(c.gmm()?),
            b => return Err(LoadError::Malformed(format!("bad global flag {b}"))),
        };
        let n = c.len("entry")?;
        let mut entries = BTreeMap::new();
        for _ in 0..n {
            let field = Field::from_index(c.u8()?).ok_or_else(|| LoadError::Malformed("bad field tag".into()))?;
            let len = c.u32()? as usize;
            let gram = std::str::from_utf8(c.take(len)?)
                .map_err(|_| LoadError::Malformed("n-gram is not UTF-8".into()))?
                .to_owned();
            let weight = c.f64()?;
            let mean_error = c.f64()?;
            let count = c.u64()? as usize;
            let p: Vec<f64> = (0..7).map(|_| c.f64()).collect::<Result<_, _>>()?;
            let properties = QualityProperties {
                n_points: p[0],
                spatial_variance: p[1],
                n_components: p[2],
                covar_sum: p[3],
                covar_sum_prod: p[4],
                aic: p[5],
                bic: p[6],
            };
            let gmm = c.gmm()?;
            if !(weight >= 0.0 && weight.is_finite()) {
                return Err(LoadError::Malformed(format!("bad weight {weight}")));
            }
            let key = NGram::new(field, gram);
            if let Some((last, _)) = entries.last_key_value() {
                if &key <= last {
                    return Err(LoadError::Malformed("entries out of order".into()));
                }
            }
            entries.insert(key, ModelEntry { gmm, weight, properties, mean_error, count });
        }
        if c.pos != body.len() {
            return Err(LoadError::Malformed("trailing bytes".into()));
        }
        Ok(LocationModel {
            config: manifest.config,
            entries,
            global,
            provenance: manifest.provenance,
            optimizer: manifest.optimizer,
        })
    }
}
