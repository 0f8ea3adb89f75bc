//! Synthetic geotagged corpora with known generators.
//!
//! Each message picks a city by population weight, an origin from a
//! gaussian around its center, and tokens from the city vocabularies.

use std::io::Write;
use std::path::Path;

use chrono::{DateTime, Duration, Utc};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{sort_records, write_corpus, RawRecord};
use crate::error::ConfigError;
use crate::geo::GeoPoint;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabToken {
    pub token: String,
    /// Chance the token appears in a message of its own city.
    pub probability: f64,
    /// 1 keeps the token to its city; 0 spreads it evenly over all cities.
    #[serde(default = "one")]
    pub specificity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CityModel {
    pub name: String,
    pub lon: f64,
    pub lat: f64,
    /// Degrees.
    pub sigma: f64,
    pub weight: f64,
    #[serde(default)]
    pub vocabulary: Vec<VocabToken>,
    #[serde(default)]
    pub language: String,
    #[serde(default)]
    pub timezone: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SharedToken {
    pub token: String,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    #[serde(rename = "city")]
    pub cities: Vec<CityModel>,
    #[serde(default)]
    pub shared: Vec<SharedToken>,
    pub n_messages: usize,
    #[serde(default = "default_start")]
    pub start: DateTime<Utc>,
    /// Messages are spread uniformly over this many days.
    #[serde(default = "one")]
    pub days: f64,
    /// Chance the location field names the message's city.
    #[serde(default = "default_lo")]
    pub lo_probability: f64,
    /// Chance the description field names the message's city.
    #[serde(default)]
    pub ds_probability: f64,
    /// Chance the language or time zone is taken from a random city instead.
    #[serde(default)]
    pub field_noise: f64,
    #[serde(default = "one")]
    pub geotagged_fraction: f64,
    /// Users to draw from; 0 gives every message its own user.
    #[serde(default)]
    pub n_users: usize,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}
fn default_lo() -> f64 {
    0.5
}
fn default_start() -> DateTime<Utc> {
    DateTime::parse_from_rfc3339("2012-05-01T00:00:00Z").expect("valid literal").to_utc()
}

fn prob(name: &str, p: f64) -> Result<(), ConfigError> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(ConfigError::Invalid(format!("{name} must be in [0, 1], got {p}")))
    }
}

impl SynthConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: SynthConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.cities.is_empty() {
            return Err(ConfigError::Invalid("at least one city is required".into()));
        }
        let total: f64 = self.cities.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(ConfigError::Invalid(format!("city weights sum to {total}, expected 1")));
        }
        for c in &self.cities {
            GeoPoint::new(c.lon, c.lat).map_err(|e| ConfigError::Invalid(format!("city {}: {e}", c.name)))?;
            if !(c.sigma > 0.0 && c.sigma.is_finite()) {
                return Err(ConfigError::Invalid(format!("city {}: sigma must be > 0", c.name)));
            }
            if c.weight < 0.0 {
                return Err(ConfigError::Invalid(format!("city {}: negative weight", c.name)));
            }
            for v in &c.vocabulary {
                prob(&v.token, v.probability)?;
                prob(&v.token, v.specificity)?;
            }
        }
        for s in &self.shared {
            prob(&s.token, s.probability)?;
        }
        prob("lo_probability", self.lo_probability)?;
        prob("ds_probability", self.ds_probability)?;
        prob("field_noise", self.field_noise)?;
        prob("geotagged_fraction", self.geotagged_fraction)?;
        if !(self.days > 0.0 && self.days.is_finite()) {
            return Err(ConfigError::Invalid("days must be > 0".into()));
        }
        Ok(())
    }

    /// `n` cities on a coarse world grid, each with `vocab` private tokens
    /// and its own language and time zone.
    pub fn grid(n: usize, vocab: usize, sigma: f64, n_messages: usize, seed: u64) -> Self {
        let cities = (0..n)
            .map(|i| {
                let lon = -150.0 + 300.0 * ((i % 5) as f64 + 0.5) / 5.0;
                let lat = -45.0 + 90.0 * ((i / 5 % 3) as f64 + 0.5) / 3.0;
                CityModel {
                    name: format!("city{}", letters(i)),
                    lon,
                    lat,
                    sigma,
                    weight: 1.0 / n as f64,
                    vocabulary: (0..vocab)
                        .map(|k| VocabToken { token: format!("c{}w{}", letters(i), letters(k)), probability: 0.3, specificity: 1.0 })
                        .collect(),
                    language: format!("l{}", letters(i % 4)),
                    timezone: format!("zone {}", letters(i)),
                }
            })
            .collect();
        SynthConfig {
            cities,
            shared: ["the", "and", "lol", "today"]
                .iter()
                .map(|t| SharedToken { token: t.to_string(), probability: 0.4 })
                .collect(),
            n_messages,
            start: default_start(),
            days: 1.0,
            lo_probability: 0.5,
            ds_probability: 0.0,
            field_noise: 0.1,
            geotagged_fraction: 1.0,
            n_users: 0,
            seed,
        }
    }
}

/// Decimal digits spelled with `a..=j`, so generated tokens survive letter-only tokenization.
pub fn letters(i: usize) -> String {
    i.to_string().bytes().map(|d| (b'a' + d - b'0') as char).collect()
}

fn pick_city<R: Rng>(cities: &[CityModel], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, c) in cities.iter().enumerate() {
        acc += c.weight;
        if u < acc {
            return i;
        }
    }
    cities.len() - 1
}

/// Generates `cfg.n_messages` records sorted by timestamp.
pub fn generate(cfg: &SynthConfig) -> Vec<RawRecord> {
    let mut rng = seed::rng(seed::subseed(cfg.seed, "synthgen"));
    let n_cities = cfg.cities.len() as f64;
    let span_ms = (cfg.days * 86_400_000.0) as i64;
    let mut out = Vec::with_capacity(cfg.n_messages);
    for i in 0..cfg.n_messages {
        let ci = pick_city(&cfg.cities, &mut rng);
        let city = &cfg.cities[ci];
        let normal = Normal::new(0.0, city.sigma).expect("sigma validated");
        let origin = GeoPoint::wrapped(city.lon + normal.sample(&mut rng), city.lat + normal.sample(&mut rng));
        let geotagged = rng.random::<f64>() < cfg.geotagged_fraction;

        let mut words = Vec::new();
        for (cj, other) in cfg.cities.iter().enumerate() {
            for v in &other.vocabulary {
                let p = if cj == ci {
                    v.probability
                } else {
                    v.probability * (1.0 - v.specificity) * n_cities.recip()
                };
                if rng.random::<f64>() < p {
                    words.push(v.token.as_str());
                }
            }
        }
        for s in &cfg.shared {
            if rng.random::<f64>() < s.probability {
                words.push(s.token.as_str());
            }
        }
        // shuffle so bigrams vary
        for k in (1..words.len()).rev() {
            words.swap(k, rng.random_range(0..=k));
        }

        let noisy = |rng: &mut rand_chacha::ChaCha8Rng, own: usize| {
            if rng.random::<f64>() < cfg.field_noise {
                rng.random_range(0..cfg.cities.len())
            } else {
                own
            }
        };
        let ln_city = noisy(&mut rng, ci);
        let tz_city = noisy(&mut rng, ci);
        let user_location = if rng.random::<f64>() < cfg.lo_probability { city.name.clone() } else { String::new() };
        let user_description =
            if rng.random::<f64>() < cfg.ds_probability { format!("living in {}", city.name) } else { String::new() };
        let user_id = if cfg.n_users == 0 { format!("u{i}") } else { format!("u{}", rng.random_range(0..cfg.n_users)) };
        let offset = if span_ms > 0 { rng.random_range(0..span_ms) } else { 0 };
        out.push(RawRecord {
            id: String::new(),
            user_id,
            timestamp: cfg.start + Duration::milliseconds(offset),
            origin: geotagged.then_some(origin),
            text: words.join(" "),
            user_description,
            user_location,
            user_lang: cfg.cities[ln_city].language.clone(),
            user_timezone: cfg.cities[tz_city].timezone.clone(),
        });
    }
    sort_records(&mut out);
    for (i, r) in out.iter_mut().enumerate() {
        r.id = format!("s{i:08}");
    }
    out
}

pub fn write<W: Write>(w: W, records: &[RawRecord]) -> std::io::Result<()> {
    write_corpus(w, records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::parse_record;

    #[test]
    fn grid_config_is_valid() {
        SynthConfig::grid(10, 5, 0.3, 100, 0).validate().unwrap();
    }

    #[test]
    fn city_frequencies_match_weights() {
        let mut cfg = SynthConfig::grid(3, 2, 0.3, 6000, 4);
        let w = [0.5, 0.3, 0.2];
        for (c, w) in cfg.cities.iter_mut().zip(w) {
            c.weight = w;
        }
        cfg.lo_probability = 1.0;
        let recs = generate(&cfg);
        for (k, c) in cfg.cities.iter().enumerate() {
            let n = recs.iter().filter(|r| r.user_location == c.name).count() as f64;
            let p = w[k];
            let sd = (6000.0 * p * (1.0 - p)).sqrt();
            assert!((n - 6000.0 * p).abs() < 3.0 * sd, "{} {n}", c.name);
        }
    }

    #[test]
    fn round_trips_through_parser() {
        let recs = generate(&SynthConfig::grid(4, 3, 0.5, 200, 1));
        for (i, r) in recs.iter().enumerate() {
            assert_eq!(&parse_record(r.to_json_line().as_bytes(), i + 1).unwrap(), r);
        }
    }

    #[test]
    fn deterministic_and_unique_users() {
        let cfg = SynthConfig::grid(4, 3, 0.5, 300, 9);
        let a = generate(&cfg);
        assert_eq!(a, generate(&cfg));
        let users: std::collections::HashSet<_> = a.iter().map(|r| &r.user_id).collect();
        assert_eq!(users.len(), a.len());
        assert!(a.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
    }

    #[test]
    fn specific_tokens_stay_home() {
        let mut cfg = SynthConfig::grid(1, 3, 0.2, 100, 2);
        cfg.shared.clear();
        let recs = generate(&cfg);
        for r in &recs {
            let o = r.origin.unwrap();
            assert!(crate::geo::geodesic_distance(o, GeoPoint::new(cfg.cities[0].lon, cfg.cities[0].lat).unwrap()) < 200.0);
        }
        let mut cfg = SynthConfig::grid(2, 3, 0.2, 400, 2);
        cfg.shared.clear();
        for r in generate(&cfg) {
            let o = r.origin.unwrap();
            let d = |c: &CityModel| crate::geo::geodesic_distance(o, GeoPoint::new(c.lon, c.lat).unwrap());
            let home = if d(&cfg.cities[0]) < d(&cfg.cities[1]) { "caw" } else { "cbw" };
            assert!(r.text.split(' ').filter(|w| !w.is_empty()).all(|w| w.starts_with(home)), "{:?}", r.text);
        }
    }

    #[test]
    fn config_file_parses() {
        let text = r#"
            n_messages = 10
            seed = 3
            [[shared]]
            token = "the"
            probability = 0.5
            [[city]]
            name = "paris"
            lon = 2.35
            lat = 48.85
            sigma = 0.3
            weight = 1.0
            language = "fr"
            timezone = "Paris"
            vocabulary = [{ token = "eiffel", probability = 0.4 }]
        "#;
        let cfg = SynthConfig::from_toml(text).unwrap();
        assert_eq!(cfg.cities[0].vocabulary[0].specificity, 1.0);
        assert_eq!(generate(&cfg).len(), 10);
        assert!(SynthConfig::from_toml("n_messages = 1").is_err());
        assert!(SynthConfig::from_toml(&text.replace("weight = 1.0", "weight = 0.5")).is_err());
    }
}
