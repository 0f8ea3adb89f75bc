#![allow(dead_code)]

use chrono::{DateTime, TimeZone, Utc};
use geogmm::corpus::RawRecord;
use geogmm::GeoPoint;

/// One-sample Kolmogorov-Smirnov test against U(0, 1). Returns `(D, p)`.
pub fn ks_uniform(values: &[f64]) -> (f64, f64) {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mut d: f64 = 0.0;
    for (i, x) in v.iter().enumerate() {
        let lo = i as f64 / n;
        let hi = (i + 1) as f64 / n;
        d = d.max((x - lo).abs()).max((hi - x).abs());
    }
    let lambda = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d;
    (d, kolmogorov_q(lambda))
}

/// Survival function of the Kolmogorov distribution.
pub fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        let term = (-2.0 * k * k * lambda * lambda).exp();
        sum += if k as i64 % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

pub fn day(d: i64) -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2012, 5, 1, 0, 0, 0).unwrap() + chrono::Duration::days(d)
}

pub fn record(id: &str, user: &str, t: DateTime<Utc>, origin: Option<(f64, f64)>, text: &str) -> RawRecord {
    RawRecord {
        id: id.into(),
        user_id: user.into(),
        timestamp: t,
        origin: origin.map(|(lon, lat)| GeoPoint::new(lon, lat).unwrap()),
        text: text.into(),
        user_description: String::new(),
        user_location: String::new(),
        user_lang: String::new(),
        user_timezone: String::new(),
    }
}
