//! Message records, newline-delimited JSON corpus I/O, and the train/test
//! window schedule.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Duration, NaiveTime, SecondsFormat, Utc};
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{ConfigError, CorpusError, ParseError, ParseErrorKind};
use crate::geo::GeoPoint;
use crate::seed;

/// One message as read from a corpus file.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecord {
    pub id: String,
    pub user_id: String,
    pub timestamp: DateTime<Utc>,
    /// The geotag, if any.
    pub origin: Option<GeoPoint>,
    pub text: String,
    pub user_description: String,
    pub user_location: String,
    pub user_lang: String,
    pub user_timezone: String,
}

#[derive(Deserialize)]
struct WireIn {
    id: String,
    user: String,
    ts: String,
    lon: Option<f64>,
    lat: Option<f64>,
    tx: Option<String>,
    ds: Option<String>,
    lo: Option<String>,
    ln: Option<String>,
    tz: Option<String>,
}

#[derive(Serialize)]
struct WireOut<'a> {
    id: &'a str,
    user: &'a str,
    ts: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    lon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    lat: Option<f64>,
    tx: &'a str,
    ds: &'a str,
    lo: &'a str,
    ln: &'a str,
    tz: &'a str,
}

/// Parses one corpus line. `line_no` is carried into any error.
pub fn parse_record(line: &[u8], line_no: usize) -> Result<RawRecord, ParseError> {
    parse_inner(line).map_err(|kind| ParseError { line: line_no, kind })
}

fn parse_inner(line: &[u8]) -> Result<RawRecord, ParseErrorKind> {
    let w: WireIn = serde_json::from_slice(line)?;
    if w.id.is_empty() {
        return Err(ParseErrorKind::EmptyId);
    }
    let timestamp = DateTime::parse_from_rfc3339(&w.ts)
        .map_err(|_| ParseErrorKind::Timestamp(w.ts.clone()))?
        .with_timezone(&Utc);
    let origin = match (w.lon, w.lat) {
        (Some(lon), Some(lat)) => Some(GeoPoint::new(lon, lat)?),
        (None, None) => None,
        _ => return Err(ParseErrorKind::HalfCoordinate),
    };
    Ok(RawRecord {
        id: w.id,
        user_id: w.user,
        timestamp,
        origin,
        text: w.tx.unwrap_or_default(),
        user_description: w.ds.unwrap_or_default(),
        user_location: w.lo.unwrap_or_default(),
        user_lang: w.ln.unwrap_or_default(),
        user_timezone: w.tz.unwrap_or_default(),
    })
}

impl RawRecord {
    /// Serializes as one corpus line (no trailing newline).
    pub fn to_json_line(&self) -> String {
        let out = WireOut {
            id: &self.id,
            user: &self.user_id,
            ts: self.timestamp.to_rfc3339_opts(SecondsFormat::AutoSi, true),
            lon: self.origin.map(|p| p.lon),
            lat: self.origin.map(|p| p.lat),
            tx: &self.text,
            ds: &self.user_description,
            lo: &self.user_location,
            ln: &self.user_lang,
            tz: &self.user_timezone,
        };
        serde_json::to_string(&out).expect("record serialization cannot fail")
    }

    pub fn is_geotagged(&self) -> bool {
        self.origin.is_some()
    }
}

/// What to do with a line that fails to parse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OnParseError {
    #[default]
    Skip,
    Abort,
}

/// Streaming reader over a corpus file. Blank lines are ignored.
pub struct CorpusReader<R> {
    inner: R,
    line_no: usize,
    buf: Vec<u8>,
}

impl<R: BufRead> CorpusReader<R> {
    pub fn new(inner: R) -> Self {
        CorpusReader { inner, line_no: 0, buf: Vec::new() }
    }
}

impl<R: BufRead> Iterator for CorpusReader<R> {
    type Item = std::io::Result<Result<RawRecord, ParseError>>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            self.buf.clear();
            match self.inner.read_until(b'\n', &mut self.buf) {
                Ok(0) => return None,
                Ok(_) => {
                    self.line_no += 1;
                    let line = trim_ascii(&self.buf);
                    if line.is_empty() {
                        continue;
                    }
                    return Some(Ok(parse_record(line, self.line_no)));
                }
                Err(e) => return Some(Err(e)),
            }
        }
    }
}

fn trim_ascii(b: &[u8]) -> &[u8] {
    let start = b.iter().position(|c| !c.is_ascii_whitespace()).unwrap_or(b.len());
    let end = b.iter().rposition(|c| !c.is_ascii_whitespace()).map_or(start, |e| e + 1);
    &b[start..end]
}

/// Reads every record in `path`. Returns the records and the number of
/// lines skipped under [`OnParseError::Skip`].
pub fn read_corpus_file(path: &Path, policy: OnParseError) -> Result<(Vec<RawRecord>, usize), CorpusError> {
    let io_err = |source| CorpusError::Io { path: path.to_owned(), source };
    let file = File::open(path).map_err(io_err)?;
    let mut records = Vec::new();
    let mut skipped = 0;
    for item in CorpusReader::new(BufReader::new(file)) {
        match item.map_err(io_err)? {
            Ok(r) => records.push(r),
            Err(e) => match policy {
                OnParseError::Skip => {
                    log::warn!("{}: skipping {e}", path.display());
                    skipped += 1;
                }
                OnParseError::Abort => return Err(CorpusError::Parse { path: path.to_owned(), source: e }),
            },
        }
    }
    Ok((records, skipped))
}

/// Expands glob patterns into a sorted, de-duplicated file list.
pub fn expand_patterns<S: AsRef<str>>(patterns: &[S]) -> Result<Vec<PathBuf>, CorpusError> {
    let mut out = Vec::new();
    for pat in patterns {
        let pat = pat.as_ref();
        let paths = glob::glob(pat).map_err(|_| CorpusError::Pattern(pat.to_owned()))?;
        let mut found = 0;
        for p in paths.flatten() {
            if p.is_file() {
                out.push(p);
                found += 1;
            }
        }
        if found == 0 {
            return Err(CorpusError::NoFiles(pat.to_owned()));
        }
    }
    out.sort();
    out.dedup();
    Ok(out)
}

/// A loaded corpus, sorted by `(timestamp, id)`.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub records: Vec<RawRecord>,
    pub skipped_lines: usize,
}

impl Corpus {
    pub fn from_records(mut records: Vec<RawRecord>) -> Self {
        sort_records(&mut records);
        Corpus { records, skipped_lines: 0 }
    }

    pub fn load<S: AsRef<str>>(patterns: &[S], policy: OnParseError) -> Result<Self, CorpusError> {
        let mut records = Vec::new();
        let mut skipped_lines = 0;
        for path in expand_patterns(patterns)? {
            let (mut r, s) = read_corpus_file(&path, policy)?;
            records.append(&mut r);
            skipped_lines += s;
        }
        sort_records(&mut records);
        Ok(Corpus { records, skipped_lines })
    }

    /// Day-aligned `[start, end)` covering every record.
    pub fn span(&self) -> Option<TimeInterval> {
        let first = self.records.first()?.timestamp;
        let last = self.records.last()?.timestamp;
        let start = floor_day(first);
        let end = floor_day(last) + Duration::days(1);
        Some(TimeInterval { start, end })
    }
}

fn floor_day(t: DateTime<Utc>) -> DateTime<Utc> {
    t.date_naive().and_time(NaiveTime::MIN).and_utc()
}

pub fn sort_records(records: &mut [RawRecord]) {
    records.sort_by(|a, b| a.timestamp.cmp(&b.timestamp).then_with(|| a.id.cmp(&b.id)));
}

pub fn write_corpus<W: Write>(mut w: W, records: &[RawRecord]) -> std::io::Result<()> {
    for r in records {
        writeln!(w, "{}", r.to_json_line())?;
    }
    Ok(())
}

/// Half-open time interval `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeInterval {
    pub start: DateTime<Utc>,
    pub end: DateTime<Utc>,
}

impl TimeInterval {
    pub fn contains(&self, t: DateTime<Utc>) -> bool {
        self.start <= t && t < self.end
    }
}

/// Converts fractional days to a duration at millisecond resolution.
pub fn days(d: f64) -> Duration {
    Duration::milliseconds((d * 86_400_000.0).round() as i64)
}

/// Train/test scheduling parameters, all durations in days.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    #[serde(default = "one")]
    pub training_days: f64,
    #[serde(default = "one")]
    pub test_days: f64,
    #[serde(default)]
    pub gap_days: f64,
    #[serde(default = "six")]
    pub stride_days: f64,
    #[serde(default = "two_thousand")]
    pub test_sample_size: usize,
    #[serde(default)]
    pub rng_seed: u64,
}

fn one() -> f64 {
    1.0
}
fn six() -> f64 {
    6.0
}
fn two_thousand() -> usize {
    2000
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            training_days: 1.0,
            test_days: 1.0,
            gap_days: 0.0,
            stride_days: 6.0,
            test_sample_size: 2000,
            rng_seed: 0,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let durations = [
            ("training_days", self.training_days),
            ("test_days", self.test_days),
            ("gap_days", self.gap_days),
        ];
        for (name, v) in durations {
            if !v.is_finite() || v < 0.0 {
                return Err(ConfigError::Invalid(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !self.stride_days.is_finite() || self.stride_days < 1.0 {
            return Err(ConfigError::Invalid(format!("stride_days must be >= 1, got {}", self.stride_days)));
        }
        if self.test_sample_size == 0 {
            return Err(ConfigError::Invalid("test_sample_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub index: usize,
    pub train: TimeInterval,
    pub test: TimeInterval,
}

/// Lays out train/test windows from `corpus_start`, advancing by the stride,
/// keeping only windows whose test interval ends by `corpus_end`.
pub fn schedule_windows(corpus_start: DateTime<Utc>, corpus_end: DateTime<Utc>, s: &Schedule) -> Vec<Window> {
    let mut out = Vec::new();
    if corpus_end <= corpus_start || s.stride_days <= 0.0 {
        return out;
    }
    let (train, gap, test) = (days(s.training_days), days(s.gap_days), days(s.test_days));
    for i in 0.. {
        let start = corpus_start + days(s.stride_days * i as f64);
        let train_end = start + train;
        let test_start = train_end + gap;
        let test_end = test_start + test;
        if test_end > corpus_end {
            break;
        }
        out.push(Window {
            index: i,
            train: TimeInterval { start, end: train_end },
            test: TimeInterval { start: test_start, end: test_end },
        });
    }
    out
}

fn sorted_in_interval<'a, I>(records: I, interval: &TimeInterval) -> Vec<RawRecord>
where
    I: IntoIterator<Item = &'a RawRecord>,
{
    let mut v: Vec<RawRecord> = records
        .into_iter()
        .filter(|r| r.is_geotagged() && interval.contains(r.timestamp))
        .cloned()
        .collect();
    sort_records(&mut v);
    v
}

/// Geotagged records in `interval`, keeping only each user's first message.
pub fn select_training<'a, I>(records: I, interval: &TimeInterval) -> Vec<RawRecord>
where
    I: IntoIterator<Item = &'a RawRecord>,
{
    let mut seen = HashSet::new();
    sorted_in_interval(records, interval)
        .into_iter()
        .filter(|r| seen.insert(r.user_id.clone()))
        .collect()
}

/// Seeded uniform sample of at most `n` geotagged records in `interval`
/// from users absent in `training_users`, returned in `(timestamp, id)` order.
pub fn select_test<'a, I>(
    records: I,
    interval: &TimeInterval,
    training_users: &HashSet<String>,
    n: usize,
    seed: u64,
) -> Vec<RawRecord>
where
    I: IntoIterator<Item = &'a RawRecord>,
{
    let pool: Vec<RawRecord> = sorted_in_interval(records, interval)
        .into_iter()
        .filter(|r| !training_users.contains(&r.user_id))
        .collect();
    if pool.len() <= n {
        return pool;
    }
    let mut rng = seed::rng(seed);
    let mut picked = index::sample(&mut rng, pool.len(), n).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| pool[i].clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;
    use proptest::prelude::*;

    fn t(day: i64, sec: i64) -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2012, 5, 1, 0, 0, 0).unwrap() + Duration::days(day) + Duration::seconds(sec)
    }

    fn rec(id: &str, user: &str, ts: DateTime<Utc>, geo: bool) -> RawRecord {
        RawRecord {
            id: id.into(),
            user_id: user.into(),
            timestamp: ts,
            origin: geo.then(|| GeoPoint::new(1.0, 2.0).unwrap()),
            text: String::new(),
            user_description: String::new(),
            user_location: String::new(),
            user_lang: String::new(),
            user_timezone: String::new(),
        }
    }

    #[test]
    fn parse_full_record() {
        let line = br#"{"id":"1","user":"u1","ts":"2012-05-01T00:00:00Z","lon":0,"lat":0,"tx":"hi","ds":"","lo":"","ln":"en","tz":""}"#;
        let r = parse_record(line, 1).unwrap();
        assert_eq!(r.id, "1");
        assert_eq!(r.user_id, "u1");
        assert_eq!(r.origin, Some(GeoPoint { lon: 0.0, lat: 0.0 }));
        assert_eq!(r.text, "hi");
        assert_eq!(r.user_lang, "en");
        assert_eq!(r.timestamp, t(0, 0));
    }

    #[test]
    fn parse_without_geotag_and_defaults() {
        let line = br#"{"id":"2","user":"u1","ts":"2012-05-01T00:00:00Z","extra":[1,2]}"#;
        let r = parse_record(line, 1).unwrap();
        assert_eq!(r.origin, None);
        assert_eq!(r.text, "");
        assert_eq!(r.user_timezone, "");
    }

    #[test]
    fn parse_errors_carry_line() {
        let e = parse_record(br#"{"id":"3","user":"u","ts":"2012-05-01T00:00:00Z","lon":0,"lat":95}"#, 7).unwrap_err();
        assert_eq!(e.line, 7);
        assert!(matches!(e.kind, ParseErrorKind::Coordinate(_)));
        let e = parse_record(b"{not json", 3).unwrap_err();
        assert!(matches!(e.kind, ParseErrorKind::Json(_)));
        let e = parse_record(br#"{"id":"","user":"u","ts":"2012-05-01T00:00:00Z"}"#, 1).unwrap_err();
        assert!(matches!(e.kind, ParseErrorKind::EmptyId));
        let e = parse_record(br#"{"id":"a","user":"u","ts":"yesterday"}"#, 1).unwrap_err();
        assert!(matches!(e.kind, ParseErrorKind::Timestamp(_)));
        let e = parse_record(br#"{"id":"a","user":"u","ts":"2012-05-01T00:00:00Z","lon":3}"#, 1).unwrap_err();
        assert!(matches!(e.kind, ParseErrorKind::HalfCoordinate));
    }

    #[test]
    fn reader_skips_blank_lines_and_counts() {
        let data = "\n{\"id\":\"1\",\"user\":\"u\",\"ts\":\"2012-05-01T00:00:00Z\"}\n\n{bad\n";
        let items: Vec<_> = CorpusReader::new(data.as_bytes()).map(|r| r.unwrap()).collect();
        assert_eq!(items.len(), 2);
        assert!(items[0].is_ok());
        assert_eq!(items[1].as_ref().unwrap_err().line, 4);
    }

    #[test]
    fn schedule_examples() {
        let s = Schedule { training_days: 1.0, gap_days: 0.0, stride_days: 6.0, ..Schedule::default() };
        assert_eq!(schedule_windows(t(0, 0), t(366, 0), &s).len(), 61);
        let w = schedule_windows(t(0, 0), t(12, 0), &s);
        assert_eq!(w.len(), 2);
        assert_eq!(w[0].train.start, t(0, 0));
        assert_eq!(w[1].train.start, t(6, 0));
        let g = Schedule { gap_days: 30.0, ..s.clone() };
        assert!(schedule_windows(t(0, 0), t(2, 0), &g).is_empty());
        assert!(schedule_windows(t(2, 0), t(1, 0), &s).is_empty());
    }

    #[test]
    fn schedule_validation() {
        assert!(Schedule::default().validate().is_ok());
        assert!(Schedule { stride_days: 0.5, ..Schedule::default() }.validate().is_err());
        assert!(Schedule { gap_days: -1.0, ..Schedule::default() }.validate().is_err());
        assert!(Schedule { test_sample_size: 0, ..Schedule::default() }.validate().is_err());
    }

    #[test]
    fn training_keeps_first_per_user() {
        let iv = TimeInterval { start: t(0, 0), end: t(1, 0) };
        let rs = vec![
            rec("b", "u1", t(0, 50), true),
            rec("a", "u1", t(0, 10), true),
            rec("c", "u2", t(0, 20), false),
            rec("d", "u3", t(1, 5), true),
            rec("e", "u4", t(0, 30), true),
        ];
        let sel = select_training(&rs, &iv);
        let ids: Vec<_> = sel.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, ["a", "e"]);
    }

    #[test]
    fn test_selection() {
        let iv = TimeInterval { start: t(1, 0), end: t(2, 0) };
        let rs: Vec<_> = (0..5).map(|i| rec(&format!("m{i}"), &format!("u{i}"), t(1, i), true)).collect();
        let users: HashSet<String> = ["u1".to_string()].into();
        let sel = select_test(&rs, &iv, &users, 2000, 9);
        assert_eq!(sel.len(), 4);
        assert!(sel.iter().all(|r| r.user_id != "u1"));
        let a = select_test(&rs, &iv, &HashSet::new(), 2, 42);
        let b = select_test(&rs, &iv, &HashSet::new(), 2, 42);
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
    }

    fn arb_record() -> impl Strategy<Value = RawRecord> {
        (
            "[a-z0-9]{1,8}",
            "[a-z]{0,4}",
            0i64..10_000_000,
            proptest::option::of((-180.0f64..=180.0, -90.0f64..=90.0)),
            any::<String>(),
            any::<String>(),
            ".{0,12}",
            "[a-z]{0,3}",
            ".{0,10}",
        )
            .prop_map(|(id, user, ms, geo, tx, ds, lo, ln, tz)| RawRecord {
                id,
                user_id: user,
                timestamp: t(0, 0) + Duration::milliseconds(ms),
                origin: geo.map(|(lon, lat)| GeoPoint::new(lon, lat).unwrap()),
                text: tx,
                user_description: ds,
                user_location: lo,
                user_lang: ln,
                user_timezone: tz,
            })
    }

    proptest! {
        #[test]
        fn serialize_round_trips(r in arb_record()) {
            let line = r.to_json_line();
            let back = parse_record(line.as_bytes(), 1).unwrap();
            prop_assert_eq!(back, r);
        }

        #[test]
        fn training_users_unique_and_test_disjoint(
            users in proptest::collection::vec(0u8..20, 1..80),
            seed in any::<u64>(),
        ) {
            let rs: Vec<_> = users.iter().enumerate()
                .map(|(i, u)| rec(&format!("{i:03}"), &format!("u{u}"), t(0, (i as i64 * 977) % 86400), i % 7 != 0))
                .collect();
            let iv = TimeInterval { start: t(0, 0), end: t(1, 0) };
            let train = select_training(&rs, &iv);
            let set: HashSet<_> = train.iter().map(|r| r.user_id.clone()).collect();
            prop_assert_eq!(set.len(), train.len());
            prop_assert!(train.iter().all(|r| r.is_geotagged()));
            let half: HashSet<String> = set.iter().take(set.len() / 2).cloned().collect();
            let test = select_test(&rs, &iv, &half, 10, seed);
            prop_assert!(test.iter().all(|r| !half.contains(&r.user_id)));
        }

        #[test]
        fn windows_are_ordered(train in 0.0f64..5.0, gap in 0.0f64..5.0, stride in 1.0f64..10.0, span in 1i64..200) {
            let s = Schedule { training_days: train, gap_days: gap, stride_days: stride, ..Schedule::default() };
            for w in schedule_windows(t(0, 0), t(span, 0), &s) {
                prop_assert_eq!(w.train.end + days(gap), w.test.start);
                prop_assert!(w.test.end <= t(span, 0));
            }
        }
    }
}
