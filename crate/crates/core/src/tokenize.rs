//! Field-tagged n-gram extraction.
//!
//! Free-text fields (`tx`, `ds`, `lo`) are split into runs of characters that
//! share a Unicode general category class and script; only letter runs
//! survive, lower-cased. Runs in scripts written without word delimiters
//! (Thai, Lao, Khmer, Myanmar) and in Common/Inherited are dropped. Han,
//! Hiragana and Katakana runs are handed to a pluggable segmenter. Unigrams
//! and adjacent bigrams of the surviving tokens form the n-grams. The
//! option-valued fields (`ln`, `tz`) become a single normalized n-gram.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use unicode_general_category::{get_general_category, GeneralCategory};
use unicode_script::{Script, UnicodeScript};

use crate::corpus::RawRecord;
use crate::geo::GeoPoint;

/// The message fields a model can draw n-grams from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Field {
    Tx,
    Ds,
    Lo,
    Ln,
    Tz,
}

impl Field {
    pub const ALL: [Field; 5] = [Field::Tx, Field::Ds, Field::Lo, Field::Ln, Field::Tz];

    pub fn as_str(self) -> &'static str {
        match self {
            Field::Tx => "tx",
            Field::Ds => "ds",
            Field::Lo => "lo",
            Field::Ln => "ln",
            Field::Tz => "tz",
        }
    }

    pub fn is_free_text(self) -> bool {
        matches!(self, Field::Tx | Field::Ds | Field::Lo)
    }

    fn bit(self) -> u8 {
        1 << (self as u8)
    }

    pub fn from_index(i: u8) -> Option<Field> {
        Field::ALL.get(i as usize).copied()
    }

    fn value(self, r: &RawRecord) -> &str {
        match self {
            Field::Tx => &r.text,
            Field::Ds => &r.user_description,
            Field::Lo => &r.user_location,
            Field::Ln => &r.user_lang,
            Field::Tz => &r.user_timezone,
        }
    }
}

impl fmt::Display for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Field {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "tx" => Ok(Field::Tx),
            "ds" => Ok(Field::Ds),
            "lo" => Ok(Field::Lo),
            "ln" => Ok(Field::Ln),
            "tz" => Ok(Field::Tz),
            other => Err(format!("unknown field {other:?} (expected tx, ds, lo, ln, tz)")),
        }
    }
}

/// A set of fields, stored as a bitmask.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord)]
pub struct FieldSet(u8);

impl FieldSet {
    pub const ALL: FieldSet = FieldSet(0b1_1111);

    pub fn empty() -> Self {
        FieldSet(0)
    }

    pub fn from_bits(bits: u8) -> Self {
        FieldSet(bits & Self::ALL.0)
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn with(self, f: Field) -> Self {
        FieldSet(self.0 | f.bit())
    }

    pub fn without(self, f: Field) -> Self {
        FieldSet(self.0 & !f.bit())
    }

    pub fn contains(self, f: Field) -> bool {
        self.0 & f.bit() != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn iter(self) -> impl Iterator<Item = Field> {
        Field::ALL.into_iter().filter(move |f| self.contains(*f))
    }

    /// All 31 non-empty subsets of the five fields.
    pub fn nonempty_subsets() -> impl Iterator<Item = FieldSet> {
        (1..=Self::ALL.0).map(FieldSet)
    }
}

impl FromIterator<Field> for FieldSet {
    fn from_iter<I: IntoIterator<Item = Field>>(iter: I) -> Self {
        iter.into_iter().fold(FieldSet::empty(), FieldSet::with)
    }
}

impl fmt::Display for FieldSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<_> = self.iter().map(Field::as_str).collect();
        f.write_str(&names.join(","))
    }
}

impl fmt::Debug for FieldSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "FieldSet({self})")
    }
}

impl FromStr for FieldSet {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.trim().eq_ignore_ascii_case("all") {
            return Ok(FieldSet::ALL);
        }
        let mut set = FieldSet::empty();
        for part in s.split(',').filter(|p| !p.trim().is_empty()) {
            set = set.with(part.parse()?);
        }
        if set.is_empty() {
            return Err("field set is empty".into());
        }
        Ok(set)
    }
}

impl Serialize for FieldSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for FieldSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// An n-gram tagged with the field it came from.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NGram {
    pub field: Field,
    pub gram: String,
}

impl NGram {
    pub fn new(field: Field, gram: impl Into<String>) -> Self {
        NGram { field, gram: gram.into() }
    }
}

impl fmt::Display for NGram {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.field, self.gram)
    }
}

/// A tokenized message: its n-gram set plus the true origin, when known.
#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub id: String,
    pub ngrams: BTreeSet<NGram>,
    pub origin: Option<GeoPoint>,
}

/// Subdivides a Han/Hiragana/Katakana run into words.
pub trait Segmenter: Send + Sync {
    fn segment(&self, token: &str) -> Vec<String>;
}

impl<F> Segmenter for F
where
    F: Fn(&str) -> Vec<String> + Send + Sync,
{
    fn segment(&self, token: &str) -> Vec<String> {
        self(token)
    }
}

/// Emits one token per character.
#[derive(Debug, Clone, Copy, Default)]
pub struct CharSegmenter;

impl Segmenter for CharSegmenter {
    fn segment(&self, token: &str) -> Vec<String> {
        token.chars().map(String::from).collect()
    }
}

/// Script class used for run splitting. Han, Hiragana and Katakana share one
/// class so mixed Japanese text stays one candidate run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ScriptClass {
    Japanese,
    Other(Script),
}

fn script_class(c: char) -> ScriptClass {
    match c.script() {
        Script::Han | Script::Hiragana | Script::Katakana => ScriptClass::Japanese,
        s => ScriptClass::Other(s),
    }
}

/// Major general category: the first letter of the two-letter code.
fn major_category(c: char) -> char {
    use GeneralCategory::*;
    match get_general_category(c) {
        UppercaseLetter | LowercaseLetter | TitlecaseLetter | ModifierLetter | OtherLetter => 'L',
        NonspacingMark | SpacingMark | EnclosingMark => 'M',
        DecimalNumber | LetterNumber | OtherNumber => 'N',
        ConnectorPunctuation | DashPunctuation | OpenPunctuation | ClosePunctuation | InitialPunctuation
        | FinalPunctuation | OtherPunctuation => 'P',
        MathSymbol | CurrencySymbol | ModifierSymbol | OtherSymbol => 'S',
        SpaceSeparator | LineSeparator | ParagraphSeparator => 'Z',
        _ => 'C',
    }
}

/// A candidate token: a lower-cased letter run and the script of its first
/// character.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Candidate {
    pub text: String,
    pub script: Script,
}

/// Splits `s` into maximal runs of identical (category, script class),
/// keeping only letter runs, lower-cased.
pub fn split_candidates(s: &str) -> Vec<Candidate> {
    let mut out = Vec::new();
    let mut run = String::new();
    let mut run_key: Option<(char, ScriptClass)> = None;
    let mut run_script = Script::Unknown;
    let mut flush = |run: &mut String, key: Option<(char, ScriptClass)>, script: Script| {
        if matches!(key, Some(('L', _))) && !run.is_empty() {
            out.push(Candidate { text: std::mem::take(run), script });
        }
        run.clear();
    };
    for c in s.chars() {
        let key = (major_category(c), script_class(c));
        if run_key != Some(key) {
            flush(&mut run, run_key, run_script);
            run_key = Some(key);
            run_script = c.script();
        }
        if key.0 == 'L' {
            run.extend(c.to_lowercase().filter(|l| major_category(*l) == 'L'));
        }
    }
    flush(&mut run, run_key, run_script);
    out
}

fn discarded_script(s: Script) -> bool {
    matches!(
        s,
        Script::Thai | Script::Lao | Script::Khmer | Script::Myanmar | Script::Common | Script::Inherited
    )
}

fn japanese_script(s: Script) -> bool {
    matches!(s, Script::Han | Script::Hiragana | Script::Katakana)
}

/// Drops candidates in undelimited or non-letter scripts, preserving order.
pub fn filter_scripts(tokens: Vec<Candidate>) -> Vec<Candidate> {
    tokens.into_iter().filter(|t| !discarded_script(t.script)).collect()
}

/// Segments a Japanese-script run with `segmenter`; empty pieces are dropped.
pub fn segment_cjk(token: &str, segmenter: &dyn Segmenter) -> Vec<String> {
    segmenter.segment(token).into_iter().filter(|t| !t.is_empty()).collect()
}

/// All unigrams followed by all adjacent bigrams, space-joined.
pub fn ngrams(tokens: &[String]) -> Vec<String> {
    let mut out: Vec<String> = tokens.to_vec();
    out.extend(tokens.windows(2).map(|w| format!("{} {}", w[0], w[1])));
    out
}

/// Runs the free-text pipeline and returns the token sequence.
pub fn tokens(s: &str, segmenter: &dyn Segmenter) -> Vec<String> {
    let mut out = Vec::new();
    for cand in filter_scripts(split_candidates(s)) {
        if japanese_script(cand.script) {
            out.extend(segment_cjk(&cand.text, segmenter));
        } else {
            out.push(cand.text);
        }
    }
    out
}

/// Lower-cases and strips everything that is not alphanumeric.
pub fn normalize_option(s: &str) -> String {
    s.chars().flat_map(char::to_lowercase).filter(|c| c.is_alphanumeric()).collect()
}

/// Tokenizes the selected fields of a record into a message.
#[derive(Clone, Copy)]
pub struct Tokenizer<'a> {
    segmenter: &'a dyn Segmenter,
}

impl Default for Tokenizer<'static> {
    fn default() -> Self {
        Tokenizer { segmenter: &CharSegmenter }
    }
}

impl<'a> Tokenizer<'a> {
    pub fn with_segmenter(segmenter: &'a dyn Segmenter) -> Self {
        Tokenizer { segmenter }
    }

    pub fn field_ngrams(&self, field: Field, value: &str) -> Vec<NGram> {
        if field.is_free_text() {
            ngrams(&tokens(value, self.segmenter)).into_iter().map(|g| NGram::new(field, g)).collect()
        } else {
            let g = normalize_option(value);
            if g.is_empty() {
                Vec::new()
            } else {
                vec![NGram::new(field, g)]
            }
        }
    }

    pub fn tokenize(&self, r: &RawRecord, fields: FieldSet) -> Message {
        let mut set = BTreeSet::new();
        for f in fields.iter() {
            set.extend(self.field_ngrams(f, f.value(r)));
        }
        Message { id: r.id.clone(), ngrams: set, origin: r.origin }
    }
}

/// Tokenizes with the default per-character segmenter.
pub fn tokenize_message(r: &RawRecord, fields: FieldSet) -> Message {
    Tokenizer::default().tokenize(r, fields)
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{TimeZone, Utc};
    use proptest::prelude::*;

    fn texts(c: Vec<Candidate>) -> Vec<String> {
        c.into_iter().map(|c| c.text).collect()
    }

    fn record() -> RawRecord {
        RawRecord {
            id: "m".into(),
            user_id: "u".into(),
            timestamp: Utc.with_ymd_and_hms(2012, 5, 1, 0, 0, 0).unwrap(),
            origin: None,
            text: String::new(),
            user_description: String::new(),
            user_location: String::new(),
            user_lang: String::new(),
            user_timezone: String::new(),
        }
    }

    #[test]
    fn split_worked_example() {
        assert_eq!(texts(split_candidates("Can't wait for 私の")), ["can", "t", "wait", "for", "私の"]);
        assert!(split_candidates("").is_empty());
        assert!(split_candidates("123 !!").is_empty());
    }

    #[test]
    fn split_on_script_change() {
        assert_eq!(texts(split_candidates("abcдом")), ["abc", "дом"]);
        assert_eq!(texts(split_candidates("ΑΘΗΝΑ")), ["αθηνα"]);
    }

    #[test]
    fn filter_examples() {
        let thai = split_candidates("สวัสดี");
        assert!(!thai.is_empty());
        assert!(filter_scripts(thai).is_empty());
        let latin = split_candidates("can t");
        assert_eq!(texts(filter_scripts(latin)), ["can", "t"]);
        let mixed = split_candidates("one สวัสดี two ສະບາຍດີ three");
        assert_eq!(texts(filter_scripts(mixed)), ["one", "two", "three"]);
    }

    #[test]
    fn segment_examples() {
        assert_eq!(segment_cjk("私の", &CharSegmenter), ["私", "の"]);
        assert_eq!(segment_cjk("私", &CharSegmenter), ["私"]);
        let custom = |s: &str| vec![s.to_string()];
        assert_eq!(tokens("東京タワー", &custom), ["東京タワ"]);
        assert_eq!(tokens("hello", &custom), ["hello"]);
    }

    #[test]
    fn ngram_examples() {
        let toks: Vec<String> = ["can", "t", "wait", "for", "私", "の"].iter().map(|s| s.to_string()).collect();
        assert_eq!(
            ngrams(&toks),
            ["can", "t", "wait", "for", "私", "の", "can t", "t wait", "wait for", "for 私", "私 の"]
        );
        assert_eq!(ngrams(&["x".to_string()]), ["x"]);
        assert!(ngrams(&[]).is_empty());
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_option("Eastern Time (US & Canada)"), "easterntimeuscanada");
        assert_eq!(normalize_option("en"), "en");
        assert_eq!(normalize_option("???"), "");
        assert_eq!(normalize_option("pt-BR"), "ptbr");
        assert_eq!(normalize_option("İzmir"), "izmir");
    }

    #[test]
    fn message_examples() {
        let mut r = record();
        r.text = "hi hi".into();
        let m = tokenize_message(&r, "tx".parse().unwrap());
        let want: BTreeSet<_> = [NGram::new(Field::Tx, "hi"), NGram::new(Field::Tx, "hi hi")].into();
        assert_eq!(m.ngrams, want);

        let mut r = record();
        r.user_timezone = "Eastern Time (US & Canada)".into();
        r.user_lang = "???".into();
        let m = tokenize_message(&r, "tz,ln".parse().unwrap());
        assert_eq!(m.ngrams, [NGram::new(Field::Tz, "easterntimeuscanada")].into());

        let mut r = record();
        r.user_location = "ca".into();
        r.text = "ca".into();
        let m = tokenize_message(&r, "lo,tx".parse().unwrap());
        assert_eq!(m.ngrams.len(), 2);
        assert!(m.ngrams.contains(&NGram::new(Field::Lo, "ca")));
        assert!(m.ngrams.contains(&NGram::new(Field::Tx, "ca")));
    }

    #[test]
    fn field_set_parsing() {
        let s: FieldSet = "tx,lo,tz,ln".parse().unwrap();
        assert_eq!(s.len(), 4);
        assert!(!s.contains(Field::Ds));
        assert_eq!(s.to_string(), "tx,lo,ln,tz");
        assert!("".parse::<FieldSet>().is_err());
        assert!("tx,zz".parse::<FieldSet>().is_err());
        assert_eq!("all".parse::<FieldSet>().unwrap(), FieldSet::ALL);
        assert_eq!(FieldSet::nonempty_subsets().count(), 31);
    }

    #[test]
    fn lowercasing_keeps_only_letters() {
        assert_eq!(tokens("İstanbul", &CharSegmenter), ["istanbul"]);
        assert_eq!(tokens("ϒ", &CharSegmenter), ["ϒ"]);
    }

    proptest! {
        #[test]
        fn grams_are_lowercase_letters(s in any::<String>()) {
            for g in ngrams(&tokens(&s, &CharSegmenter)) {
                prop_assert!(!g.is_empty());
                for part in g.split(' ') {
                    prop_assert!(!part.is_empty());
                    for c in part.chars() {
                        prop_assert_eq!(major_category(c), 'L', "{:?} in {:?}", c, g);
                        prop_assert!(c.to_lowercase().eq(std::iter::once(c)), "{:?} in {:?}", c, g);
                    }
                }
            }
        }

        #[test]
        fn bigram_count(s in any::<String>()) {
            let toks = tokens(&s, &CharSegmenter);
            let grams = ngrams(&toks);
            prop_assert_eq!(grams.len() - toks.len(), toks.len().saturating_sub(1));
        }

        #[test]
        fn field_order_does_not_matter(tx in ".{0,20}", lo in ".{0,10}", tz in ".{0,10}") {
            let mut r = record();
            r.text = tx;
            r.user_location = lo;
            r.user_timezone = tz;
            let a = tokenize_message(&r, [Field::Tz, Field::Lo, Field::Tx].into_iter().collect());
            let b = tokenize_message(&r, [Field::Tx, Field::Lo, Field::Tz].into_iter().collect());
            prop_assert_eq!(a, b);
        }
    }
}
