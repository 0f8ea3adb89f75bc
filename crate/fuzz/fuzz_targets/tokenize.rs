#![no_main]

use geogmm::corpus::parse_record;
use geogmm::tokenize::{normalize_option, tokenize_message, FieldSet};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let opt = normalize_option(text);
    assert!(opt.chars().all(char::is_alphanumeric));
    let line = format!(
        r#"{{"id":"1","user":"u","ts":"2012-05-01T00:00:00Z","tx":{t},"lo":{t},"ds":{t},"ln":{t},"tz":{t}}}"#,
        t = serde_json_string(text)
    );
    if let Ok(r) = parse_record(line.as_bytes(), 1) {
        let m = tokenize_message(&r, FieldSet::ALL);
        for g in &m.ngrams {
            assert!(!g.gram.is_empty());
            assert!(g.gram.split(' ').count() <= 2);
        }
    }
});

fn serde_json_string(s: &str) -> String {
    let mut out = String::from("\"");
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            c if (c as u32) < 0x20 => out.push_str(&format!("\\u{:04x}", c as u32)),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}
