#![no_main]

use geogmm::tokenize::FieldSet;
use geogmm::WeightingAlgo;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(a) = text.parse::<WeightingAlgo>() {
        assert_eq!(a.to_string().parse::<WeightingAlgo>().unwrap(), a);
    }
    if let Ok(f) = text.parse::<FieldSet>() {
        assert_eq!(f.to_string().parse::<FieldSet>().unwrap(), f);
    }
});
