#![no_main]

use geogmm::corpus::parse_record;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(r) = parse_record(data, 1) {
        let again = parse_record(r.to_json_line().as_bytes(), 1).expect("serialized record parses");
        assert_eq!(again, r);
    }
});
