#![no_main]

use geogmm::LocationModel;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = LocationModel::from_bytes(data) {
        let bytes = m.to_bytes();
        let back = LocationModel::from_bytes(&bytes).expect("re-encoded model loads");
        assert_eq!(back.to_bytes(), bytes);
    }
});
