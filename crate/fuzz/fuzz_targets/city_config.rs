#![no_main]

use geogmm::synthgen::{generate, SynthConfig};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(mut cfg) = SynthConfig::from_toml(text) {
        cfg.n_messages = cfg.n_messages.min(50);
        let recs = generate(&cfg);
        assert_eq!(recs.len(), cfg.n_messages);
    }
});
