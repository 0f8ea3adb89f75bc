#![no_main]

use geogmm::harness::ExperimentConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = ExperimentConfig::from_toml(text) {
        assert!(cfg.validate().is_ok());
        for algo in &cfg.algorithms {
            let _ = cfg.train_config(*algo, 0);
        }
    }
});
