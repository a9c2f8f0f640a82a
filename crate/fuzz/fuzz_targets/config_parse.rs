#![no_main]

use dprisk::config::ExperimentConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = ExperimentConfig::from_text(text) {
        let again = ExperimentConfig::from_text(&cfg.to_text()).expect("rendered config parses");
        assert_eq!(again, cfg);
    }
});
