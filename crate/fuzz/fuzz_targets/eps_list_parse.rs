#![no_main]

use dprisk::config::parse_eps_list;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(eps) = parse_eps_list(text) {
        assert!(eps.windows(2).all(|w| w[0] < w[1]));
        assert!(eps.iter().all(|e| e.is_finite() && *e > 0.0));
    }
});
