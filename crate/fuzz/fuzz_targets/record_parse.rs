#![no_main]

use dprisk::container::Container;
use dprisk::pipeline::{CellRecord, RiskProfile};
use dprisk::trainer::train::RunRecord;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let _ = RunRecord::from_json(text);
    let _ = CellRecord::from_json(text);
    let _ = RiskProfile::from_json(text);
    let _ = Container::from_json(text);
});
