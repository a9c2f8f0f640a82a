#![no_main]

use dprisk::container::Container;
use dprisk::datagen::Dataset;
use dprisk::imprint::Campaign;
use dprisk::trainer::Model;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(c) = Container::decode(data) else { return };
    // A decoded container must re-encode to the same bytes.
    assert_eq!(c.encode(), data);
    let _ = Dataset::from_container(&c);
    let _ = Model::from_container(&c);
    let _ = Campaign::from_container(&c);
});
