#![no_main]

use libfuzzer_sys::fuzz_target;
use sega_core::config::SeedSpec;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(spec) = SeedSpec::parse(text) {
        if spec.validate().is_ok() {
            let seeds = spec.seeds();
            assert!(!seeds.is_empty());
        }
    }
});
