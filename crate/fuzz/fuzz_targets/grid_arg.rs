#![no_main]

use libfuzzer_sys::fuzz_target;
use sega_core::config::parse_grid_arg;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = parse_grid_arg(text);
    }
});
