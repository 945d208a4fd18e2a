#![no_main]

use libfuzzer_sys::fuzz_target;
use sega_core::config::ExperimentConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(config) = ExperimentConfig::from_json(text) {
        // Whatever parses must survive a round trip and expand its grid.
        let again = ExperimentConfig::from_value(config.to_value()).expect("round trip");
        assert_eq!(again.to_value(), config.to_value());
        if config.grid_size() <= 4096 {
            let _ = config.grid_points();
        }
    }
});
