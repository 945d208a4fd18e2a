#![no_main]

use libfuzzer_sys::fuzz_target;
use sega_core::config::GridPath;
use serde_json::json;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(path) = GridPath::parse(text) {
        assert_eq!(path.to_string(), text);
        let mut doc = json!({
            "guidance": {"guidance_scale": 1.0, "concepts": [{"condition": "a", "edit_scale": 1.0}]},
            "seeds": [0, 1]
        });
        let _ = path.set(&mut doc, json!(2.5));
    }
});
