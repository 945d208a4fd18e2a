#![no_main]

//! Request bodies for every session route. The first byte picks the route.

use libfuzzer_sys::fuzz_target;
use sega_service::session::{parse_body, AdvanceRequest, CreateRequest, Session};
use serde_json::json;

fuzz_target!(|data: &[u8]| {
    let Some((&route, body)) = data.split_first() else { return };
    match route % 3 {
        0 => {
            if let Ok(mut request) = parse_body::<CreateRequest>(body, "") {
                request.particles = request.particles.min(4);
                let _ = Session::create("fuzz".into(), request);
            }
        }
        1 => {
            let _ = parse_body::<AdvanceRequest>(body, "");
        }
        _ => {
            let request = CreateRequest {
                id: None,
                config: json!({
                    "model": {"kind": "mixture", "components": [
                        {"weight": 0.5, "mean": [1.0], "covariance": 1.0, "labels": ["a"]},
                        {"weight": 0.5, "mean": [-1.0], "covariance": 1.0, "labels": ["b"]}
                    ]},
                    "schedule": {"kind": "cosine", "steps": 4},
                    "guidance": {"guidance_scale": 1.0}
                }),
                particles: 2,
                seed: 0,
            };
            let mut session = Session::create("fuzz".into(), request).unwrap();
            if session.update_edits(body).is_ok() {
                session.advance(1).unwrap();
            }
        }
    }
});
