use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use sega_core::config::ExperimentConfig;
use sega_core::diffusion::{run_guided, RunOptions};
use sega_service::{router, AppState};

fn app() -> Router {
    router(AppState::new())
}

fn config(concepts: Value) -> Value {
    json!({
        "model": {"kind": "mixture", "components": [
            {"weight": 0.5, "mean": [0.5, 0.0], "covariance": 1.0, "labels": ["a"]},
            {"weight": 0.5, "mean": [-0.5, 0.0], "covariance": 1.0, "labels": ["b"]}
        ]},
        "schedule": {"kind": "cosine", "steps": 20},
        "guidance": {"guidance_scale": 1.0, "momentum_scale": 0.3, "momentum_beta": 0.5, "concepts": concepts}
    })
}

fn concept_a() -> Value {
    json!([{"condition": "a", "edit_scale": 6.0, "threshold": 0.5}])
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, |b| Body::from(b.to_string())))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap()
    };
    if status.is_client_error() {
        let field = value["error"]["field"].as_str().unwrap_or_default();
        assert!(!field.is_empty(), "4xx without field: {value}");
        assert!(value["error"]["code"].is_string() && value["error"]["message"].is_string());
    }
    (status, value)
}

async fn create(app: &Router, id: &str, concepts: Value, particles: usize, seed: u64) -> Value {
    let body = json!({"id": id, "config": config(concepts), "particles": particles, "seed": seed});
    let (status, value) = call(app, Method::POST, "/v1/sessions", Some(body)).await;
    assert_eq!(status, StatusCode::CREATED, "{value}");
    value
}

async fn advance(app: &Router, id: &str, steps: usize) -> (StatusCode, Value) {
    call(
        app,
        Method::POST,
        &format!("/v1/sessions/{id}/advance"),
        Some(json!({"steps": steps})),
    )
    .await
}

async fn put_edits(app: &Router, id: &str, body: Value) -> (StatusCode, Value) {
    call(
        app,
        Method::PUT,
        &format!("/v1/sessions/{id}/edits"),
        Some(body),
    )
    .await
}

async fn state(app: &Router, id: &str) -> Value {
    let (status, value) = call(app, Method::GET, &format!("/v1/sessions/{id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    value
}

fn without_identity(mut v: Value) -> Value {
    for key in ["id", "created_at", "updated_at"] {
        v.as_object_mut().unwrap().remove(key);
    }
    v
}

#[tokio::test]
async fn create_returns_initial_state() {
    let app = app();
    let s = create(&app, "s1", concept_a(), 7, 3).await;
    assert_eq!(s["id"], "s1");
    assert_eq!(s["t"], 0);
    assert_eq!(s["steps"], 20);
    assert_eq!(s["gamma_log"], json!([]));
    assert_eq!(s["positions"].as_array().unwrap().len(), 7);
    assert_eq!(s["actions"][0]["kind"], "create");

    let body = json!({"config": config(json!([])), "particles": 1});
    let (status, generated) = call(&app, Method::POST, "/v1/sessions", Some(body)).await;
    assert_eq!(status, StatusCode::CREATED);
    assert!(!generated["id"].as_str().unwrap().is_empty());
    let (_, listing) = call(&app, Method::GET, "/v1/sessions", None).await;
    assert_eq!(listing["sessions"].as_array().unwrap().len(), 2);
}

#[tokio::test]
async fn create_rejects_bad_bodies() {
    let app = app();
    for (particles, field) in [
        (json!(0), "particles"),
        (json!(10_001), "particles"),
        (json!("ten"), "particles"),
    ] {
        let body = json!({"config": config(json!([])), "particles": particles});
        let (status, v) = call(&app, Method::POST, "/v1/sessions", Some(body)).await;
        assert_eq!(status, StatusCode::BAD_REQUEST);
        assert_eq!(v["error"]["field"], field);
    }
    let mut bad = config(json!([]));
    bad["guidance"]["guidance_scale"] = json!("high");
    let (status, v) = call(
        &app,
        Method::POST,
        "/v1/sessions",
        Some(json!({"config": bad, "particles": 1})),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(v["error"]["field"], "config.guidance.guidance_scale");

    let mut bad = config(json!([]));
    bad["guidance"]["concepts"] =
        json!([{"condition": "nope", "edit_scale": 1.0, "threshold": 0.5}]);
    let (status, v) = call(
        &app,
        Method::POST,
        "/v1/sessions",
        Some(json!({"config": bad, "particles": 1})),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(v["error"]["field"], "config.guidance.concepts[0].condition");

    let (status, v) = call(
        &app,
        Method::POST,
        "/v1/sessions",
        Some(json!({"particles": 1})),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(v["error"]["message"].as_str().unwrap().contains("config"));

    let req = Request::builder()
        .method(Method::POST)
        .uri("/v1/sessions")
        .body(Body::from("{not json"))
        .unwrap();
    assert_eq!(
        app.clone().oneshot(req).await.unwrap().status(),
        StatusCode::BAD_REQUEST
    );
}

#[tokio::test]
async fn duplicate_ids_conflict_and_deleted_sessions_vanish() {
    let app = app();
    create(&app, "dup", json!([]), 1, 0).await;
    let body = json!({"id": "dup", "config": config(json!([])), "particles": 1});
    let (status, v) = call(&app, Method::POST, "/v1/sessions", Some(body)).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(v["error"]["field"], "id");

    let (status, _) = call(&app, Method::DELETE, "/v1/sessions/dup", None).await;
    assert_eq!(status, StatusCode::NO_CONTENT);
    let (status, v) = call(&app, Method::GET, "/v1/sessions/dup", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(v["error"]["field"], "id");
    let (status, _) = call(&app, Method::DELETE, "/v1/sessions/dup", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = put_edits(&app, "dup", json!([])).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = advance(&app, "dup", 1).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, v) = call(&app, Method::GET, "/v2/elsewhere", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(v["error"]["field"], "path");
}

#[tokio::test]
async fn edits_are_range_checked() {
    let app = app();
    create(&app, "e", concept_a(), 2, 0).await;
    let cases = [
        (
            json!([{"condition": "a", "edit_scale": 25.0, "threshold": 0.5}]),
            StatusCode::UNPROCESSABLE_ENTITY,
            "edits[0].edit_scale",
        ),
        (
            json!([{"condition": "a", "edit_scale": 1.0, "threshold": 1.2}]),
            StatusCode::UNPROCESSABLE_ENTITY,
            "edits[0].threshold",
        ),
        (
            json!([{"condition": "a", "edit_scale": 1.0, "threshold": 0.5}, {"condition": "zzz", "edit_scale": 1.0, "threshold": 0.5}]),
            StatusCode::UNPROCESSABLE_ENTITY,
            "edits[1].condition",
        ),
        (
            json!([{"condition": "a", "edit_scale": "big", "threshold": 0.5}]),
            StatusCode::BAD_REQUEST,
            "edits[0].edit_scale",
        ),
        (
            json!({"concepts": [], "guidance_scale": 40.0}),
            StatusCode::UNPROCESSABLE_ENTITY,
            "guidance_scale",
        ),
        (json!("a"), StatusCode::BAD_REQUEST, "body"),
    ];
    for (body, status, field) in cases {
        let (got, v) = put_edits(&app, "e", body).await;
        assert_eq!(got, status, "{v}");
        assert_eq!(v["error"]["field"], field);
    }
    let (_, v) = put_edits(
        &app,
        "e",
        json!([{"condition": "a", "edit_scale": 25.0, "threshold": 0.5}]),
    )
    .await;
    assert!(
        v["error"]["message"].as_str().unwrap().contains("[0, 20]"),
        "{v}"
    );
    // Rejected edits leave the config untouched.
    let s = state(&app, "e").await;
    assert_eq!(s["config"]["guidance"]["concepts"][0]["edit_scale"], 6.0);
    assert_eq!(s["actions"].as_array().unwrap().len(), 1);

    let (status, v) = put_edits(&app, "e", json!({"concepts": [], "guidance_scale": 2.0})).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["guidance"]["guidance_scale"], 2.0);
}

#[tokio::test]
async fn advancing_past_the_end_conflicts() {
    let app = app();
    create(&app, "x", concept_a(), 2, 0).await;
    let (status, v) = advance(&app, "x", 21).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(v["error"]["field"], "steps");
    let (status, _) = advance(&app, "x", 0).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, v) = advance(&app, "x", 20).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["t"], 20);
    assert_eq!(v["tau"], 0);
    let (status, _) = advance(&app, "x", 1).await;
    assert_eq!(status, StatusCode::CONFLICT);
}

#[tokio::test]
async fn one_long_advance_equals_single_steps_and_direct_runs() {
    let app = app();
    create(&app, "bulk", concept_a(), 5, 11).await;
    create(&app, "steps", concept_a(), 5, 11).await;
    let (_, bulk) = advance(&app, "bulk", 20).await;
    let mut stepped = Value::Null;
    for _ in 0..20 {
        stepped = advance(&app, "steps", 1).await.1;
    }
    assert_eq!(bulk["positions"], stepped["positions"]);
    assert_eq!(bulk["gamma_log"], stepped["gamma_log"]);

    let cfg = ExperimentConfig::from_value(config(concept_a())).unwrap();
    let est = cfg.model.estimator(&cfg.schedule).unwrap();
    for i in 0..5u64 {
        let out = run_guided(
            &*est,
            &cfg.schedule,
            &cfg.guidance,
            11 + i,
            RunOptions::default(),
        )
        .unwrap();
        assert_eq!(
            bulk["positions"][i as usize],
            json!(out.final_sample.data())
        );
    }
}

#[tokio::test]
async fn warmup_advance_matches_unguided_advance() {
    let app = app();
    let delayed = json!([{"condition": "a", "edit_scale": 6.0, "threshold": 0.5, "warmup": 8}]);
    create(&app, "warm", delayed, 4, 2).await;
    create(&app, "plain", json!([]), 4, 2).await;
    let (_, warm) = advance(&app, "warm", 8).await;
    let (_, plain) = advance(&app, "plain", 8).await;
    assert_eq!(warm["positions"], plain["positions"]);
    assert!(warm["momentum"]
        .as_array()
        .unwrap()
        .iter()
        .any(|v| v.as_f64() != Some(0.0)));
}

#[tokio::test]
async fn direction_flip_negates_next_term_and_keeps_momentum() {
    let app = app();
    let plain = json!([{"condition": "a", "edit_scale": 6.0, "threshold": 0.5}]);
    let mut edit_body = plain.clone();
    edit_body[0]["direction"] = json!("negative");
    // Momentum off so the applied term is exactly the concept term.
    let no_momentum = |c: Value| {
        let mut cfg = config(c);
        cfg["guidance"]["momentum_scale"] = json!(0.0);
        cfg
    };
    for id in ["flip", "keep"] {
        let body =
            json!({"id": id, "config": no_momentum(plain.clone()), "particles": 1, "seed": 5});
        assert_eq!(
            call(&app, Method::POST, "/v1/sessions", Some(body)).await.0,
            StatusCode::CREATED
        );
        advance(&app, id, 6).await;
    }
    let before = state(&app, "flip").await["momentum"].clone();
    let (status, _) = put_edits(&app, "flip", edit_body).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(state(&app, "flip").await["momentum"], before);
    let (_, flipped) = advance(&app, "flip", 1).await;
    let (_, kept) = advance(&app, "keep", 1).await;
    let a = flipped["gamma_log"][6]["data"].as_array().unwrap();
    let b = kept["gamma_log"][6]["data"].as_array().unwrap();
    assert!(!a.is_empty());
    for (x, y) in a.iter().zip(b) {
        assert_eq!(x.as_f64().unwrap(), -y.as_f64().unwrap());
    }
}

#[tokio::test]
async fn empty_edit_list_reverts_to_plain_guidance() {
    let app = app();
    create(&app, "clear", concept_a(), 2, 0).await;
    advance(&app, "clear", 3).await;
    put_edits(&app, "clear", json!([])).await;
    let (_, s) = advance(&app, "clear", 2).await;
    assert!(s["gamma_log"][2].is_object());
    assert!(s["gamma_log"][3].is_null() && s["gamma_log"][4].is_null());
}

async fn script(app: &Router, id: &str) -> Value {
    create(app, id, concept_a(), 16, 9).await;
    advance(app, id, 4).await;
    put_edits(
        app,
        id,
        json!([{"condition": "b", "edit_scale": 3.0, "threshold": 0.7, "direction": "negative"}]),
    )
    .await;
    advance(app, id, 5).await;
    put_edits(app, id, json!({"concepts": [{"condition": "a", "edit_scale": 2.0, "threshold": 0.5}], "momentum_scale": 0.8})).await;
    advance(app, id, 11).await;
    state(app, id).await
}

#[tokio::test]
async fn identical_scripts_on_fresh_instances_agree() {
    let one = script(&app(), "first").await;
    let two = script(&app(), "second").await;
    assert_eq!(without_identity(one), without_identity(two));
}

#[tokio::test]
async fn action_log_replays_to_the_same_state() {
    let app = app();
    let original = script(&app, "orig").await;
    let actions = original["actions"].as_array().unwrap();
    let created = &actions[0];
    let body = json!({"id": "replay", "config": created["config"], "particles": created["particles"], "seed": created["seed"]});
    assert_eq!(
        call(&app, Method::POST, "/v1/sessions", Some(body)).await.0,
        StatusCode::CREATED
    );
    for action in &actions[1..] {
        match action["kind"].as_str().unwrap() {
            "edits" => assert_eq!(
                put_edits(&app, "replay", action["body"].clone()).await.0,
                StatusCode::OK
            ),
            "advance" => {
                let steps = action["steps"].as_u64().unwrap() as usize;
                assert_eq!(advance(&app, "replay", steps).await.0, StatusCode::OK);
            }
            other => panic!("unexpected action {other}"),
        }
    }
    assert_eq!(
        without_identity(state(&app, "replay").await),
        without_identity(original)
    );
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_sessions_do_not_interfere() {
    let solo = script(&app(), "a").await;
    let shared = app();
    let (a, _) = tokio::join!(script(&shared, "a"), async {
        create(&shared, "b", json!([]), 32, 1).await;
        for _ in 0..10 {
            put_edits(
                &shared,
                "b",
                json!([{"condition": "b", "edit_scale": 9.0, "threshold": 0.3}]),
            )
            .await;
            advance(&shared, "b", 2).await;
        }
    });
    assert_eq!(without_identity(a), without_identity(solo));
}
