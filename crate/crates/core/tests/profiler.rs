//! Structure profiles: the builtin probe, the embedding-service protocol
//! against a mock server, and the profile cache.

#[path = "support/mock_http.rs"]
mod mock_http;

use aide_core::preprocess::phantom::{phantom_pair, PhantomConfig, Regime};
use aide_core::profiler::remote::{profile_remote, profile_remote_all, RemoteConfig};
use aide_core::profiler::{profile_builtin, read_cache, write_cache, ProfileSource, ProfilerError, LABELS};
use base64::Engine;
use mock_http::{dead_endpoint, MockServer};

fn remote_cfg(endpoint: &str) -> RemoteConfig {
    RemoteConfig {
        endpoint: endpoint.into(),
        timeout_ms: 2_000,
        attempts: 3,
        backoff_ms: 1,
        max_in_flight: 2,
    }
}

fn scores_body(hot: usize) -> String {
    let scores: Vec<f64> = (0..LABELS.len())
        .map(|i| if i == hot { 3.0 } else { 0.5 * (i % 3) as f64 })
        .collect();
    serde_json::json!({ "scores": scores }).to_string()
}

#[test]
fn remote_scores_become_softmax_profile() {
    let server = MockServer::start(|_, _| (200, scores_body(1)));
    let q = phantom_pair(Regime::Lung, 0, 1, &PhantomConfig::default())
        .unwrap()
        .quarter;
    let p = profile_remote(&q, &remote_cfg(&server.base_url)).unwrap();
    assert_eq!(p.source, ProfileSource::Remote);
    assert_eq!(p.slice_id, q.slice_id);
    let raw: Vec<f64> = (0..LABELS.len())
        .map(|i| if i == 1 { 3.0 } else { 0.5 * (i % 3) as f64 })
        .collect();
    let z: f64 = raw.iter().map(|s| s.exp()).sum();
    for (got, s) in p.probs.iter().zip(&raw) {
        assert!((got - s.exp() / z).abs() < 1e-12);
    }

    let reqs = server.requests();
    assert_eq!(reqs.len(), 1);
    assert_eq!(reqs[0].path, "/embed");
    let body: serde_json::Value = serde_json::from_str(&reqs[0].body).unwrap();
    let labels: Vec<&str> = body["labels"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap())
        .collect();
    assert_eq!(labels, LABELS.to_vec());
    let png = base64::engine::general_purpose::STANDARD
        .decode(body["image_b64"].as_str().unwrap())
        .unwrap();
    let img = image::load_from_memory(&png).unwrap();
    assert_eq!((img.width(), img.height()), (512, 512));
    assert_eq!(img.color(), image::ColorType::L8);
}

#[test]
fn malformed_reply_is_a_protocol_error_without_retry() {
    for body in ["not json", "{\"scores\": [1.0, 2.0]}", "{\"other\": 1}"] {
        let server = MockServer::start(move |_, _| (200, body.to_string()));
        let q = phantom_pair(Regime::Pelvis, 0, 1, &PhantomConfig::default())
            .unwrap()
            .quarter;
        let err = profile_remote(&q, &remote_cfg(&server.base_url)).unwrap_err();
        assert!(matches!(err, ProfilerError::Protocol { .. }), "{body}: {err:?}");
        assert_eq!(server.requests().len(), 1);
    }
}

#[test]
fn unavailable_service_falls_back_to_builtin_probe() {
    let server = MockServer::start(|_, _| (503, "{}".into()));
    let q = phantom_pair(Regime::Abdomen, 0, 1, &PhantomConfig::default())
        .unwrap()
        .quarter;
    let p = profile_remote(&q, &remote_cfg(&server.base_url)).unwrap();
    assert_eq!(server.requests().len(), 3);
    assert_eq!(p, profile_builtin(&q));

    let p = profile_remote(&q, &remote_cfg(&dead_endpoint())).unwrap();
    assert_eq!(p.source, ProfileSource::Builtin);
}

#[test]
fn transient_failure_is_retried() {
    let server = MockServer::start(|n, _| {
        if n < 2 {
            (500, "{}".into())
        } else {
            (200, scores_body(10))
        }
    });
    let q = phantom_pair(Regime::Pelvis, 2, 1, &PhantomConfig::default())
        .unwrap()
        .quarter;
    let p = profile_remote(&q, &remote_cfg(&server.base_url)).unwrap();
    assert_eq!(p.source, ProfileSource::Remote);
    assert_eq!(p.top_label(), LABELS[10]);
    assert_eq!(server.requests().len(), 3);
}

#[test]
fn batch_profiles_keep_input_order() {
    let server = MockServer::start(|_, _| (200, scores_body(1)));
    let cfg = PhantomConfig::default();
    let slices: Vec<_> = (0..5)
        .map(|i| phantom_pair(Regime::Lung, i, 4, &cfg).unwrap().quarter)
        .collect();
    let out = profile_remote_all(&slices, &remote_cfg(&server.base_url)).unwrap();
    let ids: Vec<&str> = out.iter().map(|p| p.slice_id.as_str()).collect();
    let want: Vec<&str> = slices.iter().map(|s| s.slice_id.as_str()).collect();
    assert_eq!(ids, want);
}

#[test]
fn builtin_probe_is_deterministic_and_regime_aware() {
    let cfg = PhantomConfig::default();
    for (regime, label) in [
        (Regime::Lung, "Lungs"),
        (Regime::Abdomen, "Abdomen"),
        (Regime::Pelvis, "Pelvis"),
    ] {
        for i in 0..4 {
            let q = phantom_pair(regime, i, 30, &cfg).unwrap().quarter;
            let a = profile_builtin(&q);
            assert_eq!(a, profile_builtin(&q));
            assert_eq!(a.top_label(), label, "{regime} #{i}");
            assert!((a.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn cache_round_trip_is_exact() {
    let cfg = PhantomConfig::default();
    let profiles: Vec<_> = Regime::ALL
        .into_iter()
        .map(|r| profile_builtin(&phantom_pair(r, 0, 8, &cfg).unwrap().quarter))
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("profiles.jsonl");
    write_cache(&path, &profiles).unwrap();
    assert_eq!(read_cache(&path).unwrap(), profiles);
}
