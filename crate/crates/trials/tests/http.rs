use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, OnceLock};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use blocktower::dataset::{read_manifest, write_dataset};
use blocktower::eval::{binomial_ci, pearson, roc_curve};
use blocktower::learn::{MiniPhysNet, NetConfig};
use blocktower::scenegen::{generate_balanced, GenConfig, Split};
use blocktower_trials::{model_confidences, router, TrialService, N_TEST, N_TRAINING};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tempfile::TempDir;
use tower::ServiceExt;

struct Fixture {
    dir: TempDir,
    small: TempDir,
    confidences: HashMap<String, f64>,
    fell: HashMap<String, bool>,
}

fn dataset(test_per_cell: usize) -> TempDir {
    let cfg = GenConfig {
        master_seed: 21,
        count_per_cell: 1,
        test_count_per_cell: test_per_cell,
        image_size: 16,
        ..Default::default()
    };
    let mut samples = generate_balanced(&cfg, Split::Train).unwrap();
    samples.extend(generate_balanced(&cfg, Split::Test).unwrap());
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&samples, &cfg, dir.path()).unwrap();
    dir
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        // 6 cells x 27 = 162 test records.
        let dir = dataset(27);
        let net = MiniPhysNet::<f32>::new(
            NetConfig {
                image_size: 16,
                shared_heads: false,
            },
            4,
        )
        .unwrap();
        let confidences = model_confidences(dir.path(), &net).unwrap();
        let fell = read_manifest(dir.path())
            .unwrap()
            .records
            .into_iter()
            .map(|r| (r.id, r.fell))
            .collect();
        // 6 x 16 = 96 test records, too few for a session.
        let small = dataset(16);
        Fixture {
            dir,
            small,
            confidences,
            fell,
        }
    })
}

fn app(sessions: &Path) -> Router {
    let f = fixture();
    let svc = TrialService::open(f.dir.path(), sessions, &f.confidences).unwrap();
    router(Arc::new(svc), None)
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or(Body::empty(), |b| Body::from(b.to_string())))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn call_json(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (s, b) = call(app, method, uri, body).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

async fn new_session(app: &Router, seed: u64) -> String {
    let (s, b) = call_json(app, "POST", "/api/session", Some(json!({"subject_label": "t", "seed": seed}))).await;
    assert_eq!(s, StatusCode::CREATED, "{b}");
    assert_eq!(b["n_training"], 50);
    assert_eq!(b["n_test"], 100);
    b["session_id"].as_str().unwrap().to_string()
}

fn record_of(view: &Value) -> String {
    let url = view["image"].as_str().unwrap();
    let parts: Vec<&str> = url.split('/').collect();
    assert_eq!(parts[parts.len() - 1], "0");
    parts[parts.len() - 2].to_string()
}

/// Answers every remaining trial with `choose(record_id, truth)`.
async fn run_session(app: &Router, id: &str, choose: impl Fn(&str, bool) -> bool) -> (usize, usize) {
    let f = fixture();
    let (mut with_feedback, mut without) = (0, 0);
    loop {
        let (s, view) = call_json(app, "GET", &format!("/api/session/{id}/trial"), None).await;
        if s == StatusCode::GONE {
            return (with_feedback, without);
        }
        assert_eq!(s, StatusCode::OK);
        let rid = record_of(&view);
        let truth = f.fell[&rid];
        let fall = choose(&rid, truth);
        let p = if fall { "fall" } else { "stay" };
        let (s, raw) = call(app, "POST", &format!("/api/session/{id}/response"), Some(json!({"prediction": p}))).await;
        assert_eq!(s, StatusCode::OK);
        let fb: Value = serde_json::from_slice(&raw).unwrap();
        match view["phase"].as_str().unwrap() {
            "training" => {
                assert_eq!(fb["correct"], json!(fall == truth));
                assert_eq!(fb["outcome_image"], json!(format!("/api/image/{rid}/4")));
                with_feedback += 1;
            }
            "test" => {
                assert_eq!(raw, b"{}");
                without += 1;
            }
            other => panic!("phase {other}"),
        }
    }
}

#[tokio::test]
async fn protocol_has_50_feedback_trials_then_100_blind_ones() {
    let sessions = tempfile::tempdir().unwrap();
    let app = app(sessions.path());
    let id = new_session(&app, 1).await;

    let (_, v0) = call_json(&app, "GET", &format!("/api/session/{id}/trial"), None).await;
    assert_eq!(v0["trial_index"], 0);
    assert_eq!(v0["phase"], "training");
    let (_, again) = call_json(&app, "GET", &format!("/api/session/{id}/trial"), None).await;
    assert_eq!(v0, again);

    let (fb, blind) = run_session(&app, &id, |_, t| t).await;
    assert_eq!((fb, blind), (N_TRAINING, N_TEST));

    let (s, _) = call_json(&app, "GET", &format!("/api/session/{id}/trial"), None).await;
    assert_eq!(s, StatusCode::GONE);
    let (s, b) = call_json(&app, "POST", &format!("/api/session/{id}/response"), Some(json!({"prediction": "fall"}))).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(b["error"], "NoPendingTrial");

    let (s, r) = call_json(&app, "GET", &format!("/api/session/{id}/results"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(r["accuracy"], 1.0);
    assert_eq!(r["accuracy_ci"], 0.0);

    let stored: Value = serde_json::from_slice(&std::fs::read(sessions.path().join(format!("{id}.json"))).unwrap()).unwrap();
    let responses = stored["responses"].as_array().unwrap();
    assert_eq!(responses.len(), 150);
    assert!(responses[..50].iter().all(|r| r["phase"] == "training"));
    assert!(responses[50..].iter().all(|r| r["phase"] == "test"));
    assert_eq!(stored["state"], "complete");
}

#[tokio::test]
async fn test_phase_replies_carry_no_outcome_information() {
    let sessions = tempfile::tempdir().unwrap();
    let app = app(sessions.path());
    let id = new_session(&app, 2).await;
    for _ in 0..N_TRAINING {
        call(&app, "POST", &format!("/api/session/{id}/response"), Some(json!({"prediction": "stay"}))).await;
    }
    let (_, view) = call_json(&app, "GET", &format!("/api/session/{id}/trial"), None).await;
    assert_eq!(view["phase"], "test");
    assert_eq!(view["trial_index"], 50);
    let text = view.to_string();
    for leak in ["correct", "fell", "outcome", "/4\""] {
        assert!(!text.contains(leak), "{text}");
    }
}

#[tokio::test]
async fn same_seed_gives_same_plan() {
    let sessions = tempfile::tempdir().unwrap();
    let app = app(sessions.path());
    let (a, b) = (new_session(&app, 77).await, new_session(&app, 77).await);
    assert_ne!(a, b);
    let read = |id: &str| -> Value {
        serde_json::from_slice(&std::fs::read(sessions.path().join(format!("{id}.json"))).unwrap()).unwrap()
    };
    let (sa, sb) = (read(&a), read(&b));
    assert_eq!(sa["training_plan"], sb["training_plan"]);
    assert_eq!(sa["test_plan"], sb["test_plan"]);
    assert_eq!(sa["seed"], 77);
    let plan: Vec<&Value> = sa["training_plan"].as_array().unwrap().iter().chain(sa["test_plan"].as_array().unwrap()).collect();
    let mut ids: Vec<&str> = plan.iter().map(|v| v.as_str().unwrap()).collect();
    ids.sort();
    ids.dedup();
    assert_eq!(ids.len(), 150);
}

#[tokio::test]
async fn error_statuses() {
    let sessions = tempfile::tempdir().unwrap();
    let app = app(sessions.path());
    let (s, b) = call_json(&app, "GET", "/api/session/nope/trial", None).await;
    assert_eq!((s, b["error"].as_str()), (StatusCode::NOT_FOUND, Some("UnknownSession")));
    let (s, _) = call_json(&app, "GET", "/api/aggregate", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    let id = new_session(&app, 3).await;
    let url = format!("/api/session/{id}/response");
    for bad in [json!({"prediction": "maybe"}), json!({"prediction": 1}), json!({})] {
        let (s, b) = call_json(&app, "POST", &url, Some(bad)).await;
        assert_eq!((s, b["error"].as_str()), (StatusCode::BAD_REQUEST, Some("BadPrediction")));
    }
    let (s, _) = call_json(&app, "POST", &url, Some(json!({"prediction": "fall", "trial_index": 0}))).await;
    assert_eq!(s, StatusCode::OK);
    let (s, b) = call_json(&app, "POST", &url, Some(json!({"prediction": "fall", "trial_index": 0}))).await;
    assert_eq!((s, b["error"].as_str()), (StatusCode::CONFLICT, Some("NoPendingTrial")));
    let (_, v) = call_json(&app, "GET", &format!("/api/session/{id}/trial"), None).await;
    assert_eq!(v["trial_index"], 1);

    let (s, b) = call_json(&app, "GET", &format!("/api/session/{id}/results"), None).await;
    assert_eq!((s, b["error"].as_str()), (StatusCode::CONFLICT, Some("SessionIncomplete")));

    let (s, _) = call(&app, "POST", "/api/session", Some(json!({"seed": 1}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn small_dataset_is_refused() {
    let f = fixture();
    let sessions = tempfile::tempdir().unwrap();
    let conf = model_confidences(f.small.path(), &MiniPhysNet::<f32>::zeros(NetConfig { image_size: 16, shared_heads: false }).unwrap()).unwrap();
    let svc = TrialService::open(f.small.path(), sessions.path(), &conf).unwrap();
    assert_eq!(svc.test_record_count(), 96);
    let app = router(Arc::new(svc), None);
    let (s, b) = call_json(&app, "POST", "/api/session", Some(json!({"subject_label": "x"}))).await;
    assert_eq!((s, b["error"].as_str()), (StatusCode::CONFLICT, Some("InsufficientDataset")));
}

#[tokio::test]
async fn results_match_offline_metrics() {
    let f = fixture();
    let sessions = tempfile::tempdir().unwrap();
    let app = app(sessions.path());
    let id = new_session(&app, 4).await;
    // Deterministic but imperfect subject.
    run_session(&app, &id, |rid, t| if rid.len() % 2 == 0 { t } else { rid.ends_with(['1', '3', '5']) }).await;
    let (s, r) = call_json(&app, "GET", &format!("/api/session/{id}/results"), None).await;
    assert_eq!(s, StatusCode::OK);

    let trials = r["trials"].as_array().unwrap();
    assert_eq!(trials.len(), 100);
    let ids: Vec<&str> = trials.iter().map(|t| t["record_id"].as_str().unwrap()).collect();
    let human: Vec<bool> = trials.iter().map(|t| t["predicted_fall"].as_bool().unwrap()).collect();
    let fell: Vec<bool> = ids.iter().map(|i| f.fell[*i]).collect();
    let conf: Vec<f64> = ids.iter().map(|i| f.confidences[*i]).collect();

    let acc = human.iter().zip(&fell).filter(|(a, b)| a == b).count() as f64 / 100.0;
    let model_acc = conf.iter().zip(&fell).filter(|(c, y)| (**c > 0.5) == **y).count() as f64 / 100.0;
    let near = |v: &Value, want: f64| assert!((v.as_f64().unwrap() - want).abs() <= 1e-12, "{v} vs {want}");
    near(&r["accuracy"], acc);
    near(&r["accuracy_ci"], binomial_ci(acc, 100));
    near(&r["model_accuracy"], model_acc);
    let h: Vec<f64> = human.iter().map(|&b| b as u8 as f64).collect();
    near(&r["pearson"], pearson(&h, &conf).unwrap());
    let roc = roc_curve(&conf, &fell).unwrap();
    near(&r["model_roc"]["auc"], roc.auc);
    assert_eq!(r["model_roc"]["points"].as_array().unwrap().len(), roc.points.len());
    for size in r["per_size"].as_array().unwrap() {
        let n = size["n_blocks"].as_u64().unwrap() as usize;
        let idx: Vec<usize> = (0..100).filter(|&k| trials[k]["n_blocks"] == n).collect();
        let a = idx.iter().filter(|&&k| human[k] == fell[k]).count() as f64 / idx.len() as f64;
        near(&size["accuracy"], a);
        near(&size["accuracy_ci"], binomial_ci(a, idx.len()));
    }
    assert_eq!(r["per_size"].as_array().unwrap().len(), 3);
}

#[tokio::test]
async fn always_fall_on_a_balanced_plan() {
    let sessions = tempfile::tempdir().unwrap();
    let app = app(sessions.path());
    let id = new_session(&app, 5).await;
    run_session(&app, &id, |_, _| true).await;
    let (_, r) = call_json(&app, "GET", &format!("/api/session/{id}/results"), None).await;
    let acc = r["accuracy"].as_f64().unwrap();
    assert!((r["accuracy_ci"].as_f64().unwrap() - binomial_ci(acc, 100)).abs() < 1e-15);
    // Constant answers have no correlation.
    assert!(r["pearson"].is_null());
}

#[tokio::test]
async fn aggregate_votes() {
    let f = fixture();
    let sessions = tempfile::tempdir().unwrap();
    let app = app(sessions.path());
    let a = new_session(&app, 8).await;
    run_session(&app, &a, |_, t| t).await;
    let (s, one) = call_json(&app, "GET", "/api/aggregate", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(one["n_sessions"], 1);
    assert!(one["records"].as_array().unwrap().iter().all(|r| r["fall_fraction"] == 0.0 || r["fall_fraction"] == 1.0));

    let b = new_session(&app, 8).await;
    run_session(&app, &b, |_, t| !t).await;
    let (_, two) = call_json(&app, "GET", "/api/aggregate", None).await;
    let recs = two["records"].as_array().unwrap();
    assert_eq!(recs.len(), 100);
    assert!(recs.iter().all(|r| r["fall_fraction"] == 0.5));
    assert!(two["pearson"].is_null());

    let c = new_session(&app, 9).await;
    run_session(&app, &c, |rid, _| rid.ends_with(['0', '2', '4', '6'])).await;
    let (_, three) = call_json(&app, "GET", "/api/aggregate", None).await;
    let recs = three["records"].as_array().unwrap();
    let frac: Vec<f64> = recs.iter().map(|r| r["fall_fraction"].as_f64().unwrap()).collect();
    let conf: Vec<f64> = recs.iter().map(|r| f.confidences[r["record_id"].as_str().unwrap()]).collect();
    assert_eq!(three["pearson"].as_f64().unwrap(), pearson(&frac, &conf).unwrap());
}

#[tokio::test]
async fn restart_keeps_every_answer() {
    let sessions = tempfile::tempdir().unwrap();
    let id = {
        let app = app(sessions.path());
        let id = new_session(&app, 6).await;
        for _ in 0..60 {
            let (s, _) = call(&app, "POST", &format!("/api/session/{id}/response"), Some(json!({"prediction": "stay"}))).await;
            assert_eq!(s, StatusCode::OK);
        }
        id
    };
    let app = app(sessions.path());
    let (s, v) = call_json(&app, "GET", &format!("/api/session/{id}/trial"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["trial_index"], 60);
    assert_eq!(v["phase"], "test");
    let (fb, blind) = run_session(&app, &id, |_, t| t).await;
    assert_eq!((fb, blind), (0, 90));
    let (s, _) = call_json(&app, "GET", &format!("/api/session/{id}/results"), None).await;
    assert_eq!(s, StatusCode::OK);
}

#[tokio::test]
async fn images_and_index() {
    let f = fixture();
    let sessions = tempfile::tempdir().unwrap();
    let app = app(sessions.path());
    let id = f.confidences.keys().min().unwrap();
    for frame in ["0", "4"] {
        let req = Request::get(format!("/api/image/{id}/{frame}")).body(Body::empty()).unwrap();
        let resp = app.clone().oneshot(req).await.unwrap();
        assert_eq!(resp.status(), StatusCode::OK);
        assert_eq!(resp.headers()["content-type"], "image/png");
        let bytes = resp.into_body().collect().await.unwrap().to_bytes();
        assert_eq!(&bytes[1..4], b"PNG");
    }
    let (s, _) = call(&app, "GET", &format!("/api/image/{id}/2"), None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(&app, "GET", "/api/image/nope/0", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, body) = call(&app, "GET", "/", None).await;
    assert_eq!(s, StatusCode::OK);
    assert!(String::from_utf8(body).unwrap().contains("/api/session"));
}
