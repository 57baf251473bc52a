use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use sentropy_core::dataset::load_corpus;
use sentropy_core::genclient::SimulatedBackend;
use sentropy_core::pipeline::{build_entailer, ingest, run_cluster, run_generate, run_metrics, run_score};
use sentropy_core::run::{RunDir, Stage};
use sentropy_core::scoring::{Definition, Method};
use sentropy_core::{CorrectnessRecord, PipelineConfig};
use sentropy_review::server::Clock;
use sentropy_review::{router, AppState, ReviewBundle};

fn toy_corpus() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/toy_corpus.jsonl")
}

fn scored_run(dir: &Path) -> RunDir {
    let mut config = PipelineConfig {
        created_at: Some("2024-01-01T00:00:00Z".into()),
        ..Default::default()
    };
    config.run.bootstrap_resamples = 100;
    config.run.seed = 11;
    let questions = load_corpus(&toy_corpus()).unwrap();
    let backend = SimulatedBackend::new(&questions, 11);
    let s = ingest(&toy_corpus(), dir, &config, None, false).unwrap();
    let mut run = RunDir::open_locked(&s.run_path).unwrap();
    let e = build_entailer(&run, None).unwrap();
    run_generate(&mut run, &backend, false).unwrap();
    run_cluster(&mut run, &e, false).unwrap();
    run_metrics(&mut run, false).unwrap();
    run_score(&mut run, &e, false).unwrap();
    run
}

fn tokens() -> HashMap<String, String> {
    [("tok-a", "alice"), ("tok-b", "bob"), ("tok-c", "carol")]
        .into_iter()
        .map(|(t, r)| (t.to_string(), r.to_string()))
        .collect()
}

struct Fixture {
    _dir: tempfile::TempDir,
    run: RunDir,
    state: Arc<AppState>,
    app: Router,
}

fn fixture(review_size: usize) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let run = scored_run(dir.path());
    let clock: Clock = Arc::new(|| "2024-02-02T10:00:00Z".to_string());
    let state = Arc::new(
        AppState::from_run(&run, review_size, 5, tokens())
            .unwrap()
            .with_clock(clock),
    );
    let app = router(Arc::clone(&state), None);
    Fixture {
        _dir: dir,
        run,
        state,
        app,
    }
}

async fn call(app: &Router, method: &str, uri: &str, token: Option<&str>, body: Option<Value>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(t) = token {
        req = req.header("authorization", format!("Bearer {t}"));
    }
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap()
    };
    (status, value)
}

fn submission(id: &str, k: usize, lp: bool, eq: bool, consistent: bool) -> Value {
    let clusters: Vec<Value> = (0..k)
        .map(|_| json!({ "consistent_meaning": consistent, "distinct_from_others": true, "equals_true_answer": eq }))
        .collect();
    json!({
        "question_id": id,
        "question_quality": "acceptable",
        "lp_same_as_true": lp,
        "lp_correct_but_different": false,
        "clusters": clusters,
    })
}

async fn bundle(app: &Router, id: &str) -> ReviewBundle {
    let (status, v) = call(app, "GET", &format!("/api/bundles/{id}"), Some("tok-a"), None).await;
    assert_eq!(status, StatusCode::OK);
    serde_json::from_value(v).unwrap()
}

#[tokio::test]
async fn requests_without_a_valid_token_are_rejected() {
    let f = fixture(5);
    for uri in ["/api/review-set", "/api/annotations", "/api/metrics/expert"] {
        assert_eq!(call(&f.app, "GET", uri, None, None).await.0, StatusCode::UNAUTHORIZED);
        assert_eq!(
            call(&f.app, "GET", uri, Some("nope"), None).await.0,
            StatusCode::UNAUTHORIZED
        );
    }
}

#[tokio::test]
async fn review_set_and_bundles() {
    let f = fixture(5);
    let (status, v) = call(&f.app, "GET", "/api/review-set", Some("tok-a"), None).await;
    assert_eq!(status, StatusCode::OK);
    let ids: Vec<String> = serde_json::from_value(v["question_ids"].clone()).unwrap();
    assert_eq!(ids.len(), 5);
    assert_eq!(v["completed"], json!([]));
    assert_eq!(&ids, &f.state.review_set().question_ids);

    let raw = call(&f.app, "GET", &format!("/api/bundles/{}", ids[0]), Some("tok-b"), None)
        .await
        .1;
    let text = raw.to_string();
    for hidden in ["semantic_entropy", "\"correct\"", "tie_broken"] {
        assert!(!text.contains(hidden), "bundle leaks {hidden}");
    }
    let b: ReviewBundle = serde_json::from_value(raw).unwrap();
    assert_eq!(b.cluster_count, b.clusters.len());
    let members: usize = b.clusters.iter().map(|c| c.members.len()).sum();
    assert_eq!(members, 10);

    let outside = f
        .run
        .eligible()
        .map(|q| q.id.clone())
        .find(|id| !ids.contains(id))
        .unwrap();
    let (status, _) = call(&f.app, "GET", &format!("/api/bundles/{outside}"), Some("tok-a"), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    // The set is persisted and reused even when a different size is asked for.
    let again = AppState::from_run(&f.run, 3, 99, tokens()).unwrap();
    assert_eq!(again.review_set().question_ids, ids);
}

#[tokio::test]
async fn invalid_submissions_list_their_fields() {
    let f = fixture(5);
    let id = f.state.review_set().question_ids[0].clone();
    let k = bundle(&f.app, &id).await.cluster_count;

    let mut s = submission(&id, k + 1, true, false, true);
    s["lp_correct_but_different"] = json!(true);
    let (status, v) = call(&f.app, "POST", "/api/annotations", Some("tok-a"), Some(s)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let fields: Vec<&str> = v["fields"]
        .as_array()
        .unwrap()
        .iter()
        .map(|f| f["field"].as_str().unwrap())
        .collect();
    assert_eq!(fields, ["lp_correct_but_different", "clusters"]);

    let mut s = submission(&id, k, true, false, true);
    s["reviewer_id"] = json!("mallory");
    let (status, v) = call(&f.app, "POST", "/api/annotations", Some("tok-a"), Some(s)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["fields"][0]["field"], "body");

    let outside = f
        .run
        .eligible()
        .map(|q| q.id.clone())
        .find(|q| !f.state.review_set().question_ids.contains(q))
        .unwrap();
    let (status, v) = call(
        &f.app,
        "POST",
        "/api/annotations",
        Some("tok-a"),
        Some(submission(&outside, 1, true, true, true)),
    )
    .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["fields"][0]["field"], "question_id");
    assert!(f.state.store().history().is_empty());
}

#[tokio::test]
async fn three_reviewers_and_resubmission() {
    let f = fixture(5);
    let id = f.state.review_set().question_ids[2].clone();
    let k = bundle(&f.app, &id).await.cluster_count;
    for tok in ["tok-a", "tok-b", "tok-c"] {
        let (status, v) = call(
            &f.app,
            "POST",
            "/api/annotations",
            Some(tok),
            Some(submission(&id, k, true, true, true)),
        )
        .await;
        assert_eq!(status, StatusCode::CREATED);
        assert_eq!(v["revision"], 1);
        assert_eq!(v["submitted_at"], "2024-02-02T10:00:00Z");
    }
    let uri = format!("/api/annotations?question_id={id}&all=true");
    let (_, v) = call(&f.app, "GET", &uri, Some("tok-a"), None).await;
    let reviewers: Vec<&str> = v
        .as_array()
        .unwrap()
        .iter()
        .map(|a| a["reviewer_id"].as_str().unwrap())
        .collect();
    assert_eq!(reviewers, ["alice", "bob", "carol"]);

    let (status, v) = call(
        &f.app,
        "POST",
        "/api/annotations",
        Some("tok-b"),
        Some(submission(&id, k, false, true, true)),
    )
    .await;
    assert_eq!((status, v["revision"].clone()), (StatusCode::CREATED, json!(2)));
    let (_, mine) = call(&f.app, "GET", "/api/annotations", Some("tok-b"), None).await;
    assert_eq!(mine.as_array().unwrap().len(), 1);
    assert_eq!(mine[0]["lp_same_as_true"], false);
    let (_, hist) = call(
        &f.app,
        "GET",
        "/api/annotations?history=true&all=true",
        Some("tok-b"),
        None,
    )
    .await;
    assert_eq!(hist.as_array().unwrap().len(), 4);

    let (_, rs) = call(&f.app, "GET", "/api/review-set", Some("tok-c"), None).await;
    assert_eq!(rs["completed"], json!([id]));

    // The log on disk survives a restart.
    let reopened = AppState::from_run(&f.run, 5, 5, tokens()).unwrap();
    assert_eq!(reopened.store().history(), f.state.store().history());
}

fn primary(records: &[CorrectnessRecord], id: &str, method: Method) -> Option<bool> {
    records
        .iter()
        .find(|r| r.question_id == id && r.method == method && r.definition == Definition::Primary)
        .map(|r| r.correct)
}

#[tokio::test]
async fn scripted_round_trip_matches_hand_counts() {
    let f = fixture(6);
    let ids = f.state.review_set().question_ids.clone();
    // Truth table for the first five questions; the sixth stays unannotated.
    let script = [
        (true, true, true),
        (false, true, false),
        (true, false, true),
        (true, true, false),
        (false, false, true),
    ];
    let mut bundles = BTreeMap::new();
    for (id, &(lp, eq, consistent)) in ids.iter().zip(&script) {
        let b = bundle(&f.app, id).await;
        let (status, _) = call(
            &f.app,
            "POST",
            "/api/annotations",
            Some("tok-a"),
            Some(submission(id, b.cluster_count, lp, eq, consistent)),
        )
        .await;
        assert_eq!(status, StatusCode::CREATED);
        bundles.insert(id.clone(), b);
    }

    let records: Vec<CorrectnessRecord> = f.run.read_stage(Stage::Score).unwrap();
    // K -> (n, lp expert, lc expert, lp llm, lc llm)
    let mut expected: BTreeMap<usize, [usize; 5]> = BTreeMap::new();
    for (id, &(lp, eq, _)) in ids.iter().zip(&script) {
        let b = &bundles[id];
        let sizes: Vec<usize> = b.clusters.iter().map(|c| c.members.len()).collect();
        let max = *sizes.iter().max().unwrap();
        let unique = sizes.iter().filter(|&&s| s == max).count() == 1;
        let e = expected.entry(b.cluster_count).or_default();
        e[0] += 1;
        e[1] += usize::from(lp);
        e[2] += usize::from(eq && unique);
        e[3] += usize::from(primary(&records, id, Method::LowestPerplexity).unwrap());
        e[4] += usize::from(primary(&records, id, Method::LargestCluster).unwrap());
    }

    let (status, v) = call(&f.app, "GET", "/api/metrics/expert", Some("tok-c"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["annotated"], 5);
    assert_eq!(v["unannotated"], 1);
    assert_eq!(v["clustering_successes"], 3);
    assert_eq!(v["clustering_success_rate"], json!(3.0 / 5.0));
    let rows = v["by_cluster_count"].as_array().unwrap();
    assert_eq!(rows.len(), expected.len());
    for (row, (k, e)) in rows.iter().zip(&expected) {
        let n = e[0] as f64;
        assert_eq!(row["cluster_count"], json!(k));
        assert_eq!(row["n"], json!(e[0]));
        assert_eq!(row["lp_expert"], json!(e[1] as f64 / n), "K={k}");
        assert_eq!(row["lc_expert"], json!(e[2] as f64 / n), "K={k}");
        assert_eq!(row["lp_llm"], json!(e[3] as f64 / n), "K={k}");
        assert_eq!(row["lc_llm"], json!(e[4] as f64 / n), "K={k}");
    }
    assert_eq!(v["overall"]["lp_expert"], json!(3.0 / 5.0));

    // Recomputation is a pure function of the log.
    let (_, again) = call(&f.app, "GET", "/api/metrics/expert", Some("tok-a"), None).await;
    assert_eq!(again, v);
}
