//! HTTP surface of the review service.
//!
//! | Method | Path                  | Body / query                                 |
//! |--------|-----------------------|----------------------------------------------|
//! | GET    | `/api/review-set`     | ids plus the caller's completed ids          |
//! | GET    | `/api/bundles/{id}`   | one [`ReviewBundle`]                         |
//! | POST   | `/api/annotations`    | [`AnnotationSubmission`]; 201 with revision  |
//! | GET    | `/api/annotations`    | `question_id`, `all`, `history`              |
//! | GET    | `/api/metrics/expert` | [`ExpertReport`]                             |
//!
//! Every `/api` route needs `Authorization: Bearer <token>`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::services::ServeDir;

use sentropy_core::eval::EvalConfig;
use sentropy_core::run::{RunDir, Stage};

use crate::annotation::{validate, Annotation, AnnotationStore, AnnotationSubmission, ANNOTATIONS_FILE};
use crate::bundle::{build_bundles, load_or_create_review_set, ReviewBundle, ReviewSet};
use crate::error::{FieldError, Result, ReviewError};
use crate::expert::{expert_metrics, inputs_from_run, ExpertInput, ExpertReport};

/// Source of `submitted_at` values.
pub type Clock = Arc<dyn Fn() -> String + Send + Sync>;

pub fn system_clock() -> Clock {
    Arc::new(|| chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true))
}

pub struct AppState {
    bundles: BTreeMap<String, ReviewBundle>,
    review_set: ReviewSet,
    in_set: HashSet<String>,
    store: AnnotationStore,
    tokens: HashMap<String, String>,
    inputs: Vec<ExpertInput>,
    eval: EvalConfig,
    clock: Clock,
}

impl AppState {
    /// Loads everything the service needs from a scored run.
    pub fn from_run(run: &RunDir, review_size: usize, seed: u64, tokens: HashMap<String, String>) -> Result<Self> {
        run.require(Stage::Score, "review-serve")?;
        let bundles = build_bundles(run)?;
        let review_set = load_or_create_review_set(run, review_size, seed)?;
        let store = AnnotationStore::open(run.path().join(ANNOTATIONS_FILE))?;
        let inputs = inputs_from_run(run)?;
        let eval = sentropy_core::pipeline::eval_config(run);
        Ok(Self::new(bundles, review_set, store, tokens, inputs, eval))
    }

    pub fn new(
        bundles: BTreeMap<String, ReviewBundle>,
        review_set: ReviewSet,
        store: AnnotationStore,
        tokens: HashMap<String, String>,
        inputs: Vec<ExpertInput>,
        eval: EvalConfig,
    ) -> Self {
        let in_set = review_set.question_ids.iter().cloned().collect();
        Self {
            bundles,
            review_set,
            in_set,
            store,
            tokens,
            inputs,
            eval,
            clock: system_clock(),
        }
    }

    pub fn with_clock(mut self, clock: Clock) -> Self {
        self.clock = clock;
        self
    }

    pub fn review_set(&self) -> &ReviewSet {
        &self.review_set
    }

    pub fn store(&self) -> &AnnotationStore {
        &self.store
    }

    fn reviewer(&self, headers: &HeaderMap) -> Result<String> {
        let token = headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .map(str::trim)
            .ok_or(ReviewError::Unauthorized)?;
        self.tokens.get(token).cloned().ok_or(ReviewError::Unauthorized)
    }

    fn bundle(&self, id: &str) -> Result<&ReviewBundle> {
        if !self.in_set.contains(id) {
            return Err(ReviewError::NotFound(format!(
                "question `{id}` is not in the review set"
            )));
        }
        self.bundles
            .get(id)
            .ok_or_else(|| ReviewError::NotFound(format!("no bundle for `{id}`")))
    }

    pub fn expert_report(&self) -> Result<ExpertReport> {
        expert_metrics(&self.inputs, &self.review_set, &self.store.current(), &self.eval)
    }
}

impl IntoResponse for ReviewError {
    fn into_response(self) -> Response {
        let (status, body) = match &self {
            ReviewError::Unauthorized => (StatusCode::UNAUTHORIZED, json!({ "error": self.to_string() })),
            ReviewError::NotFound(_) => (StatusCode::NOT_FOUND, json!({ "error": self.to_string() })),
            ReviewError::Validation(fields) => (
                StatusCode::UNPROCESSABLE_ENTITY,
                json!({ "error": "validation failed", "fields": fields }),
            ),
            ReviewError::TooLarge { .. } => (StatusCode::BAD_REQUEST, json!({ "error": self.to_string() })),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, json!({ "error": self.to_string() })),
        };
        (status, Json(body)).into_response()
    }
}

type Shared = Arc<AppState>;

#[derive(Debug, Serialize, Deserialize)]
pub struct ReviewSetView {
    pub seed: u64,
    pub size: usize,
    pub question_ids: Vec<String>,
    /// Questions the caller has annotated at least once.
    pub completed: Vec<String>,
}

async fn review_set(State(st): State<Shared>, headers: HeaderMap) -> Result<Json<ReviewSetView>> {
    let me = st.reviewer(&headers)?;
    let done: HashSet<String> = st
        .store
        .current()
        .into_iter()
        .filter(|a| a.reviewer_id == me)
        .map(|a| a.question_id)
        .collect();
    let rs = &st.review_set;
    Ok(Json(ReviewSetView {
        seed: rs.seed,
        size: rs.size,
        completed: rs
            .question_ids
            .iter()
            .filter(|id| done.contains(*id))
            .cloned()
            .collect(),
        question_ids: rs.question_ids.clone(),
    }))
}

async fn bundle(
    State(st): State<Shared>,
    headers: HeaderMap,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<ReviewBundle>> {
    st.reviewer(&headers)?;
    Ok(Json(st.bundle(&id)?.clone()))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SubmitAck {
    pub question_id: String,
    pub reviewer_id: String,
    pub revision: usize,
    pub submitted_at: String,
}

async fn submit(State(st): State<Shared>, headers: HeaderMap, body: Bytes) -> Result<(StatusCode, Json<SubmitAck>)> {
    let me = st.reviewer(&headers)?;
    let submission: AnnotationSubmission = serde_json::from_slice(&body)
        .map_err(|e| ReviewError::Validation(vec![FieldError::new("body", e.to_string())]))?;
    let bundle = st.bundle(&submission.question_id).map_err(|e| match e {
        ReviewError::NotFound(m) => ReviewError::Validation(vec![FieldError::new("question_id", m)]),
        other => other,
    })?;
    validate(&submission, bundle)?;
    let annotation = Annotation::from_submission(submission, &me, (st.clock)());
    let ack = SubmitAck {
        question_id: annotation.question_id.clone(),
        reviewer_id: me,
        revision: 0,
        submitted_at: annotation.submitted_at.clone(),
    };
    // The store does blocking file IO under its own lock.
    let st2 = Arc::clone(&st);
    let revision = tokio::task::spawn_blocking(move || st2.store.append(annotation))
        .await
        .map_err(|e| ReviewError::Config(format!("annotation writer failed: {e}")))??;
    tracing::info!(question = %ack.question_id, reviewer = %ack.reviewer_id, revision, "annotation accepted");
    Ok((StatusCode::CREATED, Json(SubmitAck { revision, ..ack })))
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
pub struct AnnotationQuery {
    pub question_id: Option<String>,
    /// Include other reviewers' annotations.
    pub all: bool,
    /// Every accepted revision instead of the latest per reviewer.
    pub history: bool,
}

async fn list_annotations(
    State(st): State<Shared>,
    headers: HeaderMap,
    Query(q): Query<AnnotationQuery>,
) -> Result<Json<Vec<Annotation>>> {
    let me = st.reviewer(&headers)?;
    let items = if q.history {
        st.store.history()
    } else {
        st.store.current()
    };
    let items = items
        .into_iter()
        .filter(|a| q.all || a.reviewer_id == me)
        .filter(|a| q.question_id.as_ref().is_none_or(|id| &a.question_id == id))
        .collect();
    Ok(Json(items))
}

async fn expert(State(st): State<Shared>, headers: HeaderMap) -> Result<Json<ExpertReport>> {
    st.reviewer(&headers)?;
    Ok(Json(st.expert_report()?))
}

pub fn router(state: Arc<AppState>, ui_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/api/review-set", get(review_set))
        .route("/api/bundles/{id}", get(bundle))
        .route("/api/annotations", get(list_annotations).post(submit))
        .route("/api/metrics/expert", get(expert))
        .with_state(state);
    match ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Serves until ctrl-c.
pub async fn serve(listener: tokio::net::TcpListener, app: Router) -> std::io::Result<()> {
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
