//! HTTP/JSON API over the session engine.
//!
//! | method | path | body | success |
//! |--------|------|------|---------|
//! | GET  | `/healthz` | | 200 |
//! | POST | `/sessions` | `{context, seed?, problem?, suggestions_enabled?, roster_size?}` | 201 session view |
//! | GET  | `/sessions/{id}` | | 200 session view |
//! | POST | `/sessions/{id}/turns` | `{text, addressed?, max_respondents?}` | 200 new turns and affect |
//! | GET  | `/sessions/{id}/suggestion` | | 200 suggestion |
//! | GET  | `/sessions/{id}/transcript` | | 200 transcript and affect |
//! | POST | `/sessions/{id}/annotations` | `{turn_id, labels}` | 200 verdict |
//! | POST | `/sessions/{id}/reflection` | `{self_reflection}` | 200 report |
//! | POST | `/sessions/{id}/reflection/followups` | `{question}` | 200 answer |
//! | GET  | `/sessions/{id}/metrics` | | 200 metrics |
//!
//! Errors are `{"error": kind, "message": text}` with 400 for unparsable
//! bodies, 403 when suggestions are off, 404 for unknown sessions, turns or
//! students, 409 for suggestions that break the output contract, 422 for
//! validation and precondition failures, 502 for provider failures.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use rehearsal_core::engine::{
    plan_annotation, plan_followup, plan_reflection, plan_teacher_turn, start_session, DegradingGenerator, EngineError,
    ModelGenerator, ResponseGenerator, ScriptedGenerator, SessionConfig, SessionEvent, SessionState, TeacherTurn,
};
use rehearsal_core::metrics::{CountTable, SessionMetrics};
use rehearsal_core::pedagogy::{
    annotation_accuracy, suggest, AnnotationAccuracy, CodeLabel, DiscourseClassifier, FeedbackGenerator,
    ForbiddenTerms, ModelClassifier, ModelFeedback, ModelSuggester, PedagogyError, ScriptedClassifier,
    ScriptedFeedback, ScriptedSuggester, SuggestionGenerator,
};
use rehearsal_core::provider::ModelProvider;
use rehearsal_core::retrieval::{prepare_context, ContextDistiller, ModelDistiller, ProfileIndex, ScriptedDistiller};
use rehearsal_core::{
    ArgumentationLevel, ClassroomContext, DialogueTurn, EmojiState, Engagement, MathLevel, ParticipationPattern,
};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::Mutex;

use crate::config::Backend;
use crate::store::{Store, StoreError};

/// The set of backends a request runs against.
pub struct Kit<'a> {
    pub classifier: &'a dyn DiscourseClassifier,
    pub generator: &'a dyn ResponseGenerator,
    pub suggester: &'a dyn SuggestionGenerator,
    pub feedback: &'a dyn FeedbackGenerator,
    pub distiller: &'a dyn ContextDistiller,
}

pub struct Backends {
    kind: Backend,
    provider: Option<Arc<dyn ModelProvider>>,
}

impl Backends {
    pub fn scripted() -> Self {
        Backends { kind: Backend::Scripted, provider: None }
    }

    pub fn model(provider: Arc<dyn ModelProvider>) -> Self {
        Backends { kind: Backend::Model, provider: Some(provider) }
    }

    pub fn kind(&self) -> Backend {
        self.kind
    }

    pub fn with<R>(&self, f: impl FnOnce(&Kit<'_>) -> R) -> R {
        match &self.provider {
            Some(p) if self.kind == Backend::Model => {
                let p: &dyn ModelProvider = p.as_ref();
                let classifier = ModelClassifier::new(p);
                let generator = DegradingGenerator::new(ModelGenerator::new(p));
                let suggester = ModelSuggester::new(p);
                let feedback = ModelFeedback::new(p);
                let distiller = ModelDistiller::new(p);
                f(&Kit {
                    classifier: &classifier,
                    generator: &generator,
                    suggester: &suggester,
                    feedback: &feedback,
                    distiller: &distiller,
                })
            }
            _ => f(&Kit {
                classifier: &ScriptedClassifier,
                generator: &ScriptedGenerator,
                suggester: &ScriptedSuggester,
                feedback: &ScriptedFeedback,
                distiller: &ScriptedDistiller,
            }),
        }
    }
}

type SessionSlot = Arc<Mutex<SessionState>>;

pub struct AppState {
    index: ProfileIndex,
    backends: Backends,
    forbidden: ForbiddenTerms,
    store: Store,
    sessions: RwLock<HashMap<String, SessionSlot>>,
}

impl AppState {
    /// Builds the state and reloads every persisted session.
    pub fn new(index: ProfileIndex, backends: Backends, forbidden: ForbiddenTerms, store: Store) -> Result<Self, StoreError> {
        let mut sessions = HashMap::new();
        for id in store.session_ids()? {
            let r = store.recover(&id)?;
            if let Some(problem) = &r.repaired {
                tracing::warn!(session = %id, %problem, "event log repaired on recovery");
            }
            if r.dropped_events > 0 {
                tracing::warn!(session = %id, dropped = r.dropped_events, "discarded an uncommitted exchange");
            }
            sessions.insert(id, Arc::new(Mutex::new(r.state)));
        }
        tracing::info!(count = sessions.len(), "sessions loaded");
        Ok(AppState { index, backends, forbidden, store, sessions: RwLock::new(sessions) })
    }

    fn slot(&self, id: &str) -> Result<SessionSlot, ApiError> {
        self.sessions
            .read()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "UnknownSession", format!("no session {id:?}")))
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    kind: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, kind: &'static str, message: impl Into<String>) -> Self {
        ApiError { status, kind, message: message.into() }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if self.status.is_server_error() {
            tracing::error!(kind = self.kind, message = %self.message, "request failed");
        }
        (self.status, Json(json!({"error": self.kind, "message": self.message}))).into_response()
    }
}

impl From<PedagogyError> for ApiError {
    fn from(e: PedagogyError) -> Self {
        use PedagogyError::*;
        let (status, kind) = match &e {
            EmptyText => (StatusCode::UNPROCESSABLE_ENTITY, "EmptyText"),
            ClassifierFailure(_) => (StatusCode::BAD_GATEWAY, "ClassifierFailure"),
            GeneratorFailure(_) => (StatusCode::BAD_GATEWAY, "GeneratorFailure"),
            FormatViolation(_) => (StatusCode::CONFLICT, "FormatViolation"),
            WrongFramework { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "WrongFramework"),
            NoTeacherTurn => (StatusCode::UNPROCESSABLE_ENTITY, "NoTeacherTurn"),
            NoAnnotations => (StatusCode::UNPROCESSABLE_ENTITY, "NoAnnotations"),
            EmptyReflection => (StatusCode::UNPROCESSABLE_ENTITY, "EmptyReflection"),
            UnknownTurn(_) => (StatusCode::NOT_FOUND, "UnknownTurn"),
        };
        ApiError::new(status, kind, e.to_string())
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        let unprocessable = |kind| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, kind, e.to_string());
        match &e {
            EngineError::EmptyText => unprocessable("EmptyText"),
            EngineError::UnknownStudent(_) => ApiError::new(StatusCode::NOT_FOUND, "UnknownStudent", e.to_string()),
            EngineError::InvalidMaxRespondents => unprocessable("InvalidMaxRespondents"),
            EngineError::NoFeedback => unprocessable("NoFeedback"),
            EngineError::Validation(_) => unprocessable("ValidationError"),
            EngineError::Retrieval(_) => unprocessable("RetrievalError"),
            EngineError::Pedagogy(p) => p.clone().into(),
        }
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "StorageError", e.to_string())
    }
}

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| {
        let status = if e.is_data() { StatusCode::UNPROCESSABLE_ENTITY } else { StatusCode::BAD_REQUEST };
        ApiError::new(status, "InvalidBody", e.to_string())
    })
}

async fn blocking<R: Send + 'static>(f: impl FnOnce() -> R + Send + 'static) -> Result<R, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", e.to_string()))
}

/// Runs `f` with exclusive access to a session on a blocking thread.
async fn with_session<R: Send + 'static>(
    state: &Arc<AppState>,
    id: &str,
    f: impl FnOnce(&AppState, &mut SessionState) -> Result<R, ApiError> + Send + 'static,
) -> Result<R, ApiError> {
    let slot = state.slot(id)?;
    let mut guard = slot.lock_owned().await;
    let app = state.clone();
    blocking(move || f(&app, &mut guard)).await?
}

/// Persists then applies; a failed write leaves memory untouched.
fn commit(app: &AppState, session: &mut SessionState, events: &[SessionEvent]) -> Result<(), ApiError> {
    app.store.append(&session.session_id, events)?;
    for e in events {
        session.apply(e);
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub context: ClassroomContext,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub problem: Option<String>,
    #[serde(default)]
    pub suggestions_enabled: Option<bool>,
    #[serde(default)]
    pub roster_size: Option<usize>,
}

#[derive(Debug, Serialize)]
pub struct RosterEntry {
    pub profile_id: String,
    pub display_name: String,
    pub participation_pattern: ParticipationPattern,
    pub engagement: Engagement,
    pub math_level: MathLevel,
    pub argumentation_level: ArgumentationLevel,
    pub score: f64,
}

#[derive(Debug, Serialize)]
pub struct SessionView {
    pub session_id: String,
    pub seed: u64,
    pub grade_level: u8,
    pub math_topic: String,
    pub suggestions_enabled: bool,
    pub roster: Vec<RosterEntry>,
    pub affect: BTreeMap<String, EmojiState>,
    pub transcript: Vec<DialogueTurn>,
}

fn view(s: &SessionState) -> SessionView {
    SessionView {
        session_id: s.session_id.clone(),
        seed: s.seed,
        grade_level: s.context.grade_level(),
        math_topic: s.context.math_topic().to_string(),
        suggestions_enabled: s.config.suggestions_enabled,
        roster: s
            .roster
            .iter()
            .map(|m| RosterEntry {
                profile_id: m.profile.profile_id.clone(),
                display_name: m.profile.display_name.clone(),
                participation_pattern: m.profile.participation_pattern,
                engagement: m.profile.engagement,
                math_level: m.profile.math_level,
                argumentation_level: m.profile.argumentation_level,
                score: m.score,
            })
            .collect(),
        affect: s.affect.clone(),
        transcript: s.transcript.clone(),
    }
}

async fn healthz(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let sessions = state.sessions.read().unwrap().len();
    Json(json!({"status": "ok", "backend": state.backends.kind(), "profiles": state.index.len(), "sessions": sessions}))
}

async fn create_session(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Response, ApiError> {
    let req: CreateSession = parse_body(&body)?;
    let app = state.clone();
    let session = blocking(move || -> Result<SessionState, ApiError> {
        let id = uuid::Uuid::new_v4().simple().to_string();
        let seed = req.seed.unwrap_or_else(|| uuid::Uuid::new_v4().as_u64_pair().0);
        let config = SessionConfig {
            roster_size: req.roster_size.unwrap_or(SessionConfig::default().roster_size),
            opening_problem: req.problem,
            suggestions_enabled: req.suggestions_enabled.unwrap_or(true),
        };
        let ctx = app
            .backends
            .with(|kit| prepare_context(req.context, kit.distiller))
            .map_err(EngineError::from)?;
        let session = start_session(&app.index, ctx, config, seed, id)?;
        app.store.create(&session.meta())?;
        Ok(session)
    })
    .await??;
    let body = view(&session);
    tracing::info!(session = %session.session_id, seed = session.seed, "session created");
    state.sessions.write().unwrap().insert(session.session_id.clone(), Arc::new(Mutex::new(session)));
    Ok((StatusCode::CREATED, Json(body)).into_response())
}

async fn get_session(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<SessionView>, ApiError> {
    let slot = state.slot(&id)?;
    let s = slot.lock().await;
    Ok(Json(view(&s)))
}

#[derive(Debug, Serialize)]
pub struct TurnResult {
    pub turns: Vec<DialogueTurn>,
    pub affect: BTreeMap<String, EmojiState>,
    pub degraded: bool,
}

async fn post_turn(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<TurnResult>, ApiError> {
    let turn: TeacherTurn = parse_body(&body)?;
    let result = with_session(&state, &id, move |app, session| {
        let plan = app.backends.with(|kit| plan_teacher_turn(session, &turn, kit.generator, kit.classifier))?;
        commit(app, session, &plan.events)?;
        let turns = plan
            .events
            .iter()
            .filter_map(|e| match e {
                SessionEvent::TurnAppended { turn } => Some(turn.clone()),
                _ => None,
            })
            .collect();
        Ok(TurnResult { turns, affect: session.affect.clone(), degraded: plan.degraded })
    })
    .await?;
    Ok(Json(result))
}

async fn get_suggestion(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Json<rehearsal_core::Suggestion>, ApiError> {
    let s = with_session(&state, &id, |app, session| {
        if !session.config.suggestions_enabled {
            return Err(ApiError::new(StatusCode::FORBIDDEN, "SuggestionsDisabled", "suggestions are off for this session"));
        }
        Ok(app.backends.with(|kit| suggest(session, kit.classifier, kit.suggester, &app.forbidden))?)
    })
    .await?;
    Ok(Json(s))
}

#[derive(Debug, Serialize)]
pub struct TranscriptView {
    pub session_id: String,
    pub transcript: Vec<DialogueTurn>,
    pub affect: BTreeMap<String, EmojiState>,
}

async fn get_transcript(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Json<TranscriptView>, ApiError> {
    let slot = state.slot(&id)?;
    let s = slot.lock().await;
    Ok(Json(TranscriptView { session_id: s.session_id.clone(), transcript: s.transcript.clone(), affect: s.affect.clone() }))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationBody {
    turn_id: u64,
    labels: Vec<CodeLabel>,
}

async fn post_annotation(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Response, ApiError> {
    let req: AnnotationBody = parse_body(&body)?;
    let verdict = with_session(&state, &id, move |app, session| {
        let event = app.backends.with(|kit| plan_annotation(session, req.turn_id, &req.labels, kit.classifier))?;
        commit(app, session, std::slice::from_ref(&event))?;
        Ok(match event {
            SessionEvent::AnnotationRecorded { verdict } => verdict,
            _ => unreachable!("plan_annotation yields an annotation event"),
        })
    })
    .await?;
    Ok(Json(verdict).into_response())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReflectionBody {
    self_reflection: String,
}

async fn post_reflection(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Response, ApiError> {
    let req: ReflectionBody = parse_body(&body)?;
    let report = with_session(&state, &id, move |app, session| {
        let event = app.backends.with(|kit| plan_reflection(session, &req.self_reflection, kit.feedback))?;
        commit(app, session, std::slice::from_ref(&event))?;
        Ok(session.feedback.clone())
    })
    .await?;
    Ok(Json(report).into_response())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FollowupBody {
    question: String,
}

async fn post_followup(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Response, ApiError> {
    let req: FollowupBody = parse_body(&body)?;
    let followup = with_session(&state, &id, move |app, session| {
        let event = app.backends.with(|kit| plan_followup(session, &req.question, kit.feedback))?;
        commit(app, session, std::slice::from_ref(&event))?;
        Ok(session.followups.last().cloned())
    })
    .await?;
    Ok(Json(followup).into_response())
}

#[derive(Debug, Serialize)]
pub struct MetricsView {
    #[serde(flatten)]
    pub metrics: SessionMetrics,
    pub annotation_accuracy: AnnotationAccuracy,
}

async fn get_metrics(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<MetricsView>, ApiError> {
    let slot = state.slot(&id)?;
    let s = slot.lock().await;
    let counts = CountTable::from_turns(&s.transcript);
    Ok(Json(MetricsView {
        metrics: SessionMetrics::from_counts(&counts),
        annotation_accuracy: annotation_accuracy(s.annotations.values()),
    }))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/turns", post(post_turn))
        .route("/sessions/{id}/suggestion", get(get_suggestion))
        .route("/sessions/{id}/transcript", get(get_transcript))
        .route("/sessions/{id}/annotations", post(post_annotation))
        .route("/sessions/{id}/reflection", post(post_reflection))
        .route("/sessions/{id}/reflection/followups", post(post_followup))
        .route("/sessions/{id}/metrics", get(get_metrics))
        .with_state(state)
}
