//! Session state machine and simulated student responses.
//!
//! Every state change is an [`SessionEvent`]. A teacher turn is planned in
//! full (respondents, responses, labels, affect) before anything is applied,
//! so a failure midway leaves the session untouched, and the planned events
//! are what the service appends to its log.
//!
//! Randomness comes from a [`SessionRng`] addressed by `(seed, cursor)`: each
//! draw consumes one 64-bit word, so a session replayed from its log continues
//! with exactly the draws it would have made.

use std::collections::BTreeMap;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    ArgumentationLevel, DialogueTurn, EmojiState, Multiset, Ordinal, ParticipationPattern, Speaker, StudentProfile, TrqfLabel,
    ValidatedContext, ValidationError,
};
use crate::pedagogy::{
    verify_annotation, AnnotationVerdict, CodeLabel, DiscourseClassifier, FeedbackGenerator, FeedbackReport,
    PedagogyError,
};
use crate::provider::{parse_json_object, ModelProvider, ModelRequest};
use crate::retrieval::{select_roster, ProfileIndex, RetrievalError, SelectionOptions, DEFAULT_ROSTER_SIZE};

pub const DEFAULT_MAX_RESPONDENTS: usize = 4;
/// Chance that an idle, neutral student starts visibly thinking after a question.
pub const IDLE_THINKING_CHANCE: f64 = 0.2;
/// Chance that an idle student with a non-neutral face settles back to neutral.
pub const IDLE_SETTLE_CHANCE: f64 = 0.5;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("teacher text is empty")]
    EmptyText,
    #[error("student {0:?} is not on this roster")]
    UnknownStudent(String),
    #[error("max_respondents must be at least 1")]
    InvalidMaxRespondents,
    #[error("no feedback report yet")]
    NoFeedback,
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Pedagogy(#[from] PedagogyError),
}

/// Counter-addressed random stream. Draw `i` of a seed is always the same
/// number regardless of how the stream was reached.
#[derive(Debug, Clone)]
pub struct SessionRng {
    rng: ChaCha8Rng,
    cursor: u64,
}

impl SessionRng {
    pub fn new(seed: u64, cursor: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_word_pos(u128::from(cursor) * 2);
        SessionRng { rng, cursor }
    }

    pub fn cursor(&self) -> u64 {
        self.cursor
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        self.cursor += 1;
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform index in `0..n`; `n` must be nonzero.
    pub fn index(&mut self, n: usize) -> usize {
        ((self.next_f64() * n as f64) as usize).min(n - 1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub roster_size: usize,
    /// Posted as the first teacher turn when present.
    pub opening_problem: Option<String>,
    pub suggestions_enabled: bool,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig { roster_size: DEFAULT_ROSTER_SIZE, opening_problem: None, suggestions_enabled: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RosterMember {
    pub profile: StudentProfile,
    pub score: f64,
}

/// What a session is created from; everything else is derived from events.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionMeta {
    pub session_id: String,
    pub context: ValidatedContext,
    pub config: SessionConfig,
    pub roster: Vec<RosterMember>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Followup {
    pub question: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub session_id: String,
    pub context: ValidatedContext,
    pub config: SessionConfig,
    pub roster: Vec<RosterMember>,
    pub transcript: Vec<DialogueTurn>,
    pub affect: BTreeMap<String, EmojiState>,
    pub seed: u64,
    pub rng_cursor: u64,
    pub annotations: BTreeMap<u64, AnnotationVerdict>,
    pub feedback: Option<FeedbackReport>,
    pub followups: Vec<Followup>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum SessionEvent {
    TurnAppended { turn: DialogueTurn },
    AffectChanged { profile_id: String, affect: EmojiState },
    /// Closes a teacher exchange; turns without it are discarded on replay.
    ExchangeCommitted { rng_cursor: u64 },
    AnnotationRecorded { verdict: AnnotationVerdict },
    FeedbackRecorded { report: FeedbackReport },
    FollowupRecorded { followup: Followup },
}

impl SessionState {
    /// The state right after creation, opening problem included.
    pub fn initial(meta: SessionMeta) -> Self {
        let affect = meta.roster.iter().map(|m| (m.profile.profile_id.clone(), EmojiState::Neutral)).collect();
        let transcript = match meta.config.opening_problem.as_deref().map(str::trim) {
            Some(p) if !p.is_empty() => vec![DialogueTurn::teacher(1, p)],
            _ => Vec::new(),
        };
        SessionState {
            session_id: meta.session_id,
            context: meta.context,
            config: meta.config,
            roster: meta.roster,
            transcript,
            affect,
            seed: meta.seed,
            rng_cursor: 0,
            annotations: BTreeMap::new(),
            feedback: None,
            followups: Vec::new(),
        }
    }

    pub fn meta(&self) -> SessionMeta {
        SessionMeta {
            session_id: self.session_id.clone(),
            context: self.context.clone(),
            config: self.config.clone(),
            roster: self.roster.clone(),
            seed: self.seed,
        }
    }

    pub fn profile(&self, profile_id: &str) -> Option<&StudentProfile> {
        self.roster.iter().map(|m| &m.profile).find(|p| p.profile_id == profile_id)
    }

    pub fn turn(&self, turn_id: u64) -> Option<&DialogueTurn> {
        self.transcript.iter().find(|t| t.turn_id == turn_id)
    }

    pub fn next_turn_id(&self) -> u64 {
        self.transcript.last().map_or(1, |t| t.turn_id + 1)
    }

    pub fn apply(&mut self, event: &SessionEvent) {
        match event {
            SessionEvent::TurnAppended { turn } => self.transcript.push(turn.clone()),
            SessionEvent::AffectChanged { profile_id, affect } => {
                self.affect.insert(profile_id.clone(), *affect);
            }
            SessionEvent::ExchangeCommitted { rng_cursor } => self.rng_cursor = *rng_cursor,
            SessionEvent::AnnotationRecorded { verdict } => {
                self.annotations.insert(verdict.turn_id, verdict.clone());
            }
            SessionEvent::FeedbackRecorded { report } => self.feedback = Some(report.clone()),
            SessionEvent::FollowupRecorded { followup } => self.followups.push(followup.clone()),
        }
    }

    /// Rebuilds a session from its metadata and event log. Events of an
    /// exchange that never committed are dropped; their count is returned.
    pub fn replay<'a, I>(meta: SessionMeta, events: I) -> (Self, usize)
    where
        I: IntoIterator<Item = &'a SessionEvent>,
    {
        let mut state = SessionState::initial(meta);
        let mut pending: Vec<&SessionEvent> = Vec::new();
        for e in events {
            match e {
                SessionEvent::TurnAppended { .. } | SessionEvent::AffectChanged { .. } => pending.push(e),
                SessionEvent::ExchangeCommitted { .. } => {
                    for p in pending.drain(..) {
                        state.apply(p);
                    }
                    state.apply(e);
                }
                _ => state.apply(e),
            }
        }
        (state, pending.len())
    }
}

/// Checks the structural invariants a session must keep after every exchange.
pub fn check_invariants(state: &SessionState) -> Result<(), String> {
    crate::model::validate_transcript(&state.transcript).map_err(|e| e.to_string())?;
    let roster: std::collections::HashSet<&str> = state.roster.iter().map(|m| m.profile.profile_id.as_str()).collect();
    if roster.len() != state.roster.len() {
        return Err("roster has duplicate members".into());
    }
    for t in &state.transcript {
        if let Speaker::Student(id) = &t.speaker {
            if !roster.contains(id.as_str()) {
                return Err(format!("turn {} speaker {id:?} is not on the roster", t.turn_id));
            }
        }
    }
    if state.affect.len() != roster.len() || state.affect.keys().any(|k| !roster.contains(k.as_str())) {
        return Err("affect map does not cover exactly the roster".into());
    }
    Ok(())
}

/// Selects a roster and opens a session.
pub fn start_session(
    index: &ProfileIndex,
    context: ValidatedContext,
    config: SessionConfig,
    seed: u64,
    session_id: impl Into<String>,
) -> Result<SessionState, EngineError> {
    let selection =
        select_roster(index, &context, SelectionOptions { roster_size: config.roster_size, jitter: None }, seed)?;
    let roster = selection
        .members
        .iter()
        .zip(&selection.scores)
        .map(|(id, score)| {
            let profile = index.get(id).cloned().ok_or_else(|| RetrievalError::InsufficientProfiles {
                have: index.len(),
                need: config.roster_size,
            })?;
            Ok(RosterMember { profile, score: *score })
        })
        .collect::<Result<Vec<_>, EngineError>>()?;
    Ok(SessionState::initial(SessionMeta { session_id: session_id.into(), context, config, roster, seed }))
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TeacherTurn {
    pub text: String,
    /// Profile id of the one student who should answer.
    #[serde(default)]
    pub addressed: Option<String>,
    /// Upper bound on volunteers when nobody is addressed.
    #[serde(default)]
    pub max_respondents: Option<usize>,
}

pub struct GenerationRequest<'a> {
    pub profile: &'a StudentProfile,
    pub context: &'a ValidatedContext,
    pub transcript: &'a [DialogueTurn],
    pub teacher_text: &'a str,
    pub teacher_labels: &'a Multiset<TrqfLabel>,
    pub current_affect: EmojiState,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneratedResponse {
    pub text: String,
    pub affect: EmojiState,
    /// True when a fallback produced this response.
    pub degraded: bool,
}

pub trait ResponseGenerator: Send + Sync {
    fn respond(&self, request: &GenerationRequest<'_>, rng: &mut SessionRng) -> Result<GeneratedResponse, EngineError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Band {
    Low,
    Mid,
    High,
}

fn band(level: ArgumentationLevel) -> Band {
    match level {
        ArgumentationLevel::None | ArgumentationLevel::StatementOnly => Band::Low,
        ArgumentationLevel::SimpleReasoning | ArgumentationLevel::PartialReasoning => Band::Mid,
        _ => Band::High,
    }
}

fn question_kind(labels: &Multiset<TrqfLabel>) -> Option<TrqfLabel> {
    [TrqfLabel::Teleological, TrqfLabel::Epistemic, TrqfLabel::Communicative]
        .into_iter()
        .find(|l| labels.contains(l))
}

fn templates(band: Band, kind: Option<TrqfLabel>) -> &'static [&'static str] {
    use TrqfLabel::*;
    match (band, kind) {
        (Band::Low, None) => &["I do not know.", "I got a different answer."],
        (Band::Low, Some(Epistemic)) => &["I do not know, I just guessed.", "It is the answer on my paper."],
        (Band::Low, Some(Teleological)) => &["I just did what the example did.", "I do not know why I did that."],
        (Band::Low, Some(Communicative)) => &["I am not sure how to say it.", "I got the same thing as before."],
        (Band::Mid, None) => &["I think the answer is bigger than ten.", "It is 12 because 3 times 4 is 12."],
        (Band::Mid, Some(Epistemic)) => &[
            "It is right because I checked it with 2 and 5.",
            "I think it works because the numbers line up.",
        ],
        (Band::Mid, Some(Teleological)) => &[
            "I multiplied because the problem said times.",
            "I started with the easy part so the rest would be smaller.",
        ],
        (Band::Mid, Some(Communicative)) => &[
            "My idea is that you find the part first because you need it for the total.",
            "I agree with the last answer because I got 12 too.",
        ],
        (Band::High, None) => &[
            "The answer is 12 because 3 groups of 4 is 12.",
            "It has to be 12, unless the problem changes the groups.",
        ],
        (Band::High, Some(Epistemic)) => &[
            "It is always true for {topic} because that is how the rule is defined, but it would not work with zero.",
            "I know because 3 times 4 is 12, and that works every time you have equal groups.",
        ],
        (Band::High, Some(Teleological)) => &[
            "I chose that method because it always keeps the parts equal, so the answer is 12.",
            "I used the rule we learned for {topic} because it works whenever the groups are the same size.",
        ],
        (Band::High, Some(Communicative)) => &[
            "My idea is that {topic} works the same way every time, because the rule does not depend on the numbers.",
            "I think we both got 12, but I used groups and they used a table.",
        ],
    }
}

const CONTRACTIONS: &[(&str, &str)] = &[
    ("do not", "don't"),
    ("does not", "doesn't"),
    ("did not", "didn't"),
    ("is not", "isn't"),
    ("would not", "wouldn't"),
    ("can not", "can't"),
    ("cannot", "can't"),
    ("it is", "it's"),
    ("that is", "that's"),
    ("i am", "I'm"),
    ("i will", "I'll"),
];

/// Spoken-style contractions, applied word-boundary aware and keeping a
/// leading capital.
pub fn contract(text: &str) -> String {
    let mut out = text.to_string();
    for (long, short) in CONTRACTIONS {
        let mut result = String::with_capacity(out.len());
        let lower = out.to_lowercase();
        let mut i = 0;
        while let Some(pos) = lower[i..].find(long) {
            let start = i + pos;
            let end = start + long.len();
            let before_ok = start == 0 || !lower.as_bytes()[start - 1].is_ascii_alphanumeric();
            let after_ok = end == lower.len() || !lower.as_bytes()[end].is_ascii_alphanumeric();
            result.push_str(&out[i..start]);
            if before_ok && after_ok {
                let capital = out[start..].starts_with(|c: char| c.is_uppercase());
                if capital {
                    let mut cs = short.chars();
                    let first = cs.next().map(|c| c.to_ascii_uppercase()).unwrap_or_default();
                    result.push(first);
                    result.push_str(cs.as_str());
                } else {
                    result.push_str(short);
                }
            } else {
                result.push_str(&out[start..end]);
            }
            i = end;
        }
        result.push_str(&out[i..]);
        out = result;
    }
    out
}

const FILLERS: &[&str] = &["Um,", "Well,", "I think"];
const INTERJECTIONS: &[&str] = &["um", "uh", "oh", "well", "yeah", "yes", "no", "okay", "so", "like"];
pub const FILLER_CHANCE: f64 = 0.3;
pub const TYPICAL_UTTERANCE_CHANCE: f64 = 0.5;

fn is_hard(kind: Option<TrqfLabel>) -> bool {
    matches!(kind, Some(TrqfLabel::Epistemic) | Some(TrqfLabel::Teleological))
}

fn scripted_affect(band: Band, hard: bool) -> EmojiState {
    match (band, hard) {
        (Band::High, true) => EmojiState::Thinking,
        (Band::High, false) => EmojiState::Happy,
        (Band::Mid, true) => EmojiState::Curious,
        (Band::Mid, false) => EmojiState::Neutral,
        (Band::Low, true) => EmojiState::Confused,
        (Band::Low, false) => EmojiState::Neutral,
    }
}

/// Template-table responses. Always consumes exactly four draws.
#[derive(Debug, Clone, Copy, Default)]
pub struct ScriptedGenerator;

impl ResponseGenerator for ScriptedGenerator {
    fn respond(&self, req: &GenerationRequest<'_>, rng: &mut SessionRng) -> Result<GeneratedResponse, EngineError> {
        let filler_draw = rng.next_f64();
        let filler = FILLERS[rng.index(FILLERS.len())];
        let source_draw = rng.next_f64();
        let pick_draw = rng.next_f64();

        let b = band(req.profile.argumentation_level);
        let kind = question_kind(req.teacher_labels);
        let body = if source_draw < TYPICAL_UTTERANCE_CHANCE && !req.profile.typical_utterances.is_empty() {
            let u = &req.profile.typical_utterances;
            u[((pick_draw * u.len() as f64) as usize).min(u.len() - 1)].clone()
        } else {
            let t = templates(b, kind);
            let topic = req.context.math_topic();
            t[((pick_draw * t.len() as f64) as usize).min(t.len() - 1)].replace("{topic}", topic)
        };
        let mut text = contract(body.trim());
        let first_word = crate::text::tokens(&text).into_iter().next().unwrap_or_default();
        if filler_draw < FILLER_CHANCE && !INTERJECTIONS.contains(&first_word.as_str()) {
            let keep_case = first_word == "i" || first_word.starts_with("i'");
            let rest = if keep_case {
                text.clone()
            } else {
                let mut cs = text.chars();
                cs.next().map(|c| c.to_lowercase().chain(cs).collect()).unwrap_or_default()
            };
            text = format!("{filler} {rest}");
        }
        Ok(GeneratedResponse { text, affect: scripted_affect(b, is_hard(kind)), degraded: false })
    }
}

/// Responses drafted by a model as `{"text": ..., "affect": ...}`.
pub struct ModelGenerator<'a> {
    provider: &'a dyn ModelProvider,
}

impl<'a> ModelGenerator<'a> {
    pub fn new(provider: &'a dyn ModelProvider) -> Self {
        ModelGenerator { provider }
    }
}

impl ResponseGenerator for ModelGenerator<'_> {
    fn respond(&self, req: &GenerationRequest<'_>, _rng: &mut SessionRng) -> Result<GeneratedResponse, EngineError> {
        #[derive(Deserialize)]
        struct Reply {
            text: String,
            affect: Option<String>,
        }
        let p = req.profile;
        let system = format!(
            "You are {}, a grade {} student in a lesson on {}. Participation: {}. Engagement: {}. Math level: {}. \
             Argumentation: {}. Things you typically say: {}. Reply with JSON {{\"text\": your reply, \"affect\": one \
             of Neutral, Happy, Curious, Confused, Thinking}}.",
            p.display_name,
            req.context.grade_level(),
            req.context.math_topic(),
            p.participation_pattern,
            p.engagement,
            p.math_level,
            p.argumentation_level,
            p.typical_utterances.join(" | "),
        );
        let mut user = String::new();
        for t in req.transcript.iter().rev().take(8).rev() {
            let who = if t.speaker.is_teacher() { "Teacher" } else { "Student" };
            user.push_str(&format!("{who}: {}\n", t.text));
        }
        user.push_str(&format!("Teacher: {}", req.teacher_text));
        let raw = self
            .provider
            .complete(&ModelRequest { task: "generate_response".into(), system, user })
            .map_err(PedagogyError::from)?;
        let reply: Reply = parse_json_object(&raw).map_err(PedagogyError::from)?;
        if reply.text.trim().is_empty() {
            return Err(PedagogyError::GeneratorFailure("empty response text".into()).into());
        }
        let affect = match reply.affect.as_deref().map(str::parse::<EmojiState>) {
            Some(Ok(a)) => a,
            other => {
                tracing::warn!(student = %p.profile_id, affect = ?other, "model affect invalid, using Neutral");
                EmojiState::Neutral
            }
        };
        Ok(GeneratedResponse { text: reply.text.trim().to_string(), affect, degraded: false })
    }
}

/// Tries `primary` and falls back to the scripted generator on failure.
pub struct DegradingGenerator<G> {
    primary: G,
}

impl<G: ResponseGenerator> DegradingGenerator<G> {
    pub fn new(primary: G) -> Self {
        DegradingGenerator { primary }
    }
}

impl<G: ResponseGenerator> ResponseGenerator for DegradingGenerator<G> {
    fn respond(&self, req: &GenerationRequest<'_>, rng: &mut SessionRng) -> Result<GeneratedResponse, EngineError> {
        match self.primary.respond(req, rng) {
            Ok(r) => Ok(r),
            Err(e) => {
                tracing::warn!(student = %req.profile.profile_id, error = %e, "response generation degraded");
                let mut r = ScriptedGenerator.respond(req, rng)?;
                r.degraded = true;
                Ok(r)
            }
        }
    }
}

/// Per-student weight when volunteers are drawn.
pub fn respondent_weight(profile: &StudentProfile) -> f64 {
    let engagement = profile.engagement.rank() as f64;
    let participation = match profile.participation_pattern {
        ParticipationPattern::Voluntary => 3.0,
        ParticipationPattern::Mixed => 2.0,
        ParticipationPattern::TeacherCall => 1.0,
    };
    engagement * participation
}

/// Weighted picks without replacement, walking the roster in order.
fn draw_respondents(state: &SessionState, max: usize, rng: &mut SessionRng) -> Vec<usize> {
    let m = max.min(state.roster.len());
    let n = 1 + ((rng.next_f64() * m as f64) as usize).min(m - 1);
    let mut remaining: Vec<usize> = (0..state.roster.len()).collect();
    let mut picked = Vec::with_capacity(n);
    for _ in 0..n {
        let total: f64 = remaining.iter().map(|&i| respondent_weight(&state.roster[i].profile)).sum();
        let mut target = rng.next_f64() * total;
        let mut chosen = remaining.len() - 1;
        for (pos, &i) in remaining.iter().enumerate() {
            let w = respondent_weight(&state.roster[i].profile);
            if target < w {
                chosen = pos;
                break;
            }
            target -= w;
        }
        picked.push(remaining.remove(chosen));
    }
    picked
}

/// Outcome of a planned exchange.
#[derive(Debug, Clone, PartialEq)]
pub struct ExchangePlan {
    pub events: Vec<SessionEvent>,
    /// Any response came from a fallback.
    pub degraded: bool,
}

/// Computes every event of a teacher exchange without touching `state`.
pub fn plan_teacher_turn(
    state: &SessionState,
    turn: &TeacherTurn,
    generator: &dyn ResponseGenerator,
    classifier: &dyn DiscourseClassifier,
) -> Result<ExchangePlan, EngineError> {
    let text = turn.text.trim();
    if text.is_empty() {
        return Err(EngineError::EmptyText);
    }
    if turn.max_respondents == Some(0) {
        return Err(EngineError::InvalidMaxRespondents);
    }
    let mut rng = SessionRng::new(state.seed, state.rng_cursor);
    let respondents = match &turn.addressed {
        Some(id) => {
            let i = state
                .roster
                .iter()
                .position(|m| &m.profile.profile_id == id)
                .ok_or_else(|| EngineError::UnknownStudent(id.clone()))?;
            vec![i]
        }
        None if state.roster.is_empty() => Vec::new(),
        None => draw_respondents(state, turn.max_respondents.unwrap_or(DEFAULT_MAX_RESPONDENTS), &mut rng),
    };

    let mut teacher = DialogueTurn::teacher(state.next_turn_id(), text);
    teacher.trqf_labels = classifier.classify_question(text, &state.transcript)?;
    let mut transcript = state.transcript.clone();
    transcript.push(teacher.clone());
    let mut events = vec![SessionEvent::TurnAppended { turn: teacher.clone() }];
    let mut affect = state.affect.clone();
    let mut degraded = false;

    for &i in &respondents {
        let profile = &state.roster[i].profile;
        let current = affect.get(&profile.profile_id).copied().unwrap_or(EmojiState::Neutral);
        let request = GenerationRequest {
            profile,
            context: &state.context,
            transcript: &transcript,
            teacher_text: text,
            teacher_labels: &teacher.trqf_labels,
            current_affect: current,
        };
        let response = generator.respond(&request, &mut rng)?;
        degraded |= response.degraded;
        let mut student = DialogueTurn::student(
            transcript.last().map_or(1, |t| t.turn_id + 1),
            profile.profile_id.clone(),
            response.text,
            response.affect,
        );
        student.toulmin_labels = classifier.classify_response(&student.text, &transcript)?;
        transcript.push(student.clone());
        events.push(SessionEvent::TurnAppended { turn: student });
        affect.insert(profile.profile_id.clone(), response.affect);
    }

    for (i, member) in state.roster.iter().enumerate() {
        if respondents.contains(&i) {
            continue;
        }
        let id = &member.profile.profile_id;
        let draw = rng.next_f64();
        let now = affect.get(id).copied().unwrap_or(EmojiState::Neutral);
        if now == EmojiState::Neutral && draw < IDLE_THINKING_CHANCE {
            affect.insert(id.clone(), EmojiState::Thinking);
        } else if now != EmojiState::Neutral && draw < IDLE_SETTLE_CHANCE {
            affect.insert(id.clone(), EmojiState::Neutral);
        }
    }
    for (id, a) in &affect {
        if state.affect.get(id) != Some(a) {
            events.push(SessionEvent::AffectChanged { profile_id: id.clone(), affect: *a });
        }
    }
    events.push(SessionEvent::ExchangeCommitted { rng_cursor: rng.cursor() });
    Ok(ExchangePlan { events, degraded })
}

/// Plans and applies a teacher exchange, returning the applied events.
pub fn post_teacher_turn(
    state: &mut SessionState,
    turn: &TeacherTurn,
    generator: &dyn ResponseGenerator,
    classifier: &dyn DiscourseClassifier,
) -> Result<ExchangePlan, EngineError> {
    let plan = plan_teacher_turn(state, turn, generator, classifier)?;
    for e in &plan.events {
        state.apply(e);
    }
    Ok(plan)
}

pub fn plan_annotation(
    state: &SessionState,
    turn_id: u64,
    labels: &[CodeLabel],
    classifier: &dyn DiscourseClassifier,
) -> Result<SessionEvent, EngineError> {
    let pos = state
        .transcript
        .iter()
        .position(|t| t.turn_id == turn_id)
        .ok_or(PedagogyError::UnknownTurn(turn_id))?;
    let verdict = verify_annotation(&state.transcript[pos], &state.transcript[..pos], labels, classifier)?;
    Ok(SessionEvent::AnnotationRecorded { verdict })
}

pub fn plan_reflection(
    state: &SessionState,
    self_reflection: &str,
    generator: &dyn FeedbackGenerator,
) -> Result<SessionEvent, EngineError> {
    let report = crate::pedagogy::overall_feedback(state, self_reflection, generator)?;
    Ok(SessionEvent::FeedbackRecorded { report })
}

pub fn plan_followup(
    state: &SessionState,
    question: &str,
    generator: &dyn FeedbackGenerator,
) -> Result<SessionEvent, EngineError> {
    let report = state.feedback.as_ref().ok_or(EngineError::NoFeedback)?;
    let answer = crate::pedagogy::answer_followup(report, &state.transcript, question, generator)?;
    Ok(SessionEvent::FollowupRecorded { followup: Followup { question: question.trim().to_string(), answer } })
}

/// One simulated session for batch runs.
#[derive(Debug, Clone)]
pub struct SessionSpec {
    pub context: ValidatedContext,
    pub seed: u64,
}

/// Runs a fixed teacher script through many sessions with the scripted
/// backends.
pub fn run_scripted_sessions(
    index: &ProfileIndex,
    specs: &[SessionSpec],
    script: &[TeacherTurn],
) -> Vec<Result<SessionState, EngineError>> {
    #[cfg(feature = "parallel")]
    {
        run_scripted_sessions_parallel(index, specs, script)
    }
    #[cfg(not(feature = "parallel"))]
    {
        run_scripted_sessions_sequential(index, specs, script)
    }
}

fn run_one(index: &ProfileIndex, spec: &SessionSpec, script: &[TeacherTurn]) -> Result<SessionState, EngineError> {
    let classifier = crate::pedagogy::ScriptedClassifier;
    let mut state =
        start_session(index, spec.context.clone(), SessionConfig::default(), spec.seed, format!("batch-{}", spec.seed))?;
    for turn in script {
        post_teacher_turn(&mut state, turn, &ScriptedGenerator, &classifier)?;
    }
    Ok(state)
}

pub fn run_scripted_sessions_sequential(
    index: &ProfileIndex,
    specs: &[SessionSpec],
    script: &[TeacherTurn],
) -> Vec<Result<SessionState, EngineError>> {
    specs.iter().map(|s| run_one(index, s, script)).collect()
}

#[cfg(feature = "parallel")]
pub fn run_scripted_sessions_parallel(
    index: &ProfileIndex,
    specs: &[SessionSpec],
    script: &[TeacherTurn],
) -> Vec<Result<SessionState, EngineError>> {
    use rayon::prelude::*;
    specs.par_iter().map(|s| run_one(index, s, script)).collect()
}
