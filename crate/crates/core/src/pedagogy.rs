//! The two coding frameworks and everything built on them: question and
//! response classification, live suggestions, annotation verification and
//! end-of-session feedback.
//!
//! # Question cues (TRQF)
//!
//! | label | cues |
//! |-------|------|
//! | Teleological | `why did/would you` + a method verb; `what was your goal`; `what were you trying to`; `purpose`; `what strategy`; `how did you decide` |
//! | Epistemic | `how do you know`; `how can you be sure`; `is that always`; `does that rule work`; `what makes you think`; `why is`; `why does`; `explain why`; `and why`; `convince`; `prove` |
//! | Communicative | `to the class`; `explain your idea`; `say more`; `tell us`; `share`; `repeat`; `own words`; `who agrees`; `turn to your partner`; `show us`; `can someone` |
//!
//! A question that fires no cue is Epistemic; a directive opening with
//! `explain`, `tell`, `show`, `describe` or `share` is Communicative; any other
//! statement gets no label.
//!
//! # Response cues (Toulmin)
//!
//! | label | cues |
//! |-------|------|
//! | Claim | a declarative, on-task utterance that does not open with support (`because`, `but`, `whenever`, `by definition`, `the table shows`, `our teacher said`, ...) |
//! | Data | a `because`/`since` clause containing a number, or a fact report (`the table shows`, `the problem says`, ...) with a number |
//! | Warrant | general-rule words (`always`, `whenever`, `every time`, `never`, `in general`, ...), or a `because` clause without numbers |
//! | Backing | definitions and authority (`by definition`, `property`, `the rule says`, `teacher said`, `we learned`, ...) |
//! | Qualifier | hedges (`maybe`, `probably`, `I think`, `I guess`, `might`, `not sure`, ...) |
//! | Rebuttal | counters (`but`, `unless`, `except`, `however`, `doesn't work`, ...); `but` followed by a hedge is not a rebuttal |
//!
//! Student questions and backchannels (`um`, `yeah`, `I don't know`) get no label.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::SessionState;
use crate::metrics::{round_to, CountTable, SessionMetrics};
use crate::model::{DialogueTurn, Multiset, Ordinal, Speaker, Suggestion, ToulminLabel, TrqfLabel};
use crate::provider::{parse_json_object, ModelProvider, ModelRequest, ProviderError};
use crate::text::{first_phrase, has_phrase, is_numeric_token, is_question, padded, tokens};

pub use crate::model::{ToulminLabel as Toulmin, TrqfLabel as Trqf};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PedagogyError {
    #[error("text is empty")]
    EmptyText,
    #[error("classifier failed: {0}")]
    ClassifierFailure(String),
    #[error("generator failed: {0}")]
    GeneratorFailure(String),
    #[error("suggestion violates the output contract: {}", .0.join("; "))]
    FormatViolation(Vec<String>),
    #[error("labels belong to the other framework for turn {turn_id}")]
    WrongFramework { turn_id: u64 },
    #[error("transcript has no teacher turn yet")]
    NoTeacherTurn,
    #[error("no annotated exchange yet")]
    NoAnnotations,
    #[error("self-reflection is empty")]
    EmptyReflection,
    #[error("unknown turn {0}")]
    UnknownTurn(u64),
}

impl From<ProviderError> for PedagogyError {
    fn from(e: ProviderError) -> Self {
        PedagogyError::GeneratorFailure(e.to_string())
    }
}

/// A label from either framework; serializes as the bare variant name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CodeLabel {
    Trqf(TrqfLabel),
    Toulmin(ToulminLabel),
}

impl CodeLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            CodeLabel::Trqf(l) => l.as_str(),
            CodeLabel::Toulmin(l) => l.as_str(),
        }
    }
}

impl std::str::FromStr for CodeLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.parse::<TrqfLabel>()
            .map(CodeLabel::Trqf)
            .or_else(|_| s.parse::<ToulminLabel>().map(CodeLabel::Toulmin))
            .map_err(|_| format!("unknown label {s:?}"))
    }
}

impl Serialize for CodeLabel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for CodeLabel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A cue that fired during scripted classification.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CueHit {
    pub label: CodeLabel,
    pub cue: String,
}

pub trait DiscourseClassifier: Send + Sync {
    fn classify_question(&self, text: &str, context: &[DialogueTurn]) -> Result<Multiset<TrqfLabel>, PedagogyError>;

    fn classify_response(&self, text: &str, context: &[DialogueTurn]) -> Result<Multiset<ToulminLabel>, PedagogyError>;

    /// Cues behind a classification, for explanations. Backends without
    /// inspectable cues return nothing.
    fn cues(&self, _text: &str, _teacher: bool) -> Vec<CueHit> {
        Vec::new()
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ScriptedClassifier;

const METHOD_VERBS: &[&str] = &[
    "multiply", "divide", "add", "subtract", "use", "choose", "pick", "write", "set", "start", "put", "move",
    "round", "draw", "solve", "convert", "cross", "plug", "do", "make", "change", "simplify", "try", "split",
    "group", "double", "halve", "combine", "flip", "cancel", "distribute", "factor",
];
const TELEOLOGICAL_CUES: &[&str] = &[
    "what was your goal", "what were you trying to", "what is the purpose", "what's the purpose", "what strategy",
    "how did you decide", "what made you decide", "why that method", "why use", "why choose",
];
const EPISTEMIC_CUES: &[&str] = &[
    "how do you know", "how do we know", "how can you be sure", "how can we be sure", "how can you tell",
    "how sure", "is that always", "is it always", "does that always", "will that always", "does that rule work",
    "does that work for", "does it work for", "what makes you think", "why do you think", "why is", "why does",
    "why are", "explain why", "and why", "convince", "prove", "what's your evidence", "what is your evidence",
    "is that true",
];
const COMMUNICATIVE_CUES: &[&str] = &[
    "to the class", "explain your idea", "explain your thinking", "say more", "tell us", "tell the class", "share",
    "repeat", "own words", "who agrees", "who disagrees", "agree or disagree", "do you agree", "add on", "restate",
    "turn to your partner", "turn and talk", "show us", "can someone", "can anyone", "anyone else", "louder",
];
const DIRECTIVE_OPENERS: &[&str] = &["explain", "tell", "show", "describe", "share"];

const HEDGES: &[&str] = &[
    "maybe", "probably", "i think", "i guess", "might", "possibly", "not sure", "perhaps", "kind of", "sort of",
    "i believe", "usually", "most likely",
];
const REBUTTAL_CUES: &[&str] = &[
    "unless", "except", "however", "not always", "doesn't work", "won't work", "i disagree", "that's not right",
];
const BACKING_CUES: &[&str] = &[
    "by definition", "definition", "property", "the rule says", "teacher said", "the book says", "textbook",
    "we learned", "formula says", "it's a rule", "law",
];
const WARRANT_CUES: &[&str] = &["always", "whenever", "every time", "any time", "in general", "never", "for any"];
const FACT_REPORTS: &[&str] = &["the table shows", "the problem says", "it says", "the graph shows", "we were given"];
const SUPPORT_OPENERS: &[&str] = &[
    "because", "since", "but", "however", "unless", "by definition", "whenever", "every time", "the table shows",
    "the problem says", "it says", "the graph shows", "our teacher said", "the teacher said", "the book says",
    "we learned",
];
const BACKCHANNEL: &[&str] = &[
    "um", "uh", "yeah", "yes", "no", "okay", "ok", "i", "don't", "know", "hmm", "huh", "mm", "oh", "sure", "right",
];

fn question_cues(text: &str) -> Vec<CueHit> {
    let p = padded(text);
    let toks = tokens(text);
    let mut hits = Vec::new();
    let hit = |label: TrqfLabel, cue: &str| CueHit { label: CodeLabel::Trqf(label), cue: cue.to_string() };

    let why_method = toks.windows(3).enumerate().find_map(|(i, w)| {
        let opener = w[0] == "why" && (w[1] == "did" || w[1] == "would" || w[1] == "do") && w[2] == "you";
        let verb = toks.get(i + 3).filter(|v| METHOD_VERBS.contains(&v.as_str()))?;
        opener.then(|| format!("{} {} you {}", w[0], w[1], verb))
    });
    if let Some(cue) = why_method.or_else(|| first_phrase(&p, TELEOLOGICAL_CUES).map(String::from)) {
        hits.push(hit(TrqfLabel::Teleological, &cue));
    }
    if let Some(cue) = first_phrase(&p, EPISTEMIC_CUES) {
        hits.push(hit(TrqfLabel::Epistemic, cue));
    }
    if let Some(cue) = first_phrase(&p, COMMUNICATIVE_CUES) {
        hits.push(hit(TrqfLabel::Communicative, cue));
    }
    if hits.is_empty() {
        if is_question(text) {
            hits.push(hit(TrqfLabel::Epistemic, "question form"));
        } else if toks.first().is_some_and(|t| DIRECTIVE_OPENERS.contains(&t.as_str())) {
            hits.push(hit(TrqfLabel::Communicative, "directive"));
        }
    }
    hits
}

/// The text after `because`/`since`, up to the next `, and` or `;`.
fn reason_clauses(text: &str) -> Vec<Vec<String>> {
    let toks = tokens(text);
    let mut out = Vec::new();
    for (i, t) in toks.iter().enumerate() {
        if t == "because" || t == "since" || t == "cause" {
            out.push(toks[i + 1..].to_vec());
        }
    }
    out
}

fn response_cues(text: &str) -> Vec<CueHit> {
    let p = padded(text);
    let toks = tokens(text);
    let mut hits = Vec::new();
    let hit = |label: ToulminLabel, cue: &str| CueHit { label: CodeLabel::Toulmin(label), cue: cue.to_string() };

    if toks.is_empty() || is_question(text) || toks.iter().all(|t| BACKCHANNEL.contains(&t.as_str())) {
        return hits;
    }

    let backing = first_phrase(&p, BACKING_CUES);
    let opens_with_support = SUPPORT_OPENERS.iter().any(|o| p.starts_with(&format!(" {o} ")));
    let backing_head = backing.is_some_and(|b| {
        let head: String = format!(" {} ", toks.iter().take(4).cloned().collect::<Vec<_>>().join(" "));
        has_phrase(&head, b.split(' ').next().unwrap_or(b)) || has_phrase(&head, b)
    });
    if !opens_with_support && !backing_head {
        let head = toks.iter().take(3).cloned().collect::<Vec<_>>().join(" ");
        hits.push(hit(ToulminLabel::Claim, &head));
    }

    let clauses = reason_clauses(text);
    let numeric_reason = clauses.iter().find(|c| c.iter().any(|t| is_numeric_token(t)));
    let fact_report = first_phrase(&p, FACT_REPORTS).filter(|_| toks.iter().any(|t| is_numeric_token(t)));
    if numeric_reason.is_some() {
        hits.push(hit(ToulminLabel::Data, "because + numbers"));
    } else if let Some(cue) = fact_report {
        hits.push(hit(ToulminLabel::Data, cue));
    }

    if let Some(cue) = first_phrase(&p, WARRANT_CUES) {
        hits.push(hit(ToulminLabel::Warrant, cue));
    } else if !clauses.is_empty() && numeric_reason.is_none() && backing.is_none() {
        hits.push(hit(ToulminLabel::Warrant, "because + general reason"));
    }

    if let Some(cue) = backing {
        hits.push(hit(ToulminLabel::Backing, cue));
    }
    if let Some(cue) = first_phrase(&p, HEDGES) {
        hits.push(hit(ToulminLabel::Qualifier, cue));
    }

    let but_counter = p.match_indices(" but ").any(|(i, _)| {
        let rest = &p[i + " but".len()..];
        !HEDGES.iter().chain(["i'm not sure", "i don't know"].iter()).any(|h| rest.starts_with(&format!(" {h} ")))
    });
    if but_counter {
        hits.push(hit(ToulminLabel::Rebuttal, "but"));
    } else if let Some(cue) = first_phrase(&p, REBUTTAL_CUES) {
        hits.push(hit(ToulminLabel::Rebuttal, cue));
    }
    hits
}

impl DiscourseClassifier for ScriptedClassifier {
    fn classify_question(&self, text: &str, _context: &[DialogueTurn]) -> Result<Multiset<TrqfLabel>, PedagogyError> {
        if text.trim().is_empty() {
            return Err(PedagogyError::EmptyText);
        }
        Ok(question_cues(text)
            .into_iter()
            .filter_map(|h| match h.label {
                CodeLabel::Trqf(l) => Some(l),
                CodeLabel::Toulmin(_) => None,
            })
            .collect())
    }

    fn classify_response(&self, text: &str, _context: &[DialogueTurn]) -> Result<Multiset<ToulminLabel>, PedagogyError> {
        if text.trim().is_empty() {
            return Err(PedagogyError::EmptyText);
        }
        Ok(response_cues(text)
            .into_iter()
            .filter_map(|h| match h.label {
                CodeLabel::Toulmin(l) => Some(l),
                CodeLabel::Trqf(_) => None,
            })
            .collect())
    }

    fn cues(&self, text: &str, teacher: bool) -> Vec<CueHit> {
        if teacher {
            question_cues(text)
        } else {
            response_cues(text)
        }
    }
}

/// Classification delegated to a model; replies must be `{"labels": [...]}`.
pub struct ModelClassifier<'a> {
    provider: &'a dyn ModelProvider,
}

impl<'a> ModelClassifier<'a> {
    pub fn new(provider: &'a dyn ModelProvider) -> Self {
        ModelClassifier { provider }
    }

    fn labels<L: std::str::FromStr + Ord + Clone>(
        &self,
        task: &str,
        system: String,
        text: &str,
        context: &[DialogueTurn],
    ) -> Result<Multiset<L>, PedagogyError> {
        if text.trim().is_empty() {
            return Err(PedagogyError::EmptyText);
        }
        #[derive(Deserialize)]
        struct Reply {
            labels: Vec<String>,
        }
        let mut user = String::from("Recent dialogue:\n");
        for t in context.iter().rev().take(6).rev() {
            user.push_str(&format!("{}: {}\n", if t.speaker.is_teacher() { "Teacher" } else { "Student" }, t.text));
        }
        user.push_str(&format!("Utterance to code: {text}"));
        let request = ModelRequest { task: task.into(), system, user };
        let fail = |e: ProviderError| PedagogyError::ClassifierFailure(e.to_string());
        let raw = self.provider.complete(&request).map_err(fail)?;
        let reply: Reply = parse_json_object(&raw).map_err(fail)?;
        reply
            .labels
            .iter()
            .map(|s| s.parse::<L>().map_err(|_| PedagogyError::ClassifierFailure(format!("unknown label {s:?}"))))
            .collect()
    }
}

impl DiscourseClassifier for ModelClassifier<'_> {
    fn classify_question(&self, text: &str, context: &[DialogueTurn]) -> Result<Multiset<TrqfLabel>, PedagogyError> {
        self.labels(
            "classify_question",
            "Code the teacher utterance with every applicable questioning category: Epistemic (probes how a student \
             knows), Teleological (probes why a method or goal was chosen), Communicative (prompts articulation to \
             others). Reply with JSON {\"labels\": [...]}."
                .into(),
            text,
            context,
        )
    }

    fn classify_response(&self, text: &str, context: &[DialogueTurn]) -> Result<Multiset<ToulminLabel>, PedagogyError> {
        self.labels(
            "classify_response",
            "Code the student utterance with every argument component it contains: Claim, Data, Warrant, Backing, \
             Qualifier, Rebuttal. Off-task talk gets no label. Reply with JSON {\"labels\": [...]}."
                .into(),
            text,
            context,
        )
    }
}

pub const DEFAULT_FORBIDDEN_TERMS: &[&str] = &[
    "Toulmin",
    "TRQF",
    "Teacher Rational Questioning",
    "epistemic",
    "teleological",
    "communicative",
    "warrant",
    "rebuttal",
    "qualifier",
];

/// Terms that must not appear in a live suggestion, matched case-insensitively
/// as whole words or phrases.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForbiddenTerms {
    terms: Vec<String>,
}

impl Default for ForbiddenTerms {
    fn default() -> Self {
        ForbiddenTerms { terms: DEFAULT_FORBIDDEN_TERMS.iter().map(|t| t.to_string()).collect() }
    }
}

impl ForbiddenTerms {
    /// One term per line; blank lines and `#` comments are skipped.
    pub fn parse(config: &str) -> Self {
        ForbiddenTerms {
            terms: config
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(String::from)
                .collect(),
        }
    }

    pub fn terms(&self) -> &[String] {
        &self.terms
    }

    pub fn find_in(&self, text: &str) -> Vec<&str> {
        let p = padded(text);
        self.terms
            .iter()
            .filter(|t| has_phrase(&p, &tokens(t).join(" ")))
            .map(String::as_str)
            .collect()
    }
}

/// Every contract problem with a suggestion: shape plus forbidden terms.
pub fn suggestion_violations(s: &Suggestion, forbidden: &ForbiddenTerms) -> Vec<String> {
    let mut v = s.shape_violations();
    for field in std::iter::once(&s.reasoning).chain(s.recommended_questions.iter()) {
        for term in forbidden.find_in(field) {
            v.push(format!("forbidden term {term:?}"));
        }
    }
    v
}

/// What the latest exchange looked like through both frameworks.
#[derive(Debug, Clone, PartialEq)]
pub struct ExchangeAnalysis {
    pub teacher_text: String,
    pub teacher_labels: Multiset<TrqfLabel>,
    pub responses: Vec<(String, Multiset<ToulminLabel>)>,
    pub topic: String,
    /// Display name of the first respondent, if any.
    pub first_respondent: Option<String>,
}

pub fn analyze_latest_exchange(
    state: &SessionState,
    classifier: &dyn DiscourseClassifier,
) -> Result<ExchangeAnalysis, PedagogyError> {
    let t = &state.transcript;
    let last_teacher = t.iter().rposition(|x| x.speaker.is_teacher()).ok_or(PedagogyError::NoTeacherTurn)?;
    let teacher = &t[last_teacher];
    let teacher_labels = classifier.classify_question(&teacher.text, &t[..last_teacher])?;
    let mut responses = Vec::new();
    let mut first_respondent = None;
    for (i, turn) in t.iter().enumerate().skip(last_teacher + 1) {
        if let Speaker::Student(id) = &turn.speaker {
            if first_respondent.is_none() {
                first_respondent = state.profile(id).map(|p| p.display_name.clone());
            }
            responses.push((turn.text.clone(), classifier.classify_response(&turn.text, &t[..i])?));
        }
    }
    Ok(ExchangeAnalysis {
        teacher_text: teacher.text.clone(),
        teacher_labels,
        responses,
        topic: state.context.math_topic().to_string(),
        first_respondent,
    })
}

pub trait SuggestionGenerator: Send + Sync {
    fn suggest(&self, analysis: &ExchangeAnalysis, forbidden: &ForbiddenTerms) -> Result<Suggestion, PedagogyError>;
}

fn plain_topic(topic: &str) -> String {
    topic.chars().filter(|c| !matches!(c, '?' | '.' | '!')).collect::<String>().trim().to_string()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SuggestionRule {
    NoResponses,
    OffTask,
    BareClaims,
    Uncertain,
    DataWithoutRule,
    UntestedRule,
    OpenDisagreement,
}

/// Picks the first rule of the table that matches the latest responses.
pub fn suggestion_rule(a: &ExchangeAnalysis) -> SuggestionRule {
    use ToulminLabel::*;
    if a.responses.is_empty() {
        return SuggestionRule::NoResponses;
    }
    let all: Multiset<ToulminLabel> = a.responses.iter().flat_map(|(_, l)| l.iter().copied()).collect();
    let has = |l| all.contains(&l);
    if all.is_empty() {
        SuggestionRule::OffTask
    } else if has(Claim) && !has(Data) && !has(Warrant) && !has(Backing) && !has(Qualifier) && !has(Rebuttal) {
        SuggestionRule::BareClaims
    } else if has(Qualifier) {
        SuggestionRule::Uncertain
    } else if has(Data) && !has(Warrant) {
        SuggestionRule::DataWithoutRule
    } else if (has(Warrant) || has(Backing)) && !has(Rebuttal) {
        SuggestionRule::UntestedRule
    } else {
        SuggestionRule::OpenDisagreement
    }
}

/// Template-table suggestion generator.
#[derive(Debug, Clone, Copy, Default)]
pub struct ScriptedSuggester;

impl SuggestionGenerator for ScriptedSuggester {
    fn suggest(&self, a: &ExchangeAnalysis, forbidden: &ForbiddenTerms) -> Result<Suggestion, PedagogyError> {
        let topic = plain_topic(&a.topic);
        let (reasoning, q1, mut q2) = match suggestion_rule(a) {
            SuggestionRule::NoResponses => (
                "Give the class a moment of think time, then invite one student to share an answer and how they found it.".to_string(),
                "Who would like to share how they started this problem?".to_string(),
                format!("What is one thing you notice about {topic} in this problem?"),
            ),
            SuggestionRule::OffTask => (
                "Students have not offered a mathematical idea yet, so lower the entry point with a concrete starting question.".into(),
                "What is one number or fact from the problem that you are sure about?".into(),
                "Can someone describe the problem in their own words?".into(),
            ),
            SuggestionRule::BareClaims => (
                "The latest answers state results without support, so press students to show the evidence behind them.".into(),
                "How did you get that answer?".into(),
                "What information in the problem supports your answer?".into(),
            ),
            SuggestionRule::Uncertain => (
                "Some students sound unsure, so invite them to test their idea on a specific case before deciding.".into(),
                "What could we check to find out if that answer works?".into(),
                "Can you try your idea with a smaller number and tell us what happens?".into(),
            ),
            SuggestionRule::DataWithoutRule => (
                "Students are pointing to numbers, so ask them to connect that evidence to a rule that works every time.".into(),
                "Why does that calculation show your answer is right?".into(),
                format!("Would the same steps work for a different {topic} problem?"),
            ),
            SuggestionRule::UntestedRule => (
                "Students are offering general reasons, so invite others to test the limits of that reasoning.".into(),
                "Is there a case where that reasoning would not work?".into(),
                "Who sees it a different way, and why?".into(),
            ),
            SuggestionRule::OpenDisagreement => (
                "Different views are on the table, so have students respond directly to each other's ideas.".into(),
                "Who can restate the disagreement in their own words?".into(),
                "Which idea do you agree with, and what convinces you?".into(),
            ),
        };
        // Bring peers in when the teacher has only been talking to one student at a time.
        if !a.teacher_labels.contains(&TrqfLabel::Communicative) && !a.responses.is_empty() {
            if let Some(name) = &a.first_respondent {
                q2 = format!("Can someone explain {name}'s idea in their own words?");
            }
        }
        let s = Suggestion { reasoning, recommended_questions: [q1, q2] };
        let v = suggestion_violations(&s, forbidden);
        if v.is_empty() {
            Ok(s)
        } else {
            Err(PedagogyError::FormatViolation(v))
        }
    }
}

/// Model-drafted suggestions with one automatic repair pass.
pub struct ModelSuggester<'a> {
    provider: &'a dyn ModelProvider,
}

impl<'a> ModelSuggester<'a> {
    pub fn new(provider: &'a dyn ModelProvider) -> Self {
        ModelSuggester { provider }
    }
}

const SUGGEST_SYSTEM: &str = "You coach a teacher who is leading a mathematics discussion. Reply with a JSON object \
{\"reasoning\": one sentence ending with a period, \"recommended_questions\": [two questions ending with '?']}. \
Do not name any coding framework or its categories.";

impl SuggestionGenerator for ModelSuggester<'_> {
    fn suggest(&self, a: &ExchangeAnalysis, forbidden: &ForbiddenTerms) -> Result<Suggestion, PedagogyError> {
        let mut user = format!(
            "Topic: {}\nTeacher asked: {}\nQuestion codes: {:?}\nStudent responses:\n",
            a.topic,
            a.teacher_text,
            a.teacher_labels.as_slice()
        );
        for (text, labels) in &a.responses {
            user.push_str(&format!("- {text} {:?}\n", labels.as_slice()));
        }
        let draft = |user: String| -> Result<Result<Suggestion, Vec<String>>, PedagogyError> {
            let raw = self.provider.complete(&ModelRequest { task: "suggest".into(), system: SUGGEST_SYSTEM.into(), user })?;
            Ok(match parse_json_object::<Suggestion>(&raw) {
                Ok(s) => {
                    let v = suggestion_violations(&s, forbidden);
                    if v.is_empty() {
                        Ok(s)
                    } else {
                        Err(v)
                    }
                }
                Err(e) => Err(vec![e.to_string()]),
            })
        };
        match draft(user.clone())? {
            Ok(s) => Ok(s),
            Err(problems) => {
                let repair = format!(
                    "{user}\nYour previous reply broke these rules: {}. Forbidden terms: {}. Reply again.",
                    problems.join("; "),
                    forbidden.terms().join(", ")
                );
                draft(repair)?.map_err(PedagogyError::FormatViolation)
            }
        }
    }
}

/// Live questioning suggestion for the current state of a session.
pub fn suggest(
    state: &SessionState,
    classifier: &dyn DiscourseClassifier,
    generator: &dyn SuggestionGenerator,
    forbidden: &ForbiddenTerms,
) -> Result<Suggestion, PedagogyError> {
    let analysis = analyze_latest_exchange(state, classifier)?;
    let s = generator.suggest(&analysis, forbidden)?;
    let v = suggestion_violations(&s, forbidden);
    if v.is_empty() {
        Ok(s)
    } else {
        Err(PedagogyError::FormatViolation(v))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Agreement {
    Match,
    Partial,
    Mismatch,
}

pub fn agreement<L: Ord + Clone>(user: &Multiset<L>, system: &Multiset<L>) -> Agreement {
    if user == system {
        Agreement::Match
    } else if user.intersection(system).is_empty() {
        Agreement::Mismatch
    } else {
        Agreement::Partial
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationVerdict {
    pub turn_id: u64,
    pub user_labels: Vec<CodeLabel>,
    pub system_labels: Vec<CodeLabel>,
    pub agreement: Agreement,
    pub explanation: String,
}

fn split_labels(labels: &[CodeLabel]) -> (Multiset<TrqfLabel>, Multiset<ToulminLabel>) {
    let mut trqf = Multiset::new();
    let mut toulmin = Multiset::new();
    for l in labels {
        match l {
            CodeLabel::Trqf(x) => trqf.insert(*x),
            CodeLabel::Toulmin(x) => toulmin.insert(*x),
        }
    }
    (trqf, toulmin)
}

fn names<L: Ordinal + Clone + std::fmt::Display>(m: &Multiset<L>) -> String {
    if m.is_empty() {
        "no label".to_string()
    } else {
        m.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(", ")
    }
}

fn explain<L: Ordinal + std::fmt::Display>(
    user: &Multiset<L>,
    system: &Multiset<L>,
    outcome: Agreement,
    cues: &[CueHit],
) -> String {
    let mut s = format!("System coding: {}", names(system));
    if !cues.is_empty() {
        let cited: Vec<String> = cues.iter().map(|c| format!("{} from \"{}\"", c.label.as_str(), c.cue)).collect();
        s.push_str(&format!(" ({})", cited.join("; ")));
    }
    s.push_str(&format!(". Your labels: {}. ", names(user)));
    match outcome {
        Agreement::Match => s.push_str("Your labels match."),
        Agreement::Partial => {
            let shared = user.intersection(system);
            s.push_str(&format!("Partial agreement on {}.", names(&shared)));
        }
        Agreement::Mismatch => s.push_str("No overlap with the system coding."),
    }
    s
}

/// Compares a user's labels for a turn with the system coding.
pub fn verify_annotation(
    turn: &DialogueTurn,
    context: &[DialogueTurn],
    user_labels: &[CodeLabel],
    classifier: &dyn DiscourseClassifier,
) -> Result<AnnotationVerdict, PedagogyError> {
    let (user_trqf, user_toulmin) = split_labels(user_labels);
    let teacher = turn.speaker.is_teacher();
    if (teacher && !user_toulmin.is_empty()) || (!teacher && !user_trqf.is_empty()) {
        return Err(PedagogyError::WrongFramework { turn_id: turn.turn_id });
    }
    let cues = classifier.cues(&turn.text, teacher);
    let (system_labels, agreement_v, explanation) = if teacher {
        let system = classifier.classify_question(&turn.text, context)?;
        let a = agreement(&user_trqf, &system);
        let e = explain(&user_trqf, &system, a, &cues);
        (system.iter().map(|l| CodeLabel::Trqf(*l)).collect(), a, e)
    } else {
        let system = classifier.classify_response(&turn.text, context)?;
        let a = agreement(&user_toulmin, &system);
        let e = explain(&user_toulmin, &system, a, &cues);
        (system.iter().map(|l| CodeLabel::Toulmin(*l)).collect(), a, e)
    };
    let mut user_sorted = user_labels.to_vec();
    user_sorted.sort();
    Ok(AnnotationVerdict {
        turn_id: turn.turn_id,
        user_labels: user_sorted,
        system_labels,
        agreement: agreement_v,
        explanation,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnotationAccuracy {
    pub annotated: usize,
    /// Share of verdicts that are `Match`.
    pub exact: f64,
    /// Share of verdicts that are `Match` or `Partial`.
    pub lenient: f64,
}

pub fn annotation_accuracy<'a, I>(verdicts: I) -> AnnotationAccuracy
where
    I: IntoIterator<Item = &'a AnnotationVerdict>,
{
    let (mut n, mut exact, mut lenient) = (0usize, 0usize, 0usize);
    for v in verdicts {
        n += 1;
        match v.agreement {
            Agreement::Match => {
                exact += 1;
                lenient += 1;
            }
            Agreement::Partial => lenient += 1,
            Agreement::Mismatch => {}
        }
    }
    let share = |k: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
    AnnotationAccuracy { annotated: n, exact: share(exact), lenient: share(lenient) }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImprovementSuggestion {
    pub text: String,
    pub turn_ids: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackReport {
    pub metrics: SessionMetrics,
    /// Evenness at report precision (2 decimals).
    pub trqf_evenness: Option<f64>,
    pub toulmin_evenness: Option<f64>,
    pub annotation_accuracy: AnnotationAccuracy,
    pub self_reflection: String,
    pub suggestions: Vec<ImprovementSuggestion>,
}

pub trait FeedbackGenerator: Send + Sync {
    fn improvements(
        &self,
        state: &SessionState,
        counts: &CountTable,
        self_reflection: &str,
    ) -> Result<Vec<ImprovementSuggestion>, PedagogyError>;

    fn answer_followup(
        &self,
        report: &FeedbackReport,
        transcript: &[DialogueTurn],
        question: &str,
    ) -> Result<String, PedagogyError>;
}

/// The lowest-count category, ties resolved by listing order.
fn weakest<L: Ordinal>(counts: &[u64]) -> L {
    let (i, _) = counts.iter().enumerate().min_by_key(|(i, c)| (**c, *i)).expect("nonempty");
    L::ALL[i]
}

fn first_n(ids: impl Iterator<Item = u64>, n: usize) -> Vec<u64> {
    ids.take(n).collect()
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ScriptedFeedback;

impl ScriptedFeedback {
    fn question_turns_followed_by(state: &SessionState, pred: impl Fn(&DialogueTurn) -> bool) -> Vec<u64> {
        let t = &state.transcript;
        let ids = t.iter().enumerate().filter_map(|(i, turn)| {
            if !turn.speaker.is_teacher() {
                return None;
            }
            let follows = t[i + 1..].iter().take_while(|x| !x.speaker.is_teacher()).any(&pred);
            follows.then_some(turn.turn_id)
        });
        first_n(ids, 3)
    }
}

impl FeedbackGenerator for ScriptedFeedback {
    fn improvements(
        &self,
        state: &SessionState,
        counts: &CountTable,
        _self_reflection: &str,
    ) -> Result<Vec<ImprovementSuggestion>, PedagogyError> {
        let teacher_ids = first_n(state.transcript.iter().filter(|t| t.speaker.is_teacher()).map(|t| t.turn_id), 3);
        let student_ids = |pred: &dyn Fn(&DialogueTurn) -> bool| {
            first_n(state.transcript.iter().filter(|t| !t.speaker.is_teacher() && pred(t)).map(|t| t.turn_id), 3)
        };
        let or_teacher = |ids: Vec<u64>| if ids.is_empty() { teacher_ids.clone() } else { ids };
        let mut out = Vec::new();

        let question = weakest::<TrqfLabel>(&counts.trqf);
        let (text, ids) = match question {
            TrqfLabel::Epistemic => (
                format!(
                    "You asked few Epistemic questions ({}); after a student states an answer, ask how they know it is \
                     true, for example \"How can you be sure that works?\"",
                    counts.trqf[0]
                ),
                Self::question_turns_followed_by(state, |t| t.toulmin_labels.contains(&ToulminLabel::Claim)),
            ),
            TrqfLabel::Teleological => (
                format!(
                    "You asked few Teleological questions ({}); probe students' methods by asking why they chose a \
                     step, for example \"Why did you multiply instead of adding?\"",
                    counts.trqf[1]
                ),
                Self::question_turns_followed_by(state, |t| tokens(&t.text).iter().any(|w| is_numeric_token(w))),
            ),
            TrqfLabel::Communicative => (
                format!(
                    "You asked few Communicative questions ({}); invite students to explain ideas to each other, for \
                     example \"Can someone restate that in their own words?\"",
                    counts.trqf[2]
                ),
                Self::question_turns_followed_by(state, |_| true),
            ),
        };
        out.push(ImprovementSuggestion { text, turn_ids: or_teacher(ids) });

        let component = weakest::<ToulminLabel>(&counts.toulmin);
        let advice = match component {
            ToulminLabel::Claim => "few responses committed to an answer; ask students to state a result before explaining it",
            ToulminLabel::Data => "responses rarely cited evidence; ask which numbers or facts support an answer",
            ToulminLabel::Warrant => "responses rarely linked evidence to a general rule; ask why the evidence leads to the answer",
            ToulminLabel::Backing => "responses rarely grounded rules in definitions or properties; ask where a rule comes from",
            ToulminLabel::Qualifier => "responses rarely said how certain they were; ask how sure students are and why",
            ToulminLabel::Rebuttal => "responses rarely considered exceptions; ask whether there is a case where the idea fails",
        };
        let ids = student_ids(&|t: &DialogueTurn| {
            t.toulmin_labels.contains(&ToulminLabel::Claim) && !t.toulmin_labels.contains(&component)
        });
        out.push(ImprovementSuggestion {
            text: format!("{component} appeared {} times: {advice}.", counts.toulmin[component.rank() - 1]),
            turn_ids: or_teacher(ids),
        });

        let disputed: Vec<u64> = state
            .annotations
            .values()
            .filter(|v| v.agreement != Agreement::Match)
            .map(|v| v.turn_id)
            .collect();
        if !disputed.is_empty() {
            out.push(ImprovementSuggestion {
                text: "Revisit the turns where your labels differed from the system coding and compare the cues that fired.".into(),
                turn_ids: disputed,
            });
        }
        Ok(out)
    }

    fn answer_followup(
        &self,
        report: &FeedbackReport,
        transcript: &[DialogueTurn],
        question: &str,
    ) -> Result<String, PedagogyError> {
        if question.trim().is_empty() {
            return Err(PedagogyError::EmptyText);
        }
        let p = padded(question);
        let toks = tokens(question);
        if let Some(pos) = toks.iter().position(|t| t == "turn") {
            if let Some(id) = toks.get(pos + 1).and_then(|n| n.parse::<u64>().ok()) {
                return Ok(match transcript.iter().find(|t| t.turn_id == id) {
                    Some(t) => {
                        let labels: Vec<&str> = t
                            .trqf_labels
                            .iter()
                            .map(|l| l.as_str())
                            .chain(t.toulmin_labels.iter().map(|l| l.as_str()))
                            .collect();
                        format!(
                            "Turn {id} was \"{}\" and was coded {}.",
                            t.text,
                            if labels.is_empty() { "with no label".to_string() } else { labels.join(", ") }
                        )
                    }
                    None => format!("There is no turn {id} in this session."),
                });
            }
        }
        for l in TrqfLabel::ALL {
            if has_phrase(&p, &l.as_str().to_lowercase()) {
                let ids: Vec<String> = transcript
                    .iter()
                    .filter(|t| t.trqf_labels.contains(l))
                    .map(|t| t.turn_id.to_string())
                    .collect();
                return Ok(format!(
                    "You asked {} {} question(s){}.",
                    report.metrics.trqf_counts[l],
                    l,
                    if ids.is_empty() { String::new() } else { format!(", at turns {}", ids.join(", ")) }
                ));
            }
        }
        for l in ToulminLabel::ALL {
            if has_phrase(&p, &l.as_str().to_lowercase()) {
                return Ok(format!("Student responses contained {} {} code(s).", report.metrics.toulmin_counts[l], l));
            }
        }
        if ["evenness", "diverse", "diversity", "variety", "balance", "balanced"].iter().any(|w| has_phrase(&p, w)) {
            let fmt = |e: Option<f64>| e.map_or("undefined".to_string(), |v| format!("{v:.2}"));
            return Ok(format!(
                "Evenness runs from 0 (one category only) to 1 (all categories used equally). Your questions scored {} \
                 and student responses scored {}.",
                fmt(report.trqf_evenness),
                fmt(report.toulmin_evenness)
            ));
        }
        let first = report.suggestions.first().map(|s| s.text.as_str()).unwrap_or("Keep practicing.");
        Ok(format!("The main next step from this session: {first}"))
    }
}

/// Model-written improvement suggestions and follow-up answers, grounded in
/// the report and transcript.
pub struct ModelFeedback<'a> {
    provider: &'a dyn ModelProvider,
}

impl<'a> ModelFeedback<'a> {
    pub fn new(provider: &'a dyn ModelProvider) -> Self {
        ModelFeedback { provider }
    }
}

fn transcript_text(turns: &[DialogueTurn]) -> String {
    turns
        .iter()
        .map(|t| {
            let who = match &t.speaker {
                Speaker::Teacher => "Teacher".to_string(),
                Speaker::Student(id) => format!("Student {id}"),
            };
            format!("[{}] {who}: {}", t.turn_id, t.text)
        })
        .collect::<Vec<_>>()
        .join("\n")
}

impl FeedbackGenerator for ModelFeedback<'_> {
    fn improvements(
        &self,
        state: &SessionState,
        counts: &CountTable,
        self_reflection: &str,
    ) -> Result<Vec<ImprovementSuggestion>, PedagogyError> {
        #[derive(Deserialize)]
        struct Reply {
            suggestions: Vec<ImprovementSuggestion>,
        }
        let user = format!(
            "Counts: {}\nSelf-reflection: {self_reflection}\nTranscript:\n{}",
            serde_json::to_string(counts).unwrap_or_default(),
            transcript_text(&state.transcript)
        );
        let raw = self.provider.complete(&ModelRequest {
            task: "overall_feedback".into(),
            system: "Give a teacher at least two concrete improvement suggestions for leading mathematical \
                     argumentation. Reply with JSON {\"suggestions\": [{\"text\": ..., \"turn_ids\": [...]}]} citing \
                     the bracketed turn ids."
                .into(),
            user,
        })?;
        Ok(parse_json_object::<Reply>(&raw)?.suggestions)
    }

    fn answer_followup(
        &self,
        report: &FeedbackReport,
        transcript: &[DialogueTurn],
        question: &str,
    ) -> Result<String, PedagogyError> {
        if question.trim().is_empty() {
            return Err(PedagogyError::EmptyText);
        }
        let user = format!(
            "Report: {}\nTranscript:\n{}\nQuestion: {question}",
            serde_json::to_string(report).unwrap_or_default(),
            transcript_text(transcript)
        );
        let raw = self.provider.complete(&ModelRequest {
            task: "answer_followup".into(),
            system: "Answer the teacher's question about their session using only the report and transcript.".into(),
            user,
        })?;
        let answer = raw.trim().to_string();
        if answer.is_empty() {
            return Err(PedagogyError::GeneratorFailure("empty answer".into()));
        }
        Ok(answer)
    }
}

/// End-of-session report: counts and evenness for the session, annotation
/// accuracy and at least two turn-referenced improvement suggestions.
pub fn overall_feedback(
    state: &SessionState,
    self_reflection: &str,
    generator: &dyn FeedbackGenerator,
) -> Result<FeedbackReport, PedagogyError> {
    if self_reflection.trim().is_empty() {
        return Err(PedagogyError::EmptyReflection);
    }
    if state.annotations.is_empty() {
        return Err(PedagogyError::NoAnnotations);
    }
    let counts = CountTable::from_turns(&state.transcript);
    let metrics = SessionMetrics::from_counts(&counts);
    let suggestions = generator.improvements(state, &counts, self_reflection)?;
    let known: std::collections::HashSet<u64> = state.transcript.iter().map(|t| t.turn_id).collect();
    if suggestions.len() < 2 || suggestions.iter().any(|s| s.turn_ids.is_empty() || s.turn_ids.iter().any(|id| !known.contains(id))) {
        return Err(PedagogyError::GeneratorFailure(
            "feedback needs at least two suggestions that cite turns of this session".into(),
        ));
    }
    Ok(FeedbackReport {
        trqf_evenness: metrics.trqf_evenness.map(|e| round_to(e, 2)),
        toulmin_evenness: metrics.toulmin_evenness.map(|e| round_to(e, 2)),
        metrics,
        annotation_accuracy: annotation_accuracy(state.annotations.values()),
        self_reflection: self_reflection.trim().to_string(),
        suggestions,
    })
}

pub fn answer_followup(
    report: &FeedbackReport,
    transcript: &[DialogueTurn],
    question: &str,
    generator: &dyn FeedbackGenerator,
) -> Result<String, PedagogyError> {
    generator.answer_followup(report, transcript, question)
}

/// A gold-corpus line: `{text, role, labels}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldItem {
    pub text: String,
    pub role: GoldRole,
    pub labels: Vec<CodeLabel>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GoldRole {
    Teacher,
    Student,
}

pub fn parse_gold_corpus(jsonl: &str) -> Result<Vec<GoldItem>, serde_json::Error> {
    jsonl.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GoldScore {
    pub items: usize,
    pub exact_matches: usize,
    pub partial_matches: usize,
    pub misses: Vec<(String, Vec<CodeLabel>, Vec<CodeLabel>)>,
}

impl GoldScore {
    pub fn exact_rate(&self) -> f64 {
        self.exact_matches as f64 / self.items.max(1) as f64
    }

    pub fn lenient_rate(&self) -> f64 {
        (self.exact_matches + self.partial_matches) as f64 / self.items.max(1) as f64
    }
}

/// Exact multiset agreement of a classifier with the gold labels.
pub fn score_gold(items: &[GoldItem], classifier: &dyn DiscourseClassifier) -> Result<GoldScore, PedagogyError> {
    let mut score = GoldScore { items: items.len(), exact_matches: 0, partial_matches: 0, misses: Vec::new() };
    for item in items {
        let predicted: Vec<CodeLabel> = match item.role {
            GoldRole::Teacher => classifier.classify_question(&item.text, &[])?.iter().map(|l| CodeLabel::Trqf(*l)).collect(),
            GoldRole::Student => {
                classifier.classify_response(&item.text, &[])?.iter().map(|l| CodeLabel::Toulmin(*l)).collect()
            }
        };
        let gold: Multiset<CodeLabel> = item.labels.iter().copied().collect();
        let pred: Multiset<CodeLabel> = predicted.iter().copied().collect();
        match agreement(&gold, &pred) {
            Agreement::Match => score.exact_matches += 1,
            a => {
                if a == Agreement::Partial {
                    score.partial_matches += 1;
                }
                score.misses.push((item.text.clone(), gold.as_slice().to_vec(), pred.as_slice().to_vec()));
            }
        }
    }
    Ok(score)
}

/// Per-category code counts for a transcript, keyed for display.
pub fn label_table(turns: &[DialogueTurn]) -> BTreeMap<&'static str, u64> {
    let c = CountTable::from_turns(turns);
    let mut m = BTreeMap::new();
    for l in TrqfLabel::ALL {
        m.insert(l.as_str(), c.trqf[l.rank() - 1]);
    }
    for l in ToulminLabel::ALL {
        m.insert(l.as_str(), c.toulmin[l.rank() - 1]);
    }
    m
}
