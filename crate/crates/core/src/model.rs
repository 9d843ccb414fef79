//! Shared domain vocabulary: classroom contexts, student profiles, dialogue
//! turns, framework labels and affect states.
//!
//! Every enum serializes as its exact PascalCase variant name and every struct
//! uses snake_case keys. The UI and the fixture files depend on that shape.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance on the sum of a distilled histogram.
pub const HISTOGRAM_TOLERANCE: f64 = 1e-9;

/// Fixed pool of display names. Profiles never carry names from the source
/// transcripts.
pub const NAME_POOL: &[&str] = &[
    "Ava", "Ben", "Chloe", "Diego", "Emma", "Farah", "Gabe", "Hana", "Isaac", "Jada", "Kai",
    "Lena", "Marco", "Nia", "Omar", "Priya", "Quinn", "Rosa", "Sam", "Tariq", "Uma", "Victor",
    "Wren", "Yusuf", "Zoe", "Leo", "Maya", "Noah", "Ivy", "Eli",
];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ValidationError {
    #[error("grade level {0} is outside 1..=12")]
    OutOfRangeGrade(i64),
    #[error("math topic is empty")]
    EmptyTopic,
    #[error("{dimension} histogram is not normalized (sum {sum})")]
    UnnormalizedDistillation { dimension: &'static str, sum: f64 },
    #[error("context has not been distilled")]
    MissingDistillation,
    #[error("profile {id:?}: {reason}")]
    InvalidProfile { id: String, reason: String },
    #[error("turn {turn_id}: {reason}")]
    InvalidTurn { turn_id: u64, reason: String },
}

/// An enum whose variants carry a total order matching their listing order.
pub trait Ordinal: Copy + Ord + fmt::Debug + 'static {
    const ALL: &'static [Self];

    /// 1-based position in the listing order.
    fn rank(self) -> usize {
        Self::ALL.iter().position(|v| *v == self).expect("variant listed in ALL") + 1
    }

    fn from_rank(rank: usize) -> Option<Self> {
        rank.checked_sub(1).and_then(|i| Self::ALL.get(i).copied())
    }
}

macro_rules! label_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub fn as_str(self) -> &'static str {
                match self {
                    $(Self::$variant => stringify!($variant)),+
                }
            }
        }

        impl Ordinal for $name {
            const ALL: &'static [Self] = &[$(Self::$variant),+];
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = UnknownVariant;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $(stringify!($variant) => Ok(Self::$variant),)+
                    _ => Err(UnknownVariant { kind: stringify!($name), value: s.to_string() }),
                }
            }
        }
    };
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown {kind} variant {value:?}")]
pub struct UnknownVariant {
    pub kind: &'static str,
    pub value: String,
}

label_enum!(ParticipationPattern { TeacherCall, Voluntary, Mixed });
label_enum!(Engagement { Low, Medium, High });
label_enum!(MathLevel {
    Beginner,
    BeginnerIntermediate,
    Intermediate,
    IntermediateProficient,
    Proficient,
});
label_enum!(
    /// Ordered as listed; the order carries no claim beyond giving retrieval a distance.
    ArgumentationLevel {
        None,
        StatementOnly,
        SimpleReasoning,
        PartialReasoning,
        Justification,
        ApplicationReasoning,
        ReasoningWithJustification,
        GuidanceReasoning,
        Clarification,
    }
);
label_enum!(EmojiState { Neutral, Happy, Curious, Confused, Thinking });
label_enum!(
    /// Teacher question categories.
    TrqfLabel { Epistemic, Teleological, Communicative }
);
label_enum!(
    /// Argument components found in student responses.
    ToulminLabel { Claim, Data, Warrant, Backing, Qualifier, Rebuttal }
);

/// A multiset of labels kept in canonical (sorted) order, so equality of two
/// multisets is equality of the underlying vectors.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "Vec<L>", into = "Vec<L>")]
pub struct Multiset<L: Ord + Clone>(Vec<L>);

impl<L: Ord + Clone> Multiset<L> {
    pub fn new() -> Self {
        Multiset(Vec::new())
    }

    pub fn insert(&mut self, label: L) {
        let at = self.0.partition_point(|l| *l <= label);
        self.0.insert(at, label);
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn count(&self, label: &L) -> usize {
        self.0.iter().filter(|l| *l == label).count()
    }

    pub fn contains(&self, label: &L) -> bool {
        self.0.binary_search(label).is_ok()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, L> {
        self.0.iter()
    }

    pub fn as_slice(&self) -> &[L] {
        &self.0
    }

    /// Multiset intersection (minimum multiplicities).
    pub fn intersection(&self, other: &Self) -> Self {
        let mut counts: BTreeMap<&L, usize> = BTreeMap::new();
        for l in &other.0 {
            *counts.entry(l).or_default() += 1;
        }
        let mut out = Vec::new();
        for l in &self.0 {
            if let Some(c) = counts.get_mut(l) {
                if *c > 0 {
                    *c -= 1;
                    out.push(l.clone());
                }
            }
        }
        Multiset(out)
    }
}

impl<L: Ord + Clone> Default for Multiset<L> {
    fn default() -> Self {
        Self::new()
    }
}

impl<L: Ord + Clone> From<Vec<L>> for Multiset<L> {
    fn from(mut v: Vec<L>) -> Self {
        v.sort();
        Multiset(v)
    }
}

impl<L: Ord + Clone> From<Multiset<L>> for Vec<L> {
    fn from(m: Multiset<L>) -> Self {
        m.0
    }
}

impl<L: Ord + Clone> FromIterator<L> for Multiset<L> {
    fn from_iter<I: IntoIterator<Item = L>>(iter: I) -> Self {
        Multiset::from(iter.into_iter().collect::<Vec<_>>())
    }
}

impl<'a, L: Ord + Clone> IntoIterator for &'a Multiset<L> {
    type Item = &'a L;
    type IntoIter = std::slice::Iter<'a, L>;

    fn into_iter(self) -> Self::IntoIter {
        self.0.iter()
    }
}

/// Target distributions a class description is distilled into. Index `i` of
/// each histogram is the mass on the variant of rank `i + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextDistillation {
    pub engagement: [f64; 3],
    pub math_level: [f64; 5],
    pub argumentation_level: [f64; 9],
}

impl ContextDistillation {
    pub fn uniform() -> Self {
        ContextDistillation {
            engagement: [1.0 / 3.0; 3],
            math_level: [1.0 / 5.0; 5],
            argumentation_level: [1.0 / 9.0; 9],
        }
    }

    /// Builds a distillation from unnormalized nonnegative weights.
    pub fn from_weights(engagement: [f64; 3], math_level: [f64; 5], argumentation_level: [f64; 9]) -> Self {
        fn norm<const N: usize>(w: [f64; N]) -> [f64; N] {
            let total: f64 = w.iter().sum();
            if total <= 0.0 || !total.is_finite() {
                return [1.0 / N as f64; N];
            }
            w.map(|x| x / total)
        }
        ContextDistillation {
            engagement: norm(engagement),
            math_level: norm(math_level),
            argumentation_level: norm(argumentation_level),
        }
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        check_histogram("engagement", &self.engagement)?;
        check_histogram("math_level", &self.math_level)?;
        check_histogram("argumentation_level", &self.argumentation_level)
    }

    pub fn engagement_mean_rank(&self) -> f64 {
        mean_rank(&self.engagement)
    }

    pub fn math_mean_rank(&self) -> f64 {
        mean_rank(&self.math_level)
    }

    pub fn argumentation_mean_rank(&self) -> f64 {
        mean_rank(&self.argumentation_level)
    }
}

fn check_histogram(dimension: &'static str, h: &[f64]) -> Result<(), ValidationError> {
    let sum: f64 = h.iter().sum();
    let bad_entry = h.iter().any(|x| !x.is_finite() || *x < 0.0);
    if bad_entry || !sum.is_finite() || (sum - 1.0).abs() > HISTOGRAM_TOLERANCE {
        return Err(ValidationError::UnnormalizedDistillation { dimension, sum });
    }
    Ok(())
}

fn mean_rank(h: &[f64]) -> f64 {
    h.iter().enumerate().map(|(i, p)| (i + 1) as f64 * p).sum()
}

/// Raw classroom settings as entered by the teacher.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassroomContext {
    pub grade_level: i64,
    pub math_topic: String,
    #[serde(default)]
    pub class_description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distilled: Option<ContextDistillation>,
}

/// A context whose invariants have been checked and whose distillation is present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ClassroomContext", into = "ClassroomContext")]
pub struct ValidatedContext {
    inner: ClassroomContext,
}

impl ValidatedContext {
    pub fn grade_level(&self) -> u8 {
        self.inner.grade_level as u8
    }

    pub fn math_topic(&self) -> &str {
        &self.inner.math_topic
    }

    pub fn class_description(&self) -> &str {
        &self.inner.class_description
    }

    pub fn distilled(&self) -> &ContextDistillation {
        self.inner.distilled.as_ref().expect("validated context is distilled")
    }

    pub fn as_raw(&self) -> &ClassroomContext {
        &self.inner
    }
}

impl TryFrom<ClassroomContext> for ValidatedContext {
    type Error = ValidationError;

    fn try_from(raw: ClassroomContext) -> Result<Self, Self::Error> {
        validate_context(raw)
    }
}

impl From<ValidatedContext> for ClassroomContext {
    fn from(v: ValidatedContext) -> Self {
        v.inner
    }
}

fn collapse_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Checks grade range, topic and distillation, and normalizes whitespace in
/// the topic and description.
pub fn validate_context(raw: ClassroomContext) -> Result<ValidatedContext, ValidationError> {
    if !(1..=12).contains(&raw.grade_level) {
        return Err(ValidationError::OutOfRangeGrade(raw.grade_level));
    }
    let math_topic = collapse_whitespace(&raw.math_topic);
    if math_topic.is_empty() {
        return Err(ValidationError::EmptyTopic);
    }
    let distilled = raw.distilled.ok_or(ValidationError::MissingDistillation)?;
    distilled.validate()?;
    Ok(ValidatedContext {
        inner: ClassroomContext {
            grade_level: raw.grade_level,
            math_topic,
            class_description: collapse_whitespace(&raw.class_description),
            distilled: Some(distilled),
        },
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudentProfile {
    pub profile_id: String,
    pub display_name: String,
    pub participation_pattern: ParticipationPattern,
    pub engagement: Engagement,
    pub math_level: MathLevel,
    pub argumentation_level: ArgumentationLevel,
    pub typical_utterances: Vec<String>,
    pub source_lesson: String,
}

impl StudentProfile {
    pub fn validate(&self) -> Result<(), ValidationError> {
        let fail = |reason: &str| {
            Err(ValidationError::InvalidProfile { id: self.profile_id.clone(), reason: reason.to_string() })
        };
        if self.profile_id.is_empty() || self.profile_id.chars().any(char::is_whitespace) {
            return fail("profile_id must be a nonempty token");
        }
        if self.display_name.trim().is_empty() {
            return fail("display_name is empty");
        }
        if self.typical_utterances.is_empty() {
            return fail("typical_utterances is empty");
        }
        if self.typical_utterances.iter().any(|u| u.trim().is_empty()) {
            return fail("typical_utterances contains an empty entry");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Speaker {
    Teacher,
    Student(String),
}

impl Speaker {
    pub fn is_teacher(&self) -> bool {
        matches!(self, Speaker::Teacher)
    }

    pub fn student_id(&self) -> Option<&str> {
        match self {
            Speaker::Student(id) => Some(id),
            Speaker::Teacher => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueTurn {
    pub turn_id: u64,
    pub speaker: Speaker,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub affect: Option<EmojiState>,
    #[serde(default)]
    pub trqf_labels: Multiset<TrqfLabel>,
    #[serde(default)]
    pub toulmin_labels: Multiset<ToulminLabel>,
}

impl DialogueTurn {
    pub fn teacher(turn_id: u64, text: impl Into<String>) -> Self {
        DialogueTurn {
            turn_id,
            speaker: Speaker::Teacher,
            text: text.into(),
            affect: None,
            trqf_labels: Multiset::new(),
            toulmin_labels: Multiset::new(),
        }
    }

    pub fn student(turn_id: u64, profile_id: impl Into<String>, text: impl Into<String>, affect: EmojiState) -> Self {
        DialogueTurn {
            turn_id,
            speaker: Speaker::Student(profile_id.into()),
            text: text.into(),
            affect: Some(affect),
            trqf_labels: Multiset::new(),
            toulmin_labels: Multiset::new(),
        }
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        let fail = |reason: &str| Err(ValidationError::InvalidTurn { turn_id: self.turn_id, reason: reason.to_string() });
        if self.text.trim().is_empty() {
            return fail("text is empty");
        }
        match self.speaker {
            Speaker::Teacher => {
                if !self.toulmin_labels.is_empty() {
                    return fail("teacher turn carries Toulmin labels");
                }
                if self.affect.is_some() {
                    return fail("teacher turn carries an affect");
                }
            }
            Speaker::Student(_) => {
                if !self.trqf_labels.is_empty() {
                    return fail("student turn carries TRQF labels");
                }
                if self.affect.is_none() {
                    return fail("student turn has no affect");
                }
            }
        }
        Ok(())
    }
}

/// Checks every turn and that turn ids strictly increase.
pub fn validate_transcript(turns: &[DialogueTurn]) -> Result<(), ValidationError> {
    let mut last: Option<u64> = None;
    for t in turns {
        t.validate()?;
        if last.is_some_and(|l| t.turn_id <= l) {
            return Err(ValidationError::InvalidTurn {
                turn_id: t.turn_id,
                reason: "turn ids are not strictly increasing".into(),
            });
        }
        last = Some(t.turn_id);
    }
    Ok(())
}

/// One reasoning sentence and exactly two recommended questions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Suggestion {
    pub reasoning: String,
    pub recommended_questions: [String; 2],
}

impl Suggestion {
    /// Cardinality and punctuation problems, empty when well formed.
    pub fn shape_violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let r = self.reasoning.trim();
        if !r.ends_with('.') {
            out.push("reasoning must end with a period".into());
        }
        if r.contains('?') {
            out.push("reasoning must not contain a question".into());
        }
        if sentence_count(r) != 1 {
            out.push("reasoning must be exactly one sentence".into());
        }
        for (i, q) in self.recommended_questions.iter().enumerate() {
            let q = q.trim();
            if !q.ends_with('?') {
                out.push(format!("recommended question {} must end with '?'", i + 1));
            } else if q.trim_end_matches('?').trim().is_empty() {
                out.push(format!("recommended question {} is empty", i + 1));
            }
        }
        out
    }
}

/// Counts sentence terminators that end a sentence: `.`, `!` or `?` followed by
/// whitespace or end of text. Decimal points inside numbers do not count.
pub fn sentence_count(text: &str) -> usize {
    let chars: Vec<char> = text.trim().chars().collect();
    let mut n = 0;
    for (i, c) in chars.iter().enumerate() {
        if matches!(c, '.' | '!' | '?') {
            let next = chars.get(i + 1);
            if next.is_none() || next.is_some_and(|n| n.is_whitespace()) {
                n += 1;
            }
        }
    }
    n
}
