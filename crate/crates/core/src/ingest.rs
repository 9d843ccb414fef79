//! Builds the student-profile dataset from classroom transcripts.
//!
//! Transcripts are UTF-8 text with one `TAG: utterance` per line. `T` is the
//! teacher, `S1`, `S2`, ... are students, anything else (`O`, `Class`, ...)
//! is attributed to role `Other`. Blank lines are ignored.
//!
//! # Scripted extraction rules
//!
//! The scripted extractor is a pure function of a lesson's segments:
//!
//! * **Participation.** A student turn is *called* when the segment right
//!   before it is a teacher turn whose text contains the student's tag as a
//!   whole word. Called fraction > 0.7 is `TeacherCall`, < 0.3 is `Voluntary`,
//!   anything else `Mixed`.
//! * **Engagement.** Utterance counts are ranked within the lesson using the
//!   mid-rank `(less + equal / 2) / students`. Below 1/3 is `Low`, above 2/3
//!   is `High`, otherwise `Medium`.
//! * **Math level.** Mean tokens per utterance binned at 4, 8, 14 and 22
//!   (inclusive upper bounds) onto `Beginner` .. `Proficient`.
//! * **Argumentation level.** Each utterance climbs the ladder below from the
//!   top and stops at the first rung it satisfies; the profile takes the
//!   highest rung over all its utterances.
//!
//!   | rung | condition |
//!   |------|-----------|
//!   | Clarification | a question referring to someone else's idea (`you mean`, `you said`, `are you saying`, ...) |
//!   | GuidanceReasoning | steers others through a method (`you should`, `you have to`, `first you`, `let's`, ...) |
//!   | ReasoningWithJustification | `because` plus a consequence link (`that means`, `which means`, `that's why`, `therefore`) |
//!   | ApplicationReasoning | applies the idea to a case (`for example`, `like if`, `like when`, `in real life`, ...) |
//!   | Justification | `because` plus a claim verb (`is`, `equals`, `get`, `think`, ...) |
//!   | PartialReasoning | a reasoning connective that trails off (`...`, `not sure`, `or something`, ...) |
//!   | SimpleReasoning | a reasoning connective (`because`, `so that`, `so`, `since`, `cause`) |
//!   | StatementOnly | any other utterance with content |
//!   | None | backchannel only (`um`, `yeah`, `I don't know`, ...) |
//!
//! * **Typical utterances.** The student's distinct utterances, longest first
//!   (ties keep transcript order), at most five.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    ArgumentationLevel, Engagement, MathLevel, ParticipationPattern, StudentProfile, ValidationError, NAME_POOL,
};
use crate::provider::{parse_json_object, ModelProvider, ModelRequest, ProviderError};
use crate::text::{has_phrase, padded, tokens};

pub const MAX_TYPICAL_UTTERANCES: usize = 5;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("line {line_no}: missing `TAG:` separator")]
    MalformedLine { line_no: usize },
    #[error("unknown student {0:?}")]
    UnknownStudent(String),
    #[error("extractor failed for {student}: {cause}")]
    ExtractorFailure { student: String, cause: ProviderError },
    #[error("duplicate profile id {0:?}")]
    DuplicateProfileId(String),
    #[error("profile {profile_id} rejected: {reason}")]
    Rejected { profile_id: String, reason: String },
    #[error("no lessons supplied")]
    NoLessons,
    #[error("lesson {lesson}: {source}")]
    InLesson {
        lesson: String,
        #[source]
        source: Box<IngestError>,
    },
    #[error(transparent)]
    Invalid(#[from] ValidationError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("dataset line {line_no}: {source}")]
    Json {
        line_no: usize,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SegmentRole {
    Teacher,
    Student,
    Other,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptSegment {
    pub lesson_id: String,
    pub index: usize,
    pub speaker_tag: String,
    pub role: SegmentRole,
    pub text: String,
}

fn role_for_tag(tag: &str) -> SegmentRole {
    if tag == "T" {
        return SegmentRole::Teacher;
    }
    match tag.strip_prefix('S') {
        Some(n) if !n.is_empty() && n.bytes().all(|b| b.is_ascii_digit()) && n.parse::<u32>().is_ok_and(|v| v > 0) => {
            SegmentRole::Student
        }
        _ => SegmentRole::Other,
    }
}

/// Splits a transcript into attributed segments, one per nonempty utterance line.
pub fn segment_transcript(raw: &str, lesson_id: &str) -> Result<Vec<TranscriptSegment>, IngestError> {
    let mut out = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let Some((tag, text)) = line.split_once(':') else {
            return Err(IngestError::MalformedLine { line_no: i + 1 });
        };
        let tag = tag.trim();
        if tag.is_empty() || tag.chars().any(char::is_whitespace) {
            return Err(IngestError::MalformedLine { line_no: i + 1 });
        }
        let text = text.trim();
        if text.is_empty() {
            continue;
        }
        out.push(TranscriptSegment {
            lesson_id: lesson_id.to_string(),
            index: out.len(),
            speaker_tag: tag.to_string(),
            role: role_for_tag(tag),
            text: text.to_string(),
        });
    }
    Ok(out)
}

/// Student tags of a lesson in numeric order.
pub fn student_keys(segments: &[TranscriptSegment]) -> Vec<String> {
    let mut keys: Vec<&str> = segments
        .iter()
        .filter(|s| s.role == SegmentRole::Student)
        .map(|s| s.speaker_tag.as_str())
        .collect::<HashSet<_>>()
        .into_iter()
        .collect();
    keys.sort_by_key(|k| k[1..].parse::<u32>().unwrap_or(u32::MAX));
    keys.into_iter().map(String::from).collect()
}

pub fn profile_id_for(lesson_id: &str, student_key: &str) -> String {
    format!("{lesson_id}-{student_key}").to_lowercase().replace(char::is_whitespace, "_")
}

/// Profile dimensions as produced by an extractor, before identity fields are attached.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractedProfile {
    pub participation_pattern: ParticipationPattern,
    pub engagement: Engagement,
    pub math_level: MathLevel,
    pub argumentation_level: ArgumentationLevel,
    pub typical_utterances: Vec<String>,
}

pub trait ProfileExtractor: Send + Sync {
    /// `segments` is the whole lesson; `student_key` is known to speak in it.
    fn extract(&self, segments: &[TranscriptSegment], student_key: &str) -> Result<ExtractedProfile, IngestError>;
}

/// Deterministic rule-based extractor; see the module docs for the rule table.
#[derive(Debug, Clone, Copy, Default)]
pub struct ScriptedExtractor;

fn is_called(prev: Option<&TranscriptSegment>, student_key: &str) -> bool {
    prev.is_some_and(|p| {
        p.role == SegmentRole::Teacher
            && p.text.split(|c: char| !c.is_alphanumeric()).any(|w| w == student_key)
    })
}

pub fn participation_for(called_fraction: f64) -> ParticipationPattern {
    if called_fraction > 0.7 {
        ParticipationPattern::TeacherCall
    } else if called_fraction < 0.3 {
        ParticipationPattern::Voluntary
    } else {
        ParticipationPattern::Mixed
    }
}

pub fn engagement_for(count: usize, lesson_counts: &[usize]) -> Engagement {
    let m = lesson_counts.len().max(1) as f64;
    let less = lesson_counts.iter().filter(|&&c| c < count).count() as f64;
    let equal = lesson_counts.iter().filter(|&&c| c == count).count() as f64;
    let midrank = (less + equal / 2.0) / m;
    if midrank < 1.0 / 3.0 {
        Engagement::Low
    } else if midrank > 2.0 / 3.0 {
        Engagement::High
    } else {
        Engagement::Medium
    }
}

pub fn math_level_for(mean_tokens: f64) -> MathLevel {
    match mean_tokens {
        x if x <= 4.0 => MathLevel::Beginner,
        x if x <= 8.0 => MathLevel::BeginnerIntermediate,
        x if x <= 14.0 => MathLevel::Intermediate,
        x if x <= 22.0 => MathLevel::IntermediateProficient,
        _ => MathLevel::Proficient,
    }
}

const CLARIFY_CUES: &[&str] = &[
    "you mean", "you said", "are you saying", "did you say", "do you mean", "is that what", "why did you",
    "how did you", "what did you",
];
const GUIDANCE_CUES: &[&str] = &["you should", "you have to", "you need to", "first you", "let's", "try", "what you do is"];
const CONSEQUENCE_CUES: &[&str] = &["that means", "which means", "that's why", "therefore", "so that's why"];
const APPLICATION_CUES: &[&str] = &["for example", "like if", "like when", "in real life", "if you had", "say you"];
const CLAIM_VERBS: &[&str] = &[
    "is", "are", "was", "equals", "equal", "get", "got", "gets", "think", "know", "means", "makes", "has",
    "have", "goes", "should", "would", "will", "can", "it's", "that's", "there's",
];
const REASON_CUES: &[&str] = &["because", "so that", "so", "since", "cause", "'cause"];
const TRAILING_CUES: &[&str] = &["not sure", "or something", "kind of", "i guess", "i don't know"];
const BACKCHANNEL: &[&str] = &[
    "um", "uh", "yeah", "yes", "no", "okay", "ok", "i", "don't", "know", "hmm", "huh", "mm", "what", "oh", "sure",
    "maybe", "right",
];

/// First rung of the argumentation ladder that `utterance` satisfies.
pub fn argumentation_rung(utterance: &str) -> ArgumentationLevel {
    let p = padded(utterance);
    let toks = tokens(utterance);
    let question = crate::text::is_question(utterance);
    let has_because = has_phrase(&p, "because") || has_phrase(&p, "cause");
    let any = |cues: &[&str]| cues.iter().any(|c| has_phrase(&p, c));

    if toks.is_empty() || toks.iter().all(|t| BACKCHANNEL.contains(&t.as_str())) {
        ArgumentationLevel::None
    } else if question && any(CLARIFY_CUES) {
        ArgumentationLevel::Clarification
    } else if any(GUIDANCE_CUES) {
        ArgumentationLevel::GuidanceReasoning
    } else if has_because && any(CONSEQUENCE_CUES) {
        ArgumentationLevel::ReasoningWithJustification
    } else if any(APPLICATION_CUES) {
        ArgumentationLevel::ApplicationReasoning
    } else if has_because && toks.iter().any(|t| CLAIM_VERBS.contains(&t.as_str())) {
        ArgumentationLevel::Justification
    } else if any(REASON_CUES) && (utterance.trim_end().ends_with("...") || any(TRAILING_CUES)) {
        ArgumentationLevel::PartialReasoning
    } else if any(REASON_CUES) {
        ArgumentationLevel::SimpleReasoning
    } else {
        ArgumentationLevel::StatementOnly
    }
}

/// Distinct utterances, longest first, ties in transcript order, capped.
pub fn typical_utterances(utterances: &[&str]) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut distinct: Vec<&str> = utterances.iter().copied().filter(|u| seen.insert(*u)).collect();
    distinct.sort_by_key(|u| std::cmp::Reverse(u.chars().count()));
    distinct.into_iter().take(MAX_TYPICAL_UTTERANCES).map(String::from).collect()
}

impl ProfileExtractor for ScriptedExtractor {
    fn extract(&self, segments: &[TranscriptSegment], student_key: &str) -> Result<ExtractedProfile, IngestError> {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for s in segments.iter().filter(|s| s.role == SegmentRole::Student) {
            *counts.entry(s.speaker_tag.as_str()).or_default() += 1;
        }
        let own: Vec<(usize, &TranscriptSegment)> = segments
            .iter()
            .enumerate()
            .filter(|(_, s)| s.role == SegmentRole::Student && s.speaker_tag == student_key)
            .collect();
        if own.is_empty() {
            return Err(IngestError::UnknownStudent(student_key.to_string()));
        }
        let called = own
            .iter()
            .filter(|(i, _)| is_called(i.checked_sub(1).map(|j| &segments[j]), student_key))
            .count();
        let utterances: Vec<&str> = own.iter().map(|(_, s)| s.text.as_str()).collect();
        let lesson_counts: Vec<usize> = counts.values().copied().collect();
        let mean_tokens = utterances.iter().map(|u| tokens(u).len()).sum::<usize>() as f64 / utterances.len() as f64;
        let argumentation_level = utterances
            .iter()
            .map(|u| argumentation_rung(u))
            .max()
            .unwrap_or(ArgumentationLevel::None);

        Ok(ExtractedProfile {
            participation_pattern: participation_for(called as f64 / own.len() as f64),
            engagement: engagement_for(own.len(), &lesson_counts),
            math_level: math_level_for(mean_tokens),
            argumentation_level,
            typical_utterances: typical_utterances(&utterances),
        })
    }
}

/// Delegates summarization to a language model. Output passes through the
/// same validators as scripted output.
pub struct ModelExtractor<'a> {
    provider: &'a dyn ModelProvider,
}

impl<'a> ModelExtractor<'a> {
    pub fn new(provider: &'a dyn ModelProvider) -> Self {
        ModelExtractor { provider }
    }
}

const EXTRACT_SYSTEM: &str = "You summarize one student's participation in a mathematics lesson transcript. \
Reply with a single JSON object with keys participation_pattern (TeacherCall|Voluntary|Mixed), \
engagement (Low|Medium|High), math_level (Beginner|BeginnerIntermediate|Intermediate|IntermediateProficient|Proficient), \
argumentation_level (None|StatementOnly|SimpleReasoning|PartialReasoning|Justification|ApplicationReasoning|\
ReasoningWithJustification|GuidanceReasoning|Clarification) and typical_utterances (up to 5 utterances copied verbatim \
from the student's lines).";

impl ProfileExtractor for ModelExtractor<'_> {
    fn extract(&self, segments: &[TranscriptSegment], student_key: &str) -> Result<ExtractedProfile, IngestError> {
        let mut user = format!("Student tag: {student_key}\nTranscript:\n");
        for s in segments {
            user.push_str(&format!("{}: {}\n", s.speaker_tag, s.text));
        }
        let request = ModelRequest { task: "extract_profile".into(), system: EXTRACT_SYSTEM.into(), user };
        let failure = |cause| IngestError::ExtractorFailure { student: student_key.to_string(), cause };
        let raw = self.provider.complete(&request).map_err(failure)?;
        parse_json_object(&raw).map_err(failure)
    }
}

fn name_for(profile_id: &str) -> String {
    // FNV-1a, stable across platforms and releases.
    let mut h: u64 = 0xcbf29ce484222325;
    for b in profile_id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    NAME_POOL[(h % NAME_POOL.len() as u64) as usize].to_string()
}

/// Builds and validates one student's profile.
///
/// Typical utterances must occur verbatim in the student's own segments;
/// anything else is `Rejected`.
pub fn extract_profile(
    segments: &[TranscriptSegment],
    student_key: &str,
    extractor: &dyn ProfileExtractor,
) -> Result<StudentProfile, IngestError> {
    let own: Vec<&str> = segments
        .iter()
        .filter(|s| s.role == SegmentRole::Student && s.speaker_tag == student_key)
        .map(|s| s.text.as_str())
        .collect();
    if own.is_empty() {
        return Err(IngestError::UnknownStudent(student_key.to_string()));
    }
    let lesson_id = segments[0].lesson_id.clone();
    let profile_id = profile_id_for(&lesson_id, student_key);
    let extracted = extractor.extract(segments, student_key)?;
    if let Some(bad) = extracted.typical_utterances.iter().find(|u| !own.iter().any(|o| o.contains(u.as_str()))) {
        return Err(IngestError::Rejected {
            profile_id,
            reason: format!("typical utterance {bad:?} does not occur in the transcript"),
        });
    }
    if extracted.typical_utterances.len() > MAX_TYPICAL_UTTERANCES {
        return Err(IngestError::Rejected { profile_id, reason: "more than five typical utterances".into() });
    }
    let profile = StudentProfile {
        display_name: name_for(&profile_id),
        profile_id,
        participation_pattern: extracted.participation_pattern,
        engagement: extracted.engagement,
        math_level: extracted.math_level,
        argumentation_level: extracted.argumentation_level,
        typical_utterances: extracted.typical_utterances,
        source_lesson: lesson_id,
    };
    profile.validate()?;
    Ok(profile)
}

/// A validated collection of profiles with unique ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProfileDataset {
    profiles: Vec<StudentProfile>,
}

impl ProfileDataset {
    pub fn new(profiles: Vec<StudentProfile>) -> Result<Self, IngestError> {
        let mut ids = HashSet::new();
        for p in &profiles {
            p.validate()?;
            if !ids.insert(p.profile_id.as_str()) {
                return Err(IngestError::DuplicateProfileId(p.profile_id.clone()));
            }
        }
        Ok(ProfileDataset { profiles })
    }

    pub fn profiles(&self) -> &[StudentProfile] {
        &self.profiles
    }

    pub fn into_profiles(self) -> Vec<StudentProfile> {
        self.profiles
    }

    pub fn len(&self) -> usize {
        self.profiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.profiles.is_empty()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for p in &self.profiles {
            out.push_str(&serde_json::to_string(p).expect("profile serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, IngestError> {
        let mut profiles = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let p = serde_json::from_str(line).map_err(|source| IngestError::Json { line_no: i + 1, source })?;
            profiles.push(p);
        }
        Self::new(profiles)
    }

    pub fn read(path: &Path) -> Result<Self, IngestError> {
        Self::from_jsonl(&std::fs::read_to_string(path)?)
    }

    /// Writes JSON Lines atomically: temp file in the target directory, then rename.
    pub fn write(&self, path: &Path) -> Result<(), IngestError> {
        write_atomic(path, self.to_jsonl().as_bytes())
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), IngestError> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| IngestError::Io(e.error))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lesson {
    pub lesson_id: String,
    pub text: String,
}

/// Reads every `*.txt` file in `dir`, sorted by file name; the lesson id is
/// the file stem.
pub fn read_lessons(dir: &Path) -> Result<Vec<Lesson>, IngestError> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "txt"))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let lesson_id = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            Ok(Lesson { lesson_id, text: std::fs::read_to_string(&p)? })
        })
        .collect()
}

/// A profile that failed validation, kept for human review.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewEntry {
    pub lesson_id: String,
    pub profile_id: String,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct BuildOutput {
    pub dataset: ProfileDataset,
    pub review: Vec<ReviewEntry>,
}

type LessonOutcome = Result<(Vec<StudentProfile>, Vec<ReviewEntry>), IngestError>;

fn ingest_lesson(lesson: &Lesson, extractor: &dyn ProfileExtractor) -> LessonOutcome {
    let in_lesson = |e: IngestError| IngestError::InLesson { lesson: lesson.lesson_id.clone(), source: Box::new(e) };
    let segments = segment_transcript(&lesson.text, &lesson.lesson_id).map_err(in_lesson)?;
    let mut profiles = Vec::new();
    let mut review = Vec::new();
    for key in student_keys(&segments) {
        match extract_profile(&segments, &key, extractor) {
            Ok(p) => profiles.push(p),
            Err(IngestError::Rejected { profile_id, reason }) => {
                review.push(ReviewEntry { lesson_id: lesson.lesson_id.clone(), profile_id, reason })
            }
            Err(e) => return Err(in_lesson(e)),
        }
    }
    Ok((profiles, review))
}

/// One profile per distinct (lesson, student) pair. Display names are drawn
/// from [`NAME_POOL`] in a seeded order so they are spread across lessons.
pub fn build_dataset(lessons: &[Lesson], extractor: &dyn ProfileExtractor, seed: u64) -> Result<BuildOutput, IngestError> {
    #[cfg(feature = "parallel")]
    {
        build_dataset_parallel(lessons, extractor, seed)
    }
    #[cfg(not(feature = "parallel"))]
    {
        build_dataset_sequential(lessons, extractor, seed)
    }
}

pub fn build_dataset_sequential(
    lessons: &[Lesson],
    extractor: &dyn ProfileExtractor,
    seed: u64,
) -> Result<BuildOutput, IngestError> {
    let outcomes: Vec<LessonOutcome> = lessons.iter().map(|l| ingest_lesson(l, extractor)).collect();
    finish_build(lessons, outcomes, seed)
}

#[cfg(feature = "parallel")]
pub fn build_dataset_parallel(
    lessons: &[Lesson],
    extractor: &dyn ProfileExtractor,
    seed: u64,
) -> Result<BuildOutput, IngestError> {
    use rayon::prelude::*;
    let outcomes: Vec<LessonOutcome> = lessons.par_iter().map(|l| ingest_lesson(l, extractor)).collect();
    finish_build(lessons, outcomes, seed)
}

fn finish_build(lessons: &[Lesson], outcomes: Vec<LessonOutcome>, seed: u64) -> Result<BuildOutput, IngestError> {
    if lessons.is_empty() {
        return Err(IngestError::NoLessons);
    }
    let mut profiles = Vec::new();
    let mut review = Vec::new();
    for outcome in outcomes {
        let (p, r) = outcome?;
        profiles.extend(p);
        review.extend(r);
    }
    assign_display_names(&mut profiles, seed);
    Ok(BuildOutput { dataset: ProfileDataset::new(profiles)?, review })
}

fn assign_display_names(profiles: &mut [StudentProfile], seed: u64) {
    let mut order: Vec<usize> = (0..NAME_POOL.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut used: HashMap<String, usize> = HashMap::new();
    for (i, p) in profiles.iter_mut().enumerate() {
        let base = NAME_POOL[order[i % order.len()]];
        let n = used.entry(base.to_string()).or_default();
        *n += 1;
        p.display_name = if *n == 1 { base.to_string() } else { format!("{base} {}", *n) };
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_line_case() {
        let segs = segment_transcript("T: What is x?\nS1: Five.", "l1").unwrap();
        assert_eq!(segs.len(), 2);
        assert_eq!(segs[0].role, SegmentRole::Teacher);
        assert_eq!(segs[1].role, SegmentRole::Student);
        assert_eq!(segs[1].index, 1);
        assert_eq!(segs[1].text, "Five.");
    }

    #[test]
    fn empty_stream() {
        assert!(segment_transcript("", "l1").unwrap().is_empty());
        assert!(segment_transcript("\n  \n", "l1").unwrap().is_empty());
    }

    #[test]
    fn missing_separator() {
        match segment_transcript("S2 missing separator", "l1") {
            Err(IngestError::MalformedLine { line_no }) => assert_eq!(line_no, 1),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            segment_transcript("T: ok\n\nS 2: bad tag", "l1"),
            Err(IngestError::MalformedLine { line_no: 3 })
        ));
    }

    #[test]
    fn tag_table() {
        assert_eq!(role_for_tag("T"), SegmentRole::Teacher);
        assert_eq!(role_for_tag("S12"), SegmentRole::Student);
        assert_eq!(role_for_tag("S0"), SegmentRole::Other);
        assert_eq!(role_for_tag("S"), SegmentRole::Other);
        assert_eq!(role_for_tag("O"), SegmentRole::Other);
        assert_eq!(role_for_tag("Class"), SegmentRole::Other);
    }

    #[test]
    fn keeps_colons_inside_utterances() {
        let segs = segment_transcript("T: The ratio is 2:3, right?", "l").unwrap();
        assert_eq!(segs[0].text, "The ratio is 2:3, right?");
    }

    #[test]
    fn ladder_rungs() {
        use ArgumentationLevel::*;
        assert_eq!(argumentation_rung("Five."), StatementOnly);
        assert_eq!(argumentation_rung("Um, I don't know."), None);
        assert_eq!(argumentation_rung("It's five because two plus three is five."), Justification);
        assert_eq!(argumentation_rung("So you add them..."), PartialReasoning);
        assert_eq!(argumentation_rung("So you add them."), SimpleReasoning);
        assert_eq!(argumentation_rung("Wait, do you mean the 3 in the bottom?"), Clarification);
        assert_eq!(argumentation_rung("First you divide by four."), GuidanceReasoning);
        assert_eq!(argumentation_rung("Like if you have 3 bags of 4 apples."), ApplicationReasoning);
        assert_eq!(
            argumentation_rung("It's twelve because four threes, which means we multiply."),
            ReasoningWithJustification
        );
    }

    #[test]
    fn called_single_statement_student() {
        let lesson = "T: What do you think, S1?\nS1: Five.\nT: Who else?\nS2: I think six because 2 times 3 is 6.\nS2: Or seven.\nS3: Six.\nS3: Yes.\nS3: Because 2 times 3.\n";
        let segs = segment_transcript(lesson, "l").unwrap();
        let p = ScriptedExtractor.extract(&segs, "S1").unwrap();
        assert_eq!(p.participation_pattern, ParticipationPattern::TeacherCall);
        assert_eq!(p.engagement, Engagement::Low);
        assert_eq!(p.argumentation_level, ArgumentationLevel::StatementOnly);
        assert_eq!(p.math_level, MathLevel::Beginner);
        assert_eq!(p.typical_utterances, vec!["Five."]);
    }

    #[test]
    fn voluntary_justifying_student() {
        // S1: 12 turns, 3 after a name call, 9 self-initiated; several "because" justifications.
        let mut lesson = String::new();
        for i in 0..12 {
            if i < 3 {
                lesson.push_str("T: S1, what did you get?\n");
            } else {
                lesson.push_str("T: Anyone?\n");
            }
            lesson.push_str(&format!("S1: It is {i} because we add one each time.\n"));
        }
        lesson.push_str("T: S2?\nS2: Yeah.\nT: S3?\nS3: Ten.\nS3: Eleven.\n");
        let segs = segment_transcript(&lesson, "l").unwrap();
        let p = ScriptedExtractor.extract(&segs, "S1").unwrap();
        assert_eq!(p.participation_pattern, ParticipationPattern::Voluntary);
        assert_eq!(p.engagement, Engagement::High);
        assert!(p.argumentation_level >= ArgumentationLevel::Justification);
        assert_eq!(p.typical_utterances.len(), 5);
        // Longest first: the two-digit indices come first.
        assert!(p.typical_utterances[0].contains("10") || p.typical_utterances[0].contains("11"));
    }

    #[test]
    fn mixed_participation_band() {
        assert_eq!(participation_for(0.5), ParticipationPattern::Mixed);
        assert_eq!(participation_for(0.3), ParticipationPattern::Mixed);
        assert_eq!(participation_for(0.7), ParticipationPattern::Mixed);
        assert_eq!(participation_for(0.71), ParticipationPattern::TeacherCall);
        assert_eq!(participation_for(0.29), ParticipationPattern::Voluntary);
    }

    #[test]
    fn engagement_midrank() {
        assert_eq!(engagement_for(3, &[3]), Engagement::Medium);
        assert_eq!(engagement_for(1, &[1, 5]), Engagement::Low);
        assert_eq!(engagement_for(5, &[1, 5]), Engagement::High);
        assert_eq!(engagement_for(4, &[1, 4, 9]), Engagement::Medium);
        assert_eq!(engagement_for(2, &[2, 2, 2]), Engagement::Medium);
    }

    #[test]
    fn math_bins() {
        assert_eq!(math_level_for(4.0), MathLevel::Beginner);
        assert_eq!(math_level_for(4.5), MathLevel::BeginnerIntermediate);
        assert_eq!(math_level_for(14.0), MathLevel::Intermediate);
        assert_eq!(math_level_for(22.0), MathLevel::IntermediateProficient);
        assert_eq!(math_level_for(22.1), MathLevel::Proficient);
    }

    #[test]
    fn unknown_student() {
        let segs = segment_transcript("T: Hi?\nS1: Hi.", "l").unwrap();
        assert!(matches!(extract_profile(&segs, "S9", &ScriptedExtractor), Err(IngestError::UnknownStudent(k)) if k == "S9"));
    }

    #[test]
    fn one_lesson_three_students() {
        let lessons = vec![Lesson {
            lesson_id: "L1".into(),
            text: "T: Go.\nS1: One.\nS2: Two.\nS3: Three.\nS10: Ten.\nO: (bell)\n".into(),
        }];
        let out = build_dataset(&lessons, &ScriptedExtractor, 1).unwrap();
        let ids: Vec<&str> = out.dataset.profiles().iter().map(|p| p.profile_id.as_str()).collect();
        assert_eq!(ids, ["l1-s1", "l1-s2", "l1-s3", "l1-s10"]);
        assert!(out.review.is_empty());
    }

    #[test]
    fn duplicate_ids_fail() {
        let lesson = Lesson { lesson_id: "L1".into(), text: "T: Go.\nS1: One.\n".into() };
        let r = build_dataset(&[lesson.clone(), lesson], &ScriptedExtractor, 1);
        assert!(matches!(r, Err(IngestError::DuplicateProfileId(id)) if id == "l1-s1"));
    }

    #[test]
    fn model_extractor_output_is_validated() {
        use crate::provider::CannedProvider;
        let segs = segment_transcript("T: S1?\nS1: It is five.", "l").unwrap();
        let good = r#"{"participation_pattern":"TeacherCall","engagement":"Low","math_level":"Beginner","argumentation_level":"StatementOnly","typical_utterances":["It is five."]}"#;
        let invented = r#"{"participation_pattern":"TeacherCall","engagement":"Low","math_level":"Beginner","argumentation_level":"StatementOnly","typical_utterances":["Something never said."]}"#;
        let provider = CannedProvider::new([good, invented]);
        let ex = ModelExtractor::new(&provider);
        assert!(extract_profile(&segs, "S1", &ex).is_ok());
        assert!(matches!(extract_profile(&segs, "S1", &ex), Err(IngestError::Rejected { .. })));
        assert!(matches!(extract_profile(&segs, "S1", &ex), Err(IngestError::ExtractorFailure { .. })));
    }

    #[test]
    fn atomic_write_and_read_back() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/profiles.jsonl");
        let lessons = vec![Lesson { lesson_id: "L1".into(), text: "T: Go.\nS1: One.\nS2: Two.\n".into() }];
        let ds = build_dataset(&lessons, &ScriptedExtractor, 3).unwrap().dataset;
        ds.write(&path).unwrap();
        assert_eq!(ProfileDataset::read(&path).unwrap(), ds);
    }
}
