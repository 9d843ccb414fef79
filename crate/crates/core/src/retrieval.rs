//! Roster selection: scores every profile against the distilled classroom
//! context and picks a stratified top-k.
//!
//! The default [`TaxonomicScorer`] is closed form:
//!
//! ```text
//! score = 1 - (0.4 d_engagement + 0.3 d_math + 0.3 d_argumentation)
//! d_x   = |rank(profile.x) - mean_rank(target_x)| / (ranks_x - 1)
//! ```
//!
//! Ranks are 1-based in listing order. Selection sorts by score descending
//! with ties broken by ascending profile id, reserves the best
//! `ceil(k / 5)` members of every engagement stratum that has that many
//! candidates, then fills the remaining slots by rank. Rosters smaller than
//! three carry no floors.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{IngestError, ProfileDataset};
use crate::model::{
    validate_context, ArgumentationLevel, ClassroomContext, ContextDistillation, Engagement, MathLevel, Ordinal,
    StudentProfile, ValidatedContext, ValidationError,
};
use crate::provider::{parse_json_object, ModelProvider, ModelRequest};
use crate::text::{has_phrase, padded};

pub const DEFAULT_ROSTER_SIZE: usize = 20;
pub const ENGAGEMENT_WEIGHT: f64 = 0.4;
pub const MATH_WEIGHT: f64 = 0.3;
pub const ARGUMENTATION_WEIGHT: f64 = 0.3;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("need {need} profiles, index has {have}")]
    InsufficientProfiles { have: usize, need: usize },
    #[error("duplicate profile id {0:?} in index")]
    DuplicateProfileId(String),
    #[error(transparent)]
    Load(#[from] IngestError),
}

/// Immutable, cheaply clonable profile store.
#[derive(Debug, Clone)]
pub struct ProfileIndex {
    profiles: Arc<[StudentProfile]>,
    by_id: Arc<HashMap<String, usize>>,
}

impl ProfileIndex {
    pub fn new(profiles: Vec<StudentProfile>) -> Result<Self, RetrievalError> {
        let mut by_id = HashMap::with_capacity(profiles.len());
        for (i, p) in profiles.iter().enumerate() {
            if by_id.insert(p.profile_id.clone(), i).is_some() {
                return Err(RetrievalError::DuplicateProfileId(p.profile_id.clone()));
            }
        }
        Ok(ProfileIndex { profiles: profiles.into(), by_id: Arc::new(by_id) })
    }

    pub fn from_dataset(dataset: ProfileDataset) -> Self {
        Self::new(dataset.into_profiles()).expect("dataset ids are unique")
    }

    /// Loads the JSON Lines file written by ingestion.
    pub fn load(path: &Path) -> Result<Self, RetrievalError> {
        Ok(Self::from_dataset(ProfileDataset::read(path)?))
    }

    pub fn get(&self, profile_id: &str) -> Option<&StudentProfile> {
        self.by_id.get(profile_id).map(|&i| &self.profiles[i])
    }

    pub fn profiles(&self) -> &[StudentProfile] {
        &self.profiles
    }

    pub fn len(&self) -> usize {
        self.profiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.profiles.is_empty()
    }
}

/// Produces a match score in `[0, 1]` for a profile under a context.
pub trait ScoringBackend: Send + Sync {
    fn score(&self, profile: &StudentProfile, context: &ValidatedContext) -> f64;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TaxonomicScorer;

fn dimension_distance<T: Ordinal>(value: T, target_mean_rank: f64) -> f64 {
    let span = (T::ALL.len() - 1) as f64;
    (value.rank() as f64 - target_mean_rank).abs() / span
}

pub fn score_profile(profile: &StudentProfile, context: &ValidatedContext) -> f64 {
    let d = context.distilled();
    let distance = ENGAGEMENT_WEIGHT * dimension_distance(profile.engagement, d.engagement_mean_rank())
        + MATH_WEIGHT * dimension_distance(profile.math_level, d.math_mean_rank())
        + ARGUMENTATION_WEIGHT * dimension_distance(profile.argumentation_level, d.argumentation_mean_rank());
    (1.0 - distance).clamp(0.0, 1.0)
}

impl ScoringBackend for TaxonomicScorer {
    fn score(&self, profile: &StudentProfile, context: &ValidatedContext) -> f64 {
        score_profile(profile, context)
    }
}

pub trait Embedder: Send + Sync {
    fn embed(&self, text: &str) -> Vec<f32>;
}

/// Cosine similarity between profile and context text, mapped to `[0, 1]`.
pub struct EmbeddingScorer<E> {
    embedder: E,
}

impl<E: Embedder> EmbeddingScorer<E> {
    pub fn new(embedder: E) -> Self {
        EmbeddingScorer { embedder }
    }
}

fn profile_text(p: &StudentProfile) -> String {
    format!(
        "{} engagement, {} math level, {} argumentation. {}",
        p.engagement,
        p.math_level,
        p.argumentation_level,
        p.typical_utterances.join(" ")
    )
}

impl<E: Embedder> ScoringBackend for EmbeddingScorer<E> {
    fn score(&self, profile: &StudentProfile, context: &ValidatedContext) -> f64 {
        let a = self.embedder.embed(&profile_text(profile));
        let b = self.embedder.embed(&format!("{} {}", context.math_topic(), context.class_description()));
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| (*x as f64) * (*y as f64)).sum();
        let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        let cos = dot / (na * nb);
        if cos.is_finite() {
            ((cos + 1.0) / 2.0).clamp(0.0, 1.0)
        } else {
            0.0
        }
    }
}

/// Bag-of-words feature hashing; an offline stand-in for a real embedding model.
#[derive(Debug, Clone, Copy)]
pub struct HashingEmbedder {
    pub dims: usize,
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        HashingEmbedder { dims: 256 }
    }
}

impl Embedder for HashingEmbedder {
    fn embed(&self, text: &str) -> Vec<f32> {
        let mut v = vec![0f32; self.dims.max(1)];
        for tok in crate::text::tokens(text) {
            let mut h: u64 = 0xcbf29ce484222325;
            for b in tok.bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
            let len = v.len() as u64;
            v[(h % len) as usize] += 1.0;
        }
        v
    }
}

/// Scores every profile in index order.
pub fn score_all(index: &ProfileIndex, context: &ValidatedContext, backend: &dyn ScoringBackend) -> Vec<f64> {
    #[cfg(feature = "parallel")]
    {
        score_all_parallel(index, context, backend)
    }
    #[cfg(not(feature = "parallel"))]
    {
        score_all_sequential(index, context, backend)
    }
}

/// Scores are snapped to a 1e-9 grid before ranking, so profiles that tie
/// mathematically tie exactly and fall through to the id tie-break.
pub const SCORE_RESOLUTION: f64 = 1e-9;

fn sanitize(score: f64) -> f64 {
    if score.is_finite() {
        ((score / SCORE_RESOLUTION).round() * SCORE_RESOLUTION).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

pub fn score_all_sequential(index: &ProfileIndex, context: &ValidatedContext, backend: &dyn ScoringBackend) -> Vec<f64> {
    index.profiles().iter().map(|p| sanitize(backend.score(p, context))).collect()
}

#[cfg(feature = "parallel")]
pub fn score_all_parallel(index: &ProfileIndex, context: &ValidatedContext, backend: &dyn ScoringBackend) -> Vec<f64> {
    use rayon::prelude::*;
    index.profiles().par_iter().map(|p| sanitize(backend.score(p, context))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RosterSelection {
    pub members: Vec<String>,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionOptions {
    pub roster_size: usize,
    /// Uniform score noise of this half-width, drawn from the selection seed.
    /// Off by default.
    pub jitter: Option<f64>,
}

impl Default for SelectionOptions {
    fn default() -> Self {
        SelectionOptions { roster_size: DEFAULT_ROSTER_SIZE, jitter: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub profile_id: String,
    pub engagement: Engagement,
    pub score: f64,
}

fn rank_order(a: &Candidate, b: &Candidate) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.profile_id.cmp(&b.profile_id))
}

pub fn stratum_quota(roster_size: usize) -> usize {
    roster_size.div_ceil(5)
}

/// Stratified top-k over already scored candidates.
pub fn select_from_candidates(candidates: &[Candidate], roster_size: usize) -> Result<RosterSelection, RetrievalError> {
    if candidates.len() < roster_size {
        return Err(RetrievalError::InsufficientProfiles { have: candidates.len(), need: roster_size });
    }
    let mut ranked: Vec<&Candidate> = candidates.iter().collect();
    ranked.sort_by(|a, b| rank_order(a, b));

    let quota = stratum_quota(roster_size);
    let mut chosen = vec![false; ranked.len()];
    if quota * Engagement::ALL.len() <= roster_size {
        for stratum in Engagement::ALL {
            let positions: Vec<usize> = (0..ranked.len()).filter(|&i| ranked[i].engagement == *stratum).collect();
            if positions.len() >= quota {
                for &i in &positions[..quota] {
                    chosen[i] = true;
                }
            }
        }
    }
    let mut remaining = roster_size - chosen.iter().filter(|c| **c).count();
    for c in chosen.iter_mut() {
        if remaining == 0 {
            break;
        }
        if !*c {
            *c = true;
            remaining -= 1;
        }
    }
    let (members, scores) = ranked
        .iter()
        .zip(&chosen)
        .filter(|(_, c)| **c)
        .map(|(cand, _)| (cand.profile_id.clone(), cand.score))
        .unzip();
    Ok(RosterSelection { members, scores })
}

/// Selects a roster with the default taxonomic scorer.
pub fn select_roster(
    index: &ProfileIndex,
    context: &ValidatedContext,
    options: SelectionOptions,
    seed: u64,
) -> Result<RosterSelection, RetrievalError> {
    select_roster_with(index, context, &TaxonomicScorer, options, seed)
}

pub fn select_roster_with(
    index: &ProfileIndex,
    context: &ValidatedContext,
    backend: &dyn ScoringBackend,
    options: SelectionOptions,
    seed: u64,
) -> Result<RosterSelection, RetrievalError> {
    if index.len() < options.roster_size {
        return Err(RetrievalError::InsufficientProfiles { have: index.len(), need: options.roster_size });
    }
    let mut scores = score_all(index, context, backend);
    if let Some(width) = options.jitter.filter(|w| *w > 0.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for s in scores.iter_mut() {
            *s = (*s + rng.random_range(-width..=width)).clamp(0.0, 1.0);
        }
    }
    let candidates: Vec<Candidate> = index
        .profiles()
        .iter()
        .zip(scores)
        .map(|(p, score)| Candidate { profile_id: p.profile_id.clone(), engagement: p.engagement, score })
        .collect();
    select_from_candidates(&candidates, options.roster_size)
}

/// Turns a free-text class description into target distributions.
pub trait ContextDistiller: Send + Sync {
    fn distill(&self, context: &ClassroomContext) -> ContextDistillation;
}

struct DistillRule {
    cues: &'static [&'static str],
    engagement: [f64; 3],
    math: [f64; 5],
    argumentation: [f64; 9],
}

const Z3: [f64; 3] = [0.0; 3];
const Z5: [f64; 5] = [0.0; 5];
const Z9: [f64; 9] = [0.0; 9];

/// Keyword table for [`ScriptedDistiller`]. Every histogram starts at weight 1
/// per variant; each rule whose cue appears adds its weights once.
const DISTILL_RULES: &[DistillRule] = &[
    DistillRule {
        cues: &["highly engaged", "very engaged", "eager", "enthusiastic", "motivated", "active participants"],
        engagement: [0.0, 0.0, 3.0],
        math: Z5,
        argumentation: Z9,
    },
    DistillRule {
        cues: &["moderate engagement", "moderately engaged", "somewhat engaged"],
        engagement: [0.0, 3.0, 0.0],
        math: Z5,
        argumentation: Z9,
    },
    DistillRule {
        cues: &[
            "disengaged", "quiet", "shy", "unmotivated", "low engagement", "lower engagement", "reluctant", "off task",
            "distracted",
        ],
        engagement: [3.0, 0.0, 0.0],
        math: Z5,
        argumentation: Z9,
    },
    DistillRule {
        cues: &["struggle", "struggles", "struggling", "difficulty", "behind", "weak", "below grade level"],
        engagement: Z3,
        math: [3.0, 2.0, 0.0, 0.0, 0.0],
        argumentation: Z9,
    },
    DistillRule {
        cues: &["strong", "advanced", "proficient", "above grade level", "gifted"],
        engagement: Z3,
        math: [0.0, 0.0, 0.0, 2.0, 3.0],
        argumentation: Z9,
    },
    DistillRule {
        cues: &["on grade level", "average"],
        engagement: Z3,
        math: [0.0, 0.0, 3.0, 0.0, 0.0],
        argumentation: Z9,
    },
    DistillRule {
        cues: &["explain", "justify", "reasoning", "argue", "prove"],
        engagement: Z3,
        math: Z5,
        argumentation: [0.0, 0.0, 1.0, 0.0, 2.0, 0.0, 2.0, 0.0, 0.0],
    },
    DistillRule {
        cues: &["short answers", "rarely explain", "one word", "just answers", "guess"],
        engagement: Z3,
        math: Z5,
        argumentation: [1.0, 3.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    },
    DistillRule {
        cues: &["ask questions", "curious", "questioning"],
        engagement: Z3,
        math: Z5,
        argumentation: [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.0],
    },
    DistillRule {
        cues: &["help each other", "help classmates", "peer tutoring", "group work"],
        engagement: Z3,
        math: Z5,
        argumentation: [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0],
    },
];

#[derive(Debug, Clone, Copy, Default)]
pub struct ScriptedDistiller;

impl ContextDistiller for ScriptedDistiller {
    fn distill(&self, context: &ClassroomContext) -> ContextDistillation {
        let p = padded(&context.class_description);
        let mut e = [1.0; 3];
        let mut m = [1.0; 5];
        let mut a = [1.0; 9];
        let mut fired = false;
        for rule in DISTILL_RULES {
            if rule.cues.iter().any(|c| has_phrase(&p, c)) {
                fired = true;
                e.iter_mut().zip(rule.engagement).for_each(|(x, w)| *x += w);
                m.iter_mut().zip(rule.math).for_each(|(x, w)| *x += w);
                a.iter_mut().zip(rule.argumentation).for_each(|(x, w)| *x += w);
            }
        }
        if !fired {
            return ContextDistillation::uniform();
        }
        ContextDistillation::from_weights(e, m, a)
    }
}

/// Asks a model for the three target histograms; falls back to the scripted
/// table when the provider fails or the reply does not parse.
pub struct ModelDistiller<'a> {
    provider: &'a dyn ModelProvider,
}

impl<'a> ModelDistiller<'a> {
    pub fn new(provider: &'a dyn ModelProvider) -> Self {
        ModelDistiller { provider }
    }
}

#[derive(Deserialize)]
struct DistillReply {
    engagement: [f64; 3],
    math_level: [f64; 5],
    argumentation_level: [f64; 9],
}

impl ContextDistiller for ModelDistiller<'_> {
    fn distill(&self, context: &ClassroomContext) -> ContextDistillation {
        let request = ModelRequest {
            task: "distill_context".into(),
            system: format!(
                "Estimate the distribution of students in a grade {} mathematics class. Reply with a JSON object \
                 with nonnegative weights: engagement [Low, Medium, High], math_level [{}], argumentation_level [{}].",
                context.grade_level,
                MathLevel::ALL.iter().map(|v| v.as_str()).collect::<Vec<_>>().join(", "),
                ArgumentationLevel::ALL.iter().map(|v| v.as_str()).collect::<Vec<_>>().join(", "),
            ),
            user: format!("Topic: {}\nClass description: {}", context.math_topic, context.class_description),
        };
        let reply = self.provider.complete(&request).and_then(|raw| parse_json_object::<DistillReply>(&raw));
        match reply {
            Ok(r) if [&r.engagement[..], &r.math_level[..], &r.argumentation_level[..]]
                .iter()
                .all(|h| h.iter().all(|x| x.is_finite() && *x >= 0.0) && h.iter().sum::<f64>() > 0.0) =>
            {
                ContextDistillation::from_weights(r.engagement, r.math_level, r.argumentation_level)
            }
            Ok(_) => {
                tracing::warn!("model distillation had invalid weights; using scripted table");
                ScriptedDistiller.distill(context)
            }
            Err(e) => {
                tracing::warn!(error = %e, "model distillation failed; using scripted table");
                ScriptedDistiller.distill(context)
            }
        }
    }
}

/// Fills in the distillation when absent, then validates.
pub fn prepare_context(raw: ClassroomContext, distiller: &dyn ContextDistiller) -> Result<ValidatedContext, ValidationError> {
    let mut raw = raw;
    if raw.distilled.is_none() {
        raw.distilled = Some(distiller.distill(&raw));
    }
    validate_context(raw)
}

/// Ids in `selection` that are missing from `index`; empty for any selection
/// produced from that index.
pub fn unresolved_members<'a>(selection: &'a RosterSelection, index: &ProfileIndex) -> Vec<&'a str> {
    let mut seen = HashSet::new();
    selection
        .members
        .iter()
        .filter(|m| index.get(m).is_none() || !seen.insert(m.as_str()))
        .map(String::as_str)
        .collect()
}
