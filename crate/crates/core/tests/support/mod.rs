//! Independent oracles and fixture loaders shared by the integration tests
//! and the acceptance harness. Nothing here calls the library's scoring,
//! selection or evenness code.
#![allow(dead_code)]

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rehearsal_core::ingest::{build_dataset, read_lessons, ScriptedExtractor};
use rehearsal_core::metrics::ReportRow;
use rehearsal_core::retrieval::ProfileIndex;
use rehearsal_core::{ClassroomContext, ContextDistillation, StudentProfile, ValidatedContext};

pub fn core_fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).parent().unwrap().join("core").join("fixtures")
}

pub fn fixture_index() -> ProfileIndex {
    let lessons = read_lessons(&core_fixtures().join("lessons")).expect("fixture lessons");
    let out = build_dataset(&lessons, &ScriptedExtractor, 2024).expect("fixture dataset");
    ProfileIndex::from_dataset(out.dataset)
}

pub struct Table1 {
    pub baseline: Vec<ReportRow>,
    pub simulator: Vec<ReportRow>,
}

pub fn table1() -> Table1 {
    #[derive(serde::Deserialize)]
    struct Raw {
        baseline: Vec<ReportRow>,
        simulator: Vec<ReportRow>,
    }
    let text = std::fs::read_to_string(core_fixtures().join("table1.json")).expect("table1.json");
    let raw: Raw = serde_json::from_str(&text).expect("table1.json parses");
    Table1 { baseline: raw.baseline, simulator: raw.simulator }
}

/// Evenness via `ln N - (1/N) sum c ln c`, a rearrangement of the entropy sum.
pub fn oracle_evenness(counts: &[u64], k: usize) -> Option<f64> {
    let n: u64 = counts.iter().sum();
    if n == 0 || k < 2 {
        return None;
    }
    let n = n as f64;
    let s: f64 = counts.iter().filter(|c| **c > 0).map(|&c| c as f64 * (c as f64).ln()).sum();
    Some((n.ln() - s / n) / (k as f64).ln())
}

/// Library scores are compared on a 1e-9 grid.
pub fn snap(x: f64) -> f64 {
    (x / 1e-9).round() * 1e-9
}

pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

const ENGAGEMENT: [&str; 3] = ["Low", "Medium", "High"];
const MATH: [&str; 5] = ["Beginner", "BeginnerIntermediate", "Intermediate", "IntermediateProficient", "Proficient"];
const ARGUMENTATION: [&str; 9] = [
    "None",
    "StatementOnly",
    "SimpleReasoning",
    "PartialReasoning",
    "Justification",
    "ApplicationReasoning",
    "ReasoningWithJustification",
    "GuidanceReasoning",
    "Clarification",
];

fn position(table: &[&str], name: &str) -> f64 {
    table.iter().position(|v| *v == name).expect("known variant") as f64
}

fn expected_position(h: &[f64]) -> f64 {
    h.iter().enumerate().map(|(i, p)| i as f64 * p).sum()
}

/// Weighted distance score from zero-based positions; the offset cancels in
/// the difference, so this equals the 1-based formulation.
pub fn oracle_score(p: &StudentProfile, d: &ContextDistillation) -> f64 {
    let dim = |table: &[&str], name: &str, h: &[f64]| {
        (position(table, name) - expected_position(h)).abs() / (table.len() - 1) as f64
    };
    let e = dim(&ENGAGEMENT, p.engagement.as_str(), &d.engagement);
    let m = dim(&MATH, p.math_level.as_str(), &d.math_level);
    let a = dim(&ARGUMENTATION, p.argumentation_level.as_str(), &d.argumentation_level);
    (1.0 - 0.4 * e - 0.3 * m - 0.3 * a).clamp(0.0, 1.0)
}

#[derive(Debug, Clone)]
pub struct OracleCandidate {
    pub id: String,
    pub stratum: usize,
    pub score: f64,
}

fn ranked(cands: &[OracleCandidate]) -> Vec<OracleCandidate> {
    let mut v = cands.to_vec();
    v.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap().then(a.id.cmp(&b.id)));
    v
}

fn floors(ranked: &[OracleCandidate], k: usize) -> [usize; 3] {
    let quota = k.div_ceil(5);
    if 3 * quota > k {
        return [0; 3];
    }
    let mut f = [0; 3];
    for (s, slot) in f.iter_mut().enumerate() {
        if ranked.iter().filter(|c| c.stratum == s).count() >= quota {
            *slot = quota;
        }
    }
    f
}

/// Walks the ranking and keeps a candidate whenever the stratum floors can
/// still be met with the slots left afterwards.
pub fn oracle_select_greedy(cands: &[OracleCandidate], k: usize) -> Vec<String> {
    let r = ranked(cands);
    let f = floors(&r, k);
    let mut have = [0usize; 3];
    let mut out = Vec::new();
    for c in &r {
        if out.len() == k {
            break;
        }
        let mut after = have;
        after[c.stratum] += 1;
        let deficit: usize = (0..3).map(|s| f[s].saturating_sub(after[s])).sum();
        if deficit < k - out.len() {
            have = after;
            out.push(c.id.clone());
        }
    }
    out
}

/// Among all size-k subsets meeting the floors, the one whose rank positions
/// are lexicographically smallest.
pub fn oracle_select_exhaustive(cands: &[OracleCandidate], k: usize) -> Vec<String> {
    let r = ranked(cands);
    let f = floors(&r, k);
    let n = r.len();
    let mut best: Option<Vec<usize>> = None;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != k {
            continue;
        }
        let idx: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        let mut have = [0usize; 3];
        for &i in &idx {
            have[r[i].stratum] += 1;
        }
        if (0..3).any(|s| have[s] < f[s]) {
            continue;
        }
        if best.as_ref().is_none_or(|b| idx < *b) {
            best = Some(idx);
        }
    }
    best.unwrap().into_iter().map(|i| r[i].id.clone()).collect()
}

pub fn random_histogram<const N: usize>(rng: &mut ChaCha8Rng) -> [f64; N] {
    let mut w = [0.0; N];
    for x in w.iter_mut() {
        // Sparse-ish weights so some contexts are sharply peaked.
        *x = if rng.random_bool(0.4) { 0.0 } else { rng.random_range(0.0..1.0) };
    }
    if w.iter().sum::<f64>() == 0.0 {
        w[rng.random_range(0..N)] = 1.0;
    }
    w
}

pub fn random_context(seed: u64) -> ValidatedContext {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = ContextDistillation::from_weights(
        random_histogram::<3>(&mut rng),
        random_histogram::<5>(&mut rng),
        random_histogram::<9>(&mut rng),
    );
    let raw = ClassroomContext {
        grade_level: rng.random_range(1..=12),
        math_topic: "ratios".into(),
        class_description: String::new(),
        distilled: Some(d),
    };
    ValidatedContext::try_from(raw).expect("random context validates")
}

pub const FUZZ_QUESTIONS: &[&str] = &[
    "How do you know that's true?",
    "Why did you multiply first?",
    "Can you explain your idea to the class?",
    "What is the answer?",
    "Who agrees or disagrees, and why?",
    "Is that always true for every number?",
    "Tell us how you started.",
    "What were you trying to find when you divided?",
    "Okay, let's look at the next problem.",
    "Can someone repeat that in their own words?",
];
