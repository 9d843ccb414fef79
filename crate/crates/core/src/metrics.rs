//! Per-category counts and normalized Shannon evenness over the two coding
//! frameworks, per session and aggregated.
//!
//! Evenness is `H = -sum(p_i ln p_i) / ln k` where `k` is the framework's fixed
//! category count (3 or 6), never the number of categories actually observed.
//! Zero-count categories contribute nothing (`0 ln 0 = 0`).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{DialogueTurn, Ordinal, Speaker, ToulminLabel, TrqfLabel};

pub const TRQF_CATEGORIES: usize = 3;
pub const TOULMIN_CATEGORIES: usize = 6;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("total count is zero")]
    ZeroTotal,
    #[error("category count k = {0} must be at least 2")]
    DegenerateK(usize),
    #[error("{observed} categories supplied but k = {k}")]
    TooManyCategories { observed: usize, k: usize },
}

/// Normalized Shannon entropy of `counts` over `k` categories, in `[0, 1]`.
/// Categories beyond `counts.len()` are treated as zero.
pub fn normalized_evenness(counts: &[u64], k: usize) -> Result<f64, MetricsError> {
    if k < 2 {
        return Err(MetricsError::DegenerateK(k));
    }
    if counts.len() > k {
        return Err(MetricsError::TooManyCategories { observed: counts.len(), k });
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(MetricsError::ZeroTotal);
    }
    let total = total as f64;
    let entropy: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .sum();
    Ok((entropy / (k as f64).ln()).clamp(0.0, 1.0))
}

/// Evenness for many count vectors at once.
pub fn evenness_batch(vectors: &[Vec<u64>], k: usize) -> Vec<Result<f64, MetricsError>> {
    #[cfg(feature = "parallel")]
    {
        evenness_batch_parallel(vectors, k)
    }
    #[cfg(not(feature = "parallel"))]
    {
        evenness_batch_sequential(vectors, k)
    }
}

pub fn evenness_batch_sequential(vectors: &[Vec<u64>], k: usize) -> Vec<Result<f64, MetricsError>> {
    vectors.iter().map(|v| normalized_evenness(v, k)).collect()
}

#[cfg(feature = "parallel")]
pub fn evenness_batch_parallel(vectors: &[Vec<u64>], k: usize) -> Vec<Result<f64, MetricsError>> {
    use rayon::prelude::*;
    vectors.par_iter().map(|v| normalized_evenness(v, k)).collect()
}

pub fn round_to(x: f64, decimals: i32) -> f64 {
    let f = 10f64.powi(decimals);
    (x * f).round() / f
}

/// Additive count record: student responses plus per-category code counts.
/// Index `i` of each array is the category of rank `i + 1`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountTable {
    pub n_student_responses: u64,
    pub trqf: [u64; TRQF_CATEGORIES],
    pub toulmin: [u64; TOULMIN_CATEGORIES],
}

impl CountTable {
    /// Counts every label on every turn (multiset cardinalities).
    pub fn from_turns(turns: &[DialogueTurn]) -> Self {
        let mut t = CountTable::default();
        for turn in turns {
            if let Speaker::Student(_) = turn.speaker {
                t.n_student_responses += 1;
            }
            for l in &turn.trqf_labels {
                t.trqf[l.rank() - 1] += 1;
            }
            for l in &turn.toulmin_labels {
                t.toulmin[l.rank() - 1] += 1;
            }
        }
        t
    }

    pub fn trqf_total(&self) -> u64 {
        self.trqf.iter().sum()
    }

    pub fn toulmin_total(&self) -> u64 {
        self.toulmin.iter().sum()
    }
}

impl Add for CountTable {
    type Output = CountTable;

    fn add(mut self, rhs: CountTable) -> CountTable {
        self += rhs;
        self
    }
}

impl AddAssign for CountTable {
    fn add_assign(&mut self, rhs: CountTable) {
        self.n_student_responses += rhs.n_student_responses;
        for (a, b) in self.trqf.iter_mut().zip(rhs.trqf) {
            *a += b;
        }
        for (a, b) in self.toulmin.iter_mut().zip(rhs.toulmin) {
            *a += b;
        }
    }
}

impl std::iter::Sum for CountTable {
    fn sum<I: Iterator<Item = CountTable>>(iter: I) -> Self {
        iter.fold(CountTable::default(), Add::add)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionMetrics {
    pub n_student_responses: u64,
    pub trqf_counts: BTreeMap<TrqfLabel, u64>,
    pub toulmin_counts: BTreeMap<ToulminLabel, u64>,
    /// Rounded to 3 decimals; absent when no TRQF codes exist.
    pub trqf_evenness: Option<f64>,
    pub toulmin_evenness: Option<f64>,
}

impl SessionMetrics {
    pub fn from_counts(counts: &CountTable) -> Self {
        let trqf_counts = TrqfLabel::ALL.iter().map(|l| (*l, counts.trqf[l.rank() - 1])).collect();
        let toulmin_counts = ToulminLabel::ALL.iter().map(|l| (*l, counts.toulmin[l.rank() - 1])).collect();
        SessionMetrics {
            n_student_responses: counts.n_student_responses,
            trqf_counts,
            toulmin_counts,
            trqf_evenness: normalized_evenness(&counts.trqf, TRQF_CATEGORIES).ok().map(|e| round_to(e, 3)),
            toulmin_evenness: normalized_evenness(&counts.toulmin, TOULMIN_CATEGORIES).ok().map(|e| round_to(e, 3)),
        }
    }

    pub fn counts(&self) -> CountTable {
        let mut t = CountTable { n_student_responses: self.n_student_responses, ..Default::default() };
        for (l, c) in &self.trqf_counts {
            t.trqf[l.rank() - 1] = *c;
        }
        for (l, c) in &self.toulmin_counts {
            t.toulmin[l.rank() - 1] = *c;
        }
        t
    }
}

/// Sums count records and computes evenness over the totals.
pub fn aggregate<'a, I>(tables: I) -> SessionMetrics
where
    I: IntoIterator<Item = &'a CountTable>,
{
    SessionMetrics::from_counts(&tables.into_iter().copied().sum())
}

/// Metrics over a set of coded transcripts.
pub fn aggregate_transcripts(sessions: &[Vec<DialogueTurn>]) -> SessionMetrics {
    #[cfg(feature = "parallel")]
    {
        aggregate_transcripts_parallel(sessions)
    }
    #[cfg(not(feature = "parallel"))]
    {
        aggregate_transcripts_sequential(sessions)
    }
}

pub fn aggregate_transcripts_sequential(sessions: &[Vec<DialogueTurn>]) -> SessionMetrics {
    let total: CountTable = sessions.iter().map(|s| CountTable::from_turns(s)).sum();
    SessionMetrics::from_counts(&total)
}

#[cfg(feature = "parallel")]
pub fn aggregate_transcripts_parallel(sessions: &[Vec<DialogueTurn>]) -> SessionMetrics {
    use rayon::prelude::*;
    let total = sessions
        .par_iter()
        .map(|s| CountTable::from_turns(s))
        .reduce(CountTable::default, Add::add);
    SessionMetrics::from_counts(&total)
}

/// One labelled row of a count report (a participant, a session, ...).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub id: String,
    #[serde(flatten)]
    pub counts: CountTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<ReportRow>,
    pub total: SessionMetrics,
}

impl MetricsReport {
    pub fn new(rows: Vec<ReportRow>) -> Self {
        let total = aggregate(rows.iter().map(|r| &r.counts));
        MetricsReport { rows, total }
    }

    /// Plain-text table: one row per entry plus a sum row and evenness line.
    /// Zero cells print as `-`; evenness prints to 2 decimals.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let header = ["Id", "N", "E", "T", "C", "Cl", "Da", "Wa", "Ba", "Qu", "Re"];
        let line = |cells: &[String]| {
            let mut s = format!("{:<8}", cells[0]);
            for c in &cells[1..] {
                let _ = write!(s, "{:>5}", c);
            }
            s.push('\n');
            s
        };
        let cell = |v: u64| if v == 0 { "-".to_string() } else { v.to_string() };
        let row_cells = |id: &str, t: &CountTable| {
            let mut cells = vec![id.to_string(), t.n_student_responses.to_string()];
            cells.extend(t.trqf.iter().map(|v| cell(*v)));
            cells.extend(t.toulmin.iter().map(|v| cell(*v)));
            cells
        };
        out.push_str(&line(&header.map(String::from)));
        for r in &self.rows {
            out.push_str(&line(&row_cells(&r.id, &r.counts)));
        }
        out.push_str(&line(&row_cells("Sum", &self.total.counts())));
        let fmt2 = |e: Option<f64>| e.map_or("n/a".to_string(), |v| format!("{v:.2}"));
        let _ = writeln!(
            out,
            "Evenness: TRQF {}  Toulmin {}",
            fmt2(self.total.trqf_evenness),
            fmt2(self.total.toulmin_evenness)
        );
        out
    }
}
