//! Valence tertiles, first-order Markov transitions between valence bands,
//! dwell times, label frequencies and score distributions.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::corpus::{RoleFilter, Session, Turn};
use crate::fusion::FusedAnnotation;
use crate::stats::{median_iqr, quantile_sorted, Quartiles};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DynamicsError {
    #[error("tertiles need at least 3 values, got {0}")]
    TooFewValues(usize),
    #[error("non-finite valence {0}")]
    NonFinite(f64),
    #[error("smoothing constant must be positive and finite, got {0}")]
    InvalidBeta(f64),
    #[error("top_n must be at least 1")]
    InvalidTopN,
    #[error("no fused turns to analyze")]
    Empty,
    #[error("fused annotation for unknown turn {0:?}")]
    UnknownTurn(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ValenceState {
    Negative,
    Neutral,
    Positive,
}

impl ValenceState {
    pub const ALL: [ValenceState; 3] = [ValenceState::Negative, ValenceState::Neutral, ValenceState::Positive];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ValenceState::Negative => "negative",
            ValenceState::Neutral => "neutral",
            ValenceState::Positive => "positive",
        }
    }
}

impl fmt::Display for ValenceState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TertileCuts {
    pub t1: f64,
    pub t2: f64,
}

/// 1/3 and 2/3 quantiles (linear interpolation) of the given valences.
pub fn compute_tertiles(values: &[f64]) -> Result<TertileCuts, DynamicsError> {
    if values.len() < 3 {
        return Err(DynamicsError::TooFewValues(values.len()));
    }
    if let Some(&bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(DynamicsError::NonFinite(bad));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(TertileCuts {
        t1: quantile_sorted(&sorted, 1.0 / 3.0),
        t2: quantile_sorted(&sorted, 2.0 / 3.0),
    })
}

/// `v < t1` is negative, `v > t2` positive, and the closed band between is
/// neutral. Degenerate cuts (`t1 == t2`) put every value in neutral.
pub fn classify_valence(v: f64, cuts: TertileCuts) -> ValenceState {
    if cuts.t1 == cuts.t2 {
        ValenceState::Neutral
    } else if v < cuts.t1 {
        ValenceState::Negative
    } else if v > cuts.t2 {
        ValenceState::Positive
    } else {
        ValenceState::Neutral
    }
}

pub type TransitionCounts = [[u64; 3]; 3];
pub type TransitionProbs = [[f64; 3]; 3];

/// Counts `from -> to` pairs within each session after dropping the
/// session's first state. Pairs never span sessions.
pub fn count_transitions<S: AsRef<[ValenceState]>>(sessions: &[S]) -> TransitionCounts {
    let mut counts = [[0u64; 3]; 3];
    for seq in sessions {
        let seq = seq.as_ref();
        if seq.len() < 3 {
            continue;
        }
        for pair in seq[1..].windows(2) {
            counts[pair[0].index()][pair[1].index()] += 1;
        }
    }
    counts
}

/// Additive smoothing: `(c_ij + beta) / (Σ_j c_ij + 3 beta)`.
pub fn smooth_and_normalize(counts: &TransitionCounts, beta: f64) -> Result<TransitionProbs, DynamicsError> {
    if !(beta.is_finite() && beta > 0.0) {
        return Err(DynamicsError::InvalidBeta(beta));
    }
    let mut probs = [[0.0; 3]; 3];
    for (row, out) in counts.iter().zip(probs.iter_mut()) {
        let total = row.iter().sum::<u64>() as f64 + 3.0 * beta;
        for (c, p) in row.iter().zip(out.iter_mut()) {
            *p = (*c as f64 + beta) / total;
        }
    }
    Ok(probs)
}

/// Expected run length `1 / (1 - P_ss)` per state; infinite for an
/// absorbing state.
pub fn dwell_times(probs: &TransitionProbs) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (s, d) in out.iter_mut().enumerate() {
        let stay = probs[s][s];
        *d = if stay >= 1.0 { f64::INFINITY } else { 1.0 / (1.0 - stay) };
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransitionModel {
    pub counts: TransitionCounts,
    pub beta: f64,
    pub probs: TransitionProbs,
    pub dwell: [f64; 3],
}

impl TransitionModel {
    pub fn fit(counts: TransitionCounts, beta: f64) -> Result<Self, DynamicsError> {
        let probs = smooth_and_normalize(&counts, beta)?;
        Ok(TransitionModel {
            counts,
            beta,
            dwell: dwell_times(&probs),
            probs,
        })
    }

    pub fn prob(&self, from: ValenceState, to: ValenceState) -> f64 {
        self.probs[from.index()][to.index()]
    }

    pub fn dwell(&self, state: ValenceState) -> f64 {
        self.dwell[state.index()]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabelCount {
    pub label: String,
    pub count: u64,
    pub share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabelFrequencies {
    pub rows: Vec<LabelCount>,
    /// Sum of the listed shares.
    pub coverage: f64,
    /// Number of fused turns the shares are relative to.
    pub denominator: u64,
    /// Labels left out only because the cut fell inside a tie.
    pub excluded_ties: Vec<String>,
}

/// Top `top_n` consensus labels by count, ties ordered lexicographically.
pub fn label_frequencies(fused: &[FusedAnnotation], top_n: usize) -> Result<LabelFrequencies, DynamicsError> {
    if top_n < 1 {
        return Err(DynamicsError::InvalidTopN);
    }
    if fused.is_empty() {
        return Err(DynamicsError::Empty);
    }
    let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
    for f in fused {
        *counts.entry(f.consensus_label.as_str()).or_default() += 1;
    }
    let mut ranked: Vec<(&str, u64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

    let denominator = fused.len() as u64;
    let kept = ranked.len().min(top_n);
    let rows: Vec<LabelCount> = ranked[..kept]
        .iter()
        .map(|(label, count)| LabelCount {
            label: label.to_string(),
            count: *count,
            share: *count as f64 / denominator as f64,
        })
        .collect();
    let excluded_ties = match rows.last() {
        Some(last) => ranked[kept..]
            .iter()
            .take_while(|(_, c)| *c == last.count)
            .map(|(l, _)| l.to_string())
            .collect(),
        None => Vec::new(),
    };
    let covered: u64 = rows.iter().map(|r| r.count).sum();
    Ok(LabelFrequencies {
        coverage: covered as f64 / denominator as f64,
        rows,
        denominator,
        excluded_ties,
    })
}

/// Half-up rounding into the integer bins 1..=9.
pub fn score_bin(x: f64) -> u8 {
    (x + 0.5).floor().clamp(1.0, 9.0) as u8
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Distribution {
    /// Counts for bins 1..=9.
    pub bins: [u64; 9],
    /// Computed on unrounded scores.
    pub quartiles: Quartiles,
}

impl Distribution {
    fn from_values(values: &[f64]) -> Self {
        let mut bins = [0u64; 9];
        for &v in values {
            bins[usize::from(score_bin(v)) - 1] += 1;
        }
        Distribution {
            bins,
            quartiles: median_iqr(values).expect("non-empty finite scores"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValDistributions {
    pub n: u64,
    pub valence: Distribution,
    pub arousal: Distribution,
    pub learning: Distribution,
}

pub fn val_distributions(fused: &[FusedAnnotation]) -> Result<ValDistributions, DynamicsError> {
    if fused.is_empty() {
        return Err(DynamicsError::Empty);
    }
    let col = |f: fn(&FusedAnnotation) -> f64| fused.iter().map(f).collect::<Vec<_>>();
    Ok(ValDistributions {
        n: fused.len() as u64,
        valence: Distribution::from_values(&col(|f| f.v_bar)),
        arousal: Distribution::from_values(&col(|f| f.a_bar)),
        learning: Distribution::from_values(&col(|f| f.l_bar)),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AnalysisOptions {
    pub beta: f64,
    pub role_filter: RoleFilter,
    pub top_n: usize,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        AnalysisOptions {
            beta: 1.0,
            role_filter: RoleFilter::Student,
            top_n: 10,
        }
    }
}

/// Everything derived from fused turns of the selected role.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AffectAnalysis {
    pub role_filter: RoleFilter,
    pub turns_analyzed: u64,
    pub sessions_with_turns: u64,
    pub tertiles: TertileCuts,
    pub state_counts: [u64; 3],
    pub transitions: TransitionModel,
    pub labels: LabelFrequencies,
    pub distributions: ValDistributions,
}

/// Filters fused turns by role, bins valence by global tertiles, and builds
/// per-session state sequences in timestamp order. Turns without a fused
/// annotation are left out of their session's sequence.
pub fn analyze(
    turns: &[Turn],
    sessions: &[Session],
    fused: &[FusedAnnotation],
    options: AnalysisOptions,
) -> Result<AffectAnalysis, DynamicsError> {
    let role_of: HashMap<&str, &Turn> = turns.iter().map(|t| (t.turn_id.as_str(), t)).collect();
    let mut by_turn: HashMap<&str, &FusedAnnotation> = HashMap::new();
    for f in fused {
        if !role_of.contains_key(f.turn_id.as_str()) {
            return Err(DynamicsError::UnknownTurn(f.turn_id.clone()));
        }
        by_turn.insert(f.turn_id.as_str(), f);
    }

    // Selected turns in corpus order.
    let selected: Vec<FusedAnnotation> = turns
        .iter()
        .filter(|t| options.role_filter.matches(t.role))
        .filter_map(|t| by_turn.get(t.turn_id.as_str()).map(|f| (*f).clone()))
        .collect();
    if selected.is_empty() {
        return Err(DynamicsError::Empty);
    }

    let valences: Vec<f64> = selected.iter().map(|f| f.v_bar).collect();
    let tertiles = compute_tertiles(&valences)?;
    let mut state_counts = [0u64; 3];
    for &v in &valences {
        state_counts[classify_valence(v, tertiles).index()] += 1;
    }

    let sequences: Vec<Vec<ValenceState>> = sessions
        .iter()
        .map(|s| {
            s.turn_ids
                .iter()
                .filter(|id| role_of.get(id.as_str()).is_some_and(|t| options.role_filter.matches(t.role)))
                .filter_map(|id| by_turn.get(id.as_str()))
                .map(|f| classify_valence(f.v_bar, tertiles))
                .collect()
        })
        .collect();
    let sessions_with_turns = sequences.iter().filter(|s| !s.is_empty()).count() as u64;
    let transitions = TransitionModel::fit(count_transitions(&sequences), options.beta)?;

    Ok(AffectAnalysis {
        role_filter: options.role_filter,
        turns_analyzed: selected.len() as u64,
        sessions_with_turns,
        tertiles,
        state_counts,
        transitions,
        labels: label_frequencies(&selected, options.top_n)?,
        distributions: val_distributions(&selected)?,
    })
}
