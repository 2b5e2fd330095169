//! Hierarchical ensemble fusion of per-model ranked annotations.
//!
//! 1. Intra-model pooling: rank `r` of a `K`-item list gets weight
//!    `(K - r + 1) / (K (K + 1) / 2)`; each model's valence, arousal and
//!    learning scores are pooled with these weights.
//! 2. Inter-model aggregation: pooled scores are averaged, unweighted, over
//!    the models that produced a valid answer.
//! 3. Label consensus: each label gets one vote per model that lists it at
//!    any rank. The most-voted label wins; ties go to the label with the
//!    higher mean valence across all entries that carry it, then to the
//!    lexicographically smaller label.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{normalize_label, ModelAnnotation};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FusionError {
    #[error("rank weights need K >= 1, got {0}")]
    InvalidK(usize),
    #[error("annotation from {0} has no emotions")]
    EmptyAnnotation(String),
    #[error("nothing to aggregate")]
    NoModels,
    #[error("turn {0:?} has no valid annotation to fuse")]
    TurnUnfusable(String),
    #[error("annotations for different turns passed together: {0:?} and {1:?}")]
    MixedTurns(String, String),
    #[error("model {0:?} contributes more than one annotation")]
    DuplicateModel(String),
}

/// Normalized, strictly decreasing rank weights.
#[derive(Debug, Clone, PartialEq)]
pub struct RankWeights(Vec<f64>);

impl RankWeights {
    pub fn weights(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn triangular(k: usize) -> u64 {
    (k as u64) * (k as u64 + 1) / 2
}

/// Linearly decaying weights `w_r = (K - r + 1) / (K (K + 1) / 2)`.
pub fn rank_weights(k: usize) -> Result<RankWeights, FusionError> {
    if k < 1 {
        return Err(FusionError::InvalidK(k));
    }
    let total = triangular(k) as f64;
    Ok(RankWeights((1..=k).map(|r| (k - r + 1) as f64 / total).collect()))
}

/// One model's rank-pooled scores for a turn.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PooledScores {
    pub model_id: String,
    pub v_hat: f64,
    pub a_hat: f64,
    pub l_hat: f64,
}

/// Rank-weighted mean of each score dimension. Scores are integers, so the
/// weighted sum is formed exactly as `Σ (K - r + 1) · s_r` and divided once
/// by `K (K + 1) / 2`.
pub fn pool_intra_model(ann: &ModelAnnotation) -> Result<PooledScores, FusionError> {
    let k = ann.emotions.len();
    if k == 0 {
        return Err(FusionError::EmptyAnnotation(ann.model_id.clone()));
    }
    let total = triangular(k) as f64;
    let mut sums = [0u64; 3];
    for (i, e) in ann.emotions.iter().enumerate() {
        let w = (k - i) as u64;
        sums[0] += w * u64::from(e.valence);
        sums[1] += w * u64::from(e.arousal);
        sums[2] += w * u64::from(e.learning);
    }
    Ok(PooledScores {
        model_id: ann.model_id.clone(),
        v_hat: sums[0] as f64 / total,
        a_hat: sums[1] as f64 / total,
        l_hat: sums[2] as f64 / total,
    })
}

/// Order-independent mean: values are summed in sorted order and the result
/// is kept inside the sample's range.
fn stable_mean(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    let lo = values[0];
    let hi = values[values.len() - 1];
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    mean.clamp(lo, hi)
}

/// Unweighted mean of pooled scores across the available models.
pub fn aggregate_scalars(pools: &[PooledScores]) -> Result<(f64, f64, f64), FusionError> {
    if pools.is_empty() {
        return Err(FusionError::NoModels);
    }
    Ok((
        stable_mean(pools.iter().map(|p| p.v_hat).collect()),
        stable_mean(pools.iter().map(|p| p.a_hat).collect()),
        stable_mean(pools.iter().map(|p| p.l_hat).collect()),
    ))
}

#[derive(Default)]
struct LabelTally {
    votes: u32,
    valence_sum: u64,
    entries: u64,
}

/// Plurality label over the given annotations plus the vote count of every
/// label that was emitted.
pub fn consensus_label(anns: &[ModelAnnotation]) -> Result<(String, BTreeMap<String, u32>), FusionError> {
    let mut tallies: BTreeMap<String, LabelTally> = BTreeMap::new();
    for ann in anns {
        let mut seen_here = BTreeSet::new();
        for e in &ann.emotions {
            let label = normalize_label(&e.label);
            let tally = tallies.entry(label.clone()).or_default();
            tally.valence_sum += u64::from(e.valence);
            tally.entries += 1;
            if seen_here.insert(label) {
                tally.votes += 1;
            }
        }
    }

    // BTreeMap iterates labels in ascending order, so keeping the first of
    // any exact tie yields the lexicographic tie-break.
    let mut best: Option<(&String, &LabelTally)> = None;
    for (label, tally) in &tallies {
        let better = match best {
            None => true,
            Some((_, b)) => {
                tally.votes > b.votes
                    || (tally.votes == b.votes
                        // mean_a > mean_b  <=>  sum_a * n_b > sum_b * n_a
                        && tally.valence_sum * b.entries > b.valence_sum * tally.entries)
            }
        };
        if better {
            best = Some((label, tally));
        }
    }
    let (winner, _) = best.ok_or(FusionError::NoModels)?;
    let winner = winner.clone();
    let votes = tallies.into_iter().map(|(l, t)| (l, t.votes)).collect();
    Ok((winner, votes))
}

/// Fused scores and consensus label for one turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedAnnotation {
    pub turn_id: String,
    pub v_bar: f64,
    pub a_bar: f64,
    pub l_bar: f64,
    pub consensus_label: String,
    pub label_votes: BTreeMap<String, u32>,
    /// Sorted model ids.
    pub contributing_models: Vec<String>,
}

/// Runs all three fusion stages over the valid annotations of one turn.
/// Invalid annotations are skipped; if none remain the turn is unfusable.
pub fn fuse_turn(anns: &[ModelAnnotation]) -> Result<FusedAnnotation, FusionError> {
    let Some(first) = anns.first() else {
        return Err(FusionError::TurnUnfusable(String::new()));
    };
    let turn_id = first.turn_id.clone();
    let mut models = BTreeSet::new();
    for ann in anns {
        if ann.turn_id != turn_id {
            return Err(FusionError::MixedTurns(turn_id, ann.turn_id.clone()));
        }
        if !models.insert(ann.model_id.as_str()) {
            return Err(FusionError::DuplicateModel(ann.model_id.clone()));
        }
    }

    let valid: Vec<ModelAnnotation> = anns
        .iter()
        .filter(|a| match a.validate() {
            Ok(()) => true,
            Err(e) => {
                log::warn!("turn {turn_id}: skipping annotation from {}: {e}", a.model_id);
                false
            }
        })
        .cloned()
        .collect();
    if valid.is_empty() {
        return Err(FusionError::TurnUnfusable(turn_id));
    }

    let pools = valid.iter().map(pool_intra_model).collect::<Result<Vec<_>, _>>()?;
    let (v_bar, a_bar, l_bar) = aggregate_scalars(&pools)?;
    let (consensus_label, label_votes) = consensus_label(&valid)?;
    let mut contributing_models: Vec<String> = valid.iter().map(|a| a.model_id.clone()).collect();
    contributing_models.sort();

    Ok(FusedAnnotation {
        turn_id,
        v_bar,
        a_bar,
        l_bar,
        consensus_label,
        label_votes,
        contributing_models,
    })
}
