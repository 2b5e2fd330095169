//! Parsing of backend completions.
//!
//! A completion must contain one JSON object with an `emotions` array:
//!
//! ```text
//! {"emotions": [{"rank": 1, "label": "confusion", "valence": 3, "arousal": 6, "learning": 4}, ...]}
//! ```
//!
//! Surrounding prose and code fences are ignored; the first well-formed
//! object carrying an `emotions` key wins. Array order is rank order and an
//! explicit `rank`, when present, must match the position. Lists longer than
//! [`K_MAX`] are cut to their first `K_MAX` entries before any other check.

use serde_json::{Map, Value};
use thiserror::Error;

use super::{normalize_label, RankedEmotion, K_MAX, SCORE_MAX, SCORE_MIN};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ResponseError {
    #[error("no parseable emotions object: {0}")]
    Parse(String),
    #[error("rank {rank}: {field} = {value} is not an integer in [{SCORE_MIN}, {SCORE_MAX}]")]
    Range {
        rank: usize,
        field: &'static str,
        value: String,
    },
    #[error("label {0:?} listed more than once")]
    DuplicateLabel(String),
    #[error("rank {0}: label is empty")]
    EmptyLabel(usize),
    #[error("entry at position {position} declares rank {declared}")]
    Rank { position: usize, declared: String },
    #[error("emotions list is empty")]
    NoEmotions,
}

impl ResponseError {
    /// Whether another attempt could plausibly succeed.
    pub fn is_retryable(&self) -> bool {
        matches!(self, ResponseError::Parse(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ResponseWarning {
    Truncated { listed: usize, kept: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedResponse {
    pub emotions: Vec<RankedEmotion>,
    pub warnings: Vec<ResponseWarning>,
}

/// First JSON object in `raw` that has an `emotions` key.
fn extract_object(raw: &str) -> Option<Map<String, Value>> {
    for (idx, _) in raw.match_indices('{') {
        let mut stream = serde_json::Deserializer::from_str(&raw[idx..]).into_iter::<Value>();
        if let Some(Ok(Value::Object(obj))) = stream.next() {
            if obj.contains_key("emotions") {
                return Some(obj);
            }
        }
    }
    None
}

fn score(entry: &Map<String, Value>, rank: usize, field: &'static str) -> Result<u8, ResponseError> {
    let value = entry
        .get(field)
        .ok_or_else(|| ResponseError::Parse(format!("rank {rank}: missing `{field}`")))?;
    let n = match value {
        Value::Number(n) => n,
        other => {
            return Err(ResponseError::Parse(format!(
                "rank {rank}: `{field}` must be a number, got {other}"
            )))
        }
    };
    let out_of_range = || ResponseError::Range {
        rank,
        field,
        value: n.to_string(),
    };
    let as_int = match (n.as_i64(), n.as_f64()) {
        (Some(i), _) => i,
        (None, Some(f)) if f.fract() == 0.0 && f.abs() < 1e6 => f as i64,
        _ => return Err(out_of_range()),
    };
    if (i64::from(SCORE_MIN)..=i64::from(SCORE_MAX)).contains(&as_int) {
        Ok(as_int as u8)
    } else {
        Err(out_of_range())
    }
}

/// Extracts and validates the ranked emotion list from a raw completion.
pub fn parse_response(raw: &str) -> Result<ParsedResponse, ResponseError> {
    let obj = extract_object(raw).ok_or_else(|| ResponseError::Parse("no JSON object with an `emotions` key".into()))?;
    let entries = match obj.get("emotions") {
        Some(Value::Array(a)) => a,
        Some(other) => return Err(ResponseError::Parse(format!("`emotions` must be an array, got {other}"))),
        None => unreachable!("extract_object checks the key"),
    };
    if entries.is_empty() {
        return Err(ResponseError::NoEmotions);
    }

    let mut warnings = Vec::new();
    let kept = &entries[..entries.len().min(K_MAX)];
    if entries.len() > K_MAX {
        log::warn!("response lists {} emotions; keeping the first {K_MAX}", entries.len());
        warnings.push(ResponseWarning::Truncated {
            listed: entries.len(),
            kept: K_MAX,
        });
    }

    let mut emotions: Vec<RankedEmotion> = Vec::with_capacity(kept.len());
    for (i, entry) in kept.iter().enumerate() {
        let rank = i + 1;
        let entry = entry
            .as_object()
            .ok_or_else(|| ResponseError::Parse(format!("rank {rank}: entry is not an object")))?;
        if let Some(declared) = entry.get("rank") {
            if declared.as_u64() != Some(rank as u64) {
                return Err(ResponseError::Rank {
                    position: rank,
                    declared: declared.to_string(),
                });
            }
        }
        let label = match entry.get("label") {
            Some(Value::String(s)) => normalize_label(s),
            Some(other) => return Err(ResponseError::Parse(format!("rank {rank}: `label` must be a string, got {other}"))),
            None => return Err(ResponseError::Parse(format!("rank {rank}: missing `label`"))),
        };
        if label.is_empty() {
            return Err(ResponseError::EmptyLabel(rank));
        }
        let valence = score(entry, rank, "valence")?;
        let arousal = score(entry, rank, "arousal")?;
        let learning = score(entry, rank, "learning")?;
        if emotions.iter().any(|e| e.label == label) {
            return Err(ResponseError::DuplicateLabel(label));
        }
        emotions.push(RankedEmotion {
            label,
            valence,
            arousal,
            learning,
            rank: rank as u8,
        });
    }
    Ok(ParsedResponse { emotions, warnings })
}
