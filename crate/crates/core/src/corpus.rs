//! Dialogue corpus ingestion, session segmentation and summary statistics.
//!
//! Input is line-delimited JSON, one turn per line:
//!
//! ```text
//! {"turn_id":"t1","participant_id":"p1","timestamp":"2024-09-24T14:03:11Z",
//!  "role":"student","text":"why does my loop never stop?","token_count":7}
//! ```
//!
//! `code_snippet_count` and `token_count` are optional. A missing token count
//! is the number of whitespace-separated tokens in `text`; a missing snippet
//! count is the number of fenced code blocks. Unknown fields are ignored.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::io::BufRead;
use std::str::FromStr;

use chrono::{DateTime, NaiveDate, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::stats::{quartiles_opt, Quartiles};

pub const DEFAULT_SESSION_GAP_MINUTES: f64 = 60.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Student,
    Tutor,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Student => "student",
            Role::Tutor => "tutor",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "student" => Ok(Role::Student),
            "tutor" => Ok(Role::Tutor),
            other => Err(format!("expected \"student\" or \"tutor\", got {other:?}")),
        }
    }
}

/// Which speaker roles an analysis looks at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoleFilter {
    #[default]
    Student,
    Tutor,
    All,
}

impl RoleFilter {
    pub fn matches(self, role: Role) -> bool {
        match self {
            RoleFilter::Student => role == Role::Student,
            RoleFilter::Tutor => role == Role::Tutor,
            RoleFilter::All => true,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RoleFilter::Student => "student",
            RoleFilter::Tutor => "tutor",
            RoleFilter::All => "all",
        }
    }
}

impl FromStr for RoleFilter {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "student" => Ok(RoleFilter::Student),
            "tutor" => Ok(RoleFilter::Tutor),
            "all" => Ok(RoleFilter::All),
            other => Err(format!("expected student, tutor or all, got {other:?}")),
        }
    }
}

/// One utterance in a tutoring dialogue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub turn_id: String,
    pub participant_id: String,
    pub timestamp: DateTime<Utc>,
    pub role: Role,
    pub text: String,
    pub code_snippet_count: u64,
    pub token_count: u64,
}

/// A maximal run of one participant's turns without an inactivity gap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub participant_id: String,
    pub turn_ids: Vec<String>,
    pub duration_minutes: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum CorpusError {
    #[error("line {line}: field `{field}`: {reason}")]
    Malformed {
        line: usize,
        field: String,
        reason: String,
    },
    #[error("duplicate turn_id {turn_id:?} on lines {first_line} and {second_line}")]
    DuplicateTurnId {
        turn_id: String,
        first_line: usize,
        second_line: usize,
    },
    #[error("line {line}: unreadable input: {reason}")]
    Io { line: usize, reason: String },
    #[error("turns are not sorted by (participant_id, timestamp) at turn {turn_id:?}")]
    Unsorted { turn_id: String },
    #[error("session gap must be a positive number of minutes, got {0}")]
    InvalidGap(f64),
    #[error("session {session_id:?} references unknown turn {turn_id:?}")]
    UnknownTurn { session_id: String, turn_id: String },
}

fn malformed(line: usize, field: &str, reason: impl Into<String>) -> CorpusError {
    CorpusError::Malformed {
        line,
        field: field.to_string(),
        reason: reason.into(),
    }
}

fn required_str<'a>(obj: &'a Map<String, Value>, line: usize, field: &str) -> Result<&'a str, CorpusError> {
    match obj.get(field) {
        Some(Value::String(s)) => Ok(s),
        Some(other) => Err(malformed(line, field, format!("expected a string, got {other}"))),
        None => Err(malformed(line, field, "missing")),
    }
}

fn optional_count(obj: &Map<String, Value>, line: usize, field: &str) -> Result<Option<u64>, CorpusError> {
    match obj.get(field) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::Number(n)) => n
            .as_u64()
            .map(Some)
            .ok_or_else(|| malformed(line, field, format!("expected a non-negative integer, got {n}"))),
        Some(other) => Err(malformed(line, field, format!("expected a non-negative integer, got {other}"))),
    }
}

/// Parses an RFC 3339 timestamp. Inputs without an explicit offset are
/// rejected rather than guessed.
pub fn parse_timestamp(raw: &str) -> Result<DateTime<Utc>, String> {
    DateTime::parse_from_rfc3339(raw.trim())
        .map(|t| t.with_timezone(&Utc))
        .map_err(|e| format!("not an RFC 3339 timestamp with timezone ({e}): {raw:?}"))
}

pub fn whitespace_token_count(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

/// Number of complete ``` fenced blocks in `text`.
pub fn fenced_block_count(text: &str) -> u64 {
    let fences = text
        .lines()
        .filter(|l| l.trim_start().starts_with("```"))
        .count();
    (fences / 2) as u64
}

fn parse_record(line_no: usize, line: &str) -> Result<Turn, CorpusError> {
    let value: Value =
        serde_json::from_str(line).map_err(|e| malformed(line_no, "<record>", format!("invalid JSON: {e}")))?;
    let obj = value
        .as_object()
        .ok_or_else(|| malformed(line_no, "<record>", "expected a JSON object"))?;

    let turn_id = required_str(obj, line_no, "turn_id")?;
    if turn_id.trim().is_empty() {
        return Err(malformed(line_no, "turn_id", "empty"));
    }
    let participant_id = required_str(obj, line_no, "participant_id")?;
    if participant_id.trim().is_empty() {
        return Err(malformed(line_no, "participant_id", "empty"));
    }
    let timestamp =
        parse_timestamp(required_str(obj, line_no, "timestamp")?).map_err(|e| malformed(line_no, "timestamp", e))?;
    let role = required_str(obj, line_no, "role")?
        .parse::<Role>()
        .map_err(|e| malformed(line_no, "role", e))?;
    let text = required_str(obj, line_no, "text")?.to_string();
    let code_snippet_count =
        optional_count(obj, line_no, "code_snippet_count")?.unwrap_or_else(|| fenced_block_count(&text));
    let token_count = optional_count(obj, line_no, "token_count")?.unwrap_or_else(|| whitespace_token_count(&text));

    Ok(Turn {
        turn_id: turn_id.to_string(),
        participant_id: participant_id.to_string(),
        timestamp,
        role,
        text,
        code_snippet_count,
        token_count,
    })
}

/// Reads line-delimited turn records. Blank lines are skipped; line numbers in
/// errors are 1-based. The result is sorted by `(participant_id, timestamp)`,
/// with `turn_id` as a final tie-break.
pub fn parse_corpus<R: BufRead>(reader: R) -> Result<Vec<Turn>, CorpusError> {
    let mut turns = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| CorpusError::Io {
            line: line_no,
            reason: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let turn = parse_record(line_no, &line)?;
        if let Some(&first_line) = seen.get(&turn.turn_id) {
            return Err(CorpusError::DuplicateTurnId {
                turn_id: turn.turn_id,
                first_line,
                second_line: line_no,
            });
        }
        seen.insert(turn.turn_id.clone(), line_no);
        turns.push(turn);
    }
    sort_turns(&mut turns);
    Ok(turns)
}

pub fn parse_corpus_str(input: &str) -> Result<Vec<Turn>, CorpusError> {
    parse_corpus(input.as_bytes())
}

pub fn sort_turns(turns: &mut [Turn]) {
    turns.sort_by(|a, b| {
        (a.participant_id.as_str(), a.timestamp, a.turn_id.as_str()).cmp(&(
            b.participant_id.as_str(),
            b.timestamp,
            b.turn_id.as_str(),
        ))
    });
}

fn minutes_between(earlier: DateTime<Utc>, later: DateTime<Utc>) -> f64 {
    let delta = later - earlier;
    match delta.num_microseconds() {
        Some(us) => us as f64 / 60_000_000.0,
        None => delta.num_seconds() as f64 / 60.0,
    }
}

/// Splits each participant's turns into sessions. A gap of at least
/// `gap_minutes` starts a new session. Turns must already be ordered by
/// participant and then by timestamp; participants must be contiguous.
pub fn segment_sessions(turns: &[Turn], gap_minutes: f64) -> Result<Vec<Session>, CorpusError> {
    if !(gap_minutes.is_finite() && gap_minutes > 0.0) {
        return Err(CorpusError::InvalidGap(gap_minutes));
    }
    let mut finished_participants: HashSet<&str> = HashSet::new();
    let mut sessions: Vec<Session> = Vec::new();
    let mut current: Option<(usize, DateTime<Utc>, DateTime<Utc>)> = None; // (session index, first, last)
    let mut per_participant = 0usize;

    for (i, turn) in turns.iter().enumerate() {
        let prev = i.checked_sub(1).map(|j| &turns[j]);
        let same_participant = prev.is_some_and(|p| p.participant_id == turn.participant_id);

        if let Some(p) = prev {
            if same_participant && turn.timestamp < p.timestamp {
                return Err(CorpusError::Unsorted {
                    turn_id: turn.turn_id.clone(),
                });
            }
            if !same_participant {
                finished_participants.insert(p.participant_id.as_str());
                if finished_participants.contains(turn.participant_id.as_str()) {
                    return Err(CorpusError::Unsorted {
                        turn_id: turn.turn_id.clone(),
                    });
                }
            }
        }

        let split = match (prev, current) {
            (Some(p), Some(_)) if same_participant => minutes_between(p.timestamp, turn.timestamp) >= gap_minutes,
            _ => true,
        };

        if split {
            if let Some((idx, first, last)) = current {
                sessions[idx].duration_minutes = minutes_between(first, last);
            }
            per_participant = if same_participant { per_participant + 1 } else { 1 };
            sessions.push(Session {
                session_id: format!("{}/{}", turn.participant_id, per_participant),
                participant_id: turn.participant_id.clone(),
                turn_ids: Vec::new(),
                duration_minutes: 0.0,
            });
            current = Some((sessions.len() - 1, turn.timestamp, turn.timestamp));
        }
        let (idx, first, _) = current.expect("session opened above");
        sessions[idx].turn_ids.push(turn.turn_id.clone());
        current = Some((idx, first, turn.timestamp));
    }
    if let Some((idx, first, last)) = current {
        sessions[idx].duration_minutes = minutes_between(first, last);
    }
    Ok(sessions)
}

/// Per-participant rollup underlying the summary medians.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParticipantRollup {
    pub participant_id: String,
    pub sessions: u64,
    pub turns: u64,
    pub tokens: u64,
    pub code_snippets: u64,
    /// Whole calendar days (UTC) between first and last activity.
    pub span_days: i64,
    pub days_active: u64,
    pub turns_per_session: f64,
    pub tokens_per_turn: f64,
    pub code_snippets_per_turn: f64,
    pub mean_session_minutes: f64,
}

/// One row of the summary: an overall value plus optional distributions.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryMetric {
    pub name: &'static str,
    pub overall: Option<f64>,
    /// Distribution of the metric over sessions or turns, when the overall
    /// column is itself a distribution.
    pub overall_quartiles: Option<Quartiles>,
    pub per_participant: Option<Quartiles>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusSummary {
    pub participants: u64,
    pub sessions: u64,
    pub turns: u64,
    pub tokens: u64,
    pub code_snippets: u64,
    pub session_minutes_total: f64,
    pub span_days: Option<i64>,
    pub days_active: u64,
    pub first_activity: Option<NaiveDate>,
    pub last_activity: Option<NaiveDate>,
    /// Per-session turn counts.
    pub turns_per_session: Option<Quartiles>,
    /// Per-turn token counts.
    pub tokens_per_turn: Option<Quartiles>,
    /// Per-session durations in minutes.
    pub session_duration: Option<Quartiles>,
    pub per_participant_sessions: Option<Quartiles>,
    pub per_participant_span_days: Option<Quartiles>,
    pub per_participant_days_active: Option<Quartiles>,
    pub per_participant_turns: Option<Quartiles>,
    pub per_participant_turns_per_session: Option<Quartiles>,
    pub per_participant_tokens: Option<Quartiles>,
    pub per_participant_tokens_per_turn: Option<Quartiles>,
    pub per_participant_code_snippets: Option<Quartiles>,
    pub per_participant_code_snippets_per_turn: Option<Quartiles>,
    pub per_participant_session_duration: Option<Quartiles>,
    pub rollups: Vec<ParticipantRollup>,
}

impl CorpusSummary {
    /// Summary rows in report order.
    pub fn metrics(&self) -> Vec<SummaryMetric> {
        let m = |name, overall: Option<f64>, overall_quartiles, per_participant| SummaryMetric {
            name,
            overall,
            overall_quartiles,
            per_participant,
        };
        let snippets_per_turn = (self.turns > 0).then(|| self.code_snippets as f64 / self.turns as f64);
        vec![
            m("participants", Some(self.participants as f64), None, None),
            m("sessions", Some(self.sessions as f64), None, self.per_participant_sessions),
            m(
                "conversation_span_days",
                self.span_days.map(|d| d as f64),
                None,
                self.per_participant_span_days,
            ),
            m("days_active", Some(self.days_active as f64), None, self.per_participant_days_active),
            m("turns", Some(self.turns as f64), None, self.per_participant_turns),
            m(
                "turns_per_session",
                None,
                self.turns_per_session,
                self.per_participant_turns_per_session,
            ),
            m("tokens", Some(self.tokens as f64), None, self.per_participant_tokens),
            m("tokens_per_turn", None, self.tokens_per_turn, self.per_participant_tokens_per_turn),
            m("code_snippets", Some(self.code_snippets as f64), None, self.per_participant_code_snippets),
            m(
                "code_snippets_per_turn",
                snippets_per_turn,
                None,
                self.per_participant_code_snippets_per_turn,
            ),
            m(
                "session_duration_minutes",
                Some(self.session_minutes_total),
                self.session_duration,
                self.per_participant_session_duration,
            ),
        ]
    }
}

/// Corpus-level counts plus median (q1, q3) rollups. Per-participant values
/// are computed for each participant and then summarised across participants.
pub fn summarize_corpus(turns: &[Turn], sessions: &[Session]) -> Result<CorpusSummary, CorpusError> {
    let by_id: HashMap<&str, &Turn> = turns.iter().map(|t| (t.turn_id.as_str(), t)).collect();

    let mut session_turns: Vec<Vec<&Turn>> = Vec::with_capacity(sessions.len());
    for s in sessions {
        let resolved = s
            .turn_ids
            .iter()
            .map(|id| {
                by_id.get(id.as_str()).copied().ok_or_else(|| CorpusError::UnknownTurn {
                    session_id: s.session_id.clone(),
                    turn_id: id.clone(),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        session_turns.push(resolved);
    }

    let mut participants: Vec<&str> = turns.iter().map(|t| t.participant_id.as_str()).collect();
    participants.sort_unstable();
    participants.dedup();

    let mut rollups = Vec::with_capacity(participants.len());
    for pid in &participants {
        let own: Vec<&Turn> = turns.iter().filter(|t| t.participant_id == *pid).collect();
        let own_sessions: Vec<&Session> = sessions.iter().filter(|s| s.participant_id == *pid).collect();
        let turns_n = own.len() as u64;
        let tokens: u64 = own.iter().map(|t| t.token_count).sum();
        let code: u64 = own.iter().map(|t| t.code_snippet_count).sum();
        let dates: BTreeSet<NaiveDate> = own.iter().map(|t| t.timestamp.date_naive()).collect();
        let span_days = match (dates.first(), dates.last()) {
            (Some(a), Some(b)) => (*b - *a).num_days(),
            _ => 0,
        };
        let n_sessions = own_sessions.len() as u64;
        rollups.push(ParticipantRollup {
            participant_id: pid.to_string(),
            sessions: n_sessions,
            turns: turns_n,
            tokens,
            code_snippets: code,
            span_days,
            days_active: dates.len() as u64,
            turns_per_session: if n_sessions > 0 {
                own_sessions.iter().map(|s| s.turn_ids.len()).sum::<usize>() as f64 / n_sessions as f64
            } else {
                0.0
            },
            tokens_per_turn: ratio(tokens, turns_n),
            code_snippets_per_turn: ratio(code, turns_n),
            mean_session_minutes: if n_sessions > 0 {
                own_sessions.iter().map(|s| s.duration_minutes).sum::<f64>() / n_sessions as f64
            } else {
                0.0
            },
        });
    }

    let all_dates: BTreeSet<NaiveDate> = turns.iter().map(|t| t.timestamp.date_naive()).collect();
    let first_activity = all_dates.first().copied();
    let last_activity = all_dates.last().copied();
    let col = |f: fn(&ParticipantRollup) -> f64| quartiles_opt(&rollups.iter().map(f).collect::<Vec<_>>());

    Ok(CorpusSummary {
        participants: participants.len() as u64,
        sessions: sessions.len() as u64,
        turns: turns.len() as u64,
        tokens: turns.iter().map(|t| t.token_count).sum(),
        code_snippets: turns.iter().map(|t| t.code_snippet_count).sum(),
        session_minutes_total: sessions.iter().map(|s| s.duration_minutes).sum(),
        span_days: first_activity.zip(last_activity).map(|(a, b)| (b - a).num_days()),
        days_active: all_dates.len() as u64,
        first_activity,
        last_activity,
        turns_per_session: quartiles_opt(&session_turns.iter().map(|s| s.len() as f64).collect::<Vec<_>>()),
        tokens_per_turn: quartiles_opt(&turns.iter().map(|t| t.token_count as f64).collect::<Vec<_>>()),
        session_duration: quartiles_opt(&sessions.iter().map(|s| s.duration_minutes).collect::<Vec<_>>()),
        per_participant_sessions: col(|r| r.sessions as f64),
        per_participant_span_days: col(|r| r.span_days as f64),
        per_participant_days_active: col(|r| r.days_active as f64),
        per_participant_turns: col(|r| r.turns as f64),
        per_participant_turns_per_session: col(|r| r.turns_per_session),
        per_participant_tokens: col(|r| r.tokens as f64),
        per_participant_tokens_per_turn: col(|r| r.tokens_per_turn),
        per_participant_code_snippets: col(|r| r.code_snippets as f64),
        per_participant_code_snippets_per_turn: col(|r| r.code_snippets_per_turn),
        per_participant_session_duration: col(|r| r.mean_session_minutes),
        rollups,
    })
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}
