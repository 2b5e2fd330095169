//! CSV and JSON report writers.
//!
//! All numbers go through [`fmt_num`]: at most six significant digits,
//! `%g` style, and `inf` for unbounded dwell times.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use thiserror::Error;

use crate::corpus::CorpusSummary;
use crate::dynamics::{AffectAnalysis, Distribution, ValenceState};
use crate::stats::Quartiles;

pub const VAL_HISTOGRAMS: &str = "val_histograms.csv";
pub const LABEL_FREQUENCIES: &str = "label_frequencies.csv";
pub const TRANSITION_MATRIX: &str = "transition_matrix.csv";
pub const CORPUS_SUMMARY: &str = "corpus_summary.csv";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("cannot write {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

/// Formats like C's `%.6g`, except that infinities print as `inf`/`-inf`.
pub fn fmt_num(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..6).contains(&exp) {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{}{:02}", trim_zeros(mantissa), sign, exp.abs())
    } else {
        let decimals = (5 - exp) as usize;
        trim_zeros(&format!("{x:.decimals$}")).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(fmt_num).unwrap_or_default()
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), ReportError> {
    let csv_err = |source| ReportError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.write_record(row).map_err(csv_err)?;
    }
    w.flush().map_err(|source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn histogram_rows(d: &[&Distribution; 3], n: u64) -> Vec<Vec<String>> {
    let mut rows: Vec<Vec<String>> = (0..9)
        .map(|i| {
            let mut r = vec![(i + 1).to_string()];
            r.extend(d.iter().map(|x| x.bins[i].to_string()));
            r
        })
        .collect();
    let q = |name: &str, f: fn(&Quartiles) -> f64| {
        let mut r = vec![name.to_string()];
        r.extend(d.iter().map(|x| fmt_num(f(&x.quartiles))));
        r
    };
    rows.push(q("median", |q| q.median));
    rows.push(q("q1", |q| q.q1));
    rows.push(q("q3", |q| q.q3));
    rows.push(vec!["n".into(), n.to_string(), n.to_string(), n.to_string()]);
    rows
}

pub fn label_rows(a: &AffectAnalysis) -> Vec<Vec<String>> {
    let l = &a.labels;
    let mut rows: Vec<Vec<String>> = l
        .rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            vec![
                (i + 1).to_string(),
                r.label.clone(),
                r.count.to_string(),
                l.denominator.to_string(),
                fmt_num(r.share),
            ]
        })
        .collect();
    let covered: u64 = l.rows.iter().map(|r| r.count).sum();
    rows.push(vec![
        "coverage".into(),
        l.excluded_ties.join("|"),
        covered.to_string(),
        l.denominator.to_string(),
        fmt_num(l.coverage),
    ]);
    rows
}

pub const TRANSITION_HEADER: [&str; 8] = [
    "from",
    "count_negative",
    "count_neutral",
    "count_positive",
    "prob_negative",
    "prob_neutral",
    "prob_positive",
    "dwell",
];

pub fn transition_rows(a: &AffectAnalysis) -> Vec<Vec<String>> {
    let m = &a.transitions;
    ValenceState::ALL
        .iter()
        .map(|s| {
            let i = s.index();
            let mut r = vec![s.as_str().to_string()];
            r.extend(m.counts[i].iter().map(|c| c.to_string()));
            r.extend(m.probs[i].iter().map(|&p| fmt_num(p)));
            r.push(fmt_num(m.dwell[i]));
            r
        })
        .collect()
}

pub const SUMMARY_HEADER: [&str; 8] = [
    "metric",
    "overall",
    "overall_median",
    "overall_q1",
    "overall_q3",
    "participant_median",
    "participant_q1",
    "participant_q3",
];

pub fn summary_rows(s: &CorpusSummary) -> Vec<Vec<String>> {
    let quart = |q: Option<Quartiles>| match q {
        Some(q) => vec![fmt_num(q.median), fmt_num(q.q1), fmt_num(q.q3)],
        None => vec![String::new(); 3],
    };
    let mut rows: Vec<Vec<String>> = s
        .metrics()
        .into_iter()
        .map(|m| {
            let mut r = vec![m.name.to_string(), opt(m.overall)];
            r.extend(quart(m.overall_quartiles));
            r.extend(quart(m.per_participant));
            r
        })
        .collect();
    for (name, date) in [("first_activity", s.first_activity), ("last_activity", s.last_activity)] {
        let mut r = vec![name.to_string(), date.map(|d| d.to_string()).unwrap_or_default()];
        r.extend(vec![String::new(); 6]);
        rows.push(r);
    }
    rows
}

/// Writes the four CSV reports into `dir`, creating it if needed, and
/// returns the written paths in a fixed order.
pub fn emit_reports(dir: &Path, analysis: &AffectAnalysis, summary: &CorpusSummary) -> Result<Vec<PathBuf>, ReportError> {
    fs::create_dir_all(dir).map_err(|source| ReportError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let d = &analysis.distributions;
    let written = [VAL_HISTOGRAMS, LABEL_FREQUENCIES, TRANSITION_MATRIX, CORPUS_SUMMARY].map(|f| dir.join(f));
    write_csv(
        &written[0],
        &["bin", "valence", "arousal", "learning"],
        &histogram_rows(&[&d.valence, &d.arousal, &d.learning], d.n),
    )?;
    write_csv(
        &written[1],
        &["rank", "label", "count", "denominator", "share"],
        &label_rows(analysis),
    )?;
    write_csv(&written[2], &TRANSITION_HEADER, &transition_rows(analysis))?;
    write_csv(&written[3], &SUMMARY_HEADER, &summary_rows(summary))?;
    Ok(written.to_vec())
}

fn json_num(x: f64) -> Value {
    if x.is_finite() {
        json!(x)
    } else {
        json!(fmt_num(x))
    }
}

/// Structured form of the analysis. Infinite dwell times become the string
/// `"inf"` since JSON has no infinity.
pub fn analysis_json(a: &AffectAnalysis) -> Value {
    let m = &a.transitions;
    let states: Vec<Value> = ValenceState::ALL
        .iter()
        .map(|s| {
            let i = s.index();
            json!({
                "state": s.as_str(),
                "turns": a.state_counts[i],
                "counts": m.counts[i],
                "probs": m.probs[i],
                "dwell": json_num(m.dwell[i]),
            })
        })
        .collect();
    let dist = |d: &Distribution| json!({ "bins": d.bins, "quartiles": d.quartiles });
    json!({
        "role_filter": a.role_filter.as_str(),
        "turns_analyzed": a.turns_analyzed,
        "sessions_with_turns": a.sessions_with_turns,
        "tertiles": a.tertiles,
        "beta": m.beta,
        "states": states,
        "labels": a.labels,
        "distributions": {
            "n": a.distributions.n,
            "valence": dist(&a.distributions.valence),
            "arousal": dist(&a.distributions.arousal),
            "learning": dist(&a.distributions.learning),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_significant_digits() {
        let cases = [
            (0.0, "0"),
            (1.0, "1"),
            (2.5, "2.5"),
            (1.0 / 3.0, "0.333333"),
            (2.0 / 3.0, "0.666667"),
            (100.0 / 7.0, "14.2857"),
            (123456.0, "123456"),
            (1234567.0, "1.23457e+06"),
            (0.0001, "0.0001"),
            (0.00001234, "1.234e-05"),
            (-0.5, "-0.5"),
            (999999.5, "1e+06"),
            (f64::INFINITY, "inf"),
        ];
        for (x, want) in cases {
            assert_eq!(fmt_num(x), want, "{x}");
        }
    }
}
