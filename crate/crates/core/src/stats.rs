//! Order statistics shared by the corpus summary and the affect analyses.
//!
//! Quantiles use linear interpolation between order statistics (the
//! "type 7" rule used by R and NumPy's default): for probability `p` over
//! `n` sorted values the position is `h = (n - 1) * p`, and the result is
//! `x[floor(h)] + (h - floor(h)) * (x[floor(h) + 1] - x[floor(h)])`.

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("cannot compute {0} of an empty sample")]
    Empty(&'static str),
    #[error("sample contains a non-finite value ({0})")]
    NonFinite(f64),
    #[error("quantile probability {0} outside [0, 1]")]
    Probability(f64),
}

/// Median with first and third quartiles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Quartiles {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

fn sorted_finite(values: &[f64], what: &'static str) -> Result<Vec<f64>, StatsError> {
    if values.is_empty() {
        return Err(StatsError::Empty(what));
    }
    if let Some(&bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite(bad));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted)
}

/// Quantile of an already sorted, non-empty slice.
pub(crate) fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = h - lo as f64;
    if frac == 0.0 || lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

pub fn quantile(values: &[f64], p: f64) -> Result<f64, StatsError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(StatsError::Probability(p));
    }
    let sorted = sorted_finite(values, "quantile")?;
    Ok(quantile_sorted(&sorted, p))
}

/// Median and inter-quartile bounds of a non-empty sample.
pub fn median_iqr(values: &[f64]) -> Result<Quartiles, StatsError> {
    let sorted = sorted_finite(values, "median")?;
    Ok(Quartiles {
        median: quantile_sorted(&sorted, 0.5),
        q1: quantile_sorted(&sorted, 0.25),
        q3: quantile_sorted(&sorted, 0.75),
    })
}

/// `median_iqr` that maps an empty sample to `None`.
pub fn quartiles_opt(values: &[f64]) -> Option<Quartiles> {
    median_iqr(values).ok()
}

pub fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}
