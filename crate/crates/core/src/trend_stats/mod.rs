//! Frequency-performance trend analysis.
//!
//! Concepts are placed on a log10-frequency axis, performance is averaged in
//! equal-width bins, sparsely populated bins are pruned with a one-sided IQR
//! fence, and a Pearson correlation with a two-tailed t-test is fitted to the
//! remaining bin means. Also here: long-tail summaries and CMC@k retrieval
//! scores.

mod cmc;
pub mod special;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matched_freq::{FrequencyField, FrequencyRecord};

pub use cmc::{
    cmc_at_k, cmc_curve, delta_cmc, load_embeddings, load_labels, save_embeddings, CmcError,
    CmcInputs, Embeddings,
};
pub use special::{regularized_incomplete_beta, student_t_cdf, student_t_two_tailed};

pub const DEFAULT_BINS: usize = 20;
pub const SIGNIFICANCE_LEVEL: f64 = 0.05;
/// Multiplier of the IQR below Q1 at which bins are pruned.
pub const IQR_FENCE: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
}

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("zero variance in {0:?}")]
    ZeroVariance(Axis),
    #[error("non-finite value at position {0}")]
    NonFinite(usize),
    #[error("all frequencies are zero")]
    AllZeroFrequency,
    #[error("num_bins must be positive")]
    NoBins,
    #[error("k = {k} exceeds the {available} available concepts")]
    KTooLarge { k: usize, available: usize },
    #[error("field {field} is missing for concept {concept:?}")]
    MissingField {
        concept: String,
        field: FrequencyField,
    },
    #[error("no records")]
    Empty,
    #[error("concept sets differ between tables")]
    ConceptSetMismatch,
}

/// One concept's pretraining frequency and downstream score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendPoint {
    pub concept: String,
    pub frequency: u64,
    pub performance: f64,
}

/// Log-frequency histogram of per-concept performance.
///
/// Empty bins have count 0 and `None` means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinnedTrend {
    pub bin_edges: Vec<f64>,
    pub bin_mean_performance: Vec<Option<f64>>,
    /// Mean log10 frequency of the concepts in each bin; the x-coordinate
    /// used when fitting bin means.
    pub bin_mean_log_frequency: Vec<Option<f64>>,
    pub bin_concept_counts: Vec<u64>,
    pub pruned_bins: Vec<usize>,
    /// Points left out because their frequency is zero.
    pub dropped_zero_frequency: u64,
}

impl BinnedTrend {
    pub fn num_bins(&self) -> usize {
        self.bin_concept_counts.len()
    }

    /// Occupied, unpruned bins as (mean log frequency, mean performance).
    pub fn active_points(&self) -> Vec<(f64, f64)> {
        (0..self.num_bins())
            .filter(|i| !self.pruned_bins.contains(i))
            .filter_map(|i| {
                Some((
                    self.bin_mean_log_frequency[i]?,
                    self.bin_mean_performance[i]?,
                ))
            })
            .collect()
    }
}

/// Bins points on log10 frequency. Edges are equally spaced between the
/// smallest and largest positive frequency; the last bin includes its upper
/// edge. A degenerate range puts every point in bin 0.
pub fn bin_log_trend(points: &[TrendPoint], num_bins: usize) -> Result<BinnedTrend, StatsError> {
    if num_bins == 0 {
        return Err(StatsError::NoBins);
    }
    if let Some(i) = points.iter().position(|p| !p.performance.is_finite()) {
        return Err(StatsError::NonFinite(i));
    }
    let positive: Vec<(f64, f64)> = points
        .iter()
        .filter(|p| p.frequency > 0)
        .map(|p| ((p.frequency as f64).log10(), p.performance))
        .collect();
    if positive.is_empty() {
        return Err(StatsError::AllZeroFrequency);
    }
    let lo = positive.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let hi = positive
        .iter()
        .map(|p| p.0)
        .fold(f64::NEG_INFINITY, f64::max);
    let (lo_edge, hi_edge) = if hi > lo { (lo, hi) } else { (lo, lo + 1.0) };
    let width = (hi_edge - lo_edge) / num_bins as f64;
    let mut bin_edges: Vec<f64> = (0..=num_bins).map(|i| lo_edge + i as f64 * width).collect();
    bin_edges[num_bins] = hi_edge;

    let mut sums = vec![(0.0f64, 0.0f64); num_bins];
    let mut counts = vec![0u64; num_bins];
    for &(x, y) in &positive {
        let mut idx = (((x - lo_edge) / width).floor().max(0.0) as usize).min(num_bins - 1);
        while idx > 0 && x < bin_edges[idx] {
            idx -= 1;
        }
        while idx + 1 < num_bins && x >= bin_edges[idx + 1] {
            idx += 1;
        }
        sums[idx].0 += x;
        sums[idx].1 += y;
        counts[idx] += 1;
    }
    let mean = |s: f64, n: u64| (n > 0).then(|| s / n as f64);
    Ok(BinnedTrend {
        bin_edges,
        bin_mean_performance: sums
            .iter()
            .zip(&counts)
            .map(|(s, &n)| mean(s.1, n))
            .collect(),
        bin_mean_log_frequency: sums
            .iter()
            .zip(&counts)
            .map(|(s, &n)| mean(s.0, n))
            .collect(),
        bin_concept_counts: counts,
        pruned_bins: Vec::new(),
        dropped_zero_frequency: (points.len() - positive.len()) as u64,
    })
}

/// Quantile of sorted data with linear interpolation between order
/// statistics (position `q·(n−1)`).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Prunes occupied bins whose concept count is below `Q1 − 1.5·IQR` of the
/// occupied-bin counts. No-op with fewer than four occupied bins.
pub fn prune_bins_iqr(trend: &BinnedTrend) -> BinnedTrend {
    let mut out = trend.clone();
    let occupied: Vec<usize> = (0..trend.num_bins())
        .filter(|&i| trend.bin_concept_counts[i] > 0)
        .collect();
    if occupied.len() < 4 {
        return out;
    }
    let mut counts: Vec<f64> = occupied
        .iter()
        .map(|&i| trend.bin_concept_counts[i] as f64)
        .collect();
    counts.sort_by(f64::total_cmp);
    let q1 = quantile_sorted(&counts, 0.25);
    let q3 = quantile_sorted(&counts, 0.75);
    let fence = q1 - IQR_FENCE * (q3 - q1);
    out.pruned_bins = occupied
        .into_iter()
        .filter(|&i| (trend.bin_concept_counts[i] as f64) < fence)
        .collect();
    out
}

/// Pearson correlation with a two-tailed t-test and the least-squares line
/// of `ys` on `xs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub rho: f64,
    pub p_value: f64,
    pub n: usize,
    /// Change in `ys` per unit of `xs` (per decade when `xs` is log10 frequency).
    pub slope: f64,
    pub intercept: f64,
    pub significant: bool,
}

struct Moments {
    n: usize,
    mean_x: f64,
    mean_y: f64,
    sxx: f64,
    syy: f64,
    sxy: f64,
}

fn moments(xs: &[f64], ys: &[f64], min_n: usize) -> Result<Moments, StatsError> {
    if xs.len() != ys.len() {
        return Err(StatsError::LengthMismatch(xs.len(), ys.len()));
    }
    let n = xs.len();
    if n < min_n {
        return Err(StatsError::TooFewPoints {
            needed: min_n,
            got: n,
        });
    }
    if let Some(i) = xs
        .iter()
        .zip(ys)
        .position(|(x, y)| !x.is_finite() || !y.is_finite())
    {
        return Err(StatsError::NonFinite(i));
    }
    let mean_x = xs.iter().sum::<f64>() / n as f64;
    let mean_y = ys.iter().sum::<f64>() / n as f64;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let dx = x - mean_x;
        let dy = y - mean_y;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx == 0.0 || is_constant(xs) {
        return Err(StatsError::ZeroVariance(Axis::X));
    }
    if syy == 0.0 || is_constant(ys) {
        return Err(StatsError::ZeroVariance(Axis::Y));
    }
    Ok(Moments {
        n,
        mean_x,
        mean_y,
        sxx,
        syy,
        sxy,
    })
}

/// True when the values agree up to accumulated rounding (bin means of equal
/// values need not be bit-identical).
fn is_constant(vs: &[f64]) -> bool {
    let (lo, hi) = vs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let scale = lo.abs().max(hi.abs());
    hi - lo <= 64.0 * f64::EPSILON * scale
}

/// Product-moment correlation coefficient.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64, StatsError> {
    let m = moments(xs, ys, 2)?;
    Ok((m.sxy / (m.sxx * m.syy).sqrt()).clamp(-1.0, 1.0))
}

pub fn pearson_with_ttest(xs: &[f64], ys: &[f64]) -> Result<CorrelationReport, StatsError> {
    let m = moments(xs, ys, 3)?;
    let mut rho = (m.sxy / (m.sxx * m.syy).sqrt()).clamp(-1.0, 1.0);
    // perfectly collinear data can land a few ulps short of ±1
    if 1.0 - rho.abs() <= 4.0 * f64::EPSILON {
        rho = rho.signum();
    }
    let dof = (m.n - 2) as f64;
    let p_value = if rho.abs() == 1.0 {
        0.0
    } else {
        let t = rho * (dof / (1.0 - rho * rho)).sqrt();
        student_t_two_tailed(t, dof)
    };
    let slope = m.sxy / m.sxx;
    Ok(CorrelationReport {
        rho,
        p_value,
        n: m.n,
        slope,
        intercept: m.mean_y - slope * m.mean_x,
        significant: p_value < SIGNIFICANCE_LEVEL,
    })
}

/// Result of fitting performance against log10 frequency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogLinearFit {
    pub trend: BinnedTrend,
    /// Fit over the means of occupied, unpruned bins.
    pub binned: CorrelationReport,
    /// Fit over every concept with positive frequency.
    pub per_concept: Option<CorrelationReport>,
}

/// Report for data whose performance is constant: no trend, nothing significant.
fn flat_report(n: usize, ys: &[f64]) -> CorrelationReport {
    CorrelationReport {
        rho: 0.0,
        p_value: 1.0,
        n,
        slope: 0.0,
        intercept: ys.first().copied().unwrap_or(0.0),
        significant: false,
    }
}

fn fit_or_flat(xs: &[f64], ys: &[f64]) -> Result<CorrelationReport, StatsError> {
    match pearson_with_ttest(xs, ys) {
        Err(StatsError::ZeroVariance(Axis::Y)) => Ok(flat_report(xs.len(), ys)),
        other => other,
    }
}

/// Bins, prunes, and fits. Constant performance yields a flat, non-significant
/// report instead of a zero-variance error.
pub fn fit_log_linear(points: &[TrendPoint], num_bins: usize) -> Result<LogLinearFit, StatsError> {
    let positive: Vec<&TrendPoint> = points.iter().filter(|p| p.frequency > 0).collect();
    if positive.len() < 3 {
        return Err(StatsError::TooFewPoints {
            needed: 3,
            got: positive.len(),
        });
    }
    let trend = prune_bins_iqr(&bin_log_trend(points, num_bins)?);
    let (bx, by): (Vec<f64>, Vec<f64>) = trend.active_points().into_iter().unzip();
    let binned = fit_or_flat(&bx, &by)?;
    let cx: Vec<f64> = positive
        .iter()
        .map(|p| (p.frequency as f64).log10())
        .collect();
    let cy: Vec<f64> = positive.iter().map(|p| p.performance).collect();
    let per_concept = fit_or_flat(&cx, &cy).ok();
    Ok(LogLinearFit {
        trend,
        binned,
        per_concept,
    })
}

/// Long-tail summary of one frequency column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailSummary {
    pub total_concepts: usize,
    pub zero_count_concepts: usize,
    pub mean_frequency: f64,
    pub fraction_below_mean: f64,
    /// Rarest concepts, ascending frequency, ties by name.
    pub bottom_k: Vec<(String, u64)>,
}

pub fn tail_summary(
    records: &[FrequencyRecord],
    field: FrequencyField,
    k: usize,
) -> Result<TailSummary, StatsError> {
    if records.is_empty() {
        return Err(StatsError::Empty);
    }
    if k > records.len() {
        return Err(StatsError::KTooLarge {
            k,
            available: records.len(),
        });
    }
    let mut freqs: Vec<(String, u64)> = records
        .iter()
        .map(|r| {
            r.get(field)
                .map(|c| (r.concept.clone(), c))
                .ok_or_else(|| StatsError::MissingField {
                    concept: r.concept.clone(),
                    field,
                })
        })
        .collect::<Result<_, _>>()?;
    let n = freqs.len();
    let mean = freqs.iter().map(|(_, c)| *c as f64).sum::<f64>() / n as f64;
    let zero = freqs.iter().filter(|(_, c)| *c == 0).count();
    let below = freqs.iter().filter(|(_, c)| (*c as f64) < mean).count();
    freqs.sort_by(|a, b| a.1.cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    freqs.truncate(k);
    Ok(TailSummary {
        total_concepts: n,
        zero_count_concepts: zero,
        mean_frequency: mean,
        fraction_below_mean: below as f64 / n as f64,
        bottom_k: freqs,
    })
}

/// Per-concept minimum of every count across corpora, in the first table's
/// concept order. All tables must cover the same concepts.
pub fn min_across_corpora(
    tables: &[Vec<FrequencyRecord>],
) -> Result<Vec<FrequencyRecord>, StatsError> {
    let (first, rest) = tables.split_first().ok_or(StatsError::Empty)?;
    let lookups: Vec<HashMap<&str, &FrequencyRecord>> = rest
        .iter()
        .map(|t| t.iter().map(|r| (r.concept.as_str(), r)).collect())
        .collect();
    for (table, lookup) in rest.iter().zip(&lookups) {
        if table.len() != first.len() || lookup.len() != table.len() {
            return Err(StatsError::ConceptSetMismatch);
        }
    }
    let min_opt = |a: Option<u64>, b: Option<u64>| a.zip(b).map(|(a, b)| a.min(b));
    first
        .iter()
        .map(|r| {
            let mut acc = r.clone();
            for lookup in &lookups {
                let other = lookup
                    .get(r.concept.as_str())
                    .ok_or(StatsError::ConceptSetMismatch)?;
                acc.text_count = acc.text_count.min(other.text_count);
                acc.image_count = min_opt(acc.image_count, other.image_count);
                acc.matched_count = min_opt(acc.matched_count, other.matched_count);
            }
            Ok(acc)
        })
        .collect()
}
