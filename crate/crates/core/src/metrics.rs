//! Edit-distance error rates, bootstrap intervals and power-law fits.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::stream_rng;
use crate::vocab::PhonemeVocab;

/// Unit-cost Levenshtein distance.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit count against a reference, kept unnormalized so rates can be pooled.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorCount {
    pub edits: usize,
    pub ref_len: usize,
}

impl ErrorCount {
    /// Edits over reference length. An empty reference yields the insertion
    /// count itself (see [`ErrorCount::empty_reference`]).
    pub fn rate(&self) -> f64 {
        self.edits as f64 / self.ref_len.max(1) as f64
    }

    pub fn empty_reference(&self) -> bool {
        self.ref_len == 0
    }
}

pub fn strip_boundaries(seq: &[usize]) -> Vec<usize> {
    seq.iter().copied().filter(|&p| !PhonemeVocab::is_boundary(p)).collect()
}

/// Phoneme errors after removing BOS/EOS/PAD from both sequences.
pub fn per(reference: &[usize], hypothesis: &[usize]) -> ErrorCount {
    let r = strip_boundaries(reference);
    let h = strip_boundaries(hypothesis);
    ErrorCount {
        edits: levenshtein(&r, &h),
        ref_len: r.len(),
    }
}

/// Characters removed before word scoring.
pub const PUNCTUATION: &[char] = &['.', ',', '?', '!', ';', ':', '\'', '"', '-'];

/// Lowercases, drops [`PUNCTUATION`] and splits on whitespace.
pub fn normalize_words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .filter(|c| !PUNCTUATION.contains(c))
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

pub fn wer(reference: &str, hypothesis: &str) -> ErrorCount {
    let r = normalize_words(reference);
    let h = normalize_words(hypothesis);
    ErrorCount {
        edits: levenshtein(&r, &h),
        ref_len: r.len(),
    }
}

/// Aggregation of per-trial error counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Total edits over total reference length.
    Pooled,
    /// Mean of per-trial rates.
    PerTrial,
}

pub fn aggregate(counts: &[ErrorCount], how: Aggregation) -> f64 {
    if counts.is_empty() {
        return 0.0;
    }
    match how {
        Aggregation::Pooled => {
            let edits: usize = counts.iter().map(|c| c.edits).sum();
            let refs: usize = counts.iter().map(|c| c.ref_len).sum();
            edits as f64 / refs.max(1) as f64
        }
        Aggregation::PerTrial => counts.iter().map(ErrorCount::rate).sum::<f64>() / counts.len() as f64,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub estimate: f64,
    pub low: f64,
    pub high: f64,
    /// Set when the interval could not be estimated (fewer than two values).
    pub degenerate: bool,
}

impl Interval {
    pub fn contains(&self, x: f64) -> bool {
        self.low <= x && x <= self.high
    }
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

fn percentile_interval(estimate: f64, mut replicates: Vec<f64>, level: f64) -> Interval {
    replicates.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    Interval {
        estimate,
        low: quantile(&replicates, alpha),
        high: quantile(&replicates, 1.0 - alpha),
        degenerate: false,
    }
}

/// Percentile bootstrap interval of the mean.
pub fn bootstrap_ci(values: &[f64], n_boot: usize, level: f64, seed: u64) -> Result<Interval> {
    if values.is_empty() {
        return Err(Error::Data("bootstrap of an empty sample".into()));
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    if values.len() == 1 {
        return Ok(Interval {
            estimate: mean,
            low: mean,
            high: mean,
            degenerate: true,
        });
    }
    let mut rng = stream_rng(seed, 7);
    let n = values.len();
    let reps = (0..n_boot)
        .map(|_| (0..n).map(|_| values[rng.gen_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    Ok(percentile_interval(mean, reps, level))
}

/// `e(N) = a * N^b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerLaw {
    pub a: f64,
    pub b: f64,
    /// `ln e - ln e_hat` per retained point, in input order.
    pub residuals: Vec<f64>,
}

impl PowerLaw {
    pub fn predict(&self, n: f64) -> f64 {
        self.a * n.powf(self.b)
    }
}

/// Least squares on `(ln N, ln e)` after dropping points whose `N` is in `exclude`.
pub fn fit_power_law(points: &[(f64, f64)], exclude: &[f64]) -> Result<PowerLaw> {
    let kept: Vec<(f64, f64)> = points
        .iter()
        .copied()
        .filter(|(n, _)| !exclude.contains(n))
        .collect();
    if let Some((n, e)) = kept.iter().find(|(n, e)| !(*n > 0.0 && *e > 0.0)) {
        return Err(Error::Data(format!("power-law point ({n}, {e}) is not positive")));
    }
    let mut distinct: Vec<f64> = kept.iter().map(|p| p.0).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::Data("power-law fit needs at least two distinct N".into()));
    }
    // Sort so the fit does not depend on input order.
    let mut logs: Vec<(f64, f64)> = kept.iter().map(|(n, e)| (n.ln(), e.ln())).collect();
    logs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let m = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / m;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / m;
    let sxy: f64 = logs.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = logs.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    let b = sxy / sxx;
    let intercept = my - b * mx;
    let a = intercept.exp();
    let residuals = kept
        .iter()
        .map(|(n, e)| e.ln() - (intercept + b * n.ln()))
        .collect();
    Ok(PowerLaw { a, b, residuals })
}

/// Per-N results of a scaling sweep: one error value per seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub n: f64,
    pub errors: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Extrapolation {
    pub n: f64,
    pub interval: Interval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub fit: PowerLaw,
    pub a: Interval,
    pub b: Interval,
    pub extrapolations: Vec<Extrapolation>,
    pub excluded: Vec<f64>,
}

/// Fits the seed-mean curve and bootstraps by resampling seeds within each
/// N (or the points themselves when every N has a single seed). Intervals
/// are widened if needed so they always contain the point estimate.
pub fn fit_scaling(
    points: &[ScalingPoint],
    exclude: &[f64],
    targets: &[f64],
    n_boot: usize,
    level: f64,
    seed: u64,
) -> Result<ScalingFit> {
    let kept: Vec<&ScalingPoint> = points.iter().filter(|p| !exclude.contains(&p.n)).collect();
    if kept.iter().any(|p| p.errors.is_empty()) {
        return Err(Error::Data("scaling point without any runs".into()));
    }
    let mean = |e: &[f64]| e.iter().sum::<f64>() / e.len() as f64;
    let curve: Vec<(f64, f64)> = kept.iter().map(|p| (p.n, mean(&p.errors))).collect();
    let fit = fit_power_law(&curve, &[])?;
    let by_seed = kept.iter().any(|p| p.errors.len() > 1);
    let mut rng = stream_rng(seed, 11);
    let mut a_reps = Vec::with_capacity(n_boot);
    let mut b_reps = Vec::with_capacity(n_boot);
    let mut target_reps = vec![Vec::with_capacity(n_boot); targets.len()];
    for _ in 0..n_boot {
        let sample: Vec<(f64, f64)> = if by_seed {
            kept.iter()
                .map(|p| {
                    let k = p.errors.len();
                    let m = (0..k).map(|_| p.errors[rng.gen_range(0..k)]).sum::<f64>() / k as f64;
                    (p.n, m)
                })
                .collect()
        } else {
            (0..curve.len()).map(|_| curve[rng.gen_range(0..curve.len())]).collect()
        };
        // Resamples that collapse onto a single N cannot be fitted.
        let Ok(f) = fit_power_law(&sample, &[]) else { continue };
        a_reps.push(f.a);
        b_reps.push(f.b);
        for (reps, &n) in target_reps.iter_mut().zip(targets) {
            reps.push(f.predict(n));
        }
    }
    let interval = |estimate: f64, reps: Vec<f64>| {
        if reps.is_empty() {
            return Interval {
                estimate,
                low: estimate,
                high: estimate,
                degenerate: true,
            };
        }
        let mut i = percentile_interval(estimate, reps, level);
        i.low = i.low.min(estimate);
        i.high = i.high.max(estimate);
        i
    };
    let extrapolations = targets
        .iter()
        .zip(target_reps)
        .map(|(&n, reps)| Extrapolation {
            n,
            interval: interval(fit.predict(n), reps),
        })
        .collect();
    Ok(ScalingFit {
        a: interval(fit.a, a_reps),
        b: interval(fit.b, b_reps),
        fit,
        extrapolations,
        excluded: exclude.to_vec(),
    })
}
