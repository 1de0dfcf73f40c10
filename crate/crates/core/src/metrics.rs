//! Damage measurement: magnitude-bucketed error, rank correlation, and
//! logit divergence.

use crate::tensor::{stats, Tensor, TensorError};
use serde::Serialize;
use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum MetricsError {
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    /// Rank correlation is undefined when one argument is constant.
    ConstantInput { which: &'static str },
    TooFewElements { got: usize, need: usize },
    TooFewBuckets { got: usize },
    Tensor(TensorError),
}

impl fmt::Display for MetricsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricsError::ShapeMismatch { left, right } => {
                write!(f, "shape mismatch: {left:?} vs {right:?}")
            }
            MetricsError::ConstantInput { which } => {
                write!(f, "rank correlation undefined: {which} input is constant")
            }
            MetricsError::TooFewElements { got, need } => {
                write!(f, "need at least {need} elements, got {got}")
            }
            MetricsError::TooFewBuckets { got } => {
                write!(f, "need at least 2 buckets, got {got}")
            }
            MetricsError::Tensor(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for MetricsError {}

impl From<TensorError> for MetricsError {
    fn from(e: TensorError) -> Self {
        MetricsError::Tensor(e)
    }
}

pub type MetricsResult<T> = Result<T, MetricsError>;

// ─── Bucketed error ──────────────────────────────────────────────────────────

/// Error statistics within one |x|-quantile bucket.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Bucket {
    pub count: usize,
    pub mean_abs_delta: f64,
    pub mean_rel_error: f64,
    pub max_abs_delta: f64,
}

/// Quantile-bucketed error report. Buckets hold equal element counts (the
/// first `n mod buckets` hold one extra), so sparse tails never yield empty
/// buckets.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BucketReport {
    /// |x| boundaries between buckets; non-decreasing, length = buckets − 1.
    pub edges: Vec<f32>,
    pub buckets: Vec<Bucket>,
}

impl BucketReport {
    pub fn total_count(&self) -> usize {
        self.buckets.iter().map(|b| b.count).sum()
    }

    /// Count-weighted mean |Δ| over all buckets.
    pub fn global_mean_abs_delta(&self) -> f64 {
        let total = self.total_count() as f64;
        self.buckets
            .iter()
            .map(|b| b.mean_abs_delta * b.count as f64)
            .sum::<f64>()
            / total
    }
}

/// Buckets `delta` by the magnitude quantiles of `x`.
///
/// Ties are broken deterministically by (|x|, original index) so the report
/// is stable across runs.
pub fn bucketed_error(x: &Tensor, delta: &Tensor, n_buckets: usize) -> MetricsResult<BucketReport> {
    if x.shape() != delta.shape() {
        return Err(MetricsError::ShapeMismatch {
            left: x.shape().to_vec(),
            right: delta.shape().to_vec(),
        });
    }
    if n_buckets < 2 {
        return Err(MetricsError::TooFewBuckets { got: n_buckets });
    }
    let n = x.len();
    let eps_r = 1e-8 * stats(x)?.absmax as f64;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        x.data()[a]
            .abs()
            .total_cmp(&x.data()[b].abs())
            .then(a.cmp(&b))
    });
    let base = n / n_buckets;
    let extra = n % n_buckets;
    let mut edges = Vec::with_capacity(n_buckets - 1);
    let mut buckets = Vec::with_capacity(n_buckets);
    let mut cursor = 0usize;
    for b in 0..n_buckets {
        let size = base + usize::from(b < extra);
        let idxs = &order[cursor..cursor + size];
        cursor += size;
        let mut sum_abs = 0.0f64;
        let mut sum_rel = 0.0f64;
        let mut max_abs = 0.0f64;
        for &i in idxs {
            let d = delta.data()[i].abs() as f64;
            sum_abs += d;
            sum_rel += d / (x.data()[i].abs() as f64 + eps_r);
            max_abs = max_abs.max(d);
        }
        let count = idxs.len();
        buckets.push(Bucket {
            count,
            mean_abs_delta: if count > 0 { sum_abs / count as f64 } else { 0.0 },
            mean_rel_error: if count > 0 { sum_rel / count as f64 } else { 0.0 },
            max_abs_delta: max_abs,
        });
        if b + 1 < n_buckets && cursor > 0 && cursor <= n {
            edges.push(x.data()[order[cursor - 1]].abs());
        }
    }
    Ok(BucketReport { edges, buckets })
}

// ─── Rank correlation ────────────────────────────────────────────────────────

/// Average ranks with ties sharing the mean of their positions.
fn average_ranks(values: &[f32]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0f64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average-rank tie handling.
pub fn spearman(a: &Tensor, b: &Tensor) -> MetricsResult<f64> {
    if a.shape() != b.shape() {
        return Err(MetricsError::ShapeMismatch {
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    if a.len() < 2 {
        return Err(MetricsError::TooFewElements { got: a.len(), need: 2 });
    }
    let ra = average_ranks(a.data());
    let rb = average_ranks(b.data());
    let n = ra.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut cov = 0.0;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - mean) * (y - mean);
        var_a += (x - mean) * (x - mean);
        var_b += (y - mean) * (y - mean);
    }
    if var_a == 0.0 {
        return Err(MetricsError::ConstantInput { which: "first" });
    }
    if var_b == 0.0 {
        return Err(MetricsError::ConstantInput { which: "second" });
    }
    Ok(cov / (var_a.sqrt() * var_b.sqrt()))
}

// ─── Logit divergence ────────────────────────────────────────────────────────

/// Mean row-wise KL(p‖q) between two logit tensors, softmax applied per row
/// (last axis). Zero iff the induced distributions agree.
pub fn kl_logits(p_logits: &Tensor, q_logits: &Tensor) -> MetricsResult<f64> {
    if p_logits.shape() != q_logits.shape() {
        return Err(MetricsError::ShapeMismatch {
            left: p_logits.shape().to_vec(),
            right: q_logits.shape().to_vec(),
        });
    }
    let row = *p_logits.shape().last().expect("tensors are non-empty");
    let rows = p_logits.len() / row;
    let mut total = 0.0f64;
    for r in 0..rows {
        let pa = &p_logits.data()[r * row..(r + 1) * row];
        let qa = &q_logits.data()[r * row..(r + 1) * row];
        total += kl_row(pa, qa);
    }
    Ok((total / rows as f64).max(0.0))
}

fn log_softmax(row: &[f32]) -> Vec<f64> {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse = row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|&v| v as f64 - lse).collect()
}

fn kl_row(p: &[f32], q: &[f32]) -> f64 {
    let lp = log_softmax(p);
    let lq = log_softmax(q);
    lp.iter()
        .zip(&lq)
        .map(|(&a, &b)| a.exp() * (a - b))
        .sum()
}

// ─── Degradation rows ────────────────────────────────────────────────────────

/// One metric comparison row for experiment reports.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DegradationRow {
    pub setting: String,
    pub metric: String,
    pub baseline: f64,
    pub value: f64,
    pub delta: f64,
    pub seed: u64,
}

impl DegradationRow {
    pub fn new(setting: &str, metric: &str, baseline: f64, value: f64, seed: u64) -> Self {
        DegradationRow {
            setting: setting.to_string(),
            metric: metric.to_string(),
            baseline,
            value,
            delta: value - baseline,
            seed,
        }
    }
}
