//! Scoring functions: exact/in/prefix match, binary F1, ROUGE-N/L, pass@k
//! and argmax multiple-choice accuracy. The judge-model adapter lives in
//! [`crate::judge`].

use std::collections::{BTreeMap, HashMap};
use std::hash::Hash;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum MetricError {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("invalid pass@k counts n={n} c={c} k={k}")]
    InvalidCounts { n: u64, c: u64, k: u64 },
    #[error("choice {0} has zero tokens")]
    ZeroTokenCount(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NormalizationSpec {
    pub lowercase: bool,
    pub strip_punct: bool,
    pub collapse_ws: bool,
    pub unicode_nfc: bool,
}

impl Default for NormalizationSpec {
    fn default() -> Self {
        Self::all()
    }
}

impl NormalizationSpec {
    pub const fn all() -> Self {
        Self {
            lowercase: true,
            strip_punct: true,
            collapse_ws: true,
            unicode_nfc: true,
        }
    }

    pub const fn none() -> Self {
        Self {
            lowercase: false,
            strip_punct: false,
            collapse_ws: false,
            unicode_nfc: false,
        }
    }
}

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '\u{2010}'..='\u{2027}' | '\u{3001}' | '\u{3002}' | '\u{FF01}'..='\u{FF0F}' | '\u{00A1}' | '\u{00BF}' | '\u{00AB}' | '\u{00BB}'
        )
}

/// NFC, lowercase, punctuation removal, whitespace collapse; each step is
/// gated by its flag and they always run in that order.
pub fn normalize(text: &str, spec: &NormalizationSpec) -> String {
    let mut out: String = if spec.unicode_nfc {
        text.nfc().collect()
    } else {
        text.to_string()
    };
    if spec.lowercase {
        out = out.to_lowercase();
        if spec.unicode_nfc {
            out = out.nfc().collect();
        }
    }
    if spec.strip_punct {
        out.retain(|c| !is_punct(c));
    }
    if spec.collapse_ws {
        out = out.split_whitespace().collect::<Vec<_>>().join(" ");
    }
    // removals can bring a base char next to a combining mark
    if spec.unicode_nfc && (spec.strip_punct || spec.collapse_ws) {
        out = out.nfc().collect();
    }
    out
}

pub fn exact_match(pred: &str, gold: &str, spec: &NormalizationSpec) -> u8 {
    u8::from(normalize(pred, spec) == normalize(gold, spec))
}

pub fn in_match(pred: &str, gold: &str, spec: &NormalizationSpec) -> u8 {
    u8::from(normalize(pred, spec).contains(&normalize(gold, spec)))
}

pub fn prefix_match(pred: &str, gold: &str, spec: &NormalizationSpec) -> u8 {
    u8::from(normalize(pred, spec).starts_with(&normalize(gold, spec)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

impl Prf {
    pub fn from_ratios(precision: f64, recall: f64) -> Self {
        Self {
            precision,
            recall,
            f1: ratio(2.0 * precision * recall, precision + recall),
        }
    }

    pub fn from_counts(tp: u64, fp: u64, fn_: u64) -> Self {
        Self::from_ratios(
            ratio(tp as f64, (tp + fp) as f64),
            ratio(tp as f64, (tp + fn_) as f64),
        )
    }
}

/// Pooled confusion counts for binary classification.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl BinaryCounts {
    pub fn add(&mut self, pred: bool, gold: bool) {
        match (pred, gold) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn prf(&self) -> Prf {
        Prf::from_counts(self.tp, self.fp, self.fn_)
    }
}

pub fn f1_binary(preds: &[u8], golds: &[u8]) -> Result<Prf, MetricError> {
    if preds.len() != golds.len() {
        return Err(MetricError::LengthMismatch {
            left: preds.len(),
            right: golds.len(),
        });
    }
    if preds.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let mut counts = BinaryCounts::default();
    for (p, g) in preds.iter().zip(golds) {
        counts.add(*p != 0, *g != 0);
    }
    Ok(counts.prf())
}

pub fn tokenize(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], u64> {
    let mut counts = HashMap::new();
    if n == 0 || tokens.len() < n {
        return counts;
    }
    for gram in tokens.windows(n) {
        *counts.entry(gram).or_insert(0) += 1;
    }
    counts
}

/// Clipped n-gram overlap between token sequences.
pub fn rouge_n_tokens<T: Eq + Hash>(pred: &[T], gold: &[T], n: usize) -> Prf {
    let pred_counts = ngram_counts(pred, n);
    let gold_counts = ngram_counts(gold, n);
    let overlap: u64 = gold_counts
        .iter()
        .map(|(g, c)| (*c).min(pred_counts.get(g).copied().unwrap_or(0)))
        .sum();
    let total_pred: u64 = pred_counts.values().sum();
    let total_gold: u64 = gold_counts.values().sum();
    Prf::from_ratios(
        ratio(overlap as f64, total_pred as f64),
        ratio(overlap as f64, total_gold as f64),
    )
}

/// ROUGE-N over whitespace tokens. `n` must be at least 1; `n == 0` scores zero.
pub fn rouge_n(pred: &str, gold: &str, n: usize) -> Prf {
    rouge_n_tokens(&tokenize(pred), &tokenize(gold), n)
}

/// Longest common subsequence length, two-row dynamic program.
pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l_tokens<T: Eq>(pred: &[T], gold: &[T]) -> Prf {
    let l = lcs_len(pred, gold) as f64;
    Prf::from_ratios(ratio(l, pred.len() as f64), ratio(l, gold.len() as f64))
}

pub fn rouge_l(pred: &str, gold: &str) -> Prf {
    rouge_l_tokens(&tokenize(pred), &tokenize(gold))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassAtKInput {
    pub n: u64,
    pub c: u64,
    pub k: u64,
}

/// Unbiased pass@k estimate `1 - C(n-c, k) / C(n, k)`.
///
/// Exact integer binomials give a single rounding when they fit in `u128`;
/// otherwise a running product is used so large `n` cannot overflow.
pub fn pass_at_k(input: PassAtKInput) -> Result<f64, MetricError> {
    let PassAtKInput { n, c, k } = input;
    if n == 0 || k == 0 || c > n || k > n {
        return Err(MetricError::InvalidCounts { n, c, k });
    }
    if n - c < k {
        return Ok(1.0);
    }
    if let (Some(all), Some(miss)) = (binomial(n, k), binomial(n - c, k)) {
        return Ok((all - miss) as f64 / all as f64);
    }
    let kf = k as f64;
    let miss: f64 = (n - c + 1..=n).map(|j| 1.0 - kf / j as f64).product();
    Ok((1.0 - miss).clamp(0.0, 1.0))
}

fn binomial(n: u64, k: u64) -> Option<u128> {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        // acc * (n - i) is divisible by (i + 1) at every step
        acc = acc.checked_mul(u128::from(n - i))? / u128::from(i + 1);
    }
    Some(acc)
}

/// 1 iff the highest-scoring choice is the gold one. Ties go to the lowest index.
pub fn mc_accuracy(
    logprob_sums: &[f64],
    token_counts: &[u32],
    target_scores: &IndexMap<String, u8>,
    length_normalize: bool,
) -> Result<u8, MetricError> {
    let n = target_scores.len();
    if logprob_sums.len() != n {
        return Err(MetricError::LengthMismatch {
            left: logprob_sums.len(),
            right: n,
        });
    }
    if length_normalize && token_counts.len() != n {
        return Err(MetricError::LengthMismatch {
            left: token_counts.len(),
            right: n,
        });
    }
    if n == 0 {
        return Err(MetricError::EmptyInput);
    }
    let mut best = 0usize;
    let mut best_score = f64::NEG_INFINITY;
    for (idx, sum) in logprob_sums.iter().enumerate() {
        let score = if length_normalize {
            let count = token_counts[idx];
            if count == 0 {
                return Err(MetricError::ZeroTokenCount(idx));
            }
            sum / count as f64
        } else {
            *sum
        };
        if score > best_score {
            best = idx;
            best_score = score;
        }
    }
    Ok(target_scores
        .get_index(best)
        .map_or(0, |(_, s)| u8::from(*s == 1)))
}

/// Per-instance values for one metric plus the aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricScore {
    pub metric_id: String,
    pub per_instance: BTreeMap<String, f64>,
    pub aggregate: f64,
}

impl MetricScore {
    /// Aggregate is the arithmetic mean of the per-instance values.
    pub fn mean(metric_id: impl Into<String>, per_instance: BTreeMap<String, f64>) -> Self {
        let aggregate = if per_instance.is_empty() {
            0.0
        } else {
            per_instance.values().sum::<f64>() / per_instance.len() as f64
        };
        Self {
            metric_id: metric_id.into(),
            per_instance,
            aggregate,
        }
    }
}
