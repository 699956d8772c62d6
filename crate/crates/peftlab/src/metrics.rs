//! Text-overlap metrics for generated code, on token sequences.
//!
//! * [`smooth_bleu4`] — geometric 1–4-gram precision with add-one smoothing
//!   on orders ≥ 2 and the usual brevity penalty, scaled to [0, 100]. The
//!   default evaluation averages per-sentence scores; [`corpus_bleu4`]
//!   pools n-gram counts across the corpus instead.
//! * [`rouge_l`] — longest-common-subsequence F-score (β = 1, precision and
//!   recall weighted equally), scaled to [0, 100].
//! * [`token_prf`] — multiset precision/recall/F1 on [0, 1], usually after
//!   [`split_subtokens`] has broken identifiers at underscore and camelCase
//!   boundaries.
//!
//! All three share the degenerate conventions: identical sequences score
//! the maximum, an empty candidate against a non-empty reference scores 0,
//! and token-disjoint sequences score 0.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAX_NGRAM: usize = 4;

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            let key: Vec<&str> = window.iter().map(|t| t.as_ref()).collect();
            *counts.entry(key).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram matches and candidate n-gram total for one order.
fn matched_and_total<S: AsRef<str>>(candidate: &[S], reference: &[S], n: usize) -> (usize, usize) {
    let cand = ngram_counts(candidate, n);
    let refc = ngram_counts(reference, n);
    let matched = cand
        .iter()
        .map(|(gram, &c)| c.min(refc.get(gram).copied().unwrap_or(0)))
        .sum();
    let total = candidate.len().saturating_sub(n - 1);
    (matched, total)
}

fn bleu_from_counts(matched: &[usize], total: &[usize], cand_len: usize, ref_len: usize) -> f64 {
    if cand_len == 0 {
        return 0.0;
    }
    // Unigram precision stays unsmoothed: no shared token means score 0.
    if matched[0] == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 0..MAX_NGRAM {
        let p = if n == 0 {
            matched[0] as f64 / total[0] as f64
        } else {
            (matched[n] as f64 + 1.0) / (total[n] as f64 + 1.0)
        };
        log_sum += p.ln();
    }
    let geo = (log_sum / MAX_NGRAM as f64).exp();
    let bp = if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    100.0 * bp * geo
}

/// Sentence-level smoothed BLEU-4 in [0, 100].
pub fn smooth_bleu4<S: AsRef<str>>(candidate: &[S], reference: &[S]) -> f64 {
    let mut matched = [0usize; MAX_NGRAM];
    let mut total = [0usize; MAX_NGRAM];
    for n in 1..=MAX_NGRAM {
        let (m, t) = matched_and_total(candidate, reference, n);
        matched[n - 1] = m;
        total[n - 1] = t;
    }
    bleu_from_counts(&matched, &total, candidate.len(), reference.len())
}

/// Corpus-level BLEU-4: n-gram matches and totals pooled over all pairs
/// before the precisions are formed (same smoothing and brevity penalty).
pub fn corpus_bleu4<S: AsRef<str>>(pairs: &[(Vec<S>, Vec<S>)]) -> f64 {
    let mut matched = [0usize; MAX_NGRAM];
    let mut total = [0usize; MAX_NGRAM];
    let mut cand_len = 0;
    let mut ref_len = 0;
    for (candidate, reference) in pairs {
        for n in 1..=MAX_NGRAM {
            let (m, t) = matched_and_total(candidate, reference, n);
            matched[n - 1] += m;
            total[n - 1] += t;
        }
        cand_len += candidate.len();
        ref_len += reference.len();
    }
    bleu_from_counts(&matched, &total, cand_len, ref_len)
}

/// ROUGE-L F-score (β = 1) in [0, 100].
pub fn rouge_l<S: AsRef<str>>(candidate: &[S], reference: &[S]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    // Classic O(m·n) LCS table with a rolling row.
    let (m, n) = (candidate.len(), reference.len());
    let mut prev = vec![0usize; n + 1];
    let mut curr = vec![0usize; n + 1];
    for i in 1..=m {
        for j in 1..=n {
            curr[j] = if candidate[i - 1].as_ref() == reference[j - 1].as_ref() {
                prev[j - 1] + 1
            } else {
                prev[j].max(curr[j - 1])
            };
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    let lcs = prev[n] as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / m as f64;
    let r = lcs / n as f64;
    100.0 * 2.0 * p * r / (p + r)
}

/// Multiset precision/recall/F1 in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Token-level precision/recall/F1 over multisets: a token matching k times
/// in both sequences contributes min(k) true positives.
pub fn token_prf<S: AsRef<str>>(predicted: &[S], truth: &[S]) -> Prf {
    if predicted.is_empty() || truth.is_empty() {
        return Prf {
            precision: 0.0,
            recall: 0.0,
            f1: 0.0,
        };
    }
    let mut truth_counts: HashMap<&str, usize> = HashMap::new();
    for t in truth {
        *truth_counts.entry(t.as_ref()).or_insert(0) += 1;
    }
    let mut tp = 0usize;
    for p in predicted {
        if let Some(c) = truth_counts.get_mut(p.as_ref()) {
            if *c > 0 {
                *c -= 1;
                tp += 1;
            }
        }
    }
    let precision = tp as f64 / predicted.len() as f64;
    let recall = tp as f64 / truth.len() as f64;
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Prf {
        precision,
        recall,
        f1,
    }
}

/// Break identifiers into lowercase subtokens at whitespace, punctuation,
/// underscore, camelCase, and letter/digit boundaries:
/// `getUserName` → `[get, user, name]`, `HTTP_server2` → `[http, server, 2]`.
pub fn split_subtokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut piece = String::new();
    let chars: Vec<char> = text.chars().collect();
    let flush = |piece: &mut String, out: &mut Vec<String>| {
        if !piece.is_empty() {
            out.push(std::mem::take(piece).to_lowercase());
        }
    };
    for (i, &c) in chars.iter().enumerate() {
        if !c.is_alphanumeric() {
            flush(&mut piece, &mut out);
            continue;
        }
        if !piece.is_empty() {
            let prev = chars[i - 1];
            let lower_to_upper = prev.is_lowercase() && c.is_uppercase();
            // An uppercase run ends before its last member when a lowercase
            // letter follows: "HTTPServer" splits as HTTP | Server.
            let acronym_end = prev.is_uppercase()
                && c.is_uppercase()
                && chars.get(i + 1).is_some_and(|n| n.is_lowercase());
            let digit_boundary = prev.is_ascii_digit() != c.is_ascii_digit();
            if lower_to_upper || acronym_end || digit_boundary {
                flush(&mut piece, &mut out);
            }
        }
        piece.push(c);
    }
    flush(&mut piece, &mut out);
    out
}

// ── reports ────────────────────────────────────────────────────────────────

/// Score of one sample: the headline value plus any named components
/// (precision/recall for PRF; empty otherwise).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleScore {
    pub id: String,
    pub language: String,
    pub score: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub components: BTreeMap<String, f64>,
}

/// Evaluation result for one metric over one corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    /// Settings that shaped the numbers (smoothing, averaging mode, β, …).
    pub params: BTreeMap<String, String>,
    /// Arithmetic mean of the per-sample scores.
    pub aggregate: f64,
    pub per_language: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub aggregate_components: BTreeMap<String, f64>,
    #[serde(skip)]
    pub per_sample: Vec<SampleScore>,
}

impl MetricReport {
    /// Assemble a report from per-sample scores; the aggregate is their
    /// arithmetic mean, per-language values likewise within each language.
    pub fn from_samples(
        metric: &str,
        params: BTreeMap<String, String>,
        per_sample: Vec<SampleScore>,
    ) -> MetricReport {
        let mean = |scores: &[f64]| -> f64 {
            if scores.is_empty() {
                0.0
            } else {
                scores.iter().sum::<f64>() / scores.len() as f64
            }
        };
        let aggregate = mean(&per_sample.iter().map(|s| s.score).collect::<Vec<_>>());
        let mut by_lang: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for s in &per_sample {
            by_lang.entry(s.language.clone()).or_default().push(s.score);
        }
        let per_language = by_lang.into_iter().map(|(l, v)| (l, mean(&v))).collect();

        let mut component_keys: Vec<String> = per_sample
            .first()
            .map(|s| s.components.keys().cloned().collect())
            .unwrap_or_default();
        component_keys.sort();
        let aggregate_components = component_keys
            .into_iter()
            .map(|k| {
                let vals: Vec<f64> = per_sample.iter().map(|s| s.components[&k]).collect();
                (k, mean(&vals))
            })
            .collect();

        MetricReport {
            metric: metric.to_string(),
            params,
            aggregate,
            per_language,
            aggregate_components,
            per_sample,
        }
    }

    /// One summary record followed by one record per sample, line-delimited.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(self)?;
        out.push('\n');
        for s in &self.per_sample {
            out.push_str(&serde_json::to_string(s)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Parse what [`MetricReport::to_jsonl`] wrote.
    pub fn from_jsonl(text: &str) -> Result<MetricReport> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let head = lines
            .next()
            .ok_or_else(|| Error::Analysis("empty metric report".to_string()))?;
        let mut report: MetricReport = serde_json::from_str(head)?;
        for line in lines {
            report.per_sample.push(serde_json::from_str(line)?);
        }
        Ok(report)
    }
}
