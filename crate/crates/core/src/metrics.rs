//! Consistency and diversity metrics over top-N generations.
//!
//! Sentence BLEU-4 follows the mteval/SacreBLEU conventions: clipped n-gram
//! precision against the references, closest-reference brevity penalty,
//! effective n-gram order for hypotheses shorter than four tokens, and
//! exponential smoothing of zero-match orders (the k-th zero order gets
//! `1 / (2^k * total)`). A hypothesis with no unigram match scores 0.
//!
//! Top-1 and Oracle BLEU average sentence scores over samples, so Oracle is
//! never below Top-1; Pairwise BLEU averages over ordered pairs within each
//! top-N list.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::Question;
use crate::dataset::ContextAnswer;
use crate::error::{Error, Result};
use crate::reward::QaBackend;

const MAX_ORDER: usize = 4;

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts
                .entry(w.iter().map(|t| t.as_ref()).collect())
                .or_insert(0) += 1;
        }
    }
    counts
}

/// Sentence BLEU-4 in `[0, 100]`.
pub fn bleu4<S: AsRef<str>, R: AsRef<[S]>>(hypothesis: &[S], references: &[R]) -> f64 {
    if hypothesis.is_empty() || references.is_empty() {
        return 0.0;
    }
    let hyp_len = hypothesis.len();
    let ref_len = references
        .iter()
        .map(|r| r.as_ref().len())
        .min_by_key(|&len| (len.abs_diff(hyp_len), len))
        .unwrap_or(0);

    let mut log_sum = 0.0;
    let mut order = 0;
    let mut smooth = 1.0f64;
    for n in 1..=MAX_ORDER {
        let hyp_counts = ngram_counts(hypothesis, n);
        let total: usize = hyp_counts.values().sum();
        if total == 0 {
            break;
        }
        let mut max_ref: HashMap<Vec<&str>, usize> = HashMap::new();
        for r in references {
            for (gram, c) in ngram_counts(r.as_ref(), n) {
                let e = max_ref.entry(gram).or_insert(0);
                *e = (*e).max(c);
            }
        }
        let correct: usize = hyp_counts
            .iter()
            .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
            .sum();
        if correct == 0 && n == 1 {
            return 0.0;
        }
        let precision = if correct == 0 {
            smooth *= 2.0;
            1.0 / (smooth * total as f64)
        } else {
            correct as f64 / total as f64
        };
        log_sum += precision.ln();
        order = n;
    }
    let bp = if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    100.0 * bp * (log_sum / order as f64).exp()
}

/// One evaluation sample: the ranked top-N generations plus the gold data.
#[derive(Debug, Clone)]
pub struct TopNSample {
    pub id: String,
    pub hypotheses: Vec<Question>,
    pub references: Vec<Question>,
    pub input: ContextAnswer,
}

impl TopNSample {
    fn reference_tokens(&self) -> Vec<&[String]> {
        self.references.iter().map(Question::tokens).collect()
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// BLEU of each sample's rank-1 hypothesis, averaged over samples.
pub fn top1_bleu(outputs: &[TopNSample]) -> f64 {
    mean(outputs.iter().filter_map(|s| {
        s.hypotheses
            .first()
            .map(|h| bleu4(h.tokens(), &s.reference_tokens()))
    }))
}

/// Per sample, the best hypothesis' BLEU against the references; averaged.
pub fn oracle_bleu(outputs: &[TopNSample]) -> f64 {
    mean(
        outputs
            .iter()
            .filter(|s| !s.hypotheses.is_empty())
            .map(|s| {
                let refs = s.reference_tokens();
                s.hypotheses
                    .iter()
                    .map(|h| bleu4(h.tokens(), &refs))
                    .fold(f64::NEG_INFINITY, f64::max)
            }),
    )
}

/// Mean sentence BLEU over ordered pairs `(i, j), i != j` of one top-N list.
pub fn pairwise_bleu_of(hypotheses: &[Question]) -> Result<f64> {
    let n = hypotheses.len();
    if n < 2 {
        return Err(Error::Validation(format!(
            "pairwise BLEU needs at least 2 hypotheses, got {n}"
        )));
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                total += bleu4(hypotheses[i].tokens(), &[hypotheses[j].tokens()]);
            }
        }
    }
    Ok(total / (n * (n - 1)) as f64)
}

pub fn pairwise_bleu(outputs: &[TopNSample]) -> Result<f64> {
    let per_sample = outputs
        .iter()
        .map(|s| pairwise_bleu_of(&s.hypotheses))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean(per_sample.into_iter()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Overall {
    Value(f64),
    /// Pairwise BLEU was zero, so the quotient is unbounded.
    PerfectDiversity,
}

/// `top1 * oracle / pairwise`.
pub fn overall_bleu(top1: f64, oracle: f64, pairwise: f64) -> Overall {
    if pairwise == 0.0 {
        Overall::PerfectDiversity
    } else {
        Overall::Value(top1 * oracle / pairwise)
    }
}

fn normalize_answer(s: &str) -> Vec<String> {
    s.to_lowercase()
        .split_whitespace()
        .map(|t| {
            t.trim_matches(|c: char| c.is_ascii_punctuation())
                .to_string()
        })
        .filter(|t| !t.is_empty())
        .collect()
}

pub fn exact_match(prediction: &str, gold: &str) -> f64 {
    if normalize_answer(prediction) == normalize_answer(gold) {
        100.0
    } else {
        0.0
    }
}

/// Token-overlap F1 in `[0, 100]`.
pub fn token_f1(prediction: &str, gold: &str) -> f64 {
    let pred = normalize_answer(prediction);
    let gold = normalize_answer(gold);
    if pred.is_empty() || gold.is_empty() {
        return if pred == gold { 100.0 } else { 0.0 };
    }
    let mut gold_counts: HashMap<&str, usize> = HashMap::new();
    for g in &gold {
        *gold_counts.entry(g).or_insert(0) += 1;
    }
    let mut common = 0;
    for p in &pred {
        if let Some(c) = gold_counts.get_mut(p.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / pred.len() as f64;
    let recall = common as f64 / gold.len() as f64;
    100.0 * 2.0 * precision * recall / (precision + recall)
}

/// Answers every top-N question with `qa` and averages EM/F1 against the
/// gold answer, first within a sample and then over samples.
pub fn qa_em_f1(outputs: &[TopNSample], qa: &(impl QaBackend + ?Sized)) -> (f64, f64) {
    let per_sample: Vec<(f64, f64)> = outputs
        .iter()
        .filter(|s| !s.hypotheses.is_empty())
        .map(|s| {
            let gold = s.input.answer_text();
            let scores: Vec<(f64, f64)> = s
                .hypotheses
                .iter()
                .map(|q| {
                    let pred = qa.predict(s.input.context_tokens(), q);
                    (exact_match(&pred, &gold), token_f1(&pred, &gold))
                })
                .collect();
            (
                mean(scores.iter().map(|x| x.0)),
                mean(scores.iter().map(|x| x.1)),
            )
        })
        .collect();
    (
        mean(per_sample.iter().map(|x| x.0)),
        mean(per_sample.iter().map(|x| x.1)),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub samples: usize,
    pub top1: f64,
    pub oracle: f64,
    pub pairwise: f64,
    /// `None` when pairwise BLEU is zero; see `perfect_diversity`.
    pub overall: Option<f64>,
    pub perfect_diversity: bool,
    pub em: f64,
    pub f1: f64,
}

impl MetricReport {
    pub fn compute(outputs: &[TopNSample], qa: &(impl QaBackend + ?Sized)) -> Result<Self> {
        let top1 = top1_bleu(outputs);
        let oracle = oracle_bleu(outputs);
        let pairwise = pairwise_bleu(outputs)?;
        let (em, f1) = qa_em_f1(outputs, qa);
        let (overall, perfect_diversity) = match overall_bleu(top1, oracle, pairwise) {
            Overall::Value(v) => (Some(v), false),
            Overall::PerfectDiversity => (None, true),
        };
        Ok(Self {
            samples: outputs.len(),
            top1,
            oracle,
            pairwise,
            overall,
            perfect_diversity,
            em,
            f1,
        })
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let overall = match self.overall {
            Some(v) => format!("{v:.2}"),
            None => "inf".to_string(),
        };
        writeln!(f, "{:<10} {:>8}", "metric", "value")?;
        writeln!(f, "{}", "-".repeat(19))?;
        writeln!(f, "{:<10} {:>8}", "samples", self.samples)?;
        writeln!(f, "{:<10} {:>8.2}", "top-1", self.top1)?;
        writeln!(f, "{:<10} {:>8.2}", "oracle", self.oracle)?;
        writeln!(f, "{:<10} {:>8.2}", "pairwise", self.pairwise)?;
        writeln!(f, "{:<10} {:>8}", "overall", overall)?;
        writeln!(f, "{:<10} {:>8.2}", "EM", self.em)?;
        write!(f, "{:<10} {:>8.2}", "F1", self.f1)
    }
}
