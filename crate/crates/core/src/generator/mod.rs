//! Autoregressive question generation over a pluggable backend.
//!
//! A backend sees the formatted input (template, separator, highlighted
//! context) and returns a next-token log-distribution over a per-input
//! candidate list that always contains the end token. Decoding, scoring and
//! training code in this crate is written against [`SequenceModel`] and
//! [`Trainable`] only.

mod pointer;
mod tabular;

pub use pointer::{PointerGradient, PointerLm, PointerLmConfig, PreparedInput};
pub use tabular::{TabularGradient, TabularLm};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Question, Template};
pub use crate::dataset::ContextAnswer;
use crate::error::{Error, Result};
use crate::text::{END, HIGHLIGHT, SEPARATOR};

/// `[template] <sep> [context with <HL> answer <HL>]`. Without a template the
/// leading segment is empty.
pub fn format_input(x: &ContextAnswer, z: Option<&Template>) -> Result<Vec<String>> {
    let ctx = x.context_tokens();
    let (start, end) = x.answer_span();
    if start >= end || end > ctx.len() {
        return Err(Error::AnswerNotInContext {
            answer: format!("token span [{start}, {end})"),
            offset: start,
        });
    }
    let mut out = Vec::with_capacity(ctx.len() + 4 + z.map_or(0, |t| t.tokens().len()));
    if let Some(t) = z {
        out.extend(t.tokens().iter().cloned());
    }
    out.push(SEPARATOR.to_string());
    out.extend(ctx[..start].iter().cloned());
    out.push(HIGHLIGHT.to_string());
    out.extend(ctx[start..end].iter().cloned());
    out.push(HIGHLIGHT.to_string());
    out.extend(ctx[end..].iter().cloned());
    Ok(out)
}

/// Template, context and answer span recovered from a formatted input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedInput {
    pub template: Vec<String>,
    pub context: Vec<String>,
    pub answer: (usize, usize),
}

pub fn parse_formatted(input: &[String]) -> Result<ParsedInput> {
    let bad = |m: &str| Error::Validation(format!("malformed generator input: {m}"));
    let sep = input
        .iter()
        .position(|t| t == SEPARATOR)
        .ok_or_else(|| bad("missing separator"))?;
    let template = input[..sep].to_vec();
    let mut context = Vec::with_capacity(input.len() - sep);
    let mut marks = Vec::new();
    for tok in &input[sep + 1..] {
        if tok == HIGHLIGHT {
            marks.push(context.len());
        } else {
            context.push(tok.clone());
        }
    }
    match marks[..] {
        [s, e] if s < e => Ok(ParsedInput {
            template,
            context,
            answer: (s, e),
        }),
        _ => Err(bad(
            "expected exactly two highlight markers around a non-empty answer",
        )),
    }
}

/// Next-token distribution of a conditional sequence model.
pub trait SequenceModel: Sync {
    type Prepared: Send + Sync;

    fn prepare(&self, input: &[String]) -> Result<Self::Prepared>;

    /// Output candidates for this input; the end token is among them.
    fn candidates<'a>(&'a self, prepared: &'a Self::Prepared) -> &'a [String];

    fn end_index(&self, prepared: &Self::Prepared) -> usize;

    /// Log-probabilities over `candidates` given the already generated
    /// candidate indices. The end token has probability zero on an empty
    /// prefix.
    fn log_probs(&self, prepared: &Self::Prepared, prefix: &[usize]) -> Vec<f64>;

    fn max_input_len(&self) -> usize;

    /// Maximum number of generated tokens, end token excluded.
    fn max_output_len(&self) -> usize;
}

/// Accumulates `scale * Σ_v w_v ∇ log p(v | prefix)` into a gradient buffer.
pub trait Trainable: SequenceModel {
    type Gradient: GradientBuffer;

    fn zero_grad(&self) -> Self::Gradient;

    fn accumulate(
        &self,
        prepared: &Self::Prepared,
        prefix: &[usize],
        targets: &[(usize, f64)],
        scale: f64,
        grad: &mut Self::Gradient,
    );

    /// `θ ← θ - lr * grad`
    fn descend(&mut self, grad: &Self::Gradient, lr: f64);
}

pub trait GradientBuffer: Clone + Send {
    fn add_scaled(&mut self, other: &Self, scale: f64);
    fn scale(&mut self, factor: f64);
    fn norm(&self) -> f64;

    /// Rescales so the L2 norm is at most `max_norm`; returns the pre-clip norm.
    fn clip(&mut self, max_norm: f64) -> f64 {
        let n = self.norm();
        if n > max_norm && n > 0.0 {
            self.scale(max_norm / n);
        }
        n
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationOutput {
    pub question: Question,
    /// Generated tokens, including the end token when one was produced.
    pub tokens: Vec<String>,
    pub token_log_probs: Vec<f64>,
    pub total_log_prob: f64,
}

impl GenerationOutput {
    pub fn ended(&self) -> bool {
        self.tokens.last().map(String::as_str) == Some(END)
    }
}

fn check_len<M: SequenceModel + ?Sized>(model: &M, input: &[String]) -> Result<()> {
    if input.len() > model.max_input_len() {
        return Err(Error::InputTooLong {
            len: input.len(),
            limit: model.max_input_len(),
        });
    }
    Ok(())
}

/// Prepares `(x, z)` for a model, enforcing its input limit.
pub fn prepare<M: SequenceModel + ?Sized>(
    model: &M,
    x: &ContextAnswer,
    z: Option<&Template>,
) -> Result<M::Prepared> {
    let input = format_input(x, z)?;
    check_len(model, &input)?;
    model.prepare(&input)
}

fn decode<M, F>(
    model: &M,
    prepared: &M::Prepared,
    max_len: usize,
    mut pick: F,
) -> Result<GenerationOutput>
where
    M: SequenceModel + ?Sized,
    F: FnMut(&[f64]) -> usize,
{
    let end = model.end_index(prepared);
    let cands = model.candidates(prepared);
    let mut prefix = Vec::new();
    let mut lps = Vec::new();
    let limit = max_len.min(model.max_output_len()).max(1);
    let mut ended = false;
    while prefix.len() < limit {
        let dist = model.log_probs(prepared, &prefix);
        let tok = pick(&dist);
        lps.push(dist[tok]);
        if tok == end {
            ended = true;
            break;
        }
        prefix.push(tok);
    }
    let mut tokens: Vec<String> = prefix.iter().map(|&i| cands[i].clone()).collect();
    let question = Question::from_tokens(tokens.clone())?;
    if ended {
        tokens.push(END.to_string());
    }
    Ok(GenerationOutput {
        question,
        total_log_prob: lps.iter().sum(),
        token_log_probs: lps,
        tokens,
    })
}

fn argmax(dist: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in dist.iter().enumerate() {
        if v > dist[best] {
            best = i;
        }
    }
    best
}

pub fn generate_greedy_prepared<M: SequenceModel + ?Sized>(
    model: &M,
    prepared: &M::Prepared,
    max_len: usize,
) -> Result<GenerationOutput> {
    decode(model, prepared, max_len, argmax)
}

/// Per-step argmax decoding; stops at the end token or after `max_len` tokens.
pub fn generate_greedy<M: SequenceModel + ?Sized>(
    model: &M,
    x: &ContextAnswer,
    z: Option<&Template>,
    max_len: usize,
) -> Result<GenerationOutput> {
    let prepared = prepare(model, x, z)?;
    generate_greedy_prepared(model, &prepared, max_len)
}

/// Indices kept by top-k then top-p truncation, most probable first.
pub fn nucleus_support(log_probs: &[f64], p: f64, top_k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..log_probs.len())
        .filter(|&i| log_probs[i] > f64::NEG_INFINITY)
        .collect();
    order.sort_by(|&a, &b| log_probs[b].total_cmp(&log_probs[a]).then(a.cmp(&b)));
    if top_k > 0 {
        order.truncate(top_k);
    }
    let mut mass = 0.0;
    let mut keep = 0;
    for &i in &order {
        mass += log_probs[i].exp();
        keep += 1;
        if mass >= p {
            break;
        }
    }
    order.truncate(keep.max(1));
    order
}

fn sample_from<R: Rng + ?Sized>(log_probs: &[f64], p: f64, top_k: usize, rng: &mut R) -> usize {
    let support = nucleus_support(log_probs, p, top_k);
    let weights: Vec<f64> = support.iter().map(|&i| log_probs[i].exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (&i, w) in support.iter().zip(&weights) {
        if u < *w {
            return i;
        }
        u -= w;
    }
    *support.last().unwrap()
}

pub fn sample_nucleus_prepared<M: SequenceModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    prepared: &M::Prepared,
    p: f64,
    top_k: usize,
    max_len: usize,
    rng: &mut R,
) -> Result<GenerationOutput> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::Config(format!("nucleus p {p} outside (0, 1]")));
    }
    decode(model, prepared, max_len, |d| sample_from(d, p, top_k, rng))
}

/// Nucleus sampling: each step keeps the `top_k` most probable tokens
/// (0 = no limit), then the smallest prefix of them holding mass `>= p`,
/// renormalizes and samples. Reported log-probabilities are the model's
/// untruncated ones.
pub fn sample_nucleus<M: SequenceModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    x: &ContextAnswer,
    z: Option<&Template>,
    p: f64,
    top_k: usize,
    max_len: usize,
    rng: &mut R,
) -> Result<GenerationOutput> {
    let prepared = prepare(model, x, z)?;
    sample_nucleus_prepared(model, &prepared, p, top_k, max_len, rng)
}

/// Maps question tokens to candidate indices; `None` if one is not producible.
pub fn candidate_ids<M: SequenceModel + ?Sized>(
    model: &M,
    prepared: &M::Prepared,
    tokens: &[String],
) -> Option<Vec<usize>> {
    let cands = model.candidates(prepared);
    tokens
        .iter()
        .map(|t| cands.iter().position(|c| c == t))
        .collect()
}

/// `Σ_t log p(y_t | x, z, y_<t)` including the end token. `-inf` when the
/// question uses a token the model cannot produce for this input.
pub fn sequence_log_prob_prepared<M: SequenceModel + ?Sized>(
    model: &M,
    prepared: &M::Prepared,
    tokens: &[String],
) -> f64 {
    let Some(mut ids) = candidate_ids(model, prepared, tokens) else {
        return f64::NEG_INFINITY;
    };
    if ids.last() != Some(&model.end_index(prepared)) {
        ids.push(model.end_index(prepared));
    }
    trajectory_log_prob(model, prepared, &ids)
}

/// Log-probability of an explicit candidate-index trajectory.
pub fn trajectory_log_prob<M: SequenceModel + ?Sized>(
    model: &M,
    prepared: &M::Prepared,
    ids: &[usize],
) -> f64 {
    (0..ids.len())
        .map(|t| model.log_probs(prepared, &ids[..t])[ids[t]])
        .sum()
}

pub fn sequence_log_prob<M: SequenceModel + ?Sized>(
    model: &M,
    x: &ContextAnswer,
    z: Option<&Template>,
    y: &Question,
) -> Result<f64> {
    let prepared = prepare(model, x, z)?;
    Ok(sequence_log_prob_prepared(model, &prepared, y.tokens()))
}

/// Greedy decode with an empty template segment.
pub fn vanilla_generate<M: SequenceModel + ?Sized>(
    model: &M,
    x: &ContextAnswer,
) -> Result<Question> {
    Ok(generate_greedy(model, x, None, model.max_output_len())?.question)
}

/// One line of the generation dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub id: String,
    pub rank: usize,
    pub template: String,
    pub question: String,
    pub log_prob: f64,
}
