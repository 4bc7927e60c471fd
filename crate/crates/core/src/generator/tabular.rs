//! A bigram softmax policy that ignores its input. Small enough to enumerate
//! every trajectory, which makes it the reference instance for checking
//! policy-gradient estimators against exact expectations.

use super::{GradientBuffer, SequenceModel, Trainable};
use crate::error::Result;
use crate::text::END;

/// `p(v | previous token)` with one logit per (state, token). State 0 is the
/// start state; state `i + 1` follows token `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularLm {
    candidates: Vec<String>,
    logits: Vec<f64>,
    max_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TabularGradient(pub Vec<f64>);

impl GradientBuffer for TabularGradient {
    fn add_scaled(&mut self, other: &Self, scale: f64) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += scale * b;
        }
    }

    fn scale(&mut self, factor: f64) {
        self.0.iter_mut().for_each(|a| *a *= factor);
    }

    fn norm(&self) -> f64 {
        self.0.iter().map(|a| a * a).sum::<f64>().sqrt()
    }
}

impl TabularLm {
    /// `tokens` excludes the end token, which is appended as the last candidate.
    pub fn new(tokens: &[&str], max_len: usize) -> Self {
        let mut candidates: Vec<String> = tokens.iter().map(|t| t.to_string()).collect();
        candidates.push(END.to_string());
        let n = candidates.len();
        Self {
            candidates,
            logits: vec![0.0; n * n],
            max_len,
        }
    }

    pub fn num_params(&self) -> usize {
        self.logits.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.logits
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    fn width(&self) -> usize {
        self.candidates.len()
    }

    fn state(&self, prefix: &[usize]) -> usize {
        prefix.last().map_or(0, |&t| t + 1)
    }

    fn probs(&self, prefix: &[usize]) -> Vec<f64> {
        let w = self.width();
        let s = self.state(prefix);
        let row = &self.logits[s * w..(s + 1) * w];
        let end = w - 1;
        let allowed = |i: usize| !(prefix.is_empty() && i == end);
        let max = (0..w)
            .filter(|&i| allowed(i))
            .map(|i| row[i])
            .fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = (0..w)
            .map(|i| {
                if allowed(i) {
                    (row[i] - max).exp()
                } else {
                    0.0
                }
            })
            .collect();
        let z: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / z).collect()
    }
}

impl SequenceModel for TabularLm {
    type Prepared = ();

    fn prepare(&self, _input: &[String]) -> Result<()> {
        Ok(())
    }

    fn candidates<'a>(&'a self, _prepared: &'a ()) -> &'a [String] {
        &self.candidates
    }

    fn end_index(&self, _prepared: &()) -> usize {
        self.width() - 1
    }

    fn log_probs(&self, _prepared: &(), prefix: &[usize]) -> Vec<f64> {
        self.probs(prefix).into_iter().map(f64::ln).collect()
    }

    fn max_input_len(&self) -> usize {
        usize::MAX
    }

    fn max_output_len(&self) -> usize {
        self.max_len
    }
}

impl Trainable for TabularLm {
    type Gradient = TabularGradient;

    fn zero_grad(&self) -> TabularGradient {
        TabularGradient(vec![0.0; self.logits.len()])
    }

    fn accumulate(
        &self,
        _prepared: &(),
        prefix: &[usize],
        targets: &[(usize, f64)],
        scale: f64,
        grad: &mut TabularGradient,
    ) {
        let w = self.width();
        let s = self.state(prefix);
        let p = self.probs(prefix);
        let total: f64 = targets.iter().map(|(_, wt)| wt).sum();
        let row = &mut grad.0[s * w..(s + 1) * w];
        for &(v, wt) in targets {
            row[v] += scale * wt;
        }
        for (g, pi) in row.iter_mut().zip(&p) {
            *g -= scale * total * pi;
        }
    }

    fn descend(&mut self, grad: &TabularGradient, lr: f64) {
        for (w, g) in self.logits.iter_mut().zip(&grad.0) {
            *w -= lr * g;
        }
    }
}
