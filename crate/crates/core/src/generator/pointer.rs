//! Log-linear pointer generator.
//!
//! Every output candidate is reachable through one or more routes: emitting a
//! vocabulary word, or copying a particular context position. A route's score
//! is a sum of hashed sparse feature weights; a candidate's logit is the
//! log-sum-exp of its routes. Copy routes are described by their offset from
//! the highlighted answer, so what the model learns transfers across
//! passages. Features condition on an answer signature (shape of the answer
//! and its neighbours), the previous two output symbols, and the alignment
//! between the prefix and the template segment of the input.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{parse_formatted, GradientBuffer, SequenceModel, Trainable};
use crate::corpus::Template;
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::hashing::{combine, hash_str, FnvHashMap};
use crate::text::{is_special, Lexicon, END, MASK};

pub const BACKEND_NAME: &str = "pointer-lm";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointerLmConfig {
    pub vocab: Vec<String>,
    pub max_input_len: usize,
    pub max_output_len: usize,
    /// Copy offsets beyond this distance from the answer share one bucket.
    pub offset_clip: i64,
}

impl PointerLmConfig {
    pub fn new(vocab: Vec<String>) -> Self {
        Self {
            vocab,
            max_input_len: 128,
            max_output_len: 24,
            offset_clip: 8,
        }
    }

    /// Generation vocabulary for a training set: question tokens that could
    /// not have been copied from their own passage (absent from it, or a
    /// stopword), plus every literal token of the template corpus.
    pub fn vocab_from(
        samples: &[Sample],
        templates: &[Template],
        lexicon: &Lexicon,
    ) -> Vec<String> {
        let mut vocab = BTreeSet::new();
        for s in samples {
            let ctx: HashSet<&str> = s
                .input
                .context_tokens()
                .iter()
                .map(String::as_str)
                .collect();
            for t in s.question.tokens() {
                if (!ctx.contains(t.as_str()) || lexicon.is_stopword(t)) && !is_special(t) {
                    vocab.insert(t.clone());
                }
            }
        }
        for z in templates {
            for t in z.tokens() {
                if !is_special(t) {
                    vocab.insert(t.clone());
                }
            }
        }
        vocab.into_iter().collect()
    }

    pub fn vocab_hash(&self) -> String {
        let mut h = Sha256::new();
        for w in &self.vocab {
            h.update(w.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Route {
    sym: u64,
    copy: bool,
    in_answer: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Mask,
    Literal(Option<usize>),
}

/// Per-input tables shared by every decoding step.
#[derive(Debug, Clone)]
pub struct PreparedInput {
    candidates: Vec<String>,
    routes: Vec<Vec<Route>>,
    /// Symbol recorded in the decoder state after emitting each candidate.
    state_sym: Vec<u64>,
    copyable: Vec<bool>,
    in_template: Vec<bool>,
    template: Vec<Slot>,
    signature: u64,
    end: usize,
}

impl PreparedInput {
    pub fn has_template(&self) -> bool {
        !self.template.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointerGradient(pub FnvHashMap<u64, f64>);

impl GradientBuffer for PointerGradient {
    fn add_scaled(&mut self, other: &Self, scale: f64) {
        for (k, v) in &other.0 {
            *self.0.entry(*k).or_insert(0.0) += scale * v;
        }
    }

    fn scale(&mut self, factor: f64) {
        self.0.values_mut().for_each(|v| *v *= factor);
    }

    fn norm(&self) -> f64 {
        let mut entries: Vec<(&u64, &f64)> = self.0.iter().collect();
        entries.sort_unstable_by_key(|(k, _)| **k);
        entries.iter().map(|(_, v)| *v * *v).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointerLm {
    config: PointerLmConfig,
    lexicon: Lexicon,
    weights: FnvHashMap<u64, f64>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    backend: String,
    vocab_hash: String,
    config: PointerLmConfig,
    weights_file: String,
    num_weights: usize,
}

fn shape(tok: &str) -> String {
    let first = tok.chars().next();
    if tok.chars().all(|c| c.is_ascii_digit()) {
        "#NUM".into()
    } else if first.is_some_and(char::is_uppercase) {
        "#CAP".into()
    } else {
        tok.to_lowercase()
    }
}

// Feature family tags.
const F_SIG_P1: u64 = 1;
const F_SIG_P2: u64 = 2;
const F_P1: u64 = 3;
const F_BIAS: u64 = 4;
const F_TMPL: u64 = 5;
const F_TMPL_SYM: u64 = 6;
const F_TMPL_SIG: u64 = 7;
const F_BAG: u64 = 8;
const F_USED: u64 = 9;
const F_IN_ANSWER: u64 = 10;

const BOS: &str = "<bos>";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Align {
    NoTemplate,
    Literal,
    MaskCopyFirst,
    MaskCopyMore,
    SkipMask,
    EndOk,
    EndEarly,
    Off,
}

struct StepState {
    prev1: u64,
    prev2: u64,
    pointer: usize,
    mask_used: usize,
    used: Vec<bool>,
}

impl PointerLm {
    pub fn new(config: PointerLmConfig) -> Self {
        Self {
            config,
            lexicon: Lexicon::default(),
            weights: FnvHashMap::default(),
        }
    }

    pub fn with_lexicon(mut self, lexicon: Lexicon) -> Self {
        self.lexicon = lexicon;
        self
    }

    pub fn config(&self) -> &PointerLmConfig {
        &self.config
    }

    pub fn num_weights(&self) -> usize {
        self.weights.len()
    }

    /// Euclidean distance between two weight sets.
    pub fn distance(&self, other: &Self) -> f64 {
        let keys: BTreeSet<u64> = self
            .weights
            .keys()
            .chain(other.weights.keys())
            .copied()
            .collect();
        keys.iter()
            .map(|k| {
                let d = self.weights.get(k).unwrap_or(&0.0) - other.weights.get(k).unwrap_or(&0.0);
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }

    fn offset_bucket(&self, pos: usize, answer: (usize, usize)) -> i64 {
        let (s, e) = answer;
        let off = if pos < s {
            pos as i64 - s as i64
        } else if pos >= e {
            pos as i64 - e as i64 + 1
        } else {
            0
        };
        let clip = self.config.offset_clip;
        if off > clip {
            clip + 1
        } else if off < -clip {
            -clip - 1
        } else {
            off
        }
    }

    fn signature(context: &[String], answer: (usize, usize)) -> u64 {
        let (s, e) = answer;
        let at = |i: i64| -> String {
            if i < 0 || i as usize >= context.len() {
                BOS.to_string()
            } else {
                shape(&context[i as usize])
            }
        };
        let parts = [
            shape(&context[s]),
            at(s as i64 - 3),
            at(s as i64 - 2),
            at(s as i64 - 1),
            at(e as i64),
            at(e as i64 + 1),
        ];
        hash_str(&parts.join("\u{1f}"))
    }

    fn state(&self, p: &PreparedInput, prefix: &[usize]) -> StepState {
        let mut st = StepState {
            prev1: hash_str(BOS),
            prev2: hash_str(BOS),
            pointer: 0,
            mask_used: 0,
            used: vec![false; p.candidates.len()],
        };
        for &c in prefix {
            st.prev2 = st.prev1;
            st.prev1 = p.state_sym[c];
            st.used[c] = true;
            advance(&p.template, &mut st, c, p.copyable[c]);
        }
        st
    }

    fn align(&self, p: &PreparedInput, st: &StepState, cand: usize, route: &Route) -> Align {
        if p.template.is_empty() {
            return Align::NoTemplate;
        }
        let t = &p.template;
        if cand == p.end {
            return if st.pointer >= t.len() {
                Align::EndOk
            } else {
                Align::EndEarly
            };
        }
        match t.get(st.pointer) {
            Some(Slot::Literal(Some(w))) if *w == cand => Align::Literal,
            Some(Slot::Mask) => {
                if t.get(st.pointer + 1) == Some(&Slot::Literal(Some(cand))) {
                    Align::SkipMask
                } else if route.copy {
                    if st.mask_used == 0 {
                        Align::MaskCopyFirst
                    } else {
                        Align::MaskCopyMore
                    }
                } else {
                    Align::Off
                }
            }
            _ => Align::Off,
        }
    }

    /// Feature keys of one route in one decoder state.
    fn features(
        &self,
        p: &PreparedInput,
        st: &StepState,
        cand: usize,
        route: &Route,
        out: &mut Vec<u64>,
    ) {
        out.clear();
        let sym = route.sym;
        let sig = p.signature;
        out.push(combine(F_SIG_P1, combine(combine(sig, st.prev1), sym)));
        out.push(combine(
            F_SIG_P2,
            combine(combine(combine(sig, st.prev2), st.prev1), sym),
        ));
        out.push(combine(F_P1, combine(st.prev1, sym)));
        out.push(combine(F_BIAS, sym));
        let align = self.align(p, st, cand, route);
        if align != Align::NoTemplate {
            let a = align as u64 + 100;
            out.push(combine(F_TMPL, a));
            out.push(combine(F_TMPL_SYM, combine(a, sym)));
            out.push(combine(F_TMPL_SIG, combine(a, sig)));
            if p.in_template[cand] && !st.used[cand] {
                out.push(combine(F_BAG, route.copy as u64));
            }
        }
        if cand != p.end && st.used[cand] {
            out.push(combine(F_USED, route.copy as u64));
        }
        if route.in_answer {
            out.push(F_IN_ANSWER);
        }
    }

    fn score(&self, feats: &[u64]) -> f64 {
        feats
            .iter()
            .map(|k| self.weights.get(k).copied().unwrap_or(0.0))
            .sum()
    }

    /// Route log-scores for every candidate, with `-inf` for masked ones.
    fn route_scores(&self, p: &PreparedInput, st: &StepState, step: usize) -> Vec<Vec<f64>> {
        let mut feats = Vec::with_capacity(12);
        (0..p.candidates.len())
            .map(|c| {
                if c == p.end && step == 0 {
                    return vec![f64::NEG_INFINITY];
                }
                p.routes[c]
                    .iter()
                    .map(|r| {
                        self.features(p, st, c, r, &mut feats);
                        self.score(&feats)
                    })
                    .collect()
            })
            .collect()
    }

    pub fn save(&self, dir: &Path, name: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let weights_file = format!("{name}.bin");
        let mut entries: Vec<(u64, f64)> = self.weights.iter().map(|(k, v)| (*k, *v)).collect();
        entries.sort_unstable_by_key(|(k, _)| *k);
        let mut blob = Vec::with_capacity(entries.len() * 16);
        for (k, v) in &entries {
            blob.extend_from_slice(&k.to_le_bytes());
            blob.extend_from_slice(&v.to_le_bytes());
        }
        let blob_path = dir.join(&weights_file);
        fs::write(&blob_path, blob).map_err(|e| Error::io(&blob_path, e))?;
        let manifest = Manifest {
            backend: BACKEND_NAME.into(),
            vocab_hash: self.config.vocab_hash(),
            config: self.config.clone(),
            weights_file,
            num_weights: entries.len(),
        };
        let path = dir.join(format!("{name}.json"));
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::json("checkpoint manifest", e))?;
        f.write_all(text.as_bytes())
            .map_err(|e| Error::io(&path, e))?;
        f.write_all(b"\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path, name: &str) -> Result<Self> {
        let path = dir.join(format!("{name}.json"));
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        if m.backend != BACKEND_NAME {
            return Err(Error::Validation(format!(
                "checkpoint backend {:?} is not {BACKEND_NAME}",
                m.backend
            )));
        }
        if m.vocab_hash != m.config.vocab_hash() {
            return Err(Error::Validation(format!(
                "{}: vocabulary hash mismatch",
                path.display()
            )));
        }
        let blob_path = dir.join(&m.weights_file);
        let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
        if blob.len() != m.num_weights * 16 {
            return Err(Error::Validation(format!(
                "{}: expected {} weights, found {} bytes",
                blob_path.display(),
                m.num_weights,
                blob.len()
            )));
        }
        let weights = blob
            .chunks_exact(16)
            .map(|c| {
                let k = u64::from_le_bytes(c[..8].try_into().unwrap());
                let v = f64::from_le_bytes(c[8..].try_into().unwrap());
                (k, v)
            })
            .collect();
        Ok(Self {
            config: m.config,
            lexicon: Lexicon::default(),
            weights,
        })
    }
}

fn advance(template: &[Slot], st: &mut StepState, cand: usize, copyable: bool) {
    let j = st.pointer;
    match template.get(j) {
        Some(Slot::Literal(Some(w))) if *w == cand => {
            st.pointer = j + 1;
            st.mask_used = 0;
            return;
        }
        Some(Slot::Mask) => {
            if template.get(j + 1) == Some(&Slot::Literal(Some(cand))) {
                st.pointer = j + 2;
                st.mask_used = 0;
                return;
            }
            if copyable {
                st.mask_used += 1;
                return;
            }
        }
        _ => {}
    }
    // resynchronise on a later literal occurrence
    if let Some(k) = template
        .iter()
        .skip(j + 1)
        .position(|s| *s == Slot::Literal(Some(cand)))
    {
        st.pointer = j + 1 + k + 1;
        st.mask_used = 0;
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl SequenceModel for PointerLm {
    type Prepared = PreparedInput;

    fn prepare(&self, input: &[String]) -> Result<PreparedInput> {
        let parsed = parse_formatted(input)?;
        let ctx = &parsed.context;
        let answer = parsed.answer;

        let mut candidates: Vec<String> = self.config.vocab.clone();
        let mut index: FnvHashMap<&str, usize> = FnvHashMap::default();
        for (i, w) in self.config.vocab.iter().enumerate() {
            index.insert(w.as_str(), i);
        }
        let vocab_len = candidates.len();
        let mut routes: Vec<Vec<Route>> = self
            .config
            .vocab
            .iter()
            .map(|w| {
                vec![Route {
                    sym: hash_str(&format!("w:{w}")),
                    copy: false,
                    in_answer: false,
                }]
            })
            .collect();
        let mut best_offset: Vec<Option<i64>> = vec![None; vocab_len];
        for (pos, tok) in ctx.iter().enumerate() {
            if self.lexicon.is_stopword(tok) || is_special(tok) {
                continue;
            }
            let c = match index.get(tok.as_str()) {
                Some(&c) => c,
                None => {
                    candidates.push(tok.clone());
                    routes.push(Vec::new());
                    best_offset.push(None);
                    let c = candidates.len() - 1;
                    index.insert(ctx[pos].as_str(), c);
                    c
                }
            };
            let off = self.offset_bucket(pos, answer);
            routes[c].push(Route {
                sym: hash_str(&format!("c:{off}")),
                copy: true,
                in_answer: pos >= answer.0 && pos < answer.1,
            });
            if best_offset[c].is_none_or(|b| off.abs() < b.abs()) {
                best_offset[c] = Some(off);
            }
        }
        let end = candidates.len();
        candidates.push(END.to_string());
        routes.push(vec![Route {
            sym: hash_str("end"),
            copy: false,
            in_answer: false,
        }]);
        best_offset.push(None);

        let copyable: Vec<bool> = routes.iter().map(|rs| rs.iter().any(|r| r.copy)).collect();
        let state_sym = (0..candidates.len())
            .map(|c| {
                if c < vocab_len || c == end {
                    routes[c][0].sym
                } else {
                    hash_str(&format!("c:{}", best_offset[c].unwrap()))
                }
            })
            .collect();
        let template: Vec<Slot> = parsed
            .template
            .iter()
            .map(|t| {
                if t == MASK {
                    Slot::Mask
                } else {
                    Slot::Literal(index.get(t.as_str()).copied())
                }
            })
            .collect();
        let mut in_template = vec![false; candidates.len()];
        for s in &template {
            if let Slot::Literal(Some(c)) = s {
                in_template[*c] = true;
            }
        }
        Ok(PreparedInput {
            signature: Self::signature(ctx, answer),
            candidates,
            routes,
            state_sym,
            copyable,
            in_template,
            template,
            end,
        })
    }

    fn candidates<'a>(&'a self, prepared: &'a PreparedInput) -> &'a [String] {
        &prepared.candidates
    }

    fn end_index(&self, prepared: &PreparedInput) -> usize {
        prepared.end
    }

    fn log_probs(&self, prepared: &PreparedInput, prefix: &[usize]) -> Vec<f64> {
        let st = self.state(prepared, prefix);
        let logits: Vec<f64> = self
            .route_scores(prepared, &st, prefix.len())
            .iter()
            .map(|rs| log_sum_exp(rs))
            .collect();
        let z = log_sum_exp(&logits);
        logits.into_iter().map(|l| l - z).collect()
    }

    fn max_input_len(&self) -> usize {
        self.config.max_input_len
    }

    fn max_output_len(&self) -> usize {
        self.config.max_output_len
    }
}

impl Trainable for PointerLm {
    type Gradient = PointerGradient;

    fn zero_grad(&self) -> PointerGradient {
        PointerGradient::default()
    }

    fn accumulate(
        &self,
        prepared: &PreparedInput,
        prefix: &[usize],
        targets: &[(usize, f64)],
        scale: f64,
        grad: &mut PointerGradient,
    ) {
        let p = prepared;
        let st = self.state(p, prefix);
        let scores = self.route_scores(p, &st, prefix.len());
        let logits: Vec<f64> = scores.iter().map(|rs| log_sum_exp(rs)).collect();
        let z = log_sum_exp(&logits);
        let total: f64 = targets.iter().map(|(_, w)| w).sum();
        let mut feats = Vec::with_capacity(12);
        let mut add = |c: usize, coef: f64, grad: &mut PointerGradient| {
            // d logit_c = Σ_r softmax_r(c) f_r
            for (r, route) in p.routes[c].iter().enumerate() {
                let post = (scores[c][r] - logits[c]).exp();
                if post == 0.0 || !post.is_finite() {
                    continue;
                }
                self.features(p, &st, c, route, &mut feats);
                for &k in &feats {
                    *grad.0.entry(k).or_insert(0.0) += coef * post;
                }
            }
        };
        for &(c, w) in targets {
            if w != 0.0 && logits[c] > f64::NEG_INFINITY {
                add(c, scale * w, grad);
            }
        }
        if total != 0.0 {
            for c in 0..p.candidates.len() {
                let pc = (logits[c] - z).exp();
                if pc > 0.0 {
                    add(c, -scale * total * pc, grad);
                }
            }
        }
    }

    fn descend(&mut self, grad: &PointerGradient, lr: f64) {
        let mut keys: Vec<&u64> = grad.0.keys().collect();
        keys.sort_unstable();
        for k in keys {
            let g = grad.0[k];
            if g != 0.0 {
                *self.weights.entry(*k).or_insert(0.0) -= lr * g;
            }
        }
    }
}
