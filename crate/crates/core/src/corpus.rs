//! Question-style template corpus.
//!
//! A template is a question with its context-sensitive content replaced by
//! `[MASK]`: entity runs, noun phrases, and any content word that also occurs
//! in the passage are masked, while stopwords and interrogative words always
//! survive. Near-duplicate templates are then filtered greedily by token-set
//! Jaccard similarity.

use std::collections::{BTreeSet, HashSet};
use std::hash::Hash;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::text::{self, Lexicon, MASK};

pub const DEFAULT_DEDUP_THRESHOLD: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Question {
    tokens: Vec<String>,
    raw: String,
}

impl Question {
    pub fn parse(raw: &str) -> Result<Self> {
        Self::from_tokens(text::tokenize(raw))
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::InvalidQuestion("empty question".into()));
        }
        let raw = text::detokenize(&tokens);
        Ok(Self { tokens, raw })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn raw(&self) -> &str {
        &self.raw
    }

    pub fn token_set(&self) -> HashSet<&str> {
        self.tokens.iter().map(String::as_str).collect()
    }
}

impl std::fmt::Display for Question {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.raw)
    }
}

/// A masked question. Construction collapses runs of `[MASK]` and rejects
/// templates without any literal token.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Template {
    tokens: Vec<String>,
    source_id: Option<String>,
}

impl Template {
    pub fn new(tokens: Vec<String>, source_id: Option<String>) -> Result<Self> {
        let mut collapsed: Vec<String> = Vec::with_capacity(tokens.len());
        for tok in tokens {
            if tok == MASK && collapsed.last().map(String::as_str) == Some(MASK) {
                continue;
            }
            collapsed.push(tok);
        }
        if collapsed.is_empty() {
            return Err(Error::InvalidTemplate("empty template".into()));
        }
        if collapsed.iter().all(|t| t == MASK) {
            return Err(Error::AllMasked);
        }
        Ok(Self {
            tokens: collapsed,
            source_id,
        })
    }

    pub fn parse(s: &str) -> Result<Self> {
        // `[MASK]` contains no edge punctuation, so a plain whitespace split
        // keeps it intact; other tokens go through the regular tokenizer.
        let tokens = s
            .split_whitespace()
            .flat_map(|chunk| {
                if chunk == MASK {
                    vec![MASK.to_string()]
                } else {
                    text::tokenize(chunk)
                }
            })
            .collect();
        Self::new(tokens, None)
    }

    pub fn with_source(mut self, source_id: impl Into<String>) -> Self {
        self.source_id = Some(source_id.into());
        self
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn source_id(&self) -> Option<&str> {
        self.source_id.as_deref()
    }

    pub fn text(&self) -> String {
        text::detokenize(&self.tokens)
    }

    pub fn token_set(&self) -> HashSet<&str> {
        self.tokens.iter().map(String::as_str).collect()
    }

    /// Token set with `[MASK]` removed.
    pub fn literal_set(&self) -> HashSet<&str> {
        self.tokens
            .iter()
            .map(String::as_str)
            .filter(|t| *t != MASK)
            .collect()
    }

    pub fn mask_count(&self) -> usize {
        self.tokens.iter().filter(|t| *t == MASK).count()
    }
}

impl std::fmt::Display for Template {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.text())
    }
}

/// `|a ∩ b| / |a ∪ b|`, defined as 1.0 for two empty sets.
pub fn jaccard<T: Eq + Hash>(a: &HashSet<T>, b: &HashSet<T>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let inter = a.iter().filter(|x| b.contains(x)).count();
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpanKind {
    Entity,
    NounPhrase,
}

/// A tagged region `[start, end)` of a question, in token indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggerSpan {
    pub start: usize,
    pub end: usize,
    pub kind: SpanKind,
}

impl TaggerSpan {
    pub fn new(start: usize, end: usize, kind: SpanKind) -> Self {
        Self { start, end, kind }
    }
}

/// Detects entity and noun-phrase spans in a tokenized question.
pub trait Tagger {
    fn tag(&self, tokens: &[String]) -> Vec<TaggerSpan>;
}

/// Capitalized-token runs are entities; a determiner followed by a run of
/// content words is a noun phrase.
#[derive(Debug, Clone, Default)]
pub struct RuleTagger {
    lexicon: Lexicon,
}

const DETERMINERS: &[&str] = &["a", "an", "the", "this", "that", "these", "those"];

impl RuleTagger {
    pub fn new(lexicon: Lexicon) -> Self {
        Self { lexicon }
    }

    fn is_content(&self, tok: &str) -> bool {
        !self.lexicon.is_kept(tok) && tok.chars().any(char::is_alphanumeric)
    }
}

fn is_capitalized(tok: &str) -> bool {
    tok.chars().next().is_some_and(char::is_uppercase)
}

impl Tagger for RuleTagger {
    fn tag(&self, tokens: &[String]) -> Vec<TaggerSpan> {
        let mut spans = Vec::new();
        let mut i = 0;
        while i < tokens.len() {
            if is_capitalized(&tokens[i]) && self.is_content(&tokens[i]) {
                let start = i;
                while i < tokens.len() && is_capitalized(&tokens[i]) && self.is_content(&tokens[i])
                {
                    i += 1;
                }
                spans.push(TaggerSpan::new(start, i, SpanKind::Entity));
            } else {
                i += 1;
            }
        }
        let mut i = 0;
        while i < tokens.len() {
            if DETERMINERS.contains(&tokens[i].to_lowercase().as_str()) {
                let start = i;
                let mut j = i + 1;
                while j < tokens.len() && self.is_content(&tokens[j]) {
                    j += 1;
                }
                if j > i + 1 {
                    spans.push(TaggerSpan::new(start, j, SpanKind::NounPhrase));
                    i = j;
                    continue;
                }
            }
            i += 1;
        }
        spans.sort_by_key(|s| (s.start, s.end));
        spans
    }
}

/// Masks every token inside a span and every content token that also occurs
/// in the context (`context_tokens` is compared case-insensitively). Words
/// the lexicon keeps are never masked.
pub fn extract_template(
    question: &Question,
    context_tokens: &HashSet<String>,
    spans: &[TaggerSpan],
    lexicon: &Lexicon,
) -> Result<Template> {
    let toks = question.tokens();
    let mut in_span = vec![false; toks.len()];
    for span in spans {
        if span.start >= span.end || span.end > toks.len() {
            return Err(Error::Validation(format!(
                "tagger span [{}, {}) outside question of {} tokens",
                span.start,
                span.end,
                toks.len()
            )));
        }
        in_span[span.start..span.end]
            .iter_mut()
            .for_each(|m| *m = true);
    }
    let masked = toks
        .iter()
        .zip(&in_span)
        .map(|(tok, &spanned)| {
            let mask =
                !lexicon.is_kept(tok) && (spanned || context_tokens.contains(&tok.to_lowercase()));
            if mask {
                MASK.to_string()
            } else {
                tok.clone()
            }
        })
        .collect();
    Template::new(masked, None)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateCorpus {
    templates: Vec<Template>,
    dedup_threshold: f64,
}

impl TemplateCorpus {
    /// Wraps templates that are already known to satisfy the threshold.
    pub fn from_deduplicated(templates: Vec<Template>, dedup_threshold: f64) -> Self {
        Self {
            templates,
            dedup_threshold,
        }
    }

    pub fn templates(&self) -> &[Template] {
        &self.templates
    }

    pub fn dedup_threshold(&self) -> f64 {
        self.dedup_threshold
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<&Template> {
        self.templates.get(i)
    }

    /// Largest pairwise Jaccard similarity, by brute force.
    pub fn max_pairwise_jaccard(&self) -> f64 {
        let sets: Vec<_> = self.templates.iter().map(Template::token_set).collect();
        let mut max = 0.0f64;
        for i in 0..sets.len() {
            for j in i + 1..sets.len() {
                max = max.max(jaccard(&sets[i], &sets[j]));
            }
        }
        max
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for (i, t) in self.templates.iter().enumerate() {
            let rec = CorpusRecord {
                template: t.text(),
                source_id: t
                    .source_id()
                    .map(str::to_string)
                    .unwrap_or_else(|| i.to_string()),
            };
            let line = serde_json::to_string(&rec).map_err(|e| Error::json("corpus record", e))?;
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: &Path, dedup_threshold: f64) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut templates = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: CorpusRecord = serde_json::from_str(&line)
                .map_err(|e| Error::json(format!("{}:{}", path.display(), n + 1), e))?;
            templates.push(Template::parse(&rec.template)?.with_source(rec.source_id));
        }
        if templates.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        Ok(Self::from_deduplicated(templates, dedup_threshold))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CorpusRecord {
    template: String,
    source_id: String,
}

/// Greedy first-seen-wins filter: a template is kept iff its Jaccard
/// similarity to every previously kept template is at most `threshold`.
pub fn deduplicate(templates: &[Template], threshold: f64) -> Result<TemplateCorpus> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::Validation(format!(
            "dedup threshold {threshold} outside (0, 1]"
        )));
    }
    if templates.is_empty() {
        return Err(Error::EmptyResult("no templates to deduplicate".into()));
    }
    let mut kept: Vec<Template> = Vec::new();
    let mut kept_sets: Vec<HashSet<&str>> = Vec::new();
    let mut exact: HashSet<BTreeSet<&str>> = HashSet::new();
    for t in templates {
        let set = t.token_set();
        let key: BTreeSet<&str> = set.iter().copied().collect();
        if exact.contains(&key) {
            continue;
        }
        let n = set.len() as f64;
        let near_dup = kept_sets.iter().any(|other| {
            let m = other.len() as f64;
            // Jaccard is bounded by the size ratio.
            if n.min(m) / n.max(m) <= threshold {
                return false;
            }
            jaccard(&set, other) > threshold
        });
        if !near_dup {
            kept.push(t.clone());
            kept_sets.push(set);
            exact.insert(key);
        }
    }
    Ok(TemplateCorpus::from_deduplicated(kept, threshold))
}

#[derive(Debug, Clone)]
pub struct CorpusBuild {
    pub corpus: TemplateCorpus,
    /// Samples whose template came out fully masked.
    pub skipped: usize,
}

pub fn build_corpus(
    samples: &[Sample],
    tagger: &dyn Tagger,
    lexicon: &Lexicon,
    threshold: f64,
) -> Result<CorpusBuild> {
    if samples.is_empty() {
        return Err(Error::Validation("dataset is empty".into()));
    }
    let mut templates = Vec::with_capacity(samples.len());
    let mut skipped = 0;
    for sample in samples {
        let spans = tagger.tag(sample.question.tokens());
        match extract_template(
            &sample.question,
            &sample.input.context_token_set(),
            &spans,
            lexicon,
        ) {
            Ok(t) => templates.push(t.with_source(sample.id.clone())),
            Err(Error::AllMasked) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    if templates.is_empty() {
        return Err(Error::EmptyResult(format!(
            "all {skipped} samples produced fully masked templates"
        )));
    }
    Ok(CorpusBuild {
        corpus: deduplicate(&templates, threshold)?,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set<'a>(xs: &[&'a str]) -> HashSet<&'a str> {
        xs.iter().copied().collect()
    }

    fn ctx(words: &[&str]) -> HashSet<String> {
        words.iter().map(|w| w.to_lowercase()).collect()
    }

    fn tpl(s: &str) -> Template {
        Template::parse(s).unwrap()
    }

    #[test]
    fn masks_spans_present_in_context() {
        let q = Question::parse("who founded Norton in 1935 ?").unwrap();
        let spans = [
            TaggerSpan::new(2, 3, SpanKind::Entity),
            TaggerSpan::new(4, 5, SpanKind::Entity),
        ];
        let t = extract_template(
            &q,
            &ctx(&["Norton", "1935", "company"]),
            &spans,
            &Lexicon::default(),
        )
        .unwrap();
        assert_eq!(t.text(), "who founded [MASK] in [MASK] ?");
    }

    #[test]
    fn unrelated_question_is_unchanged() {
        let q = Question::parse("why do birds sing ?").unwrap();
        let t = extract_template(&q, &ctx(&["cats", "sleep"]), &[], &Lexicon::default()).unwrap();
        assert_eq!(t.tokens(), q.tokens());
    }

    #[test]
    fn noun_phrase_collapses_but_keeps_stopwords() {
        let q = Question::parse("what is the tallest building ?").unwrap();
        let spans = [TaggerSpan::new(2, 5, SpanKind::NounPhrase)];
        let t = extract_template(&q, &ctx(&[]), &spans, &Lexicon::default()).unwrap();
        // "the" is a stopword and survives inside the span.
        assert_eq!(t.text(), "what is the [MASK] ?");
    }

    #[test]
    fn all_masked_is_rejected() {
        let q = Question::parse("Norton Acme").unwrap();
        let err = extract_template(&q, &ctx(&["norton", "acme"]), &[], &Lexicon::default());
        assert!(matches!(err, Err(Error::AllMasked)));
    }

    #[test]
    fn span_out_of_bounds_is_rejected() {
        let q = Question::parse("who is it ?").unwrap();
        let spans = [TaggerSpan::new(2, 9, SpanKind::Entity)];
        assert!(extract_template(&q, &ctx(&[]), &spans, &Lexicon::default()).is_err());
    }

    #[test]
    fn rule_tagger_finds_entities_and_noun_phrases() {
        let toks = text::tokenize("who was the founder of Acme Corp ?");
        let spans = RuleTagger::default().tag(&toks);
        assert_eq!(
            spans,
            vec![
                TaggerSpan::new(2, 4, SpanKind::NounPhrase),
                TaggerSpan::new(5, 7, SpanKind::Entity),
            ]
        );
    }

    #[test]
    fn template_parse_collapses_masks() {
        let t = tpl("what [MASK] [MASK] is [MASK] ?");
        assert_eq!(t.text(), "what [MASK] is [MASK] ?");
        assert_eq!(t.mask_count(), 2);
        assert!(matches!(
            Template::parse("[MASK] [MASK]"),
            Err(Error::AllMasked)
        ));
        assert!(Template::parse("   ").is_err());
    }

    #[test]
    fn jaccard_examples() {
        assert_eq!(jaccard(&set(&["a", "b"]), &set(&["a", "b"])), 1.0);
        assert_eq!(jaccard(&set(&["a"]), &set(&["b"])), 0.0);
        assert_eq!(
            jaccard(&set(&["what", "is", MASK]), &set(&["what", MASK, "called"])),
            0.5
        );
        assert_eq!(jaccard::<&str>(&set(&[]), &set(&[])), 1.0);
    }

    #[test]
    fn dedup_examples() {
        let a = tpl("who is [MASK] ?");
        let c = deduplicate(&[a.clone(), a.clone()], 0.8).unwrap();
        assert_eq!(c.len(), 1);

        // pairwise Jaccard 0.4 < 0.8: everything survives
        let t1 = tpl("a b c d e");
        let t2 = tpl("a b x y z");
        let t3 = tpl("a b p q r");
        assert!((jaccard(&t1.token_set(), &t2.token_set()) - 2.0 / 8.0).abs() < 1e-12);
        assert_eq!(deduplicate(&[t1, t2, t3], 0.8).unwrap().len(), 3);
    }

    #[test]
    fn dedup_greedy_trace() {
        // #2 overlaps #1 at 9/10, #3 overlaps both at <= 0.5.
        let one = tpl("a b c d e f g h i [MASK]");
        let two = tpl("a b c d e f g h i");
        let three = tpl("a b c d e z y x w v");
        let s1 = one.token_set();
        assert!((jaccard(&s1, &two.token_set()) - 0.9).abs() < 1e-12);
        assert!(jaccard(&s1, &three.token_set()) <= 0.5);
        assert!(jaccard(&two.token_set(), &three.token_set()) <= 0.5);
        let c = deduplicate(&[one.clone(), two, three.clone()], 0.8).unwrap();
        assert_eq!(c.templates(), &[one, three]);
    }

    #[test]
    fn dedup_rejects_bad_input() {
        assert!(matches!(deduplicate(&[], 0.8), Err(Error::EmptyResult(_))));
        assert!(deduplicate(&[tpl("who ?")], 0.0).is_err());
        assert!(deduplicate(&[tpl("who ?")], 1.5).is_err());
    }

    #[test]
    fn corpus_jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        let c = deduplicate(
            &[
                tpl("who is [MASK] ?").with_source("s1"),
                tpl("when was [MASK] built ?").with_source("s2"),
            ],
            0.8,
        )
        .unwrap();
        c.write_jsonl(&path).unwrap();
        let back = TemplateCorpus::read_jsonl(&path, 0.8).unwrap();
        assert_eq!(back, c);
    }
}
