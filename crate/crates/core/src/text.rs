//! Tokenization and word lists shared by every stage of the pipeline.
//!
//! The tokenizer is whitespace based: a chunk between spaces becomes one
//! token, except that punctuation characters at the edges of a chunk are
//! split off into tokens of their own (`"Norton?"` becomes `Norton`, `?`).
//! Token offsets are counted in Unicode scalar values so that they line up
//! with the `answer_start` offsets found in SQuAD-style JSONL files.

use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, Result};

pub const MASK: &str = "[MASK]";
pub const HIGHLIGHT: &str = "<HL>";
pub const SEPARATOR: &str = "<sep>";
pub const END: &str = "</s>";

const EDGE_PUNCTUATION: &[char] = &['?', '.', ',', '!', ';', ':', '"', '(', ')', '\''];

/// A token with its character span `[start, end)` in the source string.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpannedToken {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

pub fn tokenize_with_offsets(s: &str) -> Vec<SpannedToken> {
    let chars: Vec<char> = s.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        if chars[i].is_whitespace() {
            i += 1;
            continue;
        }
        let mut j = i;
        while j < chars.len() && !chars[j].is_whitespace() {
            j += 1;
        }
        split_chunk(&chars, i, j, &mut out);
        i = j;
    }
    out
}

fn split_chunk(chars: &[char], start: usize, end: usize, out: &mut Vec<SpannedToken>) {
    let mut lo = start;
    let mut hi = end;
    let mut trailing = Vec::new();
    while lo < hi && EDGE_PUNCTUATION.contains(&chars[lo]) {
        out.push(single(chars, lo));
        lo += 1;
    }
    while hi > lo && EDGE_PUNCTUATION.contains(&chars[hi - 1]) {
        trailing.push(single(chars, hi - 1));
        hi -= 1;
    }
    if lo < hi {
        out.push(SpannedToken {
            text: chars[lo..hi].iter().collect(),
            start: lo,
            end: hi,
        });
    }
    out.extend(trailing.into_iter().rev());
}

fn single(chars: &[char], at: usize) -> SpannedToken {
    SpannedToken {
        text: chars[at].to_string(),
        start: at,
        end: at + 1,
    }
}

pub fn tokenize(s: &str) -> Vec<String> {
    tokenize_with_offsets(s)
        .into_iter()
        .map(|t| t.text)
        .collect()
}

pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    tokens
        .iter()
        .map(|t| t.as_ref())
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn is_special(token: &str) -> bool {
    matches!(token, MASK | HIGHLIGHT | SEPARATOR | END)
}

/// Stopword and interrogative-word lists. Lookups are case-insensitive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lexicon {
    stopwords: HashSet<String>,
    interrogatives: HashSet<String>,
}

impl Default for Lexicon {
    fn default() -> Self {
        Self {
            stopwords: parse_word_list(include_str!("../data/stopwords.txt")),
            interrogatives: parse_word_list(include_str!("../data/interrogatives.txt")),
        }
    }
}

impl Lexicon {
    pub fn new(stopwords: HashSet<String>, interrogatives: HashSet<String>) -> Self {
        Self {
            stopwords: stopwords.into_iter().map(|w| w.to_lowercase()).collect(),
            interrogatives: interrogatives
                .into_iter()
                .map(|w| w.to_lowercase())
                .collect(),
        }
    }

    pub fn from_files(stopwords: &Path, interrogatives: &Path) -> Result<Self> {
        let read = |p: &Path| std::fs::read_to_string(p).map_err(|e| Error::io(p, e));
        Ok(Self::new(
            parse_word_list(&read(stopwords)?),
            parse_word_list(&read(interrogatives)?),
        ))
    }

    pub fn is_stopword(&self, token: &str) -> bool {
        self.stopwords.contains(&token.to_lowercase())
    }

    pub fn is_interrogative(&self, token: &str) -> bool {
        self.interrogatives.contains(&token.to_lowercase())
    }

    /// Tokens the template extractor must never mask.
    pub fn is_kept(&self, token: &str) -> bool {
        self.is_stopword(token) || self.is_interrogative(token)
    }
}

/// One token per line, UTF-8. Blank lines and `#` comments are skipped.
pub fn parse_word_list(contents: &str) -> HashSet<String> {
    contents
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| l.to_lowercase())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_edge_punctuation() {
        assert_eq!(
            tokenize("Who founded Norton, in 1935?"),
            vec!["Who", "founded", "Norton", ",", "in", "1935", "?"]
        );
        assert_eq!(tokenize("  (U.S.)  "), vec!["(", "U.S", ".", ")"]);
        assert_eq!(tokenize("Norton's"), vec!["Norton's"]);
    }

    #[test]
    fn offsets_count_chars_not_bytes() {
        let toks = tokenize_with_offsets("café au lait?");
        assert_eq!(toks[1].start, 5);
        assert_eq!(toks[3].text, "?");
        assert_eq!(toks[3].start, 12);
    }

    #[test]
    fn default_lists_are_loaded() {
        let lex = Lexicon::default();
        assert!(lex.is_stopword("The"));
        assert!(lex.is_interrogative("WHOM"));
        assert!(!lex.is_kept("Norton"));
        for w in [
            "who", "what", "when", "where", "why", "which", "how", "whose", "whom",
        ] {
            assert!(lex.is_interrogative(w), "{w}");
        }
    }
}
