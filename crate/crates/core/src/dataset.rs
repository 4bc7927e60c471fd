//! JSONL ingestion: one `{context, answer, answer_start, question}` object
//! per line, with an optional `id`.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Question;
use crate::error::{Error, Result};
use crate::text;

/// A passage plus the answer span the question must target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextAnswer {
    context: Vec<String>,
    answer: (usize, usize),
    answer_chars: (usize, usize),
}

impl ContextAnswer {
    /// Validates that `answer` occurs at char offset `answer_start` and maps
    /// it onto the tokens it overlaps.
    pub fn from_raw(context: &str, answer: &str, answer_start: usize) -> Result<Self> {
        let not_found = || Error::AnswerNotInContext {
            answer: answer.to_string(),
            offset: answer_start,
        };
        let answer_len = answer.chars().count();
        if answer.trim().is_empty() {
            return Err(not_found());
        }
        let found: String = context
            .chars()
            .skip(answer_start)
            .take(answer_len)
            .collect();
        if found != answer {
            return Err(not_found());
        }
        let end_char = answer_start + answer_len;
        let spanned = text::tokenize_with_offsets(context);
        let covered: Vec<usize> = spanned
            .iter()
            .enumerate()
            .filter(|(_, t)| t.start < end_char && t.end > answer_start)
            .map(|(i, _)| i)
            .collect();
        let (Some(&first), Some(&last)) = (covered.first(), covered.last()) else {
            return Err(not_found());
        };
        Ok(Self {
            context: spanned.into_iter().map(|t| t.text).collect(),
            answer: (first, last + 1),
            answer_chars: (answer_start, end_char),
        })
    }

    /// Builds directly from tokens; character offsets assume single-space joins.
    pub fn from_tokens(
        context: Vec<String>,
        answer_start: usize,
        answer_end: usize,
    ) -> Result<Self> {
        if answer_start >= answer_end || answer_end > context.len() {
            return Err(Error::AnswerNotInContext {
                answer: format!("token span [{answer_start}, {answer_end})"),
                offset: answer_start,
            });
        }
        let char_at =
            |tok: usize| -> usize { context[..tok].iter().map(|t| t.chars().count() + 1).sum() };
        let start = char_at(answer_start);
        let end = char_at(answer_end - 1) + context[answer_end - 1].chars().count();
        Ok(Self {
            answer: (answer_start, answer_end),
            answer_chars: (start, end),
            context,
        })
    }

    pub fn context_tokens(&self) -> &[String] {
        &self.context
    }

    pub fn answer_span(&self) -> (usize, usize) {
        self.answer
    }

    pub fn answer_char_span(&self) -> (usize, usize) {
        self.answer_chars
    }

    pub fn answer_tokens(&self) -> &[String] {
        &self.context[self.answer.0..self.answer.1]
    }

    pub fn answer_text(&self) -> String {
        text::detokenize(self.answer_tokens())
    }

    pub fn context_text(&self) -> String {
        text::detokenize(&self.context)
    }

    /// Lowercased context vocabulary, as used by template masking.
    pub fn context_token_set(&self) -> HashSet<String> {
        self.context.iter().map(|t| t.to_lowercase()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub id: String,
    pub input: ContextAnswer,
    pub question: Question,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub context: String,
    pub answer: String,
    pub answer_start: usize,
    pub question: String,
}

impl SampleRecord {
    pub fn into_sample(self, fallback_id: String) -> Result<Sample> {
        let input = ContextAnswer::from_raw(&self.context, &self.answer, self.answer_start)?;
        let question = Question::parse(&self.question)?;
        Ok(Sample {
            id: self.id.unwrap_or(fallback_id),
            input,
            question,
        })
    }
}

pub fn read_records(path: &Path) -> Result<Vec<SampleRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| Error::json(format!("{}:{}", path.display(), n + 1), e))?;
        out.push(rec);
    }
    Ok(out)
}

/// Reads and validates a dataset. Any invalid line fails the whole file with
/// a validation error naming the line.
pub fn read_dataset(path: &Path) -> Result<Vec<Sample>> {
    let records = read_records(path)?;
    if records.is_empty() {
        return Err(Error::Validation(format!(
            "{}: dataset is empty",
            path.display()
        )));
    }
    records
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            r.into_sample(format!("{i}"))
                .map_err(|e| Error::Validation(format!("{} record {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// Converts in-memory records; ids default to the record position.
pub fn into_samples(records: Vec<SampleRecord>) -> Result<Vec<Sample>> {
    records
        .into_iter()
        .enumerate()
        .map(|(i, r)| r.into_sample(format!("{i}")))
        .collect()
}

pub fn write_records(path: &Path, records: &[SampleRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::json("dataset record", e))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
