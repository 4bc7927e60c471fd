//! Rewards for policy-gradient training: a QA-loss based consistency reward,
//! a template-overlap diversity reward, and their weighted sum.

use serde::{Deserialize, Serialize};

use crate::corpus::{jaccard, Question, Template};
use crate::dataset::ContextAnswer;

/// A question-answering model used as the consistency judge.
pub trait QaBackend: Sync {
    /// `log p(a_i | context, question, a_<i)` for every answer token.
    fn answer_log_probs(
        &self,
        context: &[String],
        question: &Question,
        answer: &[String],
    ) -> Vec<f64>;

    /// The model's answer string for `question`; empty when it abstains.
    fn predict(&self, context: &[String], question: &Question) -> String;
}

/// Mean negative log-likelihood of the answer tokens.
pub fn qa_answer_loss(
    qa: &(impl QaBackend + ?Sized),
    context: &[String],
    question: &Question,
    answer: &[String],
) -> f64 {
    assert!(!answer.is_empty(), "answer must be non-empty");
    let lps = qa.answer_log_probs(context, question, answer);
    -lps.iter().sum::<f64>() / lps.len() as f64
}

pub fn consistency_from_loss(loss: f64) -> f64 {
    (-loss).exp()
}

pub fn consistency_reward(
    qa: &(impl QaBackend + ?Sized),
    context: &[String],
    question: &Question,
    answer: &[String],
) -> f64 {
    consistency_from_loss(qa_answer_loss(qa, context, question, answer))
}

/// Token-set Jaccard between the question and the template's literal
/// (non-`[MASK]`) tokens.
pub fn diversity_reward(question: &Question, template: &Template) -> f64 {
    jaccard(&question.token_set(), &template.literal_set())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub consistency: f64,
    pub diversity: f64,
    pub total: f64,
    pub lambda: f64,
}

pub fn total_reward(consistency: f64, diversity: f64, lambda: f64) -> RewardBreakdown {
    debug_assert!(
        (0.0..=1.0).contains(&lambda),
        "lambda {lambda} outside [0, 1]"
    );
    RewardBreakdown {
        consistency,
        diversity,
        total: consistency + lambda * diversity,
        lambda,
    }
}

/// Scores generated questions for one QA backend and diversity weight.
pub struct RewardModel<'a> {
    qa: &'a dyn QaBackend,
    lambda: f64,
}

impl<'a> RewardModel<'a> {
    pub fn new(qa: &'a dyn QaBackend, lambda: f64) -> Self {
        Self { qa, lambda }
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn qa(&self) -> &dyn QaBackend {
        self.qa
    }

    /// Without a template the diversity term is zero.
    pub fn score(
        &self,
        input: &ContextAnswer,
        question: &Question,
        template: Option<&Template>,
    ) -> RewardBreakdown {
        let cons = consistency_reward(
            self.qa,
            input.context_tokens(),
            question,
            input.answer_tokens(),
        );
        let divs = template.map_or(0.0, |t| diversity_reward(question, t));
        total_reward(cons, divs, self.lambda)
    }
}

/// One line of the reward log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardLogRecord {
    pub id: String,
    pub template: String,
    pub question: String,
    pub r_cons: f64,
    pub r_divs: f64,
    pub r_total: f64,
}

impl RewardLogRecord {
    pub fn new(
        id: impl Into<String>,
        template: Option<&Template>,
        question: &Question,
        r: &RewardBreakdown,
    ) -> Self {
        Self {
            id: id.into(),
            template: template.map(Template::text).unwrap_or_default(),
            question: question.raw().to_string(),
            r_cons: r.consistency,
            r_divs: r.diversity,
            r_total: r.total,
        }
    }
}
