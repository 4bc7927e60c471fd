//! Trainer configuration: a flat key-value TOML document.
//!
//! The default values are the SQuAD-scale settings of the reference setup
//! (pretrained encoder-decoder, Adam-scale learning rates). The `desk`
//! preset retunes learning rates and epochs for the toy pointer backend and
//! the synthetic world.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::SamplingConfig;
use crate::trainer::CorruptionConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    /// Root seed for every random draw in a pipeline run.
    pub seed: u64,
    /// Weight of the diversity reward.
    pub lambda: f64,
    /// Weight of the KL penalty toward the post-supervised snapshot.
    pub kl_beta: f64,
    /// Templates (clusters) sampled per training example.
    pub clusters: usize,
    pub top_p: f64,
    pub top_k: usize,
    /// Questions generated per input at evaluation.
    pub outputs_n: usize,
    pub generator_lr: f64,
    pub retriever_lr: f64,
    pub rl_epochs: usize,
    pub rl_batch_size: usize,
    pub rl_warmup_ratio: f64,
    pub sl_lr: f64,
    pub sl_epochs: usize,
    pub sl_batch_size: usize,
    pub sl_warmup_ratio: f64,
    pub grad_clip: f64,
    pub train_pool: usize,
    pub eval_pool: usize,
    pub max_input_len: usize,
    pub max_output_len: usize,
    pub dedup_threshold: f64,
    pub embedding_dim: usize,
    pub corrupt_replace_mask: f64,
    pub corrupt_add_nouns: f64,
    pub corrupt_delete_mask: f64,
    pub corrupt_swap_template: f64,
    /// Noise level of the synthetic QA oracle.
    pub qa_epsilon: f64,
    /// Development samples used for model selection (0 = all).
    pub dev_limit: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self::squad()
    }
}

impl TrainerConfig {
    /// SQuAD-scale settings.
    pub fn squad() -> Self {
        Self {
            seed: 17,
            lambda: 0.5,
            kl_beta: 0.1,
            clusters: 3,
            top_p: 0.9,
            top_k: 30,
            outputs_n: 5,
            generator_lr: 1e-6,
            retriever_lr: 1e-7,
            rl_epochs: 7,
            rl_batch_size: 12,
            rl_warmup_ratio: 0.2,
            sl_lr: 5e-4,
            sl_epochs: 5,
            sl_batch_size: 64,
            sl_warmup_ratio: 0.1,
            grad_clip: 1.0,
            train_pool: 100,
            eval_pool: 500,
            max_input_len: 128,
            max_output_len: 32,
            dedup_threshold: 0.8,
            embedding_dim: 128,
            corrupt_replace_mask: 0.15,
            corrupt_add_nouns: 0.15,
            corrupt_delete_mask: 0.15,
            corrupt_swap_template: 0.15,
            qa_epsilon: 0.05,
            dev_limit: 0,
        }
    }

    /// NewsQA-scale settings.
    pub fn newsqa() -> Self {
        Self {
            lambda: 0.4,
            kl_beta: 0.05,
            clusters: 2,
            max_input_len: 512,
            ..Self::squad()
        }
    }

    /// Toy pointer backend on the synthetic world.
    pub fn desk() -> Self {
        Self {
            generator_lr: 0.1,
            retriever_lr: 0.05,
            rl_epochs: 4,
            rl_batch_size: 12,
            sl_lr: 2.0,
            sl_epochs: 20,
            sl_batch_size: 16,
            max_output_len: 16,
            dev_limit: 100,
            ..Self::squad()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "squad" | "default" => Ok(Self::squad()),
            "newsqa" => Ok(Self::newsqa()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::Config(format!(
                "unknown preset {other:?} (expected squad, newsqa or desk)"
            ))),
        }
    }

    /// Parses a flat TOML document; an optional `preset` key selects the base
    /// values the remaining keys override.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        let base = match table.remove("preset") {
            Some(toml::Value::String(p)) => Self::preset(&p)?,
            Some(v) => return Err(Error::Config(format!("preset must be a string, got {v}"))),
            None => Self::squad(),
        };
        let mut merged = toml::Table::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
        for (k, v) in table {
            if !merged.contains_key(&k) {
                return Err(Error::Config(format!("unknown config key {k:?}")));
            }
            merged.insert(k, v);
        }
        let cfg: Self = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    /// Applies `key=value` overrides (values in TOML syntax).
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut doc = self.to_toml_string();
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            doc.push_str(&format!("{} = {}\n", k.trim(), v.trim()));
        }
        // later duplicates win
        let mut table = toml::Table::new();
        for line in doc.lines().filter(|l| !l.trim().is_empty()) {
            let t: toml::Table = line
                .parse()
                .map_err(|e| Error::Config(format!("{line}: {e}")))?;
            table.extend(t);
        }
        Self::from_toml_str(&toml::to_string(&table).map_err(|e| Error::Config(e.to_string()))?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda {} outside [0, 1]", self.lambda));
        }
        if self.kl_beta < 0.0 {
            return bad(format!("kl_beta {} is negative", self.kl_beta));
        }
        for (name, lr) in [
            ("generator_lr", self.generator_lr),
            ("retriever_lr", self.retriever_lr),
            ("sl_lr", self.sl_lr),
        ] {
            if lr.is_nan() || lr <= 0.0 {
                return bad(format!("{name} must be positive, got {lr}"));
            }
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return bad(format!("top_p {} outside (0, 1]", self.top_p));
        }
        if !(self.dedup_threshold > 0.0 && self.dedup_threshold <= 1.0) {
            return bad(format!(
                "dedup_threshold {} outside (0, 1]",
                self.dedup_threshold
            ));
        }
        if self.clusters == 0 || self.outputs_n == 0 || self.train_pool == 0 || self.eval_pool == 0
        {
            return bad("clusters, outputs_n and pool sizes must be positive".into());
        }
        if self.rl_batch_size == 0 || self.sl_batch_size == 0 || self.embedding_dim == 0 {
            return bad("batch sizes and embedding_dim must be positive".into());
        }
        if !(self.qa_epsilon > 0.0 && self.qa_epsilon < 1.0) {
            return bad(format!("qa_epsilon {} outside (0, 1)", self.qa_epsilon));
        }
        self.corruption().validate()
    }

    pub fn corruption(&self) -> CorruptionConfig {
        CorruptionConfig {
            replace_mask_with_entity: self.corrupt_replace_mask,
            add_nouns: self.corrupt_add_nouns,
            delete_mask: self.corrupt_delete_mask,
            swap_template: self.corrupt_swap_template,
        }
    }

    pub fn training_sampling(&self) -> SamplingConfig {
        SamplingConfig {
            k: self.clusters,
            pool_size: self.train_pool,
            top_p: self.top_p,
            top_k: self.top_k,
            max_len: self.max_output_len,
        }
    }

    pub fn inference_sampling(&self) -> SamplingConfig {
        SamplingConfig {
            k: self.outputs_n,
            pool_size: self.eval_pool,
            ..self.training_sampling()
        }
    }
}
