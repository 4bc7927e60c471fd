//! Retrieval-augmented style-transfer question generation.
//!
//! The pipeline masks training questions into style templates, retrieves
//! diverse templates for a query with a trainable dual encoder, and
//! generates one question per retrieved style. Training is supervised
//! (with corrupted templates) followed by policy-gradient fine-tuning that
//! trades a QA-based consistency reward against template-overlap diversity.

pub mod config;
pub mod corpus;
pub mod dataset;
pub mod error;
pub mod generator;
pub mod hashing;
pub mod metrics;
pub mod pipeline;
pub mod retriever;
pub mod reward;
pub mod sampler;
pub mod synth;
pub mod text;
pub mod trainer;

pub use corpus::{Question, Template, TemplateCorpus};
pub use dataset::{ContextAnswer, Sample, SampleRecord};
pub use error::{Error, Result};
