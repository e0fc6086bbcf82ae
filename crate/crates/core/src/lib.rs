//! Benchmark harness for evaluating large language models as cross-domain
//! recommenders on Amazon review data.
//!
//! The pipeline runs `corpus` → `sampler` → `promptgen` → `llm_gateway` →
//! `respparse` → `metrics`, with `baselines` scoring the same evaluation
//! instances and `runner` orchestrating experiments and reports.

// `!(x > 0.0)` style checks are meant to reject NaN as well
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod corpus;
pub mod llm_gateway;
pub mod metrics;
pub mod promptgen;
pub mod respparse;
pub mod runner;
pub mod sampler;
pub mod text;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Corpus(#[from] corpus::CorpusError),
    #[error(transparent)]
    Sampler(#[from] sampler::SamplerError),
    #[error(transparent)]
    Prompt(#[from] promptgen::PromptError),
    #[error(transparent)]
    Gateway(#[from] llm_gateway::GatewayError),
    #[error(transparent)]
    Parse(#[from] respparse::ParseError),
    #[error(transparent)]
    Metric(#[from] metrics::MetricError),
    #[error(transparent)]
    Train(#[from] baselines::TrainError),
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
