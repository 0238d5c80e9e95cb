//! Evaluation toolkit: dataset loading, prompt rendering, an HTTP model
//! gateway with a mock backend, post-processing, metrics, and a resumable
//! run orchestrator.

pub mod corpus;
pub mod gateway;
pub mod judge;
pub mod metrics;
pub mod mockserver;
pub mod postproc;
pub mod prompting;
pub mod runner;
pub mod sandbox;

pub use corpus::{load_dataset, DocItem, SchemaRegistry};
pub use gateway::{
    GatewayClient, GenerationParams, GenerationRequest, GenerationResponse, RetryPolicy,
};
pub use metrics::{NormalizationSpec, Prf};
pub use postproc::{PostprocRule, RuleRegistry};
pub use prompting::{assemble_fewshot, EvalMode, PromptTemplate};
pub use runner::{resume, run, RunConfig, RunError, RunReport, TaskSpec};
