//! Harmful-meme triage from constrained digit-token probabilities.
//!
//! The scoring path filters OCR text down to Han and Tamil tokens, wraps it in
//! a fixed chat prompt that primes the assistant with `"0."`, gates the next
//! token to the ten digits, and turns the resulting distribution into a harm
//! score and a 10-dimensional feature vector. A small fully-connected head can
//! be trained on those features. The [`quant`] module carries the
//! importance-weighted block quantizer used to shrink the scoring model.

pub mod datamodel;
pub mod features;
pub mod gate;
pub mod metrics;
pub mod pipeline;
pub mod quant;
pub mod textproc;

pub use datamodel::{EvalReport, Label, Sample, ScoredSample};
pub use features::{aggregate_score, extract_features, predict_head, train_head, FcnHead, HarmScore, TrainConfig};
pub use gate::{constrained_digit_distribution, LogitSource, TokenDistribution, ToyLogitSource, Vocabulary};
pub use metrics::{accuracy, auroc};
pub use pipeline::{run_eval, score_pipeline, score_samples, Pipeline, PipelineConfig, PipelineError};
pub use textproc::{build_prompt, filter_script_text, PromptTemplate, ScriptFilterConfig};
