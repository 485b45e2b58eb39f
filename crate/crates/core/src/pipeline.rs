//! End-to-end scoring: script filter, optional translation, prompt, digit
//! gate, aggregation and optional head. Samples are scored on a bounded
//! worker pool and returned in input order.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{ingest_samples, write_report, DataError, EvalReport, Sample, ScoredSample};
use crate::features::{aggregate_score, extract_features, predict_head, FcnHead};
use crate::gate::{constrained_digit_distribution, LogitSource, ToyLogitSource};
use crate::metrics::{accuracy, auroc, MetricError};
use crate::textproc::{
    build_prompt, dominant_script, filter_script_text, Lexicon, PromptTemplate, ScriptFilterConfig, Translator,
};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Logits,
    Gate,
    Aggregate,
    Features,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Logits => "logits",
            Stage::Gate => "gate",
            Stage::Aggregate => "aggregate",
            Stage::Features => "features",
        })
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("sample {id:?}: {stage} stage failed: {message}")]
    Stage { id: String, stage: Stage, message: String },
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("worker pool: {0}")]
    Pool(String),
}

impl PipelineError {
    fn stage(id: &str, stage: Stage, err: impl fmt::Display) -> Self {
        PipelineError::Stage {
            id: id.to_string(),
            stage,
            message: err.to_string(),
        }
    }
}

/// On-disk pipeline configuration. Every key is optional; absent keys take
/// the built-in defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// JSON template file with `pre_text`, `prob_instruction`, `post_text`.
    pub template: Option<PathBuf>,
    /// Comma separated script names; defaults to "Han,Tamil".
    pub script_filter: Option<String>,
    /// `source<TAB>target` lexicon for the stub translator.
    pub translator_lexicon: Option<PathBuf>,
    /// Toy model JSON path, or `builtin:zero`.
    pub logit_source: Option<String>,
    pub head: Option<PathBuf>,
    pub threshold: Option<f64>,
    pub parallelism: Option<usize>,
}

pub const BUILTIN_ZERO: &str = "builtin:zero";

fn read_to_string(path: &Path) -> Result<String, PipelineError> {
    std::fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
}

impl PipelineConfig {
    pub fn from_json(s: &str) -> Result<Self, PipelineError> {
        serde_json::from_str(s).map_err(|e| PipelineError::Config(e.to_string()))
    }

    /// Keys set in `other` win.
    pub fn overlay(self, other: PipelineConfig) -> PipelineConfig {
        PipelineConfig {
            template: other.template.or(self.template),
            script_filter: other.script_filter.or(self.script_filter),
            translator_lexicon: other.translator_lexicon.or(self.translator_lexicon),
            logit_source: other.logit_source.or(self.logit_source),
            head: other.head.or(self.head),
            threshold: other.threshold.or(self.threshold),
            parallelism: other.parallelism.or(self.parallelism),
        }
    }

    /// Loads every referenced file and builds a ready pipeline.
    pub fn resolve(&self) -> Result<Pipeline, PipelineError> {
        let source: Arc<dyn LogitSource> = match self.logit_source.as_deref() {
            None | Some(BUILTIN_ZERO) => Arc::new(ToyLogitSource::zero()),
            Some(path) => {
                let text = read_to_string(Path::new(path))?;
                Arc::new(ToyLogitSource::from_json(&text).map_err(|e| PipelineError::Config(format!("{path}: {e}")))?)
            }
        };
        let mut p = Pipeline::new(source);
        if let Some(path) = &self.template {
            let t = PromptTemplate::from_json(&read_to_string(path)?)
                .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
            p = p.with_template(t);
        }
        if let Some(names) = &self.script_filter {
            p = p.with_script_filter(
                ScriptFilterConfig::from_names(names).map_err(|e| PipelineError::Config(e.to_string()))?,
            );
        }
        if let Some(path) = &self.translator_lexicon {
            let f = File::open(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
            let lex = Lexicon::from_reader(BufReader::new(f))
                .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
            p = p.with_translator(Arc::new(lex));
        }
        if let Some(path) = &self.head {
            let head = FcnHead::from_json(&read_to_string(path)?)
                .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
            p = p.with_head(head);
        }
        if let Some(t) = self.threshold {
            p = p.with_threshold(t)?;
        }
        if let Some(n) = self.parallelism {
            p = p.with_parallelism(n)?;
        }
        Ok(p)
    }
}

/// A resolved, immutable scoring pipeline. Cheap to clone and safe to share.
#[derive(Clone)]
pub struct Pipeline {
    template: PromptTemplate,
    script_filter: ScriptFilterConfig,
    translator: Option<Arc<dyn Translator>>,
    source: Arc<dyn LogitSource>,
    head: Option<FcnHead>,
    threshold: f64,
    parallelism: usize,
}

impl fmt::Debug for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Pipeline")
            .field("template", &self.template)
            .field("script_filter", &self.script_filter)
            .field("translator", &self.translator.is_some())
            .field("head", &self.head.is_some())
            .field("threshold", &self.threshold)
            .field("parallelism", &self.parallelism)
            .finish()
    }
}

impl Pipeline {
    pub fn new(source: Arc<dyn LogitSource>) -> Self {
        Pipeline {
            template: PromptTemplate::default(),
            script_filter: ScriptFilterConfig::default(),
            translator: None,
            source,
            head: None,
            threshold: DEFAULT_THRESHOLD,
            parallelism: 1,
        }
    }

    pub fn with_template(mut self, template: PromptTemplate) -> Self {
        self.template = template;
        self
    }

    pub fn with_script_filter(mut self, filter: ScriptFilterConfig) -> Self {
        self.script_filter = filter;
        self
    }

    pub fn with_translator(mut self, translator: Arc<dyn Translator>) -> Self {
        self.translator = Some(translator);
        self
    }

    pub fn with_head(mut self, head: FcnHead) -> Self {
        self.head = Some(head);
        self
    }

    pub fn with_threshold(mut self, threshold: f64) -> Result<Self, PipelineError> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(PipelineError::Config(format!(
                "threshold {threshold} must lie in (0, 1)"
            )));
        }
        self.threshold = threshold;
        Ok(self)
    }

    pub fn with_parallelism(mut self, n: usize) -> Result<Self, PipelineError> {
        if n == 0 {
            return Err(PipelineError::Config("parallelism must be positive".into()));
        }
        self.parallelism = n;
        Ok(self)
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn parallelism(&self) -> usize {
        self.parallelism
    }

    pub fn has_head(&self) -> bool {
        self.head.is_some()
    }

    /// The exact prompt sent to the logit source for `text`.
    pub fn prompt_for(&self, text: &str) -> String {
        let filtered = filter_script_text(text, &self.script_filter);
        let translation = match (&self.translator, dominant_script(&filtered, &self.script_filter)) {
            (Some(tr), Some(script)) => Some(tr.translate(&filtered, script)).filter(|t| !t.is_empty()),
            _ => None,
        };
        build_prompt(&self.template, &filtered, translation.as_deref())
    }
}

pub fn score_pipeline(sample: &Sample, pipeline: &Pipeline) -> Result<ScoredSample, PipelineError> {
    let id = sample.id.as_str();
    let prompt = pipeline.prompt_for(&sample.text);
    let logits = pipeline
        .source
        .logits_for(&prompt)
        .map_err(|e| PipelineError::stage(id, Stage::Logits, e))?;
    let distribution = constrained_digit_distribution(&logits, pipeline.source.vocabulary())
        .map_err(|e| PipelineError::stage(id, Stage::Gate, e))?;
    let aggregate = aggregate_score(distribution.probs())
        .map_err(|e| PipelineError::stage(id, Stage::Aggregate, e))?
        .value();
    let features = extract_features(distribution.probs()).map_err(|e| PipelineError::stage(id, Stage::Features, e))?;
    let head_score = pipeline.head.as_ref().map(|h| predict_head(h, &features).value());
    Ok(ScoredSample {
        sample: sample.clone(),
        distribution,
        score: head_score.unwrap_or(aggregate),
        aggregate,
        head_score,
        features,
    })
}

/// Scores every sample and reports the wall time each one took.
pub fn score_samples_timed(
    samples: &[Sample],
    pipeline: &Pipeline,
) -> Result<Vec<(ScoredSample, Duration)>, PipelineError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(pipeline.parallelism)
        .build()
        .map_err(|e| PipelineError::Pool(e.to_string()))?;
    let results: Vec<Result<(ScoredSample, Duration), PipelineError>> = pool.install(|| {
        samples
            .par_iter()
            .map(|s| {
                let start = Instant::now();
                score_pipeline(s, pipeline).map(|r| (r, start.elapsed()))
            })
            .collect()
    });
    // first failure in input order, independent of scheduling
    results.into_iter().collect()
}

pub fn score_samples(samples: &[Sample], pipeline: &Pipeline) -> Result<Vec<ScoredSample>, PipelineError> {
    Ok(score_samples_timed(samples, pipeline)?
        .into_iter()
        .map(|(s, _)| s)
        .collect())
}

/// AUROC and accuracy over the labeled subset of `scored`.
pub fn evaluate(scored: &[ScoredSample], threshold: f64) -> Result<EvalReport, PipelineError> {
    let (scores, labels): (Vec<f64>, Vec<u8>) = scored
        .iter()
        .filter_map(|s| s.sample.label.map(|l| (s.score, l.as_u8())))
        .unzip();
    let n_positive = labels.iter().filter(|&&l| l == 1).count();
    let n_negative = labels.len() - n_positive;
    let auc = auroc(&scores, &labels)?;
    let acc = accuracy(&scores, &labels, threshold)?;
    Ok(EvalReport {
        auroc: Some(auc),
        accuracy: acc,
        n: labels.len(),
        threshold,
        n_positive,
        n_negative,
    })
}

/// Ingests `samples_path`, scores it, writes the report to `sink`.
pub fn run_eval<W: Write>(samples_path: &Path, pipeline: &Pipeline, sink: W) -> Result<EvalReport, PipelineError> {
    let f = File::open(samples_path).map_err(DataError::Io)?;
    let samples = ingest_samples(BufReader::new(f))?;
    let scored = score_samples(&samples, pipeline)?;
    let report = evaluate(&scored, pipeline.threshold)?;
    write_report(&report, sink)?;
    Ok(report)
}
