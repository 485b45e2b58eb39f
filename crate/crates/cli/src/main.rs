use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use digitgate::datamodel::{ingest_samples, write_report};
use digitgate::features::{train_head, TrainConfig, N_FEATURES};
use digitgate::pipeline::{evaluate, score_samples_timed};
use digitgate::quant::{
    quantization_report, quantize_tensor, read_importance, read_tensor, write_importance, write_tensor,
    ImportanceMatrix, QuantConfig, QuantError, WeightMatrix,
};
use digitgate::textproc::ScriptFilterConfig;
use digitgate::{filter_script_text, Pipeline, PipelineConfig, PipelineError, Sample};
use serde_json::Value;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_INTERNAL: u8 = 3;

#[derive(Parser)]
#[command(
    name = "digitgate",
    version,
    about = "Score memes for harm from constrained digit probabilities"
)]
struct Cli {
    /// JSON pipeline config; command-line flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score one sample or a JSONL stream of samples.
    Score(ScoreArgs),
    /// Score a labeled dataset and write an AUROC/accuracy report.
    Eval(EvalArgs),
    /// Keep only tokens in the allowed scripts, one output line per input line.
    FilterText(FilterArgs),
    /// Accumulate an importance matrix from JSONL activation rows.
    Imatrix(ImatrixArgs),
    /// Block-quantize a weight matrix.
    Quantize(QuantizeArgs),
    /// Train the classifier head on scored samples.
    TrainHead(TrainArgs),
    /// Reconstruction error of a quantized tensor.
    ReportQuant(ReportArgs),
}

/// Flags mirroring the pipeline config keys.
#[derive(Args)]
struct PipelineFlags {
    #[arg(long)]
    template: Option<PathBuf>,
    /// Comma separated script names, e.g. "Han,Tamil".
    #[arg(long)]
    script_filter: Option<String>,
    #[arg(long)]
    translator_lexicon: Option<PathBuf>,
    /// Toy model JSON, or builtin:zero.
    #[arg(long)]
    logit_source: Option<String>,
    #[arg(long)]
    head: Option<PathBuf>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    parallelism: Option<usize>,
}

impl PipelineFlags {
    fn into_config(self) -> PipelineConfig {
        PipelineConfig {
            template: self.template,
            script_filter: self.script_filter,
            translator_lexicon: self.translator_lexicon,
            logit_source: self.logit_source,
            head: self.head,
            threshold: self.threshold,
            parallelism: self.parallelism,
        }
    }
}

#[derive(Args)]
struct ScoreArgs {
    /// Sample JSONL; stdin when neither this nor --text is given.
    #[arg(long, conflicts_with = "text")]
    input: Option<PathBuf>,
    /// Score a single sample with this text.
    #[arg(long)]
    text: Option<String>,
    #[arg(long, default_value = "sample", requires = "text")]
    id: String,
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// Add per-sample wall time as "elapsed_ms".
    #[arg(long)]
    timing: bool,
    #[command(flatten)]
    pipeline: PipelineFlags,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    input: PathBuf,
    /// Report destination; stdout by default.
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// Also write the scored records here.
    #[arg(long)]
    scored: Option<PathBuf>,
    #[command(flatten)]
    pipeline: PipelineFlags,
}

#[derive(Args)]
struct FilterArgs {
    /// Text to filter; stdin lines when absent.
    text: Vec<String>,
    #[arg(long)]
    script_filter: Option<String>,
}

#[derive(Args)]
struct ImatrixArgs {
    /// JSONL, one array of activations per line; stdin when absent.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Existing importance files to merge into the result.
    #[arg(long)]
    merge: Vec<PathBuf>,
    #[arg(long, short)]
    output: PathBuf,
}

#[derive(Args)]
struct QuantizeArgs {
    /// Matrix JSON with "rows", "cols" and row-major "data".
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    imatrix: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    bits: u8,
    #[arg(long, default_value_t = 32)]
    block_size: usize,
    #[arg(long)]
    refine_iters: Option<usize>,
    #[arg(long, short)]
    output: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Scored JSONL with "features" and "label" on each line.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, short)]
    output: PathBuf,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    tensor: PathBuf,
    /// Column importance; uniform when absent.
    #[arg(long)]
    imatrix: Option<PathBuf>,
    #[arg(long, short)]
    output: Option<PathBuf>,
}

/// An error tagged with the exit code it should produce.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

type CliResult<T> = Result<T, Failure>;

trait Tag<T> {
    fn tag(self, code: u8) -> CliResult<T>;
}

impl<T, E: Into<anyhow::Error>> Tag<T> for Result<T, E> {
    fn tag(self, code: u8) -> CliResult<T> {
        self.map_err(|e| Failure { code, error: e.into() })
    }
}

fn pipeline_code(e: &PipelineError) -> u8 {
    match e {
        PipelineError::Config(_) => EXIT_USAGE,
        PipelineError::Data(_) | PipelineError::Metric(_) => EXIT_DATA,
        PipelineError::Stage { .. } | PipelineError::Pool(_) => EXIT_INTERNAL,
    }
}

fn quant_code(e: &QuantError) -> u8 {
    match e {
        QuantError::Bits(_) | QuantError::BlockSize { .. } => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        Failure {
            code: pipeline_code(&e),
            error: e.into(),
        }
    }
}

impl From<QuantError> for Failure {
    fn from(e: QuantError) -> Self {
        Failure {
            code: quant_code(&e),
            error: e.into(),
        }
    }
}

fn open(path: &Path) -> CliResult<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .with_context(|| format!("cannot open {}", path.display()))
        .tag(EXIT_DATA)
}

fn input_or_stdin(path: Option<&Path>) -> CliResult<Box<dyn BufRead>> {
    Ok(match path {
        Some(p) => Box::new(open(p)?),
        None => Box::new(BufReader::new(io::stdin())),
    })
}

fn output_or_stdout(path: Option<&Path>) -> CliResult<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(create(p)?),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .with_context(|| format!("cannot create {}", path.display()))
        .tag(EXIT_DATA)
}

fn resolve_pipeline(config: Option<&Path>, flags: PipelineFlags) -> CliResult<Pipeline> {
    let base = match config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("cannot read {}", path.display()))
                .tag(EXIT_USAGE)?;
            PipelineConfig::from_json(&text)?
        }
        None => PipelineConfig::default(),
    };
    Ok(base.overlay(flags.into_config()).resolve()?)
}

fn write_line<W: Write>(sink: &mut W, value: &impl serde::Serialize) -> CliResult<()> {
    serde_json::to_writer(&mut *sink, value).tag(EXIT_INTERNAL)?;
    sink.write_all(b"\n").tag(EXIT_DATA)
}

fn cmd_score(config: Option<&Path>, args: ScoreArgs) -> CliResult<()> {
    let pipeline = resolve_pipeline(config, args.pipeline)?;
    let samples = match args.text {
        Some(text) => vec![Sample::new(args.id, text)],
        None => ingest_samples(input_or_stdin(args.input.as_deref())?).map_err(PipelineError::from)?,
    };
    let scored = score_samples_timed(&samples, &pipeline)?;
    let mut sink = output_or_stdout(args.output.as_deref())?;
    for (s, elapsed) in &scored {
        let mut record = s.to_record();
        if args.timing {
            record["elapsed_ms"] = Value::from(elapsed.as_secs_f64() * 1e3);
        }
        write_line(&mut sink, &record)?;
    }
    sink.flush().tag(EXIT_DATA)
}

fn cmd_eval(config: Option<&Path>, args: EvalArgs) -> CliResult<()> {
    let pipeline = resolve_pipeline(config, args.pipeline)?;
    let samples = ingest_samples(open(&args.input)?).map_err(PipelineError::from)?;
    let scored: Vec<_> = score_samples_timed(&samples, &pipeline)?
        .into_iter()
        .map(|(s, _)| s)
        .collect();
    if let Some(path) = &args.scored {
        let mut sink = create(path)?;
        for s in &scored {
            write_line(&mut sink, &s.to_record())?;
        }
        sink.flush().tag(EXIT_DATA)?;
    }
    let report = evaluate(&scored, pipeline.threshold())?;
    write_report(&report, output_or_stdout(args.output.as_deref())?).map_err(PipelineError::from)?;
    Ok(())
}

fn cmd_filter(config: Option<&Path>, args: FilterArgs) -> CliResult<()> {
    // only the script_filter key of a config file applies here
    let names = match (args.script_filter, config) {
        (Some(n), _) => Some(n),
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("cannot read {}", path.display()))
                .tag(EXIT_USAGE)?;
            PipelineConfig::from_json(&text)?.script_filter
        }
        (None, None) => None,
    };
    let filter = match names {
        Some(n) => ScriptFilterConfig::from_names(&n).tag(EXIT_USAGE)?,
        None => ScriptFilterConfig::default(),
    };
    let mut out = BufWriter::new(io::stdout().lock());
    let mut emit = |line: &str| writeln!(out, "{}", filter_script_text(line, &filter)).tag(EXIT_DATA);
    if args.text.is_empty() {
        for line in io::stdin().lock().lines() {
            emit(&line.tag(EXIT_DATA)?)?;
        }
    } else {
        for t in &args.text {
            emit(t)?;
        }
    }
    out.flush().tag(EXIT_DATA)
}

fn cmd_imatrix(args: ImatrixArgs) -> CliResult<()> {
    let mut imx: Option<ImportanceMatrix> = None;
    for (i, line) in input_or_stdin(args.input.as_deref())?.lines().enumerate() {
        let line = line.tag(EXIT_DATA)?;
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = serde_json::from_str(&line)
            .with_context(|| format!("line {}: expected an array of numbers", i + 1))
            .tag(EXIT_DATA)?;
        let m = imx.get_or_insert_with(|| ImportanceMatrix::new(row.len()));
        m.accumulate(&row)
            .with_context(|| format!("line {}", i + 1))
            .tag(EXIT_DATA)?;
    }
    for path in &args.merge {
        let other = read_importance(open(path)?)?;
        match &mut imx {
            Some(m) => m.merge(&other)?,
            None => imx = Some(other),
        }
    }
    let imx = imx
        .ok_or_else(|| anyhow!("no activation rows and nothing to merge"))
        .tag(EXIT_DATA)?;
    let mut sink = create(&args.output)?;
    write_importance(&imx, &mut sink)?;
    sink.flush().tag(EXIT_DATA)
}

fn read_matrix(path: &Path) -> CliResult<WeightMatrix> {
    let m: WeightMatrix = serde_json::from_reader(open(path)?)
        .with_context(|| format!("{}: bad matrix JSON", path.display()))
        .tag(EXIT_DATA)?;
    m.validate()?;
    Ok(m)
}

fn cmd_quantize(args: QuantizeArgs) -> CliResult<()> {
    let mut qc = QuantConfig::new(args.bits, args.block_size)?;
    if let Some(n) = args.refine_iters {
        qc.refine_iters = n;
    }
    let weights = read_matrix(&args.weights)?;
    let imx = match &args.imatrix {
        Some(p) => Some(read_importance(open(p)?)?),
        None => None,
    };
    let tensor = quantize_tensor(&weights, imx.as_ref(), &qc)?;
    let mut sink = create(&args.output)?;
    write_tensor(&tensor, &mut sink)?;
    sink.flush().tag(EXIT_DATA)
}

fn read_training_rows(path: &Path) -> CliResult<(Vec<[f64; N_FEATURES]>, Vec<u8>)> {
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.tag(EXIT_DATA)?;
        if line.trim().is_empty() {
            continue;
        }
        #[derive(serde::Deserialize)]
        struct Row {
            features: [f64; N_FEATURES],
            label: Option<u8>,
        }
        let row: Row = serde_json::from_str(&line)
            .with_context(|| format!("{}: line {}", path.display(), i + 1))
            .tag(EXIT_DATA)?;
        // unlabeled rows cannot train anything
        if let Some(l) = row.label {
            features.push(row.features);
            labels.push(l);
        }
    }
    Ok((features, labels))
}

fn cmd_train(args: TrainArgs) -> CliResult<()> {
    let defaults = TrainConfig::default();
    let tc = TrainConfig {
        hidden_width: args.hidden.unwrap_or(defaults.hidden_width),
        learning_rate: args.learning_rate.unwrap_or(defaults.learning_rate),
        epochs: args.epochs.unwrap_or(defaults.epochs),
        seed: args.seed.unwrap_or(defaults.seed),
    };
    let (features, labels) = read_training_rows(&args.input)?;
    let trained = train_head(&features, &labels, &tc).map_err(|e| {
        use digitgate::features::FeatureError as F;
        let code = match e {
            F::Config(_) => EXIT_USAGE,
            F::NonFiniteLoss(_) => EXIT_INTERNAL,
            _ => EXIT_DATA,
        };
        Failure { code, error: e.into() }
    })?;
    let json = trained.head.to_json().tag(EXIT_INTERNAL)?;
    let mut sink = create(&args.output)?;
    sink.write_all(json.as_bytes()).tag(EXIT_DATA)?;
    sink.write_all(b"\n").tag(EXIT_DATA)?;
    sink.flush().tag(EXIT_DATA)?;
    eprintln!(
        "trained on {} samples: loss {} -> {}",
        labels.len(),
        trained.initial_loss,
        trained.final_loss
    );
    Ok(())
}

fn cmd_report(args: ReportArgs) -> CliResult<()> {
    let weights = read_matrix(&args.weights)?;
    let mut bytes = Vec::new();
    open(&args.tensor)?.read_to_end(&mut bytes).tag(EXIT_DATA)?;
    let tensor = read_tensor(bytes.as_slice())?;
    let imx = match &args.imatrix {
        Some(p) => read_importance(open(p)?)?,
        None => ImportanceMatrix::new(weights.cols),
    };
    let report = quantization_report(&weights, &tensor, &imx)?;
    let mut sink = output_or_stdout(args.output.as_deref())?;
    write_line(&mut sink, &report)?;
    sink.flush().tag(EXIT_DATA)
}

fn run(cli: Cli) -> CliResult<()> {
    let config = cli.config.as_deref();
    match cli.command {
        Command::Score(a) => cmd_score(config, a),
        Command::Eval(a) => cmd_eval(config, a),
        Command::FilterText(a) => cmd_filter(config, a),
        Command::Imatrix(a) => cmd_imatrix(a),
        Command::Quantize(a) => cmd_quantize(a),
        Command::TrainHead(a) => cmd_train(a),
        Command::ReportQuant(a) => cmd_report(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
