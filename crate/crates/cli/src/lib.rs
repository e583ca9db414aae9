//! File-driven commands: data generation, base pre-training, the two
//! adapter stages, evaluation and gate reports.

use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};
use pill::checkpoint::{self, content_hash, CheckpointError};
use pill::data::{self, DataError, Split, SyntheticSample, Vocabulary};
use pill::eval::{self, EvalError};
use pill::pipeline::{self, PipelineError, Stream};
use pill::runconfig::{RunConfig, RunConfigError};
use pill::training::{TrainError, TrainingReport};
use pill::PillModel;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Parser)]
#[command(name = "pill", version, about = "Adapter experts and attention gates on a frozen transformer")]
pub struct Cli {
    /// Flat `key = value` run configuration; desk defaults otherwise.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Overrides one configuration key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Writes the synthetic QA dataset as JSON lines.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Writes the text corpus for base pre-training.
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains the base transformer on a text corpus.
    BasePretrain {
        /// Corpus file.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Modality alignment: trains the vision adapters and the projection.
    Stage1 {
        /// Base checkpoint.
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tunes every injected module.
    Stage2 {
        /// Stage 1 checkpoint.
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Exact-match accuracy, overall and per attribute, as JSON.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Writes the metrics here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-layer mean absolute gate on a probe set, as CSV.
    GateReport {
        #[arg(long)]
        ckpt: PathBuf,
        /// Probe samples.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] RunConfigError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl CliError {
    /// 1 for an aborted (non-finite) training run, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Pipeline(PipelineError::Train(TrainError::NonFiniteLoss { .. })) => 1,
            _ => 2,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    /// SHA-256 of `"blob <len>\0" + content`.
    pub hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: String,
    pub seed: u64,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub created_unix: u64,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(io_err(path))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(io_err(path))
}

fn artifact(path: &Path, bytes: &[u8]) -> Artifact {
    Artifact {
        path: path.display().to_string(),
        hash: content_hash(bytes),
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn manifest_path(out: &Path) -> PathBuf {
    sibling(out, ".manifest.json")
}

pub fn report_path(out: &Path) -> PathBuf {
    sibling(out, ".report.jsonl")
}

/// Resolves the run configuration: desk defaults, then the config file,
/// then `--set`, then `--seed`.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::desk();
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        cfg.apply_text(&text)?;
    }
    for o in &cli.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{o}`")))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

struct Run<'a> {
    name: &'static str,
    cfg: &'a RunConfig,
    inputs: Vec<Artifact>,
    outputs: Vec<Artifact>,
}

impl<'a> Run<'a> {
    fn new(name: &'static str, cfg: &'a RunConfig) -> Self {
        Self {
            name,
            cfg,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    fn input(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = read_bytes(path)?;
        self.inputs.push(artifact(path, &bytes));
        Ok(bytes)
    }

    fn output(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        write_bytes(path, bytes)?;
        self.outputs.push(artifact(path, bytes));
        Ok(())
    }

    /// Writes `<primary>.manifest.json` listing every input and output.
    fn finish(self, primary: &Path) -> Result<RunManifest> {
        let manifest = RunManifest {
            command: self.name.to_string(),
            config: self.cfg.to_text(),
            seed: self.cfg.seed,
            inputs: self.inputs,
            outputs: self.outputs,
            created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        };
        let path = manifest_path(primary);
        let json = serde_json::to_vec_pretty(&manifest).expect("manifest serialises");
        write_bytes(&path, &json)?;
        Ok(manifest)
    }
}

fn parse_samples(bytes: &[u8]) -> Result<Vec<SyntheticSample>> {
    Ok(data::read_dataset(bytes)?)
}

fn load_model(run: &mut Run, path: &Path) -> Result<PillModel> {
    let bytes = run.input(path)?;
    Ok(checkpoint::decode(&bytes)?)
}

fn report_bytes(report: &TrainingReport) -> Vec<u8> {
    let mut buf = Vec::new();
    report.write_jsonl(&mut buf).expect("writing to memory");
    buf
}

fn summarize(name: &str, report: &TrainingReport) {
    let s = &report.summary;
    let mut line = format!("{name}: {} steps in {:.1}s", s.steps, s.wall_time_secs);
    if let Some(l) = s.final_loss {
        line.push_str(&format!(", final loss {l:.4}"));
    }
    for (k, v) in &s.metrics {
        line.push_str(&format!(", {k} {v:.4}"));
    }
    eprintln!("{line}");
}

fn train_qa(cfg: &RunConfig, stage: Stream, ckpt: &Path, data_path: &Path, out: &Path) -> Result<()> {
    let name = if stage == Stream::Stage1 { "stage1" } else { "stage2" };
    let mut run = Run::new(name, cfg);
    let mut model = load_model(&mut run, ckpt)?;
    let samples = parse_samples(&run.input(data_path)?)?;
    if stage == Stream::Stage2 && !model.has_injections() {
        return Err(CliError::Usage(format!(
            "{}: stage2 expects a stage1 checkpoint with injected modules",
            ckpt.display()
        )));
    }
    pipeline::inject(&mut model, cfg.seed)?;
    let vocab = Vocabulary::standard();
    let report = pipeline::run_qa_stage(&mut model, cfg, stage, &samples, &vocab)?;
    summarize(name, &report);
    run.output(out, &checkpoint::encode(&model))?;
    run.output(&report_path(out), &report_bytes(&report))?;
    run.finish(out)?;
    Ok(())
}

fn select(samples: Vec<SyntheticSample>, split: SplitArg) -> Vec<SyntheticSample> {
    match split {
        SplitArg::All => samples,
        SplitArg::Train => pipeline::split(&samples, Split::Train),
        SplitArg::Test => pipeline::split(&samples, Split::Test),
    }
}

fn emit(run: &mut Run, out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(path) => run.output(path, bytes),
        None => std::io::stdout().write_all(bytes).map_err(io_err(Path::new("<stdout>"))),
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    // Single-threaded throughout; the variable is accepted for forward
    // compatibility and otherwise unused.
    let _threads = std::env::var_os("PILL_THREADS");
    let cfg = resolve_config(cli)?;
    let vocab = Vocabulary::standard();
    match &cli.command {
        Command::GenData { out } => {
            let mut run = Run::new("gen-data", &cfg);
            let samples = data::generate_dataset(cfg.samples, pipeline::dataset_seed(cfg.seed), &cfg.data)?;
            let mut buf = Vec::new();
            data::write_dataset(&samples, &mut buf)?;
            run.output(out, &buf)?;
            run.finish(out)?;
        }
        Command::GenCorpus { out } => {
            let mut run = Run::new("gen-corpus", &cfg);
            let corpus = data::generate_text_corpus(cfg.corpus_size, pipeline::corpus_seed(cfg.seed), &vocab)?;
            let mut buf = Vec::new();
            data::write_corpus(&corpus, &vocab, &mut buf)?;
            run.output(out, &buf)?;
            run.finish(out)?;
        }
        Command::BasePretrain { data: corpus_path, out } => {
            let mut run = Run::new("base-pretrain", &cfg);
            let corpus = data::read_corpus(run.input(corpus_path)?.as_slice(), &vocab)?;
            let eval = data::generate_text_corpus(cfg.corpus_eval_size, pipeline::corpus_eval_seed(cfg.seed), &vocab)?;
            let (model, report) = pipeline::pretrain_base(&cfg, &corpus, &eval)?;
            summarize("base-pretrain", &report);
            run.output(out, &checkpoint::encode(&model))?;
            run.output(&report_path(out), &report_bytes(&report))?;
            run.finish(out)?;
        }
        Command::Stage1 { ckpt, data, out } => train_qa(&cfg, Stream::Stage1, ckpt, data, out)?,
        Command::Stage2 { ckpt, data, out } => train_qa(&cfg, Stream::Stage2, ckpt, data, out)?,
        Command::Eval { ckpt, data, split, out } => {
            let mut run = Run::new("eval", &cfg);
            let model = load_model(&mut run, ckpt)?;
            let samples = select(parse_samples(&run.input(data)?)?, *split);
            let metrics = eval::evaluate(&model, &samples, &vocab)?;
            let mut json = serde_json::to_vec_pretty(&metrics).expect("metrics serialise");
            json.push(b'\n');
            emit(&mut run, out.as_deref(), &json)?;
            if let Some(out) = out {
                run.finish(out)?;
            }
        }
        Command::GateReport { ckpt, data, out } => {
            let mut run = Run::new("gate-report", &cfg);
            let model = load_model(&mut run, ckpt)?;
            let probe = parse_samples(&run.input(data)?)?;
            let rows = eval::gate_report(&model, &probe, &vocab)?;
            emit(&mut run, out.as_deref(), eval::gate_report_csv(&rows).as_bytes())?;
            if let Some(out) = out {
                run.finish(out)?;
            }
        }
    }
    Ok(())
}

/// Reads a manifest written next to `out`.
pub fn read_manifest(out: &Path) -> Result<RunManifest> {
    let path = manifest_path(out);
    let file = File::open(&path).map_err(io_err(&path))?;
    serde_json::from_reader(BufReader::new(file))
        .map_err(|e| CliError::Usage(format!("{}: malformed manifest: {e}", path.display())))
}
