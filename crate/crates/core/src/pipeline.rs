//! The full desk run: base pre-training on text, injection, stage 1 and
//! stage 2 on the synthetic QA task. Every step draws from its own seeded
//! stream, so running the steps one by one (as the CLI does) reproduces the
//! in-process pipeline exactly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::checkpoint;
use crate::data::{generate_dataset, generate_text_corpus, DataError, Split, SyntheticSample, Vocabulary};
use crate::eval::{corpus_loss, evaluate, EvalError, Metrics};
use crate::model::{ModelError, PillModel};
use crate::runconfig::RunConfig;
use crate::training::{run_stage, StageData, TrainError, TrainingReport};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    BaseInit = 1,
    BaseTrain = 2,
    InjectionInit = 3,
    Stage1 = 4,
    Stage2 = 5,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

pub fn dataset_seed(seed: u64) -> u64 {
    seed
}

pub fn corpus_seed(seed: u64) -> u64 {
    seed.wrapping_add(1)
}

pub fn corpus_eval_seed(seed: u64) -> u64 {
    seed.wrapping_add(2)
}

pub fn split(samples: &[SyntheticSample], which: Split) -> Vec<SyntheticSample> {
    samples.iter().filter(|s| s.split == which).cloned().collect()
}

/// Trains a fresh base transformer on `corpus`; `eval` is a held-out corpus
/// whose mean token loss is recorded as `eval_loss`.
pub fn pretrain_base(cfg: &RunConfig, corpus: &[Vec<usize>], eval: &[Vec<usize>]) -> Result<(PillModel<f64>, TrainingReport)> {
    let mut model = PillModel::new_base(cfg.model, &mut stream_rng(cfg.seed, Stream::BaseInit))?;
    let mut report = run_stage(
        &mut model,
        StageData::Corpus(corpus),
        &cfg.base,
        &mut stream_rng(cfg.seed, Stream::BaseTrain),
    )?;
    if !eval.is_empty() {
        report.summary.metrics.insert("eval_loss".into(), corpus_loss(&model, eval)?);
    }
    Ok((model, report))
}

/// Adds zero-initialised injections to a base model; a no-op when present.
pub fn inject(model: &mut PillModel<f64>, seed: u64) -> Result<()> {
    if !model.has_injections() {
        model.attach_injections(&mut stream_rng(seed, Stream::InjectionInit))?;
    }
    Ok(())
}

/// Runs stage 1 or 2 on the train split, scoring the test split afterwards.
pub fn run_qa_stage(
    model: &mut PillModel<f64>,
    cfg: &RunConfig,
    stage: Stream,
    samples: &[SyntheticSample],
    vocab: &Vocabulary,
) -> Result<TrainingReport> {
    let spec = match stage {
        Stream::Stage1 => &cfg.stage1,
        Stream::Stage2 => &cfg.stage2,
        other => panic!("{other:?} is not a QA stage"),
    };
    let train = split(samples, Split::Train);
    let test = split(samples, Split::Test);
    let mut report = run_stage(
        model,
        StageData::Qa { samples: &train, vocab },
        spec,
        &mut stream_rng(cfg.seed, stage),
    )?;
    if !test.is_empty() {
        report.summary.metrics = evaluate(model, &test, vocab)?.to_map("test_");
    }
    Ok(report)
}

pub struct PipelineOutcome {
    pub base_report: TrainingReport,
    pub stage1_report: TrainingReport,
    pub stage2_report: TrainingReport,
    /// Test-split metrics of the freshly injected model.
    pub init_metrics: Metrics,
    /// Test-split metrics after stage 2.
    pub final_metrics: Metrics,
    /// Encoded checkpoints named `base`, `init`, `stage1`, `stage2`.
    pub checkpoints: Vec<(&'static str, Vec<u8>)>,
    pub model: PillModel<f64>,
}

pub fn run_pipeline(cfg: &RunConfig) -> Result<PipelineOutcome> {
    let vocab = Vocabulary::standard();
    let corpus = generate_text_corpus(cfg.corpus_size, corpus_seed(cfg.seed), &vocab)?;
    let corpus_eval = generate_text_corpus(cfg.corpus_eval_size, corpus_eval_seed(cfg.seed), &vocab)?;
    let samples = generate_dataset(cfg.samples, dataset_seed(cfg.seed), &cfg.data)?;
    let test = split(&samples, Split::Test);

    let (mut model, base_report) = pretrain_base(cfg, &corpus, &corpus_eval)?;
    let mut checkpoints = vec![("base", checkpoint::encode(&model))];
    inject(&mut model, cfg.seed)?;
    checkpoints.push(("init", checkpoint::encode(&model)));
    let init_metrics = evaluate(&model, &test, &vocab)?;
    let stage1_report = run_qa_stage(&mut model, cfg, Stream::Stage1, &samples, &vocab)?;
    checkpoints.push(("stage1", checkpoint::encode(&model)));
    let stage2_report = run_qa_stage(&mut model, cfg, Stream::Stage2, &samples, &vocab)?;
    checkpoints.push(("stage2", checkpoint::encode(&model)));
    let final_metrics = evaluate(&model, &test, &vocab)?;
    Ok(PipelineOutcome {
        base_report,
        stage1_report,
        stage2_report,
        init_metrics,
        final_metrics,
        checkpoints,
        model,
    })
}
