//! Stage-wise optimisation of the injected modules.
//!
//! Stage 1 aligns the visual path (`a_v` and the projection); stage 2
//! unfreezes every injected group. The base transformer is trained only by
//! the separate [`StageKind::Base`] pre-training run and is frozen in both
//! stages.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{corpus_sequence, encode_sample, DataError, SyntheticSample, Vocabulary};
use crate::graph::{Graph, Var};
use crate::model::{model_forward, ModelError, PillModel};
use crate::params::{Group, Param, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::sequence::{Batch, SequenceError, TokenSequence};
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },
    #[error("missing gradient for trainable parameter {0}")]
    MissingGrad(String),
    #[error("gradient supplied for frozen parameter {0}")]
    UnexpectedGrad(String),
    #[error("total_steps must be positive")]
    ZeroSteps,
    #[error("step {step} outside 0..={total}")]
    StepOutOfRange { step: usize, total: usize },
    #[error("invalid stage spec: {0}")]
    Spec(String),
    #[error("empty training set")]
    EmptyDataset,
    #[error("sequence of {len} positions exceeds the stage input length {max}")]
    TooLong { len: usize, max: usize },
    #[error("stage needs injected modules; attach them first")]
    NotInjected,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Sequence(#[from] SequenceError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StageKind {
    /// Full training of the base transformer on text.
    Base,
    /// Modality alignment.
    Stage1,
    /// Downstream fine-tuning of every injected module.
    Stage2,
}

impl StageKind {
    pub fn required_groups(self) -> BTreeSet<Group> {
        match self {
            StageKind::Base => BTreeSet::new(),
            StageKind::Stage1 => [Group::VisionAdapter, Group::Projection].into(),
            StageKind::Stage2 => Group::ALL.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStageSpec {
    pub kind: StageKind,
    pub trainable_groups: BTreeSet<Group>,
    pub epochs: usize,
    pub base_lr: f64,
    /// Longest accepted input sequence.
    pub seq_len: usize,
    pub batch_size: usize,
    pub wrong_answer_prob: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Keeps the last layer's vision adapter out of the trainable set.
    pub freeze_last_vision_adapter: bool,
}

impl TrainStageSpec {
    fn with_defaults(kind: StageKind, epochs: usize, base_lr: f64, seq_len: usize, batch_size: usize) -> Self {
        Self {
            kind,
            trainable_groups: kind.required_groups(),
            epochs,
            base_lr,
            seq_len,
            batch_size,
            wrong_answer_prob: 0.0,
            warmup_frac: 0.03,
            weight_decay: 0.01,
            clip_norm: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            freeze_last_vision_adapter: kind == StageKind::Stage1,
        }
    }

    pub fn base_desk() -> Self {
        Self::with_defaults(StageKind::Base, 4, 3e-3, 32, 16)
    }

    pub fn stage1_desk() -> Self {
        Self::with_defaults(StageKind::Stage1, 3, 1e-3, 16, 16)
    }

    pub fn stage2_desk() -> Self {
        Self::with_defaults(StageKind::Stage2, 20, 2e-3, 16, 16)
    }

    /// Stage 1 schedule at 7B scale.
    pub fn stage1_full() -> Self {
        Self::with_defaults(StageKind::Stage1, 3, 1e-3, 128, 32)
    }

    /// Stage 2 schedule at 7B scale.
    pub fn stage2_full() -> Self {
        Self::with_defaults(StageKind::Stage2, 20, 2e-3, 512, 4)
    }

    pub fn empty(kind: StageKind) -> Self {
        Self {
            trainable_groups: BTreeSet::new(),
            ..Self::with_defaults(kind, 0, 0.0, usize::MAX, 1)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(TrainError::Spec(m.to_string()));
        if self.batch_size == 0 {
            return err("batch_size must be positive");
        }
        if !(0.0..=1.0).contains(&self.wrong_answer_prob) {
            return err("wrong_answer_prob must be in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return err("warmup_frac must be in [0, 1)");
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return err("base_lr must be finite and non-negative");
        }
        if self.kind != StageKind::Base && self.epochs > 0 && self.trainable_groups != self.kind.required_groups() {
            return Err(TrainError::Spec(format!(
                "{:?} trains {:?}, not {:?}",
                self.kind,
                self.kind.required_groups(),
                self.trainable_groups
            )));
        }
        Ok(())
    }

    /// Whether `p` receives updates in this stage.
    pub fn trains<T: Scalar>(&self, p: &Param<T>, n_layers: usize) -> bool {
        match (self.kind, p.group()) {
            (StageKind::Base, None) => true,
            (StageKind::Base, Some(_)) | (_, None) => false,
            (_, Some(g)) => {
                let last_vision = g == Group::VisionAdapter && p.layer == Some(n_layers - 1);
                self.trainable_groups.contains(&g) && !(self.freeze_last_vision_adapter && last_vision)
            }
        }
    }
}

/// Number of scalars that `spec` trains.
pub fn count_trainable<T: Scalar>(model: &PillModel<T>, spec: &TrainStageSpec) -> usize {
    let n_layers = model.config().n_layers;
    model
        .store()
        .iter()
        .filter(|(_, p)| spec.trains(p, n_layers))
        .map(|(_, p)| p.value.numel())
        .sum()
}

/// Mean next-token negative log-likelihood over supervised positions.
pub fn autoregressive_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, batch: &Batch<T>) -> Result<Var> {
    Ok(g.cross_entropy(logits, &batch.targets, &batch.target_mask)?)
}

/// With probability `p`, swaps the supervised answer for a uniformly drawn
/// different option.
pub fn wrong_answer_augment(sample: &SyntheticSample, p: f64, rng: &mut impl Rng) -> Result<SyntheticSample, DataError> {
    let mut out = sample.clone();
    if rng.random::<f64>() < p {
        let others: Vec<&String> = sample.options.iter().filter(|o| **o != sample.answer).collect();
        if others.is_empty() {
            return Err(DataError::SingleOption);
        }
        out.answer = others[rng.random_range(0..others.len())].clone();
    }
    Ok(out)
}

pub fn warmup_steps(total_steps: usize, warmup_frac: f64) -> usize {
    ((total_steps as f64 * warmup_frac).round() as usize).min(total_steps.saturating_sub(1))
}

/// Linear warmup to `base_lr`, then half-cosine decay to zero at
/// `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64, warmup: usize) -> Result<f64> {
    if total_steps == 0 {
        return Err(TrainError::ZeroSteps);
    }
    if step > total_steps {
        return Err(TrainError::StepOutOfRange { step, total: total_steps });
    }
    if step < warmup {
        return Ok(base_lr * (step + 1) as f64 / (warmup + 1) as f64);
    }
    let span = total_steps.saturating_sub(warmup).max(1);
    let progress = (step - warmup) as f64 / span as f64;
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T> {
    pub first: Vec<T>,
    pub second: Vec<T>,
}

/// AdamW state for the trainable parameters of one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub moments: BTreeMap<ParamId, Moments<T>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(model: &PillModel<T>, spec: &TrainStageSpec) -> Self {
        let n_layers = model.config().n_layers;
        let moments = model
            .store()
            .iter()
            .filter(|(_, p)| spec.trains(p, n_layers))
            .map(|(id, p)| {
                let n = p.value.numel();
                (
                    id,
                    Moments {
                        first: vec![T::zero(); n],
                        second: vec![T::zero(); n],
                    },
                )
            })
            .collect();
        Self {
            moments,
            step: 0,
            beta1: spec.beta1,
            beta2: spec.beta2,
            eps: spec.eps,
            weight_decay: spec.weight_decay,
        }
    }
}

/// One decoupled-weight-decay Adam update with bias correction. `grads`
/// must hold exactly the parameters tracked by `state`.
pub fn adamw_step<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &BTreeMap<ParamId, Vec<T>>,
    state: &mut OptimizerState<T>,
    lr: f64,
) -> Result<()> {
    for id in grads.keys() {
        if !state.moments.contains_key(id) {
            return Err(TrainError::UnexpectedGrad(store.get(*id).name.clone()));
        }
    }
    for id in state.moments.keys() {
        if !grads.contains_key(id) {
            return Err(TrainError::MissingGrad(store.get(*id).name.clone()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(state.beta1), T::lit(state.beta2));
    let c1 = T::one() - T::lit(state.beta1.powi(t));
    let c2 = T::one() - T::lit(state.beta2.powi(t));
    let (lr, eps) = (T::lit(lr), T::lit(state.eps));
    let wd = T::lit(state.weight_decay);
    for (id, m) in state.moments.iter_mut() {
        let g = &grads[id];
        let p = store.get_mut(*id);
        let decay = p.decays();
        for (((w, &gi), m1), m2) in p.value.data_mut().iter_mut().zip(g).zip(&mut m.first).zip(&mut m.second) {
            if decay {
                *w -= lr * wd * *w;
            }
            *m1 = b1 * *m1 + (T::one() - b1) * gi;
            *m2 = b2 * *m2 + (T::one() - b2) * gi * gi;
            let mhat = *m1 / c1;
            let vhat = *m2 / c2;
            *w -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

pub fn global_norm<T: Scalar>(grads: &BTreeMap<ParamId, Vec<T>>) -> f64 {
    grads
        .values()
        .flat_map(|g| g.iter())
        .map(|x| {
            let v = x.to_f64_lossy();
            v * v
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut BTreeMap<ParamId, Vec<T>>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && max_norm > 0.0 {
        let s = T::lit(max_norm / norm);
        grads.values_mut().flat_map(|g| g.iter_mut()).for_each(|x| *x *= s);
    }
    norm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ReportSummary {
    pub stage: Option<StageKind>,
    pub steps: usize,
    pub trainable_params: usize,
    pub total_params: usize,
    /// Mean loss over the last tenth of the steps.
    pub final_loss: Option<f64>,
    pub metrics: BTreeMap<String, f64>,
    pub wall_time_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingReport {
    pub records: Vec<StepRecord>,
    pub summary: ReportSummary,
}

impl TrainingReport {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    /// One JSON object per step, then a final `{"summary": ...}` line.
    pub fn write_jsonl(&self, mut out: impl Write) -> std::io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        serde_json::to_writer(&mut out, &serde_json::json!({ "summary": self.summary }))?;
        out.write_all(b"\n")
    }
}

/// What a stage trains on.
pub enum StageData<'a> {
    /// Token-id sentences wrapped in `BOS .. EOS`.
    Corpus(&'a [Vec<usize>]),
    Qa {
        samples: &'a [SyntheticSample],
        vocab: &'a Vocabulary,
    },
}

impl StageData<'_> {
    fn len(&self) -> usize {
        match self {
            StageData::Corpus(c) => c.len(),
            StageData::Qa { samples, .. } => samples.len(),
        }
    }
}

fn tail_mean(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let n = (xs.len() / 10).max(1);
    let tail = &xs[xs.len() - n..];
    Some(tail.iter().sum::<f64>() / n as f64)
}

/// Loss and gradients of one batch. Trainable parameters the graph does not
/// reach get explicit zero gradients.
pub fn batch_gradients<T: Scalar>(
    model: &PillModel<T>,
    spec: &TrainStageSpec,
    seqs: &[&TokenSequence],
) -> Result<(f64, BTreeMap<ParamId, Vec<T>>)> {
    let n_layers = model.config().n_layers;
    let mut g = Graph::new();
    let binding = model.bind(&mut g, |p| spec.trains(p, n_layers))?;
    let batch = Batch::new(seqs);
    let pass = model_forward(&mut g, &binding.params, &batch, model.config())?;
    let loss = autoregressive_loss(&mut g, pass.logits, &batch)?;
    g.backward(loss)?;
    let mut grads = BTreeMap::new();
    for (id, p) in model.store().iter() {
        if spec.trains(p, n_layers) {
            let grad = g
                .grad(binding.var(id))
                .map_or_else(|| vec![T::zero(); p.value.numel()], <[T]>::to_vec);
            grads.insert(id, grad);
        }
    }
    Ok((g.value(loss).item().to_f64_lossy(), grads))
}

/// Runs `spec.epochs` passes over `data` in shuffled mini-batches
/// (`ceil(N / batch_size)` steps per epoch).
pub fn run_stage<T: Scalar>(
    model: &mut PillModel<T>,
    data: StageData<'_>,
    spec: &TrainStageSpec,
    rng: &mut impl Rng,
) -> Result<TrainingReport> {
    spec.validate()?;
    if spec.kind != StageKind::Base && !model.has_injections() {
        return Err(TrainError::NotInjected);
    }
    let n = data.len();
    if n == 0 {
        return Err(TrainError::EmptyDataset);
    }
    let started = Instant::now();
    let mut encoded: Vec<TokenSequence> = match &data {
        StageData::Corpus(c) => c.iter().map(|ids| corpus_sequence(ids)).collect::<Result<_, _>>()?,
        StageData::Qa { samples, vocab } => samples
            .iter()
            .map(|s| encode_sample(s, vocab, model.config()))
            .collect::<Result<_, _>>()?,
    };
    if let Some(s) = encoded.iter().find(|s| s.len() > spec.seq_len) {
        return Err(TrainError::TooLong { len: s.len(), max: spec.seq_len });
    }
    let steps_per_epoch = n.div_ceil(spec.batch_size);
    let total = spec.epochs * steps_per_epoch;
    let warmup = warmup_steps(total, spec.warmup_frac);
    let mut state = OptimizerState::new(model, spec);
    let mut report = TrainingReport::default();
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;
    for epoch in 0..spec.epochs {
        order.shuffle(rng);
        if spec.wrong_answer_prob > 0.0 {
            if let StageData::Qa { samples, vocab } = &data {
                for (i, s) in samples.iter().enumerate() {
                    let aug = wrong_answer_augment(s, spec.wrong_answer_prob, rng)?;
                    encoded[i] = encode_sample(&aug, vocab, model.config())?;
                }
            }
        }
        for chunk in order.chunks(spec.batch_size) {
            let seqs: Vec<&TokenSequence> = chunk.iter().map(|&i| &encoded[i]).collect();
            let (loss, mut grads) = batch_gradients(model, spec, &seqs).map_err(|e| match e {
                TrainError::Tensor(t @ TensorError::NonFinite { .. }) | TrainError::Model(ModelError::Tensor(t @ TensorError::NonFinite { .. })) => {
                    TrainError::NonFiniteLoss { step, detail: t.to_string() }
                }
                other => other,
            })?;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    step,
                    detail: format!("loss = {loss}"),
                });
            }
            let grad_norm = clip_global_norm(&mut grads, spec.clip_norm);
            let lr = cosine_lr(step, total, spec.base_lr, warmup)?;
            adamw_step(model.store_mut(), &grads, &mut state, lr)?;
            report.records.push(StepRecord {
                step,
                epoch,
                lr,
                loss,
                grad_norm,
            });
            step += 1;
        }
    }
    report.summary = ReportSummary {
        stage: Some(spec.kind),
        steps: step,
        trainable_params: count_trainable(model, spec),
        total_params: model.store().total_scalars(),
        final_loss: tail_mean(&report.losses()),
        metrics: BTreeMap::new(),
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, DataConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cosine_lr_examples() {
        let (total, warm, base) = (100, 10, 2e-3);
        assert_eq!(cosine_lr(warm, total, base, warm).unwrap(), base);
        assert_eq!(cosine_lr(total, total, base, warm).unwrap(), 0.0);
        let mid = warm + (total - warm) / 2;
        assert!((cosine_lr(mid, total, base, warm).unwrap() - base / 2.0).abs() < 1e-12);
        assert!(cosine_lr(0, total, base, warm).unwrap() < base);
        assert!(matches!(cosine_lr(0, 0, base, 0), Err(TrainError::ZeroSteps)));
        assert!(cosine_lr(101, total, base, warm).is_err());
    }

    #[test]
    fn warmup_is_three_percent() {
        assert_eq!(warmup_steps(1000, 0.03), 30);
        assert_eq!(warmup_steps(1, 0.03), 0);
    }

    #[test]
    fn augmentation_extremes() {
        let sample = generate_dataset(1, 0, &DataConfig::default()).unwrap().remove(0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            assert_eq!(wrong_answer_augment(&sample, 0.0, &mut rng).unwrap(), sample);
            let flipped = wrong_answer_augment(&sample, 1.0, &mut rng).unwrap();
            assert_ne!(flipped.answer, sample.answer);
            assert!(sample.options.contains(&flipped.answer));
        }
        let mut single = sample.clone();
        single.options = vec![single.answer.clone()];
        assert!(matches!(wrong_answer_augment(&single, 1.0, &mut rng), Err(DataError::SingleOption)));
        assert_eq!(wrong_answer_augment(&single, 0.0, &mut rng).unwrap(), single);
    }

    fn single_param_store(value: f64) -> (ParamStore<f64>, ParamId) {
        let mut store = ParamStore::new();
        let id = store.insert(
            "layers.0.gate.bias",
            crate::tensor::Tensor::new(vec![1], vec![value]).unwrap(),
            crate::params::Role::Injected(Group::Gate),
            Some(0),
        );
        (store, id)
    }

    fn state_for(id: ParamId, wd: f64) -> OptimizerState<f64> {
        OptimizerState {
            moments: [(id, Moments { first: vec![0.0], second: vec![0.0] })].into(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: wd,
        }
    }

    #[test]
    fn adamw_zero_grad_leaves_param() {
        let (mut store, id) = single_param_store(0.75);
        let mut state = state_for(id, 0.0);
        adamw_step(&mut store, &[(id, vec![0.0])].into(), &mut state, 1e-2).unwrap();
        assert_eq!(store.get(id).value.data(), &[0.75]);
    }

    #[test]
    fn adamw_first_step_is_normalised_gradient() {
        // after bias correction mhat = g and vhat = g^2, so the step is
        // lr * g / (|g| + eps)
        for g in [0.3, -2.0, 1e-3] {
            let (mut store, id) = single_param_store(1.0);
            let mut state = state_for(id, 0.0);
            adamw_step(&mut store, &[(id, vec![g])].into(), &mut state, 0.1).unwrap();
            let expected = 1.0 - 0.1 * g / (f64::abs(g) + 1e-8);
            assert!((store.get(id).value.data()[0] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn adamw_grad_set_must_match_state() {
        let (mut store, id) = single_param_store(1.0);
        let mut state = state_for(id, 0.0);
        let err = adamw_step(&mut store, &BTreeMap::new(), &mut state, 0.1).unwrap_err();
        assert!(matches!(err, TrainError::MissingGrad(n) if n == "layers.0.gate.bias"));
        state.moments.clear();
        let err = adamw_step(&mut store, &[(id, vec![1.0])].into(), &mut state, 0.1).unwrap_err();
        assert!(matches!(err, TrainError::UnexpectedGrad(_)));
    }

    #[test]
    fn clipping_rescales_to_max_norm() {
        let mut grads: BTreeMap<ParamId, Vec<f64>> = [(ParamId(0), vec![3.0]), (ParamId(1), vec![4.0])].into();
        assert_eq!(clip_global_norm(&mut grads, 1.0), 5.0);
        assert!((global_norm(&grads) - 1.0).abs() < 1e-12);
        assert_eq!(clip_global_norm(&mut grads, 2.0), global_norm(&grads));
    }

    #[test]
    fn stage_specs_hold_their_groups() {
        assert_eq!(TrainStageSpec::stage1_desk().trainable_groups, [Group::VisionAdapter, Group::Projection].into());
        assert_eq!(TrainStageSpec::stage2_desk().trainable_groups.len(), 5);
        let mut bad = TrainStageSpec::stage1_desk();
        bad.trainable_groups.insert(Group::Gate);
        assert!(bad.validate().is_err());
        let p2 = TrainStageSpec::stage2_full();
        assert_eq!((p2.epochs, p2.base_lr, p2.seq_len, p2.batch_size), (20, 2e-3, 512, 4));
        let p1 = TrainStageSpec::stage1_full();
        assert_eq!((p1.epochs, p1.base_lr, p1.seq_len, p1.batch_size), (3, 1e-3, 128, 32));
    }
}
