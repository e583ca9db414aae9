//! Answer accuracy and gate inspection.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{corpus_sequence, encode_prompt, Attribute, DataError, SyntheticSample, Vocabulary};
use crate::model::{ModelError, PillModel};
use crate::scalar::Scalar;
use crate::sequence::{Batch, SequenceError, TokenSequence};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("evaluation set is empty")]
    Empty,
    #[error("gate report needs at least one sample with an image")]
    NoImages,
    #[error("model has no injected gates")]
    NoGates,
    #[error("{predictions} predictions for {samples} samples")]
    Length { predictions: usize, samples: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Sequence(#[from] SequenceError),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

const EVAL_BATCH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Tally {
    pub correct: usize,
    pub total: usize,
}

impl Tally {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub overall: Tally,
    pub per_attribute: BTreeMap<Attribute, Tally>,
    /// Expected accuracy of a uniform guess among each sample's options.
    pub chance: f64,
}

impl Metrics {
    pub fn accuracy(&self) -> f64 {
        self.overall.accuracy()
    }

    /// Flat `name -> value` view used in training summaries.
    pub fn to_map(&self, prefix: &str) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        m.insert(format!("{prefix}accuracy"), self.accuracy());
        m.insert(format!("{prefix}chance"), self.chance);
        for (a, t) in &self.per_attribute {
            m.insert(format!("{prefix}accuracy_{a}"), t.accuracy());
        }
        m
    }
}

/// Scores `predictions` against each sample's correct answer.
pub fn exact_match(samples: &[SyntheticSample], predictions: &[String]) -> Result<Metrics> {
    if samples.is_empty() {
        return Err(EvalError::Empty);
    }
    if samples.len() != predictions.len() {
        return Err(EvalError::Length {
            predictions: predictions.len(),
            samples: samples.len(),
        });
    }
    let mut overall = Tally::default();
    let mut per_attribute: BTreeMap<Attribute, Tally> = BTreeMap::new();
    let mut chance = 0.0;
    for (s, p) in samples.iter().zip(predictions) {
        let hit = usize::from(p == s.correct_answer());
        overall.correct += hit;
        overall.total += 1;
        let t = per_attribute.entry(s.attribute).or_default();
        t.correct += hit;
        t.total += 1;
        chance += 1.0 / s.options.len() as f64;
    }
    Ok(Metrics {
        overall,
        per_attribute,
        chance: chance / samples.len() as f64,
    })
}

/// Greedy answer restricted to the sample's options, read from the logits
/// at the last prompt position.
pub fn predict<T: Scalar>(model: &PillModel<T>, samples: &[SyntheticSample], vocab: &Vocabulary) -> Result<Vec<String>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let prompts: Vec<TokenSequence> = chunk
            .iter()
            .map(|s| encode_prompt(s, vocab, model.config()))
            .collect::<Result<_, _>>()?;
        let batch = Batch::new(&prompts.iter().collect::<Vec<_>>());
        let (g, pass) = model.forward_frozen(&batch)?;
        let logits = g.value(pass.logits);
        for (i, s) in chunk.iter().enumerate() {
            let (_, end) = batch.segments.bounds()[i];
            let row = logits.row(end - 1);
            let mut best: Option<(&String, T)> = None;
            for o in &s.options {
                let score = row[vocab.id(o)?];
                if best.is_none_or(|(_, b)| score > b) {
                    best = Some((o, score));
                }
            }
            out.push(best.map(|(o, _)| o.clone()).ok_or(DataError::SingleOption)?);
        }
    }
    Ok(out)
}

pub fn evaluate<T: Scalar>(model: &PillModel<T>, samples: &[SyntheticSample], vocab: &Vocabulary) -> Result<Metrics> {
    let predictions = predict(model, samples, vocab)?;
    exact_match(samples, &predictions)
}

/// Mean next-token loss over whole sentences.
pub fn corpus_loss<T: Scalar>(model: &PillModel<T>, corpus: &[Vec<usize>]) -> Result<f64> {
    if corpus.is_empty() {
        return Err(EvalError::Empty);
    }
    let (mut total, mut count) = (0.0, 0usize);
    for chunk in corpus.chunks(EVAL_BATCH) {
        let seqs: Vec<TokenSequence> = chunk.iter().map(|c| corpus_sequence(c)).collect::<Result<_, _>>()?;
        let batch = Batch::new(&seqs.iter().collect::<Vec<_>>());
        let (mut g, pass) = model.forward_frozen(&batch)?;
        let loss = g
            .cross_entropy(pass.logits, &batch.targets, &batch.target_mask)
            .map_err(ModelError::from)?;
        let n = batch.target_mask.iter().filter(|&&m| m).count();
        total += g.value(loss).item().to_f64_lossy() * n as f64;
        count += n;
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateRow {
    pub layer: usize,
    pub mean_abs_gate: f64,
    /// Mean absolute gate of each head over the probe set.
    pub per_head: Vec<f64>,
}

/// Gate magnitudes on a probe set, one row per layer.
pub fn gate_report<T: Scalar>(model: &PillModel<T>, probe: &[SyntheticSample], vocab: &Vocabulary) -> Result<Vec<GateRow>> {
    if !model.has_injections() {
        return Err(EvalError::NoGates);
    }
    let prompts: Vec<TokenSequence> = probe
        .iter()
        .map(|s| encode_prompt(s, vocab, model.config()))
        .collect::<Result<_, _>>()?;
    let with_images: Vec<&TokenSequence> = prompts.iter().filter(|p| p.has_vision()).collect();
    if with_images.is_empty() {
        return Err(EvalError::NoImages);
    }
    let cfg = model.config();
    let mut sums = vec![vec![0.0; cfg.n_heads]; cfg.n_layers];
    for chunk in with_images.chunks(EVAL_BATCH) {
        let batch = Batch::new(chunk);
        let (g, pass) = model.forward_frozen(&batch)?;
        for (l, gate) in pass.gates.iter().enumerate() {
            let gate = g.value(gate.ok_or(EvalError::NoGates)?);
            for s in 0..gate.rows() {
                for (acc, v) in sums[l].iter_mut().zip(gate.row(s)) {
                    *acc += v.to_f64_lossy().abs();
                }
            }
        }
    }
    let n = with_images.len() as f64;
    Ok(sums
        .into_iter()
        .enumerate()
        .map(|(layer, s)| {
            let per_head: Vec<f64> = s.into_iter().map(|x| x / n).collect();
            GateRow {
                layer,
                mean_abs_gate: per_head.iter().sum::<f64>() / per_head.len() as f64,
                per_head,
            }
        })
        .collect())
}

pub fn gate_report_csv(rows: &[GateRow]) -> String {
    let heads = rows.first().map_or(0, |r| r.per_head.len());
    let mut out = String::from("layer,mean_abs_gate");
    for h in 0..heads {
        out.push_str(&format!(",head_{h}"));
    }
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{}", r.layer, r.mean_abs_gate));
        for v in &r.per_head {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::data::{generate_dataset, DataConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (PillModel<f64>, Vec<SyntheticSample>, Vocabulary) {
        let vocab = Vocabulary::standard();
        let cfg = ModelConfig::tiny(vocab.len());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut m = PillModel::new_base(cfg, &mut rng).unwrap();
        m.attach_injections(&mut rng).unwrap();
        let samples = generate_dataset(20, 4, &DataConfig::for_model(&cfg)).unwrap();
        (m, samples, vocab)
    }

    #[test]
    fn exact_match_counts() {
        let (_, samples, _) = setup();
        let truth: Vec<String> = samples.iter().map(|s| s.correct_answer().to_string()).collect();
        let m = exact_match(&samples, &truth).unwrap();
        assert_eq!(m.overall, Tally { correct: 20, total: 20 });
        let wrong: Vec<String> = vec!["nothing".into(); 20];
        assert_eq!(exact_match(&samples, &wrong).unwrap().accuracy(), 0.0);
        assert!(exact_match(&samples[..0], &[]).is_err());
    }

    #[test]
    fn predictions_are_options() {
        let (m, samples, vocab) = setup();
        let preds = predict(&m, &samples, &vocab).unwrap();
        for (s, p) in samples.iter().zip(&preds) {
            assert!(s.options.contains(p));
        }
    }

    #[test]
    fn fresh_gates_are_zero() {
        let (m, samples, vocab) = setup();
        let rows = gate_report(&m, &samples, &vocab).unwrap();
        assert_eq!(rows.len(), m.config().n_layers);
        assert!(rows.iter().all(|r| r.mean_abs_gate == 0.0));
        let csv = gate_report_csv(&rows);
        assert!(csv.starts_with("layer,mean_abs_gate,head_0,head_1\n"));
        assert_eq!(csv.lines().count(), 1 + rows.len());
    }

    #[test]
    fn gate_report_without_injections_errors() {
        let (m, samples, vocab) = setup();
        let base = PillModel::from_store(*m.config(), {
            let mut s = crate::params::ParamStore::new();
            for (_, p) in m.store().iter().filter(|(_, p)| p.is_base()) {
                s.insert(p.name.clone(), p.value.clone(), p.role, p.layer);
            }
            s
        })
        .unwrap();
        assert!(matches!(gate_report(&base, &samples, &vocab), Err(EvalError::NoGates)));
        assert!(matches!(gate_report(&m, &[], &vocab), Err(EvalError::NoImages)));
    }
}
