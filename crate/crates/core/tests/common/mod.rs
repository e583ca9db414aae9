//! Shared fixtures and a loop-by-loop reference forward pass that shares no
//! code with the graph implementation.

#![allow(dead_code)]

use pill::data::{corpus_sequence, encode_sample, generate_dataset, generate_text_corpus, DataConfig, Vocabulary};
use pill::sequence::{ModalityTag, TokenSequence};
use pill::{Batch, ModelConfig, PillModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn tiny_model(seed: u64, injected: bool) -> PillModel {
    let vocab = Vocabulary::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = PillModel::new_base(ModelConfig::tiny(vocab.len()), &mut rng).unwrap();
    if injected {
        m.attach_injections(&mut rng).unwrap();
    }
    m
}

/// Overwrites every injected parameter with `N(0, std)` draws.
pub fn randomize_injections(model: &mut PillModel, std: f64, seed: u64) {
    randomize_where(model, std, seed, |name| !is_base_name(name));
}

pub fn randomize_where(model: &mut PillModel, std: f64, seed: u64, select: impl Fn(&str) -> bool) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, std).unwrap();
    let names: Vec<String> = model.store().iter().map(|(_, p)| p.name.clone()).collect();
    for name in names.into_iter().filter(|n| select(n)) {
        for x in model.param_mut(&name).unwrap().value.data_mut() {
            *x = dist.sample(&mut rng);
        }
    }
}

pub fn is_base_name(name: &str) -> bool {
    !(name.starts_with("proj.") || [".a_v.", ".a_t.", ".a_attn.", ".gate."].iter().any(|g| name.contains(g)))
}

/// A multimodal QA sequence and a pure-text sentence for `config`.
pub fn mixed_sequences(config: &ModelConfig, seed: u64) -> (TokenSequence, TokenSequence) {
    let vocab = Vocabulary::standard();
    let sample = generate_dataset(1, seed, &DataConfig::for_model(config)).unwrap().remove(0);
    let qa = encode_sample(&sample, &vocab, config).unwrap();
    let text = corpus_sequence(&generate_text_corpus(1, seed, &vocab).unwrap()[0]).unwrap();
    (qa, text)
}

pub fn random_text(config: &ModelConfig, len: usize, rng: &mut impl Rng) -> TokenSequence {
    let ids: Vec<usize> = (0..len).map(|_| rng.random_range(0..config.vocab_size)).collect();
    TokenSequence::text(&ids, vec![true; len]).unwrap()
}

#[derive(Debug, Clone, Copy)]
pub struct RefOptions {
    /// Apply adapters and gates; otherwise run the plain base transformer.
    pub injections: bool,
    /// Zero the value vectors of vision positions in every layer.
    pub zero_vision_values: bool,
}

type Mat = Vec<Vec<f64>>;

struct Weights<'a> {
    model: &'a PillModel,
}

impl Weights<'_> {
    fn mat(&self, name: &str) -> Mat {
        let p = self.model.param(name).unwrap_or_else(|| panic!("missing {name}"));
        let (r, c) = (p.value.shape()[0], p.value.shape()[1]);
        let d = p.value.data();
        (0..r).map(|i| d[i * c..(i + 1) * c].to_vec()).collect()
    }

    fn vec(&self, name: &str) -> Vec<f64> {
        self.model.param(name).unwrap_or_else(|| panic!("missing {name}")).value.data().to_vec()
    }
}

fn vecmat(x: &[f64], w: &Mat) -> Vec<f64> {
    let cols = w[0].len();
    let mut out = vec![0.0; cols];
    for (i, &xi) in x.iter().enumerate() {
        for j in 0..cols {
            out[j] += xi * w[i][j];
        }
    }
    out
}

fn rmsnorm(x: &[f64], w: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let r = 1.0 / (ms + 1e-6).sqrt();
    x.iter().zip(w).map(|(v, g)| v * r * g).collect()
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn rope(x: &mut [f64], pos: usize, n_heads: usize) {
    let dh = x.len() / n_heads;
    for h in 0..n_heads {
        for i in 0..dh / 2 {
            let theta = pos as f64 / 10000f64.powf(2.0 * i as f64 / dh as f64);
            let (a, b) = (x[h * dh + 2 * i], x[h * dh + 2 * i + 1]);
            x[h * dh + 2 * i] = a * theta.cos() - b * theta.sin();
            x[h * dh + 2 * i + 1] = a * theta.sin() + b * theta.cos();
        }
    }
}

fn adapter(w: &Weights, prefix: &str, h: &[f64]) -> Vec<f64> {
    let a: Vec<f64> = vecmat(h, &w.mat(&format!("{prefix}.down1.weight")))
        .iter()
        .zip(w.vec(&format!("{prefix}.down1.bias")))
        .map(|(x, b)| silu(x + b))
        .collect();
    let b: Vec<f64> = vecmat(h, &w.mat(&format!("{prefix}.down2.weight")))
        .iter()
        .zip(w.vec(&format!("{prefix}.down2.bias")))
        .map(|(x, b)| x + b)
        .collect();
    let hidden: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x * y).collect();
    vecmat(&hidden, &w.mat(&format!("{prefix}.up.weight")))
        .iter()
        .zip(h)
        .map(|(u, x)| u + x)
        .collect()
}

/// Logits of a single sequence, one row per position.
pub fn reference_logits(model: &PillModel, seq: &TokenSequence, opts: RefOptions) -> Mat {
    let cfg = *model.config();
    let w = Weights { model };
    let (t_len, nh) = (seq.len(), cfg.n_heads);
    let dh = cfg.d_model / nh;
    let embed = w.mat("embed");
    let vision: Vec<bool> = seq.tags().iter().map(|&t| t == ModalityTag::Vision).collect();
    let mut h: Mat = (0..t_len)
        .map(|t| {
            if vision[t] {
                let p = vecmat(seq.feature(t).unwrap(), &w.mat("proj.weight"));
                p.iter().zip(w.vec("proj.bias")).map(|(a, b)| a + b).collect()
            } else {
                embed[seq.token_id(t).unwrap()].clone()
            }
        })
        .collect();
    for l in 0..cfg.n_layers {
        let pre = format!("layers.{l}");
        let x: Mat = h.iter().map(|r| rmsnorm(r, &w.vec(&format!("{pre}.attn_norm")))).collect();
        let proj = |name: &str| -> Mat { x.iter().map(|r| vecmat(r, &w.mat(&format!("{pre}.attn.{name}")))).collect() };
        let (mut q, mut k, mut v) = (proj("wq"), proj("wk"), proj("wv"));
        for t in 0..t_len {
            rope(&mut q[t], t, nh);
            rope(&mut k[t], t, nh);
        }
        if opts.injections {
            let n_vis = vision.iter().filter(|&&b| b).count();
            let mut pooled = vec![0.0; cfg.d_model];
            for t in (0..t_len).filter(|&t| vision[t]) {
                for (p, xv) in pooled.iter_mut().zip(&x[t]) {
                    *p += xv / n_vis as f64;
                }
            }
            let gate: Vec<f64> = vecmat(&pooled, &w.mat(&format!("{pre}.gate.weight")))
                .iter()
                .zip(w.vec(&format!("{pre}.gate.bias")))
                .map(|(a, b)| (a + b).tanh())
                .collect();
            for t in (0..t_len).filter(|&t| vision[t]) {
                for (c, val) in v[t].iter_mut().enumerate() {
                    *val *= gate[c / dh];
                }
            }
        }
        if opts.zero_vision_values {
            for t in (0..t_len).filter(|&t| vision[t]) {
                v[t].iter_mut().for_each(|x| *x = 0.0);
            }
        }
        let mut mixed = vec![vec![0.0; cfg.d_model]; t_len];
        for head in 0..nh {
            let cols = head * dh..(head + 1) * dh;
            for i in 0..t_len {
                let scores: Vec<f64> = (0..=i)
                    .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for (j, ej) in e.iter().enumerate() {
                    for c in cols.clone() {
                        mixed[i][c] += ej / z * v[j][c];
                    }
                }
            }
        }
        for t in 0..t_len {
            let mut o = vecmat(&mixed[t], &w.mat(&format!("{pre}.attn.wo")));
            if opts.injections {
                o = adapter(&w, &format!("{pre}.a_attn"), &o);
            }
            for (hv, ov) in h[t].iter_mut().zip(&o) {
                *hv += ov;
            }
            let x = rmsnorm(&h[t], &w.vec(&format!("{pre}.ffn_norm")));
            let a = vecmat(&x, &w.mat(&format!("{pre}.ffn.w1")));
            let b = vecmat(&x, &w.mat(&format!("{pre}.ffn.w3")));
            let hidden: Vec<f64> = a.iter().zip(&b).map(|(p, q)| silu(*p) * q).collect();
            let mut y = vecmat(&hidden, &w.mat(&format!("{pre}.ffn.w2")));
            if opts.injections {
                let expert = if vision[t] { "a_v" } else { "a_t" };
                y = adapter(&w, &format!("{pre}.{expert}"), &y);
            }
            for (hv, yv) in h[t].iter_mut().zip(&y) {
                *hv += yv;
            }
        }
    }
    h.iter()
        .map(|r| {
            let x = rmsnorm(r, &w.vec("final_norm"));
            embed.iter().map(|e| e.iter().zip(&x).map(|(a, b)| a * b).sum()).collect()
        })
        .collect()
}

/// Max abs difference between graph logits rows `[start, start + len)` and
/// a reference block.
pub fn max_diff(graph_logits: &pill::Tensor, start: usize, reference: &Mat) -> f64 {
    reference
        .iter()
        .enumerate()
        .flat_map(|(i, row)| {
            graph_logits
                .row(start + i)
                .iter()
                .zip(row)
                .map(|(a, b)| (a - b).abs())
                .collect::<Vec<_>>()
        })
        .fold(0.0, f64::max)
}

/// Mean supervised next-token loss of `seqs`, forward only.
pub fn model_loss(model: &PillModel, seqs: &[&TokenSequence]) -> f64 {
    let batch = Batch::new(seqs);
    let (mut g, pass) = model.forward_frozen(&batch).unwrap();
    let loss = g.cross_entropy(pass.logits, &batch.targets, &batch.target_mask).unwrap();
    g.value(loss).item()
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Worst relative error between analytic and central-difference gradients
/// over every scalar that `spec` trains, its location, and the number of
/// scalars checked.
pub fn model_gradcheck(
    model: &mut PillModel,
    spec: &pill::training::TrainStageSpec,
    seqs: &[&TokenSequence],
    h: f64,
) -> (f64, String, usize) {
    let (_, grads) = pill::training::batch_gradients(model, spec, seqs).unwrap();
    let mut worst = (0.0, String::new());
    let mut checked = 0;
    for (id, grad) in &grads {
        let name = model.store().get(*id).name.clone();
        for i in 0..grad.len() {
            let orig = model.store().get(*id).value.data()[i];
            model.store_mut().get_mut(*id).value.data_mut()[i] = orig + h;
            let up = model_loss(model, seqs);
            model.store_mut().get_mut(*id).value.data_mut()[i] = orig - h;
            let down = model_loss(model, seqs);
            model.store_mut().get_mut(*id).value.data_mut()[i] = orig;
            let e = rel_err(grad[i], (up - down) / (2.0 * h));
            if e > worst.0 {
                worst = (e, format!("{name}[{i}]"));
            }
            checked += 1;
        }
    }
    (worst.0, worst.1, checked)
}

/// Content hash of the raw bytes of every parameter whose name passes
/// `select`, in store order.
pub fn param_hash(model: &PillModel, select: impl Fn(&str) -> bool) -> String {
    let mut bytes = Vec::new();
    for (_, p) in model.store().iter().filter(|(_, p)| select(&p.name)) {
        bytes.extend(p.name.as_bytes());
        for v in p.value.data() {
            bytes.extend(v.to_le_bytes());
        }
    }
    pill::checkpoint::content_hash(&bytes)
}

pub fn tiny_samples(n: usize, seed: u64, config: &ModelConfig) -> Vec<pill::data::SyntheticSample> {
    generate_dataset(n, seed, &DataConfig::for_model(config)).unwrap()
}
