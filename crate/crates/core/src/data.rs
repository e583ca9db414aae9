//! Procedural multimodal QA task and toy text corpus.
//!
//! Each sample is a latent object (color, shape, count) rendered as a block
//! of visual feature vectors, plus a templated question about one of the
//! three attributes. Every feature row carries one-hot codes of all three
//! attributes, a row-position code, small Gaussian jitter, and one channel
//! amplified so that vision rows have a much larger variance than text
//! embeddings.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::ModelConfig;
use crate::sequence::{build_interleaved_sequence, FeatureBlock, SequenceError, TokenSequence};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const IMG: usize = 3;

pub const COLORS: [&str; 4] = ["red", "green", "blue", "yellow"];
pub const SHAPES: [&str; 3] = ["circle", "square", "triangle"];
pub const COUNTS: [&str; 3] = ["one", "two", "three"];

const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<img>"];
const QUESTION_WORDS: [&str; 10] = ["what", "color", "shape", "is", "it", "?", "how", "many", "are", "there"];
const FILLER_WORDS: [&str; 12] = ["the", "a", "big", "small", ".", "and", "left", "right", "of", "near", "above", "below"];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("token {0:?} is not in the vocabulary")]
    OutOfVocabulary(String),
    #[error(transparent)]
    Sequence(#[from] SequenceError),
    #[error("invalid data config: {0}")]
    Config(String),
    #[error("sample has a single option; cannot substitute a wrong answer")]
    SingleOption,
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Bijective token/id map. Ids below 4 are reserved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new(words: &[&str]) -> Self {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        for w in words {
            if !tokens.iter().any(|t| t == w) {
                tokens.push(w.to_string());
            }
        }
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, ids }
    }

    /// The vocabulary shared by the QA task and the text corpus.
    pub fn standard() -> Self {
        let words: Vec<&str> = COLORS
            .iter()
            .chain(&SHAPES)
            .chain(&COUNTS)
            .chain(&QUESTION_WORDS)
            .chain(&FILLER_WORDS)
            .copied()
            .collect();
        Self::new(&words)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Result<usize, DataError> {
        self.ids
            .get(token)
            .copied()
            .ok_or_else(|| DataError::OutOfVocabulary(token.to_string()))
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode(&self, tokens: &[impl AsRef<str>]) -> Result<Vec<usize>, DataError> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or("<unk>").to_string())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attribute {
    Color,
    Shape,
    Count,
}

impl Attribute {
    pub const ALL: [Attribute; 3] = [Attribute::Color, Attribute::Shape, Attribute::Count];

    pub fn question(self) -> [&'static str; 5] {
        match self {
            Attribute::Color => ["what", "color", "is", "it", "?"],
            Attribute::Shape => ["what", "shape", "is", "it", "?"],
            Attribute::Count => ["how", "many", "are", "there", "?"],
        }
    }

    fn names(self) -> &'static [&'static str] {
        match self {
            Attribute::Color => &COLORS,
            Attribute::Shape => &SHAPES,
            Attribute::Count => &COUNTS,
        }
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Attribute::Color => "color",
            Attribute::Shape => "shape",
            Attribute::Count => "count",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Latent {
    pub color: usize,
    pub shape: usize,
    pub count: usize,
}

impl Latent {
    pub fn class(&self, attr: Attribute) -> usize {
        match attr {
            Attribute::Color => self.color,
            Attribute::Shape => self.shape,
            Attribute::Count => self.count,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSample {
    pub latent: Latent,
    pub attribute: Attribute,
    pub image_features: FeatureBlock,
    pub question: Vec<String>,
    pub options: Vec<String>,
    pub answer: String,
    pub split: Split,
}

impl SyntheticSample {
    pub fn correct_answer(&self) -> &'static str {
        self.attribute.names()[self.latent.class(self.attribute)]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub n_colors: usize,
    pub n_shapes: usize,
    pub n_counts: usize,
    pub d_vis: usize,
    pub queries_per_image: usize,
    pub jitter: f64,
    /// Multiplier on feature channel 0.
    pub heavy_channel_scale: f64,
    pub test_fraction: f64,
    /// When set, train and test draw from disjoint latent tuples.
    pub disjoint_split: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_colors: 4,
            n_shapes: 3,
            n_counts: 3,
            d_vis: 16,
            queries_per_image: 4,
            jitter: 0.05,
            heavy_channel_scale: 5.0,
            test_fraction: 0.2,
            disjoint_split: false,
        }
    }
}

impl DataConfig {
    pub fn for_model(model: &ModelConfig) -> Self {
        Self {
            d_vis: model.d_vis,
            queries_per_image: model.queries_per_image,
            ..Self::default()
        }
    }

    fn attribute_dims(&self) -> usize {
        self.n_colors + self.n_shapes + self.n_counts
    }

    pub fn classes(&self, attr: Attribute) -> usize {
        match attr {
            Attribute::Color => self.n_colors,
            Attribute::Shape => self.n_shapes,
            Attribute::Count => self.n_counts,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let err = |m: String| Err(DataError::Config(m));
        if self.n_colors < 2 || self.n_colors > COLORS.len() {
            return err(format!("n_colors must be in 2..={}", COLORS.len()));
        }
        if self.n_shapes < 2 || self.n_shapes > SHAPES.len() {
            return err(format!("n_shapes must be in 2..={}", SHAPES.len()));
        }
        if self.n_counts < 2 || self.n_counts > COUNTS.len() {
            return err(format!("n_counts must be in 2..={}", COUNTS.len()));
        }
        if self.d_vis < self.attribute_dims() {
            return err(format!("d_vis must be at least {}", self.attribute_dims()));
        }
        if self.queries_per_image == 0 {
            return err("queries_per_image must be positive".into());
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return err("test_fraction must be in [0, 1)".into());
        }
        Ok(())
    }

    /// Every latent tuple, in lexicographic order.
    pub fn latents(&self) -> Vec<Latent> {
        let mut out = Vec::new();
        for color in 0..self.n_colors {
            for shape in 0..self.n_shapes {
                for count in 0..self.n_counts {
                    out.push(Latent { color, shape, count });
                }
            }
        }
        out
    }
}

/// Noise-free feature row `row` of an image of `latent`.
fn clean_row(latent: &Latent, row: usize, config: &DataConfig) -> Vec<f64> {
    let mut f = vec![0.0; config.d_vis];
    f[latent.color] = 1.0;
    f[config.n_colors + latent.shape] = 1.0;
    f[config.n_colors + config.n_shapes + latent.count] = 1.0;
    let free = config.d_vis - config.attribute_dims();
    if free > 0 {
        f[config.attribute_dims() + row % free] = 1.0;
    }
    f[0] *= config.heavy_channel_scale;
    f
}

pub fn render_features(latent: &Latent, config: &DataConfig, rng: &mut impl Rng) -> FeatureBlock {
    let noise = Normal::new(0.0, config.jitter.max(0.0)).expect("finite jitter");
    (0..config.queries_per_image)
        .map(|row| {
            let mut f = clean_row(latent, row, config);
            if config.jitter > 0.0 {
                f.iter_mut().for_each(|x| *x += noise.sample(rng));
            }
            f
        })
        .collect()
}

/// Recovers the latent attributes from a feature block: channel-wise mean
/// over rows, then an argmax within each one-hot block.
pub fn decode_latent(features: &FeatureBlock, config: &DataConfig) -> Latent {
    let mut mean = vec![0.0; config.d_vis];
    for row in features {
        mean.iter_mut().zip(row).for_each(|(m, &x)| *m += x);
    }
    mean[0] /= config.heavy_channel_scale;
    let argmax = |s: &[f64]| {
        s.iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map_or(0, |(i, _)| i)
    };
    let (c, s) = (config.n_colors, config.n_shapes);
    Latent {
        color: argmax(&mean[..c]),
        shape: argmax(&mean[c..c + s]),
        count: argmax(&mean[c + s..c + s + config.n_counts]),
    }
}

fn make_sample(latent: Latent, attribute: Attribute, split: Split, config: &DataConfig, rng: &mut impl Rng) -> SyntheticSample {
    let names = attribute.names();
    let options: Vec<String> = names[..config.classes(attribute)].iter().map(|s| s.to_string()).collect();
    SyntheticSample {
        latent,
        attribute,
        image_features: render_features(&latent, config, rng),
        question: attribute.question().iter().map(|s| s.to_string()).collect(),
        answer: names[latent.class(attribute)].to_string(),
        options,
        split,
    }
}

/// Deterministic dataset of `n` samples. Every (latent, attribute)
/// combination is emitted once per shuffled round, which keeps each class
/// balanced to within one round.
pub fn generate_dataset(n: usize, seed: u64, config: &DataConfig) -> Result<Vec<SyntheticSample>, DataError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let latents = config.latents();
    let test_latents: Vec<Latent> = if config.disjoint_split {
        let mut shuffled = latents.clone();
        shuffled.shuffle(&mut rng);
        let n_test = ((latents.len() as f64) * config.test_fraction).round() as usize;
        shuffled.truncate(n_test);
        shuffled
    } else {
        Vec::new()
    };
    let mut combos: Vec<(Latent, Attribute)> = latents
        .iter()
        .flat_map(|&l| Attribute::ALL.map(|a| (l, a)))
        .collect();
    let mut samples = Vec::with_capacity(n);
    while samples.len() < n {
        combos.shuffle(&mut rng);
        for &(latent, attr) in combos.iter().take(n - samples.len()) {
            let split = if test_latents.contains(&latent) { Split::Test } else { Split::Train };
            samples.push(make_sample(latent, attr, split, config, &mut rng));
        }
    }
    if !config.disjoint_split {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let n_test = ((n as f64) * config.test_fraction).round() as usize;
        for &i in &order[..n_test] {
            samples[i].split = Split::Test;
        }
    }
    Ok(samples)
}

/// `BOS question IMG answer EOS`, the placeholder expanded into the image's
/// feature rows. The answer and `EOS` are supervised.
pub fn encode_sample(sample: &SyntheticSample, vocab: &Vocabulary, config: &ModelConfig) -> Result<TokenSequence, DataError> {
    encode_with_answer(sample, Some(&sample.answer), vocab, config)
}

/// Prompt only: `BOS question IMG`, for decoding.
pub fn encode_prompt(sample: &SyntheticSample, vocab: &Vocabulary, config: &ModelConfig) -> Result<TokenSequence, DataError> {
    encode_with_answer(sample, None, vocab, config)
}

fn encode_with_answer(
    sample: &SyntheticSample,
    answer: Option<&str>,
    vocab: &Vocabulary,
    config: &ModelConfig,
) -> Result<TokenSequence, DataError> {
    let mut tokens = vec![BOS];
    tokens.extend(vocab.encode(&sample.question)?);
    tokens.push(IMG);
    let mut supervised = vec![false; tokens.len()];
    if let Some(a) = answer {
        tokens.push(vocab.id(a)?);
        tokens.push(EOS);
        supervised.extend([true, true]);
    }
    Ok(build_interleaved_sequence(
        &tokens,
        &supervised,
        std::slice::from_ref(&sample.image_features),
        IMG,
        config,
    )?)
}

/// Sentences from a small compositional grammar, each wrapped in
/// `BOS ... EOS`.
pub fn generate_text_corpus(n: usize, seed: u64, vocab: &Vocabulary) -> Result<Vec<Vec<usize>>, DataError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pick = |rng: &mut ChaCha8Rng, words: &[&'static str]| words[rng.random_range(0..words.len())];
    let sizes = ["big", "small"];
    let relations = [["left", "of"], ["right", "of"], ["near", "the"], ["above", "the"], ["below", "the"]];
    let mut corpus = Vec::with_capacity(n);
    for _ in 0..n {
        let mut words: Vec<&str> = Vec::new();
        match rng.random_range(0..4) {
            0 => {
                words.extend(["the", pick(&mut rng, &sizes), pick(&mut rng, &COLORS), pick(&mut rng, &SHAPES), "is"]);
                words.extend(relations[rng.random_range(0..relations.len())]);
                words.extend(["a", pick(&mut rng, &SHAPES), "."]);
            }
            1 => words.extend(["there", "are", pick(&mut rng, &COUNTS), pick(&mut rng, &COLORS), pick(&mut rng, &SHAPES), "."]),
            2 => words.extend([
                "a",
                pick(&mut rng, &COLORS),
                pick(&mut rng, &SHAPES),
                "and",
                "a",
                pick(&mut rng, &COLORS),
                pick(&mut rng, &SHAPES),
                ".",
            ]),
            _ => {
                let attr = Attribute::ALL[rng.random_range(0..3)];
                words.extend(attr.question());
                words.extend(["it", "is", pick(&mut rng, attr.names()), "."]);
            }
        }
        let mut ids = vec![BOS];
        ids.extend(vocab.encode(&words)?);
        ids.push(EOS);
        corpus.push(ids);
    }
    Ok(corpus)
}

/// Training view of a corpus: every position after `BOS` is supervised.
pub fn corpus_sequence(ids: &[usize]) -> Result<TokenSequence, SequenceError> {
    let mask = (0..ids.len()).map(|i| i > 0).collect();
    TokenSequence::text(ids, mask)
}

pub fn write_dataset(samples: &[SyntheticSample], mut out: impl Write) -> Result<(), DataError> {
    for s in samples {
        serde_json::to_writer(&mut out, s).map_err(std::io::Error::other)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_dataset(input: impl BufRead) -> Result<Vec<SyntheticSample>, DataError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| DataError::Parse { line: i + 1, source })?);
    }
    Ok(out)
}

/// One sentence per line, tokens separated by spaces, without `BOS`/`EOS`.
pub fn write_corpus(corpus: &[Vec<usize>], vocab: &Vocabulary, mut out: impl Write) -> Result<(), DataError> {
    for ids in corpus {
        let inner = &ids[1..ids.len() - 1];
        writeln!(out, "{}", vocab.decode(inner).join(" "))?;
    }
    Ok(())
}

pub fn read_corpus(input: impl BufRead, vocab: &Vocabulary) -> Result<Vec<Vec<usize>>, DataError> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        let words: Vec<&str> = line.split_whitespace().collect();
        if words.is_empty() {
            continue;
        }
        let mut ids = vec![BOS];
        ids.extend(vocab.encode(&words)?);
        ids.push(EOS);
        out.push(ids);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_is_bijective_with_reserved_ids() {
        let v = Vocabulary::standard();
        assert_eq!(v.len(), 4 + 4 + 3 + 3 + 10 + 12);
        for id in 0..v.len() {
            assert_eq!(v.id(v.token(id).unwrap()).unwrap(), id);
        }
        assert_eq!(v.id("<img>").unwrap(), IMG);
        assert!(v.id("purple").is_err());
    }

    #[test]
    fn questions_never_contain_answers() {
        for attr in Attribute::ALL {
            for name in attr.names() {
                assert!(!attr.question().contains(name));
            }
        }
    }

    #[test]
    fn features_decode_to_latent() {
        let cfg = DataConfig::default();
        let samples = generate_dataset(300, 5, &cfg).unwrap();
        for s in &samples {
            assert_eq!(decode_latent(&s.image_features, &cfg), s.latent);
            assert_eq!(s.answer, s.correct_answer());
        }
    }

    #[test]
    fn heavy_channel_has_larger_variance() {
        let cfg = DataConfig::default();
        let samples = generate_dataset(400, 1, &cfg).unwrap();
        let var = |c: usize| {
            let vals: Vec<f64> = samples.iter().flat_map(|s| s.image_features.iter().map(move |r| r[c])).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64
        };
        assert!(var(0) > 10.0 * var(1));
    }

    #[test]
    fn encode_sample_layout() {
        let cfg = ModelConfig::desk(Vocabulary::standard().len());
        let vocab = Vocabulary::standard();
        let s = &generate_dataset(1, 0, &DataConfig::for_model(&cfg)).unwrap()[0];
        let seq = encode_sample(s, &vocab, &cfg).unwrap();
        assert_eq!(seq.len(), 1 + 5 + 4 + 1 + 1);
        assert_eq!(seq.loss_mask().iter().filter(|&&m| m).count(), 2);
        let prompt = encode_prompt(s, &vocab, &cfg).unwrap();
        assert_eq!(prompt, seq.prefix(10));
    }

    #[test]
    fn disjoint_split_separates_latents() {
        let cfg = DataConfig {
            disjoint_split: true,
            ..DataConfig::default()
        };
        let samples = generate_dataset(500, 3, &cfg).unwrap();
        let train: std::collections::HashSet<_> = samples.iter().filter(|s| s.split == Split::Train).map(|s| s.latent).collect();
        let test: std::collections::HashSet<_> = samples.iter().filter(|s| s.split == Split::Test).map(|s| s.latent).collect();
        assert!(!test.is_empty());
        assert!(train.is_disjoint(&test));
    }

    #[test]
    fn corpus_round_trips_through_text() {
        let v = Vocabulary::standard();
        let corpus = generate_text_corpus(50, 2, &v).unwrap();
        let mut buf = Vec::new();
        write_corpus(&corpus, &v, &mut buf).unwrap();
        assert_eq!(read_corpus(buf.as_slice(), &v).unwrap(), corpus);
    }
}
