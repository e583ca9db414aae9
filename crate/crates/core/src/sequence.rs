//! Interleaved text/vision sequences and their batched row layout.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::ModelConfig;
use crate::graph::Segments;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModalityTag {
    Text,
    Vision,
}

/// `queries_per_image` rows of `d_vis` raw visual features.
pub type FeatureBlock = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SequenceError {
    #[error("{placeholders} image placeholders but {images} images")]
    PlaceholderMismatch { placeholders: usize, images: usize },
    #[error("sequence of {len} positions exceeds max_seq_len {max}")]
    TooLong { len: usize, max: usize },
    #[error("image {index}: expected {rows}x{cols} features, got {got_rows}x{got_cols}")]
    FeatureShape {
        index: usize,
        rows: usize,
        cols: usize,
        got_rows: usize,
        got_cols: usize,
    },
    #[error("{0} supervision flags for {1} tokens")]
    MaskLength(usize, usize),
    #[error("an image placeholder cannot be supervised")]
    SupervisedPlaceholder,
    #[error("empty sequence")]
    Empty,
}

/// One model input. Text positions carry a token id, vision positions a raw
/// feature vector; `loss_mask` marks supervised (answer) text positions.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    tags: Vec<ModalityTag>,
    token_ids: Vec<Option<usize>>,
    features: Vec<Option<Vec<f64>>>,
    loss_mask: Vec<bool>,
}

impl TokenSequence {
    /// Pure-text sequence.
    pub fn text(tokens: &[usize], loss_mask: Vec<bool>) -> Result<Self, SequenceError> {
        if tokens.is_empty() {
            return Err(SequenceError::Empty);
        }
        if loss_mask.len() != tokens.len() {
            return Err(SequenceError::MaskLength(loss_mask.len(), tokens.len()));
        }
        Ok(Self {
            tags: vec![ModalityTag::Text; tokens.len()],
            token_ids: tokens.iter().map(|&t| Some(t)).collect(),
            features: vec![None; tokens.len()],
            loss_mask,
        })
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn tags(&self) -> &[ModalityTag] {
        &self.tags
    }

    pub fn token_id(&self, i: usize) -> Option<usize> {
        self.token_ids[i]
    }

    pub fn feature(&self, i: usize) -> Option<&[f64]> {
        self.features[i].as_deref()
    }

    pub fn loss_mask(&self) -> &[bool] {
        &self.loss_mask
    }

    pub fn has_vision(&self) -> bool {
        self.tags.contains(&ModalityTag::Vision)
    }

    /// Token ids of text positions, in order.
    pub fn text_tokens(&self) -> Vec<usize> {
        self.token_ids.iter().flatten().copied().collect()
    }

    /// Replaces the token at a text position.
    pub fn set_token(&mut self, i: usize, token: usize) {
        assert_eq!(self.tags[i], ModalityTag::Text, "position {i} is not text");
        self.token_ids[i] = Some(token);
    }

    /// The first `len` positions.
    pub fn prefix(&self, len: usize) -> Self {
        Self {
            tags: self.tags[..len].to_vec(),
            token_ids: self.token_ids[..len].to_vec(),
            features: self.features[..len].to_vec(),
            loss_mask: self.loss_mask[..len].to_vec(),
        }
    }

    /// Mutable access to a vision feature vector.
    pub fn feature_mut(&mut self, i: usize) -> Option<&mut Vec<f64>> {
        self.features[i].as_mut()
    }
}

/// Expands every `image_token` placeholder in `tokens` into the
/// `queries_per_image` feature rows of the matching image, preserving the
/// order of all other tokens.
pub fn build_interleaved_sequence(
    tokens: &[usize],
    supervised: &[bool],
    images: &[FeatureBlock],
    image_token: usize,
    config: &ModelConfig,
) -> Result<TokenSequence, SequenceError> {
    if supervised.len() != tokens.len() {
        return Err(SequenceError::MaskLength(supervised.len(), tokens.len()));
    }
    let placeholders = tokens.iter().filter(|&&t| t == image_token).count();
    if placeholders != images.len() {
        return Err(SequenceError::PlaceholderMismatch {
            placeholders,
            images: images.len(),
        });
    }
    let k = config.queries_per_image;
    let len = tokens.len() - placeholders + placeholders * k;
    if len == 0 {
        return Err(SequenceError::Empty);
    }
    if len > config.max_seq_len {
        return Err(SequenceError::TooLong {
            len,
            max: config.max_seq_len,
        });
    }
    for (index, block) in images.iter().enumerate() {
        let bad_row = block.iter().find(|r| r.len() != config.d_vis);
        if block.len() != k || bad_row.is_some() {
            return Err(SequenceError::FeatureShape {
                index,
                rows: k,
                cols: config.d_vis,
                got_rows: block.len(),
                got_cols: bad_row.or(block.first()).map_or(0, Vec::len),
            });
        }
    }
    let mut seq = TokenSequence {
        tags: Vec::with_capacity(len),
        token_ids: Vec::with_capacity(len),
        features: Vec::with_capacity(len),
        loss_mask: Vec::with_capacity(len),
    };
    let mut next_image = images.iter();
    for (&tok, &sup) in tokens.iter().zip(supervised) {
        if tok == image_token {
            if sup {
                return Err(SequenceError::SupervisedPlaceholder);
            }
            for row in next_image.next().expect("placeholder count checked") {
                seq.tags.push(ModalityTag::Vision);
                seq.token_ids.push(None);
                seq.features.push(Some(row.clone()));
                seq.loss_mask.push(false);
            }
        } else {
            seq.tags.push(ModalityTag::Text);
            seq.token_ids.push(Some(tok));
            seq.features.push(None);
            seq.loss_mask.push(sup);
        }
    }
    Ok(seq)
}

/// Several sequences concatenated along the row axis, ready for a forward
/// pass.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub segments: Segments,
    pub positions: Vec<usize>,
    pub is_vision: Vec<bool>,
    /// Token ids of the text rows, in row order.
    pub text_ids: Vec<usize>,
    /// Raw features of the vision rows, in row order.
    pub vision_features: Option<Tensor<T>>,
    /// Next-token target of each row; meaningful where `target_mask` holds.
    pub targets: Vec<usize>,
    pub target_mask: Vec<bool>,
}

impl<T: Scalar> Batch<T> {
    /// Builds the row layout. The target of row `i` is the token at `i + 1`
    /// whenever that position is supervised.
    pub fn new(seqs: &[&TokenSequence]) -> Self {
        let lengths: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
        let segments = Segments::from_lengths(&lengths);
        let positions = segments.positions();
        let mut is_vision = Vec::new();
        let mut text_ids = Vec::new();
        let mut features = Vec::new();
        let mut targets = Vec::new();
        let mut target_mask = Vec::new();
        let mut d_vis = 0;
        for seq in seqs {
            for i in 0..seq.len() {
                match seq.tags[i] {
                    ModalityTag::Text => {
                        is_vision.push(false);
                        text_ids.push(seq.token_ids[i].expect("text position has a token"));
                    }
                    ModalityTag::Vision => {
                        is_vision.push(true);
                        let f = seq.features[i].as_ref().expect("vision position has features");
                        d_vis = f.len();
                        features.extend(f.iter().map(|&x| T::lit(x)));
                    }
                }
                let next = i + 1;
                if next < seq.len() && seq.loss_mask[next] {
                    targets.push(seq.token_ids[next].expect("supervised position is text"));
                    target_mask.push(true);
                } else {
                    targets.push(0);
                    target_mask.push(false);
                }
            }
        }
        let n_vis = is_vision.iter().filter(|&&v| v).count();
        let vision_features = (n_vis > 0).then(|| Tensor::matrix(n_vis, d_vis, features).expect("feature rows"));
        Self {
            segments,
            positions,
            is_vision,
            text_ids,
            vision_features,
            targets,
            target_mask,
        }
    }

    pub fn rows(&self) -> usize {
        self.is_vision.len()
    }

    pub fn has_vision(&self) -> bool {
        self.vision_features.is_some()
    }
}
