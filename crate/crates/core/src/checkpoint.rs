//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"PILLCKPT" | u32 version | 9 x u64 model config
//! u32 block count
//! per block: u32 name length | name bytes | u32 ndim | ndim x u64 dims
//!            | u8 flag (0 base, always frozen; 1 injected, trainable)
//!            | numel x f64 values
//! ```

use std::collections::HashMap;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::ModelConfig;
use crate::model::{expected_shapes, ModelError, PillModel};
use crate::params::{ParamStore, Role};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"PILLCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file")]
    BadMagic,
    #[error("checkpoint format version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint truncated")]
    Truncated,
    #[error("{0} trailing bytes after the last block")]
    Trailing(usize),
    #[error("block name is not UTF-8")]
    BadName,
    #[error("unknown block {0}")]
    UnknownBlock(String),
    #[error("block {0} has an inconsistent frozen/trainable flag")]
    Flag(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

pub type Result<T, E = CheckpointError> = std::result::Result<T, E>;

fn config_fields(c: &ModelConfig) -> [usize; 9] {
    [
        c.d_model,
        c.n_layers,
        c.n_heads,
        c.d_ffn,
        c.vocab_size,
        c.max_seq_len,
        c.d_vis,
        c.queries_per_image,
        c.adapter_dim,
    ]
}

pub fn encode<T: Scalar>(model: &PillModel<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for f in config_fields(model.config()) {
        out.extend_from_slice(&(f as u64).to_le_bytes());
    }
    out.extend_from_slice(&(model.store().len() as u32).to_le_bytes());
    for (_, p) in model.store().iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.push(u8::from(!p.is_base()));
        for v in p.value.data() {
            out.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < n {
            return Err(CheckpointError::Truncated);
        }
        let (head, rest) = self.bytes.split_at(n);
        self.bytes = rest;
        Ok(head)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.array()?) as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        usize::try_from(u64::from_le_bytes(self.array()?)).map_err(|_| CheckpointError::Truncated)
    }
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<PillModel<T>> {
    let mut r = Reader { bytes };
    if r.take(MAGIC.len()).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()? as u32;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let mut f = [0usize; 9];
    for x in &mut f {
        *x = r.u64()?;
    }
    let config = ModelConfig {
        d_model: f[0],
        n_layers: f[1],
        n_heads: f[2],
        d_ffn: f[3],
        vocab_size: f[4],
        max_seq_len: f[5],
        d_vis: f[6],
        queries_per_image: f[7],
        adapter_dim: f[8],
    };
    config.validate().map_err(ModelError::from)?;
    let known: HashMap<String, (Role, Option<usize>)> = expected_shapes(&config, true)
        .into_iter()
        .map(|(name, _, role, layer)| (name, (role, layer)))
        .collect();
    let mut store = ParamStore::new();
    for _ in 0..r.u32()? {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| CheckpointError::BadName)?.to_string();
        let &(role, layer) = known.get(&name).ok_or_else(|| CheckpointError::UnknownBlock(name.clone()))?;
        let ndim = r.u32()?;
        let shape = (0..ndim).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let flag = r.take(1)?[0];
        if flag > 1 || (flag == 1) == (role == Role::Base) {
            return Err(CheckpointError::Flag(name));
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel.checked_mul(8).ok_or(CheckpointError::Truncated)?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("chunk of 8"))))
            .collect();
        if store.id(&name).is_some() {
            return Err(CheckpointError::UnknownBlock(name));
        }
        store.insert(name, Tensor::new(shape, data)?, role, layer);
    }
    if !r.bytes.is_empty() {
        return Err(CheckpointError::Trailing(r.bytes.len()));
    }
    Ok(PillModel::from_store(config, store)?)
}

pub fn save<T: Scalar>(model: &PillModel<T>, path: &Path) -> Result<Vec<u8>> {
    let bytes = encode(model);
    std::fs::write(path, &bytes).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(bytes)
}

pub fn load<T: Scalar>(path: &Path) -> Result<PillModel<T>> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&bytes)
}

/// SHA-256 over `"blob <len>\0" + content`, hex encoded.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(injected: bool) -> PillModel<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut m = PillModel::new_base(ModelConfig::tiny(12), &mut rng).unwrap();
        if injected {
            m.attach_injections(&mut rng).unwrap();
        }
        m
    }

    #[test]
    fn round_trip_is_byte_exact() {
        for injected in [false, true] {
            let m = model(injected);
            let bytes = encode(&m);
            let back: PillModel<f64> = decode(&bytes).unwrap();
            assert_eq!(back, m);
            assert_eq!(encode(&back), bytes);
        }
    }

    #[test]
    fn rejects_other_versions_and_garbage() {
        let mut bytes = encode(&model(false));
        bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            decode::<f64>(&bytes),
            Err(CheckpointError::Version { found: 2, expected: 1 })
        ));
        assert!(matches!(decode::<f64>(b"nope"), Err(CheckpointError::BadMagic)));
        let bytes = encode(&model(false));
        assert!(matches!(decode::<f64>(&bytes[..bytes.len() - 3]), Err(CheckpointError::Truncated)));
    }

    #[test]
    fn flags_follow_roles() {
        let m = model(true);
        let bytes = encode(&m);
        // header is 88 bytes; the first block is the embedding, a base parameter
        let name_len = u32::from_le_bytes(bytes[88..92].try_into().unwrap()) as usize;
        assert_eq!(&bytes[92..92 + name_len], b"embed");
        let flag_at = 92 + name_len + 4 + 16;
        assert_eq!(bytes[flag_at], 0);
        let mut flipped = bytes.clone();
        flipped[flag_at] = 1;
        assert!(matches!(decode::<f64>(&flipped), Err(CheckpointError::Flag(_))));
    }

    #[test]
    fn content_hash_matches_git() {
        // `printf 'hello\n' | git hash-object --object-format=sha256 --stdin`
        assert_eq!(
            content_hash(b"hello\n"),
            "2cf8d83d9ee29543b34a87727421fdecb7e3f3a183d337639025de576db9ebb4"
        );
    }
}
