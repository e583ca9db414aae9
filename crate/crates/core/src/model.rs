//! Frozen decoder transformer with modality-routed adapters and gated
//! attention.
//!
//! Every layer is a pre-norm block:
//!
//! ```text
//! x   = rmsnorm(h)
//! h  += a_attn(W_O · attend(rope(x W_Q), rope(x W_K), gate(x W_V)))
//! y   = swiglu_ffn(rmsnorm(h))
//! h  += y routed row-wise through a_v (vision rows) or a_t (text rows)
//! ```
//!
//! `gate` multiplies the value rows of vision positions, head by head, by
//! `tanh(G(mean of x over the sequence's vision rows))`, so every vision
//! token in a layer sees the same gate vector. All injected modules start
//! as exact identities: adapter up-projections and the gate map are zero,
//! which leaves only the vision value rows switched off.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use thiserror::Error;

use crate::config::{ConfigError, ModelConfig};
use crate::graph::{Graph, Var};
use crate::params::{Group, Param, ParamId, ParamStore, Role};
use crate::scalar::Scalar;
use crate::sequence::Batch;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("parameter {name}: expected shape {expected:?}, found {found:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("input has vision positions but the model has no visual projection")]
    NoVisionPath,
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// Two down-projections, a SiLU gate between them and a bias-free
/// up-projection, wrapped in a residual connection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdapterParams<H> {
    pub down1: H,
    pub down1_bias: H,
    pub down2: H,
    pub down2_bias: H,
    pub up: H,
}

/// Affine map from the model width to one gate logit per head.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateParams<H> {
    pub weight: H,
    pub bias: H,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionWeights<H> {
    pub wq: H,
    pub wk: H,
    pub wv: H,
    pub wo: H,
}

/// SwiGLU feed-forward of the base model: `(silu(x W1) * x W3) W2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FfnWeights<H> {
    pub w1: H,
    pub w3: H,
    pub w2: H,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Injections<H> {
    pub a_v: AdapterParams<H>,
    pub a_t: AdapterParams<H>,
    pub a_attn: AdapterParams<H>,
    pub gate: GateParams<H>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<H> {
    pub attn_norm: H,
    pub attn: AttentionWeights<H>,
    pub ffn_norm: H,
    pub ffn: FfnWeights<H>,
    pub injections: Option<Injections<H>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection<H> {
    pub weight: H,
    pub bias: H,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<H> {
    pub embed: H,
    pub final_norm: H,
    pub layers: Vec<LayerParams<H>>,
    pub projection: Option<Projection<H>>,
}

impl<H: Copy> AdapterParams<H> {
    pub fn map<U>(&self, f: &impl Fn(H) -> U) -> AdapterParams<U> {
        AdapterParams {
            down1: f(self.down1),
            down1_bias: f(self.down1_bias),
            down2: f(self.down2),
            down2_bias: f(self.down2_bias),
            up: f(self.up),
        }
    }
}

impl<H: Copy> ModelParams<H> {
    pub fn map<U>(&self, f: &impl Fn(H) -> U) -> ModelParams<U> {
        ModelParams {
            embed: f(self.embed),
            final_norm: f(self.final_norm),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    attn_norm: f(l.attn_norm),
                    attn: AttentionWeights {
                        wq: f(l.attn.wq),
                        wk: f(l.attn.wk),
                        wv: f(l.attn.wv),
                        wo: f(l.attn.wo),
                    },
                    ffn_norm: f(l.ffn_norm),
                    ffn: FfnWeights {
                        w1: f(l.ffn.w1),
                        w3: f(l.ffn.w3),
                        w2: f(l.ffn.w2),
                    },
                    injections: l.injections.map(|inj| Injections {
                        a_v: inj.a_v.map(f),
                        a_t: inj.a_t.map(f),
                        a_attn: inj.a_attn.map(f),
                        gate: GateParams {
                            weight: f(inj.gate.weight),
                            bias: f(inj.gate.bias),
                        },
                    }),
                })
                .collect(),
            projection: self.projection.map(|p| Projection {
                weight: f(p.weight),
                bias: f(p.bias),
            }),
        }
    }
}

fn adapter_name(layer: usize, group: Group, part: &str) -> String {
    format!("layers.{layer}.{}.{part}", group.name())
}

/// Expected shape of every named parameter for `config`.
pub(crate) fn expected_shapes(config: &ModelConfig, injected: bool) -> Vec<(String, Vec<usize>, Role, Option<usize>)> {
    let (d, f, r, h) = (config.d_model, config.d_ffn, config.adapter_dim, config.n_heads);
    let mut out = vec![
        ("embed".to_string(), vec![config.vocab_size, d], Role::Base, None),
        ("final_norm".to_string(), vec![d], Role::Base, None),
    ];
    for l in 0..config.n_layers {
        let base = |part: &str, shape: Vec<usize>| (format!("layers.{l}.{part}"), shape, Role::Base, Some(l));
        out.extend([
            base("attn_norm", vec![d]),
            base("attn.wq", vec![d, d]),
            base("attn.wk", vec![d, d]),
            base("attn.wv", vec![d, d]),
            base("attn.wo", vec![d, d]),
            base("ffn_norm", vec![d]),
            base("ffn.w1", vec![d, f]),
            base("ffn.w3", vec![d, f]),
            base("ffn.w2", vec![f, d]),
        ]);
    }
    if injected {
        for l in 0..config.n_layers {
            for g in [Group::VisionAdapter, Group::TextAdapter, Group::AttnAdapter] {
                let role = Role::Injected(g);
                out.extend([
                    (adapter_name(l, g, "down1.weight"), vec![d, r], role, Some(l)),
                    (adapter_name(l, g, "down1.bias"), vec![r], role, Some(l)),
                    (adapter_name(l, g, "down2.weight"), vec![d, r], role, Some(l)),
                    (adapter_name(l, g, "down2.bias"), vec![r], role, Some(l)),
                    (adapter_name(l, g, "up.weight"), vec![r, d], role, Some(l)),
                ]);
            }
            let role = Role::Injected(Group::Gate);
            out.push((format!("layers.{l}.gate.weight"), vec![d, h], role, Some(l)));
            out.push((format!("layers.{l}.gate.bias"), vec![h], role, Some(l)));
        }
        let role = Role::Injected(Group::Projection);
        out.push(("proj.weight".into(), vec![config.d_vis, d], role, None));
        out.push(("proj.bias".into(), vec![d], role, None));
    }
    out
}

fn normal_tensor<T: Scalar>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| T::lit(dist.sample(rng))).collect()).expect("shape")
}

fn uniform_tensor<T: Scalar>(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor<T> {
    let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| T::lit(dist.sample(rng))).collect()).expect("shape")
}

#[derive(Debug, Clone, PartialEq)]
pub struct PillModel<T> {
    config: ModelConfig,
    store: ParamStore<T>,
    params: ModelParams<ParamId>,
}

/// Graph leaves for every parameter of a model.
#[derive(Debug, Clone)]
pub struct Binding {
    /// Leaf of each parameter, indexed by [`ParamId::index`].
    pub leaves: Vec<Var>,
    pub params: ModelParams<Var>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.leaves[id.index()]
    }
}

pub struct ForwardPass {
    pub logits: Var,
    /// Per-layer `[sequences x heads]` gate values; `None` for layers
    /// without injections.
    pub gates: Vec<Option<Var>>,
}

impl<T: Scalar> PillModel<T> {
    /// Randomly initialised base transformer without injected modules.
    pub fn new_base(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let out_scale = 1.0 / (2.0 * config.n_layers as f64).sqrt();
        for (name, shape, role, layer) in expected_shapes(&config, false) {
            let value = if shape.len() == 1 {
                Tensor::ones(&shape)
            } else if name == "embed" {
                normal_tensor(&shape, 1.0 / (config.d_model as f64).sqrt(), rng)
            } else {
                let mut std = 1.0 / (shape[0] as f64).sqrt();
                if name.ends_with("attn.wo") || name.ends_with("ffn.w2") {
                    std *= out_scale;
                }
                normal_tensor(&shape, std, rng)
            };
            store.insert(name, value, role, layer);
        }
        Self::from_store(config, store)
    }

    /// Adds adapters, gates and the visual projection in their identity
    /// state: zero up-projections, zero gate map, zero projection, and
    /// down-projections uniform in `±1/sqrt(d_model)`.
    pub fn attach_injections(&mut self, rng: &mut impl Rng) -> Result<()> {
        if self.has_injections() {
            return Ok(());
        }
        let bound = 1.0 / (self.config.d_model as f64).sqrt();
        let base_count = self.store.len();
        for (name, shape, role, layer) in expected_shapes(&self.config, true).into_iter().skip(base_count) {
            let value = if name.ends_with("down1.weight") || name.ends_with("down2.weight") {
                uniform_tensor(&shape, bound, rng)
            } else {
                Tensor::zeros(&shape)
            };
            self.store.insert(name, value, role, layer);
        }
        let store = std::mem::take(&mut self.store);
        *self = Self::from_store(self.config, store)?;
        Ok(())
    }

    /// Reassembles a model from named parameters, e.g. a loaded checkpoint.
    pub fn from_store(config: ModelConfig, store: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let injected = store.id("proj.weight").is_some();
        for (name, shape, role, _) in expected_shapes(&config, injected) {
            let p = store.by_name(&name).ok_or_else(|| ModelError::MissingParam(name.clone()))?;
            if p.value.shape() != shape.as_slice() || p.role != role {
                return Err(ModelError::ParamShape {
                    name,
                    expected: shape,
                    found: p.value.shape().to_vec(),
                });
            }
        }
        let id = |name: String| store.id(&name).expect("validated above");
        let adapter = |l: usize, g: Group| AdapterParams {
            down1: id(adapter_name(l, g, "down1.weight")),
            down1_bias: id(adapter_name(l, g, "down1.bias")),
            down2: id(adapter_name(l, g, "down2.weight")),
            down2_bias: id(adapter_name(l, g, "down2.bias")),
            up: id(adapter_name(l, g, "up.weight")),
        };
        let layers = (0..config.n_layers)
            .map(|l| LayerParams {
                attn_norm: id(format!("layers.{l}.attn_norm")),
                attn: AttentionWeights {
                    wq: id(format!("layers.{l}.attn.wq")),
                    wk: id(format!("layers.{l}.attn.wk")),
                    wv: id(format!("layers.{l}.attn.wv")),
                    wo: id(format!("layers.{l}.attn.wo")),
                },
                ffn_norm: id(format!("layers.{l}.ffn_norm")),
                ffn: FfnWeights {
                    w1: id(format!("layers.{l}.ffn.w1")),
                    w3: id(format!("layers.{l}.ffn.w3")),
                    w2: id(format!("layers.{l}.ffn.w2")),
                },
                injections: injected.then(|| Injections {
                    a_v: adapter(l, Group::VisionAdapter),
                    a_t: adapter(l, Group::TextAdapter),
                    a_attn: adapter(l, Group::AttnAdapter),
                    gate: GateParams {
                        weight: id(format!("layers.{l}.gate.weight")),
                        bias: id(format!("layers.{l}.gate.bias")),
                    },
                }),
            })
            .collect();
        let params = ModelParams {
            embed: id("embed".into()),
            final_norm: id("final_norm".into()),
            layers,
            projection: injected.then(|| Projection {
                weight: id("proj.weight".into()),
                bias: id("proj.bias".into()),
            }),
        };
        Ok(Self { config, store, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn params(&self) -> &ModelParams<ParamId> {
        &self.params
    }

    pub fn has_injections(&self) -> bool {
        self.params.projection.is_some()
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.store.by_name(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        let id = self.store.id(name)?;
        Some(self.store.get_mut(id))
    }

    /// Loads every parameter onto `g`; `trainable` decides which leaves
    /// require gradients.
    pub fn bind(&self, g: &mut Graph<T>, trainable: impl Fn(&Param<T>) -> bool) -> Result<Binding> {
        let mut leaves = Vec::with_capacity(self.store.len());
        for (_, p) in self.store.iter() {
            leaves.push(g.leaf(p.value.clone(), trainable(p))?);
        }
        let params = self.params.map(&|id: ParamId| leaves[id.index()]);
        Ok(Binding { leaves, params })
    }

    /// Convenience wrapper: binds with no trainable parameters and runs the
    /// forward pass.
    pub fn forward_frozen(&self, batch: &Batch<T>) -> Result<(Graph<T>, ForwardPass)> {
        let mut g = Graph::new();
        let binding = self.bind(&mut g, |_| false)?;
        let pass = model_forward(&mut g, &binding.params, batch, &self.config)?;
        Ok((g, pass))
    }
}

/// Affine map of raw visual features into the model width.
pub fn project_visual<T: Scalar>(g: &mut Graph<T>, features: Var, proj: &Projection<Var>) -> Result<Var> {
    let x = g.matmul(features, proj.weight)?;
    Ok(g.add_bias(x, proj.bias)?)
}

/// `U(silu(D1 h + b1) * (D2 h + b2)) + h`.
pub fn swiglu_adapter<T: Scalar>(g: &mut Graph<T>, h: Var, a: &AdapterParams<Var>) -> Result<Var> {
    let d1 = g.matmul(h, a.down1)?;
    let d1 = g.add_bias(d1, a.down1_bias)?;
    let d1 = g.silu(d1)?;
    let d2 = g.matmul(h, a.down2)?;
    let d2 = g.add_bias(d2, a.down2_bias)?;
    let bottleneck = g.mul(d1, d2)?;
    let up = g.matmul(bottleneck, a.up)?;
    Ok(g.add(up, h)?)
}

/// Routes vision rows through `a_v` and text rows through `a_t`.
pub fn momae_forward<T: Scalar>(
    g: &mut Graph<T>,
    h: Var,
    is_vision: &[bool],
    a_v: &AdapterParams<Var>,
    a_t: &AdapterParams<Var>,
) -> Result<Var> {
    let any_vision = is_vision.iter().any(|&v| v);
    let any_text = is_vision.iter().any(|&v| !v);
    match (any_vision, any_text) {
        (true, true) => {
            let vis = swiglu_adapter(g, h, a_v)?;
            let txt = swiglu_adapter(g, h, a_t)?;
            Ok(g.select_rows(vis, txt, is_vision)?)
        }
        (true, false) => swiglu_adapter(g, h, a_v),
        _ => swiglu_adapter(g, h, a_t),
    }
}

pub struct AttentionOutput {
    pub output: Var,
    /// `[sequences x heads]` tanh gates, when a gate map is present.
    pub gates: Option<Var>,
}

/// Causal self-attention over already-normalised rows `x`, with the value
/// rows of vision positions scaled by the per-head modality gate and the
/// projected output passed through the attention adapter.
pub fn mag_attention<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    batch: &Batch<T>,
    attn: &AttentionWeights<Var>,
    gate: Option<&GateParams<Var>>,
    a_attn: Option<&AdapterParams<Var>>,
    n_heads: usize,
) -> Result<AttentionOutput> {
    let q = g.matmul(x, attn.wq)?;
    let q = g.rope(q, &batch.positions, n_heads)?;
    let k = g.matmul(x, attn.wk)?;
    let k = g.rope(k, &batch.positions, n_heads)?;
    let mut v = g.matmul(x, attn.wv)?;
    let mut gates = None;
    if let Some(gp) = gate {
        let pooled = g.segment_mean_rows(x, &batch.is_vision, &batch.segments)?;
        let logits = g.matmul(pooled, gp.weight)?;
        let logits = g.add_bias(logits, gp.bias)?;
        let gv = g.tanh(logits)?;
        v = g.gate_rows(v, gv, &batch.is_vision, &batch.segments, n_heads)?;
        gates = Some(gv);
    }
    let mixed = g.causal_attention(q, k, v, &batch.segments, n_heads)?;
    let mut output = g.matmul(mixed, attn.wo)?;
    if let Some(a) = a_attn {
        output = swiglu_adapter(g, output, a)?;
    }
    Ok(AttentionOutput { output, gates })
}

pub fn swiglu_ffn<T: Scalar>(g: &mut Graph<T>, x: Var, ffn: &FfnWeights<Var>) -> Result<Var> {
    let a = g.matmul(x, ffn.w1)?;
    let a = g.silu(a)?;
    let b = g.matmul(x, ffn.w3)?;
    let hidden = g.mul(a, b)?;
    Ok(g.matmul(hidden, ffn.w2)?)
}

/// One pre-norm block. Returns the new residual stream and the layer's
/// gates.
pub fn pill_block_forward<T: Scalar>(
    g: &mut Graph<T>,
    h: Var,
    layer: &LayerParams<Var>,
    batch: &Batch<T>,
    n_heads: usize,
) -> Result<(Var, Option<Var>)> {
    let inj = layer.injections.as_ref();
    let x = g.rmsnorm(h, layer.attn_norm)?;
    let attn = mag_attention(
        g,
        x,
        batch,
        &layer.attn,
        inj.map(|i| &i.gate),
        inj.map(|i| &i.a_attn),
        n_heads,
    )?;
    let h = g.add(h, attn.output)?;
    let x = g.rmsnorm(h, layer.ffn_norm)?;
    let mut y = swiglu_ffn(g, x, &layer.ffn)?;
    if let Some(i) = inj {
        y = momae_forward(g, y, &batch.is_vision, &i.a_v, &i.a_t)?;
    }
    Ok((g.add(h, y)?, attn.gates))
}

/// Embeds the batch (token lookup for text rows, projection for vision
/// rows), runs every block and returns tied-head logits.
pub fn model_forward<T: Scalar>(
    g: &mut Graph<T>,
    params: &ModelParams<Var>,
    batch: &Batch<T>,
    config: &ModelConfig,
) -> Result<ForwardPass> {
    let text = if batch.text_ids.is_empty() {
        None
    } else {
        Some(g.gather_rows(params.embed, &batch.text_ids)?)
    };
    let vision = match (&batch.vision_features, &params.projection) {
        (None, _) => None,
        (Some(_), None) => return Err(ModelError::NoVisionPath),
        (Some(f), Some(p)) => {
            let f = g.constant(f.clone())?;
            Some(project_visual(g, f, p)?)
        }
    };
    let mut h = g.merge_rows(vision, text, &batch.is_vision)?;
    let mut gates = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let (next, gate) = pill_block_forward(g, h, layer, batch, config.n_heads)?;
        h = next;
        gates.push(gate);
    }
    let h = g.rmsnorm(h, params.final_norm)?;
    let logits = g.matmul_nt(h, params.embed)?;
    Ok(ForwardPass { logits, gates })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn base_model_has_only_base_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = PillModel::<f64>::new_base(ModelConfig::tiny(12), &mut rng).unwrap();
        assert!(!m.has_injections());
        assert!(m.store().iter().all(|(_, p)| p.is_base()));
        assert_eq!(m.store().len(), 2 + 9 * 2);
    }

    #[test]
    fn injections_start_in_identity_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = PillModel::<f64>::new_base(ModelConfig::tiny(12), &mut rng).unwrap();
        m.attach_injections(&mut rng).unwrap();
        assert!(m.has_injections());
        for (_, p) in m.store().iter().filter(|(_, p)| !p.is_base()) {
            let zero = p.value.data().iter().all(|&x| x == 0.0);
            let is_down = p.name.ends_with("down1.weight") || p.name.ends_with("down2.weight");
            assert_eq!(zero, !is_down, "{}", p.name);
        }
        let bound = 1.0 / 4.0;
        let d = m.param("layers.1.a_t.down2.weight").unwrap();
        assert!(d.value.data().iter().all(|x| x.abs() <= bound));
    }

    #[test]
    fn from_store_rejects_wrong_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = PillModel::<f64>::new_base(ModelConfig::tiny(12), &mut rng).unwrap();
        let mut other = *m.config();
        other.d_ffn += 2;
        let err = PillModel::from_store(other, m.store().clone()).unwrap_err();
        assert!(matches!(err, ModelError::ParamShape { .. }));
    }
}
