//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive in execution order, so the node list
//! is already topologically sorted: parents always precede children. Calling
//! [`Graph::backward`] walks the tape once in reverse and accumulates
//! gradients only into nodes that require them. Parameters that enter the
//! graph with `requires_grad = false` never receive a gradient buffer, and
//! their own weight gradients are never computed.
//!
//! Each primitive checks its output for NaN/Inf and fails instead of
//! producing a poisoned value.

use crate::scalar::Scalar;
use crate::tensor::{Result, Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub const RMS_EPS: f64 = 1e-6;
pub const ROPE_BASE: f64 = 10_000.0;

/// Row layout of several sequences concatenated along the row axis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segments {
    bounds: Vec<(usize, usize)>,
    row_segment: Vec<usize>,
}

impl Segments {
    pub fn from_lengths(lengths: &[usize]) -> Self {
        let mut bounds = Vec::with_capacity(lengths.len());
        let mut row_segment = Vec::with_capacity(lengths.iter().sum());
        let mut start = 0;
        for (s, &len) in lengths.iter().enumerate() {
            bounds.push((start, start + len));
            row_segment.extend(std::iter::repeat_n(s, len));
            start += len;
        }
        Self {
            bounds,
            row_segment,
        }
    }

    pub fn single(len: usize) -> Self {
        Self::from_lengths(&[len])
    }

    pub fn len(&self) -> usize {
        self.bounds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bounds.is_empty()
    }

    pub fn total_rows(&self) -> usize {
        self.row_segment.len()
    }

    pub fn bounds(&self) -> &[(usize, usize)] {
        &self.bounds
    }

    pub fn segment_of(&self, row: usize) -> usize {
        self.row_segment[row]
    }

    /// Position of each row within its own sequence.
    pub fn positions(&self) -> Vec<usize> {
        self.bounds
            .iter()
            .flat_map(|&(s, e)| 0..e - s)
            .collect()
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, b_trans: bool },
    Add(Var, Var),
    Mul(Var, Var),
    AddBias { x: Var, bias: Var },
    Scale { x: Var, factor: T },
    Silu(Var),
    Tanh(Var),
    Sum(Var),
    RmsNorm { x: Var, weight: Var, inv_rms: Vec<T> },
    Softmax(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, rows: Vec<usize>, probs: Vec<T> },
    Gather { table: Var, ids: Vec<usize> },
    Merge { first: Option<Var>, second: Option<Var>, take_first: Vec<bool> },
    Select { on_true: Var, on_false: Var, mask: Vec<bool> },
    Rope { x: Var, positions: Vec<usize>, n_heads: usize },
    SegmentMean { x: Var, mask: Vec<bool>, segments: Segments },
    GateRows { values: Var, gates: Var, mask: Vec<bool>, segments: Segments, n_heads: usize },
    Attention { q: Var, k: Var, v: Var, segments: Segments, n_heads: usize, probs: Vec<Vec<T>> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backpropagated: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, left: &[usize], right: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

fn rope_angle(pos: usize, pair: usize, d_head: usize) -> f64 {
    let inv_freq = ROPE_BASE.powf(-((2 * pair) as f64) / d_head as f64);
    pos as f64 * inv_freq
}

fn rotate<T: Scalar>(
    data: &mut [T],
    cols: usize,
    positions: &[usize],
    n_heads: usize,
    inverse: bool,
) {
    let d_head = cols / n_heads;
    let sign = if inverse { -1.0 } else { 1.0 };
    for (r, &pos) in positions.iter().enumerate() {
        let row = &mut data[r * cols..(r + 1) * cols];
        for pair in 0..d_head / 2 {
            let angle = sign * rope_angle(pos, pair, d_head);
            let (s, c) = (T::lit(angle.sin()), T::lit(angle.cos()));
            for h in 0..n_heads {
                let i = h * d_head + 2 * pair;
                let (x0, x1) = (row[i], row[i + 1]);
                row[i] = x0 * c - x1 * s;
                row[i + 1] = x0 * s + x1 * c;
            }
        }
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backpropagated: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backpropagated loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0)?.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grad(v)?;
        Some(Tensor::new(self.value(v).shape().to_vec(), g.to_vec()).expect("grad shape"))
    }

    pub fn reset_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backpropagated = false;
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push("leaf", value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    fn push(
        &mut self,
        op_name: &'static str,
        value: Tensor<T>,
        op: Op<T>,
        requires_grad: bool,
    ) -> Result<Var> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let shape = self.value(v).shape();
        if shape.len() != 2 {
            return Err(TensorError::InvalidArgument {
                op,
                msg: format!("expected a matrix, got shape {shape:?}"),
            });
        }
        Ok((shape[0], shape[1]))
    }

    fn mask_len(&self, op: &'static str, mask_len: usize, rows: usize) -> Result<()> {
        if mask_len != rows {
            return Err(TensorError::InvalidArgument {
                op,
                msg: format!("mask covers {mask_len} rows but tensor has {rows}"),
            });
        }
        Ok(())
    }

    /// `a [m x k] * b [k x n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a [m x k] * b^T` where `b` is stored as `[n x k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, b_trans: bool) -> Result<Var> {
        let op = if b_trans { "matmul_nt" } else { "matmul" };
        let (m, k) = self.matrix_dims(op, a)?;
        let (br, bc) = self.matrix_dims(op, b)?;
        let (bk, n) = if b_trans { (bc, br) } else { (br, bc) };
        if k != bk {
            return Err(mismatch(op, self.value(a).shape(), self.value(b).shape()));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            false,
            self.value(b).data(),
            b_trans,
            T::zero(),
            &mut out,
        );
        let rg = self.rg(&[a, b]);
        self.push(op, Tensor::matrix(m, n, out)?, Op::MatMul { a, b, b_trans }, rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(mismatch(op, sa, sb));
        }
        Ok(())
    }

    fn zip_with(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_shape(op_name, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(op_name, value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn map(&mut self, op_name: &'static str, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let vx = self.value(x);
        let value = Tensor::new(vx.shape().to_vec(), vx.data().iter().map(|&v| f(v)).collect())?;
        let rg = self.rg(&[x]);
        self.push(op_name, value, op, rg)
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        self.map("scale", x, |v| v * factor, Op::Scale { x, factor })
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.map("silu", x, |v| v * sigmoid(v), Op::Silu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map("tanh", x, T::tanh, Op::Tanh(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push("sum", Tensor::scalar(total), Op::Sum(x), rg)
    }

    /// Adds a `[d]` bias to every row of `x [.. x d]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let d = vx.last_dim();
        if vb.shape() != [d] {
            return Err(mismatch("add_bias", vx.shape(), vb.shape()));
        }
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(d) {
            for (o, &b) in row.iter_mut().zip(vb.data()) {
                *o += b;
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(&[x, bias]);
        self.push("add_bias", value, Op::AddBias { x, bias }, rg)
    }

    /// Row-wise RMS normalisation with a learned `[d]` gain.
    pub fn rmsnorm(&mut self, x: Var, weight: Var) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(weight));
        let d = vx.last_dim();
        if vw.shape() != [d] {
            return Err(mismatch("rmsnorm", vx.shape(), vw.shape()));
        }
        let eps = T::lit(RMS_EPS);
        let dd = T::lit(d as f64);
        let mut data = vx.data().to_vec();
        let mut inv_rms = Vec::with_capacity(vx.rows());
        for row in data.chunks_mut(d) {
            let ms = row.iter().map(|&v| v * v).sum::<T>() / dd;
            let r = T::one() / (ms + eps).sqrt();
            for (o, &w) in row.iter_mut().zip(vw.data()) {
                *o = *o * r * w;
            }
            inv_rms.push(r);
        }
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(&[x, weight]);
        self.push("rmsnorm", value, Op::RmsNorm { x, weight, inv_rms }, rg)
    }

    /// Max-stabilised softmax over the trailing dimension.
    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if !vx.all_finite() {
            return Err(TensorError::NonFinite { op: "softmax" });
        }
        let d = vx.last_dim();
        let mut data = vx.data().to_vec();
        data.chunks_mut(d).for_each(softmax_in_place);
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        self.push("softmax", value, Op::Softmax(x), rg)
    }

    /// Mean negative log-likelihood of `targets` over rows where `mask` holds.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (n, v) = self.matrix_dims("cross_entropy", logits)?;
        self.mask_len("cross_entropy", mask.len(), n)?;
        self.mask_len("cross_entropy", targets.len(), n)?;
        let rows: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
        if rows.is_empty() {
            return Err(TensorError::EmptyLoss);
        }
        let lv = self.value(logits);
        let mut probs = Vec::with_capacity(rows.len() * v);
        let mut total = T::zero();
        for &r in &rows {
            let t = targets[r];
            if t >= v {
                return Err(TensorError::InvalidArgument {
                    op: "cross_entropy",
                    msg: format!("target {t} outside vocabulary of {v}"),
                });
            }
            let row = lv.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let log_z = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
            total += log_z - row[t];
            probs.extend(row.iter().map(|&x| (x - log_z).exp()));
        }
        let loss = total / T::lit(rows.len() as f64);
        let rg = self.rg(&[logits]);
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                rows,
                probs,
            },
            rg,
        )
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.matrix_dims("gather_rows", table)?;
        if ids.is_empty() {
            return Err(TensorError::InvalidArgument {
                op: "gather_rows",
                msg: "no rows requested".into(),
            });
        }
        let vt = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::InvalidArgument {
                    op: "gather_rows",
                    msg: format!("row {id} outside table of {v}"),
                });
            }
            data.extend_from_slice(vt.row(id));
        }
        let rg = self.rg(&[table]);
        self.push(
            "gather_rows",
            Tensor::matrix(ids.len(), d, data)?,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    /// Interleaves the rows of two matrices. Row `i` of the output is taken
    /// from the next unused row of `first` when `take_first[i]`, otherwise
    /// from `second`. Either operand may be absent when the mask is uniform.
    pub fn merge_rows(&mut self, first: Option<Var>, second: Option<Var>, take_first: &[bool]) -> Result<Var> {
        let n_first = take_first.iter().filter(|&&f| f).count();
        let n_second = take_first.len() - n_first;
        let check = |g: &Self, v: Option<Var>, want: usize| -> Result<Option<usize>> {
            match v {
                None if want == 0 => Ok(None),
                None => Err(TensorError::InvalidArgument {
                    op: "merge_rows",
                    msg: format!("{want} rows requested from a missing operand"),
                }),
                Some(v) => {
                    let (r, c) = g.matrix_dims("merge_rows", v)?;
                    if r != want {
                        return Err(TensorError::InvalidArgument {
                            op: "merge_rows",
                            msg: format!("operand has {r} rows, mask selects {want}"),
                        });
                    }
                    Ok(Some(c))
                }
            }
        };
        let c1 = check(self, first, n_first)?;
        let c2 = check(self, second, n_second)?;
        let d = match (c1, c2) {
            (Some(a), Some(b)) if a != b => {
                return Err(mismatch("merge_rows", &[n_first, a], &[n_second, b]))
            }
            (Some(a), _) | (None, Some(a)) => a,
            (None, None) => {
                return Err(TensorError::InvalidArgument {
                    op: "merge_rows",
                    msg: "empty merge".into(),
                })
            }
        };
        let mut data = Vec::with_capacity(take_first.len() * d);
        let (mut i1, mut i2) = (0, 0);
        for &f in take_first {
            if f {
                data.extend_from_slice(self.value(first.unwrap()).row(i1));
                i1 += 1;
            } else {
                data.extend_from_slice(self.value(second.unwrap()).row(i2));
                i2 += 1;
            }
        }
        let rg = first.is_some_and(|v| self.requires_grad(v)) || second.is_some_and(|v| self.requires_grad(v));
        self.push(
            "merge_rows",
            Tensor::matrix(take_first.len(), d, data)?,
            Op::Merge {
                first,
                second,
                take_first: take_first.to_vec(),
            },
            rg,
        )
    }

    /// `out[i] = mask[i] ? on_true[i] : on_false[i]` row-wise.
    pub fn select_rows(&mut self, on_true: Var, on_false: Var, mask: &[bool]) -> Result<Var> {
        self.same_shape("select_rows", on_true, on_false)?;
        let rows = self.value(on_true).rows();
        self.mask_len("select_rows", mask.len(), rows)?;
        let (vt, vf) = (self.value(on_true), self.value(on_false));
        let mut data = Vec::with_capacity(vt.numel());
        for (r, &m) in mask.iter().enumerate() {
            data.extend_from_slice(if m { vt.row(r) } else { vf.row(r) });
        }
        let value = Tensor::new(vt.shape().to_vec(), data)?;
        let rg = self.rg(&[on_true, on_false]);
        self.push(
            "select_rows",
            value,
            Op::Select {
                on_true,
                on_false,
                mask: mask.to_vec(),
            },
            rg,
        )
    }

    /// Rotary position embedding applied per head to adjacent channel pairs.
    pub fn rope(&mut self, x: Var, positions: &[usize], n_heads: usize) -> Result<Var> {
        let (n, d) = self.matrix_dims("rope", x)?;
        self.mask_len("rope", positions.len(), n)?;
        if n_heads == 0 || !d.is_multiple_of(n_heads) || !(d / n_heads).is_multiple_of(2) {
            return Err(TensorError::InvalidArgument {
                op: "rope",
                msg: format!("{d} channels cannot form {n_heads} even-width heads"),
            });
        }
        let mut data = self.value(x).data().to_vec();
        rotate(&mut data, d, positions, n_heads, false);
        let rg = self.rg(&[x]);
        self.push(
            "rope",
            Tensor::matrix(n, d, data)?,
            Op::Rope {
                x,
                positions: positions.to_vec(),
                n_heads,
            },
            rg,
        )
    }

    /// Per-segment mean of the rows selected by `mask`; zero for segments
    /// without selected rows.
    pub fn segment_mean_rows(&mut self, x: Var, mask: &[bool], segments: &Segments) -> Result<Var> {
        let (n, d) = self.matrix_dims("segment_mean_rows", x)?;
        self.mask_len("segment_mean_rows", mask.len(), n)?;
        self.mask_len("segment_mean_rows", segments.total_rows(), n)?;
        let vx = self.value(x);
        let mut data = vec![T::zero(); segments.len() * d];
        for (s, &(start, end)) in segments.bounds().iter().enumerate() {
            let count = (start..end).filter(|&r| mask[r]).count();
            if count == 0 {
                continue;
            }
            let inv = T::one() / T::lit(count as f64);
            let out = &mut data[s * d..(s + 1) * d];
            for r in (start..end).filter(|&r| mask[r]) {
                for (o, &v) in out.iter_mut().zip(vx.row(r)) {
                    *o += v * inv;
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(
            "segment_mean_rows",
            Tensor::matrix(segments.len(), d, data)?,
            Op::SegmentMean {
                x,
                mask: mask.to_vec(),
                segments: segments.clone(),
            },
            rg,
        )
    }

    /// Scales each head block of the masked rows of `values` by that row's
    /// segment gate `gates[segment, head]`. Unmasked rows pass unchanged.
    pub fn gate_rows(
        &mut self,
        values: Var,
        gates: Var,
        mask: &[bool],
        segments: &Segments,
        n_heads: usize,
    ) -> Result<Var> {
        let (n, d) = self.matrix_dims("gate_rows", values)?;
        let (gs, gh) = self.matrix_dims("gate_rows", gates)?;
        self.mask_len("gate_rows", mask.len(), n)?;
        self.mask_len("gate_rows", segments.total_rows(), n)?;
        if gs != segments.len() || gh != n_heads || d % n_heads != 0 {
            return Err(mismatch("gate_rows", &[segments.len(), n_heads], &[gs, gh]));
        }
        let d_head = d / n_heads;
        let (vv, vg) = (self.value(values), self.value(gates));
        let mut data = vv.data().to_vec();
        for r in (0..n).filter(|&r| mask[r]) {
            let g = vg.row(segments.segment_of(r));
            for (h, &gate) in g.iter().enumerate() {
                for x in &mut data[r * d + h * d_head..r * d + (h + 1) * d_head] {
                    *x *= gate;
                }
            }
        }
        let rg = self.rg(&[values, gates]);
        self.push(
            "gate_rows",
            Tensor::matrix(n, d, data)?,
            Op::GateRows {
                values,
                gates,
                mask: mask.to_vec(),
                segments: segments.clone(),
                n_heads,
            },
            rg,
        )
    }

    /// Causal multi-head scaled dot-product attention, computed
    /// independently within each segment.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, segments: &Segments, n_heads: usize) -> Result<Var> {
        self.same_shape("causal_attention", q, k)?;
        self.same_shape("causal_attention", q, v)?;
        let (n, d) = self.matrix_dims("causal_attention", q)?;
        if n == 0 {
            return Err(TensorError::InvalidArgument {
                op: "causal_attention",
                msg: "empty sequence".into(),
            });
        }
        self.mask_len("causal_attention", segments.total_rows(), n)?;
        if n_heads == 0 || d % n_heads != 0 {
            return Err(TensorError::InvalidArgument {
                op: "causal_attention",
                msg: format!("{d} channels cannot form {n_heads} heads"),
            });
        }
        let dh = d / n_heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let (vq, vk, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![T::zero(); n * d];
        let mut probs = Vec::with_capacity(segments.len() * n_heads);
        for &(start, end) in segments.bounds() {
            let t = end - start;
            for h in 0..n_heads {
                let col = h * dh;
                let mut p = vec![T::zero(); t * t];
                for i in 0..t {
                    let qi = &vq[(start + i) * d + col..(start + i) * d + col + dh];
                    let row = &mut p[i * t..i * t + i + 1];
                    for (j, s) in row.iter_mut().enumerate() {
                        let kj = &vk[(start + j) * d + col..(start + j) * d + col + dh];
                        *s = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale;
                    }
                    softmax_in_place(row);
                    let oi = &mut out[(start + i) * d + col..(start + i) * d + col + dh];
                    for (j, &pij) in row.iter().enumerate() {
                        let vj = &vv[(start + j) * d + col..(start + j) * d + col + dh];
                        for (o, &x) in oi.iter_mut().zip(vj) {
                            *o += pij * x;
                        }
                    }
                }
                probs.push(p);
            }
        }
        let rg = self.rg(&[q, k, v]);
        self.push(
            "causal_attention",
            Tensor::matrix(n, d, out)?,
            Op::Attention {
                q,
                k,
                v,
                segments: segments.clone(),
                n_heads,
                probs,
            },
            rg,
        )
    }

    /// Backpropagates from a scalar `loss`. Gradients accumulate only into
    /// nodes reachable from `loss` that require them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backpropagated {
            return Err(TensorError::AlreadyBackpropagated);
        }
        let shape = self.value(loss).shape();
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NotScalar(shape.to_vec()));
        }
        self.backpropagated = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(gout) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &gout);
            self.grads[i] = Some(gout);
        }
        for (i, g) in self.grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|x| !x.is_finite()) {
                    log_nonfinite(i);
                    return Err(TensorError::NonFinite { op: "backward" });
                }
            }
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, gout: &[T]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let node = &nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, b_trans } => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = node.value.shape()[1];
                if let Some(ga) = acc(nodes, grads, *a) {
                    // dA = dC * op(B)^T
                    T::gemm(m, n, k, T::one(), gout, false, vb.data(), !b_trans, T::one(), ga);
                }
                if let Some(gb) = acc(nodes, grads, *b) {
                    if *b_trans {
                        // d(B stored n x k) = dC^T * A
                        T::gemm(n, m, k, T::one(), gout, true, va.data(), false, T::one(), gb);
                    } else {
                        T::gemm(k, m, n, T::one(), va.data(), true, gout, false, T::one(), gb);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(g) = acc(nodes, grads, v) {
                        g.iter_mut().zip(gout).for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    let ov = nodes[other.0].value.data();
                    if let Some(g) = acc(nodes, grads, v) {
                        for ((x, &y), &o) in g.iter_mut().zip(gout).zip(ov) {
                            *x += y * o;
                        }
                    }
                }
            }
            Op::AddBias { x, bias } => {
                if let Some(g) = acc(nodes, grads, *x) {
                    g.iter_mut().zip(gout).for_each(|(a, &b)| *a += b);
                }
                let d = nodes[bias.0].value.numel();
                if let Some(g) = acc(nodes, grads, *bias) {
                    for row in gout.chunks(d) {
                        g.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                    }
                }
            }
            Op::Scale { x, factor } => {
                if let Some(g) = acc(nodes, grads, *x) {
                    g.iter_mut().zip(gout).for_each(|(a, &b)| *a += b * *factor);
                }
            }
            Op::Silu(x) => {
                let vx = nodes[x.0].value.data();
                if let Some(g) = acc(nodes, grads, *x) {
                    for ((a, &b), &xv) in g.iter_mut().zip(gout).zip(vx) {
                        let s = sigmoid(xv);
                        *a += b * s * (T::one() + xv * (T::one() - s));
                    }
                }
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                if let Some(g) = acc(nodes, grads, *x) {
                    for ((a, &b), &yv) in g.iter_mut().zip(gout).zip(y) {
                        *a += b * (T::one() - yv * yv);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(g) = acc(nodes, grads, *x) {
                    g.iter_mut().for_each(|a| *a += gout[0]);
                }
            }
            Op::RmsNorm { x, weight, inv_rms } => {
                let (vx, vw) = (&nodes[x.0].value, nodes[weight.0].value.data());
                let d = vw.len();
                let dd = T::lit(d as f64);
                if let Some(gw) = acc(nodes, grads, *weight) {
                    for ((row, go), &r) in vx.data().chunks(d).zip(gout.chunks(d)).zip(inv_rms) {
                        for ((a, &xv), &g) in gw.iter_mut().zip(row).zip(go) {
                            *a += g * xv * r;
                        }
                    }
                }
                if let Some(gx) = acc(nodes, grads, *x) {
                    for (((gr, row), go), &r) in gx.chunks_mut(d).zip(vx.data().chunks(d)).zip(gout.chunks(d)).zip(inv_rms) {
                        // with xhat = x r and u = dy * w:
                        // dx = r (u - xhat mean(u * xhat))
                        let dot = row.iter().zip(go).zip(vw).map(|((&xv, &g), &w)| g * w * xv * r).sum::<T>() / dd;
                        for (((a, &xv), &g), &w) in gr.iter_mut().zip(row).zip(go).zip(vw) {
                            *a += r * (g * w - xv * r * dot);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let d = y.last_dim();
                if let Some(g) = acc(nodes, grads, *x) {
                    for ((gr, yr), go) in g.chunks_mut(d).zip(y.data().chunks(d)).zip(gout.chunks(d)) {
                        let dot = yr.iter().zip(go).map(|(&a, &b)| a * b).sum::<T>();
                        for ((a, &yv), &gv) in gr.iter_mut().zip(yr).zip(go) {
                            *a += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, rows, probs } => {
                let v = nodes[logits.0].value.shape()[1];
                let scale = gout[0] / T::lit(rows.len() as f64);
                if let Some(g) = acc(nodes, grads, *logits) {
                    for (p, &r) in probs.chunks(v).zip(rows) {
                        let gr = &mut g[r * v..(r + 1) * v];
                        for (a, &pv) in gr.iter_mut().zip(p) {
                            *a += pv * scale;
                        }
                        gr[targets[r]] -= scale;
                    }
                }
            }
            Op::Gather { table, ids } => {
                let d = node.value.shape()[1];
                if let Some(g) = acc(nodes, grads, *table) {
                    for (&id, go) in ids.iter().zip(gout.chunks(d)) {
                        g[id * d..(id + 1) * d].iter_mut().zip(go).for_each(|(a, &b)| *a += b);
                    }
                }
            }
            Op::Merge { first, second, take_first } => {
                let d = node.value.shape()[1];
                for (v, want) in [(*first, true), (*second, false)] {
                    if let Some(g) = v.and_then(|v| acc(nodes, grads, v)) {
                        let mut next = 0;
                        for (r, &f) in take_first.iter().enumerate() {
                            if f == want {
                                g[next * d..(next + 1) * d]
                                    .iter_mut()
                                    .zip(&gout[r * d..(r + 1) * d])
                                    .for_each(|(a, &b)| *a += b);
                                next += 1;
                            }
                        }
                    }
                }
            }
            Op::Select { on_true, on_false, mask } => {
                let d = node.value.last_dim();
                for (v, want) in [(*on_true, true), (*on_false, false)] {
                    if let Some(g) = acc(nodes, grads, v) {
                        for (r, &m) in mask.iter().enumerate() {
                            if m == want {
                                g[r * d..(r + 1) * d]
                                    .iter_mut()
                                    .zip(&gout[r * d..(r + 1) * d])
                                    .for_each(|(a, &b)| *a += b);
                            }
                        }
                    }
                }
            }
            Op::Rope { x, positions, n_heads } => {
                let d = node.value.shape()[1];
                if let Some(g) = acc(nodes, grads, *x) {
                    let mut back = gout.to_vec();
                    rotate(&mut back, d, positions, *n_heads, true);
                    g.iter_mut().zip(&back).for_each(|(a, &b)| *a += b);
                }
            }
            Op::SegmentMean { x, mask, segments } => {
                let d = node.value.shape()[1];
                if let Some(g) = acc(nodes, grads, *x) {
                    for (s, &(start, end)) in segments.bounds().iter().enumerate() {
                        let count = (start..end).filter(|&r| mask[r]).count();
                        if count == 0 {
                            continue;
                        }
                        let inv = T::one() / T::lit(count as f64);
                        let go = &gout[s * d..(s + 1) * d];
                        for r in (start..end).filter(|&r| mask[r]) {
                            g[r * d..(r + 1) * d].iter_mut().zip(go).for_each(|(a, &b)| *a += b * inv);
                        }
                    }
                }
            }
            Op::GateRows { values, gates, mask, segments, n_heads } => {
                let d = node.value.shape()[1];
                let dh = d / n_heads;
                let (vv, vg) = (&nodes[values.0].value, &nodes[gates.0].value);
                if let Some(g) = acc(nodes, grads, *values) {
                    for r in 0..mask.len() {
                        let row = &mut g[r * d..(r + 1) * d];
                        let go = &gout[r * d..(r + 1) * d];
                        if mask[r] {
                            let gate = vg.row(segments.segment_of(r));
                            for h in 0..*n_heads {
                                for c in h * dh..(h + 1) * dh {
                                    row[c] += go[c] * gate[h];
                                }
                            }
                        } else {
                            row.iter_mut().zip(go).for_each(|(a, &b)| *a += b);
                        }
                    }
                }
                if let Some(g) = acc(nodes, grads, *gates) {
                    for r in (0..mask.len()).filter(|&r| mask[r]) {
                        let s = segments.segment_of(r);
                        let (row, go) = (vv.row(r), &gout[r * d..(r + 1) * d]);
                        for h in 0..*n_heads {
                            let dot: T = (h * dh..(h + 1) * dh).map(|c| row[c] * go[c]).sum();
                            g[s * n_heads + h] += dot;
                        }
                    }
                }
            }
            Op::Attention { q, k, v, segments, n_heads, probs } => {
                let d = node.value.shape()[1];
                let dh = d / n_heads;
                let scale = T::one() / T::lit(dh as f64).sqrt();
                let (vq, vk, vv) = (nodes[q.0].value.data(), nodes[k.0].value.data(), nodes[v.0].value.data());
                let n = vq.len();
                let mut dq = vec![T::zero(); n];
                let mut dk = vec![T::zero(); n];
                let mut dv = vec![T::zero(); n];
                for (s, &(start, end)) in segments.bounds().iter().enumerate() {
                    let t = end - start;
                    for h in 0..*n_heads {
                        let p = &probs[s * n_heads + h];
                        let col = h * dh;
                        let at = |r: usize| (start + r) * d + col;
                        let mut ds = vec![T::zero(); t];
                        for i in 0..t {
                            let go = &gout[at(i)..at(i) + dh];
                            let pi = &p[i * t..i * t + i + 1];
                            for (j, &pij) in pi.iter().enumerate() {
                                let vj = &vv[at(j)..at(j) + dh];
                                ds[j] = go.iter().zip(vj).map(|(&a, &b)| a * b).sum();
                                for (a, &b) in dv[at(j)..at(j) + dh].iter_mut().zip(go) {
                                    *a += pij * b;
                                }
                            }
                            let dot: T = pi.iter().zip(&ds).map(|(&a, &b)| a * b).sum();
                            for (j, &pij) in pi.iter().enumerate() {
                                let dsij = pij * (ds[j] - dot) * scale;
                                for c in 0..dh {
                                    dq[at(i) + c] += dsij * vk[at(j) + c];
                                    dk[at(j) + c] += dsij * vq[at(i) + c];
                                }
                            }
                        }
                    }
                }
                for (var, buf) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if let Some(g) = acc(nodes, grads, var) {
                        g.iter_mut().zip(&buf).for_each(|(a, &b)| *a += b);
                    }
                }
            }
        }
    }
}

/// Accumulator of `v`, allocated on first use; `None` when `v` does not
/// take gradients.
fn acc<'a, T: Scalar>(nodes: &[Node<T>], grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.numel()]))
}

fn log_nonfinite(node: usize) {
    eprintln!("backward: non-finite gradient at node {node}");
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let i = g.constant(Tensor::identity(2)).unwrap();
        let z = g.constant(Tensor::zeros(&[2, 2])).unwrap();
        let ai = g.matmul(a, i).unwrap();
        let az = g.matmul(a, z).unwrap();
        assert_eq!(g.value(ai).data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(g.value(az).data(), &[0.0; 4]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::<f64>::zeros(&[3, 4])).unwrap();
        let b = g.constant(Tensor::<f64>::zeros(&[3, 2])).unwrap();
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "matmul",
                left: vec![3, 4],
                right: vec![3, 2]
            }
        );
    }

    #[test]
    fn square_has_gradient_six_at_three() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(3.0), true).unwrap();
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn frozen_leaf_gets_no_gradient() {
        let mut g = Graph::<f64>::new();
        let w = g.leaf(t(&[2, 2], &[1.0, 0.5, -0.5, 2.0]), false).unwrap();
        let x = g.leaf(t(&[1, 2], &[0.3, -0.7]), true).unwrap();
        let y = g.matmul(x, w).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(w).is_none());
        assert_eq!(g.grad(x).unwrap(), &[1.5, 1.5]);
    }

    #[test]
    fn unreachable_leaf_untouched() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(2.0), true).unwrap();
        let other = g.leaf(Tensor::scalar(5.0), true).unwrap();
        let y = g.scale(x, 3.0).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[3.0]);
        assert!(g.grad(other).is_none());
    }

    #[test]
    fn second_backward_requires_reset() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(2.0), true).unwrap();
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.backward(y), Err(TensorError::AlreadyBackpropagated));
        g.reset_grads();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::<f64>::zeros(&[2, 2]), true).unwrap();
        assert!(matches!(g.backward(x), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2], &[0.0, 0.0])).unwrap();
        let b = g.constant(t(&[3], &[1000.0, 1000.0, 1000.0])).unwrap();
        let sa = g.softmax_lastdim(a).unwrap();
        let sb = g.softmax_lastdim(b).unwrap();
        assert_eq!(g.value(sa).data(), &[0.5, 0.5]);
        for &p in g.value(sb).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rejects_non_finite_input() {
        let mut g = Graph::<f64>::new();
        // leaf creation already rejects NaN
        assert!(g.constant(t(&[2], &[f64::NAN, 0.0])).is_err());
    }

    #[test]
    fn overflowing_op_raises() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1], &[1e200])).unwrap();
        let err = g.mul(x, x).unwrap_err();
        assert_eq!(err, TensorError::NonFinite { op: "mul" });
    }

    #[test]
    fn silu_and_tanh_values() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[4], &[0.0, 1.0, -20.0, 0.5])).unwrap();
        let s = g.silu(x).unwrap();
        let th = g.tanh(x).unwrap();
        let sv = g.value(s).data();
        assert_eq!(sv[0], 0.0);
        // 1 / (1 + e^-1)
        assert!((sv[1] - 0.731_058_578_630_004_9).abs() < 1e-15);
        // -20 / (1 + e^20), mpmath at 30 digits
        assert!((sv[2] - (-4.122_307_236_380_407e-8)).abs() < 1e-20);
        let tv = g.value(th).data();
        assert_eq!(tv[0], 0.0);
        assert!((tv[3] - 0.462_117_157_260_009_8).abs() < 1e-15);
        let big = g.constant(Tensor::scalar(1e6)).unwrap();
        let tb = g.tanh(big).unwrap();
        assert_eq!(g.value(tb).item(), 1.0);
    }

    #[test]
    fn rmsnorm_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 4], &[-3.0, -3.0, -3.0, -3.0, 0.0, 0.0, 0.0, 0.0])).unwrap();
        let w = g.constant(Tensor::ones(&[4])).unwrap();
        let y = g.rmsnorm(x, w).unwrap();
        let v = g.value(y).data();
        for &a in &v[..4] {
            assert!((a + 1.0).abs() < 1e-6);
        }
        assert_eq!(&v[4..], &[0.0; 4]);
    }

    #[test]
    fn cross_entropy_uniform_is_log_vocab() {
        let mut g = Graph::<f64>::new();
        let logits = g.constant(Tensor::zeros(&[3, 4])).unwrap();
        let loss = g.cross_entropy(logits, &[0, 3, 1], &[true, true, false]).unwrap();
        assert!((g.value(loss).item() - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_empty_mask_errors() {
        let mut g = Graph::<f64>::new();
        let logits = g.constant(Tensor::zeros(&[2, 4])).unwrap();
        assert_eq!(g.cross_entropy(logits, &[0, 1], &[false, false]), Err(TensorError::EmptyLoss));
    }

    #[test]
    fn cross_entropy_ignores_unmasked_rows() {
        let run = |other: f64| {
            let mut g = Graph::<f64>::new();
            let logits = g.constant(t(&[2, 3], &[0.2, 1.5, -0.3, other, 0.0, 0.0])).unwrap();
            let loss = g.cross_entropy(logits, &[1, 2], &[true, false]).unwrap();
            g.value(loss).item()
        };
        assert_eq!(run(0.0).to_bits(), run(123.0).to_bits());
    }

    #[test]
    fn cross_entropy_margin_limit() {
        let mut g = Graph::<f64>::new();
        let logits = g.constant(t(&[1, 3], &[60.0, 0.0, 0.0])).unwrap();
        let loss = g.cross_entropy(logits, &[0], &[true]).unwrap();
        assert!(g.value(loss).item() < 1e-25);
    }

    #[test]
    fn merge_rows_interleaves() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2, 1], &[1.0, 2.0])).unwrap();
        let b = g.constant(t(&[1, 1], &[9.0])).unwrap();
        let m = g.merge_rows(Some(a), Some(b), &[true, false, true]).unwrap();
        assert_eq!(g.value(m).data(), &[1.0, 9.0, 2.0]);
        assert!(g.merge_rows(Some(a), None, &[true, false, true]).is_err());
    }

    #[test]
    fn segments_positions_restart() {
        let s = Segments::from_lengths(&[3, 2]);
        assert_eq!(s.positions(), vec![0, 1, 2, 0, 1]);
        assert_eq!(s.segment_of(3), 1);
    }
}
