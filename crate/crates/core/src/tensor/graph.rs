use std::collections::HashMap;

use rand::Rng;

use super::gemm::{gemm, MatRef};
use super::{first_non_finite, ParamId, ParamStore, Result, Tensor, TensorError};

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        groups: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBroadcast(Var, Var),
    MulBroadcast(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulConst(Var, Vec<f64>),
    Log(Var),
    Exp(Var),
    Sigmoid(Var),
    Gelu {
        x: Var,
        tanh: Vec<f64>,
    },
    ClampMin(Var, f64),
    Softmax(Var),
    LogSoftmax(Var),
    MaskedSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    GatherRows(Var, Vec<usize>),
    Gather(Var, Vec<usize>),
    SwapAxes12 {
        x: Var,
        dims: [usize; 4],
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    BceWithLogits {
        z: Var,
        targets: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A dynamic tape. Nodes are appended in creation order, which is a valid
/// topological order for the reverse sweep.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    no_grad: bool,
    detached: Vec<Tensor>,
    frozen: Option<Vec<Tensor>>,
}

/// Per-node gradients from one backward sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<ParamId, Var>,
}

impl Gradients {
    /// Gradient of a leaf (parameter, variable or constant) reached by the sweep.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of every parameter in `store` (zeros for parameters that were
    /// not used or received no gradient).
    pub fn for_params(&self, store: &ParamStore) -> Vec<Tensor> {
        store
            .ids()
            .map(|id| {
                let shape = store.value(id).shape();
                match self.params.get(&id).and_then(|v| self.get(*v)) {
                    Some(g) => Tensor::new(shape.to_vec(), g.to_vec()).expect("grad shape"),
                    None => Tensor::zeros(shape),
                }
            })
            .collect()
    }
}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

/// `tanh` through one `exp`; saturates to ±1 without overflow issues.
fn fast_tanh(u: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph that records no gradient requirements (inference passes).
    pub fn no_grad() -> Self {
        Self {
            no_grad: true,
            ..Self::default()
        }
    }

    /// Substitute `values` for the outputs of the stop-gradient calls, in
    /// call order. Holding detached quantities fixed makes finite
    /// differences measure the same function autodiff differentiates.
    pub fn with_frozen_detached(mut self, values: Vec<Tensor>) -> Self {
        self.frozen = Some(values);
        self
    }

    /// Values produced by every stop-gradient call so far, in call order.
    pub fn detached_values(&self) -> &[Tensor] {
        &self.detached
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: &'static str, value: Tensor, kind: Op, inputs: &[Var]) -> Result<Var> {
        value.check_finite(op)?;
        let requires_grad = !self.no_grad && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op: kind,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        value.check_finite("leaf")?;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && !self.no_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A constant input; never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    /// A free leaf that receives gradient.
    pub fn variable(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    /// Bring a stored parameter into the graph. Repeated calls with the same
    /// id return the same node, so shared parameters accumulate gradient from
    /// every use.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        if let Some(v) = self.params.get(&id) {
            return Ok(*v);
        }
        let v = self.leaf(store.value(id).clone(), true)?;
        self.params.insert(id, v);
        Ok(v)
    }

    /// Forward identity that severs the backward path.
    pub fn stop_gradient(&mut self, x: Var) -> Result<Var> {
        let k = self.detached.len();
        let value = match self.frozen.as_ref().and_then(|f| f.get(k)) {
            Some(v) if v.shape() == self.shape(x) => v.clone(),
            Some(v) => {
                return Err(shape_err(
                    "stop_gradient",
                    format!("frozen value {:?} for input {:?}", v.shape(), self.shape(x)),
                ))
            }
            None => self.value(x).clone(),
        };
        self.detached.push(value.clone());
        self.leaf(value, false)
    }

    // ---- linear algebra ----

    /// `a[m,k] @ b[k,n]`, or `a[m,k] @ b[n,k]^T` when `trans_b`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?} (trans_b={trans_b})")));
        }
        let mut out = vec![0.0; m * n];
        let bv = if trans_b {
            MatRef::rm_t(self.value(b).data(), k)
        } else {
            MatRef::rm(self.value(b).data(), n)
        };
        gemm(m, k, n, MatRef::rm(self.value(a).data(), k), bv, 0.0, &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        self.push("matmul", value, Op::MatMul { a, b, m, k, n, trans_b }, &[a, b])
    }

    /// Batched product over a leading group axis: `a[g,m,k] @ b[g,k,n]`
    /// (or `b[g,n,k]^T`).
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(shape_err("batch_matmul", format!("{sa:?} x {sb:?}")));
        }
        let (groups, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != kb {
            return Err(shape_err("batch_matmul", format!("{sa:?} x {sb:?}")));
        }
        let mut out = vec![0.0; groups * m * n];
        {
            let (av, bvals) = (self.value(a).data(), self.value(b).data());
            for g in 0..groups {
                let ablk = &av[g * m * k..(g + 1) * m * k];
                let bblk = &bvals[g * k * n..(g + 1) * k * n];
                let bref = if trans_b {
                    MatRef::rm_t(bblk, k)
                } else {
                    MatRef::rm(bblk, n)
                };
                gemm(
                    m,
                    k,
                    n,
                    MatRef::rm(ablk, k),
                    bref,
                    0.0,
                    &mut out[g * m * n..(g + 1) * m * n],
                );
            }
        }
        let value = Tensor::new(vec![groups, m, n], out)?;
        let op = Op::BatchMatMul {
            a,
            b,
            groups,
            m,
            k,
            n,
            trans_b,
        };
        self.push("batch_matmul", value, op, &[a, b])
    }

    // ---- elementwise ----

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(x);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect()).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_map(a, b, |x, y| x + y);
        self.push("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_map(a, b, |x, y| x - y);
        self.push("sub", v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_map(a, b, |x, y| x * y);
        self.push("mul", v, Op::Mul(a, b), &[a, b])
    }

    fn check_suffix(&self, op: &'static str, a: Var, b: Var) -> Result<usize> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err(op, format!("{sb:?} is not a suffix of {sa:?}")));
        }
        Ok(self.value(b).numel())
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s shape.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let inner = self.check_suffix("add_broadcast", a, b)?;
        let ta = self.value(a);
        let tb = self.value(b).data();
        let data = ta.data().iter().enumerate().map(|(i, &x)| x + tb[i % inner]).collect();
        let v = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("add_broadcast", v, Op::AddBroadcast(a, b), &[a, b])
    }

    /// `a * b` where `b`'s shape is a trailing suffix of `a`'s shape.
    pub fn mul_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let inner = self.check_suffix("mul_broadcast", a, b)?;
        let ta = self.value(a);
        let tb = self.value(b).data();
        let data = ta.data().iter().enumerate().map(|(i, &x)| x * tb[i % inner]).collect();
        let v = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("mul_broadcast", v, Op::MulBroadcast(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let v = self.map(x, |a| a * c);
        self.push("scale", v, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let v = self.map(x, |a| a + c);
        self.push("add_scalar", v, Op::AddScalar(x), &[x])
    }

    /// Elementwise product with a constant same-shape tensor.
    pub fn mul_const(&mut self, x: Var, c: Tensor) -> Result<Var> {
        if c.shape() != self.shape(x) {
            return Err(shape_err(
                "mul_const",
                format!("{:?} vs {:?}", self.shape(x), c.shape()),
            ));
        }
        let t = self.value(x);
        let data = t.data().iter().zip(c.data()).map(|(a, b)| a * b).collect();
        let v = Tensor::new(t.shape().to_vec(), data)?;
        self.push("mul_const", v, Op::MulConst(x, c.into_data()), &[x])
    }

    /// Inverted dropout with keep-probability `1 - p`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if p <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - p;
        let shape = self.shape(x).to_vec();
        let numel: usize = shape.iter().product();
        let mask = (0..numel)
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        self.mul_const(x, Tensor::new(shape, mask)?)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let v = self.map(x, f64::ln);
        self.push("log", v, Op::Log(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let v = self.map(x, f64::exp);
        self.push("exp", v, Op::Exp(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let v = self.map(x, super::sigmoid);
        self.push("sigmoid", v, Op::Sigmoid(x), &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let tanh: Vec<f64> = xv
            .data()
            .iter()
            .map(|&a| fast_tanh(GELU_C * (a + GELU_A * a * a * a)))
            .collect();
        let data = xv
            .data()
            .iter()
            .zip(&tanh)
            .map(|(&a, &t)| 0.5 * a * (1.0 + t))
            .collect();
        let v = Tensor::new(xv.shape().to_vec(), data)?;
        self.push("gelu", v, Op::Gelu { x, tanh }, &[x])
    }

    /// `max(x, min)`; gradient passes only where `x > min`.
    pub fn clamp_min(&mut self, x: Var, min: f64) -> Result<Var> {
        let v = self.map(x, |a| a.max(min));
        self.push("clamp_min", v, Op::ClampMin(x, min), &[x])
    }

    // ---- normalizations ----

    fn rowwise(&self, x: Var, f: impl Fn(&[f64], &mut [f64])) -> Tensor {
        let t = self.value(x);
        let d = t.last_dim();
        let mut out = vec![0.0; t.numel()];
        for (src, dst) in t.data().chunks(d).zip(out.chunks_mut(d)) {
            f(src, dst);
        }
        Tensor::new(t.shape().to_vec(), out).expect("same shape")
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let v = self.rowwise(x, |src, dst| dst.copy_from_slice(&super::softmax_slice(src)));
        self.push("softmax", v, Op::Softmax(x), &[x])
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let v = self.rowwise(x, |src, dst| {
            let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + src.iter().map(|&a| (a - max).exp()).sum::<f64>().ln();
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s - lse;
            }
        });
        self.push("log_softmax", v, Op::LogSoftmax(x), &[x])
    }

    /// Attention softmax over the last axis of `scores[b, h, q, k]`, where key
    /// positions with `key_mask[b * k_len + k] == false` get exactly zero
    /// weight.
    pub fn masked_softmax(&mut self, scores: Var, key_mask: &[bool]) -> Result<Var> {
        let shape = self.shape(scores).to_vec();
        if shape.len() != 4 || key_mask.len() != shape[0] * shape[3] {
            return Err(shape_err(
                "masked_softmax",
                format!("scores {shape:?}, mask len {}", key_mask.len()),
            ));
        }
        let (heads, q_len, k_len) = (shape[1], shape[2], shape[3]);
        let t = self.value(scores);
        let mut out = vec![0.0; t.numel()];
        for (r, (src, dst)) in t.data().chunks(k_len).zip(out.chunks_mut(k_len)).enumerate() {
            let b = r / (heads * q_len);
            let mask = &key_mask[b * k_len..(b + 1) * k_len];
            let max = src
                .iter()
                .zip(mask)
                .filter(|(_, &m)| m)
                .map(|(&s, _)| s)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(TensorError::Invalid {
                    op: "masked_softmax",
                    detail: format!("row {r} has no visible key"),
                });
            }
            let mut z = 0.0;
            for ((d, &s), &m) in dst.iter_mut().zip(src).zip(mask) {
                if m {
                    *d = (s - max).exp();
                    z += *d;
                }
            }
            dst.iter_mut().for_each(|d| *d /= z);
        }
        let v = Tensor::new(shape, out)?;
        self.push("masked_softmax", v, Op::MaskedSoftmax(scores), &[scores])
    }

    /// Layer normalization over the last axis with gain and bias vectors.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(shape_err("layer_norm", format!("dim {d}, gain {:?}", self.shape(gain))));
        }
        let t = self.value(x);
        let rows = t.rows();
        let mut xhat = vec![0.0; t.numel()];
        let mut inv_std = vec![0.0; rows];
        for (r, (src, dst)) in t.data().chunks(d).zip(xhat.chunks_mut(d)).enumerate() {
            let mean = src.iter().sum::<f64>() / d as f64;
            let var = src.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for (o, &a) in dst.iter_mut().zip(src) {
                *o = (a - mean) * is;
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let out = xhat.iter().enumerate().map(|(i, &h)| h * g[i % d] + b[i % d]).collect();
        let v = Tensor::new(t.shape().to_vec(), out)?;
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        };
        self.push("layer_norm", v, op, &[x, gain, bias])
    }

    /// L2-normalize each row over the last axis. Zero rows are an error.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let d = t.last_dim();
        let mut norms = Vec::with_capacity(t.rows());
        let mut out = vec![0.0; t.numel()];
        for (r, (src, dst)) in t.data().chunks(d).zip(out.chunks_mut(d)).enumerate() {
            let n = src.iter().map(|a| a * a).sum::<f64>().sqrt();
            if n <= f64::MIN_POSITIVE {
                return Err(TensorError::ZeroNorm {
                    op: "normalize_rows",
                    row: r,
                });
            }
            for (o, &a) in dst.iter_mut().zip(src) {
                *o = a / n;
            }
            norms.push(n);
        }
        let v = Tensor::new(t.shape().to_vec(), out)?;
        self.push("normalize_rows", v, Op::NormalizeRows { x, norms }, &[x])
    }

    /// Row-wise cosine similarity of two `[n, d]` tensors, giving `[n]`.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let na = self.normalize_rows(a)?;
        let nb = self.normalize_rows(b)?;
        let prod = self.mul(na, nb)?;
        self.sum_last(prod)
    }

    // ---- indexing and layout ----

    /// Select rows of a `[rows, d]` table: output `[ids.len(), d]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(shape_err("gather_rows", format!("table {:?}", t.shape())));
        }
        let (rows, d) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    bound: rows,
                });
            }
            out.extend_from_slice(t.row(i));
        }
        let v = Tensor::new(vec![ids.len(), d], out)?;
        self.push("gather_rows", v, Op::GatherRows(table, ids.to_vec()), &[table])
    }

    /// Flat element gather: `out[i] = x.flat[indices[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, indices: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(indices.len());
        for &i in &indices {
            out.push(*src.get(i).ok_or(TensorError::IndexOutOfRange {
                op: "gather",
                index: i,
                bound: src.len(),
            })?);
        }
        let v = Tensor::new(shape, out)?;
        self.push("gather", v, Op::Gather(x, indices), &[x])
    }

    /// `out[i] = x[i, cols[i]]` for a `[n, v]` tensor.
    pub fn pick(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let shape = self.shape(x);
        if shape.len() != 2 || shape[0] != cols.len() {
            return Err(shape_err("pick", format!("{shape:?} with {} columns", cols.len())));
        }
        let v = shape[1];
        if let Some(&c) = cols.iter().find(|&&c| c >= v) {
            return Err(TensorError::IndexOutOfRange {
                op: "pick",
                index: c,
                bound: v,
            });
        }
        let idx = cols.iter().enumerate().map(|(i, &c)| i * v + c).collect();
        self.gather(x, idx, vec![cols.len()])
    }

    /// `[a, b, c, d] -> [a, c, b, d]`.
    pub fn swap_axes12(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(shape_err("swap_axes12", format!("{s:?}")));
        }
        let dims = [s[0], s[1], s[2], s[3]];
        let out = swap12(self.value(x).data(), dims);
        let v = Tensor::new(vec![dims[0], dims[2], dims[1], dims[3]], out)?;
        self.push("swap_axes12", v, Op::SwapAxes12 { x, dims }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        self.push("reshape", v, Op::Reshape(x), &[x])
    }

    // ---- reductions ----

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(x).sum());
        self.push("sum", v, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.numel() == 0 {
            return Err(TensorError::Invalid {
                op: "mean",
                detail: "empty tensor".into(),
            });
        }
        let v = Tensor::scalar(t.sum() / t.numel() as f64);
        self.push("mean", v, Op::Mean(x), &[x])
    }

    /// Sum over the last axis.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let d = t.last_dim();
        let out = t.data().chunks(d).map(|c| c.iter().sum()).collect();
        let mut shape = t.shape().to_vec();
        shape.pop();
        let v = Tensor::new(shape, out)?;
        self.push("sum_last", v, Op::SumLast(x), &[x])
    }

    // ---- fused losses ----

    /// Elementwise binary cross-entropy of logits `z` against `targets` in [0, 1].
    pub fn bce_with_logits(&mut self, z: Var, targets: &[f64]) -> Result<Var> {
        let t = self.value(z);
        if t.numel() != targets.len() {
            return Err(shape_err(
                "bce_with_logits",
                format!("{} vs {}", t.numel(), targets.len()),
            ));
        }
        let out = t
            .data()
            .iter()
            .zip(targets)
            .map(|(&a, &y)| a.max(0.0) - a * y + (-a.abs()).exp().ln_1p())
            .collect();
        let v = Tensor::new(t.shape().to_vec(), out)?;
        let op = Op::BceWithLogits {
            z,
            targets: targets.to_vec(),
        };
        self.push("bce_with_logits", v, op, &[z])
    }

    /// Per-row `-log softmax(logits)[target]`, shape `[n]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let ls = self.log_softmax(logits)?;
        let picked = self.pick(ls, targets)?;
        self.scale(picked, -1.0)
    }

    // ---- backward ----

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(shape_err("backward", format!("loss shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let leaf = matches!(node.op, Op::Leaf);
            if let Some(index) = first_non_finite(&gout) {
                let op = if leaf { "leaf grad" } else { "backward" };
                return Err(TensorError::NonFinite { op, index });
            }
            if leaf {
                grads[idx] = Some(gout);
            } else if node.requires_grad {
                self.backprop_node(node, &gout, &mut grads);
            }
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n, trans_b } => {
                let (m, k, n) = (*m, *k, *n);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let dc = MatRef::rm(gout, n);
                if self.wants(*a) {
                    let ga = accumulate(&mut grads[a.0], m * k);
                    // dA = dC @ B^T
                    let bt = if *trans_b {
                        MatRef::rm(bv, k)
                    } else {
                        MatRef::rm_t(bv, n)
                    };
                    gemm(m, n, k, dc, bt, 1.0, ga);
                }
                if self.wants(*b) {
                    let gb = accumulate(&mut grads[b.0], k * n);
                    if *trans_b {
                        // B stored [n, k]: dB = dC^T @ A
                        gemm(n, m, k, MatRef::rm_t(gout, n), MatRef::rm(av, k), 1.0, gb);
                    } else {
                        gemm(k, m, n, MatRef::rm_t(av, k), dc, 1.0, gb);
                    }
                }
            }
            Op::BatchMatMul {
                a,
                b,
                groups,
                m,
                k,
                n,
                trans_b,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let ga = accumulate(&mut grads[a.0], groups * m * k);
                    for g in 0..*groups {
                        let dc = MatRef::rm(&gout[g * m * n..(g + 1) * m * n], n);
                        let bblk = &bv[g * k * n..(g + 1) * k * n];
                        let bt = if *trans_b {
                            MatRef::rm(bblk, k)
                        } else {
                            MatRef::rm_t(bblk, n)
                        };
                        gemm(m, n, k, dc, bt, 1.0, &mut ga[g * m * k..(g + 1) * m * k]);
                    }
                }
                if self.wants(*b) {
                    let gb = accumulate(&mut grads[b.0], groups * k * n);
                    for g in 0..*groups {
                        let gblk = &gout[g * m * n..(g + 1) * m * n];
                        let ablk = &av[g * m * k..(g + 1) * m * k];
                        let dst = &mut gb[g * k * n..(g + 1) * k * n];
                        if *trans_b {
                            gemm(n, m, k, MatRef::rm_t(gblk, n), MatRef::rm(ablk, k), 1.0, dst);
                        } else {
                            gemm(k, m, n, MatRef::rm_t(ablk, k), MatRef::rm(gblk, n), 1.0, dst);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.wants(*v) {
                        let g = accumulate(&mut grads[v.0], gout.len());
                        g.iter_mut().zip(gout).for_each(|(x, d)| *x += d);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    let g = accumulate(&mut grads[a.0], gout.len());
                    g.iter_mut().zip(gout).for_each(|(x, d)| *x += d);
                }
                if self.wants(*b) {
                    let g = accumulate(&mut grads[b.0], gout.len());
                    g.iter_mut().zip(gout).for_each(|(x, d)| *x -= d);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let g = accumulate(&mut grads[a.0], gout.len());
                    for i in 0..gout.len() {
                        g[i] += gout[i] * bv[i];
                    }
                }
                if self.wants(*b) {
                    let g = accumulate(&mut grads[b.0], gout.len());
                    for i in 0..gout.len() {
                        g[i] += gout[i] * av[i];
                    }
                }
            }
            Op::AddBroadcast(a, b) => {
                if self.wants(*a) {
                    let g = accumulate(&mut grads[a.0], gout.len());
                    g.iter_mut().zip(gout).for_each(|(x, d)| *x += d);
                }
                if self.wants(*b) {
                    let inner = self.value(*b).numel();
                    let g = accumulate(&mut grads[b.0], inner);
                    for chunk in gout.chunks(inner) {
                        g.iter_mut().zip(chunk).for_each(|(x, d)| *x += d);
                    }
                }
            }
            Op::MulBroadcast(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let inner = bv.len();
                if self.wants(*a) {
                    let g = accumulate(&mut grads[a.0], gout.len());
                    for i in 0..gout.len() {
                        g[i] += gout[i] * bv[i % inner];
                    }
                }
                if self.wants(*b) {
                    let g = accumulate(&mut grads[b.0], inner);
                    for i in 0..gout.len() {
                        g[i % inner] += gout[i] * av[i];
                    }
                }
            }
            Op::Scale(x, c) => {
                let g = accumulate(&mut grads[x.0], gout.len());
                g.iter_mut().zip(gout).for_each(|(a, d)| *a += c * d);
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                let g = accumulate(&mut grads[x.0], gout.len());
                g.iter_mut().zip(gout).for_each(|(a, d)| *a += d);
            }
            Op::MulConst(x, c) => {
                let g = accumulate(&mut grads[x.0], gout.len());
                for i in 0..gout.len() {
                    g[i] += gout[i] * c[i];
                }
            }
            Op::Log(x) => {
                let xv = self.value(*x).data();
                let g = accumulate(&mut grads[x.0], gout.len());
                for i in 0..gout.len() {
                    g[i] += gout[i] / xv[i];
                }
            }
            Op::Exp(x) => {
                let g = accumulate(&mut grads[x.0], gout.len());
                for i in 0..gout.len() {
                    g[i] += gout[i] * y[i];
                }
            }
            Op::Sigmoid(x) => {
                let g = accumulate(&mut grads[x.0], gout.len());
                for i in 0..gout.len() {
                    g[i] += gout[i] * y[i] * (1.0 - y[i]);
                }
            }
            Op::Gelu { x, tanh } => {
                let xv = self.value(*x).data();
                let g = accumulate(&mut grads[x.0], gout.len());
                for i in 0..gout.len() {
                    let a = xv[i];
                    let t = tanh[i];
                    let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * a * a);
                    g[i] += gout[i] * (0.5 * (1.0 + t) + 0.5 * a * dt);
                }
            }
            Op::ClampMin(x, min) => {
                let xv = self.value(*x).data();
                let g = accumulate(&mut grads[x.0], gout.len());
                for i in 0..gout.len() {
                    if xv[i] > *min {
                        g[i] += gout[i];
                    }
                }
            }
            Op::Softmax(x) | Op::MaskedSoftmax(x) => {
                let d = node.value.last_dim();
                let g = accumulate(&mut grads[x.0], gout.len());
                for ((gr, yr), dr) in g.chunks_mut(d).zip(y.chunks(d)).zip(gout.chunks(d)) {
                    let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        gr[j] += yr[j] * (dr[j] - dot);
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let d = node.value.last_dim();
                let g = accumulate(&mut grads[x.0], gout.len());
                for ((gr, yr), dr) in g.chunks_mut(d).zip(y.chunks(d)).zip(gout.chunks(d)) {
                    let total: f64 = dr.iter().sum();
                    for j in 0..d {
                        gr[j] += dr[j] - yr[j].exp() * total;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = node.value.last_dim();
                let gv = self.value(*gain).data();
                if self.wants(*gain) {
                    let gg = accumulate(&mut grads[gain.0], d);
                    for (i, (&dy, &h)) in gout.iter().zip(xhat).enumerate() {
                        gg[i % d] += dy * h;
                    }
                }
                if self.wants(*bias) {
                    let gb = accumulate(&mut grads[bias.0], d);
                    for (i, &dy) in gout.iter().enumerate() {
                        gb[i % d] += dy;
                    }
                }
                if self.wants(*x) {
                    let gx = accumulate(&mut grads[x.0], gout.len());
                    let mut dxhat = vec![0.0; d];
                    for (r, is) in inv_std.iter().enumerate() {
                        let rows = r * d..(r + 1) * d;
                        let (dy, h) = (&gout[rows.clone()], &xhat[rows.clone()]);
                        for j in 0..d {
                            dxhat[j] = dy[j] * gv[j];
                        }
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = dxhat.iter().zip(h).map(|(a, b)| a * b).sum();
                        let dst = &mut gx[rows];
                        for j in 0..d {
                            dst[j] += is / d as f64 * (d as f64 * dxhat[j] - s1 - h[j] * s2);
                        }
                    }
                }
            }
            Op::GatherRows(table, ids) => {
                let d = node.value.last_dim();
                let g = accumulate(&mut grads[table.0], self.value(*table).numel());
                for (r, &i) in ids.iter().enumerate() {
                    let src = &gout[r * d..(r + 1) * d];
                    g[i * d..(i + 1) * d].iter_mut().zip(src).for_each(|(a, b)| *a += b);
                }
            }
            Op::Gather(x, idx) => {
                let g = accumulate(&mut grads[x.0], self.value(*x).numel());
                for (k, &i) in idx.iter().enumerate() {
                    g[i] += gout[k];
                }
            }
            Op::SwapAxes12 { x, dims } => {
                let back = swap12(gout, [dims[0], dims[2], dims[1], dims[3]]);
                let g = accumulate(&mut grads[x.0], gout.len());
                g.iter_mut().zip(back).for_each(|(a, b)| *a += b);
            }
            Op::Sum(x) => {
                let g = accumulate(&mut grads[x.0], self.value(*x).numel());
                g.iter_mut().for_each(|a| *a += gout[0]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                let g = accumulate(&mut grads[x.0], n);
                g.iter_mut().for_each(|a| *a += gout[0] / n as f64);
            }
            Op::SumLast(x) => {
                let d = self.value(*x).last_dim();
                let g = accumulate(&mut grads[x.0], gout.len() * d);
                for (r, &dy) in gout.iter().enumerate() {
                    g[r * d..(r + 1) * d].iter_mut().for_each(|a| *a += dy);
                }
            }
            Op::NormalizeRows { x, norms } => {
                let d = node.value.last_dim();
                let g = accumulate(&mut grads[x.0], gout.len());
                for (r, n) in norms.iter().enumerate() {
                    let rows = r * d..(r + 1) * d;
                    let (yr, dr) = (&y[rows.clone()], &gout[rows.clone()]);
                    let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    for (j, dst) in g[rows].iter_mut().enumerate() {
                        *dst += (dr[j] - yr[j] * dot) / n;
                    }
                }
            }
            Op::BceWithLogits { z, targets } => {
                let zv = self.value(*z).data();
                let g = accumulate(&mut grads[z.0], gout.len());
                for i in 0..gout.len() {
                    g[i] += gout[i] * (super::sigmoid(zv[i]) - targets[i]);
                }
            }
        }
    }
}

fn swap12(src: &[f64], [a, b, c, d]: [usize; 4]) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for i in 0..a {
        for j in 0..b {
            for k in 0..c {
                let s = ((i * b + j) * c + k) * d;
                let t = ((i * c + k) * b + j) * d;
                out[t..t + d].copy_from_slice(&src[s..s + d]);
            }
        }
    }
    out
}
