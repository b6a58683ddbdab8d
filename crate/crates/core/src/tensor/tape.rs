use std::cell::RefCell;
use std::collections::HashMap;

use super::{gemm, Param, Tensor};
use crate::error::{MosaError, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// How a `[B, T, d]` token tensor collapses to `[B, d]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pool {
    /// Token 0.
    Cls,
    /// Mean over tokens.
    Mean,
}

const LN_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu { x: Var, tanh: Vec<f64> },
    Exp(Var),
    Log(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Mean(Var),
    Sum(Var),
    Reshape(Var),
    Attention { qkv: Var, batch: usize, tokens: usize, heads: usize, probs: Vec<f64> },
    Tokens { patches: Var, cls: Option<Var>, pos: Var },
    Pool { x: Var, kind: Pool },
    AddCols { base: Var, delta: Var, offset: usize },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    KlDiv(Var, Var),
    Mse(Var, Var),
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Records whole-tensor operations and replays them backwards.
///
/// A tape is built fresh for each forward computation. Parameters bound with
/// [`Tape::bind`] are cached by name so several passes share one leaf and
/// their gradients accumulate.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    bound: HashMap<String, Var>,
    adapter_macs: u64,
}

/// Per-thread free list of large float buffers. Training builds a tape of
/// identically shaped activations every step; recycling them avoids
/// returning memory to the OS and faulting it back in on the next step.
#[derive(Default)]
struct BufferPool {
    free: HashMap<usize, Vec<Vec<f64>>>,
    bytes: usize,
}

const POOL_MIN_LEN: usize = 4096;
const POOL_MAX_BYTES: usize = 768 << 20;

thread_local! {
    static POOL: RefCell<BufferPool> = RefCell::new(BufferPool::default());
}

/// A buffer of length `n` with unspecified contents.
fn scratch(n: usize) -> Vec<f64> {
    if n >= POOL_MIN_LEN {
        let reused = POOL.with(|p| {
            let mut p = p.borrow_mut();
            let v = p.free.get_mut(&n).and_then(Vec::pop);
            if v.is_some() {
                p.bytes -= n * 8;
            }
            v
        });
        if let Some(v) = reused {
            return v;
        }
    }
    vec![0.0; n]
}

fn zeroed(n: usize) -> Vec<f64> {
    let mut v = scratch(n);
    v.fill(0.0);
    v
}

fn copied(src: &[f64]) -> Vec<f64> {
    let mut v = scratch(src.len());
    v.copy_from_slice(src);
    v
}

fn recycle(v: Vec<f64>) {
    let n = v.len();
    if n < POOL_MIN_LEN || v.capacity() != n {
        return;
    }
    POOL.with(|p| {
        let mut p = p.borrow_mut();
        if p.bytes + n * 8 <= POOL_MAX_BYTES {
            p.bytes += n * 8;
            p.free.entry(n).or_default().push(v);
        }
    });
}

impl Drop for Tape {
    fn drop(&mut self) {
        for node in self.nodes.drain(..) {
            recycle(node.value);
        }
        for g in self.grads.drain(..).flatten() {
            recycle(g);
        }
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    match data.iter().position(|x| !x.is_finite()) {
        None => Ok(()),
        Some(i) => Err(MosaError::numeric(op, format!("non-finite value {} at index {i}", data[i]))),
    }
}

/// `tanh` through a single `exp`; saturates cleanly to ±1.
fn fast_tanh(u: f64) -> f64 {
    1.0 - 2.0 / (1.0 + (2.0 * u).exp())
}

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().unwrap()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape nodes hold consistent shapes")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last `backward` root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for a parameter bound by name.
    pub fn param_grad(&self, name: &str) -> Option<&[f64]> {
        self.bound.get(name).and_then(|&v| self.grad(v))
    }

    pub fn bound_var(&self, name: &str) -> Option<Var> {
        self.bound.get(name).copied()
    }

    /// Multiply-accumulates attributed to adapter branches so far.
    pub fn adapter_macs(&self) -> u64 {
        self.adapter_macs
    }

    pub fn count_adapter_macs(&mut self, macs: u64) {
        self.adapter_macs += macs;
    }

    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), copied(t.data()), Op::Leaf, t.requires_grad)
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), copied(t.data()), Op::Leaf, false)
    }

    /// Leaf for a named parameter, created once per tape.
    pub fn bind(&mut self, p: &Param) -> Var {
        if let Some(&v) = self.bound.get(&p.name) {
            return v;
        }
        let v = self.leaf(&p.tensor);
        self.bound.insert(p.name.clone(), v);
        v
    }

    /// Named constant, created once per tape.
    pub fn bind_constant(&mut self, key: &str, make: impl FnOnce() -> Tensor) -> Var {
        if let Some(&v) = self.bound.get(key) {
            return v;
        }
        let t = make();
        let v = self.constant(&t);
        self.bound.insert(key.to_string(), v);
        v
    }

    // ---- linear algebra -------------------------------------------------

    /// `a[..., k] · b[k, n] -> [..., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sb.len() != 2 || last_dim(&sa) != sb[0] {
            return Err(MosaError::Dimension(format!("matmul of {sa:?} and {sb:?}")));
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.value(a).len() / k;
        let mut out = scratch(m * n);
        gemm(m, k, n, 1.0, self.value(a), k, 1, self.value(b), n, 1, 0.0, &mut out, n, 1);
        check_finite("matmul", &out)?;
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, Op::MatMul(a, b), rg))
    }

    /// `x[..., n] + b[n]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = last_dim(self.shape(x));
        if self.value(b).len() != n {
            return Err(MosaError::Dimension(format!(
                "bias {:?} against input {:?}",
                self.shape(b),
                self.shape(x)
            )));
        }
        let bias = self.value(b);
        let mut out = copied(self.value(x));
        for row in out.chunks_mut(n) {
            for (a, c) in row.iter_mut().zip(bias) {
                *a += c;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddBias(x, b), rg))
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(MosaError::Dimension(format!(
                "{op} of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let mut out = scratch(self.value(a).len());
        for ((o, &x), &y) in out.iter_mut().zip(self.value(a)).zip(self.value(b)) {
            *o = f(x, y);
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(self.shape(a).to_vec(), out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    fn unary(&mut self, name: &'static str, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        check_finite(name, self.value(x))?;
        let mut out = scratch(self.value(x).len());
        for (o, &v) in out.iter_mut().zip(self.value(x)) {
            *o = f(v);
        }
        check_finite(name, &out)?;
        let rg = self.rg(x);
        Ok(self.push(self.shape(x).to_vec(), out, op, rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary("scale", x, Op::Scale(x, c), |v| v * c)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, Op::Relu(x), |v| if v > 0.0 { v } else { 0.0 })
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        check_finite("gelu", self.value(x))?;
        let xv = self.value(x);
        let mut tanh = scratch(xv.len());
        let mut out = scratch(xv.len());
        for ((t, o), &v) in tanh.iter_mut().zip(out.iter_mut()).zip(xv) {
            *t = fast_tanh(GELU_C * (v + 0.044715 * v * v * v));
            *o = 0.5 * v * (1.0 + *t);
        }
        let rg = self.rg(x);
        let tanh = if rg {
            tanh
        } else {
            recycle(tanh);
            Vec::new()
        };
        Ok(self.push(self.shape(x).to_vec(), out, Op::Gelu { x, tanh }, rg))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, Op::Exp(x), f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(v) = self.value(x).iter().find(|&&v| v <= 0.0) {
            return Err(MosaError::numeric("log", format!("non-positive input {v}")));
        }
        self.unary("log", x, Op::Log(x), f64::ln)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        check_finite("softmax", self.value(x))?;
        let n = last_dim(self.shape(x));
        let mut out = copied(self.value(x));
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let rg = self.rg(x);
        Ok(self.push(self.shape(x).to_vec(), out, Op::Softmax(x), rg))
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        check_finite("layer_norm", self.value(x))?;
        let n = last_dim(self.shape(x));
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(MosaError::Dimension(format!(
                "layer_norm affine {:?}/{:?} against input {:?}",
                self.shape(gamma),
                self.shape(beta),
                self.shape(x)
            )));
        }
        let xs = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let rows = xs.len() / n;
        let mut xhat = zeroed(xs.len());
        let mut rstd = vec![0.0; rows];
        let mut out = zeroed(xs.len());
        for r in 0..rows {
            let row = &xs[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(self.shape(x).to_vec(), out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        check_finite("mean", self.value(x))?;
        let v = self.value(x);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(x);
        Ok(self.push(vec![1], vec![m], Op::Mean(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        check_finite("sum", self.value(x))?;
        let s = self.value(x).iter().sum::<f64>();
        let rg = self.rg(x);
        Ok(self.push(vec![1], vec![s], Op::Sum(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(MosaError::Dimension(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape(x)
            )));
        }
        let rg = self.rg(x);
        Ok(self.push(shape.to_vec(), copied(self.value(x)), Op::Reshape(x), rg))
    }

    // ---- transformer pieces ---------------------------------------------

    /// Multi-head scaled dot-product self-attention.
    ///
    /// `qkv` is `[B, T, 3d]` holding queries, keys and values side by side;
    /// the result is `[B, T, d]` with heads concatenated.
    pub fn attention(&mut self, qkv: Var, heads: usize) -> Result<Var> {
        let shape = self.shape(qkv).to_vec();
        if shape.len() != 3 || shape[2] % 3 != 0 || (shape[2] / 3) % heads != 0 {
            return Err(MosaError::Dimension(format!(
                "attention input {shape:?} with {heads} heads"
            )));
        }
        let (batch, tokens, d) = (shape[0], shape[1], shape[2] / 3);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let src = self.value(qkv);
        let mut probs = zeroed(batch * heads * tokens * tokens);
        let mut out = zeroed(batch * tokens * d);
        for b in 0..batch {
            for h in 0..heads {
                let base = b * tokens * 3 * d;
                let q = &src[base + h * dh..];
                let k = &src[base + d + h * dh..];
                let v = &src[base + 2 * d + h * dh..];
                let p = &mut probs[(b * heads + h) * tokens * tokens..][..tokens * tokens];
                gemm(tokens, dh, tokens, scale, q, 3 * d, 1, k, 1, 3 * d, 0.0, p, tokens, 1);
                for row in p.chunks_mut(tokens) {
                    softmax_in_place(row);
                }
                let o = &mut out[b * tokens * d + h * dh..];
                gemm(tokens, tokens, dh, 1.0, p, tokens, 1, v, 3 * d, 1, 0.0, o, d, 1);
            }
        }
        check_finite("attention", &out)?;
        let rg = self.rg(qkv);
        Ok(self.push(
            vec![batch, tokens, d],
            out,
            Op::Attention { qkv, batch, tokens, heads, probs },
            rg,
        ))
    }

    /// Builds `[B, T, d]` token sequences from `[B, P, d]` patch embeddings,
    /// an optional class token `[d]` prepended to each sequence, and `[T, d]`
    /// positional embeddings.
    pub fn tokens(&mut self, patches: Var, cls: Option<Var>, pos: Var) -> Result<Var> {
        let ps = self.shape(patches).to_vec();
        if ps.len() != 3 {
            return Err(MosaError::Dimension(format!("patch embeddings must be rank 3, got {ps:?}")));
        }
        let (batch, np, d) = (ps[0], ps[1], ps[2]);
        let extra = usize::from(cls.is_some());
        let t = np + extra;
        if self.shape(pos) != [t, d] {
            return Err(MosaError::Dimension(format!(
                "positional embedding {:?}, expected [{t}, {d}]",
                self.shape(pos)
            )));
        }
        if let Some(c) = cls {
            if self.value(c).len() != d {
                return Err(MosaError::Dimension(format!("class token {:?}", self.shape(c))));
            }
        }
        let mut out = zeroed(batch * t * d);
        let pv = self.value(pos);
        let xv = self.value(patches);
        for b in 0..batch {
            for i in 0..t {
                let dst = &mut out[(b * t + i) * d..][..d];
                let src: &[f64] = if i < extra {
                    self.value(cls.unwrap())
                } else {
                    &xv[(b * np + i - extra) * d..][..d]
                };
                for j in 0..d {
                    dst[j] = src[j] + pv[i * d + j];
                }
            }
        }
        let rg = self.rg(patches) || self.rg(pos) || cls.is_some_and(|c| self.rg(c));
        Ok(self.push(vec![batch, t, d], out, Op::Tokens { patches, cls, pos }, rg))
    }

    pub fn pool(&mut self, x: Var, kind: Pool) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(MosaError::Dimension(format!("pool expects [B, T, d], got {s:?}")));
        }
        let (batch, t, d) = (s[0], s[1], s[2]);
        let xv = self.value(x);
        let mut out = vec![0.0; batch * d];
        for b in 0..batch {
            let dst = &mut out[b * d..][..d];
            match kind {
                Pool::Cls => dst.copy_from_slice(&xv[b * t * d..][..d]),
                Pool::Mean => {
                    for i in 0..t {
                        for j in 0..d {
                            dst[j] += xv[(b * t + i) * d + j];
                        }
                    }
                    dst.iter_mut().for_each(|v| *v /= t as f64);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![batch, d], out, Op::Pool { x, kind }, rg))
    }

    /// `base[..., N]` with `delta[..., n]` added into columns `offset..offset+n`.
    pub fn add_cols(&mut self, base: Var, delta: Var, offset: usize) -> Result<Var> {
        let (sb, sd) = (self.shape(base).to_vec(), self.shape(delta).to_vec());
        let (nb, nd) = (last_dim(&sb), last_dim(&sd));
        if sb[..sb.len() - 1] != sd[..sd.len() - 1] || offset + nd > nb {
            return Err(MosaError::Dimension(format!(
                "add_cols of {sd:?} into {sb:?} at column {offset}"
            )));
        }
        let mut out = copied(self.value(base));
        for (row, drow) in out.chunks_mut(nb).zip(self.value(delta).chunks(nd)) {
            for (o, dv) in row[offset..offset + nd].iter_mut().zip(drow) {
                *o += dv;
            }
        }
        let rg = self.rg(base) || self.rg(delta);
        Ok(self.push(sb, out, Op::AddCols { base, delta, offset }, rg))
    }

    // ---- losses -----------------------------------------------------------

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(MosaError::Dimension(format!(
                "cross_entropy logits {s:?} with {} labels",
                labels.len()
            )));
        }
        let c = s[1];
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= c) {
            return Err(MosaError::Index(format!("label {l} at position {i} out of range for {c} classes")));
        }
        check_finite("cross_entropy", self.value(logits))?;
        let mut probs = self.value(logits).to_vec();
        let mut loss = 0.0;
        for (row, &l) in probs.chunks_mut(c).zip(labels) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[l];
            softmax_in_place(row);
        }
        loss /= labels.len() as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
            rg,
        ))
    }

    /// Mean over rows of `sum p log(p / q)`, with `0 log(0 / q) = 0`.
    pub fn kl_div(&mut self, p: Var, q: Var) -> Result<Var> {
        self.same_shape("kl_div", p, q)?;
        let c = last_dim(self.shape(p));
        let (pv, qv) = (self.value(p), self.value(q));
        let mut total = 0.0;
        for (i, (&a, &b)) in pv.iter().zip(qv).enumerate() {
            if !(a.is_finite() && b.is_finite()) || a < 0.0 || b < 0.0 {
                return Err(MosaError::numeric("kl_div", format!("invalid probability pair ({a}, {b}) at {i}")));
            }
            if a > 0.0 {
                if b == 0.0 {
                    return Err(MosaError::numeric("kl_div", format!("q is zero where p = {a} at index {i}")));
                }
                total += a * (a / b).ln();
            }
        }
        let rows = pv.len() / c;
        let rg = self.rg(p) || self.rg(q);
        Ok(self.push(vec![1], vec![total / rows as f64], Op::KlDiv(p, q), rg))
    }

    /// Mean of squared differences over all entries.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let s = av.iter().zip(bv).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / av.len() as f64;
        if !s.is_finite() {
            return Err(MosaError::numeric("mse", "non-finite result"));
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![1], vec![s], Op::Mse(a, b), rg))
    }

    // ---- reverse pass -----------------------------------------------------

    /// Accumulates d(root)/d(node) for every node that requires a gradient.
    /// Earlier gradients on this tape are discarded.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(MosaError::Dimension(format!(
                "backward root must be a scalar, got {:?}",
                self.shape(root)
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.rg(root) {
            return Ok(());
        }
        self.grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                backprop(&self.nodes, &mut self.grads, i, &g);
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

/// Gradient buffer for `v`, or `None` if `v` does not need one.
fn slot<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| zeroed(node.value.len())))
}

fn backprop(nodes: &[Node], grads: &mut [Option<Vec<f64>>], i: usize, g: &[f64]) {
    let node = &nodes[i];
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let sb = &nodes[b.0].shape;
            let (k, n) = (sb[0], sb[1]);
            let m = g.len() / n;
            if let Some(da) = slot(nodes, grads, *a) {
                // dA[m×k] += dC[m×n] · Bᵀ
                gemm(m, n, k, 1.0, g, n, 1, &nodes[b.0].value, 1, n, 1.0, da, k, 1);
            }
            if let Some(db) = slot(nodes, grads, *b) {
                // dB[k×n] += Aᵀ · dC
                gemm(k, m, n, 1.0, &nodes[a.0].value, 1, k, g, n, 1, 1.0, db, n, 1);
            }
        }
        Op::AddBias(x, b) => {
            let n = nodes[b.0].value.len();
            if let Some(dx) = slot(nodes, grads, *x) {
                add_into(dx, g);
            }
            if let Some(db) = slot(nodes, grads, *b) {
                for row in g.chunks(n) {
                    add_into(db, row);
                }
            }
        }
        Op::Add(a, b) => {
            if let Some(da) = slot(nodes, grads, *a) {
                add_into(da, g);
            }
            if let Some(db) = slot(nodes, grads, *b) {
                add_into(db, g);
            }
        }
        Op::Sub(a, b) => {
            if let Some(da) = slot(nodes, grads, *a) {
                add_into(da, g);
            }
            if let Some(db) = slot(nodes, grads, *b) {
                db.iter_mut().zip(g).for_each(|(d, gv)| *d -= gv);
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            if let Some(da) = slot(nodes, grads, *a) {
                for ((d, gv), y) in da.iter_mut().zip(g).zip(bv) {
                    *d += gv * y;
                }
            }
            if let Some(db) = slot(nodes, grads, *b) {
                for ((d, gv), x) in db.iter_mut().zip(g).zip(av) {
                    *d += gv * x;
                }
            }
        }
        Op::Scale(x, c) => {
            if let Some(dx) = slot(nodes, grads, *x) {
                dx.iter_mut().zip(g).for_each(|(d, gv)| *d += gv * c);
            }
        }
        Op::Relu(x) => {
            let xv = &nodes[x.0].value;
            if let Some(dx) = slot(nodes, grads, *x) {
                for ((d, gv), v) in dx.iter_mut().zip(g).zip(xv) {
                    if *v > 0.0 {
                        *d += gv;
                    }
                }
            }
        }
        Op::Gelu { x, tanh } => {
            let xv = &nodes[x.0].value;
            if let Some(dx) = slot(nodes, grads, *x) {
                for (((d, gv), &v), &t) in dx.iter_mut().zip(g).zip(xv).zip(tanh) {
                    let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                    *d += gv * (0.5 * (1.0 + t) + 0.5 * v * dt);
                }
            }
        }
        Op::Exp(x) => {
            if let Some(dx) = slot(nodes, grads, *x) {
                for ((d, gv), y) in dx.iter_mut().zip(g).zip(&node.value) {
                    *d += gv * y;
                }
            }
        }
        Op::Log(x) => {
            let xv = &nodes[x.0].value;
            if let Some(dx) = slot(nodes, grads, *x) {
                for ((d, gv), v) in dx.iter_mut().zip(g).zip(xv) {
                    *d += gv / v;
                }
            }
        }
        Op::Softmax(x) => {
            let n = last_dim(&node.shape);
            if let Some(dx) = slot(nodes, grads, *x) {
                for ((drow, grow), yrow) in dx.chunks_mut(n).zip(g.chunks(n)).zip(node.value.chunks(n)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        drow[j] += yrow[j] * (grow[j] - dot);
                    }
                }
            }
        }
        Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
            let n = last_dim(&node.shape);
            let gv = &nodes[gamma.0].value;
            if let Some(dx) = slot(nodes, grads, *x) {
                let mut dxhat = vec![0.0; n];
                for (r, rs) in rstd.iter().enumerate() {
                    let grow = &g[r * n..][..n];
                    let hrow = &xhat[r * n..][..n];
                    for j in 0..n {
                        dxhat[j] = grow[j] * gv[j];
                    }
                    let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                    let mean_dh = dxhat.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    let drow = &mut dx[r * n..][..n];
                    for j in 0..n {
                        drow[j] += rs * (dxhat[j] - mean_d - hrow[j] * mean_dh);
                    }
                }
            }
            if let Some(dg) = slot(nodes, grads, *gamma) {
                for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                    for j in 0..n {
                        dg[j] += grow[j] * hrow[j];
                    }
                }
            }
            if let Some(db) = slot(nodes, grads, *beta) {
                for grow in g.chunks(n) {
                    add_into(db, grow);
                }
            }
        }
        Op::Mean(x) => {
            if let Some(dx) = slot(nodes, grads, *x) {
                let c = g[0] / dx.len() as f64;
                dx.iter_mut().for_each(|d| *d += c);
            }
        }
        Op::Sum(x) => {
            if let Some(dx) = slot(nodes, grads, *x) {
                dx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::Reshape(x) => {
            if let Some(dx) = slot(nodes, grads, *x) {
                add_into(dx, g);
            }
        }
        Op::Attention { qkv, batch, tokens, heads, probs } => {
            let Some(dqkv) = slot(nodes, grads, *qkv) else { return };
            let (batch, t, heads) = (*batch, *tokens, *heads);
            let d = node.shape[2];
            let dh = d / heads;
            let scale = 1.0 / (dh as f64).sqrt();
            let src = &nodes[qkv.0].value;
            let mut dp = vec![0.0; t * t];
            for b in 0..batch {
                for h in 0..heads {
                    let base = b * t * 3 * d;
                    let q = &src[base + h * dh..];
                    let k = &src[base + d + h * dh..];
                    let v = &src[base + 2 * d + h * dh..];
                    let p = &probs[(b * heads + h) * t * t..][..t * t];
                    let go = &g[b * t * d + h * dh..];
                    // dP = dO · Vᵀ
                    gemm(t, dh, t, 1.0, go, d, 1, v, 1, 3 * d, 0.0, &mut dp, t, 1);
                    // dV += Pᵀ · dO
                    gemm(t, t, dh, 1.0, p, 1, t, go, d, 1, 1.0, &mut dqkv[base + 2 * d + h * dh..], 3 * d, 1);
                    // dS = P ⊙ (dP - rowdot(dP, P))
                    for (dprow, prow) in dp.chunks_mut(t).zip(p.chunks(t)) {
                        let dot: f64 = dprow.iter().zip(prow).map(|(a, b)| a * b).sum();
                        for j in 0..t {
                            dprow[j] = prow[j] * (dprow[j] - dot);
                        }
                    }
                    // dQ += scale · dS · K ; dK += scale · dSᵀ · Q
                    gemm(t, t, dh, scale, &dp, t, 1, k, 3 * d, 1, 1.0, &mut dqkv[base + h * dh..], 3 * d, 1);
                    gemm(t, t, dh, scale, &dp, 1, t, q, 3 * d, 1, 1.0, &mut dqkv[base + d + h * dh..], 3 * d, 1);
                }
            }
        }
        Op::Tokens { patches, cls, pos } => {
            let (batch, t, d) = (node.shape[0], node.shape[1], node.shape[2]);
            let extra = usize::from(cls.is_some());
            let np = t - extra;
            if let Some(dp) = slot(nodes, grads, *patches) {
                for b in 0..batch {
                    for i in extra..t {
                        add_into(&mut dp[(b * np + i - extra) * d..][..d], &g[(b * t + i) * d..][..d]);
                    }
                }
            }
            if let Some(c) = cls {
                if let Some(dc) = slot(nodes, grads, *c) {
                    for b in 0..batch {
                        add_into(dc, &g[b * t * d..][..d]);
                    }
                }
            }
            if let Some(dpos) = slot(nodes, grads, *pos) {
                for grow in g.chunks(t * d) {
                    add_into(dpos, grow);
                }
            }
        }
        Op::Pool { x, kind } => {
            let s = &nodes[x.0].shape;
            let (batch, t, d) = (s[0], s[1], s[2]);
            if let Some(dx) = slot(nodes, grads, *x) {
                for b in 0..batch {
                    let grow = &g[b * d..][..d];
                    match kind {
                        Pool::Cls => add_into(&mut dx[b * t * d..][..d], grow),
                        Pool::Mean => {
                            for i in 0..t {
                                let dst = &mut dx[(b * t + i) * d..][..d];
                                for j in 0..d {
                                    dst[j] += grow[j] / t as f64;
                                }
                            }
                        }
                    }
                }
            }
        }
        Op::AddCols { base, delta, offset } => {
            let nb = last_dim(&node.shape);
            let nd = last_dim(&nodes[delta.0].shape);
            if let Some(db) = slot(nodes, grads, *base) {
                add_into(db, g);
            }
            if let Some(dd) = slot(nodes, grads, *delta) {
                for (drow, grow) in dd.chunks_mut(nd).zip(g.chunks(nb)) {
                    add_into(drow, &grow[*offset..*offset + nd]);
                }
            }
        }
        Op::CrossEntropy { logits, labels, probs } => {
            let c = probs.len() / labels.len();
            let scale = g[0] / labels.len() as f64;
            if let Some(dl) = slot(nodes, grads, *logits) {
                for (r, &l) in labels.iter().enumerate() {
                    for j in 0..c {
                        let onehot = if j == l { 1.0 } else { 0.0 };
                        dl[r * c + j] += scale * (probs[r * c + j] - onehot);
                    }
                }
            }
        }
        Op::KlDiv(p, q) => {
            let c = last_dim(&nodes[p.0].shape);
            let (pv, qv) = (&nodes[p.0].value, &nodes[q.0].value);
            let scale = g[0] / (pv.len() / c) as f64;
            if let Some(dp) = slot(nodes, grads, *p) {
                for ((d, &a), &b) in dp.iter_mut().zip(pv).zip(qv) {
                    if a > 0.0 {
                        *d += scale * ((a / b).ln() + 1.0);
                    }
                }
            }
            if let Some(dq) = slot(nodes, grads, *q) {
                for ((d, &a), &b) in dq.iter_mut().zip(pv).zip(qv) {
                    if a > 0.0 {
                        *d -= scale * a / b;
                    }
                }
            }
        }
        Op::Mse(a, b) => {
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            let c = 2.0 * g[0] / av.len() as f64;
            if let Some(da) = slot(nodes, grads, *a) {
                for ((d, x), y) in da.iter_mut().zip(av).zip(bv) {
                    *d += c * (x - y);
                }
            }
            if let Some(db) = slot(nodes, grads, *b) {
                for ((d, x), y) in db.iter_mut().zip(av).zip(bv) {
                    *d -= c * (x - y);
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}
