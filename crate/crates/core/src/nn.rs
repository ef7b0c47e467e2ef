//! Dense building blocks with hand-written backward passes.
//!
//! Everything is row-major `f64`. Each layer exposes a `forward` that returns
//! its output plus whatever it needs to run `backward`, and a `backward` that
//! accumulates parameter gradients into a same-shaped gradient struct and
//! returns the gradient with respect to its input. Transformer blocks are
//! pre-norm (GPT-2 layout) and accept an optional boolean attention mask.

use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    pub fn random_normal<R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let mut m = Self::zeros(rows, cols);
        if std > 0.0 {
            let normal = Normal::new(0.0, std).expect("finite std");
            for v in &mut m.data {
                *v = normal.sample(rng);
            }
        }
        m
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.rows, self.cols)
    }

    pub fn fill_zero(&mut self) {
        self.data.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self · other`
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul inner dimension");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let o_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (p, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = other.row(p);
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self · otherᵀ`
    pub fn matmul_transposed(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols, "matmul_transposed inner dimension");
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a_row = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a_row, other.row(j));
            }
        }
        out
    }

    /// `acc += selfᵀ · other`
    pub fn transposed_matmul_into(&self, other: &Matrix, acc: &mut Matrix) {
        assert_eq!(self.rows, other.rows, "transposed_matmul rows");
        assert_eq!((acc.rows, acc.cols), (self.cols, other.cols));
        for r in 0..self.rows {
            let a_row = self.row(r);
            let b_row = other.row(r);
            for (p, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let acc_row = &mut acc.data[p * other.cols..(p + 1) * other.cols];
                for (o, &b) in acc_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable in-place log-softmax; returns nothing, rewrites `row`.
pub fn log_softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
    let log_z = max + sum.ln();
    row.iter_mut().for_each(|v| *v -= log_z);
}

/// Named access to every trainable tensor, in declaration order.
///
/// The order is the serialization order of checkpoints and the iteration order
/// of optimizers, so implementations must keep it stable.
pub trait Parameters {
    fn params(&self) -> Vec<(String, &Matrix)>;
    fn params_mut(&mut self) -> Vec<(String, &mut Matrix)>;

    fn parameter_count(&self) -> usize {
        self.params().iter().map(|(_, m)| m.len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.params().iter().all(|(_, m)| m.is_finite())
    }

    fn zero_grad(&mut self) {
        for (_, m) in self.params_mut() {
            m.fill_zero();
        }
    }
}

pub(crate) fn prefixed<'a, T: 'a>(
    prefix: &'a str,
    items: Vec<(String, T)>,
) -> impl Iterator<Item = (String, T)> + 'a {
    items
        .into_iter()
        .map(move |(name, t)| (format!("{prefix}.{name}"), t))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `in × out`
    pub weight: Matrix,
    /// `1 × out`
    pub bias: Matrix,
}

impl Linear {
    pub fn new<R: Rng>(inputs: usize, outputs: usize, std: f64, rng: &mut R) -> Self {
        Self {
            weight: Matrix::random_normal(inputs, outputs, std, rng),
            bias: Matrix::zeros(1, outputs),
        }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Matrix::zeros(inputs, outputs),
            bias: Matrix::zeros(1, outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.rows
    }

    pub fn outputs(&self) -> usize {
        self.weight.cols
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        let mut y = x.matmul(&self.weight);
        for r in 0..y.rows {
            for (v, b) in y.row_mut(r).iter_mut().zip(&self.bias.data) {
                *v += b;
            }
        }
        y
    }

    pub fn backward(&self, x: &Matrix, dy: &Matrix, grad: &mut Linear) -> Matrix {
        x.transposed_matmul_into(dy, &mut grad.weight);
        for r in 0..dy.rows {
            for (g, d) in grad.bias.data.iter_mut().zip(dy.row(r)) {
                *g += d;
            }
        }
        dy.matmul_transposed(&self.weight)
    }
}

impl Parameters for Linear {
    fn params(&self) -> Vec<(String, &Matrix)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        vec![
            ("weight".into(), &mut self.weight),
            ("bias".into(), &mut self.bias),
        ]
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Matrix,
    pub beta: Matrix,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    normalized: Matrix,
    inv_std: Vec<f64>,
}

impl LayerNormCache {
    /// Per-row normalized values before the affine transform.
    pub fn normalized(&self) -> &Matrix {
        &self.normalized
    }
}

impl LayerNorm {
    pub fn new(width: usize) -> Self {
        Self {
            gamma: Matrix::filled(1, width, 1.0),
            beta: Matrix::zeros(1, width),
        }
    }

    pub fn zeros(width: usize) -> Self {
        Self {
            gamma: Matrix::zeros(1, width),
            beta: Matrix::zeros(1, width),
        }
    }

    pub fn forward(&self, x: &Matrix) -> (Matrix, LayerNormCache) {
        let width = x.cols;
        let mut normalized = Matrix::zeros(x.rows, width);
        let mut y = Matrix::zeros(x.rows, width);
        let mut inv_std = Vec::with_capacity(x.rows);
        for r in 0..x.rows {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / width as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / width as f64;
            let istd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(istd);
            let n_row = normalized.row_mut(r);
            for (n, v) in n_row.iter_mut().zip(row) {
                *n = (v - mean) * istd;
            }
            let n_row = normalized.row(r);
            for (j, out) in y.row_mut(r).iter_mut().enumerate() {
                *out = n_row[j] * self.gamma.data[j] + self.beta.data[j];
            }
        }
        (y, LayerNormCache { normalized, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache, dy: &Matrix, grad: &mut LayerNorm) -> Matrix {
        let width = dy.cols;
        let n = width as f64;
        let mut dx = Matrix::zeros(dy.rows, width);
        let mut dxhat = vec![0.0; width];
        for r in 0..dy.rows {
            let d_row = dy.row(r);
            let xhat = cache.normalized.row(r);
            for j in 0..width {
                grad.gamma.data[j] += d_row[j] * xhat[j];
                grad.beta.data[j] += d_row[j];
                dxhat[j] = d_row[j] * self.gamma.data[j];
            }
            let mean_d = dxhat.iter().sum::<f64>() / n;
            let mean_dx = dot(&dxhat, xhat) / n;
            let istd = cache.inv_std[r];
            for (j, out) in dx.row_mut(r).iter_mut().enumerate() {
                *out = istd * (dxhat[j] - mean_d - xhat[j] * mean_dx);
            }
        }
        dx
    }
}

impl Parameters for LayerNorm {
    fn params(&self) -> Vec<(String, &Matrix)> {
        vec![("gamma".into(), &self.gamma), ("beta".into(), &self.beta)]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        vec![
            ("gamma".into(), &mut self.gamma),
            ("beta".into(), &mut self.beta),
        ]
    }
}

/// Square boolean mask: `allowed(p, q)` means position `p` may attend to `q`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    size: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn from_fn(size: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(size * size);
        for p in 0..size {
            for q in 0..size {
                allowed.push(f(p, q));
            }
        }
        Self { size, allowed }
    }

    pub fn full(size: usize) -> Self {
        Self::from_fn(size, |_, _| true)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn allowed(&self, p: usize, q: usize) -> bool {
        self.allowed[p * self.size + q]
    }

    pub fn row(&self, p: usize) -> &[bool] {
        &self.allowed[p * self.size..(p + 1) * self.size]
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let d_inner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelfAttention {
    pub n_heads: usize,
    pub qkv: Linear,
    pub proj: Linear,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    input: Matrix,
    qkv: Matrix,
    /// One `n × n` probability matrix per head.
    probs: Vec<Matrix>,
    merged: Matrix,
}

impl SelfAttention {
    pub fn new<R: Rng>(width: usize, n_heads: usize, std: f64, proj_std: f64, rng: &mut R) -> Self {
        assert!(n_heads > 0 && width % n_heads == 0, "width divisible by heads");
        Self {
            n_heads,
            qkv: Linear::new(width, 3 * width, std, rng),
            proj: Linear::new(width, width, proj_std, rng),
        }
    }

    pub fn zeros(width: usize, n_heads: usize) -> Self {
        Self {
            n_heads,
            qkv: Linear::zeros(width, 3 * width),
            proj: Linear::zeros(width, width),
        }
    }

    pub fn forward(&self, x: &Matrix, mask: Option<&AttentionMask>) -> (Matrix, AttentionCache) {
        let n = x.rows;
        let width = x.cols;
        let head_dim = width / self.n_heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let qkv = self.qkv.forward(x);
        let mut merged = Matrix::zeros(n, width);
        let mut probs = Vec::with_capacity(self.n_heads);
        let mut scores = vec![0.0; n];
        for h in 0..self.n_heads {
            let q_off = h * head_dim;
            let k_off = width + h * head_dim;
            let v_off = 2 * width + h * head_dim;
            let mut p_mat = Matrix::zeros(n, n);
            for p in 0..n {
                let q = &qkv.row(p)[q_off..q_off + head_dim];
                let mut max = f64::NEG_INFINITY;
                for (s, q_idx) in scores.iter_mut().zip(0..n) {
                    if mask.map_or(true, |m| m.allowed(p, q_idx)) {
                        let k = &qkv.row(q_idx)[k_off..k_off + head_dim];
                        *s = dot(q, k) * scale;
                        max = max.max(*s);
                    } else {
                        *s = f64::NEG_INFINITY;
                    }
                }
                let mut sum = 0.0;
                let p_row = p_mat.row_mut(p);
                for (pr, &s) in p_row.iter_mut().zip(&scores) {
                    if s != f64::NEG_INFINITY {
                        *pr = (s - max).exp();
                        sum += *pr;
                    }
                }
                p_row.iter_mut().for_each(|v| *v /= sum);
                let out = &mut merged.data[p * width + q_off..p * width + q_off + head_dim];
                for q_idx in 0..n {
                    let w = p_mat.data[p * n + q_idx];
                    if w == 0.0 {
                        continue;
                    }
                    let v = &qkv.row(q_idx)[v_off..v_off + head_dim];
                    for (o, &vv) in out.iter_mut().zip(v) {
                        *o += w * vv;
                    }
                }
            }
            probs.push(p_mat);
        }
        let y = self.proj.forward(&merged);
        (
            y,
            AttentionCache {
                input: x.clone(),
                qkv,
                probs,
                merged,
            },
        )
    }

    pub fn backward(&self, cache: &AttentionCache, dy: &Matrix, grad: &mut SelfAttention) -> Matrix {
        let n = dy.rows;
        let width = dy.cols;
        let head_dim = width / self.n_heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let d_merged = self.proj.backward(&cache.merged, dy, &mut grad.proj);
        let mut d_qkv = Matrix::zeros(n, 3 * width);
        let mut d_p = vec![0.0; n];
        for h in 0..self.n_heads {
            let q_off = h * head_dim;
            let k_off = width + h * head_dim;
            let v_off = 2 * width + h * head_dim;
            let probs = &cache.probs[h];
            for p in 0..n {
                let d_out = &d_merged.row(p)[q_off..q_off + head_dim];
                let p_row = probs.row(p);
                // dV and dP
                for q_idx in 0..n {
                    let w = p_row[q_idx];
                    if w == 0.0 {
                        d_p[q_idx] = 0.0;
                        continue;
                    }
                    let v = &cache.qkv.row(q_idx)[v_off..v_off + head_dim];
                    d_p[q_idx] = dot(d_out, v);
                    let dv = &mut d_qkv.data[q_idx * 3 * width + v_off..q_idx * 3 * width + v_off + head_dim];
                    for (g, &d) in dv.iter_mut().zip(d_out) {
                        *g += w * d;
                    }
                }
                let weighted: f64 = p_row.iter().zip(&d_p).map(|(a, b)| a * b).sum();
                for q_idx in 0..n {
                    let w = p_row[q_idx];
                    if w == 0.0 {
                        continue;
                    }
                    let ds = w * (d_p[q_idx] - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for j in 0..head_dim {
                        let k = cache.qkv.data[q_idx * 3 * width + k_off + j];
                        let q = cache.qkv.data[p * 3 * width + q_off + j];
                        d_qkv.data[p * 3 * width + q_off + j] += ds * k;
                        d_qkv.data[q_idx * 3 * width + k_off + j] += ds * q;
                    }
                }
            }
        }
        self.qkv.backward(&cache.input, &d_qkv, &mut grad.qkv)
    }
}

impl Parameters for SelfAttention {
    fn params(&self) -> Vec<(String, &Matrix)> {
        prefixed("qkv", self.qkv.params())
            .chain(prefixed("proj", self.proj.params()))
            .collect()
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let Self { qkv, proj, .. } = self;
        prefixed("qkv", qkv.params_mut())
            .chain(prefixed("proj", proj.params_mut()))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub fc: Linear,
    pub proj: Linear,
}

#[derive(Debug, Clone)]
pub struct FeedForwardCache {
    input: Matrix,
    pre: Matrix,
    act: Matrix,
}

impl FeedForward {
    pub fn new<R: Rng>(width: usize, hidden: usize, std: f64, proj_std: f64, rng: &mut R) -> Self {
        Self {
            fc: Linear::new(width, hidden, std, rng),
            proj: Linear::new(hidden, width, proj_std, rng),
        }
    }

    pub fn zeros(width: usize, hidden: usize) -> Self {
        Self {
            fc: Linear::zeros(width, hidden),
            proj: Linear::zeros(hidden, width),
        }
    }

    pub fn forward(&self, x: &Matrix) -> (Matrix, FeedForwardCache) {
        let pre = self.fc.forward(x);
        let mut act = pre.clone();
        act.data.iter_mut().for_each(|v| *v = gelu(*v));
        let y = self.proj.forward(&act);
        (
            y,
            FeedForwardCache {
                input: x.clone(),
                pre,
                act,
            },
        )
    }

    pub fn backward(&self, cache: &FeedForwardCache, dy: &Matrix, grad: &mut FeedForward) -> Matrix {
        let mut d_act = self.proj.backward(&cache.act, dy, &mut grad.proj);
        for (d, &x) in d_act.data.iter_mut().zip(&cache.pre.data) {
            *d *= gelu_grad(x);
        }
        self.fc.backward(&cache.input, &d_act, &mut grad.fc)
    }
}

impl Parameters for FeedForward {
    fn params(&self) -> Vec<(String, &Matrix)> {
        prefixed("fc", self.fc.params())
            .chain(prefixed("proj", self.proj.params()))
            .collect()
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let Self { fc, proj } = self;
        prefixed("fc", fc.params_mut())
            .chain(prefixed("proj", proj.params_mut()))
            .collect()
    }
}

/// Pre-norm transformer block: `h = x + attn(ln1(x)); y = h + mlp(ln2(h))`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerBlock {
    pub ln_attn: LayerNorm,
    pub attn: SelfAttention,
    pub ln_mlp: LayerNorm,
    pub mlp: FeedForward,
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    ln_attn: LayerNormCache,
    attn: AttentionCache,
    ln_mlp: LayerNormCache,
    mlp: FeedForwardCache,
}

impl TransformerBlock {
    /// GPT-2 style init: `std` for input projections, residual projections
    /// scaled down by `sqrt(2 * n_layers)`.
    pub fn new<R: Rng>(width: usize, n_heads: usize, n_layers: usize, std: f64, rng: &mut R) -> Self {
        let proj_std = std / (2.0 * n_layers as f64).sqrt();
        Self {
            ln_attn: LayerNorm::new(width),
            attn: SelfAttention::new(width, n_heads, std, proj_std, rng),
            ln_mlp: LayerNorm::new(width),
            mlp: FeedForward::new(width, 4 * width, std, proj_std, rng),
        }
    }

    pub fn zeros(width: usize, n_heads: usize) -> Self {
        Self {
            ln_attn: LayerNorm::zeros(width),
            attn: SelfAttention::zeros(width, n_heads),
            ln_mlp: LayerNorm::zeros(width),
            mlp: FeedForward::zeros(width, 4 * width),
        }
    }

    pub fn width(&self) -> usize {
        self.ln_attn.gamma.cols
    }

    pub fn forward(&self, x: &Matrix, mask: Option<&AttentionMask>) -> (Matrix, BlockCache) {
        let (a_in, ln_attn) = self.ln_attn.forward(x);
        let (a_out, attn) = self.attn.forward(&a_in, mask);
        let mut h = x.clone();
        h.add_assign(&a_out);
        let (m_in, ln_mlp) = self.ln_mlp.forward(&h);
        let (m_out, mlp) = self.mlp.forward(&m_in);
        h.add_assign(&m_out);
        (
            h,
            BlockCache {
                ln_attn,
                attn,
                ln_mlp,
                mlp,
            },
        )
    }

    pub fn backward(&self, cache: &BlockCache, dy: &Matrix, grad: &mut TransformerBlock) -> Matrix {
        let d_m_in = self.mlp.backward(&cache.mlp, dy, &mut grad.mlp);
        let mut dh = self.ln_mlp.backward(&cache.ln_mlp, &d_m_in, &mut grad.ln_mlp);
        dh.add_assign(dy);
        let d_a_in = self.attn.backward(&cache.attn, &dh, &mut grad.attn);
        let mut dx = self.ln_attn.backward(&cache.ln_attn, &d_a_in, &mut grad.ln_attn);
        dx.add_assign(&dh);
        dx
    }
}

impl Parameters for TransformerBlock {
    fn params(&self) -> Vec<(String, &Matrix)> {
        prefixed("ln_attn", self.ln_attn.params())
            .chain(prefixed("attn", self.attn.params()))
            .chain(prefixed("ln_mlp", self.ln_mlp.params()))
            .chain(prefixed("mlp", self.mlp.params()))
            .collect()
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let Self {
            ln_attn,
            attn,
            ln_mlp,
            mlp,
        } = self;
        prefixed("ln_attn", ln_attn.params_mut())
            .chain(prefixed("attn", attn.params_mut()))
            .chain(prefixed("ln_mlp", ln_mlp.params_mut()))
            .chain(prefixed("mlp", mlp.params_mut()))
            .collect()
    }
}
