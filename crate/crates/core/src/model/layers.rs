//! Transformer building blocks with hand-written backward passes.
//!
//! Every layer exposes `forward` returning its output plus a cache, and
//! `backward` which accumulates parameter gradients into a structurally
//! identical gradient value and returns the gradient w.r.t. its input.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::{gemm, Matrix};

pub const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-6;
const MLP_RATIO: usize = 4;

/// Normal(0, std) truncated to two standard deviations.
pub fn trunc_normal(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            break z * std;
        }
    })
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Named traversal over a parameter structure, in a fixed order.
pub trait NamedTensors {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix)>);
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Matrix)>);

    fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        self.collect("", &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = Vec::new();
        self.collect_mut("", &mut out);
        out
    }

    fn zeros_like(&self) -> Self
    where
        Self: Clone + Sized,
    {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `in x out`
    pub weight: Matrix,
    /// `1 x out`
    pub bias: Matrix,
}

impl Linear {
    pub fn init(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: trunc_normal(rng, fan_in, fan_out, INIT_STD),
            bias: Matrix::zeros(1, fan_out),
        }
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        let mut y = x.matmul(&self.weight);
        y.add_row_broadcast(&self.bias);
        y
    }

    /// Accumulates weight and bias gradients only.
    pub fn backward_params(&self, x: &Matrix, dy: &Matrix, grad: &mut Linear) {
        gemm(1.0, x, true, dy, false, 1.0, &mut grad.weight);
        grad.bias.add_assign(&dy.col_sums());
    }

    pub fn backward(&self, x: &Matrix, dy: &Matrix, grad: &mut Linear) -> Matrix {
        self.backward_params(x, dy, grad);
        dy.matmul_t(&self.weight)
    }
}

impl NamedTensors for Linear {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Matrix)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub scale: Matrix,
    pub shift: Matrix,
}

pub struct LnCache {
    xhat: Matrix,
    rstd: Vec<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            scale: Matrix::from_vec(1, dim, vec![1.0; dim]),
            shift: Matrix::zeros(1, dim),
        }
    }

    pub fn forward(&self, x: &Matrix) -> (Matrix, LnCache) {
        let (n, d) = x.shape();
        let mut xhat = Matrix::zeros(n, d);
        let mut y = Matrix::zeros(n, d);
        let mut rstd = Vec::with_capacity(n);
        for r in 0..n {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(rs);
            let xh = xhat.row_mut(r);
            for (o, v) in xh.iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
            let yr = y.row_mut(r);
            for j in 0..d {
                yr[j] = xhat.get(r, j) * self.scale.data()[j] + self.shift.data()[j];
            }
        }
        (y, LnCache { xhat, rstd })
    }

    pub fn backward(&self, cache: &LnCache, dy: &Matrix, grad: &mut LayerNorm) -> Matrix {
        let (n, d) = dy.shape();
        let mut dx = Matrix::zeros(n, d);
        let gamma = self.scale.data();
        let mut dxhat = vec![0.0; d];
        for r in 0..n {
            let dyr = dy.row(r);
            let xh = cache.xhat.row(r);
            let (mut m1, mut m2) = (0.0, 0.0);
            for j in 0..d {
                grad.scale.data_mut()[j] += dyr[j] * xh[j];
                grad.shift.data_mut()[j] += dyr[j];
                dxhat[j] = dyr[j] * gamma[j];
                m1 += dxhat[j];
                m2 += dxhat[j] * xh[j];
            }
            m1 /= d as f64;
            m2 /= d as f64;
            let rs = cache.rstd[r];
            for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
                *o = rs * (dxhat[j] - m1 - xh[j] * m2);
            }
        }
        dx
    }
}

impl NamedTensors for LayerNorm {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix)>) {
        out.push((join(prefix, "scale"), &self.scale));
        out.push((join(prefix, "shift"), &self.shift));
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Matrix)>) {
        out.push((join(prefix, "scale"), &mut self.scale));
        out.push((join(prefix, "shift"), &mut self.shift));
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

/// tanh approximation of GELU
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Pre-norm transformer block: `x + attn(ln1(x))`, then `x + mlp(ln2(x))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub norm1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

pub struct BlockCache {
    ln1: LnCache,
    a1: Matrix,
    qkv: Matrix,
    probs: Vec<Matrix>,
    attn: Matrix,
    ln2: LnCache,
    a2: Matrix,
    pre_act: Matrix,
    act: Matrix,
}

impl Block {
    pub fn init(rng: &mut impl Rng, dim: usize) -> Self {
        Self {
            norm1: LayerNorm::new(dim),
            qkv: Linear::init(rng, dim, 3 * dim),
            proj: Linear::init(rng, dim, dim),
            norm2: LayerNorm::new(dim),
            fc1: Linear::init(rng, dim, MLP_RATIO * dim),
            fc2: Linear::init(rng, MLP_RATIO * dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.proj.weight.rows()
    }

    pub fn forward(&self, x: &Matrix, heads: usize) -> (Matrix, BlockCache) {
        let d = self.dim();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (a1, ln1) = self.norm1.forward(x);
        let qkv = self.qkv.forward(&a1);
        let t = x.rows();
        let mut attn = Matrix::zeros(t, d);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let q = qkv.col_block(h * dh, dh);
            let k = qkv.col_block(d + h * dh, dh);
            let v = qkv.col_block(2 * d + h * dh, dh);
            let mut p = q.matmul_t(&k);
            for r in 0..t {
                softmax_in_place(p.row_mut(r), scale);
            }
            attn.set_col_block(h * dh, &p.matmul(&v));
            probs.push(p);
        }
        let mut x1 = self.proj.forward(&attn);
        x1.add_assign(x);
        let (a2, ln2) = self.norm2.forward(&x1);
        let pre_act = self.fc1.forward(&a2);
        let mut act = pre_act.clone();
        act.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
        let mut y = self.fc2.forward(&act);
        y.add_assign(&x1);
        let cache = BlockCache {
            ln1,
            a1,
            qkv,
            probs,
            attn,
            ln2,
            a2,
            pre_act,
            act,
        };
        (y, cache)
    }

    pub fn backward(&self, cache: &BlockCache, dy: &Matrix, heads: usize, grad: &mut Block) -> Matrix {
        let d = self.dim();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        // MLP branch
        let mut dact = self.fc2.backward(&cache.act, dy, &mut grad.fc2);
        for (g, &z) in dact.data_mut().iter_mut().zip(cache.pre_act.data()) {
            *g *= gelu_grad(z);
        }
        let da2 = self.fc1.backward(&cache.a2, &dact, &mut grad.fc1);
        let mut dx1 = self.norm2.backward(&cache.ln2, &da2, &mut grad.norm2);
        dx1.add_assign(dy);

        // attention branch
        let dattn = self.proj.backward(&cache.attn, &dx1, &mut grad.proj);
        let t = dy.rows();
        let mut dqkv = Matrix::zeros(t, 3 * d);
        for h in 0..heads {
            let q = cache.qkv.col_block(h * dh, dh);
            let k = cache.qkv.col_block(d + h * dh, dh);
            let v = cache.qkv.col_block(2 * d + h * dh, dh);
            let p = &cache.probs[h];
            let dout = dattn.col_block(h * dh, dh);
            let dp = dout.matmul_t(&v);
            let dv = p.t_matmul(&dout);
            let mut ds = Matrix::zeros(t, t);
            for r in 0..t {
                let pr = p.row(r);
                let dpr = dp.row(r);
                let dot: f64 = pr.iter().zip(dpr).map(|(a, b)| a * b).sum();
                for (o, (pv, dpv)) in ds.row_mut(r).iter_mut().zip(pr.iter().zip(dpr)) {
                    *o = pv * (dpv - dot) * scale;
                }
            }
            dqkv.set_col_block(h * dh, &ds.matmul(&k));
            dqkv.set_col_block(d + h * dh, &ds.t_matmul(&q));
            dqkv.set_col_block(2 * d + h * dh, &dv);
        }
        let da1 = self.qkv.backward(&cache.a1, &dqkv, &mut grad.qkv);
        let mut dx = self.norm1.backward(&cache.ln1, &da1, &mut grad.norm1);
        dx.add_assign(&dx1);
        dx
    }
}

impl NamedTensors for Block {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix)>) {
        self.norm1.collect(&join(prefix, "norm1"), out);
        self.qkv.collect(&join(prefix, "attn.qkv"), out);
        self.proj.collect(&join(prefix, "attn.proj"), out);
        self.norm2.collect(&join(prefix, "norm2"), out);
        self.fc1.collect(&join(prefix, "mlp.fc1"), out);
        self.fc2.collect(&join(prefix, "mlp.fc2"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Matrix)>) {
        self.norm1.collect_mut(&join(prefix, "norm1"), out);
        self.qkv.collect_mut(&join(prefix, "attn.qkv"), out);
        self.proj.collect_mut(&join(prefix, "attn.proj"), out);
        self.norm2.collect_mut(&join(prefix, "norm2"), out);
        self.fc1.collect_mut(&join(prefix, "mlp.fc1"), out);
        self.fc2.collect_mut(&join(prefix, "mlp.fc2"), out);
    }
}

fn softmax_in_place(row: &mut [f64], scale: f64) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v * scale));
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v * scale - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
