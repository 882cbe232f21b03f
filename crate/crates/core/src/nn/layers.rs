//! Transformer building blocks with explicit backward passes.
//!
//! Every `forward` returns the activations its `backward` needs. `backward`
//! accumulates (`+=`) parameter gradients into a gradient module of the same
//! type and returns the gradient with respect to the input.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::params::{visit1, visit1_mut, visit2, visit2_mut, Parameters};

pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-6;

/// Normal(0, 0.02) truncated at two standard deviations.
pub fn trunc_normal<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    Array2::from_shape_simple_fn((rows, cols), || loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * INIT_STD {
            break v;
        }
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `in x out`
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    pub fn new<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Self {
        Linear {
            w: trunc_normal(rng, fan_in, fan_out),
            b: Array1::zeros(fan_out),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Linear {
            w: Array2::zeros((fan_in, fan_out)),
            b: Array1::zeros(fan_out),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.w);
        y += &self.b;
        y
    }

    /// Accumulates parameter gradients; returns `dx` only when asked.
    pub fn backward(
        &self,
        x: ArrayView2<f64>,
        dy: ArrayView2<f64>,
        grad: &mut Linear,
        want_dx: bool,
    ) -> Option<Array2<f64>> {
        general_mat_mul(1.0, &x.t(), &dy, 1.0, &mut grad.w);
        grad.b += &dy.sum_axis(Axis(0));
        want_dx.then(|| dy.dot(&self.w.t()))
    }
}

impl Parameters for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        visit2(prefix, "w", &self.w, f);
        visit1(prefix, "b", &self.b, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        visit2_mut(prefix, "w", &mut self.w, f);
        visit1_mut(prefix, "b", &mut self.b, f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

pub struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
        }
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> (Array2<f64>, LnCache) {
        let d = x.ncols() as f64;
        let mut xhat = x.to_owned();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, istd) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / d;
            row -= mean;
            let var = row.iter().map(|v| v * v).sum::<f64>() / d;
            *istd = 1.0 / (var + LN_EPS).sqrt();
            row *= *istd;
        }
        let mut y = &xhat * &self.gamma;
        y += &self.beta;
        (y, LnCache { xhat, inv_std })
    }

    pub fn backward(
        &self,
        cache: &LnCache,
        dy: ArrayView2<f64>,
        grad: &mut LayerNorm,
    ) -> Array2<f64> {
        grad.gamma += &(&dy * &cache.xhat).sum_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0));
        let d = dy.ncols() as f64;
        let mut dx = &dy * &self.gamma;
        for ((mut row, xh), &istd) in dx
            .rows_mut()
            .into_iter()
            .zip(cache.xhat.rows())
            .zip(cache.inv_std.iter())
        {
            let mean_g = row.sum() / d;
            let mean_gx = row.iter().zip(xh.iter()).map(|(g, x)| g * x).sum::<f64>() / d;
            Zip::from(&mut row).and(&xh).for_each(|g, &x| {
                *g = istd * (*g - mean_g - x * mean_gx);
            });
        }
        dx
    }
}

impl Parameters for LayerNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        visit1(prefix, "gamma", &self.gamma, f);
        visit1(prefix, "beta", &self.beta, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        visit1_mut(prefix, "gamma", &mut self.gamma, f);
        visit1_mut(prefix, "beta", &mut self.beta, f);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// tanh approximation of GELU
// one exp instead of libm tanh, which is several times slower here
fn fast_tanh(u: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + fast_tanh(GELU_C * (x + GELU_A * x * x * x)))
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = fast_tanh(GELU_C * (x + GELU_A * x * x * x));
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn softmax_rows(x: &mut Array2<f64>) {
    for mut row in x.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
}

pub fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let m = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e = logits.mapv(|v| (v - m).exp());
    let s = e.sum();
    e / s
}

/// Cross entropy of one logit vector and its gradient `softmax - onehot`.
pub fn cross_entropy(logits: &Array1<f64>, label: usize) -> (f64, Array1<f64>) {
    let m = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    let mut grad = softmax(logits);
    grad[label] -= 1.0;
    (lse - logits[label], grad)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Attention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
}

pub struct AttnCache {
    x: Array2<f64>,
    qkv: Array2<f64>,
    probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
}

impl Attention {
    pub fn new<R: Rng>(rng: &mut R, dim: usize, heads: usize) -> Self {
        Attention {
            qkv: Linear::new(rng, dim, 3 * dim),
            proj: Linear::new(rng, dim, dim),
            heads,
        }
    }

    fn dim(&self) -> usize {
        self.proj.in_dim()
    }

    pub fn forward(&self, x: Array2<f64>) -> (Array2<f64>, AttnCache) {
        let d = self.dim();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let n = x.nrows();
        let qkv = self.qkv.forward(x.view());
        let mut ctx = Array2::zeros((n, d));
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let q = qkv.slice(s![.., h * dh..(h + 1) * dh]);
            let k = qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
            let v = qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
            let mut a = q.dot(&k.t());
            a *= scale;
            softmax_rows(&mut a);
            ctx.slice_mut(s![.., h * dh..(h + 1) * dh])
                .assign(&a.dot(&v));
            probs.push(a);
        }
        let out = self.proj.forward(ctx.view());
        (out, AttnCache { x, qkv, probs, ctx })
    }

    pub fn backward(
        &self,
        cache: &AttnCache,
        dout: ArrayView2<f64>,
        grad: &mut Attention,
    ) -> Array2<f64> {
        let d = self.dim();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let dctx = self
            .proj
            .backward(cache.ctx.view(), dout, &mut grad.proj, true)
            .expect("dx requested");
        let mut dqkv = Array2::zeros(cache.qkv.raw_dim());
        for h in 0..self.heads {
            let (qs, ks, vs) = (h * dh, d + h * dh, 2 * d + h * dh);
            let q = cache.qkv.slice(s![.., qs..qs + dh]);
            let k = cache.qkv.slice(s![.., ks..ks + dh]);
            let v = cache.qkv.slice(s![.., vs..vs + dh]);
            let a = &cache.probs[h];
            let dc = dctx.slice(s![.., h * dh..(h + 1) * dh]);
            dqkv.slice_mut(s![.., vs..vs + dh]).assign(&a.t().dot(&dc));
            let mut ds = dc.dot(&v.t());
            for (mut row, arow) in ds.rows_mut().into_iter().zip(a.rows()) {
                let dot = row.iter().zip(arow.iter()).map(|(g, p)| g * p).sum::<f64>();
                Zip::from(&mut row)
                    .and(&arow)
                    .for_each(|g, &p| *g = p * (*g - dot) * scale);
            }
            dqkv.slice_mut(s![.., qs..qs + dh]).assign(&ds.dot(&k));
            dqkv.slice_mut(s![.., ks..ks + dh]).assign(&ds.t().dot(&q));
        }
        self.qkv
            .backward(cache.x.view(), dqkv.view(), &mut grad.qkv, true)
            .expect("dx requested")
    }
}

impl Parameters for Attention {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.qkv.visit(&super::params::join(prefix, "qkv"), f);
        self.proj.visit(&super::params::join(prefix, "proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.qkv.visit_mut(&super::params::join(prefix, "qkv"), f);
        self.proj.visit_mut(&super::params::join(prefix, "proj"), f);
    }
}

/// Pre-norm transformer block.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

pub struct BlockCache {
    ln1: LnCache,
    attn: AttnCache,
    ln2: LnCache,
    h2: Array2<f64>,
    z: Array2<f64>,
    g: Array2<f64>,
}

impl Block {
    pub fn new<R: Rng>(rng: &mut R, dim: usize, heads: usize, mlp_ratio: usize) -> Self {
        Block {
            ln1: LayerNorm::new(dim),
            attn: Attention::new(rng, dim, heads),
            ln2: LayerNorm::new(dim),
            fc1: Linear::new(rng, dim, dim * mlp_ratio),
            fc2: Linear::new(rng, dim * mlp_ratio, dim),
        }
    }

    pub fn forward(&self, x: Array2<f64>) -> (Array2<f64>, BlockCache) {
        let (h1, ln1) = self.ln1.forward(x.view());
        let (a, attn) = self.attn.forward(h1);
        let x1 = x + a;
        let (h2, ln2) = self.ln2.forward(x1.view());
        let z = self.fc1.forward(h2.view());
        let g = z.mapv(gelu);
        let out = x1 + self.fc2.forward(g.view());
        (
            out,
            BlockCache {
                ln1,
                attn,
                ln2,
                h2,
                z,
                g,
            },
        )
    }

    pub fn backward(&self, cache: &BlockCache, dout: Array2<f64>, grad: &mut Block) -> Array2<f64> {
        let mut dz = self
            .fc2
            .backward(cache.g.view(), dout.view(), &mut grad.fc2, true)
            .expect("dx requested");
        Zip::from(&mut dz)
            .and(&cache.z)
            .for_each(|d, &z| *d *= gelu_grad(z));
        let dh2 = self
            .fc1
            .backward(cache.h2.view(), dz.view(), &mut grad.fc1, true)
            .expect("dx requested");
        let dx1 = dout + self.ln2.backward(&cache.ln2, dh2.view(), &mut grad.ln2);
        let dh1 = self.attn.backward(&cache.attn, dx1.view(), &mut grad.attn);
        let dln1 = self.ln1.backward(&cache.ln1, dh1.view(), &mut grad.ln1);
        dx1 + dln1
    }
}

impl Parameters for Block {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        use super::params::join;
        self.ln1.visit(&join(prefix, "ln1"), f);
        self.attn.visit(&join(prefix, "attn"), f);
        self.ln2.visit(&join(prefix, "ln2"), f);
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        use super::params::join;
        self.ln1.visit_mut(&join(prefix, "ln1"), f);
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.ln2.visit_mut(&join(prefix, "ln2"), f);
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}
