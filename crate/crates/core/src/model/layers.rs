//! Dense layers with explicit backward passes. Each `forward` returns the
//! activations its `backward` needs; `backward` adds parameter gradients into
//! a same-shaped gradient instance and returns the input gradient.

use ndarray::{s, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::params::{impl_parameters, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}
impl_parameters!(Linear { w, b });

impl Linear {
    /// Xavier-uniform weights, zero bias.
    pub fn new<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        let a = (6.0 / (input + output) as f64).sqrt();
        Self {
            w: Array2::from_shape_simple_fn((input, output), || rng.gen_range(-a..a)),
            b: Array2::zeros((1, output)),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.dot(&self.w) + &self.b
    }

    pub fn backward(&self, x: &Tensor, dy: &Tensor, g: &mut Linear) -> Tensor {
        g.w += &x.t().dot(dy);
        g.b += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        dy.dot(&self.w.t())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}
impl_parameters!(LayerNorm { gamma, beta });

pub struct LayerNormCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
}

const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Array2::ones((1, dim)),
            beta: Array2::zeros((1, dim)),
        }
    }

    pub fn forward(&self, x: &Tensor) -> (Tensor, LayerNormCache) {
        let d = x.ncols() as f64;
        let mut xhat = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.dot(&row) / d;
            let is = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| v * is);
            inv_std.push(is);
        }
        let y = &xhat * &self.gamma + &self.beta;
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache, dy: &Tensor, g: &mut LayerNorm) -> Tensor {
        g.gamma += &(dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
        g.beta += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        let dxhat = dy * &self.gamma;
        let d = dy.ncols() as f64;
        let mut dx = dxhat.clone();
        for (i, mut row) in dx.rows_mut().into_iter().enumerate() {
            let xh = cache.xhat.row(i);
            let mean_d = row.sum() / d;
            let mean_dx = row.dot(&xh) / d;
            let is = cache.inv_std[i];
            for (v, &h) in row.iter_mut().zip(xh.iter()) {
                *v = is * (*v - mean_d - h * mean_dx);
            }
        }
        dx
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}
impl_parameters!(Mlp { fc1, fc2 });

pub struct MlpCache {
    x: Tensor,
    pre: Tensor,
    act: Tensor,
}

impl Mlp {
    pub fn new<R: Rng>(dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            fc1: Linear::new(dim, hidden, rng),
            fc2: Linear::new(hidden, dim, rng),
        }
    }

    pub fn forward(&self, x: &Tensor) -> (Tensor, MlpCache) {
        let pre = self.fc1.forward(x);
        let act = pre.mapv(gelu);
        let y = self.fc2.forward(&act);
        (
            y,
            MlpCache {
                x: x.clone(),
                pre,
                act,
            },
        )
    }

    pub fn backward(&self, c: &MlpCache, dy: &Tensor, g: &mut Mlp) -> Tensor {
        let dact = self.fc2.backward(&c.act, dy, &mut g.fc2);
        let dpre = dact * &c.pre.mapv(gelu_grad);
        self.fc1.backward(&c.x, &dpre, &mut g.fc1)
    }
}

/// Multi-head scaled dot-product attention. Self-attention passes the same
/// matrix as `xq` and `xkv`.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}
impl_parameters!(Attention { q, k, v, o });

pub struct AttentionCache {
    xq: Tensor,
    xkv: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    probs: Vec<Tensor>,
    ctx: Tensor,
}

pub(crate) fn softmax_rows(s: &mut Tensor) {
    for mut row in s.rows_mut() {
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
}

impl Attention {
    pub fn new<R: Rng>(dim: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            q: Linear::new(dim, dim, rng),
            k: Linear::new(dim, dim, rng),
            v: Linear::new(dim, dim, rng),
            o: Linear::new(dim, dim, rng),
            heads,
        }
    }

    fn head_dim(&self) -> usize {
        self.q.w.ncols() / self.heads
    }

    pub fn forward(&self, xq: &Tensor, xkv: &Tensor) -> (Tensor, AttentionCache) {
        let q = self.q.forward(xq);
        let k = self.k.forward(xkv);
        let v = self.v.forward(xkv);
        let hd = self.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut ctx = Array2::zeros((xq.nrows(), q.ncols()));
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = s![.., h * hd..(h + 1) * hd];
            let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            softmax_rows(&mut scores);
            ctx.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
            probs.push(scores);
        }
        let out = self.o.forward(&ctx);
        (
            out,
            AttentionCache {
                xq: xq.clone(),
                xkv: xkv.clone(),
                q,
                k,
                v,
                probs,
                ctx,
            },
        )
    }

    /// Returns `(d xq, d xkv)`.
    pub fn backward(&self, c: &AttentionCache, dout: &Tensor, g: &mut Attention) -> (Tensor, Tensor) {
        let dctx = self.o.backward(&c.ctx, dout, &mut g.o);
        let hd = self.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut dq = Array2::zeros(c.q.raw_dim());
        let mut dk = Array2::zeros(c.k.raw_dim());
        let mut dv = Array2::zeros(c.v.raw_dim());
        for h in 0..self.heads {
            let cols = s![.., h * hd..(h + 1) * hd];
            let p = &c.probs[h];
            let dctx_h = dctx.slice(cols);
            let dp = dctx_h.dot(&c.v.slice(cols).t());
            dv.slice_mut(cols).assign(&p.t().dot(&dctx_h));
            // Softmax backward, row by row: dS = P ⊙ (dP − rowsum(dP ⊙ P)).
            let mut ds = &dp * p;
            for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                let total = row.sum();
                row.zip_mut_with(&prow, |d, &pv| *d -= pv * total);
            }
            ds.mapv_inplace(|x| x * scale);
            dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
        }
        let dxq = self.q.backward(&c.xq, &dq, &mut g.q);
        let dxkv = self.k.backward(&c.xkv, &dk, &mut g.k) + self.v.backward(&c.xkv, &dv, &mut g.v);
        (dxq, dxkv)
    }
}

pub(crate) fn normal_tensor<R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Tensor {
    let n = Normal::new(0.0, std).unwrap();
    Array2::from_shape_simple_fn((rows, cols), || n.sample(rng))
}
