//! Layers built on the tape, plus the AdamW optimizer.

use ndarray::{Array2, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Mat, ParamId, ParamStore, Tape, Var};

/// Gaussian init with standard deviation `std`.
pub fn init_normal<R: Rng>(rng: &mut R, shape: (usize, usize), std: f64) -> Mat {
    let dist = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_simple_fn(shape, || dist.sample(rng))
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, inp: usize, out: usize) -> Self {
        let std = (2.0 / (inp + out) as f64).sqrt();
        Linear {
            w: store.add(format!("{name}.w"), init_normal(rng, (inp, out), std)),
            b: store.add(format!("{name}.b"), Mat::zeros((1, out))),
        }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let w = t.param(self.w);
        let b = t.param(self.b);
        let y = t.matmul(x, w);
        t.add_row(y, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), Mat::ones((1, dim))),
            bias: store.add(format!("{name}.bias"), Mat::zeros((1, dim))),
        }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let g = t.param(self.gain);
        let b = t.param(self.bias);
        t.layer_norm(x, g, b)
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, dim: usize, heads: usize) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "dim {dim} not divisible by {heads} heads");
        MultiHeadAttention {
            heads,
            q: Linear::new(store, rng, &format!("{name}.q"), dim, dim),
            k: Linear::new(store, rng, &format!("{name}.k"), dim, dim),
            v: Linear::new(store, rng, &format!("{name}.v"), dim, dim),
            out: Linear::new(store, rng, &format!("{name}.out"), dim, dim),
        }
    }

    /// Self-attention over the rows of `x`. `allowed[i][j]` restricts which keys query `i`
    /// may attend to. Attention matrices are appended to `probs` when given.
    pub fn forward(&self, t: &mut Tape, x: Var, allowed: Option<&Array2<bool>>, probs: Option<&mut Vec<Var>>) -> Var {
        self.attend(t, x, x, allowed, probs)
    }

    /// Rows of `queries` attend over rows of `x`; `allowed` is `queries × x`.
    pub fn attend(
        &self,
        t: &mut Tape,
        queries: Var,
        x: Var,
        allowed: Option<&Array2<bool>>,
        mut probs: Option<&mut Vec<Var>>,
    ) -> Var {
        let dim = t.value(x).ncols();
        let dh = dim / self.heads;
        let q = self.q.forward(t, queries);
        let k = self.k.forward(t, x);
        let v = self.v.forward(t, x);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = t.slice_cols(q, h * dh, dh);
            let kh = t.slice_cols(k, h * dh, dh);
            let vh = t.slice_cols(v, h * dh, dh);
            let scores = t.matmul_bt(qh, kh);
            let scores = t.scale(scores, scale);
            let p = t.softmax(scores, allowed);
            if let Some(ps) = probs.as_deref_mut() {
                ps.push(p);
            }
            outs.push(t.matmul(p, vh));
        }
        let cat = if outs.len() == 1 { outs[0] } else { t.concat_cols(&outs) };
        self.out.forward(t, cat)
    }
}

/// Pre-norm transformer layer: `x + attn(ln(x))`, then `x + ffn(ln(x))`.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub ln_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln_ffn: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

impl TransformerBlock {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, dim: usize, heads: usize) -> Self {
        TransformerBlock {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), dim, heads),
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            ff_in: Linear::new(store, rng, &format!("{name}.ff1"), dim, 4 * dim),
            ff_out: Linear::new(store, rng, &format!("{name}.ff2"), 4 * dim, dim),
        }
    }

    pub fn forward(&self, t: &mut Tape, x: Var, allowed: Option<&Array2<bool>>, probs: Option<&mut Vec<Var>>) -> Var {
        let h = self.ln_attn.forward(t, x);
        let a = self.attn.forward(t, h, allowed, probs);
        let x = t.add(x, a);
        self.feed_forward(t, x)
    }

    /// The block's output for the selected rows only; `allowed` is `rows × all rows`.
    pub fn forward_rows(&self, t: &mut Tape, x: Var, rows: &[usize], allowed: Option<&Array2<bool>>) -> Var {
        let h = self.ln_attn.forward(t, x);
        let hq = t.gather(h, rows);
        let a = self.attn.attend(t, hq, h, allowed, None);
        let xq = t.gather(x, rows);
        let x = t.add(xq, a);
        self.feed_forward(t, x)
    }

    fn feed_forward(&self, t: &mut Tape, x: Var) -> Var {
        let h = self.ln_ffn.forward(t, x);
        let h = self.ff_in.forward(t, h);
        let h = t.relu(h);
        let h = self.ff_out.forward(t, h);
        t.add(x, h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Adam with decoupled weight decay. Decay applies to matrices, not to `1×n` rows.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl AdamW {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Self {
        let zeros = |id| Mat::zeros(store.get(id).dim());
        AdamW { config, step: 0, m: store.ids().map(zeros).collect(), v: store.ids().map(zeros).collect() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for id in store.ids().collect::<Vec<_>>() {
            let p = store.get_mut(id);
            let g = grads.dense_for(id, p.dim());
            let decay = if p.nrows() > 1 { c.weight_decay } else { 0.0 };
            Zip::from(p).and(&mut self.m[id.0]).and(&mut self.v[id.0]).and(&g).for_each(|p, m, v, &g| {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
                *p -= c.lr * (update + decay * *p);
            });
        }
    }
}
