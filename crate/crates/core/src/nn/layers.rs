//! Layers built on [`Graph`]. Each layer registers its parameters under a
//! dotted name prefix at construction and only holds [`ParamId`]s.

use super::params::{normal_tensor, uniform_tensor, Graph, ParamId, ParamStore};
use super::tape::Var;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};
use crate::rng::StreamRng;

pub const NORM_EPS: f64 = 1e-5;

/// `y = x W + b` with `W: [in, out]`, Xavier-uniform initialized.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut StreamRng,
    ) -> Self {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let w = store.add(
            format!("{name}.weight"),
            uniform_tensor(&[in_dim, out_dim], bound, rng),
            true,
        );
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]), true);
        Linear {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        let y = g.tape.matmul(x, w)?;
        g.tape.add_bias(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.weight"), Tensor::full(&[dim], T::one()), true),
            beta: store.add(format!("{name}.bias"), Tensor::zeros(&[dim]), true),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (ga, be) = (g.param(self.gamma), g.param(self.beta));
        g.tape.layer_norm(x, ga, be, NORM_EPS)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize, groups: usize) -> Self {
        GroupNorm {
            gamma: store.add(
                format!("{name}.weight"),
                Tensor::full(&[channels], T::one()),
                true,
            ),
            beta: store.add(format!("{name}.bias"), Tensor::zeros(&[channels]), true),
            groups,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (ga, be) = (g.param(self.gamma), g.param(self.beta));
        g.tape.group_norm(x, ga, be, self.groups, NORM_EPS)
    }
}

#[derive(Clone, Debug)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
}

impl Conv1d {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        rng: &mut StreamRng,
    ) -> Self {
        let bound = 1.0 / ((in_ch * kernel) as f64).sqrt();
        Conv1d {
            w: store.add(
                format!("{name}.weight"),
                uniform_tensor(&[out_ch, in_ch, kernel], bound, rng),
                true,
            ),
            b: store.add(
                format!("{name}.bias"),
                uniform_tensor(&[out_ch], bound, rng),
                true,
            ),
            stride,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        g.tape.conv1d(x, w, b, self.stride)
    }
}

/// Batch statistics produced by a training-mode forward pass.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct BatchNorm1d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
}

impl BatchNorm1d {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize, momentum: f64) -> Self {
        BatchNorm1d {
            gamma: store.add(format!("{name}.weight"), Tensor::full(&[dim], T::one()), true),
            beta: store.add(format!("{name}.bias"), Tensor::zeros(&[dim]), true),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[dim]), false),
            running_var: store.add(
                format!("{name}.running_var"),
                Tensor::full(&[dim], T::one()),
                false,
            ),
            momentum,
        }
    }

    pub fn forward_train<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
    ) -> Result<(Var, BatchStats<T>)> {
        let (ga, be) = (g.param(self.gamma), g.param(self.beta));
        let (y, mean, var) = g.tape.batch_norm(x, ga, be, NORM_EPS)?;
        Ok((y, BatchStats { mean, var }))
    }

    pub fn forward_eval<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let store = g.store();
        let rm = store.get(self.running_mean).data();
        let rv = store.get(self.running_var).data();
        let (ga, be) = (g.param(self.gamma), g.param(self.beta));
        g.tape.batch_norm_eval(x, ga, be, rm, rv, NORM_EPS)
    }

    /// Exponential moving update of the running statistics.
    pub fn update_running<T: Real>(&self, store: &mut ParamStore<T>, stats: &BatchStats<T>) {
        let m = T::from_f64(self.momentum);
        let keep = T::one() - m;
        for (r, &b) in store.get_mut(self.running_mean).data_mut().iter_mut().zip(&stats.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in store.get_mut(self.running_var).data_mut().iter_mut().zip(&stats.var) {
            *r = keep * *r + m * b;
        }
    }
}

/// Multi-head self-attention with layer-normalized queries and keys:
/// `softmax(LN(Q) LN(K)^T / sqrt(d_head)) V`, followed by an output projection.
#[derive(Clone, Debug)]
pub struct Attention {
    pub qkv: Linear,
    pub q_norm: LayerNorm,
    pub k_norm: LayerNorm,
    pub proj: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl Attention {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::invalid(format!(
                "embedding dim {dim} not divisible by {heads} heads"
            )));
        }
        let dh = dim / heads;
        Ok(Attention {
            qkv: Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim, rng),
            q_norm: LayerNorm::new(store, &format!("{name}.q_norm"), dh),
            k_norm: LayerNorm::new(store, &format!("{name}.k_norm"), dh),
            proj: Linear::new(store, &format!("{name}.proj"), dim, dim, rng),
            heads,
            dim,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let qkv = self.qkv.forward(g, x)?;
        let dh = self.dim / self.heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let q = g.tape.slice_cols(qkv, h * dh, (h + 1) * dh)?;
            let k = g.tape.slice_cols(qkv, self.dim + h * dh, self.dim + (h + 1) * dh)?;
            let v = g
                .tape
                .slice_cols(qkv, 2 * self.dim + h * dh, 2 * self.dim + (h + 1) * dh)?;
            let q = self.q_norm.forward(g, q)?;
            let k = self.k_norm.forward(g, k)?;
            let s = g.tape.matmul_nt(q, k)?;
            let s = g.tape.scale(s, scale);
            let p = g.tape.softmax(s);
            outs.push(g.tape.matmul(p, v)?);
        }
        let o = if outs.len() == 1 {
            outs[0]
        } else {
            g.tape.concat_cols(&outs)?
        };
        self.proj.forward(g, o)
    }
}

/// Pre-norm Transformer block: `x + Attn(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Clone, Debug)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub dropout: f64,
}

impl Block {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: f64,
        dropout: f64,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        let hidden = ((dim as f64) * mlp_ratio).round() as usize;
        Ok(Block {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            attn: Attention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            fc1: Linear::new(store, &format!("{name}.mlp.fc1"), dim, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.mlp.fc2"), hidden, dim, rng),
            dropout,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.norm1.forward(g, x)?;
        let a = self.attn.forward(g, h)?;
        let a = g.dropout(a, self.dropout)?;
        let x = g.tape.add(x, a)?;
        let h = self.norm2.forward(g, x)?;
        let h = self.fc1.forward(g, h)?;
        let h = g.tape.gelu(h);
        let h = g.dropout(h, self.dropout)?;
        let h = self.fc2.forward(g, h)?;
        let h = g.dropout(h, self.dropout)?;
        g.tape.add(x, h)
    }
}

/// Learnable `[rows, dim]` table initialized from N(0, 0.02²).
pub fn embedding_table<T: Real>(
    store: &mut ParamStore<T>,
    name: &str,
    rows: usize,
    dim: usize,
    rng: &mut StreamRng,
) -> ParamId {
    store.add(name, normal_tensor(&[rows, dim], 0.02, rng), true)
}
