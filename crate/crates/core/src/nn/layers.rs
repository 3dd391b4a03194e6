//! Transformer building blocks expressed on the autodiff [`Graph`].

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::{Matrix, Scalar};

pub const LN_EPS: f64 = 1e-5;
pub const MLP_RATIO: usize = 4;

pub fn normal_matrix<T: Scalar, R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Matrix<T> {
    let dist = Normal::new(0.0, std).expect("valid std");
    Matrix::from_fn(rows, cols, |_, _| T::of(dist.sample(rng)))
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        group: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        let std = 1.0 / (fan_in as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), group, normal_matrix(rng, fan_in, fan_out, std));
        let bias = store.add(format!("{name}.bias"), group, Matrix::zeros(1, fan_out));
        Self { weight, bias }
    }

    pub fn scalar_count(fan_in: usize, fan_out: usize) -> usize {
        fan_in * fan_out + fan_out
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, group: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), group, Matrix::filled(1, dim, T::one()));
        let beta = store.add(format!("{name}.beta"), group, Matrix::zeros(1, dim));
        Self { gamma, beta }
    }

    pub fn scalar_count(dim: usize) -> usize {
        2 * dim
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, T::of(LN_EPS))
    }
}

/// Multi-head scaled dot-product attention with separate query and
/// key/value inputs.
#[derive(Clone, Debug)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl Attention {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        group: &str,
        dim: usize,
        heads: usize,
    ) -> Self {
        assert!(heads > 0 && dim % heads == 0, "heads must divide dim");
        Self {
            query: Linear::new(store, rng, &format!("{name}.q"), group, dim, dim),
            key: Linear::new(store, rng, &format!("{name}.k"), group, dim, dim),
            value: Linear::new(store, rng, &format!("{name}.v"), group, dim, dim),
            out: Linear::new(store, rng, &format!("{name}.o"), group, dim, dim),
            heads,
            dim,
        }
    }

    pub fn scalar_count(dim: usize) -> usize {
        4 * Linear::scalar_count(dim, dim)
    }

    /// `key_mask[j] == false` excludes key `j` from every query's softmax.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        xq: Var,
        xkv: Var,
        key_mask: Option<&[bool]>,
    ) -> Var {
        let q = self.query.forward(g, store, xq);
        let k = self.key.forward(g, store, xkv);
        let v = self.value.forward(g, store, xkv);
        let head_dim = self.dim / self.heads;
        let scale = T::of(1.0 / (head_dim as f64).sqrt());
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * head_dim, head_dim),
                    g.slice_cols(k, h * head_dim, head_dim),
                    g.slice_cols(v, h * head_dim, head_dim),
                )
            };
            let scores = g.matmul_t(qh, kh);
            let scores = g.scale(scores, scale);
            let attn = g.softmax(scores, key_mask);
            outs.push(g.matmul(attn, vh));
        }
        let merged = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        self.out.forward(g, store, merged)
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, group: &str, dim: usize) -> Self {
        Self {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), group, dim, dim * MLP_RATIO),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), group, dim * MLP_RATIO, dim),
        }
    }

    pub fn scalar_count(dim: usize) -> usize {
        Linear::scalar_count(dim, dim * MLP_RATIO) + Linear::scalar_count(dim * MLP_RATIO, dim)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let h = self.fc1.forward(g, store, x);
        let h = g.gelu(h);
        self.fc2.forward(g, store, h)
    }
}

/// Pre-norm self-attention block.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl EncoderBlock {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Self {
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), name, dim),
            attn: Attention::new(store, rng, &format!("{name}.attn"), name, dim, heads),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), name, dim),
            mlp: Mlp::new(store, rng, &format!("{name}.mlp"), name, dim),
        }
    }

    pub fn scalar_count(dim: usize) -> usize {
        2 * LayerNorm::scalar_count(dim) + Attention::scalar_count(dim) + Mlp::scalar_count(dim)
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        key_mask: Option<&[bool]>,
    ) -> Var {
        let h = self.norm1.forward(g, store, x);
        let a = self.attn.forward(g, store, h, h, key_mask);
        let x = g.add(x, a);
        let h = self.norm2.forward(g, store, x);
        let m = self.mlp.forward(g, store, h);
        g.add(x, m)
    }
}

/// Pre-norm decoder layer: self-attention over the queries, cross-attention
/// into a memory sequence, then an MLP.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub norm1: LayerNorm,
    pub self_attn: Attention,
    pub norm2: LayerNorm,
    pub cross_attn: Attention,
    pub norm3: LayerNorm,
    pub mlp: Mlp,
}

impl DecoderLayer {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Self {
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), name, dim),
            self_attn: Attention::new(store, rng, &format!("{name}.self_attn"), name, dim, heads),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), name, dim),
            cross_attn: Attention::new(store, rng, &format!("{name}.cross_attn"), name, dim, heads),
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), name, dim),
            mlp: Mlp::new(store, rng, &format!("{name}.mlp"), name, dim),
        }
    }

    pub fn scalar_count(dim: usize) -> usize {
        3 * LayerNorm::scalar_count(dim) + 2 * Attention::scalar_count(dim) + Mlp::scalar_count(dim)
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        memory: Var,
        memory_mask: Option<&[bool]>,
    ) -> Var {
        let h = self.norm1.forward(g, store, x);
        let a = self.self_attn.forward(g, store, h, h, None);
        let x = g.add(x, a);
        let h = self.norm2.forward(g, store, x);
        let c = self.cross_attn.forward(g, store, h, memory, memory_mask);
        let x = g.add(x, c);
        let h = self.norm3.forward(g, store, x);
        let m = self.mlp.forward(g, store, h);
        g.add(x, m)
    }
}
