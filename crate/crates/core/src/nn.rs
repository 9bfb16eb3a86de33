//! Layer building blocks expressed as graph operations.

use crate::autograd::{Graph, Var};
use crate::params::{Block, Init, ParamId, ParamStore};
use crate::tensor::Matrix;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        block: Block,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let weight = store.insert(format!("{name}.weight"), block, init.linear(in_dim, out_dim));
        let bias = store.insert(format!("{name}.bias"), block, Matrix::zeros(1, out_dim));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
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
    pub fn new(store: &mut ParamStore, name: &str, block: Block, dim: usize) -> Self {
        Self {
            gamma: store.insert(format!("{name}.gamma"), block, Matrix::filled(1, dim, 1.0)),
            beta: store.insert(format!("{name}.beta"), block, Matrix::zeros(1, dim)),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// `Linear → GELU → Linear`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        block: Block,
        dims: (usize, usize, usize),
    ) -> Self {
        Self {
            fc1: Linear::new(store, init, &format!("{name}.fc1"), block, dims.0, dims.1),
            fc2: Linear::new(store, init, &format!("{name}.fc2"), block, dims.1, dims.2),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.fc1.forward(g, x);
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }
}

#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub n_heads: usize,
}

impl Attention {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        block: Block,
        dim: usize,
        n_heads: usize,
    ) -> Self {
        assert_eq!(dim % n_heads, 0, "width must divide into heads");
        Self {
            q: Linear::new(store, init, &format!("{name}.q"), block, dim, dim),
            k: Linear::new(store, init, &format!("{name}.k"), block, dim, dim),
            v: Linear::new(store, init, &format!("{name}.v"), block, dim, dim),
            o: Linear::new(store, init, &format!("{name}.o"), block, dim, dim),
            n_heads,
        }
    }

    /// Multi-head scaled dot-product attention. `bias`, when given, is added
    /// to the `queries × keys` score matrix of every head.
    pub fn forward(&self, g: &mut Graph, q_in: Var, k_in: Var, v_in: Var, bias: Option<Var>) -> Var {
        let q = self.q.forward(g, q_in);
        let k = self.k.forward(g, k_in);
        let v = self.v.forward(g, v_in);
        let dim = g.shape(q).1;
        let dh = dim / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let (qh, kh, vh) = if self.n_heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * dh, dh),
                    g.slice_cols(k, h * dh, dh),
                    g.slice_cols(v, h * dh, dh),
                )
            };
            let s = g.matmul_t(qh, false, kh, true);
            let s = g.scale(s, scale);
            let s = match bias {
                Some(b) => g.add(s, b),
                None => s,
            };
            let p = g.softmax_rows(s);
            heads.push(g.matmul(p, vh));
        }
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)
        };
        self.o.forward(g, cat)
    }
}

/// Pre-norm transformer block.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl TransformerBlock {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        block: Block,
        dim: usize,
        n_heads: usize,
        hidden: usize,
    ) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), block, dim),
            attn: Attention::new(store, init, &format!("{name}.attn"), block, dim, n_heads),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), block, dim),
            mlp: Mlp::new(store, init, &format!("{name}.mlp"), block, (dim, hidden, dim)),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, bias: Option<Var>) -> Var {
        let h = self.ln1.forward(g, x);
        let a = self.attn.forward(g, h, h, h, bias);
        let x = g.add(x, a);
        let h = self.ln2.forward(g, x);
        let m = self.mlp.forward(g, h);
        g.add(x, m)
    }
}

/// Additive mask that blocks attention to later positions.
pub fn causal_bias(n: usize) -> Matrix {
    Matrix::from_fn(n, n, |i, j| if j > i { -1e9 } else { 0.0 })
}

/// Fixed sinusoidal position table, `n × dim`.
pub fn sinusoidal_positions(n: usize, dim: usize) -> Matrix {
    Matrix::from_fn(n, dim, |pos, i| {
        let pair = (i / 2) as f64;
        let freq = 1.0 / 10000f64.powf(2.0 * pair / dim as f64);
        let a = pos as f64 * freq;
        if i % 2 == 0 {
            a.sin()
        } else {
            a.cos()
        }
    })
}
