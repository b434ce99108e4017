//! Parameterized building blocks on top of [`Graph`].
//!
//! A layer only remembers the names of its parameters; the values live in a
//! [`ParamStore`] and are bound when a forward pass runs.

use rand::Rng;

use super::{Graph, ParamStore, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Linear {
    w: String,
    b: String,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w = format!("{name}.w");
        let b = format!("{name}.b");
        store.init_uniform(&w, &[d_in, d_out], d_in, rng)?;
        store.init_zeros(&b, &[d_out])?;
        Ok(Self { w, b, d_in, d_out })
    }

    /// Same as [`Linear::new`] but with all-zero weights.
    pub fn zeros(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let w = format!("{name}.w");
        let b = format!("{name}.b");
        store.init_zeros(&w, &[d_in, d_out])?;
        store.init_zeros(&b, &[d_out])?;
        Ok(Self { w, b, d_in, d_out })
    }

    /// `x[n × d_in] → [n × d_out]`
    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(&self.w)?;
        let b = g.param(&self.b)?;
        let y = g.matmul(x, w)?;
        g.add_row_bias(y, b)
    }
}

/// Linear layers with ReLU between them (none after the last).
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dims: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Config(format!("mlp `{name}` needs at least 2 dims")));
        }
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, g: &mut Graph<'_>, mut x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(g, x)?;
            if i != last {
                x = g.relu(x);
            }
        }
        Ok(x)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: String,
    beta: String,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        let gamma = format!("{name}.gamma");
        let beta = format!("{name}.beta");
        store.init_full(&gamma, &[dim], 1.0)?;
        store.init_zeros(&beta, &[dim])?;
        Ok(Self { gamma, beta })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let gamma = g.param(&self.gamma)?;
        let beta = g.param(&self.beta)?;
        g.layer_norm(x, gamma, beta)
    }
}

#[derive(Debug, Clone)]
pub struct Conv1d {
    w: String,
    b: String,
    pub stride: usize,
    pub pad: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w = format!("{name}.w");
        let b = format!("{name}.b");
        store.init_uniform(&w, &[c_out, c_in, kernel], c_in * kernel, rng)?;
        store.init_zeros(&b, &[c_out])?;
        Ok(Self { w, b, stride, pad })
    }

    pub fn zeros(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        pad: usize,
    ) -> Result<Self> {
        let w = format!("{name}.w");
        let b = format!("{name}.b");
        store.init_zeros(&w, &[c_out, c_in, kernel])?;
        store.init_zeros(&b, &[c_out])?;
        Ok(Self {
            w,
            b,
            stride: 1,
            pad,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(&self.w)?;
        let b = g.param(&self.b)?;
        g.conv1d(x, w, b, self.stride, self.pad)
    }

    /// Applies the layer to `segs` sequences laid side by side.
    pub fn forward_seg(&self, g: &mut Graph<'_>, x: Var, segs: usize) -> Result<Var> {
        let w = g.param(&self.w)?;
        let b = g.param(&self.b)?;
        g.conv1d_seg(x, w, b, self.stride, self.pad, segs)
    }
}

/// Self-attention with input and output projections.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "attention `{name}`: dim {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng)?,
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng)?,
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng)?,
            o: Linear::new(store, &format!("{name}.o"), dim, dim, rng)?,
            heads,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, valid_len: Option<usize>) -> Result<Var> {
        let q = self.q.forward(g, x)?;
        let k = self.k.forward(g, x)?;
        let v = self.v.forward(g, x)?;
        let h = g.multi_head_attention(q, k, v, self.heads, valid_len)?;
        self.o.forward(g, h)
    }
}

/// Pre-norm transformer encoder layer: `x + attn(ln(x))`, then
/// `x + ffn(ln(x))`.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    ffn: Mlp,
}

impl EncoderLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim)?,
            ffn: Mlp::new(store, &format!("{name}.ffn"), &[dim, ffn_dim, dim], rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, valid_len: Option<usize>) -> Result<Var> {
        let h = self.ln1.forward(g, x)?;
        let h = self.attn.forward(g, h, valid_len)?;
        let x = g.add(x, h)?;
        let h = self.ln2.forward(g, x)?;
        let h = self.ffn.forward(g, h)?;
        g.add(x, h)
    }
}

/// Stack of [`EncoderLayer`]s followed by a final layer norm.
#[derive(Debug, Clone)]
pub struct TransformerEncoder {
    layers: Vec<EncoderLayer>,
    ln: LayerNorm,
}

impl TransformerEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        n_layers: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let layers = (0..n_layers)
            .map(|i| EncoderLayer::new(store, &format!("{name}.{i}"), dim, heads, 2 * dim, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            layers,
            ln: LayerNorm::new(store, &format!("{name}.ln"), dim)?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, mut x: Var, valid_len: Option<usize>) -> Result<Var> {
        for l in &self.layers {
            x = l.forward(g, x, valid_len)?;
        }
        self.ln.forward(g, x)
    }
}
