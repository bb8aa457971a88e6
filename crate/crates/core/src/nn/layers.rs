//! Layer structs. Each holds `ParamId`s into a model's `ParamSet` and knows
//! how to bind itself into a graph for one forward pass.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;

use super::graph::{Graph, NodeId};
use super::params::{Init, ParamId, ParamSet};
use super::real::Real;

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<S: Real>(
        ps: &mut ParamSet<S>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut ChaCha8Rng,
        trainable: bool,
    ) -> Self {
        let w = ps.add(format!("{name}.w"), d_in, d_out, Init::Xavier, rng, trainable);
        let b = ps.add(format!("{name}.b"), 1, d_out, Init::Zeros, rng, trainable);
        Self { w, b }
    }

    pub fn copy_into<S: Real>(
        &self,
        src: &ParamSet<S>,
        dst: &mut ParamSet<S>,
        trainable: bool,
    ) -> Self {
        Self {
            w: copy_param(src, dst, self.w, trainable),
            b: copy_param(src, dst, self.b, trainable),
        }
    }

    pub fn forward<S: Real>(&self, g: &mut Graph<S>, ps: &ParamSet<S>, x: NodeId) -> Result<NodeId> {
        let w = g.param(ps, self.w);
        let b = g.param(ps, self.b);
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }
}

/// 1-D convolution over the time axis, kernel size `k`, no padding.
#[derive(Debug, Clone)]
pub struct Conv1dLayer {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub ksize: usize,
    pub stride: usize,
}

impl Conv1dLayer {
    pub fn new<S: Real>(
        ps: &mut ParamSet<S>,
        name: &str,
        ksize: usize,
        stride: usize,
        d_in: usize,
        d_out: usize,
        rng: &mut ChaCha8Rng,
        trainable: bool,
    ) -> Self {
        let kernel = ps.add(
            format!("{name}.kernel"),
            ksize * d_in,
            d_out,
            Init::Xavier,
            rng,
            trainable,
        );
        let bias = ps.add(format!("{name}.bias"), 1, d_out, Init::Zeros, rng, trainable);
        Self {
            kernel,
            bias,
            ksize,
            stride,
        }
    }

    pub fn forward<S: Real>(&self, g: &mut Graph<S>, ps: &ParamSet<S>, x: NodeId) -> Result<NodeId> {
        let k = g.param(ps, self.kernel);
        let b = g.param(ps, self.bias);
        let y = g.conv1d(x, k, self.ksize, self.stride)?;
        g.add_bias(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormLayer {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormLayer {
    pub fn new<S: Real>(
        ps: &mut ParamSet<S>,
        name: &str,
        dim: usize,
        rng: &mut ChaCha8Rng,
        trainable: bool,
    ) -> Self {
        let gain = ps.add(format!("{name}.gain"), 1, dim, Init::Ones, rng, trainable);
        let bias = ps.add(format!("{name}.bias"), 1, dim, Init::Zeros, rng, trainable);
        Self { gain, bias }
    }

    pub fn forward<S: Real>(&self, g: &mut Graph<S>, ps: &ParamSet<S>, x: NodeId) -> Result<NodeId> {
        let gain = g.param(ps, self.gain);
        let bias = g.param(ps, self.bias);
        g.layer_norm(x, gain, bias)
    }

    pub fn copy_into<S: Real>(
        &self,
        src: &ParamSet<S>,
        dst: &mut ParamSet<S>,
        trainable: bool,
    ) -> Self {
        Self {
            gain: copy_param(src, dst, self.gain, trainable),
            bias: copy_param(src, dst, self.bias, trainable),
        }
    }
}

/// Projected multi-head attention: q/k/v projections, fused attention,
/// output projection.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<S: Real>(
        ps: &mut ParamSet<S>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
        trainable: bool,
    ) -> Self {
        Self {
            wq: Linear::new(ps, &format!("{name}.q"), dim, dim, rng, trainable),
            wk: Linear::new(ps, &format!("{name}.k"), dim, dim, rng, trainable),
            wv: Linear::new(ps, &format!("{name}.v"), dim, dim, rng, trainable),
            wo: Linear::new(ps, &format!("{name}.o"), dim, dim, rng, trainable),
            heads,
        }
    }

    /// `query` attends to `memory` (self-attention when they coincide).
    pub fn forward<S: Real>(
        &self,
        g: &mut Graph<S>,
        ps: &ParamSet<S>,
        query: NodeId,
        memory: NodeId,
        causal: bool,
    ) -> Result<NodeId> {
        let q = self.wq.forward(g, ps, query)?;
        let k = self.wk.forward(g, ps, memory)?;
        let v = self.wv.forward(g, ps, memory)?;
        let attn = g.attention(q, k, v, self.heads, causal)?;
        self.wo.forward(g, ps, attn)
    }

    pub fn copy_into<S: Real>(
        &self,
        src: &ParamSet<S>,
        dst: &mut ParamSet<S>,
        trainable: bool,
    ) -> Self {
        Self {
            wq: self.wq.copy_into(src, dst, trainable),
            wk: self.wk.copy_into(src, dst, trainable),
            wv: self.wv.copy_into(src, dst, trainable),
            wo: self.wo.copy_into(src, dst, trainable),
            heads: self.heads,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new<S: Real>(
        ps: &mut ParamSet<S>,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
        trainable: bool,
    ) -> Self {
        Self {
            fc1: Linear::new(ps, &format!("{name}.fc1"), dim, hidden, rng, trainable),
            fc2: Linear::new(ps, &format!("{name}.fc2"), hidden, dim, rng, trainable),
        }
    }

    pub fn forward<S: Real>(&self, g: &mut Graph<S>, ps: &ParamSet<S>, x: NodeId) -> Result<NodeId> {
        let h = self.fc1.forward(g, ps, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, ps, h)
    }

    pub fn copy_into<S: Real>(
        &self,
        src: &ParamSet<S>,
        dst: &mut ParamSet<S>,
        trainable: bool,
    ) -> Self {
        Self {
            fc1: self.fc1.copy_into(src, dst, trainable),
            fc2: self.fc2.copy_into(src, dst, trainable),
        }
    }
}

/// Pre-LN transformer block: x + attn(ln1(x)), then x + ff(ln2(x)).
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub ln1: LayerNormLayer,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNormLayer,
    pub ff: FeedForward,
}

impl TransformerBlock {
    pub fn new<S: Real>(
        ps: &mut ParamSet<S>,
        name: &str,
        dim: usize,
        heads: usize,
        ff_hidden: usize,
        rng: &mut ChaCha8Rng,
        trainable: bool,
    ) -> Self {
        Self {
            ln1: LayerNormLayer::new(ps, &format!("{name}.ln1"), dim, rng, trainable),
            attn: MultiHeadAttention::new(ps, &format!("{name}.attn"), dim, heads, rng, trainable),
            ln2: LayerNormLayer::new(ps, &format!("{name}.ln2"), dim, rng, trainable),
            ff: FeedForward::new(ps, &format!("{name}.ff"), dim, ff_hidden, rng, trainable),
        }
    }

    pub fn forward<S: Real>(
        &self,
        g: &mut Graph<S>,
        ps: &ParamSet<S>,
        x: NodeId,
        causal: bool,
    ) -> Result<NodeId> {
        let h = self.ln1.forward(g, ps, x)?;
        let h = self.attn.forward(g, ps, h, h, causal)?;
        let x = g.add(x, h)?;
        let h = self.ln2.forward(g, ps, x)?;
        let h = self.ff.forward(g, ps, h)?;
        g.add(x, h)
    }

    pub fn copy_into<S: Real>(
        &self,
        src: &ParamSet<S>,
        dst: &mut ParamSet<S>,
        trainable: bool,
    ) -> Self {
        Self {
            ln1: self.ln1.copy_into(src, dst, trainable),
            attn: self.attn.copy_into(src, dst, trainable),
            ln2: self.ln2.copy_into(src, dst, trainable),
            ff: self.ff.copy_into(src, dst, trainable),
        }
    }
}

/// Decoder block with causal self-attention followed by cross-attention
/// into an encoder memory, then the feed-forward.
#[derive(Debug, Clone)]
pub struct DecoderBlock {
    pub ln1: LayerNormLayer,
    pub self_attn: MultiHeadAttention,
    pub ln2: LayerNormLayer,
    pub cross_attn: MultiHeadAttention,
    pub ln3: LayerNormLayer,
    pub ff: FeedForward,
}

impl DecoderBlock {
    pub fn new<S: Real>(
        ps: &mut ParamSet<S>,
        name: &str,
        dim: usize,
        heads: usize,
        ff_hidden: usize,
        rng: &mut ChaCha8Rng,
        trainable: bool,
    ) -> Self {
        Self {
            ln1: LayerNormLayer::new(ps, &format!("{name}.ln1"), dim, rng, trainable),
            self_attn: MultiHeadAttention::new(ps, &format!("{name}.self"), dim, heads, rng, trainable),
            ln2: LayerNormLayer::new(ps, &format!("{name}.ln2"), dim, rng, trainable),
            cross_attn: MultiHeadAttention::new(ps, &format!("{name}.cross"), dim, heads, rng, trainable),
            ln3: LayerNormLayer::new(ps, &format!("{name}.ln3"), dim, rng, trainable),
            ff: FeedForward::new(ps, &format!("{name}.ff"), dim, ff_hidden, rng, trainable),
        }
    }

    pub fn forward<S: Real>(
        &self,
        g: &mut Graph<S>,
        ps: &ParamSet<S>,
        x: NodeId,
        memory: NodeId,
    ) -> Result<NodeId> {
        let h = self.ln1.forward(g, ps, x)?;
        let h = self.self_attn.forward(g, ps, h, h, true)?;
        let x = g.add(x, h)?;
        let h = self.ln2.forward(g, ps, x)?;
        let h = self.cross_attn.forward(g, ps, h, memory, false)?;
        let x = g.add(x, h)?;
        let h = self.ln3.forward(g, ps, x)?;
        let h = self.ff.forward(g, ps, h)?;
        g.add(x, h)
    }
}

#[derive(Debug, Clone)]
pub struct EmbeddingLayer {
    pub table: ParamId,
}

impl EmbeddingLayer {
    pub fn new<S: Real>(
        ps: &mut ParamSet<S>,
        name: &str,
        vocab: usize,
        dim: usize,
        rng: &mut ChaCha8Rng,
        trainable: bool,
    ) -> Self {
        let table = ps.add(name, vocab, dim, Init::Xavier, rng, trainable);
        Self { table }
    }

    pub fn forward<S: Real>(
        &self,
        g: &mut Graph<S>,
        ps: &ParamSet<S>,
        ids: &[usize],
    ) -> Result<NodeId> {
        let t = g.param(ps, self.table);
        g.embedding(t, ids)
    }
}

fn copy_param<S: Real>(
    src: &ParamSet<S>,
    dst: &mut ParamSet<S>,
    id: crate::nn::params::ParamId,
    trainable: bool,
) -> crate::nn::params::ParamId {
    let p = src.get(id);
    dst.add_values(p.name.clone(), p.rows, p.cols, p.values.clone(), trainable)
}

/// Fixed sinusoidal position table (not a parameter).
pub fn sinusoidal_positions<S: Real>(len: usize, dim: usize) -> Vec<S> {
    let mut out = vec![S::ZERO; len * dim];
    for pos in 0..len {
        for i in 0..dim / 2 {
            let freq = 1.0 / 10_000f64.powf(2.0 * i as f64 / dim as f64);
            let angle = pos as f64 * freq;
            out[pos * dim + 2 * i] = S::from_f64(angle.sin());
            out[pos * dim + 2 * i + 1] = S::from_f64(angle.cos());
        }
    }
    out
}
