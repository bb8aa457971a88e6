//! Frozen layered feature encoder: seeded random weights, permanently
//! non-trainable. Intermediate layer outputs play the role of the layers
//! of a pretrained representation model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    sinusoidal_positions, Graph, Linear, NodeId, ParamSet, Real, TransformerBlock,
};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub seed: u64,
    /// Number of stacked transformer layers L.
    pub layers: usize,
    /// Hidden width D.
    pub dim: usize,
    pub heads: usize,
    /// Input feature bins F.
    pub input_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            seed: 0xBEA75,
            layers: 12,
            dim: 64,
            heads: 4,
            input_dim: 32,
        }
    }
}

/// Residual-branch gain: keeps the stream input-dominated at depth so
/// intermediate layers mix context without washing out frame content.
const RESIDUAL_GAIN: f64 = 0.25;
/// Positional signal is a hint, not the dominant component.
const POSITION_SCALE: f64 = 0.35;

pub struct FrozenEncoder<S: Real> {
    pub cfg: EncoderConfig,
    params: ParamSet<S>,
    input_proj: Linear,
    blocks: Vec<TransformerBlock>,
}

impl<S: Real> FrozenEncoder<S> {
    pub fn build(cfg: &EncoderConfig) -> Result<Self> {
        if cfg.layers == 0 || cfg.dim == 0 || cfg.dim % cfg.heads != 0 {
            return Err(Error::Config(format!(
                "encoder config invalid: layers={}, dim={}, heads={}",
                cfg.layers, cfg.dim, cfg.heads
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = ParamSet::new();
        let input_proj = Linear::new(&mut params, "in", cfg.input_dim, cfg.dim, &mut rng, false);
        let blocks: Vec<TransformerBlock> = (0..cfg.layers)
            .map(|l| {
                TransformerBlock::new(
                    &mut params,
                    &format!("block{l}"),
                    cfg.dim,
                    cfg.heads,
                    cfg.dim * 4,
                    &mut rng,
                    false,
                )
            })
            .collect();
        let gain = S::from_f64(RESIDUAL_GAIN);
        for block in &blocks {
            for pid in [block.attn.wo.w, block.ff.fc2.w] {
                params
                    .get_mut(pid)
                    .values
                    .iter_mut()
                    .for_each(|v| *v *= gain);
            }
        }
        Ok(Self {
            cfg: cfg.clone(),
            params,
            input_proj,
            blocks,
        })
    }

    pub fn params(&self) -> &ParamSet<S> {
        &self.params
    }

    #[cfg(test)]
    pub(crate) fn params_mut(&mut self) -> &mut ParamSet<S> {
        &mut self.params
    }

    pub fn num_layers(&self) -> usize {
        self.cfg.layers
    }

    /// Project raw frames into the residual stream (input projection plus
    /// fixed sinusoidal positions), without running any block.
    pub fn embed_input(&self, g: &mut Graph<S>, frames: &[f32], t: usize) -> Result<NodeId> {
        if frames.len() != t * self.cfg.input_dim {
            return Err(Error::Shape(format!(
                "encoder input is {}x{}, got {} values",
                t,
                self.cfg.input_dim,
                frames.len()
            )));
        }
        let data: Vec<S> = frames.iter().map(|&v| S::from_f32(v)).collect();
        let x = g.input(data, t, self.cfg.input_dim);
        let projected = self.input_proj.forward(g, &self.params, x)?;
        let pos = g.input(sinusoidal_positions(t, self.cfg.dim), t, self.cfg.dim);
        let pos = g.scale(pos, S::from_f64(POSITION_SCALE));
        g.add(projected, pos)
    }

    /// Bind blocks `from..to` (zero-based, exclusive end) onto an existing
    /// graph node. Used both for plain encoding and to run the upper part
    /// of the stack over a quantization bottleneck.
    pub fn bind_blocks(
        &self,
        g: &mut Graph<S>,
        mut x: NodeId,
        from: usize,
        to: usize,
    ) -> Result<NodeId> {
        if from > to || to > self.blocks.len() {
            return Err(Error::Config(format!(
                "block range {from}..{to} out of 0..{}",
                self.blocks.len()
            )));
        }
        for block in &self.blocks[from..to] {
            x = block.forward(g, &self.params, x, false)?;
        }
        Ok(x)
    }

    /// Copy blocks `from..L` (0-based start) into another parameter set,
    /// e.g. as the task-tunable top of a tagging model.
    pub fn copy_top_blocks(
        &self,
        from: usize,
        dst: &mut ParamSet<S>,
        trainable: bool,
    ) -> Vec<TransformerBlock> {
        self.blocks[from..]
            .iter()
            .map(|b| b.copy_into(&self.params, dst, trainable))
            .collect()
    }

    /// Residual-stream output after `layer` blocks (1-based). The output of
    /// layer l is a prefix computation of the full stack, so calling with a
    /// smaller l is bit-identical to the intermediate state of a larger l.
    pub fn encode(&self, frames: &[f32], t: usize, layer: usize) -> Result<Vec<S>> {
        if layer < 1 || layer > self.cfg.layers {
            return Err(Error::Config(format!(
                "layer {layer} out of range 1..={}",
                self.cfg.layers
            )));
        }
        let mut g = Graph::new();
        let x = self.embed_input(&mut g, frames, t)?;
        let out = self.bind_blocks(&mut g, x, 0, layer)?;
        Ok(g.value(out).to_vec())
    }

    /// Outputs after every block in one pass: index l-1 holds the layer-l
    /// output. Cheaper than repeated `encode` calls when sweeping layers.
    pub fn encode_all_layers(&self, frames: &[f32], t: usize) -> Result<Vec<Vec<S>>> {
        let mut g = Graph::new();
        let mut x = self.embed_input(&mut g, frames, t)?;
        let mut outs = Vec::with_capacity(self.cfg.layers);
        for block in &self.blocks {
            x = block.forward(&mut g, &self.params, x, false)?;
            outs.push(g.value(x).to_vec());
        }
        Ok(outs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn test_cfg() -> EncoderConfig {
        EncoderConfig {
            seed: 99,
            layers: 4,
            dim: 16,
            heads: 4,
            input_dim: 8,
        }
    }

    fn random_frames(t: usize, f: usize, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..t * f).map(|_| rng.gen_range(-1.0f32..1.0)).collect()
    }

    #[test]
    fn encode_is_deterministic_and_layerwise_prefix() {
        let enc: FrozenEncoder<f32> = FrozenEncoder::build(&test_cfg()).unwrap();
        let frames = random_frames(10, 8, 1);
        let full = enc.encode_all_layers(&frames, 10).unwrap();
        for layer in 1..=4 {
            let direct = enc.encode(&frames, 10, layer).unwrap();
            assert_eq!(direct, full[layer - 1], "layer {layer} not a prefix state");
            let again = enc.encode(&frames, 10, layer).unwrap();
            assert_eq!(direct, again);
        }
    }

    #[test]
    fn different_layers_differ_on_random_input() {
        let enc: FrozenEncoder<f32> = FrozenEncoder::build(&test_cfg()).unwrap();
        let frames = random_frames(6, 8, 2);
        let l1 = enc.encode(&frames, 6, 1).unwrap();
        let l2 = enc.encode(&frames, 6, 2).unwrap();
        assert_ne!(l1, l2);
    }

    #[test]
    fn layer_out_of_range_errors() {
        let enc: FrozenEncoder<f32> = FrozenEncoder::build(&test_cfg()).unwrap();
        let frames = random_frames(5, 8, 3);
        assert!(enc.encode(&frames, 5, 0).is_err());
        assert!(enc.encode(&frames, 5, 5).is_err());
    }

    #[test]
    fn all_parameters_are_frozen() {
        let enc: FrozenEncoder<f32> = FrozenEncoder::build(&test_cfg()).unwrap();
        assert!(enc.params().iter().all(|(_, p)| !p.trainable));
    }

    #[test]
    fn outputs_stay_finite_at_depth() {
        let cfg = EncoderConfig::default();
        let enc: FrozenEncoder<f32> = FrozenEncoder::build(&cfg).unwrap();
        let frames = random_frames(20, cfg.input_dim, 4);
        let out = enc.encode(&frames, 20, cfg.layers).unwrap();
        assert!(out.iter().all(|v| v.is_finite()));
        let rms = (out.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / out.len() as f64).sqrt();
        assert!(rms > 1e-3 && rms < 1e3, "rms {rms}");
    }
}
