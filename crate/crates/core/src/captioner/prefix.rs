//! Prefix-conditioned captioner: the audio representation is conv-
//! downsampled, concatenated with learnable embeddings, and passed through
//! a one-layer mapping network; the positions corresponding to the
//! learnable embeddings become prefix vectors for a frozen decoder-only
//! language model. Only the conv, mapping network, and prefix embeddings
//! train; the loss covers caption positions alone.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::math::log_softmax_row;
use crate::nn::{
    sinusoidal_positions, AdamW, Conv1dLayer, EmbeddingLayer, Graph, LayerNormLayer, Linear,
    NodeId, ParamId, ParamSet, Real, TransformerBlock,
};

use super::beam::StepDecoder;
use super::text::{TextVocab, BOS, EOS};

#[derive(Debug, Clone)]
pub struct LmConfig {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub seed: u64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            width: 128,
            layers: 2,
            heads: 4,
            seed: 1414,
        }
    }
}

/// Decoder-only language model over caption tokens. Fixed sinusoidal
/// positions keep it usable at any offset once prefix vectors are
/// prepended.
pub struct FrozenLm<S: Real> {
    pub cfg: LmConfig,
    pub vocab: TextVocab,
    pub params: ParamSet<S>,
    tok_emb: EmbeddingLayer,
    blocks: Vec<TransformerBlock>,
    final_ln: LayerNormLayer,
    out_proj: Linear,
}

impl<S: Real> FrozenLm<S> {
    pub fn new(cfg: &LmConfig, vocab: TextVocab) -> Result<Self> {
        if cfg.width % cfg.heads != 0 {
            return Err(Error::Config(format!(
                "lm width {} not divisible by {} heads",
                cfg.width, cfg.heads
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = ParamSet::new();
        let tok_emb = EmbeddingLayer::new(&mut params, "lm.tok", vocab.len(), cfg.width, &mut rng, true);
        let blocks = (0..cfg.layers)
            .map(|l| {
                TransformerBlock::new(
                    &mut params,
                    &format!("lm.block{l}"),
                    cfg.width,
                    cfg.heads,
                    cfg.width * 4,
                    &mut rng,
                    true,
                )
            })
            .collect();
        let final_ln = LayerNormLayer::new(&mut params, "lm.ln", cfg.width, &mut rng, true);
        let out_proj = Linear::new(&mut params, "lm.out", cfg.width, vocab.len(), &mut rng, true);
        Ok(Self {
            cfg: cfg.clone(),
            vocab,
            params,
            tok_emb,
            blocks,
            final_ln,
            out_proj,
        })
    }

    /// Causal forward over a sequence of already-embedded rows (prefix
    /// vectors and/or token embeddings) starting at position `pos_offset`.
    pub fn bind_over_embeddings(
        &self,
        g: &mut Graph<S>,
        rows: NodeId,
        pos_offset: usize,
    ) -> Result<NodeId> {
        let (len, width) = g.shape(rows);
        debug_assert_eq!(width, self.cfg.width);
        let full = sinusoidal_positions::<S>(pos_offset + len, width);
        let pos = g.input(full[pos_offset * width..].to_vec(), len, width);
        let mut h = g.add(rows, pos)?;
        for block in &self.blocks {
            h = block.forward(g, &self.params, h, true)?;
        }
        let h = self.final_ln.forward(g, &self.params, h)?;
        self.out_proj.forward(g, &self.params, h)
    }

    pub fn bind_tokens(&self, g: &mut Graph<S>, ids: &[usize]) -> Result<NodeId> {
        self.tok_emb.forward(g, &self.params, ids)
    }

    /// Next-token loss over one caption (bos…eos teacher forcing).
    pub fn bind_caption_loss(&self, g: &mut Graph<S>, caption_ids: &[usize]) -> Result<NodeId> {
        if caption_ids.is_empty() {
            return Err(Error::Data("caption has no tokens".into()));
        }
        let mut input = Vec::with_capacity(caption_ids.len() + 1);
        input.push(BOS);
        input.extend_from_slice(caption_ids);
        let mut targets = caption_ids.to_vec();
        targets.push(EOS);
        let emb = self.bind_tokens(g, &input)?;
        let logits = self.bind_over_embeddings(g, emb, 0)?;
        g.cross_entropy_mean(logits, &targets)
    }

    pub fn freeze(&mut self) {
        self.params.freeze_all();
    }

    pub fn is_frozen(&self) -> bool {
        self.params.iter().all(|(_, p)| !p.trainable)
    }
}

/// Next-token pretraining of the language model on caption text, then
/// freezing. Returns per-epoch mean training loss.
pub fn pretrain_lm<S: Real>(
    lm: &mut FrozenLm<S>,
    captions: &[Vec<usize>],
    epochs: usize,
    batch: usize,
    lr: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    if captions.is_empty() {
        return Err(Error::Data("lm pretraining needs captions".into()));
    }
    let mut opt = AdamW::new(&lm.params, lr, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut curve = Vec::with_capacity(epochs);
    let n = captions.len();
    for _epoch in 0..epochs {
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let mut epoch_loss = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(batch) {
            let results: Vec<Result<(f64, Vec<(ParamId, Vec<S>)>)>> = chunk
                .par_iter()
                .map(|&ci| {
                    let mut g = Graph::new();
                    let loss = lm.bind_caption_loss(&mut g, &captions[ci])?;
                    let v = g.scalar(loss).to_f64();
                    g.backward(loss)?;
                    Ok((v, g.param_grads()))
                })
                .collect();
            lm.params.zero_grads();
            let scale = S::ONE / S::from_usize(chunk.len());
            let mut batch_loss = 0.0;
            for r in results {
                let (v, grads) = r?;
                batch_loss += v;
                lm.params.add_scaled_grads(&grads, scale);
            }
            let batch_loss = batch_loss / chunk.len() as f64;
            if !batch_loss.is_finite() {
                return Err(Error::Numerical("lm pretraining diverged".into()));
            }
            opt.step(&mut lm.params);
            epoch_loss += batch_loss;
            steps += 1;
        }
        curve.push(epoch_loss / steps.max(1) as f64);
    }
    lm.freeze();
    Ok(curve)
}

#[derive(Debug, Clone)]
pub struct PrefixConfig {
    pub input_dim: usize,
    /// Number of learnable prefix embeddings k.
    pub k_prefix: usize,
    pub mapping_heads: usize,
    /// Longest downsampled feature length the mapping position table covers.
    pub max_mapped_len: usize,
    pub seed: u64,
}

impl PrefixConfig {
    pub fn desk(input_dim: usize, seed: u64) -> Self {
        Self {
            input_dim,
            k_prefix: 50,
            mapping_heads: 8,
            max_mapped_len: 256,
            seed,
        }
    }
}

pub struct PrefixCaptioner<S: Real> {
    pub cfg: PrefixConfig,
    pub lm: FrozenLm<S>,
    /// Trainable side: conv, prefix embeddings, mapping network and its
    /// position table.
    pub params: ParamSet<S>,
    conv: Conv1dLayer,
    prefix_emb: ParamId,
    map_pos: EmbeddingLayer,
    mapping: TransformerBlock,
}

impl<S: Real> PrefixCaptioner<S> {
    pub fn new(cfg: &PrefixConfig, lm: FrozenLm<S>) -> Result<Self> {
        if !lm.is_frozen() {
            return Err(Error::Config(
                "prefix captioner requires a frozen language model".into(),
            ));
        }
        let width = lm.cfg.width;
        if width % cfg.mapping_heads != 0 {
            return Err(Error::Config(format!(
                "lm width {width} not divisible by {} mapping heads",
                cfg.mapping_heads
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = ParamSet::new();
        let conv = Conv1dLayer::new(&mut params, "conv", 3, 3, cfg.input_dim, width, &mut rng, true);
        let prefix_emb = params.add(
            "prefix_emb",
            cfg.k_prefix,
            width,
            crate::nn::Init::Xavier,
            &mut rng,
            true,
        );
        let map_pos = EmbeddingLayer::new(
            &mut params,
            "map_pos",
            cfg.max_mapped_len + cfg.k_prefix,
            width,
            &mut rng,
            true,
        );
        let mapping = TransformerBlock::new(
            &mut params,
            "mapping",
            width,
            cfg.mapping_heads,
            width * 4,
            &mut rng,
            true,
        );
        Ok(Self {
            cfg: cfg.clone(),
            lm,
            params,
            conv,
            prefix_emb,
            map_pos,
            mapping,
        })
    }

    /// Prefix vectors for one clip: conv downsample (T→T'), concatenate the
    /// k learnable embeddings after the features, run the mapping network,
    /// and keep only the final k positions.
    pub fn bind_prefix(&self, g: &mut Graph<S>, features: &[S], t: usize) -> Result<NodeId> {
        if t < 3 {
            return Err(Error::Shape(format!(
                "prefix captioner needs at least 3 frames, got {t}"
            )));
        }
        if features.len() != t * self.cfg.input_dim {
            return Err(Error::Shape(format!(
                "prefix input is {t}x{}, got {} values",
                self.cfg.input_dim,
                features.len()
            )));
        }
        let x = g.input(features.to_vec(), t, self.cfg.input_dim);
        let down = self.conv.forward(g, &self.params, x)?;
        let (t_down, _) = g.shape(down);
        if t_down > self.cfg.max_mapped_len {
            return Err(Error::Config(format!(
                "downsampled length {t_down} exceeds mapping position table {}",
                self.cfg.max_mapped_len
            )));
        }
        let prefix = g.param(&self.params, self.prefix_emb);
        let seq = g.concat_rows(down, prefix)?;
        let positions: Vec<usize> = (0..t_down + self.cfg.k_prefix).collect();
        let pos = self.map_pos.forward(g, &self.params, &positions)?;
        let seq = g.add(seq, pos)?;
        let mapped = self.mapping.forward(g, &self.params, seq, false)?;
        g.slice_rows(mapped, t_down, self.cfg.k_prefix)
    }

    /// Eq.-style prefix loss: cross entropy on caption positions only.
    pub fn bind_loss(
        &self,
        g: &mut Graph<S>,
        features: &[S],
        t: usize,
        caption_ids: &[usize],
    ) -> Result<NodeId> {
        if caption_ids.is_empty() {
            return Err(Error::Data("caption has no tokens".into()));
        }
        let prefix = self.bind_prefix(g, features, t)?;
        let mut input = Vec::with_capacity(caption_ids.len() + 1);
        input.push(BOS);
        input.extend_from_slice(caption_ids);
        let mut targets = caption_ids.to_vec();
        targets.push(EOS);
        let tok = self.lm.bind_tokens(g, &input)?;
        let seq = g.concat_rows(prefix, tok)?;
        let logits = self.lm.bind_over_embeddings(g, seq, 0)?;
        let k = self.cfg.k_prefix;
        let caption_logits = g.slice_rows(logits, k, input.len())?;
        g.cross_entropy_mean(caption_logits, &targets)
    }

    pub fn loss(&self, features: &[S], t: usize, caption_ids: &[usize]) -> Result<f64> {
        let mut g = Graph::new();
        let node = self.bind_loss(&mut g, features, t, caption_ids)?;
        Ok(g.scalar(node).to_f64())
    }

    pub fn session<'a>(&'a self, features: &[S], t: usize) -> Result<PrefixSession<'a, S>> {
        let mut g = Graph::new();
        let prefix = self.bind_prefix(&mut g, features, t)?;
        Ok(PrefixSession {
            model: self,
            prefix_values: g.value(prefix).to_vec(),
        })
    }
}

pub struct PrefixSession<'a, S: Real> {
    model: &'a PrefixCaptioner<S>,
    prefix_values: Vec<S>,
}

impl<S: Real> StepDecoder for PrefixSession<'_, S> {
    fn vocab_size(&self) -> usize {
        self.model.lm.vocab.len()
    }

    fn eos(&self) -> usize {
        EOS
    }

    fn next_log_probs(&self, prefix_ids: &[usize]) -> Result<Vec<f64>> {
        let model = self.model;
        let k = model.cfg.k_prefix;
        let width = model.lm.cfg.width;
        let mut g = Graph::new();
        let pv = g.input(self.prefix_values.clone(), k, width);
        let mut input = Vec::with_capacity(prefix_ids.len() + 1);
        input.push(BOS);
        input.extend_from_slice(prefix_ids);
        let tok = model.lm.bind_tokens(&mut g, &input)?;
        let seq = g.concat_rows(pv, tok)?;
        let logits = model.lm.bind_over_embeddings(&mut g, seq, 0)?;
        let v = model.lm.vocab.len();
        let row_idx = k + input.len() - 1;
        let last = &g.value(logits)[row_idx * v..(row_idx + 1) * v];
        let row: Vec<f64> = last.iter().map(|&x| x.to_f64()).collect();
        Ok(log_softmax_row(&row))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::grad_check;

    fn vocab() -> TextVocab {
        TextVocab::build(["a dog barks", "a cat purrs", "rain falls softly"])
    }

    fn frozen_lm(seed: u64) -> FrozenLm<f64> {
        let cfg = LmConfig {
            width: 16,
            layers: 1,
            heads: 2,
            seed,
        };
        let mut lm = FrozenLm::new(&cfg, vocab()).unwrap();
        lm.freeze();
        lm
    }

    fn small_prefix(seed: u64) -> PrefixCaptioner<f64> {
        let cfg = PrefixConfig {
            input_dim: 6,
            k_prefix: 5,
            mapping_heads: 2,
            max_mapped_len: 32,
            seed,
        };
        PrefixCaptioner::new(&cfg, frozen_lm(seed + 1)).unwrap()
    }

    fn random_features(t: usize, dim: usize, seed: u64) -> Vec<f64> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..t * dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn mapping_length_and_prefix_count() {
        // T=30 → T'=10; with k=50 the mapping input would be length 60 and
        // the output 50 prefix vectors
        let cfg = PrefixConfig {
            input_dim: 6,
            k_prefix: 50,
            mapping_heads: 2,
            max_mapped_len: 32,
            seed: 0,
        };
        let model = PrefixCaptioner::new(&cfg, frozen_lm(1)).unwrap();
        let mut g = Graph::new();
        let p = model.bind_prefix(&mut g, &random_features(30, 6, 2), 30).unwrap();
        assert_eq!(g.shape(p), (50, 16));

        // prefix count independent of input length
        for t in [3usize, 9, 24, 60] {
            let mut g = Graph::new();
            let p = model.bind_prefix(&mut g, &random_features(t, 6, 3), t).unwrap();
            assert_eq!(g.shape(p).0, 50, "t={t}");
        }
        let mut g = Graph::new();
        assert!(model.bind_prefix(&mut g, &random_features(2, 6, 4), 2).is_err());
    }

    #[test]
    fn discarded_positions_still_mix_into_prefix_values() {
        let model = small_prefix(10);
        let base = random_features(12, 6, 5);
        let mut changed = base.clone();
        changed[0] += 0.5; // perturb a frame that only enters the discarded part
        let mut g1 = Graph::new();
        let p1 = model.bind_prefix(&mut g1, &base, 12).unwrap();
        let mut g2 = Graph::new();
        let p2 = model.bind_prefix(&mut g2, &changed, 12).unwrap();
        assert_eq!(g1.shape(p1), g2.shape(p2));
        assert_ne!(g1.value(p1), g2.value(p2), "attention must mix features in");
    }

    #[test]
    fn uniform_logit_lm_gives_ln_v_regardless_of_prefix() {
        let mut model = small_prefix(11);
        let wid = model.lm.out_proj.w;
        let bid = model.lm.out_proj.b;
        model.lm.params.get_mut(wid).values.iter_mut().for_each(|v| *v = 0.0);
        model.lm.params.get_mut(bid).values.iter_mut().for_each(|v| *v = 0.0);
        let ids = model.lm.vocab.tokenize("a dog barks").unwrap();
        let v = model.lm.vocab.len() as f64;
        for seed in [20u64, 21, 22] {
            let loss = model.loss(&random_features(12, 6, seed), 12, &ids).unwrap();
            assert!((loss - v.ln()).abs() < 1e-9, "loss {loss}");
        }
    }

    #[test]
    fn lm_stays_bitwise_frozen_through_training_steps() {
        let mut model: PrefixCaptioner<f32> = {
            let lm_cfg = LmConfig {
                width: 16,
                layers: 1,
                heads: 2,
                seed: 30,
            };
            let mut lm = FrozenLm::new(&lm_cfg, vocab()).unwrap();
            lm.freeze();
            let cfg = PrefixConfig {
                input_dim: 6,
                k_prefix: 4,
                mapping_heads: 2,
                max_mapped_len: 16,
                seed: 31,
            };
            PrefixCaptioner::new(&cfg, lm).unwrap()
        };
        let before: Vec<Vec<f32>> = model.lm.params.iter().map(|(_, p)| p.values.clone()).collect();
        let feats: Vec<f32> = random_features(12, 6, 32).iter().map(|&v| v as f32).collect();
        let ids = model.lm.vocab.tokenize("a cat purrs").unwrap();
        let mut opt = AdamW::new(&model.params, 1e-3, 0.0);
        for _ in 0..5 {
            let mut g = Graph::new();
            let loss = model.bind_loss(&mut g, &feats, 12, &ids).unwrap();
            g.backward(loss).unwrap();
            model.params.zero_grads();
            g.accumulate_param_grads(&mut model.params);
            opt.step(&mut model.params);
        }
        for ((_, p), b) in model.lm.params.iter().zip(before.iter()) {
            assert_eq!(&p.values, b, "frozen lm parameter {} changed", p.name);
        }
    }

    #[test]
    fn unfrozen_lm_is_rejected() {
        let cfg = LmConfig {
            width: 16,
            layers: 1,
            heads: 2,
            seed: 40,
        };
        let lm = FrozenLm::<f64>::new(&cfg, vocab()).unwrap();
        let pcfg = PrefixConfig {
            input_dim: 6,
            k_prefix: 4,
            mapping_heads: 2,
            max_mapped_len: 16,
            seed: 41,
        };
        assert!(PrefixCaptioner::new(&pcfg, lm).is_err());
    }

    #[test]
    fn prefix_loss_gradient_matches_finite_differences() {
        let model = small_prefix(50);
        let feats = random_features(12, 6, 51);
        let ids = model.lm.vocab.tokenize("rain falls softly").unwrap();
        let trainable: Vec<_> = model.params.ids().collect();
        let err = grad_check(&model.params.clone(), &trainable, 1e-5, |p| {
            let probe = PrefixCaptioner {
                cfg: model.cfg.clone(),
                lm: FrozenLm {
                    cfg: model.lm.cfg.clone(),
                    vocab: model.lm.vocab.clone(),
                    params: model.lm.params.clone(),
                    tok_emb: model.lm.tok_emb.clone(),
                    blocks: model.lm.blocks.clone(),
                    final_ln: model.lm.final_ln.clone(),
                    out_proj: model.lm.out_proj.clone(),
                },
                params: p.clone(),
                conv: model.conv.clone(),
                prefix_emb: model.prefix_emb,
                map_pos: model.map_pos.clone(),
                mapping: model.mapping.clone(),
            };
            let mut g = Graph::new();
            let loss = probe.bind_loss(&mut g, &feats, 12, &ids)?;
            Ok((g, loss))
        })
        .unwrap();
        assert!(err <= 1e-4, "rel err {err}");
    }

    #[test]
    fn lm_pretraining_reduces_loss_then_freezes() {
        let cfg = LmConfig {
            width: 32,
            layers: 1,
            heads: 2,
            seed: 60,
        };
        let captions = [
            "a dog barks",
            "a cat purrs",
            "rain falls softly",
            "a dog barks",
            "a cat purrs",
        ];
        let vocab = TextVocab::build(captions);
        let ids: Vec<Vec<usize>> = captions.iter().map(|c| vocab.tokenize(c).unwrap()).collect();
        let mut lm = FrozenLm::<f32>::new(&cfg, vocab).unwrap();
        let curve = pretrain_lm(&mut lm, &ids, 40, 4, 3e-3, 61).unwrap();
        assert!(curve.last().unwrap() < &(curve[0] * 0.5), "curve {curve:?}");
        assert!(lm.is_frozen());
    }
}
