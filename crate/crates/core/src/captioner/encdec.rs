//! Encoder-decoder caption model: a single strided conv over the audio
//! representation (threefold length reduction) feeding a small transformer
//! decoder that cross-attends to it while self-attending causally over
//! caption tokens.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::math::log_softmax_row;
use crate::nn::{
    Conv1dLayer, DecoderBlock, EmbeddingLayer, Graph, LayerNormLayer, Linear, NodeId, ParamSet,
    Real,
};

use super::beam::StepDecoder;
use super::text::{TextVocab, BOS, EOS};

#[derive(Debug, Clone)]
pub struct EncDecConfig {
    pub input_dim: usize,
    pub width: usize,
    pub dec_layers: usize,
    pub heads: usize,
    /// Longest caption (in tokens, incl. eos) the position table covers.
    pub max_caption_len: usize,
    pub seed: u64,
}

impl EncDecConfig {
    pub fn desk(input_dim: usize, seed: u64) -> Self {
        Self {
            input_dim,
            width: 128,
            dec_layers: 2,
            heads: 4,
            max_caption_len: 30,
            seed,
        }
    }
}

pub struct EncDecCaptioner<S: Real> {
    pub cfg: EncDecConfig,
    pub vocab: TextVocab,
    pub params: ParamSet<S>,
    conv: Conv1dLayer,
    tok_emb: EmbeddingLayer,
    pos_emb: EmbeddingLayer,
    blocks: Vec<DecoderBlock>,
    final_ln: LayerNormLayer,
    out_proj: Linear,
}

impl<S: Real> EncDecCaptioner<S> {
    pub fn new(cfg: &EncDecConfig, vocab: TextVocab) -> Result<Self> {
        if cfg.width % cfg.heads != 0 {
            return Err(Error::Config(format!(
                "captioner width {} not divisible by {} heads",
                cfg.width, cfg.heads
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = ParamSet::new();
        let conv = Conv1dLayer::new(
            &mut params,
            "conv",
            3,
            3,
            cfg.input_dim,
            cfg.width,
            &mut rng,
            true,
        );
        let tok_emb = EmbeddingLayer::new(&mut params, "tok_emb", vocab.len(), cfg.width, &mut rng, true);
        let pos_emb = EmbeddingLayer::new(
            &mut params,
            "pos_emb",
            cfg.max_caption_len + 2,
            cfg.width,
            &mut rng,
            true,
        );
        let blocks = (0..cfg.dec_layers)
            .map(|l| {
                DecoderBlock::new(
                    &mut params,
                    &format!("dec{l}"),
                    cfg.width,
                    cfg.heads,
                    cfg.width * 4,
                    &mut rng,
                    true,
                )
            })
            .collect();
        let final_ln = LayerNormLayer::new(&mut params, "final_ln", cfg.width, &mut rng, true);
        let out_proj = Linear::new(&mut params, "out", cfg.width, vocab.len(), &mut rng, true);
        Ok(Self {
            cfg: cfg.clone(),
            vocab,
            params,
            conv,
            tok_emb,
            pos_emb,
            blocks,
            final_ln,
            out_proj,
        })
    }

    /// Conv-downsampled memory the decoder cross-attends to.
    pub fn bind_memory(&self, g: &mut Graph<S>, features: &[S], t: usize) -> Result<NodeId> {
        if features.len() != t * self.cfg.input_dim {
            return Err(Error::Shape(format!(
                "captioner input is {t}x{}, got {} values",
                self.cfg.input_dim,
                features.len()
            )));
        }
        if t < 3 {
            return Err(Error::Shape(format!(
                "captioner needs at least 3 frames, got {t}"
            )));
        }
        let x = g.input(features.to_vec(), t, self.cfg.input_dim);
        self.conv.forward(g, &self.params, x)
    }

    /// Decoder logits over the vocab for each input position.
    pub fn bind_decoder(
        &self,
        g: &mut Graph<S>,
        memory: NodeId,
        input_ids: &[usize],
    ) -> Result<NodeId> {
        let tok = self.tok_emb.forward(g, &self.params, input_ids)?;
        let positions: Vec<usize> = (0..input_ids.len()).collect();
        let pos = self.pos_emb.forward(g, &self.params, &positions)?;
        let mut h = g.add(tok, pos)?;
        for block in &self.blocks {
            h = block.forward(g, &self.params, h, memory)?;
        }
        let h = self.final_ln.forward(g, &self.params, h)?;
        self.out_proj.forward(g, &self.params, h)
    }

    /// Teacher-forced mean cross entropy of one caption. `caption_ids` are
    /// the word ids without specials; the model wraps them in bos…eos.
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
        if caption_ids.len() + 1 > self.cfg.max_caption_len + 1 {
            return Err(Error::Config(format!(
                "caption of {} tokens exceeds max length {}",
                caption_ids.len(),
                self.cfg.max_caption_len
            )));
        }
        let memory = self.bind_memory(g, features, t)?;
        let mut input = Vec::with_capacity(caption_ids.len() + 1);
        input.push(BOS);
        input.extend_from_slice(caption_ids);
        let mut targets = caption_ids.to_vec();
        targets.push(EOS);
        let logits = self.bind_decoder(g, memory, &input)?;
        g.cross_entropy_mean(logits, &targets)
    }

    pub fn loss(&self, features: &[S], t: usize, caption_ids: &[usize]) -> Result<f64> {
        let mut g = Graph::new();
        let node = self.bind_loss(&mut g, features, t, caption_ids)?;
        Ok(g.scalar(node).to_f64())
    }

    /// Decoding session with the memory computed once.
    pub fn session<'a>(&'a self, features: &[S], t: usize) -> Result<EncDecSession<'a, S>> {
        let mut g = Graph::new();
        let memory = self.bind_memory(&mut g, features, t)?;
        let memory_values = g.value(memory).to_vec();
        let rows = g.shape(memory).0;
        Ok(EncDecSession {
            model: self,
            memory_values,
            memory_rows: rows,
        })
    }
}

pub struct EncDecSession<'a, S: Real> {
    model: &'a EncDecCaptioner<S>,
    memory_values: Vec<S>,
    memory_rows: usize,
}

impl<S: Real> StepDecoder for EncDecSession<'_, S> {
    fn vocab_size(&self) -> usize {
        self.model.vocab.len()
    }

    fn eos(&self) -> usize {
        EOS
    }

    fn next_log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let memory = g.input(
            self.memory_values.clone(),
            self.memory_rows,
            self.model.cfg.width,
        );
        let mut input = Vec::with_capacity(prefix.len() + 1);
        input.push(BOS);
        input.extend_from_slice(prefix);
        if input.len() > self.model.cfg.max_caption_len + 1 {
            return Err(Error::Config("decode prefix exceeds position table".into()));
        }
        let logits = self.model.bind_decoder(&mut g, memory, &input)?;
        let v = self.model.vocab.len();
        let last = &g.value(logits)[(input.len() - 1) * v..input.len() * v];
        let row: Vec<f64> = last.iter().map(|&x| x.to_f64()).collect();
        Ok(log_softmax_row(&row))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::grad_check;

    fn small_model(seed: u64) -> EncDecCaptioner<f64> {
        let vocab = TextVocab::build(["a dog barks", "a cat purrs", "rain falls"]);
        let cfg = EncDecConfig {
            input_dim: 6,
            width: 16,
            dec_layers: 1,
            heads: 2,
            max_caption_len: 12,
            seed,
        };
        EncDecCaptioner::new(&cfg, vocab).unwrap()
    }

    fn random_features(t: usize, dim: usize, seed: u64) -> Vec<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..t * dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn memory_length_is_floor_third() {
        let model = small_model(0);
        for (t, want) in [(9usize, 3usize), (10, 3), (12, 4), (3, 1)] {
            let mut g = Graph::new();
            let m = model.bind_memory(&mut g, &random_features(t, 6, 1), t).unwrap();
            assert_eq!(g.shape(m), (want, 16));
        }
        let mut g = Graph::new();
        assert!(model.bind_memory(&mut g, &random_features(2, 6, 1), 2).is_err());
    }

    #[test]
    fn uniform_logits_loss_is_ln_vocab() {
        // zero every parameter that feeds the logits: output projection
        // zeroed makes logits exactly uniform
        let mut model = small_model(1);
        let wid = model.out_proj.w;
        let bid = model.out_proj.b;
        model.params.get_mut(wid).values.iter_mut().for_each(|v| *v = 0.0);
        model.params.get_mut(bid).values.iter_mut().for_each(|v| *v = 0.0);
        let ids = model.vocab.tokenize("a dog barks").unwrap();
        let loss = model.loss(&random_features(9, 6, 2), 9, &ids).unwrap();
        let v = model.vocab.len() as f64;
        assert!((loss - v.ln()).abs() < 1e-6, "loss {loss} vs ln V {}", v.ln());
    }

    #[test]
    fn empty_caption_is_an_error() {
        let model = small_model(2);
        assert!(model.loss(&random_features(9, 6, 3), 9, &[]).is_err());
    }

    #[test]
    fn overfits_a_single_pair() {
        use crate::nn::AdamW;
        let mut model: EncDecCaptioner<f32> = {
            let vocab = TextVocab::build(["a dog barks", "a cat purrs"]);
            let cfg = EncDecConfig {
                input_dim: 6,
                width: 32,
                dec_layers: 1,
                heads: 2,
                max_caption_len: 12,
                seed: 3,
            };
            EncDecCaptioner::new(&cfg, vocab).unwrap()
        };
        let feats: Vec<f32> = random_features(9, 6, 4).iter().map(|&v| v as f32).collect();
        let ids = model.vocab.tokenize("a dog barks").unwrap();
        let mut opt = AdamW::new(&model.params, 3e-3, 0.0);
        let mut last = f64::INFINITY;
        for _ in 0..300 {
            let mut g = Graph::new();
            let loss = model.bind_loss(&mut g, &feats, 9, &ids).unwrap();
            last = g.scalar(loss) as f64;
            g.backward(loss).unwrap();
            model.params.zero_grads();
            g.accumulate_param_grads(&mut model.params);
            opt.step(&mut model.params);
        }
        assert!(last < 0.1, "loss stayed at {last}");
    }

    #[test]
    fn caption_loss_gradient_matches_finite_differences() {
        let model = small_model(5);
        let feats = random_features(9, 6, 6);
        let ids = model.vocab.tokenize("a dog barks").unwrap();
        let all_ids: Vec<_> = model.params.ids().collect();
        let err = grad_check(&model.params.clone(), &all_ids, 1e-5, |p| {
            let probe = EncDecCaptioner {
                cfg: model.cfg.clone(),
                vocab: model.vocab.clone(),
                params: p.clone(),
                conv: model.conv.clone(),
                tok_emb: model.tok_emb.clone(),
                pos_emb: model.pos_emb.clone(),
                blocks: model.blocks.clone(),
                final_ln: model.final_ln.clone(),
                out_proj: model.out_proj.clone(),
            };
            let mut g = Graph::new();
            let loss = probe.bind_loss(&mut g, &feats, 9, &ids)?;
            Ok((g, loss))
        })
        .unwrap();
        assert!(err <= 1e-4, "rel err {err}");
    }
}
