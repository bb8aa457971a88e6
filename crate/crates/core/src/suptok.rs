//! Supervised tokenizer: a frozen pretrained tagging encoder split in two,
//! with a trainable quantization module inserted between the halves. The
//! module's conv encoder/decoder train against the multi-label tagging
//! loss while codebooks follow EMA; the exported tokenizer is
//! encoder₁ → conv encoder → quantizer.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::corpus::{Corpus, FrozenEncoder, Split};
use crate::error::{Error, Result};
use crate::metrics::macro_f1;
use crate::nn::{AdamW, Graph, Linear, NodeId, ParamSet, Real, TransformerBlock};
use crate::quantize::{
    bind_straight_through, rvq_forward, rvq_forward_with_inputs, Codebook, TokenSequence,
    COMMITMENT_BETA,
};
use crate::repcodec::{CodecTrainConfig, ConvBlock};

/// Exact scalar evaluation of the summed binary cross-entropy over samples
/// and classes, with probabilities clamped at 1e-7.
pub fn bce_loss<S: Real>(probs: &[S], labels: &[S]) -> Result<S> {
    if probs.len() != labels.len() {
        return Err(Error::Shape(format!(
            "bce_loss: {} probabilities vs {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let lo = S::from_f64(crate::nn::graph::BCE_CLAMP);
    let hi = S::ONE - lo;
    let mut loss = S::ZERO;
    for (&p, &l) in probs.iter().zip(labels.iter()) {
        if !p.is_finite() {
            return Err(Error::Numerical("bce_loss: non-finite probability".into()));
        }
        let f = p.maxv(lo).minv(hi);
        loss -= l * f.ln() + (S::ONE - l) * (S::ONE - f).ln();
    }
    Ok(loss)
}

#[derive(Debug, Clone)]
pub struct TaggerConfig {
    /// Held-out macro-F1 the pretrained tagger must reach before freezing.
    pub f1_floor: f64,
    pub max_epochs: usize,
    pub lr: f64,
    pub seed: u64,
    /// 0-based block index where the tagger's own task-tuned copy of the
    /// encoder begins; blocks below stay in the shared frozen encoder.
    /// Set to the encoder depth for a head-only tagger.
    pub tune_from: usize,
    pub batch: usize,
}

impl Default for TaggerConfig {
    fn default() -> Self {
        Self {
            f1_floor: 0.9,
            max_epochs: 60,
            lr: 1e-3,
            seed: 17,
            tune_from: 9,
            batch: 32,
        }
    }
}

/// Tagging model: the shared frozen encoder up to `top_from`, a task-tuned
/// copy of the remaining blocks, and a linear tag head with sigmoid on the
/// time-pooled final state. Everything in `top` is frozen after
/// pretraining.
#[derive(Clone)]
pub struct TaggingModel<S: Real> {
    pub encoder: Arc<FrozenEncoder<S>>,
    /// 0-based block index where the tuned copy begins.
    pub top_from: usize,
    /// Tuned upper blocks plus the tag head.
    pub top: ParamSet<S>,
    top_blocks: Vec<TransformerBlock>,
    head_linear: Linear,
    pub n_classes: usize,
    pub val_f1: f64,
}

impl<S: Real> TaggingModel<S> {
    /// Tag logits for per-frame features taken at layer `top_from`:
    /// tuned blocks, time pooling, then the linear head.
    pub fn bind_top_logits(&self, g: &mut Graph<S>, feats: NodeId) -> Result<NodeId> {
        let mut h = feats;
        for block in &self.top_blocks {
            h = block.forward(g, &self.top, h, false)?;
        }
        let pooled = g.mean_rows(h);
        self.head_linear.forward(g, &self.top, pooled)
    }

    /// Tag probabilities for one clip's raw frames.
    pub fn predict(&self, frames: &[f32], t: usize) -> Result<Vec<S>> {
        let feats = self.encoder.encode(frames, t, self.top_from)?;
        self.predict_features(&feats, t)
    }

    /// Tag probabilities from precomputed layer-`top_from` features.
    pub fn predict_features(&self, feats: &[S], t: usize) -> Result<Vec<S>> {
        let mut g = Graph::new();
        let x = g.input(feats.to_vec(), t, self.encoder.cfg.dim);
        let logits = self.bind_top_logits(&mut g, x)?;
        let probs = g.sigmoid(logits);
        Ok(g.value(probs).to_vec())
    }
}

pub fn mean_rows_values<S: Real>(x: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::ZERO; cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c] += x[r * cols + c];
        }
    }
    let inv = S::ONE / S::from_usize(rows);
    out.iter_mut().for_each(|v| *v *= inv);
    out
}

/// Pretrain the tagger: fine-tune copies of the upper encoder blocks plus
/// the tag head with the tagging loss until the held-out macro-F1 reaches
/// the configured floor, then freeze everything.
pub fn pretrain_tagging_model<S: Real>(
    encoder: Arc<FrozenEncoder<S>>,
    corpus: &Corpus,
    cfg: &TaggerConfig,
) -> Result<TaggingModel<S>> {
    let encode = |clips: &[crate::corpus::Clip]| -> Result<Vec<Vec<S>>> {
        clips
            .par_iter()
            .map(|c| encoder.encode(&c.frames, c.t, cfg.tune_from))
            .collect()
    };
    let train_x = encode(&corpus.train)?;
    let val_x = encode(&corpus.val)?;
    let train_y: Vec<Vec<f32>> = corpus.train.iter().map(|c| c.tags.as_f32()).collect();
    let val_y: Vec<Vec<f32>> = corpus.val.iter().map(|c| c.tags.as_f32()).collect();
    pretrain_tagging_model_from_features(encoder, &train_x, &train_y, &val_x, &val_y, cfg)
}

/// Same as [`pretrain_tagging_model`] but on precomputed per-frame
/// layer-`tune_from` features.
pub fn pretrain_tagging_model_from_features<S: Real>(
    encoder: Arc<FrozenEncoder<S>>,
    train_x: &[Vec<S>],
    train_y: &[Vec<f32>],
    val_x: &[Vec<S>],
    val_y: &[Vec<f32>],
    cfg: &TaggerConfig,
) -> Result<TaggingModel<S>> {
    if train_x.is_empty() || train_y.len() != train_x.len() {
        return Err(Error::Data("tagging pretraining needs tagged clips".into()));
    }
    if cfg.tune_from < 1 || cfg.tune_from > encoder.num_layers() {
        return Err(Error::Config(format!(
            "tagger tune_from {} out of range 1..={}",
            cfg.tune_from,
            encoder.num_layers()
        )));
    }
    let dim = encoder.cfg.dim;
    let n_classes = train_y[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut top = ParamSet::new();
    let top_blocks = encoder.copy_top_blocks(cfg.tune_from, &mut top, true);
    let head_linear = Linear::new(&mut top, "tag_head", dim, n_classes, &mut rng, true);
    let mut opt = AdamW::new(&top, cfg.lr, 0.0);

    let mut model = TaggingModel {
        encoder,
        top_from: cfg.tune_from,
        top,
        top_blocks,
        head_linear,
        n_classes,
        val_f1: 0.0,
    };

    let n = train_x.len();
    let mut best_f1 = f64::MIN;
    for _epoch in 0..cfg.max_epochs {
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        for chunk in order.chunks(cfg.batch) {
            let results: Vec<Result<_>> = chunk
                .par_iter()
                .map(|&ci| {
                    let feats = &train_x[ci];
                    let t = feats.len() / dim;
                    let labels: Vec<S> = train_y[ci]
                        .iter()
                        .map(|&v| S::from_f64(v as f64))
                        .collect();
                    let mut g = Graph::new();
                    let x = g.input(feats.clone(), t, dim);
                    let logits = model.bind_top_logits(&mut g, x)?;
                    let loss = g.bce_logits_sum(logits, &labels)?;
                    let v = g.scalar(loss).to_f64();
                    g.backward(loss)?;
                    Ok((v, g.param_grads()))
                })
                .collect();
            model.top.zero_grads();
            let scale = S::ONE / S::from_usize(chunk.len());
            let mut batch_loss = 0.0;
            for r in results {
                let (v, grads) = r?;
                batch_loss += v;
                model.top.add_scaled_grads(&grads, scale);
            }
            if !(batch_loss / chunk.len() as f64).is_finite() {
                return Err(Error::Numerical("tagging pretraining diverged".into()));
            }
            opt.step(&mut model.top);
        }
        let f1 = eval_tagger_f1(&model, val_x, val_y)?;
        best_f1 = best_f1.max(f1);
        if f1 >= cfg.f1_floor {
            model.val_f1 = f1;
            model.top.freeze_all();
            return Ok(model);
        }
    }
    Err(Error::Numerical(format!(
        "tagging pretraining could not reach macro-F1 floor {} within {} epochs (best {best_f1:.4})",
        cfg.f1_floor, cfg.max_epochs
    )))
}

fn eval_tagger_f1<S: Real>(
    model: &TaggingModel<S>,
    val_x: &[Vec<S>],
    val_y: &[Vec<f32>],
) -> Result<f64> {
    let dim = model.encoder.cfg.dim;
    let probs: Vec<Vec<f32>> = val_x
        .par_iter()
        .map(|x| {
            let t = x.len() / dim;
            Ok(model
                .predict_features(x, t)?
                .iter()
                .map(|&p| p.to_f32())
                .collect())
        })
        .collect::<Result<_>>()?;
    let flat_p: Vec<f32> = probs.into_iter().flatten().collect();
    let labels: Vec<f32> = val_y.iter().flatten().copied().collect();
    Ok(macro_f1(&flat_p, &labels, model.n_classes, 0.5))
}

// ---- supervised tokenizer ---------------------------------------------------

#[derive(Debug, Clone)]
pub struct SupTokConfig {
    /// Encoder layers in the lower half (encoder₁); the remaining layers
    /// plus the tag head form the frozen upper half.
    pub split: usize,
    pub k: usize,
    /// Quantizer stages: 1 = VQ, 2 = RVQ.
    pub n_layers: usize,
    /// Commitment weight; 0 disables the term.
    pub commitment_beta: f64,
    pub seed: u64,
}

impl Default for SupTokConfig {
    fn default() -> Self {
        Self {
            split: 9,
            k: 64,
            n_layers: 1,
            commitment_beta: COMMITMENT_BETA,
            seed: 31,
        }
    }
}

pub struct SupTokModel<S: Real> {
    pub cfg: SupTokConfig,
    pub tagger: TaggingModel<S>,
    /// Trainable quantization-module weights (conv encoder + decoder).
    pub vq_params: ParamSet<S>,
    enc_blocks: Vec<ConvBlock>,
    dec_blocks: Vec<ConvBlock>,
    pub codebooks: Vec<Codebook<S>>,
}

pub struct SupTokLog {
    pub loss: Vec<(usize, f64)>,
    pub val_f1: Vec<(usize, f64)>,
}

impl<S: Real> SupTokModel<S> {
    fn new(tagger: TaggingModel<S>, cfg: &SupTokConfig, sample_features: &[S]) -> Result<Self> {
        let layers = tagger.encoder.num_layers();
        if cfg.split < 1 || cfg.split >= layers {
            return Err(Error::Config(format!(
                "split {} out of range 1..{layers}",
                cfg.split
            )));
        }
        if cfg.split > tagger.top_from {
            return Err(Error::Config(format!(
                "split {} is above the tagger's tuned region starting at {}",
                cfg.split, tagger.top_from
            )));
        }
        if !(1..=2).contains(&cfg.n_layers) {
            return Err(Error::Config(format!(
                "supervised tokenizer supports 1 or 2 quantizer layers, got {}",
                cfg.n_layers
            )));
        }
        let dim = tagger.encoder.cfg.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut vq_params = ParamSet::new();
        let enc_blocks = (0..3)
            .map(|i| ConvBlock::new(&mut vq_params, &format!("vq_enc{i}"), dim, &mut rng))
            .collect();
        let dec_blocks = (0..3)
            .map(|i| ConvBlock::new(&mut vq_params, &format!("vq_dec{i}"), dim, &mut rng))
            .collect();
        let codebooks = (0..cfg.n_layers)
            .map(|_| Codebook::init_from_data(cfg.k, dim, sample_features, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            tagger,
            vq_params,
            enc_blocks,
            dec_blocks,
            codebooks,
        })
    }

    pub fn bind_vq_encoder(&self, g: &mut Graph<S>, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        for b in &self.enc_blocks {
            h = b.forward(g, &self.vq_params, h)?;
        }
        Ok(h)
    }

    fn bind_vq_decoder(&self, g: &mut Graph<S>, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        for b in &self.dec_blocks {
            h = b.forward(g, &self.vq_params, h)?;
        }
        Ok(h)
    }

    /// Full tagging path on precomputed encoder₁ features. With `quantize`
    /// the bottleneck is active (straight-through + commitment); without it
    /// the conv stacks connect directly, which keeps the graph smooth for
    /// finite-difference checks.
    pub fn bind_tagging_path(
        &self,
        g: &mut Graph<S>,
        split_features: NodeId,
        quantize: bool,
    ) -> Result<TaggingPath<S>> {
        let (t, _) = g.shape(split_features);
        let e = self.bind_vq_encoder(g, split_features)?;
        let (bottleneck, commit, stages) = if quantize {
            let (indices, qsum, _res, inputs) =
                rvq_forward_with_inputs(&self.codebooks, g.value(e), t)?;
            let (st, commit) =
                bind_straight_through(g, e, &qsum, self.cfg.commitment_beta)?;
            (st, Some(commit), Some(StageData { inputs, indices }))
        } else {
            (e, None, None)
        };
        let d = self.bind_vq_decoder(g, bottleneck)?;
        let mid = self
            .tagger
            .encoder
            .bind_blocks(g, d, self.cfg.split, self.tagger.top_from)?;
        let logits = self.tagger.bind_top_logits(g, mid)?;
        let probs = g.sigmoid(logits);
        Ok(TaggingPath {
            logits,
            probs,
            commit,
            stages,
        })
    }

    /// Tag probabilities for one clip's raw frames, through the quantized
    /// bottleneck.
    pub fn predict(&self, frames: &[f32], t: usize) -> Result<Vec<S>> {
        let split_feats = self
            .tagger
            .encoder
            .encode(frames, t, self.cfg.split)?;
        let mut g = Graph::new();
        let x = g.input(split_feats, t, self.tagger.encoder.cfg.dim);
        let path = self.bind_tagging_path(&mut g, x, true)?;
        Ok(g.value(path.probs).to_vec())
    }

    /// Discrete tokens for one clip (the exported-pipeline computation).
    pub fn tokenize(&self, frames: &[f32], t: usize) -> Result<TokenSequence> {
        let split_feats = self.tagger.encoder.encode(frames, t, self.cfg.split)?;
        self.tokenize_split_features(&split_feats, t)
    }

    pub fn tokenize_split_features(&self, split_feats: &[S], t: usize) -> Result<TokenSequence> {
        let mut g = Graph::new();
        let x = g.input(split_feats.to_vec(), t, self.tagger.encoder.cfg.dim);
        let e = self.bind_vq_encoder(&mut g, x)?;
        let (indices, _, _) = rvq_forward(&self.codebooks, g.value(e), t)?;
        Ok(TokenSequence { indices })
    }
}

pub struct StageData<S: Real> {
    pub inputs: Vec<Vec<S>>,
    pub indices: Vec<Vec<u32>>,
}

/// Nodes produced by one tagging forward pass.
pub struct TaggingPath<S: Real> {
    pub logits: NodeId,
    pub probs: NodeId,
    pub commit: Option<NodeId>,
    pub stages: Option<StageData<S>>,
}

/// Train the quantization module between the frozen halves with the tagging
/// loss (batch-mean) plus commitment; codebooks follow EMA.
pub fn train_supervised_tokenizer<S: Real>(
    tagger: TaggingModel<S>,
    corpus: &Corpus,
    cfg: &SupTokConfig,
    train: &CodecTrainConfig,
) -> Result<(SupTokModel<S>, SupTokLog)> {
    let encoder = tagger.encoder.clone();
    let encode_split = |clips: &[crate::corpus::Clip]| -> Result<Vec<Vec<S>>> {
        clips
            .par_iter()
            .map(|c| encoder.encode(&c.frames, c.t, cfg.split))
            .collect()
    };
    let train_feats = encode_split(corpus.split(Split::Train))?;
    let val_feats = encode_split(corpus.split(Split::Val))?;
    let train_tags: Vec<Vec<f32>> = corpus.train.iter().map(|c| c.tags.as_f32()).collect();
    let val_tags: Vec<Vec<f32>> = corpus.val.iter().map(|c| c.tags.as_f32()).collect();
    train_supervised_tokenizer_from_features(
        tagger,
        &train_feats,
        &train_tags,
        &val_feats,
        &val_tags,
        cfg,
        train,
    )
}

/// Training core on precomputed encoder₁ (layer-`split`) features.
pub fn train_supervised_tokenizer_from_features<S: Real>(
    tagger: TaggingModel<S>,
    train_feats: &[Vec<S>],
    train_tags: &[Vec<f32>],
    val_feats: &[Vec<S>],
    val_tags: &[Vec<f32>],
    cfg: &SupTokConfig,
    train: &CodecTrainConfig,
) -> Result<(SupTokModel<S>, SupTokLog)> {
    if train_feats.is_empty() || train_tags.len() != train_feats.len() {
        return Err(Error::Data(
            "supervised tokenizer needs tagged training clips".into(),
        ));
    }
    let dim = tagger.encoder.cfg.dim;
    // snapshot frozen weights to verify the frozen-parameter invariant
    let encoder_before: Vec<Vec<S>> = tagger
        .encoder
        .params()
        .iter()
        .map(|(_, p)| p.values.clone())
        .collect();
    let top_before: Vec<Vec<S>> = tagger.top.iter().map(|(_, p)| p.values.clone()).collect();

    let mut sample = Vec::new();
    for f in train_feats.iter().take(32) {
        sample.extend_from_slice(f);
    }
    let mut model = SupTokModel::new(tagger, cfg, &sample)?;
    let mut opt = AdamW::new(&model.vq_params, train.lr, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5C0DE);
    let mut log = SupTokLog {
        loss: Vec::new(),
        val_f1: Vec::new(),
    };

    for step in 0..train.steps {
        let batch: Vec<usize> = (0..train.batch)
            .map(|_| rng.gen_range(0..train_feats.len()))
            .collect();
        let results: Vec<Result<_>> = batch
            .par_iter()
            .map(|&ci| {
                let feats = &train_feats[ci];
                let t = feats.len() / dim;
                let labels: Vec<S> = train_tags[ci]
                    .iter()
                    .map(|&v| S::from_f64(v as f64))
                    .collect();
                let mut g = Graph::new();
                let x = g.input(feats.clone(), t, dim);
                let path = model.bind_tagging_path(&mut g, x, true)?;
                let bce = g.bce_logits_sum(path.logits, &labels)?;
                let loss = match path.commit {
                    Some(c) => g.add(bce, c)?,
                    None => bce,
                };
                let loss_val = g.scalar(loss).to_f64();
                g.backward(loss)?;
                Ok((loss_val, g.param_grads(), path.stages.unwrap()))
            })
            .collect();

        model.vq_params.zero_grads();
        let scale = S::ONE / S::from_usize(train.batch);
        let mut loss_sum = 0.0;
        let mut stage_x: Vec<Vec<S>> = vec![Vec::new(); model.codebooks.len()];
        let mut stage_idx: Vec<Vec<u32>> = vec![Vec::new(); model.codebooks.len()];
        for r in results {
            let (loss_val, grads, stages) = r?;
            loss_sum += loss_val;
            model.vq_params.add_scaled_grads(&grads, scale);
            for (stage, (xs, idx)) in stages
                .inputs
                .into_iter()
                .zip(stages.indices)
                .enumerate()
            {
                stage_x[stage].extend(xs);
                stage_idx[stage].extend(idx);
            }
        }
        let loss = loss_sum / train.batch as f64;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!(
                "supervised tokenizer diverged at step {step}: loss {loss}"
            )));
        }
        for (stage, cb) in model.codebooks.iter_mut().enumerate() {
            cb.ema_update(&stage_x[stage], &stage_idx[stage]);
            let t = stage_idx[stage].len();
            cb.reseed_dead_codes(&stage_x[stage], t, &mut rng);
        }
        opt.step(&mut model.vq_params);
        if step % train.log_every == 0 || step + 1 == train.steps {
            log.loss.push((step, loss));
            if !val_feats.is_empty() {
                let f1 = eval_bottleneck_f1(&model, val_feats, val_tags)?;
                log.val_f1.push((step, f1));
            }
        }
    }

    // frozen-parameter invariant: bit-identical weights
    for ((_, p), before) in model.tagger.encoder.params().iter().zip(&encoder_before) {
        if p.values != *before {
            return Err(Error::Numerical(format!(
                "frozen encoder parameter {} changed during training",
                p.name
            )));
        }
    }
    for ((_, p), before) in model.tagger.top.iter().zip(&top_before) {
        if p.values != *before {
            return Err(Error::Numerical(format!(
                "frozen tagger parameter {} changed during training",
                p.name
            )));
        }
    }
    Ok((model, log))
}

/// Held-out tagging macro-F1 through the quantized bottleneck, from
/// precomputed encoder₁ features.
pub fn eval_bottleneck_f1<S: Real>(
    model: &SupTokModel<S>,
    feats: &[Vec<S>],
    tags: &[Vec<f32>],
) -> Result<f64> {
    let dim = model.tagger.encoder.cfg.dim;
    let n_classes = model.tagger.n_classes;
    let probs: Vec<Vec<f32>> = feats
        .par_iter()
        .map(|f| {
            let t = f.len() / dim;
            let mut g = Graph::new();
            let x = g.input(f.clone(), t, dim);
            let path = model.bind_tagging_path(&mut g, x, true)?;
            Ok(g.value(path.probs).iter().map(|&p| p.to_f32()).collect())
        })
        .collect::<Result<_>>()?;
    let flat_p: Vec<f32> = probs.into_iter().flatten().collect();
    let flat_l: Vec<f32> = tags.iter().flatten().copied().collect();
    Ok(macro_f1(&flat_p, &flat_l, n_classes, 0.5))
}

/// The exported pipeline: encoder₁, the quantization-module encoder, and
/// the quantizer. The upper encoder half, tag head, and conv decoder are
/// not part of the export.
pub struct SupTokTokenizer<S: Real> {
    pub encoder: Arc<FrozenEncoder<S>>,
    pub split: usize,
    pub vq_params: ParamSet<S>,
    enc_blocks: Vec<ConvBlock>,
    pub codebooks: Vec<Codebook<S>>,
}

pub fn export_tokenizer<S: Real>(model: &SupTokModel<S>) -> SupTokTokenizer<S> {
    let mut params = ParamSet::new();
    let enc_blocks = model
        .enc_blocks
        .iter()
        .map(|b| b.copy_into(&model.vq_params, &mut params))
        .collect();
    SupTokTokenizer {
        encoder: model.tagger.encoder.clone(),
        split: model.cfg.split,
        vq_params: params,
        enc_blocks,
        codebooks: model.codebooks.clone(),
    }
}

impl<S: Real> SupTokTokenizer<S> {
    /// Structural constructor (zeroed weights and codebooks); used when
    /// loading an exported pipeline from a checkpoint.
    pub fn build_untrained(
        encoder: Arc<FrozenEncoder<S>>,
        split: usize,
        k: usize,
        n_layers: usize,
    ) -> Result<Self> {
        if split < 1 || split >= encoder.num_layers() {
            return Err(Error::Config(format!(
                "split {split} out of range 1..{}",
                encoder.num_layers()
            )));
        }
        let dim = encoder.cfg.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut vq_params = ParamSet::new();
        let enc_blocks = (0..3)
            .map(|i| ConvBlock::new(&mut vq_params, &format!("vq_enc{i}"), dim, &mut rng))
            .collect();
        let codebooks = (0..n_layers).map(|_| Codebook::zeros(k, dim)).collect();
        Ok(Self {
            encoder,
            split,
            vq_params,
            enc_blocks,
            codebooks,
        })
    }

    pub fn tokenize(&self, frames: &[f32], t: usize) -> Result<TokenSequence> {
        let split_feats = self.encoder.encode(frames, t, self.split)?;
        self.tokenize_split_features(&split_feats, t)
    }

    pub fn tokenize_split_features(&self, split_feats: &[S], t: usize) -> Result<TokenSequence> {
        let mut g = Graph::new();
        let x = g.input(split_feats.to_vec(), t, self.encoder.cfg.dim);
        let mut h = x;
        for b in &self.enc_blocks {
            h = b.forward(&mut g, &self.vq_params, h)?;
        }
        let (indices, _, _) = rvq_forward(&self.codebooks, g.value(h), t)?;
        Ok(TokenSequence { indices })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{CorpusConfig, EncoderConfig};
    use crate::nn::grad_check;
    use crate::nn::params::Init;

    fn small_encoder_cfg() -> EncoderConfig {
        EncoderConfig {
            seed: 7,
            layers: 6,
            dim: 32,
            heads: 4,
            input_dim: 16,
        }
    }

    fn small_corpus(noise: f32, n_train: usize) -> Corpus {
        let cfg = CorpusConfig {
            n_classes: 8,
            n_train,
            n_val: 24,
            n_test: 24,
            duration_s: 1.0,
            frame_rate: 50,
            feature_dim: 16,
            noise_level: noise,
            max_events_per_clip: 2,
            class_offset: 0,
        };
        Corpus::generate(123, &cfg).unwrap()
    }

    #[test]
    fn bce_hand_cases_match_spec() {
        let loss = bce_loss(&[0.5f64, 0.5], &[1.0, 0.0]).unwrap();
        assert!((loss - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);

        let loss = bce_loss(&[0.9f64, 0.2], &[1.0, 0.0]).unwrap();
        assert!((loss - 0.3285040669720361).abs() < 1e-12);

        let loss = bce_loss(&[1.0f64, 0.0], &[1.0, 0.0]).unwrap();
        assert!(loss < 1e-5);

        assert!(bce_loss(&[f64::NAN], &[1.0]).is_err());
    }

    #[test]
    fn bce_matches_graph_op_on_random_inputs() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        for _ in 0..20 {
            let n = rng.gen_range(1..30);
            let probs: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..0.99)).collect();
            let labels: Vec<f64> = (0..n).map(|_| rng.gen_range(0..2) as f64).collect();
            let scalar = bce_loss(&probs, &labels).unwrap();
            let mut g: Graph<f64> = Graph::new();
            let p = g.input(probs.clone(), 1, n);
            let node = g.bce_sum(p, &labels).unwrap();
            assert!((scalar - g.scalar(node)).abs() < 1e-6);
        }
    }

    #[test]
    fn tagger_reaches_floor_on_noiseless_corpus() {
        let corpus = small_corpus(0.0, 96);
        let encoder = Arc::new(FrozenEncoder::<f32>::build(&small_encoder_cfg()).unwrap());
        let cfg = TaggerConfig {
            tune_from: 4,
            ..TaggerConfig::default()
        };
        let tagger = pretrain_tagging_model(encoder, &corpus, &cfg).unwrap();
        assert!(tagger.val_f1 >= 0.9, "val f1 {}", tagger.val_f1);
        assert!(tagger.top.iter().all(|(_, p)| !p.trainable));

        // frozen model re-evaluated twice → identical probabilities
        let clip = &corpus.test[0];
        let a = tagger.predict(&clip.frames, clip.t).unwrap();
        let b = tagger.predict(&clip.frames, clip.t).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn untrained_head_is_near_prevalence_baseline() {
        let corpus = small_corpus(0.0, 48);
        let encoder = Arc::new(FrozenEncoder::<f32>::build(&small_encoder_cfg()).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut top = ParamSet::new();
        let top_blocks = encoder.copy_top_blocks(4, &mut top, true);
        let head_linear = Linear::new(&mut top, "tag_head", 32, 8, &mut rng, true);
        let model = TaggingModel {
            encoder,
            top_from: 4,
            top,
            top_blocks,
            head_linear,
            n_classes: 8,
            val_f1: 0.0,
        };
        let mut probs = Vec::new();
        let mut labels = Vec::new();
        for clip in &corpus.val {
            probs.extend(model.predict(&clip.frames, clip.t).unwrap());
            labels.extend(clip.tags.as_f32());
        }
        let f1 = macro_f1(&probs, &labels, 8, 0.5);
        // a random-ish predictor sits near 2·0.5·π/(0.5+π) per class; far
        // below a trained tagger either way
        assert!(f1 < 0.6, "untrained f1 suspiciously high: {f1}");
    }

    fn quick_tagger(corpus: &Corpus) -> TaggingModel<f32> {
        let encoder = Arc::new(FrozenEncoder::<f32>::build(&small_encoder_cfg()).unwrap());
        let cfg = TaggerConfig {
            f1_floor: 0.85,
            tune_from: 4,
            ..TaggerConfig::default()
        };
        pretrain_tagging_model(encoder, corpus, &cfg).unwrap()
    }

    #[test]
    fn split_bounds_are_validated() {
        let corpus = small_corpus(0.0, 48);
        let tagger = quick_tagger(&corpus);
        let bad = SupTokConfig {
            split: 6,
            ..Default::default()
        };
        assert!(SupTokModel::new(tagger, &bad, &[0.0; 64]).is_err());
    }

    #[test]
    fn training_improves_bottleneck_f1_and_freezes_hold() {
        let corpus = small_corpus(0.0, 96);
        let tagger = quick_tagger(&corpus);
        let cfg = SupTokConfig {
            split: 4,
            k: 16,
            n_layers: 1,
            commitment_beta: 0.25,
            seed: 5,
        };
        let encoder = tagger.encoder.clone();
        let split_feats: Vec<Vec<f32>> = corpus
            .val
            .iter()
            .map(|c| encoder.encode(&c.frames, c.t, cfg.split).unwrap())
            .collect();
        let val_tags: Vec<Vec<f32>> = corpus.val.iter().map(|c| c.tags.as_f32()).collect();

        // F1 with a randomly initialized, untrained quantization module
        let mut sample = Vec::new();
        for fset in split_feats.iter().take(8) {
            sample.extend_from_slice(fset);
        }
        let untrained = SupTokModel::new(quick_tagger(&corpus), &cfg, &sample).unwrap();
        let f1_before = eval_bottleneck_f1(&untrained, &split_feats, &val_tags).unwrap();

        let train = CodecTrainConfig {
            steps: 120,
            batch: 8,
            lr: 1e-3,
            commitment_beta: 0.25,
            log_every: 40,
        };
        let (model, log) = train_supervised_tokenizer(tagger, &corpus, &cfg, &train).unwrap();
        let f1_after = eval_bottleneck_f1(&model, &split_feats, &val_tags).unwrap();
        assert!(
            f1_after >= f1_before,
            "f1 {f1_before} → {f1_after}, log {:?}",
            log.loss
        );
        assert!(log.loss.iter().all(|&(_, l)| l.is_finite()));
    }

    #[test]
    fn vq_module_receives_gradients_from_tagging_loss() {
        let corpus = small_corpus(0.1, 48);
        let tagger = quick_tagger(&corpus);
        let cfg = SupTokConfig {
            split: 4,
            k: 8,
            n_layers: 1,
            commitment_beta: 0.25,
            seed: 6,
        };
        let encoder = tagger.encoder.clone();
        let clip = &corpus.train[0];
        let feats = encoder.encode(&clip.frames, clip.t, cfg.split).unwrap();
        let model = SupTokModel::new(tagger, &cfg, &feats).unwrap();

        let labels: Vec<f32> = clip.tags.as_f32();
        let mut g: Graph<f32> = Graph::new();
        let x = g.input(feats.clone(), clip.t, 32);
        let path = model.bind_tagging_path(&mut g, x, true).unwrap();
        let bce = g.bce_logits_sum(path.logits, &labels).unwrap();
        let loss = g.add(bce, path.commit.unwrap()).unwrap();
        g.backward(loss).unwrap();
        let grads = g.param_grads();
        let enc_kernel = model.enc_blocks[0].conv.kernel;
        assert!(grads
            .iter()
            .any(|(pid, gv)| *pid == enc_kernel && gv.iter().any(|&v| v != 0.0)));
    }

    #[test]
    fn exported_pipeline_matches_model_and_is_deterministic() {
        let corpus = small_corpus(0.1, 48);
        let tagger = quick_tagger(&corpus);
        let cfg = SupTokConfig {
            split: 4,
            k: 8,
            n_layers: 2,
            commitment_beta: 0.25,
            seed: 8,
        };
        let train = CodecTrainConfig {
            steps: 30,
            batch: 4,
            lr: 1e-3,
            commitment_beta: 0.25,
            log_every: 10,
        };
        let (model, _) = train_supervised_tokenizer(tagger, &corpus, &cfg, &train).unwrap();
        let exported = export_tokenizer(&model);
        let clip = &corpus.test[0];
        let a = model.tokenize(&clip.frames, clip.t).unwrap();
        let b = exported.tokenize(&clip.frames, clip.t).unwrap();
        let c = export_tokenizer(&model).tokenize(&clip.frames, clip.t).unwrap();
        assert_eq!(a, b);
        assert_eq!(b, c);
        assert_eq!(a.n_layers(), 2);
        assert_eq!(a.len(), clip.t);
    }

    #[test]
    fn layers_above_split_never_influence_tokens() {
        // corrupt every block at or above the split; encoding at the split
        // layer (and hence tokenization) must be unchanged
        let cfg = small_encoder_cfg();
        let split = 4;
        let clean: FrozenEncoder<f32> = FrozenEncoder::build(&cfg).unwrap();
        let mut corrupted: FrozenEncoder<f32> = FrozenEncoder::build(&cfg).unwrap();
        for (_, p) in corrupted.params_mut().iter_mut() {
            for l in split..cfg.layers {
                if p.name.starts_with(&format!("block{l}.")) {
                    p.values.iter_mut().for_each(|v| *v = 0.0);
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        use rand::Rng;
        let frames: Vec<f32> = (0..20 * 16).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let a = clean.encode(&frames, 20, split).unwrap();
        let b = corrupted.encode(&frames, 20, split).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tagging_graph_gradient_matches_finite_differences() {
        // small f64 instantiation, quantizer bypassed so the path is smooth
        let enc_cfg = EncoderConfig {
            seed: 3,
            layers: 3,
            dim: 8,
            heads: 2,
            input_dim: 4,
        };
        let encoder = Arc::new(FrozenEncoder::<f64>::build(&enc_cfg).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut top = ParamSet::new();
        let top_blocks = encoder.copy_top_blocks(2, &mut top, false);
        let head_linear = Linear::new(&mut top, "tag_head", 8, 3, &mut rng, true);
        top.freeze_all();
        let tagger = TaggingModel {
            encoder,
            top_from: 2,
            top,
            top_blocks,
            head_linear,
            n_classes: 3,
            val_f1: 1.0,
        };
        let cfg = SupTokConfig {
            split: 2,
            k: 4,
            n_layers: 1,
            commitment_beta: 0.0,
            seed: 11,
        };
        use rand::Rng;
        let sample: Vec<f64> = (0..5 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let model = SupTokModel::new(tagger, &cfg, &sample).unwrap();
        let feats: Vec<f64> = (0..5 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let labels = vec![1.0f64, 0.0, 1.0];

        let ids: Vec<_> = model.vq_params.ids().collect();
        let err = grad_check(&model.vq_params.clone(), &ids, 1e-5, |p| {
            // rebuild the path against perturbed vq parameters
            let probe = SupTokModel {
                cfg: model.cfg.clone(),
                tagger: model.tagger.clone(),
                vq_params: p.clone(),
                enc_blocks: model.enc_blocks.clone(),
                dec_blocks: model.dec_blocks.clone(),
                codebooks: model.codebooks.clone(),
            };
            let mut g = Graph::new();
            let x = g.input(feats.clone(), 5, 8);
            let path = probe.bind_tagging_path(&mut g, x, false)?;
            let loss = g.bce_logits_sum(path.logits, &labels)?;
            Ok((g, loss))
        })
        .unwrap();
        assert!(err <= 1e-4, "rel err {err}");
        let _ = Init::Zeros;
    }
}

