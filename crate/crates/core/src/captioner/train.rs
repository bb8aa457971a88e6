//! Shared training/inference driver for both caption model families.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::{linear_decay, AdamW, Graph, NodeId, ParamSet, Real};

use super::beam::{beam_search, StepDecoder};
use super::encdec::EncDecCaptioner;
use super::prefix::PrefixCaptioner;
use super::text::TextVocab;

/// One training/eval clip: its model-input features and the tokenized
/// reference captions.
#[derive(Debug, Clone)]
pub struct CaptionClip<S: Real> {
    pub id: String,
    pub features: Vec<S>,
    pub t: usize,
    pub captions: Vec<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct CaptionTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    /// Initial learning rate, linearly decayed to zero over training.
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl CaptionTrainConfig {
    /// Desk-scale defaults.
    pub fn desk(seed: u64) -> Self {
        Self {
            epochs: 30,
            batch: 8,
            lr: 3e-4,
            weight_decay: 3e-4,
            seed,
        }
    }

    /// Operating point for full-scale runs (not exercised in tests).
    pub fn full_scale(seed: u64) -> Self {
        Self {
            epochs: 20,
            batch: 16,
            lr: 2e-5,
            weight_decay: 3e-4,
            seed,
        }
    }
}

/// Model-family abstraction the trainer and caption generator run against.
pub trait CaptionModel<S: Real>: Sync {
    fn vocab(&self) -> &TextVocab;
    fn trainable_params(&self) -> &ParamSet<S>;
    fn trainable_params_mut(&mut self) -> &mut ParamSet<S>;
    fn bind_caption_loss(
        &self,
        g: &mut Graph<S>,
        features: &[S],
        t: usize,
        caption_ids: &[usize],
    ) -> Result<NodeId>;
    fn step_decoder<'a>(&'a self, features: &[S], t: usize) -> Result<Box<dyn StepDecoder + 'a>>;
}

impl<S: Real> CaptionModel<S> for EncDecCaptioner<S> {
    fn vocab(&self) -> &TextVocab {
        &self.vocab
    }
    fn trainable_params(&self) -> &ParamSet<S> {
        &self.params
    }
    fn trainable_params_mut(&mut self) -> &mut ParamSet<S> {
        &mut self.params
    }
    fn bind_caption_loss(
        &self,
        g: &mut Graph<S>,
        features: &[S],
        t: usize,
        caption_ids: &[usize],
    ) -> Result<NodeId> {
        self.bind_loss(g, features, t, caption_ids)
    }
    fn step_decoder<'a>(&'a self, features: &[S], t: usize) -> Result<Box<dyn StepDecoder + 'a>> {
        Ok(Box::new(self.session(features, t)?))
    }
}

impl<S: Real> CaptionModel<S> for PrefixCaptioner<S> {
    fn vocab(&self) -> &TextVocab {
        &self.lm.vocab
    }
    fn trainable_params(&self) -> &ParamSet<S> {
        &self.params
    }
    fn trainable_params_mut(&mut self) -> &mut ParamSet<S> {
        &mut self.params
    }
    fn bind_caption_loss(
        &self,
        g: &mut Graph<S>,
        features: &[S],
        t: usize,
        caption_ids: &[usize],
    ) -> Result<NodeId> {
        self.bind_loss(g, features, t, caption_ids)
    }
    fn step_decoder<'a>(&'a self, features: &[S], t: usize) -> Result<Box<dyn StepDecoder + 'a>> {
        Ok(Box::new(self.session(features, t)?))
    }
}

#[derive(Debug, Clone)]
pub struct CaptionTrainLog {
    /// (train loss, val loss) per epoch.
    pub epochs: Vec<(f64, f64)>,
}

/// AdamW with linear LR decay to zero; one of the reference captions is
/// sampled uniformly per clip per epoch. Aborts on non-finite loss.
pub fn train_caption_model<S: Real, M: CaptionModel<S>>(
    model: &mut M,
    train: &[CaptionClip<S>],
    val: &[CaptionClip<S>],
    cfg: &CaptionTrainConfig,
) -> Result<CaptionTrainLog> {
    if train.is_empty() {
        return Err(Error::Data("caption training needs clips".into()));
    }
    let mut opt = AdamW::new(model.trainable_params(), cfg.lr, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = train.len();
    let steps_per_epoch = n.div_ceil(cfg.batch);
    let total_steps = (cfg.epochs * steps_per_epoch) as u64;
    let mut global_step = 0u64;
    let mut log = CaptionTrainLog { epochs: Vec::new() };

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let picks: Vec<usize> = order
            .iter()
            .map(|&ci| rng.gen_range(0..train[ci].captions.len()))
            .collect();

        let mut epoch_loss = 0.0;
        for (chunk, chunk_picks) in order
            .chunks(cfg.batch)
            .zip(picks.chunks(cfg.batch))
        {
            let results: Vec<Result<(f64, Vec<(crate::nn::ParamId, Vec<S>)>)>> = chunk
                .par_iter()
                .zip(chunk_picks.par_iter())
                .map(|(&ci, &pick)| {
                    let clip = &train[ci];
                    let mut g = Graph::new();
                    let loss =
                        model.bind_caption_loss(&mut g, &clip.features, clip.t, &clip.captions[pick])?;
                    let v = g.scalar(loss).to_f64();
                    g.backward(loss)?;
                    Ok((v, g.param_grads()))
                })
                .collect();
            let params = model.trainable_params_mut();
            params.zero_grads();
            let scale = S::ONE / S::from_usize(chunk.len());
            let mut batch_loss = 0.0;
            for r in results {
                let (v, grads) = r?;
                batch_loss += v;
                params.add_scaled_grads(&grads, scale);
            }
            let batch_loss = batch_loss / chunk.len() as f64;
            if !batch_loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "caption training diverged in epoch {epoch}: loss {batch_loss}"
                )));
            }
            opt.lr = S::from_f64(linear_decay(cfg.lr, global_step, total_steps));
            opt.step(model.trainable_params_mut());
            global_step += 1;
            epoch_loss += batch_loss * chunk.len() as f64;
        }
        let train_loss = epoch_loss / n as f64;
        let val_loss = if val.is_empty() {
            f64::NAN
        } else {
            mean_val_loss(model, val, epoch)?
        };
        log.epochs.push((train_loss, val_loss));
    }
    Ok(log)
}

fn mean_val_loss<S: Real, M: CaptionModel<S>>(
    model: &M,
    val: &[CaptionClip<S>],
    epoch: usize,
) -> Result<f64> {
    let losses: Vec<Result<f64>> = val
        .par_iter()
        .map(|clip| {
            let pick = epoch % clip.captions.len();
            let mut g = Graph::new();
            let loss = model.bind_caption_loss(&mut g, &clip.features, clip.t, &clip.captions[pick])?;
            Ok(g.scalar(loss).to_f64())
        })
        .collect();
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / val.len() as f64)
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct GeneratedCaption {
    pub clip_id: String,
    pub caption: String,
    pub log_prob: f64,
}

/// Beam-decode one clip into a caption string.
pub fn generate_caption<S: Real, M: CaptionModel<S>>(
    model: &M,
    features: &[S],
    t: usize,
    beam: usize,
    max_len: usize,
) -> Result<(String, f64)> {
    let decoder = model.step_decoder(features, t)?;
    let outcome = beam_search(decoder.as_ref(), beam, max_len)?;
    let text = model.vocab().detokenize(&outcome.best.ids);
    Ok((text, outcome.best.log_prob))
}

/// Caption an entire split in parallel (inference is read-only).
pub fn caption_clips<S: Real, M: CaptionModel<S>>(
    model: &M,
    clips: &[CaptionClip<S>],
    beam: usize,
    max_len: usize,
) -> Result<Vec<GeneratedCaption>> {
    clips
        .par_iter()
        .map(|clip| {
            let (caption, log_prob) = generate_caption(model, &clip.features, clip.t, beam, max_len)?;
            Ok(GeneratedCaption {
                clip_id: clip.id.clone(),
                caption,
                log_prob,
            })
        })
        .collect()
}
