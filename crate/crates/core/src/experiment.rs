//! Comparative experiment machinery: encoder feature caching, per-system
//! tokenizer training, captioner training/evaluation, and the linear
//! tagging probe. Shared by the CLI and the acceptance suite.

use std::collections::HashMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::artifact::{FeatureSource, TokenizerArtifact};
use crate::captioner::{
    caption_clips, train_caption_model, CaptionClip, CaptionTrainConfig, CaptionTrainLog,
    EncDecCaptioner, EncDecConfig, GeneratedCaption, TextVocab, DEFAULT_BEAM, DEFAULT_MAX_LEN,
};
use crate::corpus::{Clip, Corpus, EncoderConfig, FrozenEncoder, Split};
use crate::error::{Error, Result};
use crate::metrics::{cider_d, macro_f1, unique_words};
use crate::nn::{AdamW, Graph, Linear, ParamSet};
use crate::quantize::kmeans_fit;
use crate::repcodec::{train_repcodec, CodecTrainConfig, RepCodecConfig};
use crate::suptok::{
    export_tokenizer, mean_rows_values, pretrain_tagging_model_from_features,
    train_supervised_tokenizer_from_features, SupTokConfig, TaggerConfig, TaggingModel,
};

/// Corpus + frozen encoder + cached per-layer features.
pub struct ExperimentContext {
    pub corpus: Corpus,
    pub encoder: Arc<FrozenEncoder<f32>>,
    /// layer → per-split clip features (train, val, test order).
    cache: std::sync::Mutex<HashMap<usize, Arc<LayerFeatures>>>,
}

pub struct LayerFeatures {
    pub train: Vec<Vec<f32>>,
    pub val: Vec<Vec<f32>>,
    pub test: Vec<Vec<f32>>,
}

impl LayerFeatures {
    pub fn split(&self, split: Split) -> &[Vec<f32>] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

impl ExperimentContext {
    pub fn new(corpus: Corpus, encoder_cfg: &EncoderConfig) -> Result<Self> {
        if encoder_cfg.input_dim != corpus.cfg.feature_dim {
            return Err(Error::Config(format!(
                "encoder input_dim {} does not match corpus feature_dim {}",
                encoder_cfg.input_dim, corpus.cfg.feature_dim
            )));
        }
        Ok(Self {
            corpus,
            encoder: Arc::new(FrozenEncoder::build(encoder_cfg)?),
            cache: std::sync::Mutex::new(HashMap::new()),
        })
    }

    /// Encoder features at `layer` for every clip, computed once and cached.
    pub fn layer_features(&self, layer: usize) -> Result<Arc<LayerFeatures>> {
        if let Some(f) = self.cache.lock().unwrap().get(&layer) {
            return Ok(f.clone());
        }
        let encode_split = |clips: &[Clip]| -> Result<Vec<Vec<f32>>> {
            clips
                .par_iter()
                .map(|c| self.encoder.encode(&c.frames, c.t, layer))
                .collect()
        };
        let feats = Arc::new(LayerFeatures {
            train: encode_split(&self.corpus.train)?,
            val: encode_split(&self.corpus.val)?,
            test: encode_split(&self.corpus.test)?,
        });
        self.cache.lock().unwrap().insert(layer, feats.clone());
        Ok(feats)
    }

    /// Raw-frame matrices per split (the FBANK analogue).
    pub fn raw_frames(&self, split: Split) -> Vec<Vec<f32>> {
        self.corpus
            .split(split)
            .iter()
            .map(|c| c.frames.clone())
            .collect()
    }

    pub fn tags(&self, split: Split) -> Vec<Vec<f32>> {
        self.corpus
            .split(split)
            .iter()
            .map(|c| c.tags.as_f32())
            .collect()
    }
}

/// Per-system tokenizer training configuration for comparative runs.
#[derive(Debug, Clone)]
pub struct SystemConfig {
    pub k: usize,
    pub n_layers: usize,
    pub layer: usize,
    pub split: usize,
    pub kmeans_iters: usize,
    pub codec_train: CodecTrainConfig,
    pub tagger: TaggerConfig,
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self {
            k: 64,
            n_layers: 1,
            layer: 9,
            split: 9,
            kmeans_iters: 25,
            codec_train: CodecTrainConfig::default(),
            tagger: TaggerConfig::default(),
        }
    }
}

pub fn train_kmeans_tokenizer(
    ctx: &ExperimentContext,
    cfg: &SystemConfig,
    seed: u64,
) -> Result<TokenizerArtifact> {
    let feats = ctx.layer_features(cfg.layer)?;
    let dim = ctx.encoder.cfg.dim;
    let mut pool = Vec::new();
    for clip in &feats.train {
        pool.extend_from_slice(clip);
    }
    let model = kmeans_fit(&pool, dim, cfg.k, cfg.kmeans_iters, seed)?;
    Ok(TokenizerArtifact::KMeans {
        model,
        layer: cfg.layer,
    })
}

pub fn train_repcodec_tokenizer(
    ctx: &ExperimentContext,
    cfg: &SystemConfig,
    seed: u64,
) -> Result<TokenizerArtifact> {
    let feats = ctx.layer_features(cfg.layer)?;
    let rc_cfg = RepCodecConfig {
        input_dim: ctx.encoder.cfg.dim,
        k: cfg.k,
        n_layers: cfg.n_layers,
        seed,
    };
    let (model, _log) = train_repcodec(&feats.train, &rc_cfg, &cfg.codec_train)?;
    Ok(TokenizerArtifact::RepCodec {
        model,
        layer: cfg.layer,
    })
}

pub fn train_acoustic_proxy_tokenizer(
    ctx: &ExperimentContext,
    cfg: &SystemConfig,
    seed: u64,
) -> Result<TokenizerArtifact> {
    let clips = ctx.raw_frames(Split::Train);
    let rc_cfg = RepCodecConfig {
        input_dim: ctx.corpus.cfg.feature_dim,
        k: cfg.k,
        n_layers: cfg.n_layers,
        seed,
    };
    let (model, _log) = train_repcodec(&clips, &rc_cfg, &cfg.codec_train)?;
    Ok(TokenizerArtifact::AcousticProxy { model })
}

/// Pretrain (or reuse) the tagging model for supervised-tokenizer runs.
pub fn pretrain_tagger(
    ctx: &ExperimentContext,
    cfg: &TaggerConfig,
) -> Result<TaggingModel<f32>> {
    let feats = ctx.layer_features(cfg.tune_from)?;
    pretrain_tagging_model_from_features(
        ctx.encoder.clone(),
        &feats.train,
        &ctx.tags(Split::Train),
        &feats.val,
        &ctx.tags(Split::Val),
        cfg,
    )
}

pub fn train_suptok_tokenizer(
    ctx: &ExperimentContext,
    tagger: &TaggingModel<f32>,
    cfg: &SystemConfig,
    seed: u64,
) -> Result<(TokenizerArtifact, f64)> {
    let split_feats = ctx.layer_features(cfg.split)?;
    let st_cfg = SupTokConfig {
        split: cfg.split,
        k: cfg.k,
        n_layers: cfg.n_layers,
        commitment_beta: crate::quantize::COMMITMENT_BETA,
        seed,
    };
    let (model, log) = train_supervised_tokenizer_from_features(
        tagger.clone(),
        &split_feats.train,
        &ctx.tags(Split::Train),
        &split_feats.val,
        &ctx.tags(Split::Val),
        &st_cfg,
        &cfg.codec_train,
    )?;
    let final_f1 = log.val_f1.last().map(|&(_, f)| f).unwrap_or(0.0);
    let tokenizer = export_tokenizer(&model);
    Ok((
        TokenizerArtifact::SupTok {
            tokenizer,
            tagger_id: format!("tagger-f1-{:.3}", tagger.val_f1),
        },
        final_f1,
    ))
}

/// What the captioner consumes.
pub enum CaptionInput<'a> {
    /// Detokenized code vectors from a tokenizer.
    Tokens(&'a TokenizerArtifact),
    /// Continuous encoder features at a layer.
    Continuous { layer: usize },
    /// Raw low-level frames.
    RawFrames,
}

impl CaptionInput<'_> {
    pub fn name(&self) -> String {
        match self {
            CaptionInput::Tokens(t) => t.kind().to_string(),
            CaptionInput::Continuous { layer } => format!("continuous-l{layer}"),
            CaptionInput::RawFrames => "fbank".to_string(),
        }
    }
}

/// Build caption clips for one split under the given input condition.
pub fn caption_clips_for(
    ctx: &ExperimentContext,
    input: &CaptionInput<'_>,
    vocab: &TextVocab,
    split: Split,
) -> Result<(Vec<CaptionClip<f32>>, usize)> {
    let clips = ctx.corpus.split(split);
    let (features, dim): (Vec<Vec<f32>>, usize) = match input {
        CaptionInput::Tokens(art) => {
            let dim = art.detokenized_dim();
            let feats: Vec<Vec<f32>> = match art.source() {
                FeatureSource::EncoderLayer(layer) => {
                    let lf = ctx.layer_features(layer)?;
                    lf.split(split)
                        .par_iter()
                        .zip(clips.par_iter())
                        .map(|(f, c)| {
                            let toks = art.tokenize_features(f, c.t)?;
                            art.detokenize(&toks)
                        })
                        .collect::<Result<_>>()?
                }
                FeatureSource::RawFrames => clips
                    .par_iter()
                    .map(|c| {
                        let toks = art.tokenize_features(&c.frames, c.t)?;
                        art.detokenize(&toks)
                    })
                    .collect::<Result<_>>()?,
            };
            (feats, dim)
        }
        CaptionInput::Continuous { layer } => {
            let lf = ctx.layer_features(*layer)?;
            (lf.split(split).to_vec(), ctx.encoder.cfg.dim)
        }
        CaptionInput::RawFrames => (ctx.raw_frames(split), ctx.corpus.cfg.feature_dim),
    };
    let out = clips
        .iter()
        .zip(features)
        .map(|(clip, feats)| {
            let captions = clip
                .captions
                .iter()
                .map(|c| vocab.tokenize(c))
                .collect::<Result<Vec<_>>>()?;
            Ok(CaptionClip {
                id: clip.id.clone(),
                features: feats,
                t: clip.t,
                captions,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((out, dim))
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub system: String,
    pub cider: f64,
    pub n_words: usize,
    pub captions: Vec<GeneratedCaption>,
    pub train_log: CaptionTrainLog,
}

/// Train an encoder-decoder captioner on the given input condition and
/// score beam-3 captions on the test split.
pub fn run_captioner_eval(
    ctx: &ExperimentContext,
    input: &CaptionInput<'_>,
    train_cfg: &CaptionTrainConfig,
    seed: u64,
) -> Result<EvalOutcome> {
    let vocab = TextVocab::build(
        ctx.corpus
            .train
            .iter()
            .flat_map(|c| c.captions.iter().map(|s| s.as_str())),
    );
    let (train, dim) = caption_clips_for(ctx, input, &vocab, Split::Train)?;
    let (val, _) = caption_clips_for(ctx, input, &vocab, Split::Val)?;
    let (test, _) = caption_clips_for(ctx, input, &vocab, Split::Test)?;

    let mut model = EncDecCaptioner::<f32>::new(&EncDecConfig::desk(dim, seed), vocab)?;
    let train_log = train_caption_model(&mut model, &train, &val, train_cfg)?;
    let captions = caption_clips(&model, &test, DEFAULT_BEAM, DEFAULT_MAX_LEN)?;

    let candidates: Vec<String> = captions.iter().map(|c| c.caption.clone()).collect();
    let references: Vec<Vec<String>> = ctx
        .corpus
        .test
        .iter()
        .map(|c| c.captions.clone())
        .collect();
    let scores = cider_d(&candidates, &references)?;
    Ok(EvalOutcome {
        system: input.name(),
        cider: scores.corpus,
        n_words: unique_words(candidates.iter()),
        captions,
        train_log,
    })
}

/// Linear tagging probe on time-pooled detokenized token vectors:
/// logistic regression on the train split, macro-F1 on the test split.
pub fn token_probe_f1(
    ctx: &ExperimentContext,
    artifact: &TokenizerArtifact,
    seed: u64,
) -> Result<f64> {
    let dim = artifact.detokenized_dim();
    let pooled = |split: Split| -> Result<Vec<Vec<f32>>> {
        let clips = ctx.corpus.split(split);
        match artifact.source() {
            FeatureSource::EncoderLayer(layer) => {
                let lf = ctx.layer_features(layer)?;
                lf.split(split)
                    .par_iter()
                    .zip(clips.par_iter())
                    .map(|(f, c)| {
                        let toks = artifact.tokenize_features(f, c.t)?;
                        let det = artifact.detokenize(&toks)?;
                        Ok(mean_rows_values(&det, c.t, dim))
                    })
                    .collect()
            }
            FeatureSource::RawFrames => clips
                .par_iter()
                .map(|c| {
                    let toks = artifact.tokenize_features(&c.frames, c.t)?;
                    let det = artifact.detokenize(&toks)?;
                    Ok(mean_rows_values(&det, c.t, dim))
                })
                .collect(),
        }
    };
    logistic_probe(
        &pooled(Split::Train)?,
        &ctx.tags(Split::Train),
        &pooled(Split::Test)?,
        &ctx.tags(Split::Test),
        seed,
    )
}

/// Full-batch logistic-regression probe.
pub fn logistic_probe(
    train_x: &[Vec<f32>],
    train_y: &[Vec<f32>],
    test_x: &[Vec<f32>],
    test_y: &[Vec<f32>],
    seed: u64,
) -> Result<f64> {
    if train_x.is_empty() || test_x.is_empty() {
        return Err(Error::Data("probe needs train and test data".into()));
    }
    let dim = train_x[0].len();
    let n_classes = train_y[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params: ParamSet<f32> = ParamSet::new();
    let linear = Linear::new(&mut params, "probe", dim, n_classes, &mut rng, true);
    let mut opt = AdamW::new(&params, 0.05, 0.0);
    let n = train_x.len();
    let flat_x: Vec<f32> = train_x.iter().flatten().copied().collect();
    let flat_y: Vec<f32> = train_y.iter().flatten().copied().collect();
    for _epoch in 0..300 {
        let mut g: Graph<f32> = Graph::new();
        let x = g.input(flat_x.clone(), n, dim);
        let logits = linear.forward(&mut g, &params, x)?;
        let loss = g.bce_logits_sum(logits, &flat_y)?;
        let loss = g.scale(loss, 1.0 / n as f32);
        g.backward(loss)?;
        params.zero_grads();
        g.accumulate_param_grads(&mut params);
        opt.step(&mut params);
    }
    let mut g: Graph<f32> = Graph::new();
    let flat_test: Vec<f32> = test_x.iter().flatten().copied().collect();
    let x = g.input(flat_test, test_x.len(), dim);
    let logits = linear.forward(&mut g, &params, x)?;
    let probs = g.sigmoid(logits);
    let flat_ty: Vec<f32> = test_y.iter().flatten().copied().collect();
    Ok(macro_f1(g.value(probs), &flat_ty, n_classes, 0.5))
}

/// Median of a small sample.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
