//! Representation codec: a trainable conv encoder → quantizer (VQ or RVQ)
//! → conv decoder trained to reconstruct its input representations. The
//! same model trained on raw low-level frames serves as the acoustic-proxy
//! tokenizer for comparative runs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::{AdamW, Conv1dLayer, Graph, NodeId, ParamSet, Real};
use crate::quantize::{
    bind_straight_through, rvq_forward, rvq_forward_with_inputs, Codebook, TokenSequence,
    COMMITMENT_BETA,
};

#[derive(Debug, Clone)]
pub struct RepCodecConfig {
    pub input_dim: usize,
    /// Codebook size K (shared by all stages).
    pub k: usize,
    /// Quantizer stages: 1 = VQ, 2 = RVQ.
    pub n_layers: usize,
    pub seed: u64,
}

impl RepCodecConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.n_layers) {
            return Err(Error::Config(format!(
                "repcodec supports 1 or 2 quantizer layers, got {}",
                self.n_layers
            )));
        }
        if self.k < 1 || self.input_dim < 1 {
            return Err(Error::Config("repcodec needs K >= 1 and input_dim >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CodecTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub commitment_beta: f64,
    /// Log the loss every this many steps (step 0 always logged).
    pub log_every: usize,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        // desk-scale defaults
        Self {
            steps: 2000,
            batch: 16,
            lr: 1e-3,
            commitment_beta: COMMITMENT_BETA,
            log_every: 10,
        }
    }
}

impl CodecTrainConfig {
    /// Operating point for full-scale runs (not exercised in tests).
    pub fn full_scale() -> Self {
        Self {
            steps: 100_000,
            batch: 64,
            lr: 1e-5,
            commitment_beta: COMMITMENT_BETA,
            log_every: 100,
        }
    }
}

/// Residual conv block, width-preserving: x + gelu(conv(pad(x))).
#[derive(Debug, Clone)]
pub(crate) struct ConvBlock {
    pub(crate) conv: Conv1dLayer,
}

impl ConvBlock {
    pub(crate) fn new<S: Real>(
        ps: &mut ParamSet<S>,
        name: &str,
        dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        // zero-init the residual branch so the block starts as the identity
        let conv = Conv1dLayer::new(ps, name, 3, 1, dim, dim, rng, true);
        let k = ps.get_mut(conv.kernel);
        k.values.iter_mut().for_each(|v| *v = S::ZERO);
        Self { conv }
    }

    pub(crate) fn forward<S: Real>(
        &self,
        g: &mut Graph<S>,
        ps: &ParamSet<S>,
        x: NodeId,
    ) -> Result<NodeId> {
        let padded = g.pad_rows(x, 1, 1);
        let h = self.conv.forward(g, ps, padded)?;
        let h = g.gelu(h);
        g.add(x, h)
    }

    /// Duplicate this block's weights into another parameter set.
    pub(crate) fn copy_into<S: Real>(&self, src: &ParamSet<S>, dst: &mut ParamSet<S>) -> Self {
        let k = src.get(self.conv.kernel);
        let b = src.get(self.conv.bias);
        let kernel = dst.add_values(k.name.clone(), k.rows, k.cols, k.values.clone(), k.trainable);
        let bias = dst.add_values(b.name.clone(), b.rows, b.cols, b.values.clone(), b.trainable);
        Self {
            conv: Conv1dLayer {
                kernel,
                bias,
                ksize: self.conv.ksize,
                stride: self.conv.stride,
            },
        }
    }
}

pub struct RepCodecModel<S: Real> {
    pub cfg: RepCodecConfig,
    pub params: ParamSet<S>,
    enc_blocks: Vec<ConvBlock>,
    dec_blocks: Vec<ConvBlock>,
    pub codebooks: Vec<Codebook<S>>,
}

pub struct TrainLog {
    /// (step, total loss, reconstruction mse) at each logged step.
    pub entries: Vec<(usize, f64, f64)>,
}

impl<S: Real> RepCodecModel<S> {
    /// Fresh model with codebooks seeded from rows of `sample_features`.
    pub fn new(cfg: &RepCodecConfig, sample_features: &[S]) -> Result<Self> {
        let mut model = Self::empty(cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xCB);
        model.codebooks = (0..cfg.n_layers)
            .map(|_| Codebook::init_from_data(cfg.k, cfg.input_dim, sample_features, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(model)
    }

    /// Structural constructor (zeroed codebooks); used when weights are
    /// loaded from a checkpoint.
    pub fn empty(cfg: &RepCodecConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = ParamSet::new();
        let enc_blocks = (0..3)
            .map(|i| ConvBlock::new(&mut params, &format!("enc{i}"), cfg.input_dim, &mut rng))
            .collect();
        let dec_blocks = (0..3)
            .map(|i| ConvBlock::new(&mut params, &format!("dec{i}"), cfg.input_dim, &mut rng))
            .collect();
        let codebooks = (0..cfg.n_layers)
            .map(|_| Codebook::zeros(cfg.k, cfg.input_dim))
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            params,
            enc_blocks,
            dec_blocks,
            codebooks,
        })
    }

    pub fn bind_encoder(&self, g: &mut Graph<S>, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        for block in &self.enc_blocks {
            h = block.forward(g, &self.params, h)?;
        }
        Ok(h)
    }

    pub fn bind_decoder(&self, g: &mut Graph<S>, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        for block in &self.dec_blocks {
            h = block.forward(g, &self.params, h)?;
        }
        Ok(h)
    }

    fn check_dim(&self, features: &[S]) -> Result<usize> {
        if features.len() % self.cfg.input_dim != 0 {
            return Err(Error::Shape(format!(
                "feature length {} is not a multiple of input_dim {}",
                features.len(),
                self.cfg.input_dim
            )));
        }
        Ok(features.len() / self.cfg.input_dim)
    }

    /// Deterministic tokenization: encoder output quantized stage by stage.
    pub fn tokenize(&self, features: &[S]) -> Result<TokenSequence> {
        let t = self.check_dim(features)?;
        let mut g = Graph::new();
        let x = g.input(features.to_vec(), t, self.cfg.input_dim);
        let e = self.bind_encoder(&mut g, x)?;
        let (indices, _, _) = rvq_forward(&self.codebooks, g.value(e), t)?;
        Ok(TokenSequence { indices })
    }

    /// Decoder applied to the detokenized encoder output; returns the
    /// reconstruction and its mean squared error against the input.
    pub fn reconstruct(&self, features: &[S]) -> Result<(Vec<S>, f64)> {
        let t = self.check_dim(features)?;
        let mut g = Graph::new();
        let x = g.input(features.to_vec(), t, self.cfg.input_dim);
        let e = self.bind_encoder(&mut g, x)?;
        let (_, qsum, _) = rvq_forward(&self.codebooks, g.value(e), t)?;
        let q = g.input(qsum, t, self.cfg.input_dim);
        let recon = self.bind_decoder(&mut g, q)?;
        let rec = g.value(recon).to_vec();
        let mse = rec
            .iter()
            .zip(features.iter())
            .map(|(&r, &f)| (r - f).to_f64().powi(2))
            .sum::<f64>()
            / rec.len() as f64;
        Ok((rec, mse))
    }

    /// Mean reconstruction MSE over a set of clips.
    pub fn mean_mse(&self, clips: &[Vec<S>]) -> Result<f64> {
        let mut total = 0.0;
        for clip in clips {
            total += self.reconstruct(clip)?.1;
        }
        Ok(total / clips.len().max(1) as f64)
    }
}

/// Train on per-clip feature matrices (each `t×input_dim`, row-major).
/// Minimizes reconstruction MSE plus the commitment term; codebooks follow
/// EMA with dead-code reseeding.
pub fn train_repcodec<S: Real>(
    clips: &[Vec<S>],
    cfg: &RepCodecConfig,
    train: &CodecTrainConfig,
) -> Result<(RepCodecModel<S>, TrainLog)> {
    if clips.is_empty() {
        return Err(Error::Data("train_repcodec: empty corpus".into()));
    }
    // seed codebooks from encoder-input rows of the first clips
    let mut sample = Vec::new();
    for clip in clips.iter().take(64) {
        sample.extend_from_slice(clip);
    }
    let mut model = RepCodecModel::new(cfg, &sample)?;
    let mut opt = AdamW::new(&model.params, train.lr, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7EA1);
    let mut log = TrainLog { entries: Vec::new() };

    for step in 0..train.steps {
        let batch: Vec<usize> = (0..train.batch)
            .map(|_| rng.gen_range(0..clips.len()))
            .collect();
        let results: Vec<_> = batch
            .par_iter()
            .map(|&ci| clip_pass(&model, &clips[ci], train.commitment_beta))
            .collect();

        model.params.zero_grads();
        let scale = S::ONE / S::from_usize(train.batch);
        let mut loss_sum = 0.0;
        let mut mse_sum = 0.0;
        let mut stage_x: Vec<Vec<S>> = vec![Vec::new(); model.codebooks.len()];
        let mut stage_idx: Vec<Vec<u32>> = vec![Vec::new(); model.codebooks.len()];
        for r in results {
            let pass = r?;
            loss_sum += pass.loss;
            mse_sum += pass.mse;
            model.params.add_scaled_grads(&pass.grads, scale);
            for (stage, (xs, idx)) in pass.stages.into_iter().enumerate() {
                stage_x[stage].extend(xs);
                stage_idx[stage].extend(idx);
            }
        }
        let loss = loss_sum / train.batch as f64;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!(
                "repcodec training diverged at step {step}: loss {loss}"
            )));
        }
        for (stage, cb) in model.codebooks.iter_mut().enumerate() {
            cb.ema_update(&stage_x[stage], &stage_idx[stage]);
            let t = stage_idx[stage].len();
            cb.reseed_dead_codes(&stage_x[stage], t, &mut rng);
        }
        opt.step(&mut model.params);
        if step % train.log_every == 0 || step + 1 == train.steps {
            log.entries.push((step, loss, mse_sum / train.batch as f64));
        }
    }
    Ok((model, log))
}

struct ClipPass<S: Real> {
    loss: f64,
    mse: f64,
    grads: Vec<(crate::nn::ParamId, Vec<S>)>,
    /// Per quantizer stage: (inputs, assignments) for the EMA update.
    stages: Vec<(Vec<S>, Vec<u32>)>,
}

fn clip_pass<S: Real>(
    model: &RepCodecModel<S>,
    clip: &[S],
    beta: f64,
) -> Result<ClipPass<S>> {
    let t = model.check_dim(clip)?;
    let mut g = Graph::new();
    let x = g.input(clip.to_vec(), t, model.cfg.input_dim);
    let e = self_encode(model, &mut g, x)?;
    let (indices, qsum, _res, stage_inputs) =
        rvq_forward_with_inputs(&model.codebooks, g.value(e), t)?;
    let (st, commit) = bind_straight_through(&mut g, e, &qsum, beta)?;
    let recon = model.bind_decoder(&mut g, st)?;
    let mse_node = g.mse_const(recon, clip)?;
    let loss = g.add(mse_node, commit)?;
    let loss_val = g.scalar(loss).to_f64();
    let mse_val = g.scalar(mse_node).to_f64();
    g.backward(loss)?;
    Ok(ClipPass {
        loss: loss_val,
        mse: mse_val,
        grads: g.param_grads(),
        stages: stage_inputs.into_iter().zip(indices).collect(),
    })
}

fn self_encode<S: Real>(model: &RepCodecModel<S>, g: &mut Graph<S>, x: NodeId) -> Result<NodeId> {
    model.bind_encoder(g, x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_clips(n: usize, t: usize, dim: usize, seed: u64) -> Vec<Vec<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..t * dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
            .collect()
    }

    fn tiny_cfg(n_layers: usize) -> RepCodecConfig {
        RepCodecConfig {
            input_dim: 8,
            k: 8,
            n_layers,
            seed: 42,
        }
    }

    #[test]
    fn untrained_model_has_finite_positive_mse() {
        let clips = random_clips(4, 12, 8, 0);
        let model = RepCodecModel::new(&tiny_cfg(1), &clips[0]).unwrap();
        let (recon, mse) = model.reconstruct(&clips[1]).unwrap();
        assert_eq!(recon.len(), clips[1].len());
        assert!(mse.is_finite() && mse > 0.0);
    }

    #[test]
    fn mse_definition_matches_external_recompute() {
        let clips = random_clips(2, 10, 8, 1);
        let model = RepCodecModel::new(&tiny_cfg(1), &clips[0]).unwrap();
        let (recon, mse) = model.reconstruct(&clips[1]).unwrap();
        let external: f64 = recon
            .iter()
            .zip(clips[1].iter())
            .map(|(&r, &f)| ((r - f) as f64).powi(2))
            .sum::<f64>()
            / (10.0 * 8.0);
        assert!((mse - external).abs() < 1e-12);
    }

    #[test]
    fn tokenize_shape_and_determinism() {
        let clips = random_clips(2, 15, 8, 2);
        let model = RepCodecModel::new(&tiny_cfg(2), &clips[0]).unwrap();
        let a = model.tokenize(&clips[1]).unwrap();
        let b = model.tokenize(&clips[1]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.n_layers(), 2);
        assert_eq!(a.len(), 15);
    }

    #[test]
    fn tokens_detokenize_to_stage_sum() {
        use crate::quantize::detokenize;
        let clips = random_clips(2, 9, 8, 3);
        let model = RepCodecModel::new(&tiny_cfg(2), &clips[0]).unwrap();
        let mut g: Graph<f32> = Graph::new();
        let x = g.input(clips[1].clone(), 9, 8);
        let e = model.bind_encoder(&mut g, x).unwrap();
        let (indices, qsum, _) = rvq_forward(&model.codebooks, g.value(e), 9).unwrap();
        let toks = TokenSequence { indices };
        let det = detokenize(&model.codebooks, &toks).unwrap();
        assert_eq!(det, qsum);
    }

    #[test]
    fn dim_mismatch_rejected() {
        let clips = random_clips(1, 10, 8, 4);
        let model = RepCodecModel::new(&tiny_cfg(1), &clips[0]).unwrap();
        assert!(model.tokenize(&vec![0f32; 10 * 7]).is_err());
    }

    #[test]
    fn encoder_receives_gradients_through_quantizer() {
        let clips = random_clips(1, 10, 8, 5);
        let model = RepCodecModel::new(&tiny_cfg(1), &clips[0]).unwrap();
        let pass = clip_pass(&model, &clips[0], 0.25).unwrap();
        let enc_kernel = model.enc_blocks[0].conv.kernel;
        let has_enc_grad = pass
            .grads
            .iter()
            .any(|(pid, g)| *pid == enc_kernel && g.iter().any(|&v| v != 0.0));
        assert!(has_enc_grad, "no gradient reached the encoder");
    }

    #[test]
    fn constant_corpus_trains_to_near_zero_mse() {
        let dim = 8;
        let t = 10;
        let row: Vec<f32> = (0..dim).map(|i| 0.1 * i as f32).collect();
        let clip: Vec<f32> = (0..t).flat_map(|_| row.clone()).collect();
        let clips = vec![clip; 6];
        let cfg = tiny_cfg(1);
        let train = CodecTrainConfig {
            steps: 800,
            batch: 4,
            lr: 5e-3,
            commitment_beta: 0.25,
            log_every: 100,
        };
        let (model, log) = train_repcodec(&clips, &cfg, &train).unwrap();
        let mse = model.mean_mse(&clips).unwrap();
        assert!(mse < 1e-3, "mse {mse}, log {:?}", log.entries);
        assert!(log.entries.iter().all(|&(_, l, _)| l.is_finite()));
    }

    #[test]
    fn training_is_bit_reproducible() {
        let clips = random_clips(6, 8, 8, 6);
        let cfg = tiny_cfg(1);
        let train = CodecTrainConfig {
            steps: 5,
            batch: 4,
            lr: 1e-3,
            commitment_beta: 0.25,
            log_every: 1,
        };
        let (m1, l1) = train_repcodec(&clips, &cfg, &train).unwrap();
        let (m2, l2) = train_repcodec(&clips, &cfg, &train).unwrap();
        assert_eq!(l1.entries, l2.entries);
        for ((_, a), (_, b)) in m1.params.iter().zip(m2.params.iter()) {
            assert_eq!(a.values, b.values);
        }
        assert_eq!(m1.codebooks[0].vectors, m2.codebooks[0].vectors);
    }

    #[test]
    fn full_scale_preset_values() {
        let fs = CodecTrainConfig::full_scale();
        assert_eq!(fs.steps, 100_000);
        assert_eq!(fs.batch, 64);
        assert_eq!(fs.lr, 1e-5);
    }
}
