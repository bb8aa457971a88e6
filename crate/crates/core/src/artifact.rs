//! Tokenizer artifacts: one enum over every tokenizer kind with a shared
//! tokenize/detokenize surface and on-disk persistence (a "TTWT" weight
//! file plus a JSON sidecar).

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::corpus::{EncoderConfig, FrozenEncoder};
use crate::error::{Error, Result};
use crate::io::{self, CheckpointEntry};
use crate::nn::ParamSet;
use crate::quantize::{detokenize, Codebook, KMeansModel, TokenSequence};
use crate::repcodec::{RepCodecConfig, RepCodecModel};
use crate::suptok::SupTokTokenizer;

pub const WEIGHTS_FILE: &str = "weights.ttwt";
pub const SIDECAR_FILE: &str = "tokenizer.json";

/// Which representation a tokenizer consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureSource {
    /// Frozen-encoder output at a given layer (semantic tokenizers).
    EncoderLayer(usize),
    /// Raw low-level frames (acoustic proxy).
    RawFrames,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerSidecar {
    pub kind: String,
    pub input_dim: usize,
    pub k: usize,
    pub n_layers: usize,
    /// "semantic" or "acoustic-proxy".
    pub source: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source_layer: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tagger_id: Option<String>,
    pub encoder: EncoderConfig,
}

pub enum TokenizerArtifact {
    KMeans {
        model: KMeansModel<f32>,
        layer: usize,
    },
    RepCodec {
        model: RepCodecModel<f32>,
        layer: usize,
    },
    AcousticProxy {
        model: RepCodecModel<f32>,
    },
    SupTok {
        tokenizer: SupTokTokenizer<f32>,
        tagger_id: String,
    },
}

impl TokenizerArtifact {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::KMeans { .. } => "kmeans",
            Self::RepCodec { .. } => "repcodec",
            Self::AcousticProxy { .. } => "acoustic-proxy",
            Self::SupTok { .. } => "suptok",
        }
    }

    pub fn source(&self) -> FeatureSource {
        match self {
            Self::KMeans { layer, .. } | Self::RepCodec { layer, .. } => {
                FeatureSource::EncoderLayer(*layer)
            }
            Self::AcousticProxy { .. } => FeatureSource::RawFrames,
            Self::SupTok { tokenizer, .. } => FeatureSource::EncoderLayer(tokenizer.split),
        }
    }

    /// Width of the detokenized (code-vector) representation.
    pub fn detokenized_dim(&self) -> usize {
        self.codebooks()[0].dim
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Self::KMeans { model, .. } => model.dim,
            Self::RepCodec { model, .. } | Self::AcousticProxy { model } => model.cfg.input_dim,
            Self::SupTok { tokenizer, .. } => tokenizer.encoder.cfg.dim,
        }
    }

    /// Tokenize features already drawn from this tokenizer's source.
    pub fn tokenize_features(&self, feats: &[f32], t: usize) -> Result<TokenSequence> {
        if feats.len() != t * self.input_dim() {
            return Err(Error::Shape(format!(
                "tokenizer expects {t}x{}, got {} values",
                self.input_dim(),
                feats.len()
            )));
        }
        match self {
            Self::KMeans { model, .. } => Ok(model.tokenize(feats, t)),
            Self::RepCodec { model, .. } | Self::AcousticProxy { model } => model.tokenize(feats),
            Self::SupTok { tokenizer, .. } => tokenizer.tokenize_split_features(feats, t),
        }
    }

    pub fn codebooks(&self) -> Vec<Codebook<f32>> {
        match self {
            Self::KMeans { model, .. } => vec![model.as_codebook()],
            Self::RepCodec { model, .. } | Self::AcousticProxy { model } => {
                model.codebooks.clone()
            }
            Self::SupTok { tokenizer, .. } => tokenizer.codebooks.clone(),
        }
    }

    /// Summed code vectors per frame.
    pub fn detokenize(&self, tokens: &TokenSequence) -> Result<Vec<f32>> {
        detokenize(&self.codebooks(), tokens)
    }

    pub fn n_layers(&self) -> usize {
        self.codebooks().len()
    }

    pub fn k(&self) -> usize {
        self.codebooks()[0].k
    }

    // ---- persistence --------------------------------------------------------

    pub fn sidecar(&self, encoder_cfg: &EncoderConfig) -> TokenizerSidecar {
        let (source, source_layer, split, tagger_id) = match self {
            Self::KMeans { layer, .. } | Self::RepCodec { layer, .. } => {
                ("semantic".to_string(), Some(*layer), None, None)
            }
            Self::AcousticProxy { .. } => ("acoustic-proxy".to_string(), None, None, None),
            Self::SupTok {
                tokenizer,
                tagger_id,
            } => (
                "semantic".to_string(),
                Some(tokenizer.split),
                Some(tokenizer.split),
                Some(tagger_id.clone()),
            ),
        };
        TokenizerSidecar {
            kind: self.kind().to_string(),
            input_dim: self.input_dim(),
            k: self.k(),
            n_layers: self.n_layers(),
            source,
            source_layer,
            split,
            tagger_id,
            encoder: encoder_cfg.clone(),
        }
    }

    pub fn save(&self, dir: &Path, encoder_cfg: &EncoderConfig) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut snapshot: ParamSet<f32> = ParamSet::new();
        match self {
            Self::KMeans { model, .. } => {
                snapshot.add_values(
                    "centroids",
                    model.k,
                    model.dim,
                    model.centroids.clone(),
                    false,
                );
            }
            Self::RepCodec { model, .. } | Self::AcousticProxy { model } => {
                copy_params(&model.params, &mut snapshot);
                push_codebooks(&mut snapshot, &model.codebooks);
            }
            Self::SupTok { tokenizer, .. } => {
                copy_params(&tokenizer.vq_params, &mut snapshot);
                push_codebooks(&mut snapshot, &tokenizer.codebooks);
            }
        }
        io::save_checkpoint(&dir.join(WEIGHTS_FILE), &snapshot)?;
        io::write_json_pretty(&dir.join(SIDECAR_FILE), &self.sidecar(encoder_cfg))?;
        Ok(())
    }

    pub fn load(dir: &Path, encoder: &Arc<FrozenEncoder<f32>>) -> Result<Self> {
        let sidecar: TokenizerSidecar = io::read_json(&dir.join(SIDECAR_FILE))?;
        if sidecar.kind != "kmeans" && sidecar.encoder != encoder.cfg && sidecar.kind != "acoustic-proxy" {
            return Err(Error::Config(format!(
                "tokenizer was exported for encoder {:?}, current encoder is {:?}",
                sidecar.encoder, encoder.cfg
            )));
        }
        let entries = io::load_checkpoint_entries(&dir.join(WEIGHTS_FILE))?;
        let by_name: HashMap<String, CheckpointEntry> =
            entries.into_iter().map(|e| (e.name.clone(), e)).collect();

        match sidecar.kind.as_str() {
            "kmeans" => {
                let e = by_name
                    .get("centroids")
                    .ok_or_else(|| Error::Data("kmeans artifact missing centroids".into()))?;
                let layer = sidecar
                    .source_layer
                    .ok_or_else(|| Error::Data("kmeans sidecar missing source_layer".into()))?;
                Ok(Self::KMeans {
                    model: KMeansModel {
                        k: e.dims[0] as usize,
                        dim: e.dims[1] as usize,
                        centroids: e.values.clone(),
                        inertia_history: Vec::new(),
                    },
                    layer,
                })
            }
            "repcodec" | "acoustic-proxy" => {
                let cfg = RepCodecConfig {
                    input_dim: sidecar.input_dim,
                    k: sidecar.k,
                    n_layers: sidecar.n_layers,
                    seed: 0,
                };
                let mut model = RepCodecModel::<f32>::empty(&cfg)?;
                fill_params(&by_name, &mut model.params)?;
                fill_codebooks(&by_name, &mut model.codebooks)?;
                if sidecar.kind == "repcodec" {
                    let layer = sidecar.source_layer.ok_or_else(|| {
                        Error::Data("repcodec sidecar missing source_layer".into())
                    })?;
                    Ok(Self::RepCodec { model, layer })
                } else {
                    Ok(Self::AcousticProxy { model })
                }
            }
            "suptok" => {
                let split = sidecar
                    .split
                    .ok_or_else(|| Error::Data("suptok sidecar missing split".into()))?;
                let mut tokenizer = SupTokTokenizer::build_untrained(
                    encoder.clone(),
                    split,
                    sidecar.k,
                    sidecar.n_layers,
                )?;
                fill_params(&by_name, &mut tokenizer.vq_params)?;
                fill_codebooks(&by_name, &mut tokenizer.codebooks)?;
                Ok(Self::SupTok {
                    tokenizer,
                    tagger_id: sidecar.tagger_id.unwrap_or_default(),
                })
            }
            other => Err(Error::Data(format!("unknown tokenizer kind {other:?}"))),
        }
    }
}

fn copy_params(src: &ParamSet<f32>, dst: &mut ParamSet<f32>) {
    for (_, p) in src.iter() {
        dst.add_values(p.name.clone(), p.rows, p.cols, p.values.clone(), false);
    }
}

fn push_codebooks(snapshot: &mut ParamSet<f32>, cbs: &[Codebook<f32>]) {
    for (i, cb) in cbs.iter().enumerate() {
        snapshot.add_values(
            format!("cb{i}.vectors"),
            cb.k,
            cb.dim,
            cb.vectors.clone(),
            false,
        );
        snapshot.add_values(
            format!("cb{i}.ema_count"),
            1,
            cb.k,
            cb.ema_count.clone(),
            false,
        );
        snapshot.add_values(
            format!("cb{i}.ema_sum"),
            cb.k,
            cb.dim,
            cb.ema_sum.clone(),
            false,
        );
    }
}

fn fill_params(
    by_name: &HashMap<String, CheckpointEntry>,
    params: &mut ParamSet<f32>,
) -> Result<()> {
    for (_, p) in params.iter_mut() {
        let e = by_name
            .get(&p.name)
            .ok_or_else(|| Error::Data(format!("artifact missing parameter {}", p.name)))?;
        if e.dims != [p.rows as u64, p.cols as u64] {
            return Err(Error::Data(format!(
                "parameter {} has dims {:?}, expected [{}, {}]",
                p.name, e.dims, p.rows, p.cols
            )));
        }
        p.values.copy_from_slice(&e.values);
    }
    Ok(())
}

fn fill_codebooks(
    by_name: &HashMap<String, CheckpointEntry>,
    cbs: &mut [Codebook<f32>],
) -> Result<()> {
    for (i, cb) in cbs.iter_mut().enumerate() {
        let vec_entry = by_name
            .get(&format!("cb{i}.vectors"))
            .ok_or_else(|| Error::Data(format!("artifact missing codebook {i}")))?;
        cb.vectors.copy_from_slice(&vec_entry.values);
        if let Some(e) = by_name.get(&format!("cb{i}.ema_count")) {
            cb.ema_count.copy_from_slice(&e.values);
        }
        if let Some(e) = by_name.get(&format!("cb{i}.ema_sum")) {
            cb.ema_sum.copy_from_slice(&e.values);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantize::kmeans_fit;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn encoder() -> Arc<FrozenEncoder<f32>> {
        let cfg = EncoderConfig {
            seed: 5,
            layers: 4,
            dim: 16,
            heads: 2,
            input_dim: 8,
        };
        Arc::new(FrozenEncoder::build(&cfg).unwrap())
    }

    fn random_mat(t: usize, d: usize, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..t * d).map(|_| rng.gen_range(-1.0f32..1.0)).collect()
    }

    #[test]
    fn kmeans_artifact_round_trip() {
        let enc = encoder();
        let data = random_mat(50, 16, 1);
        let model = kmeans_fit(&data, 16, 8, 20, 0).unwrap();
        let art = TokenizerArtifact::KMeans { model, layer: 3 };
        let dir = tempfile::tempdir().unwrap();
        art.save(dir.path(), &enc.cfg).unwrap();
        let loaded = TokenizerArtifact::load(dir.path(), &enc).unwrap();

        let x = random_mat(10, 16, 2);
        let a = art.tokenize_features(&x, 10).unwrap();
        let b = loaded.tokenize_features(&x, 10).unwrap();
        assert_eq!(a, b);
        assert_eq!(art.detokenize(&a).unwrap(), loaded.detokenize(&b).unwrap());
    }

    #[test]
    fn repcodec_artifact_round_trip() {
        let enc = encoder();
        let sample = random_mat(40, 16, 3);
        let cfg = RepCodecConfig {
            input_dim: 16,
            k: 8,
            n_layers: 2,
            seed: 4,
        };
        let model = RepCodecModel::new(&cfg, &sample).unwrap();
        let art = TokenizerArtifact::RepCodec { model, layer: 4 };
        let dir = tempfile::tempdir().unwrap();
        art.save(dir.path(), &enc.cfg).unwrap();
        let loaded = TokenizerArtifact::load(dir.path(), &enc).unwrap();
        assert_eq!(loaded.kind(), "repcodec");
        assert_eq!(loaded.source(), FeatureSource::EncoderLayer(4));

        let x = random_mat(12, 16, 5);
        assert_eq!(
            art.tokenize_features(&x, 12).unwrap(),
            loaded.tokenize_features(&x, 12).unwrap()
        );
    }

    #[test]
    fn dim_mismatch_is_rejected() {
        let enc = encoder();
        let data = random_mat(50, 16, 6);
        let model = kmeans_fit(&data, 16, 4, 10, 0).unwrap();
        let art = TokenizerArtifact::KMeans { model, layer: 1 };
        assert!(art.tokenize_features(&random_mat(10, 8, 7), 10).is_err());
        let _ = enc;
    }
}
