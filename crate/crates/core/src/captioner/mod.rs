//! Caption-generation models: text pipeline, encoder-decoder captioner,
//! prefix-conditioned frozen-LM captioner, beam-search decoding, and the
//! shared training driver.

pub mod beam;
pub mod encdec;
pub mod prefix;
pub mod text;
pub mod train;

pub use beam::{beam_search, greedy_decode, BeamHypothesis, BeamOutcome, StepDecoder};
pub use encdec::{EncDecCaptioner, EncDecConfig};
pub use prefix::{pretrain_lm, FrozenLm, LmConfig, PrefixCaptioner, PrefixConfig};
pub use text::{normalize_words, TextVocab, BOS, EOS, PAD, UNK};
pub use train::{
    caption_clips, generate_caption, train_caption_model, CaptionClip, CaptionModel,
    CaptionTrainConfig, CaptionTrainLog, GeneratedCaption,
};

/// Default beam width for inference.
pub const DEFAULT_BEAM: usize = 3;
/// Default maximum decode length (tokens).
pub const DEFAULT_MAX_LEN: usize = 30;
