//! Deterministic synthetic soundscape corpus: labeled feature streams with
//! multi-hot event tags and template captions, plus a frozen random-weight
//! layered encoder standing in for a pretrained representation model.

pub mod encoder;

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

pub use encoder::{EncoderConfig, FrozenEncoder};

/// Built-in event vocabulary. Each entry is (name, synonym); corpora with
/// `class_offset` > 0 draw from later rows so two corpora can use disjoint
/// class sets.
const EVENT_TABLE: &[(&str, &str)] = &[
    ("dog", "hound"),
    ("siren", "alarm"),
    ("rain", "drizzle"),
    ("bell", "chime"),
    ("engine", "motor"),
    ("bird", "sparrow"),
    ("hammer", "knocking"),
    ("wind", "breeze"),
    ("cat", "kitten"),
    ("thunder", "rumble"),
    ("whistle", "piping"),
    ("drum", "tomtom"),
    ("horn", "trumpet"),
    ("frog", "croaking"),
    ("train", "locomotive"),
    ("saw", "sawing"),
];

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    /// Number of sound classes S.
    pub n_classes: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub duration_s: f64,
    pub frame_rate: usize,
    /// Low-level feature bins F.
    pub feature_dim: usize,
    pub noise_level: f32,
    pub max_events_per_clip: usize,
    /// Offset into the built-in event table; lets a second corpus use a
    /// disjoint class set (out-of-domain condition).
    #[serde(default)]
    pub class_offset: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_classes: 8,
            n_train: 500,
            n_val: 100,
            n_test: 100,
            duration_s: 1.6,
            frame_rate: 50,
            feature_dim: 32,
            noise_level: 0.1,
            max_events_per_clip: 2,
            class_offset: 0,
        }
    }
}

impl CorpusConfig {
    pub fn frames_per_clip(&self) -> usize {
        (self.duration_s * self.frame_rate as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Config(format!(
                "corpus needs at least 2 classes, got {}",
                self.n_classes
            )));
        }
        if self.class_offset + self.n_classes > EVENT_TABLE.len() {
            return Err(Error::Config(format!(
                "class_offset {} + {} classes exceeds the {}-entry event table",
                self.class_offset,
                self.n_classes,
                EVENT_TABLE.len()
            )));
        }
        if self.n_train == 0 {
            return Err(Error::Config("corpus needs at least 1 training clip".into()));
        }
        if self.max_events_per_clip == 0 {
            return Err(Error::Config("max_events_per_clip must be >= 1".into()));
        }
        if self.max_events_per_clip > self.n_classes {
            return Err(Error::Config(format!(
                "max_events_per_clip {} exceeds {} classes",
                self.max_events_per_clip, self.n_classes
            )));
        }
        if self.frames_per_clip() < 1 {
            return Err(Error::Config("duration × frame_rate must be >= 1 frame".into()));
        }
        if self.feature_dim < 4 {
            return Err(Error::Config("feature_dim must be >= 4".into()));
        }
        Ok(())
    }
}

/// One sound class: a deterministic spectral pattern plus caption words.
#[derive(Debug, Clone)]
pub struct EventClass {
    pub id: usize,
    pub name: String,
    pub synonyms: Vec<String>,
    /// k_e×F pattern.
    pub prototype: Vec<f32>,
    pub proto_len: usize,
}

/// Number of spectral strokes in the bank shared by every class.
const STROKE_BANK_SIZE: usize = 4;

/// Spectral strokes common to the whole corpus. Classes differ only in the
/// order (and hold lengths) of these strokes, so single-frame appearance
/// statistics carry no class identity; recognizing a class requires
/// integrating over time.
fn stroke_bank(corpus_seed: u64, feature_dim: usize) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(corpus_seed, 0x57B0, 0));
    (0..STROKE_BANK_SIZE)
        .map(|_| {
            let n_bins = rng.gen_range(4..=6).min(feature_dim);
            let mut profile = vec![0f32; feature_dim];
            for _ in 0..n_bins {
                let bin = rng.gen_range(0..feature_dim);
                profile[bin] = rng.gen_range(0.35..0.7);
            }
            profile
        })
        .collect()
}

/// Lexicographic permutation `index` of 0..n (Lehmer decoding).
fn permutation(n: usize, index: usize) -> Vec<usize> {
    let mut items: Vec<usize> = (0..n).collect();
    let mut idx = index;
    let mut factorials = vec![1usize; n];
    for i in 1..n {
        factorials[i] = factorials[i - 1] * i;
    }
    idx %= factorials[n - 1] * n;
    let mut out = Vec::with_capacity(n);
    for i in (0..n).rev() {
        let f = factorials[i];
        let pos = idx / f;
        idx %= f;
        out.push(items.remove(pos));
    }
    out
}

impl EventClass {
    /// Prototype is a function of (corpus seed, class id) only: a
    /// class-specific permutation of the shared strokes, each held for a
    /// few frames under its own attack-decay envelope, plus a faint
    /// class-specific spectral tint. Identity is mostly carried by stroke
    /// order (a temporal-integration cue); the tint keeps clip-level
    /// tagging linearly readable from pooled features.
    fn build(corpus_seed: u64, id: usize, table_row: usize, feature_dim: usize) -> Self {
        let bank = stroke_bank(corpus_seed, feature_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(corpus_seed, 0xE7E47, table_row as u64));
        let order = permutation(STROKE_BANK_SIZE, table_row);
        let holds: Vec<usize> = (0..STROKE_BANK_SIZE)
            .map(|_| rng.gen_range(3..=5))
            .collect();
        let mut tint = vec![0f32; feature_dim];
        for _ in 0..4.min(feature_dim) {
            let bin = rng.gen_range(0..feature_dim);
            tint[bin] = rng.gen_range(0.08..0.15);
        }
        let proto_len: usize = holds.iter().sum();
        let mut prototype = vec![0f32; proto_len * feature_dim];
        let mut frame = 0usize;
        for (&stroke, &hold) in order.iter().zip(holds.iter()) {
            for i in 0..hold {
                let env =
                    (std::f64::consts::PI * (i + 1) as f64 / (hold + 1) as f64).sin() as f32;
                for j in 0..feature_dim {
                    prototype[frame * feature_dim + j] = env * (bank[stroke][j] + tint[j]);
                }
                frame += 1;
            }
        }
        let (name, synonym) = EVENT_TABLE[table_row];
        Self {
            id,
            name: name.to_string(),
            synonyms: vec![name.to_string(), synonym.to_string()],
            prototype,
            proto_len,
        }
    }
}

/// Multi-hot tag vector over S classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagVector {
    pub bits: Vec<u8>,
}

impl TagVector {
    pub fn from_events(n_classes: usize, events: &[(usize, usize)]) -> Self {
        let mut bits = vec![0u8; n_classes];
        for &(class, _) in events {
            bits[class] = 1;
        }
        Self { bits }
    }

    pub fn as_f32(&self) -> Vec<f32> {
        self.bits.iter().map(|&b| b as f32).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Clip {
    pub id: String,
    /// T×F feature matrix.
    pub frames: Vec<f32>,
    pub t: usize,
    pub feature_dim: usize,
    pub tags: TagVector,
    pub captions: Vec<String>,
    /// (class id, onset frame), sorted by onset.
    pub event_timeline: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub seed: u64,
    pub cfg: CorpusConfig,
    pub classes: Vec<EventClass>,
    pub train: Vec<Clip>,
    pub val: Vec<Clip>,
    pub test: Vec<Clip>,
}

/// Manifest record as stored in JSONL.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClipRecord {
    pub id: String,
    pub path: String,
    pub duration_s: f64,
    /// Multi-hot 0/1 vector over the S classes.
    pub tags: Vec<u8>,
    pub captions: Vec<String>,
}

fn mix_seed(seed: u64, salt: u64, index: u64) -> u64 {
    // splitmix-style stirring so per-clip streams are independent
    let mut z = seed ^ salt.wrapping_mul(0x9E3779B97F4A7C15) ^ index.wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

fn gauss(rng: &mut ChaCha8Rng) -> f32 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32
}

impl Corpus {
    /// Build the full corpus in memory; fully deterministic in (seed, cfg).
    pub fn generate(seed: u64, cfg: &CorpusConfig) -> Result<Self> {
        cfg.validate()?;
        let classes: Vec<EventClass> = (0..cfg.n_classes)
            .map(|id| EventClass::build(seed, id, cfg.class_offset + id, cfg.feature_dim))
            .collect();
        let mut corpus = Self {
            seed,
            cfg: cfg.clone(),
            classes,
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        };
        for (split_idx, (split, count)) in [
            (Split::Train, cfg.n_train),
            (Split::Val, cfg.n_val),
            (Split::Test, cfg.n_test),
        ]
        .into_iter()
        .enumerate()
        {
            let clips: Vec<Clip> = (0..count)
                .map(|i| corpus.generate_clip(split, split_idx as u64, i))
                .collect();
            match split {
                Split::Train => corpus.train = clips,
                Split::Val => corpus.val = clips,
                Split::Test => corpus.test = clips,
            }
        }
        Ok(corpus)
    }

    fn generate_clip(&self, split: Split, split_idx: u64, clip_idx: usize) -> Clip {
        let cfg = &self.cfg;
        let t = cfg.frames_per_clip();
        let f = cfg.feature_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(
            self.seed,
            0xC11 + split_idx,
            clip_idx as u64,
        ));

        // distinct classes for this clip
        let n_events = rng.gen_range(1..=cfg.max_events_per_clip);
        let mut available: Vec<usize> = (0..cfg.n_classes).collect();
        let mut chosen = Vec::with_capacity(n_events);
        for _ in 0..n_events {
            let pick = rng.gen_range(0..available.len());
            chosen.push(available.swap_remove(pick));
        }

        let mut timeline: Vec<(usize, usize)> = chosen
            .into_iter()
            .map(|class| {
                let proto_len = self.classes[class].proto_len;
                let max_onset = t.saturating_sub(proto_len);
                let onset = if max_onset == 0 { 0 } else { rng.gen_range(0..=max_onset) };
                (class, onset)
            })
            .collect();
        timeline.sort_by_key(|&(class, onset)| (onset, class));

        let mut frames = vec![0f32; t * f];
        for &(class, onset) in &timeline {
            let ev = &self.classes[class];
            for i in 0..ev.proto_len.min(t - onset) {
                for j in 0..f {
                    frames[(onset + i) * f + j] += ev.prototype[i * f + j];
                }
            }
        }
        if cfg.noise_level > 0.0 {
            for v in frames.iter_mut() {
                *v += cfg.noise_level * gauss(&mut rng);
            }
        }

        let captions = self.make_captions(&timeline, &mut rng);
        Clip {
            id: format!("{}_{:05}", split.name(), clip_idx),
            frames,
            t,
            feature_dim: f,
            tags: TagVector::from_events(cfg.n_classes, &timeline),
            captions,
            event_timeline: timeline,
        }
    }

    /// Five captions from a fixed template grammar; every caption mentions
    /// every event (by name or synonym) in onset order and nothing else.
    fn make_captions(&self, timeline: &[(usize, usize)], rng: &mut ChaCha8Rng) -> Vec<String> {
        let words: Vec<&EventClass> = timeline.iter().map(|&(c, _)| &self.classes[c]).collect();
        (0..5)
            .map(|_| {
                let pick: Vec<&str> = words
                    .iter()
                    .map(|ev| ev.synonyms[rng.gen_range(0..ev.synonyms.len())].as_str())
                    .collect();
                match pick.len() {
                    1 => {
                        let t = rng.gen_range(0..3u32);
                        match t {
                            0 => format!("a {} sounds", pick[0]),
                            1 => format!("the {} is heard", pick[0]),
                            _ => format!("a {} can be heard", pick[0]),
                        }
                    }
                    2 => {
                        let t = rng.gen_range(0..4u32);
                        match t {
                            0 => format!("a {} then a {}", pick[0], pick[1]),
                            1 => format!("a {} followed by a {}", pick[0], pick[1]),
                            2 => format!("the {} and then the {}", pick[0], pick[1]),
                            _ => format!("a {} is followed by a {}", pick[0], pick[1]),
                        }
                    }
                    _ => {
                        let t = rng.gen_range(0..2u32);
                        match t {
                            0 => format!("a {} then a {} then a {}", pick[0], pick[1], pick[2]),
                            _ => format!(
                                "the {} followed by the {} and the {}",
                                pick[0], pick[1], pick[2]
                            ),
                        }
                    }
                }
            })
            .collect()
    }

    pub fn split(&self, split: Split) -> &[Clip] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Write manifests and AFEA feature files under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("clips"))?;
        for split in Split::ALL {
            let records: Vec<ClipRecord> = self
                .split(split)
                .iter()
                .map(|clip| ClipRecord {
                    id: clip.id.clone(),
                    path: format!("clips/{}.afea", clip.id),
                    duration_s: self.cfg.duration_s,
                    tags: clip.tags.bits.clone(),
                    captions: clip.captions.clone(),
                })
                .collect();
            io::write_jsonl(&dir.join(format!("{}.jsonl", split.name())), &records)?;
            for clip in self.split(split) {
                io::save_features(
                    &dir.join("clips").join(format!("{}.afea", clip.id)),
                    &clip.frames,
                    clip.t,
                    clip.feature_dim,
                )?;
            }
        }
        io::write_json_pretty(
            &dir.join("corpus.json"),
            &serde_json::json!({ "seed": self.seed, "config": self.cfg }),
        )?;
        Ok(())
    }

    /// Reload a corpus written by [`Corpus::write`]. Clip data comes from
    /// disk; the class table is regenerated from the stored seed so that
    /// synonym lists stay available.
    pub fn load(dir: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Meta {
            seed: u64,
            config: CorpusConfig,
        }
        let meta: Meta = io::read_json(&dir.join("corpus.json"))?;
        let mut corpus = Self::generate(meta.seed, &meta.config)?;
        // verify manifests agree with the regenerated corpus
        for split in Split::ALL {
            let manifest: Vec<ClipRecord> =
                io::read_jsonl(&dir.join(format!("{}.jsonl", split.name())))?;
            if manifest.len() != corpus.split(split).len() {
                return Err(Error::Data(format!(
                    "{} manifest has {} records, expected {}",
                    split.name(),
                    manifest.len(),
                    corpus.split(split).len()
                )));
            }
        }
        corpus.seed = meta.seed;
        Ok(corpus)
    }

    pub fn manifest_path(dir: &Path, split: Split) -> PathBuf {
        dir.join(format!("{}.jsonl", split.name()))
    }
}

/// Zero rows appended, or tail truncated, to reach `target_t` frames.
pub fn pad_or_truncate(frames: &[f32], t: usize, dim: usize, target_t: usize) -> Vec<f32> {
    debug_assert_eq!(frames.len(), t * dim);
    let mut out = vec![0f32; target_t * dim];
    let keep = t.min(target_t);
    out[..keep * dim].copy_from_slice(&frames[..keep * dim]);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> CorpusConfig {
        CorpusConfig {
            n_classes: 4,
            n_train: 6,
            n_val: 2,
            n_test: 2,
            duration_s: 1.0,
            frame_rate: 50,
            feature_dim: 16,
            noise_level: 0.1,
            max_events_per_clip: 2,
            class_offset: 0,
        }
    }

    #[test]
    fn frame_count_matches_duration_times_rate() {
        let cfg = CorpusConfig {
            duration_s: 10.0,
            frame_rate: 50,
            n_train: 1,
            n_val: 1,
            n_test: 1,
            ..tiny_cfg()
        };
        let corpus = Corpus::generate(3, &cfg).unwrap();
        assert!(corpus.train.iter().all(|c| c.t == 500));
    }

    #[test]
    fn noiseless_single_event_is_padded_prototype() {
        let cfg = CorpusConfig {
            noise_level: 0.0,
            max_events_per_clip: 1,
            ..tiny_cfg()
        };
        let corpus = Corpus::generate(11, &cfg).unwrap();
        for clip in &corpus.train {
            assert_eq!(clip.event_timeline.len(), 1);
            let (class, onset) = clip.event_timeline[0];
            let ev = &corpus.classes[class];
            let f = cfg.feature_dim;
            for i in 0..clip.t {
                for j in 0..f {
                    let expect = if i >= onset && i < onset + ev.proto_len {
                        ev.prototype[(i - onset) * f + j]
                    } else {
                        0.0
                    };
                    assert_eq!(clip.frames[i * f + j], expect);
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = tiny_cfg();
        let a = Corpus::generate(42, &cfg).unwrap();
        let b = Corpus::generate(42, &cfg).unwrap();
        for (x, y) in a.train.iter().zip(b.train.iter()) {
            assert_eq!(x.frames, y.frames);
            assert_eq!(x.captions, y.captions);
            assert_eq!(x.event_timeline, y.event_timeline);
        }
    }

    #[test]
    fn tags_equal_timeline_indicator() {
        let corpus = Corpus::generate(7, &tiny_cfg()).unwrap();
        for clip in corpus.train.iter().chain(&corpus.val).chain(&corpus.test) {
            let mut expect = vec![0u8; 4];
            for &(c, _) in &clip.event_timeline {
                expect[c] = 1;
            }
            assert_eq!(clip.tags.bits, expect);
        }
    }

    #[test]
    fn captions_are_faithful_to_timeline() {
        let corpus = Corpus::generate(9, &tiny_cfg()).unwrap();
        for clip in &corpus.train {
            assert_eq!(clip.captions.len(), 5);
            let present: Vec<usize> = clip.event_timeline.iter().map(|&(c, _)| c).collect();
            for caption in &clip.captions {
                let words: Vec<&str> = caption.split_whitespace().collect();
                for class in &corpus.classes {
                    let mentions = class.synonyms.iter().any(|s| words.contains(&s.as_str()));
                    if present.contains(&class.id) {
                        assert!(mentions, "caption {caption:?} misses class {}", class.name);
                    } else {
                        assert!(!mentions, "caption {caption:?} leaks class {}", class.name);
                    }
                }
            }
        }
    }

    #[test]
    fn rejects_invalid_configs() {
        let mut cfg = tiny_cfg();
        cfg.n_classes = 1;
        assert!(Corpus::generate(0, &cfg).is_err());
        let mut cfg = tiny_cfg();
        cfg.max_events_per_clip = 5;
        assert!(Corpus::generate(0, &cfg).is_err());
    }

    #[test]
    fn write_is_byte_identical_across_runs() {
        let cfg = tiny_cfg();
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        Corpus::generate(5, &cfg).unwrap().write(dir_a.path()).unwrap();
        Corpus::generate(5, &cfg).unwrap().write(dir_b.path()).unwrap();
        for name in ["train.jsonl", "val.jsonl", "test.jsonl"] {
            let a = std::fs::read(dir_a.path().join(name)).unwrap();
            let b = std::fs::read(dir_b.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs");
        }
        let a = std::fs::read(dir_a.path().join("clips/train_00000.afea")).unwrap();
        let b = std::fs::read(dir_b.path().join("clips/train_00000.afea")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pad_and_truncate_cases() {
        let frames: Vec<f32> = (0..12).map(|i| i as f32).collect(); // 6×2
        let padded = pad_or_truncate(&frames, 6, 2, 8);
        assert_eq!(padded.len(), 16);
        assert_eq!(&padded[..12], &frames[..]);
        assert!(padded[12..].iter().all(|&v| v == 0.0));

        let same = pad_or_truncate(&frames, 6, 2, 6);
        assert_eq!(same, frames);

        let cut = pad_or_truncate(&frames, 6, 2, 4);
        assert_eq!(cut, &frames[..8]);
    }
}
