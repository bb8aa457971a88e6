//! Scratch driver for sizing the comparative runs; not part of the build.
use std::time::Instant;
use toktide_core::corpus::{Corpus, CorpusConfig, EncoderConfig};
use toktide_core::captioner::CaptionTrainConfig;
use toktide_core::experiment::*;
use toktide_core::repcodec::CodecTrainConfig;
use toktide_core::suptok::TaggerConfig;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n_train: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(10);
    let steps: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(400);

    let cfg = CorpusConfig { n_train, ..Default::default() };
    let t0 = Instant::now();
    let corpus = Corpus::generate(1000, &cfg).unwrap();
    let enc_cfg = EncoderConfig::default();
    let ctx = ExperimentContext::new(corpus, &enc_cfg).unwrap();
    println!("[{:?}] corpus+encoder ready", t0.elapsed());

    let sys = SystemConfig {
        codec_train: CodecTrainConfig { steps, batch: 16, lr: 1e-3, commitment_beta: 0.25, log_every: 100 },
        tagger: TaggerConfig { f1_floor: 0.60, ..Default::default() },
        ..Default::default()
    };
    let cap_cfg = CaptionTrainConfig { epochs, batch: 8, lr: 3e-4, weight_decay: 3e-4, seed: 1 };

    let t = Instant::now();
    let km = train_kmeans_tokenizer(&ctx, &sys, 1).unwrap();
    println!("[{:?}] kmeans trained", t.elapsed());

    let t = Instant::now();
    let ac = train_acoustic_proxy_tokenizer(&ctx, &sys, 1).unwrap();
    println!("[{:?}] acoustic trained", t.elapsed());

    let t = Instant::now();
    let rc = train_repcodec_tokenizer(&ctx, &sys, 1).unwrap();
    println!("[{:?}] repcodec trained", t.elapsed());

    let t = Instant::now();
    let tagger = pretrain_tagger(&ctx, &sys.tagger).unwrap();
    println!("[{:?}] tagger f1 {:.3}", t.elapsed(), tagger.val_f1);

    let t = Instant::now();
    let mut st_sys = sys.clone();
    st_sys.codec_train.batch = 8;
    let (st, f1) = train_suptok_tokenizer(&ctx, &tagger, &st_sys, 1).unwrap();
    println!("[{:?}] suptok trained, bottleneck f1 {:.3}", t.elapsed(), f1);

    for (name, art) in [("kmeans", &km), ("acoustic", &ac), ("repcodec", &rc), ("suptok", &st)] {
        let t = Instant::now();
        let probe = token_probe_f1(&ctx, art, 7).unwrap();
        println!("[{:?}] probe {name}: f1 {probe:.3}", t.elapsed());
    }

    for (name, input) in [
        ("kmeans", CaptionInput::Tokens(&km)),
        ("acoustic", CaptionInput::Tokens(&ac)),
        ("repcodec", CaptionInput::Tokens(&rc)),
        ("suptok", CaptionInput::Tokens(&st)),
        ("continuous", CaptionInput::Continuous { layer: 9 }),
        ("fbank", CaptionInput::RawFrames),
    ] {
        let t = Instant::now();
        let out = run_captioner_eval(&ctx, &input, &cap_cfg, 1).unwrap();
        let (tr, vl) = out.train_log.epochs.last().unwrap();
        println!("[{:?}] {name}: cider {:.3} n_words {} (train {tr:.3} val {vl:.3})",
                 t.elapsed(), out.cider, out.n_words);
        for c in out.captions.iter().take(2) { println!("    {} -> {}", c.clip_id, c.caption); }
    }
}
