use std::sync::Arc;
use toktide_core::corpus::{Corpus, CorpusConfig, EncoderConfig, FrozenEncoder};
use toktide_core::suptok::*;
fn main() {
    let cfg = CorpusConfig { n_train: 500, ..Default::default() };
    let corpus = Corpus::generate(1000, &cfg).unwrap();
    let encoder = Arc::new(FrozenEncoder::<f32>::build(&EncoderConfig::default()).unwrap());
    for (lr, epochs, batch, tf) in [(3e-3f64, 25usize, 24usize, 9usize)] {
        let tc = TaggerConfig { f1_floor: 2.0, max_epochs: epochs, lr, seed: 17, tune_from: tf, batch };
        let t0 = std::time::Instant::now();
        match pretrain_tagging_model(encoder.clone(), &corpus, &tc) {
            Err(e) => println!("lr={lr} tf={tf}: {e} [{:?}]", t0.elapsed()),
            Ok(m) => println!("lr={lr} tf={tf}: f1 {} [{:?}]", m.val_f1, t0.elapsed()),
        }
    }
}
