//! Caption evaluation: consensus n-gram scoring with TF-IDF cosine
//! similarity and a Gaussian length penalty, unique-word counts, and
//! tagging macro-F1 for probe experiments.

use std::collections::HashMap;

use crate::captioner::text::normalize_words;
use crate::error::{Error, Result};

const MAX_N: usize = 4;
const LENGTH_SIGMA: f64 = 6.0;
const SCALE: f64 = 10.0;

/// Per-n maps from n-gram to count for one sentence.
#[derive(Debug, Clone, Default)]
pub struct NGramStats {
    pub counts: Vec<HashMap<Vec<String>, f64>>,
}

impl NGramStats {
    pub fn of(words: &[String]) -> Self {
        let mut counts = vec![HashMap::new(); MAX_N];
        for n in 1..=MAX_N {
            if words.len() < n {
                continue;
            }
            let map = &mut counts[n - 1];
            for window in words.windows(n) {
                *map.entry(window.to_vec()).or_insert(0.0) += 1.0;
            }
        }
        Self { counts }
    }
}

/// Corpus-level document frequencies over reference caption sets.
fn document_frequencies(references: &[Vec<Vec<String>>]) -> Vec<HashMap<Vec<String>, f64>> {
    let mut df = vec![HashMap::new(); MAX_N];
    for refs in references {
        let mut seen: Vec<std::collections::HashSet<Vec<String>>> =
            vec![std::collections::HashSet::new(); MAX_N];
        for words in refs {
            for n in 1..=MAX_N {
                if words.len() < n {
                    continue;
                }
                for window in words.windows(n) {
                    seen[n - 1].insert(window.to_vec());
                }
            }
        }
        for n in 0..MAX_N {
            for gram in &seen[n] {
                *df[n].entry(gram.clone()).or_insert(0.0) += 1.0;
            }
        }
    }
    df
}

#[derive(Debug, Clone)]
pub struct CiderScores {
    pub corpus: f64,
    pub per_clip: Vec<f64>,
}

/// Consensus caption score. For each n in 1..4: TF-IDF vectors with
/// IDF = ln(|corpus|/max(1,df)), candidate counts clipped to the reference
/// maximum, cosine similarity averaged over references with a Gaussian
/// length penalty exp(−(len_c−len_r)²/(2·6²)); the per-clip score is the
/// mean over n, ×10. Empty candidates score 0.
pub fn cider_d(candidates: &[String], references: &[Vec<String>]) -> Result<CiderScores> {
    if candidates.len() != references.len() {
        return Err(Error::Shape(format!(
            "cider_d: {} candidates vs {} reference sets",
            candidates.len(),
            references.len()
        )));
    }
    if references.iter().any(|r| r.is_empty()) {
        return Err(Error::Data("cider_d: a clip has no references".into()));
    }
    let ref_words: Vec<Vec<Vec<String>>> = references
        .iter()
        .map(|refs| refs.iter().map(|r| normalize_words(r)).collect())
        .collect();
    let df = document_frequencies(&ref_words);
    let corpus_size = references.len() as f64;

    let mut per_clip = Vec::with_capacity(candidates.len());
    for (cand, refs) in candidates.iter().zip(ref_words.iter()) {
        let cand_words = normalize_words(cand);
        if cand_words.is_empty() {
            per_clip.push(0.0);
            continue;
        }
        let cand_stats = NGramStats::of(&cand_words);
        let ref_stats: Vec<NGramStats> = refs.iter().map(|r| NGramStats::of(r)).collect();

        // clip candidate counts at the per-gram max over this clip's references
        let mut clipped = cand_stats.clone();
        for n in 0..MAX_N {
            for (gram, count) in clipped.counts[n].iter_mut() {
                let max_ref = ref_stats
                    .iter()
                    .map(|rs| rs.counts[n].get(gram).copied().unwrap_or(0.0))
                    .fold(0.0, f64::max);
                *count = count.min(max_ref);
            }
        }

        let mut score_sum = 0.0;
        for rs in ref_stats.iter().zip(refs.iter()) {
            let (rstats, rwords) = rs;
            let mut sim_sum = 0.0;
            for n in 0..MAX_N {
                sim_sum += tfidf_cosine(&clipped.counts[n], &rstats.counts[n], &df[n], corpus_size);
            }
            let len_gap = cand_words.len() as f64 - rwords.len() as f64;
            let penalty = (-len_gap * len_gap / (2.0 * LENGTH_SIGMA * LENGTH_SIGMA)).exp();
            score_sum += penalty * sim_sum / MAX_N as f64;
        }
        per_clip.push(SCALE * score_sum / refs.len() as f64);
    }
    let corpus = per_clip.iter().sum::<f64>() / per_clip.len().max(1) as f64;
    Ok(CiderScores { corpus, per_clip })
}

fn tfidf_cosine(
    cand: &HashMap<Vec<String>, f64>,
    refc: &HashMap<Vec<String>, f64>,
    df: &HashMap<Vec<String>, f64>,
    corpus_size: f64,
) -> f64 {
    let idf = |gram: &Vec<String>| {
        let d = df.get(gram).copied().unwrap_or(0.0).max(1.0);
        (corpus_size / d).ln()
    };
    let mut dot = 0.0;
    let mut cand_norm = 0.0;
    for (gram, &c) in cand {
        let w = c * idf(gram);
        cand_norm += w * w;
        if let Some(&r) = refc.get(gram) {
            dot += w * (r * idf(gram));
        }
    }
    let mut ref_norm = 0.0;
    for (gram, &r) in refc {
        let w = r * idf(gram);
        ref_norm += w * w;
    }
    if cand_norm == 0.0 || ref_norm == 0.0 {
        return 0.0;
    }
    dot / (cand_norm.sqrt() * ref_norm.sqrt())
}

/// Count of distinct normalized words across all captions.
pub fn unique_words<I: IntoIterator<Item = impl AsRef<str>>>(captions: I) -> usize {
    let mut seen = std::collections::HashSet::new();
    for caption in captions {
        for w in normalize_words(caption.as_ref()) {
            seen.insert(w);
        }
    }
    seen.len()
}

/// Per-class F1 averaged with equal class weight. Classes absent from both
/// predictions and labels contribute F1 = 1 by convention.
pub fn macro_f1(pred_probs: &[f32], labels: &[f32], n_classes: usize, threshold: f32) -> f64 {
    assert_eq!(pred_probs.len(), labels.len());
    assert_eq!(pred_probs.len() % n_classes, 0);
    let n = pred_probs.len() / n_classes;
    let mut f1_sum = 0.0;
    for s in 0..n_classes {
        let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
        for i in 0..n {
            let p = pred_probs[i * n_classes + s] >= threshold;
            let l = labels[i * n_classes + s] >= 0.5;
            match (p, l) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
        let f1 = if tp == 0 && fp == 0 && fn_ == 0 {
            1.0
        } else if tp == 0 {
            0.0
        } else {
            let precision = tp as f64 / (tp + fp) as f64;
            let recall = tp as f64 / (tp + fn_) as f64;
            2.0 * precision * recall / (precision + recall)
        };
        f1_sum += f1;
    }
    f1_sum / n_classes as f64
}
