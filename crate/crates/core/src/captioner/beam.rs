//! Beam-search decoding over any step decoder. No length normalization;
//! ties break toward the lowest token id; finished hypotheses are set
//! aside and the highest cumulative log-probability one wins.

use crate::error::{Error, Result};

/// One-step autoregressive interface: log-probabilities of the next token
/// given the decoded prefix (audio conditioning lives in the implementor).
pub trait StepDecoder {
    fn vocab_size(&self) -> usize;
    fn eos(&self) -> usize;
    /// `prefix` holds previously generated token ids (bos excluded).
    fn next_log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone)]
pub struct BeamHypothesis {
    pub ids: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

#[derive(Debug)]
pub struct BeamOutcome {
    pub best: BeamHypothesis,
    /// Every finished hypothesis the search retired, for auditing.
    pub retired: Vec<BeamHypothesis>,
}

pub fn beam_search(
    decoder: &dyn StepDecoder,
    beam_size: usize,
    max_len: usize,
) -> Result<BeamOutcome> {
    if beam_size < 1 {
        return Err(Error::Config("beam_search: beam_size must be >= 1".into()));
    }
    if max_len < 1 {
        return Err(Error::Config("beam_search: max_len must be >= 1".into()));
    }
    let eos = decoder.eos();
    let mut live = vec![BeamHypothesis {
        ids: Vec::new(),
        log_prob: 0.0,
        finished: false,
    }];
    let mut retired: Vec<BeamHypothesis> = Vec::new();

    for _step in 0..max_len {
        if live.is_empty() {
            break;
        }
        // (cumulative logprob, token, parent) for every expansion
        let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
        for (parent, hyp) in live.iter().enumerate() {
            let lp = decoder.next_log_probs(&hyp.ids)?;
            if lp.len() != decoder.vocab_size() {
                return Err(Error::Shape(format!(
                    "step decoder returned {} log-probs for vocab {}",
                    lp.len(),
                    decoder.vocab_size()
                )));
            }
            for (tok, &l) in lp.iter().enumerate() {
                candidates.push((hyp.log_prob + l, tok, parent));
            }
        }
        // deterministic order: score desc, then token id asc, then parent asc
        candidates.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let mut next_live = Vec::with_capacity(beam_size);
        for &(score, tok, parent) in candidates.iter() {
            if next_live.len() >= beam_size {
                break;
            }
            let mut ids = live[parent].ids.clone();
            ids.push(tok);
            let hyp = BeamHypothesis {
                ids,
                log_prob: score,
                finished: tok == eos,
            };
            if hyp.finished {
                retired.push(hyp);
            } else {
                next_live.push(hyp);
            }
        }
        live = next_live;
    }

    // best finished hypothesis, else best unfinished at max_len
    let best = retired
        .iter()
        .cloned()
        .max_by(|a, b| {
            a.log_prob
                .partial_cmp(&b.log_prob)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| b.ids.cmp(&a.ids))
        })
        .or_else(|| {
            live.iter().cloned().max_by(|a, b| {
                a.log_prob
                    .partial_cmp(&b.log_prob)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then_with(|| b.ids.cmp(&a.ids))
            })
        })
        .ok_or_else(|| Error::Numerical("beam_search: no hypotheses produced".into()))?;
    Ok(BeamOutcome { best, retired })
}

/// Greedy decoding: argmax token each step (lowest id on ties).
pub fn greedy_decode(decoder: &dyn StepDecoder, max_len: usize) -> Result<BeamHypothesis> {
    let eos = decoder.eos();
    let mut ids = Vec::new();
    let mut log_prob = 0.0;
    for _ in 0..max_len {
        let lp = decoder.next_log_probs(&ids)?;
        let mut best = 0usize;
        for (tok, &l) in lp.iter().enumerate() {
            if l > lp[best] {
                best = tok;
            }
        }
        log_prob += lp[best];
        ids.push(best);
        if best == eos {
            return Ok(BeamHypothesis {
                ids,
                log_prob,
                finished: true,
            });
        }
    }
    Ok(BeamHypothesis {
        ids,
        log_prob,
        finished: false,
    })
}
