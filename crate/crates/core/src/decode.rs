//! Beam search with language masks grown from the decoded prefix.

use std::cmp::Ordering;

use crate::attention::BankAccess;
use crate::autodiff::{Graph, Tensor, TensorError};
use crate::lang_mask::MaskState;
use crate::model::Model;
use crate::vocab::{LanguageTag, EOS, PAD, SOS, UNK};

/// Ids that are never emitted.
pub const BLOCKED: [usize; 3] = [PAD, SOS, UNK];

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Starts with sos; ends with eos when finished.
    pub tokens: Vec<usize>,
    pub logprob: f64,
    /// Mask state of the decoder input, i.e. of `tokens` without a trailing eos.
    pub mask: MaskState,
    pub finished: bool,
}

impl Hypothesis {
    /// Emitted tokens without sos/eos.
    pub fn output(&self) -> &[usize] {
        let end = if self.finished { self.tokens.len() - 1 } else { self.tokens.len() };
        &self.tokens[1..end]
    }
}

#[derive(Debug, Clone)]
pub struct BeamResult {
    pub best: Hypothesis,
    /// Finished hypotheses, best first (unfinished ones only when none finished).
    pub nbest: Vec<Hypothesis>,
}

/// Log-softmax over the ids that may be emitted; blocked ids get `-inf`.
pub fn allowed_log_softmax(logits: &[f64]) -> Vec<f64> {
    let allowed = |i: usize| !BLOCKED.contains(&i);
    let max = logits.iter().enumerate().filter(|&(i, _)| allowed(i)).map(|(_, &v)| v).fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().enumerate().filter(|&(i, _)| allowed(i)).map(|(_, &v)| (v - max).exp()).sum();
    let lz = max + z.ln();
    logits
        .iter()
        .enumerate()
        .map(|(i, &v)| if allowed(i) { v - lz } else { f64::NEG_INFINITY })
        .collect()
}

/// Best `k` one-token extensions of a hypothesis: `(token, cumulative logprob)`,
/// sorted by score, ties to the lower id.
pub fn score_hypothesis_step(logprob: f64, log_probs: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut c: Vec<(usize, f64)> = log_probs
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_finite())
        .map(|(i, &v)| (i, logprob + v))
        .collect();
    c.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
    c.truncate(k);
    c
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BeamConfig {
    pub beam: usize,
    pub max_len: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self { beam: 10, max_len: 40 }
    }
}

/// Beam search over one utterance. At most `max_len` tokens are emitted,
/// the final eos included. Scores are raw cumulative log-probabilities.
///
/// `observer` sees the live hypotheses after every expansion.
pub fn beam_search(
    model: &Model,
    features: &Tensor,
    token_langs: &[LanguageTag],
    cfg: BeamConfig,
    mut access: Option<&mut BankAccess>,
    mut observer: Option<&mut dyn FnMut(&[Hypothesis])>,
) -> Result<BeamResult, TensorError> {
    if cfg.beam == 0 || cfg.max_len == 0 {
        return Err(TensorError::Invalid("beam width and max_len must be at least 1".into()));
    }
    if features.shape().len() != 2 || features.rows() == 0 {
        return Err(TensorError::Invalid("empty feature input".into()));
    }
    if token_langs.len() != model.config.vocab_size {
        return Err(TensorError::Shape {
            op: "beam_search",
            lhs: vec![token_langs.len()],
            rhs: vec![model.config.vocab_size],
        });
    }
    let mask0 = MaskState::from_langs(&[token_langs[SOS]], model.config.variant.mask).map_err(|e| TensorError::Invalid(e.to_string()))?;
    let mut g = Graph::no_grad();
    let enc = model.encode(&mut g, &[features], None)?;
    let base = g.len();

    let mut live = vec![Hypothesis {
        tokens: vec![SOS],
        logprob: 0.0,
        mask: mask0,
        finished: false,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..cfg.max_len {
        if live.is_empty() {
            break;
        }
        let inputs: Vec<&[usize]> = live.iter().map(|h| h.tokens.as_slice()).collect();
        let masks: Vec<&MaskState> = live.iter().map(|h| &h.mask).collect();
        let logits = model.decode_logits(&mut g, &enc, &vec![0; live.len()], &inputs, &masks, true, None, access.as_deref_mut())?;
        let lv = g.value(logits).clone();
        g.truncate(base);

        // (score, token, hypothesis index)
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (h, hyp) in live.iter().enumerate() {
            let lp = allowed_log_softmax(lv.row(h));
            for (tok, s) in score_hypothesis_step(hyp.logprob, &lp, cfg.beam) {
                cands.push((s, tok, h));
            }
        }
        cands.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        cands.truncate(cfg.beam);

        let mut next = Vec::with_capacity(cands.len());
        for (score, tok, h) in cands {
            let parent = &live[h];
            let mut tokens = parent.tokens.clone();
            tokens.push(tok);
            if tok == EOS {
                finished.push(Hypothesis {
                    tokens,
                    logprob: score,
                    mask: parent.mask.clone(),
                    finished: true,
                });
            } else {
                next.push(Hypothesis {
                    tokens,
                    logprob: score,
                    mask: parent.mask.extend_incremental(token_langs[tok]),
                    finished: false,
                });
            }
        }
        live = next;
        if let Some(obs) = observer.as_deref_mut() {
            obs(&live);
        }
        // Scores only decrease, so no live hypothesis can overtake this one.
        let best_done = finished.iter().map(|h| h.logprob).fold(f64::NEG_INFINITY, f64::max);
        if live.iter().all(|h| h.logprob <= best_done) {
            break;
        }
    }
    let order = |a: &Hypothesis, b: &Hypothesis| b.logprob.partial_cmp(&a.logprob).unwrap_or(Ordering::Equal).then_with(|| a.tokens.cmp(&b.tokens));
    let mut nbest = if finished.is_empty() { live } else { finished };
    nbest.sort_by(order);
    Ok(BeamResult {
        best: nbest[0].clone(),
        nbest,
    })
}
