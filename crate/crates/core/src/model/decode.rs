use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::network::{Dropout, Seq2Seq};
use crate::autograd::Tape;
use crate::ctc::{greedy_decode, log_softmax_rows};
use crate::error::{Error, Result};
use crate::real::Real;

/// Output of autoregressive decoding for one utterance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Translation {
    /// Target ids without the end-of-sentence token.
    pub tokens: Vec<usize>,
    /// Sum of token log-probabilities, end-of-sentence included when emitted.
    pub score: f64,
    /// `max_len` was reached before end-of-sentence.
    pub truncated: bool,
    /// Collapsed greedy CTC output at the tap layer.
    pub ctc_labels: Vec<usize>,
}

struct Hyp {
    tokens: Vec<usize>,
    score: f64,
}

/// Label-smoothed cross entropy summed over rows of `logits`.
///
/// The smoothed target puts `1 - eps + eps / V` on the gold class and
/// `eps / V` elsewhere. Returns the loss and its gradient with respect to
/// the logits. An empty target gives zero loss and zero gradient.
pub fn label_smoothed_ce<S: Real>(logits: ArrayView2<S>, targets: &[usize], eps: f64) -> Result<(f64, Array2<S>)> {
    let (rows, v) = logits.dim();
    if rows != targets.len() {
        return Err(Error::invalid(format!("{rows} logit rows for {} targets", targets.len())));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= v) {
        return Err(Error::invalid(format!("target {t} outside {v} classes")));
    }
    let lp = log_softmax_rows(logits);
    let mut grad = lp.mapv(|x| x.exp());
    let off = eps / v as f64;
    let mut loss = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        for k in 0..v {
            let q = if k == t { 1.0 - eps + off } else { off };
            loss -= q * lp[[r, k]].as_f64();
            grad[[r, k]] -= S::of(q);
        }
    }
    Ok((loss, grad))
}

impl<S: Real> Seq2Seq<S> {
    /// Beam search over the decoder (`beam == 1` is greedy decoding).
    ///
    /// Hypotheses are ranked by their summed log-probability without length
    /// normalisation, so the search stops as soon as the best finished
    /// hypothesis outscores every live one.
    pub fn decode_translation(&self, features: ArrayView2<S>, max_len: usize, beam: usize) -> Result<Translation> {
        if beam == 0 {
            return Err(Error::invalid("beam size must be at least 1"));
        }
        let enc = self.encoder_forward(features)?;
        let (_, collapsed) = greedy_decode(&enc.ctc_posteriors, self.config().ctc_vocab.blank())?;
        let eos = self.config().target_vocab.eos();

        let mut live = vec![Hyp { tokens: Vec::new(), score: 0.0 }];
        let mut finished: Vec<Hyp> = Vec::new();
        // hypotheses that ran past `max_len` tokens
        let mut overflow: Vec<Hyp> = Vec::new();
        while !live.is_empty() {
            let mut candidates = Vec::new();
            for (h, hyp) in live.iter().enumerate() {
                let lp = self.next_token_log_probs(&enc.output, &hyp.tokens);
                for (k, &l) in lp.iter().enumerate() {
                    candidates.push((hyp.score + l, h, k));
                }
            }
            // stable sort keeps the lower hypothesis and token index on ties
            candidates.sort_by(|a, b| b.0.total_cmp(&a.0));
            let mut next = Vec::with_capacity(beam);
            for &(score, h, k) in candidates.iter().take(beam) {
                let mut tokens = live[h].tokens.clone();
                if k == eos {
                    finished.push(Hyp { tokens, score });
                } else {
                    tokens.push(k);
                    if tokens.len() > max_len {
                        tokens.truncate(max_len);
                        overflow.push(Hyp { tokens, score });
                    } else {
                        next.push(Hyp { tokens, score });
                    }
                }
            }
            live = next;
            let best_finished = finished.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
            if live.iter().all(|h| h.score <= best_finished) {
                break;
            }
        }
        let best = |hs: &[Hyp]| {
            hs.iter()
                .enumerate()
                .max_by(|a, b| a.1.score.total_cmp(&b.1.score).then(b.0.cmp(&a.0)))
                .map(|(i, _)| i)
        };
        let (hyp, truncated) = match best(&finished) {
            Some(i) => (finished.swap_remove(i), false),
            None => {
                let i = best(&overflow).expect("search ends with a finished or overflowing hypothesis");
                (overflow.swap_remove(i), true)
            }
        };
        Ok(Translation {
            tokens: hyp.tokens,
            score: hyp.score,
            truncated,
            ctc_labels: collapsed.into_inner(),
        })
    }

    fn next_token_log_probs(&self, memory: &Array2<S>, prefix: &[usize]) -> Vec<f64> {
        let mut tape = Tape::with_params(self.params());
        let mem = tape.leaf(memory.clone());
        let mut inputs = Vec::with_capacity(prefix.len() + 1);
        inputs.push(self.config().target_vocab.eos());
        inputs.extend_from_slice(prefix);
        let logits = self.decode_on(&mut tape, mem, &inputs, &mut Dropout::eval());
        let last = tape.value(logits).slice(ndarray::s![prefix.len()..prefix.len() + 1, ..]).to_owned();
        log_softmax_rows(last.view()).row(0).iter().map(|x| x.as_f64()).collect()
    }
}
