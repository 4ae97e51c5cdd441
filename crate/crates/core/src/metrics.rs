//! Word error rate and corpus BLEU.

use std::collections::HashMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Unit-cost Levenshtein distance between token sequences.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance over the reference length.
pub fn wer<T: PartialEq>(hypothesis: &[T], reference: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::invalid("WER needs a non-empty reference"));
    }
    Ok(edit_distance(hypothesis, reference) as f64 / reference.len() as f64)
}

/// Corpus WER: total edits over total reference tokens.
pub fn corpus_wer<T: PartialEq>(hypotheses: &[Vec<T>], references: &[Vec<T>]) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::invalid("hypothesis and reference counts differ"));
    }
    let ref_len: usize = references.iter().map(Vec::len).sum();
    if ref_len == 0 {
        return Err(Error::invalid("WER needs a non-empty reference"));
    }
    let edits: usize = hypotheses
        .iter()
        .zip(references)
        .map(|(h, r)| edit_distance(h, r))
        .sum();
    Ok(edits as f64 / ref_len as f64)
}

pub const BLEU_MAX_ORDER: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BleuScore {
    /// 0 to 100.
    pub score: f64,
    /// Clipped precisions for n = 1..=4.
    pub precisions: [f64; BLEU_MAX_ORDER],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

/// Sufficient statistics of corpus BLEU; corpus-level values are sums.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BleuStats {
    pub matches: [usize; BLEU_MAX_ORDER],
    pub totals: [usize; BLEU_MAX_ORDER],
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts<T: AsRef<str>>(tokens: &[T], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            let key: Vec<&str> = w.iter().map(AsRef::as_ref).collect();
            *counts.entry(key).or_insert(0) += 1;
        }
    }
    counts
}

impl BleuStats {
    pub fn sentence<T: AsRef<str>>(hyp: &[T], reference: &[T]) -> Self {
        let mut s = BleuStats {
            hyp_len: hyp.len(),
            ref_len: reference.len(),
            ..Default::default()
        };
        for n in 1..=BLEU_MAX_ORDER {
            let h = ngram_counts(hyp, n);
            let r = ngram_counts(reference, n);
            s.totals[n - 1] = hyp.len().saturating_sub(n - 1);
            s.matches[n - 1] = h
                .iter()
                .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
                .sum();
        }
        s
    }

    pub fn add(&mut self, other: &BleuStats) {
        for n in 0..BLEU_MAX_ORDER {
            self.matches[n] += other.matches[n];
            self.totals[n] += other.totals[n];
        }
        self.hyp_len += other.hyp_len;
        self.ref_len += other.ref_len;
    }

    /// Unsmoothed BLEU-4; any zero precision gives 0.
    pub fn score(&self) -> BleuScore {
        let mut precisions = [0.0; BLEU_MAX_ORDER];
        for n in 0..BLEU_MAX_ORDER {
            if self.totals[n] > 0 {
                precisions[n] = self.matches[n] as f64 / self.totals[n] as f64;
            }
        }
        let brevity_penalty = if self.hyp_len == 0 {
            0.0
        } else {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).min(0.0).exp()
        };
        let score = if precisions.contains(&0.0) {
            0.0
        } else {
            let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / BLEU_MAX_ORDER as f64;
            100.0 * brevity_penalty * log_mean.exp()
        };
        BleuScore {
            score,
            precisions,
            brevity_penalty,
            hyp_len: self.hyp_len,
            ref_len: self.ref_len,
        }
    }
}

/// Corpus-level BLEU-4 over tokenised sentences.
pub fn bleu<T: AsRef<str>>(hypotheses: &[Vec<T>], references: &[Vec<T>]) -> Result<BleuScore> {
    if hypotheses.len() != references.len() {
        return Err(Error::invalid(format!(
            "{} hypotheses for {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut total = BleuStats::default();
    for (h, r) in hypotheses.iter().zip(references) {
        total.add(&BleuStats::sentence(h, r));
    }
    Ok(total.score())
}

/// Tokenisation of the mteval-v13a script.
pub fn tokenize_13a(line: &str) -> Vec<String> {
    static RULES: OnceLock<[(Regex, &'static str); 4]> = OnceLock::new();
    let rules = RULES.get_or_init(|| {
        [
            (Regex::new(r"([\{-~\[-` -&\(-\+:-@/])").unwrap(), " $1 "),
            (Regex::new(r"([^0-9])([\.,])").unwrap(), "$1 $2 "),
            (Regex::new(r"([\.,])([^0-9])").unwrap(), " $1 $2"),
            (Regex::new(r"([0-9])(-)").unwrap(), "$1 $2 "),
        ]
    });
    let mut s = line
        .replace("<skipped>", "")
        .replace("-\n", "")
        .replace('\n', " ");
    if s.contains('&') {
        s = s
            .replace("&quot;", "\"")
            .replace("&amp;", "&")
            .replace("&lt;", "<")
            .replace("&gt;", ">");
    }
    let mut s = format!(" {s} ");
    for (re, rep) in rules.iter() {
        s = re.replace_all(&s, *rep).into_owned();
    }
    s.split_whitespace().map(str::to_string).collect()
}

/// One hypothesis or reference line of the JSON Lines exchange format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenLine {
    pub id: String,
    pub tokens: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceScore {
    pub id: String,
    pub wer: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub wer: f64,
    pub bleu: BleuScore,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_compression_ratio: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub peak_activation_elements: Option<u64>,
    pub utterances: Vec<UtteranceScore>,
}

/// Pairs hypotheses with references by id and scores them.
pub fn evaluate(hypotheses: &[TokenLine], references: &[TokenLine]) -> Result<EvalReport> {
    let by_id: HashMap<&str, &TokenLine> = hypotheses.iter().map(|h| (h.id.as_str(), h)).collect();
    let mut hyps = Vec::with_capacity(references.len());
    let mut refs = Vec::with_capacity(references.len());
    let mut utterances = Vec::with_capacity(references.len());
    for r in references {
        let h = by_id
            .get(r.id.as_str())
            .ok_or_else(|| Error::invalid(format!("no hypothesis for {:?}", r.id)))?;
        utterances.push(UtteranceScore {
            id: r.id.clone(),
            wer: if r.tokens.is_empty() {
                if h.tokens.is_empty() { 0.0 } else { f64::INFINITY }
            } else {
                wer(&h.tokens, &r.tokens)?
            },
            hyp_len: h.tokens.len(),
            ref_len: r.tokens.len(),
        });
        hyps.push(h.tokens.clone());
        refs.push(r.tokens.clone());
    }
    if hypotheses.len() != references.len() {
        return Err(Error::invalid(format!(
            "{} hypotheses for {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    Ok(EvalReport {
        wer: corpus_wer(&hyps, &refs)?,
        bleu: bleu(&hyps, &refs)?,
        mean_compression_ratio: None,
        peak_activation_elements: None,
        utterances,
    })
}
