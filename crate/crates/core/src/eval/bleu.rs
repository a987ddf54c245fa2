use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::synthlang::Sentence;

pub const MAX_ORDER: usize = 4;

/// Sufficient statistics for corpus BLEU; sums over sentences.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BleuStats {
    pub matches: [u64; MAX_ORDER],
    pub totals: [u64; MAX_ORDER],
    pub hyp_len: u64,
    pub ref_len: u64,
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], u64> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

impl BleuStats {
    pub fn sentence(hyp: &Sentence, reference: &Sentence) -> Self {
        let (h, r) = (hyp.tokens(), reference.tokens());
        let mut s = BleuStats {
            hyp_len: h.len() as u64,
            ref_len: r.len() as u64,
            ..Default::default()
        };
        for n in 1..=MAX_ORDER {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(r, n);
            s.totals[n - 1] = h.len().saturating_sub(n - 1) as u64;
            s.matches[n - 1] = hc
                .iter()
                .map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0)))
                .sum();
        }
        s
    }

    pub fn add(&mut self, o: &BleuStats) {
        for n in 0..MAX_ORDER {
            self.matches[n] += o.matches[n];
            self.totals[n] += o.totals[n];
        }
        self.hyp_len += o.hyp_len;
        self.ref_len += o.ref_len;
    }

    /// BLEU in [0, 100]. Orders above one with no matches use add-one
    /// smoothing, `1 / (total + 1)`.
    pub fn score(&self) -> f64 {
        if self.hyp_len == 0 || self.matches[0] == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        for n in 0..MAX_ORDER {
            let p = if n > 0 && self.matches[n] == 0 {
                1.0 / (self.totals[n] as f64 + 1.0)
            } else {
                self.matches[n] as f64 / self.totals[n] as f64
            };
            log_sum += p.ln();
        }
        let (c, r) = (self.hyp_len as f64, self.ref_len as f64);
        let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
        100.0 * bp * (log_sum / MAX_ORDER as f64).exp()
    }
}

pub(crate) fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::LengthMismatch { left: a, right: b });
    }
    if a == 0 {
        return Err(Error::Empty("evaluation corpus"));
    }
    Ok(())
}

pub fn corpus_stats(hyps: &[Sentence], refs: &[Sentence]) -> Result<Vec<BleuStats>> {
    check_lengths(hyps.len(), refs.len())?;
    Ok(hyps.iter().zip(refs).map(|(h, r)| BleuStats::sentence(h, r)).collect())
}

/// Corpus BLEU over whitespace tokens, case-sensitive.
pub fn corpus_bleu(hyps: &[Sentence], refs: &[Sentence]) -> Result<f64> {
    let mut total = BleuStats::default();
    for s in corpus_stats(hyps, refs)? {
        total.add(&s);
    }
    Ok(total.score())
}
