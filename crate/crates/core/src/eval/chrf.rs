use std::collections::HashMap;
use std::hash::Hash;

use super::bleu::check_lengths;
use crate::error::Result;
use crate::synthlang::Sentence;

pub const CHAR_ORDER: usize = 6;
pub const WORD_ORDER: usize = 2;
pub const BETA: f64 = 2.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
struct OrderStats {
    hyp: u64,
    reference: u64,
    matched: u64,
}

fn counts<T: Eq + Hash + Clone>(items: &[T], n: usize) -> HashMap<Vec<T>, u64> {
    let mut out = HashMap::new();
    if items.len() >= n {
        for w in items.windows(n) {
            *out.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    out
}

fn order_stats<T: Eq + Hash + Clone>(h: &[T], r: &[T], n: usize) -> OrderStats {
    let hc = counts(h, n);
    let rc = counts(r, n);
    OrderStats {
        hyp: hc.values().sum(),
        reference: rc.values().sum(),
        matched: hc
            .iter()
            .map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0)))
            .sum(),
    }
}

/// chrF++: character 1..6-grams (whitespace removed) and word 1..2-grams.
/// Statistics are summed over the corpus per order; precision and recall are
/// averaged over orders where either side has n-grams, then combined with
/// β = 2. Score in [0, 100].
pub fn chrfpp(hyps: &[Sentence], refs: &[Sentence]) -> Result<f64> {
    check_lengths(hyps.len(), refs.len())?;
    let mut stats = [OrderStats::default(); CHAR_ORDER + WORD_ORDER];
    for (h, r) in hyps.iter().zip(refs) {
        let hc: Vec<char> = h.tokens().iter().flat_map(|t| t.chars()).collect();
        let rc: Vec<char> = r.tokens().iter().flat_map(|t| t.chars()).collect();
        for n in 1..=CHAR_ORDER {
            let s = order_stats(&hc, &rc, n);
            add(&mut stats[n - 1], s);
        }
        for n in 1..=WORD_ORDER {
            let s = order_stats(h.tokens(), r.tokens(), n);
            add(&mut stats[CHAR_ORDER + n - 1], s);
        }
    }
    let mut p_sum = 0.0;
    let mut r_sum = 0.0;
    let mut orders = 0;
    for s in &stats {
        if s.hyp == 0 && s.reference == 0 {
            continue;
        }
        orders += 1;
        if s.hyp > 0 {
            p_sum += s.matched as f64 / s.hyp as f64;
        }
        if s.reference > 0 {
            r_sum += s.matched as f64 / s.reference as f64;
        }
    }
    if orders == 0 {
        return Ok(0.0);
    }
    let p = p_sum / orders as f64;
    let r = r_sum / orders as f64;
    if p + r == 0.0 {
        return Ok(0.0);
    }
    let b2 = BETA * BETA;
    Ok(100.0 * (1.0 + b2) * p * r / (b2 * p + r))
}

fn add(acc: &mut OrderStats, s: OrderStats) {
    acc.hyp += s.hyp;
    acc.reference += s.reference;
    acc.matched += s.matched;
}
