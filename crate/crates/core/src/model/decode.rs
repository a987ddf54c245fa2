//! Inference: step-wise decoding, greedy search and batched beam search.

use std::cmp::Ordering;

use ndarray::{Array2, Axis};

use super::network::{attend, gru_forward_seq, log_softmax_rows, sigmoid};
use super::params::{GruParams, Params, Real};
use crate::tokenizer::{BOS, EOS, PAD};

/// Encoder output for a batch of sources.
pub(crate) struct Memory<A> {
    /// Top-layer states of each source, `len x hidden`.
    pub states: Vec<Array2<A>>,
    /// Final state of each encoder layer, `batch x hidden`.
    pub finals: Vec<Array2<A>>,
}

pub(crate) fn encode<A: Real>(params: &Params<A>, srcs: &[&[u32]]) -> Memory<A> {
    let bsz = srcs.len();
    let hd = params.hidden();
    let steps = srcs.iter().map(|s| s.len()).max().unwrap_or(0);
    let mut ids = vec![PAD; steps * bsz];
    let mut mask = vec![A::zero(); steps * bsz];
    for (b, s) in srcs.iter().enumerate() {
        for (t, &id) in s.iter().rev().enumerate() {
            ids[t * bsz + b] = id;
            mask[t * bsz + b] = A::one();
        }
    }
    let mut x = params.src_embed.select(Axis(0), &ids.iter().map(|&i| i as usize).collect::<Vec<_>>());
    let mut finals = Vec::with_capacity(params.encoder.len());
    for g in &params.encoder {
        let cache = gru_forward_seq(g, x, Array2::zeros((bsz, hd)), &mask, steps, bsz);
        finals.push(cache.final_state(steps, bsz));
        x = cache.h;
    }
    let states = srcs
        .iter()
        .enumerate()
        .map(|(b, s)| {
            let rows: Vec<usize> = (0..s.len()).map(|t| t * bsz + b).collect();
            x.select(Axis(0), &rows)
        })
        .collect();
    Memory { states, finals }
}

fn gru_cell<A: Real>(g: &GruParams<A>, x: &Array2<A>, h: &Array2<A>) -> Array2<A> {
    let hd = g.hidden();
    let mut gi = x.dot(&g.w_ih.t());
    gi += &g.b_ih;
    let mut gh = h.dot(&g.w_hh.t());
    gh += &g.b_hh;
    let mut out = Array2::<A>::zeros(h.raw_dim());
    for b in 0..h.nrows() {
        for j in 0..hd {
            let r = sigmoid(gi[[b, j]] + gh[[b, j]]);
            let z = sigmoid(gi[[b, hd + j]] + gh[[b, hd + j]]);
            let n = (gi[[b, 2 * hd + j]] + r * gh[[b, 2 * hd + j]]).tanh();
            out[[b, j]] = (A::one() - z) * n + z * h[[b, j]];
        }
    }
    out
}

/// One decoder step for a set of rows. `src_of` maps each row to its source
/// in `mem`; `hidden` holds one `rows x hidden` state per layer. Returns
/// next-token log-probabilities and the updated states.
pub(crate) fn decode_step<A: Real>(
    params: &Params<A>,
    mem: &Memory<A>,
    src_of: &[usize],
    prev: &[u32],
    hidden: &[Array2<A>],
) -> (Array2<A>, Vec<Array2<A>>) {
    let hd = params.hidden();
    let mut x = params.tgt_embed.select(Axis(0), &prev.iter().map(|&i| i as usize).collect::<Vec<_>>());
    let mut next = Vec::with_capacity(hidden.len());
    for (g, h) in params.decoder.iter().zip(hidden) {
        let h2 = gru_cell(g, &x, h);
        x = h2.clone();
        next.push(h2);
    }
    let rows = src_of.len();
    let mut combined = Array2::<A>::zeros((rows, 2 * hd));
    for (row, &b) in src_of.iter().enumerate() {
        let q = x.row(row);
        let q = q.as_slice().unwrap();
        let st = &mem.states[b];
        let keys: Vec<&[A]> = st.rows().into_iter().map(|r| r.to_slice().unwrap()).collect();
        let alpha = attend(q, &keys);
        let mut crow = combined.row_mut(row);
        for (a, k) in alpha.iter().zip(&keys) {
            for j in 0..hd {
                crow[j] = crow[j] + *a * k[j];
            }
        }
        for j in 0..hd {
            crow[hd + j] = q[j];
        }
    }
    let mut h = combined.dot(&params.combine_w.t());
    h += &params.combine_b;
    h.mapv_inplace(|v| v.tanh());
    let mut logp = h.dot(&params.out_w.t());
    logp += &params.out_b;
    log_softmax_rows(&mut logp);
    (logp, next)
}

/// A finished hypothesis: generated tokens (ending in EOS unless cut off at
/// the length limit) and its summed log-probability.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    pub logprob: f64,
}

impl Hypothesis {
    /// Length-normalised score: summed log-probability per generated token.
    pub fn score(&self) -> f64 {
        self.logprob / self.tokens.len().max(1) as f64
    }

    /// Output form: tokens always terminated by EOS.
    pub fn into_output(mut self) -> Vec<u32> {
        if self.tokens.last() != Some(&EOS) {
            self.tokens.push(EOS);
        }
        self.tokens
    }
}

struct Live {
    tokens: Vec<u32>,
    logprob: f64,
}

fn gather_rows<A: Real>(xs: &[Array2<A>], rows: &[usize]) -> Vec<Array2<A>> {
    xs.iter().map(|x| x.select(Axis(0), rows)).collect()
}

/// Beam search over every source at once. Each source keeps `beam` live
/// hypotheses; candidates are ranked by summed log-probability with ties
/// broken by parent order and then token id. A source stops once it has
/// `beam` finished hypotheses; live hypotheses reaching `max_len` tokens are
/// finished as they stand. The best length-normalised finished hypothesis is
/// returned, falling back to the greedy path when that scores higher.
pub(crate) fn beam_search_batch<A: Real>(
    params: &Params<A>,
    srcs: &[&[u32]],
    beam: usize,
    max_len: usize,
) -> Vec<Hypothesis> {
    let beam = beam.max(1);
    let max_len = max_len.max(1);
    let mem = encode(params, srcs);
    let n = srcs.len();
    let mut live: Vec<Vec<Live>> = (0..n)
        .map(|_| vec![Live { tokens: Vec::new(), logprob: 0.0 }])
        .collect();
    let mut finished: Vec<Vec<Hypothesis>> = vec![Vec::new(); n];
    let mut hidden: Vec<Array2<A>> = mem.finals.clone();
    let vocab = params.vocab();

    for step in 0..max_len {
        let mut src_of = Vec::new();
        let mut prev = Vec::new();
        for (b, hyps) in live.iter().enumerate() {
            for h in hyps {
                src_of.push(b);
                prev.push(*h.tokens.last().unwrap_or(&BOS));
            }
        }
        if src_of.is_empty() {
            break;
        }
        let (logp, next_hidden) = decode_step(params, &mem, &src_of, &prev, &hidden);
        let last_step = step + 1 == max_len;
        let mut keep_rows = Vec::new();
        let mut row_base = 0;
        for b in 0..n {
            let parents = std::mem::take(&mut live[b]);
            let mut cands: Vec<(f64, usize, u32)> = Vec::with_capacity(parents.len() * vocab);
            for (i, p) in parents.iter().enumerate() {
                let lp = logp.row(row_base + i);
                for (v, &l) in lp.iter().enumerate() {
                    cands.push((p.logprob + l.f64(), i, v as u32));
                }
            }
            let take = (2 * beam).min(cands.len());
            let cmp = |a: &(f64, usize, u32), b: &(f64, usize, u32)| {
                b.0.partial_cmp(&a.0)
                    .unwrap_or(Ordering::Equal)
                    .then(a.1.cmp(&b.1))
                    .then(a.2.cmp(&b.2))
            };
            if take < cands.len() {
                cands.select_nth_unstable_by(take, cmp);
                cands.truncate(take);
            }
            cands.sort_by(cmp);
            let mut next = Vec::new();
            let mut rows = Vec::new();
            let mut filled = 0;
            for (rank, &(lp, i, v)) in cands.iter().enumerate() {
                if filled == beam {
                    break;
                }
                let mut tokens = parents[i].tokens.clone();
                tokens.push(v);
                if v == EOS {
                    if rank < beam {
                        finished[b].push(Hypothesis { tokens, logprob: lp });
                    }
                    continue;
                }
                filled += 1;
                if last_step {
                    finished[b].push(Hypothesis { tokens, logprob: lp });
                } else {
                    rows.push(row_base + i);
                    next.push(Live { tokens, logprob: lp });
                }
            }
            row_base += parents.len();
            if finished[b].len() >= beam {
                next.clear();
                rows.clear();
            }
            keep_rows.extend(rows);
            live[b] = next;
        }
        hidden = gather_rows(&next_hidden, &keep_rows);
    }

    let greedy = if beam > 1 {
        Some(beam_search_batch(params, srcs, 1, max_len))
    } else {
        None
    };
    finished
        .into_iter()
        .enumerate()
        .map(|(b, hyps)| {
            let mut best: Option<Hypothesis> = None;
            for h in hyps {
                if best.as_ref().is_none_or(|x| h.score() > x.score()) {
                    best = Some(h);
                }
            }
            let mut best = best.unwrap_or(Hypothesis { tokens: vec![EOS], logprob: 0.0 });
            if let Some(g) = &greedy {
                if g[b].score() > best.score() {
                    best = g[b].clone();
                }
            }
            best
        })
        .collect()
}
