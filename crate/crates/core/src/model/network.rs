//! Teacher-forced forward pass and exact backpropagation.
//!
//! Activations are laid out time-major: row `t * batch + b` holds position
//! `t` of sequence `b`. Padded positions are masked so that a GRU carries its
//! previous state forward unchanged, and padded targets contribute no loss.
//! The encoder reads each source right to left, so its final state has just
//! seen the language tags that open the sequence.

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;

use super::params::{GruParams, Params, Real};
use crate::tokenizer::PAD;

/// One training sequence pair and the weight applied to each of its target
/// tokens in the loss.
#[derive(Clone, Copy, Debug)]
pub struct Example<'a> {
    pub src: &'a [u32],
    pub tgt: &'a [u32],
    pub weight: f64,
}

pub(crate) fn sigmoid<A: Real>(x: A) -> A {
    A::one() / (A::one() + (-x).exp())
}

/// Cached activations of one GRU layer run over a full sequence.
pub(crate) struct GruCache<A> {
    pub x: Array2<A>,
    pub h0: Array2<A>,
    pub h: Array2<A>,
    r: Array2<A>,
    z: Array2<A>,
    n: Array2<A>,
    ghn: Array2<A>,
}

/// Runs a GRU layer over `steps` time steps for `batch` sequences.
pub(crate) fn gru_forward_seq<A: Real>(
    g: &GruParams<A>,
    x: Array2<A>,
    h0: Array2<A>,
    mask: &[A],
    steps: usize,
    batch: usize,
) -> GruCache<A> {
    let hd = g.hidden();
    let mut gi = x.dot(&g.w_ih.t());
    gi += &g.b_ih;
    let rows = steps * batch;
    let mut h_all = Array2::<A>::zeros((rows, hd));
    let mut r_all = Array2::<A>::zeros((rows, hd));
    let mut z_all = Array2::<A>::zeros((rows, hd));
    let mut n_all = Array2::<A>::zeros((rows, hd));
    let mut ghn_all = Array2::<A>::zeros((rows, hd));
    let mut h = h0.clone();
    {
        let gi = gi.as_slice().expect("standard layout");
        let (hs, rs, zs, ns, gs) = (
            h_all.as_slice_mut().unwrap(),
            r_all.as_slice_mut().unwrap(),
            z_all.as_slice_mut().unwrap(),
            n_all.as_slice_mut().unwrap(),
            ghn_all.as_slice_mut().unwrap(),
        );
        for t in 0..steps {
            let mut gh = h.dot(&g.w_hh.t());
            gh += &g.b_hh;
            let gh = gh.as_slice().expect("standard layout");
            let hp = h.as_slice_mut().expect("standard layout");
            for b in 0..batch {
                let row = t * batch + b;
                let m = mask[row];
                let gi_r = &gi[row * 3 * hd..(row + 1) * 3 * hd];
                let gh_r = &gh[b * 3 * hd..(b + 1) * 3 * hd];
                let o = row * hd;
                let prev = &mut hp[b * hd..(b + 1) * hd];
                for j in 0..hd {
                    let r = sigmoid(gi_r[j] + gh_r[j]);
                    let z = sigmoid(gi_r[hd + j] + gh_r[hd + j]);
                    let ghn = gh_r[2 * hd + j];
                    let n = (gi_r[2 * hd + j] + r * ghn).tanh();
                    let cand = (A::one() - z) * n + z * prev[j];
                    let out = m * cand + (A::one() - m) * prev[j];
                    rs[o + j] = r;
                    zs[o + j] = z;
                    ns[o + j] = n;
                    gs[o + j] = ghn;
                    hs[o + j] = out;
                    prev[j] = out;
                }
            }
        }
    }
    GruCache {
        x,
        h0,
        h: h_all,
        r: r_all,
        z: z_all,
        n: n_all,
        ghn: ghn_all,
    }
}

impl<A: Real> GruCache<A> {
    pub fn final_state(&self, steps: usize, batch: usize) -> Array2<A> {
        if steps == 0 {
            return self.h0.clone();
        }
        self.h.slice(s![(steps - 1) * batch..steps * batch, ..]).to_owned()
    }

    fn prev_state(&self, row: usize, batch: usize) -> ArrayView2<'_, A> {
        if row < batch {
            self.h0.view()
        } else {
            self.h.slice(s![row - batch - row % batch..row - row % batch, ..])
        }
    }
}

/// Backpropagates through one GRU layer. `d_out` holds gradients with
/// respect to each step's output, `d_final` with respect to the last state.
/// Returns gradients with respect to the inputs and the initial state.
pub(crate) fn gru_backward_seq<A: Real>(
    g: &GruParams<A>,
    cache: &GruCache<A>,
    d_out: Array2<A>,
    d_final: Option<&Array2<A>>,
    mask: &[A],
    steps: usize,
    batch: usize,
    grad: &mut GruParams<A>,
) -> (Array2<A>, Array2<A>) {
    let hd = g.hidden();
    let rows = steps * batch;
    let mut dgi = Array2::<A>::zeros((rows, 3 * hd));
    let mut dgh = Array2::<A>::zeros((rows, 3 * hd));
    let mut dh_next = match d_final {
        Some(d) => d.clone(),
        None => Array2::zeros((batch, hd)),
    };
    let (rs, zs, ns, gs) = (
        cache.r.as_slice().unwrap(),
        cache.z.as_slice().unwrap(),
        cache.n.as_slice().unwrap(),
        cache.ghn.as_slice().unwrap(),
    );
    let mut dgh_t = Array2::<A>::zeros((batch, 3 * hd));
    for t in (0..steps).rev() {
        let prev = cache.prev_state(t * batch, batch);
        let prev = prev.as_slice().expect("contiguous rows");
        {
            let dgi = dgi.as_slice_mut().unwrap();
            let dgh_s = dgh_t.as_slice_mut().unwrap();
            let dn_s = dh_next.as_slice_mut().unwrap();
            let d_out = d_out.as_slice().unwrap();
            for b in 0..batch {
                let row = t * batch + b;
                let m = mask[row];
                let o = row * hd;
                let gi_r = &mut dgi[row * 3 * hd..(row + 1) * 3 * hd];
                let gh_r = &mut dgh_s[b * 3 * hd..(b + 1) * 3 * hd];
                for j in 0..hd {
                    let dh = d_out[o + j] + dn_s[b * hd + j];
                    let dc = m * dh;
                    let (r, z, n, ghn) = (rs[o + j], zs[o + j], ns[o + j], gs[o + j]);
                    let hp = prev[b * hd + j];
                    let dn = dc * (A::one() - z);
                    let dz = dc * (hp - n);
                    let dn_pre = dn * (A::one() - n * n);
                    let dr = dn_pre * ghn;
                    let dr_pre = dr * r * (A::one() - r);
                    let dz_pre = dz * z * (A::one() - z);
                    gi_r[j] = dr_pre;
                    gi_r[hd + j] = dz_pre;
                    gi_r[2 * hd + j] = dn_pre;
                    gh_r[j] = dr_pre;
                    gh_r[hd + j] = dz_pre;
                    gh_r[2 * hd + j] = dn_pre * r;
                    dn_s[b * hd + j] = (A::one() - m) * dh + dc * z;
                }
            }
        }
        dh_next += &dgh_t.dot(&g.w_hh);
        dgh.slice_mut(s![t * batch..(t + 1) * batch, ..]).assign(&dgh_t);
    }
    // Previous states for every step, stacked to match `dgh`.
    let mut h_prev = Array2::<A>::zeros((rows, hd));
    if rows > 0 {
        h_prev.slice_mut(s![..batch, ..]).assign(&cache.h0);
        h_prev
            .slice_mut(s![batch.., ..])
            .assign(&cache.h.slice(s![..rows - batch, ..]));
    }
    grad.w_hh += &dgh.t().dot(&h_prev);
    grad.b_hh += &dgh.sum_axis(Axis(0));
    grad.w_ih += &dgi.t().dot(&cache.x);
    grad.b_ih += &dgi.sum_axis(Axis(0));
    let dx = dgi.dot(&g.w_ih);
    (dx, dh_next)
}

fn embed_rows<A: Real>(embed: &Array2<A>, ids: &[u32]) -> Array2<A> {
    let mut out = Array2::<A>::zeros((ids.len(), embed.ncols()));
    for (i, &id) in ids.iter().enumerate() {
        out.row_mut(i).assign(&embed.row(id as usize));
    }
    out
}

fn dropout_mask<A: Real, R: Rng>(rows: usize, cols: usize, p: f64, rng: Option<&mut R>) -> Option<Array2<A>> {
    let rng = rng?;
    if p <= 0.0 {
        return None;
    }
    let keep = A::of(1.0 / (1.0 - p));
    Some(Array2::from_shape_fn((rows, cols), |_| {
        if rng.random::<f64>() < p {
            A::zero()
        } else {
            keep
        }
    }))
}

pub(crate) fn log_softmax_rows<A: Real>(logits: &mut Array2<A>) {
    for mut row in logits.rows_mut() {
        let max = row.iter().fold(A::neg_infinity(), |m, &x| m.max(x));
        let lse = max + row.iter().map(|&x| (x - max).exp()).fold(A::zero(), |a, b| a + b).ln();
        row.mapv_inplace(|x| x - lse);
    }
}

/// Dot-product attention of one query over `keys` rows. Returns weights.
pub(crate) fn attend<A: Real>(query: &[A], keys: &[&[A]]) -> Vec<A> {
    let scores: Vec<A> = keys
        .iter()
        .map(|k| k.iter().zip(query).fold(A::zero(), |acc, (&a, &b)| acc + a * b))
        .collect();
    let max = scores.iter().fold(A::neg_infinity(), |m, &x| m.max(x));
    let exps: Vec<A> = scores.iter().map(|&s| (s - max).exp()).collect();
    let total = exps.iter().fold(A::zero(), |a, &b| a + b);
    exps.into_iter().map(|e| e / total).collect()
}

/// Per-example summed negative log-likelihood, teacher-forced. When `grad`
/// is given, accumulates the gradient of `sum_i weight_i * nll_i` into it.
/// Dropout is applied only when `rng` is given.
pub fn forward_backward<A: Real, R: Rng>(
    params: &Params<A>,
    batch: &[Example<'_>],
    dropout: f64,
    mut rng: Option<&mut R>,
    grad: Option<&mut Params<A>>,
) -> Vec<f64> {
    let bsz = batch.len();
    if bsz == 0 {
        return Vec::new();
    }
    let hd = params.hidden();
    let layers = params.encoder.len();
    let src_steps = batch.iter().map(|e| e.src.len()).max().unwrap_or(0);
    let tgt_steps = batch.iter().map(|e| e.tgt.len().saturating_sub(1)).max().unwrap_or(0);

    // Encoder inputs.
    let mut src_ids = vec![PAD; src_steps * bsz];
    let mut src_mask = vec![A::zero(); src_steps * bsz];
    for (b, e) in batch.iter().enumerate() {
        for (t, &id) in e.src.iter().rev().enumerate() {
            src_ids[t * bsz + b] = id;
            src_mask[t * bsz + b] = A::one();
        }
    }
    let mut x = embed_rows(&params.src_embed, &src_ids);
    let enc_drop = dropout_mask::<A, R>(x.nrows(), x.ncols(), dropout, rng.as_deref_mut());
    if let Some(m) = &enc_drop {
        x *= m;
    }
    let mut enc_caches = Vec::with_capacity(layers);
    for g in &params.encoder {
        let cache = gru_forward_seq(g, x, Array2::zeros((bsz, hd)), &src_mask, src_steps, bsz);
        x = cache.h.clone();
        enc_caches.push(cache);
    }
    let enc_top = x;

    // Decoder inputs and labels.
    let mut in_ids = vec![PAD; tgt_steps * bsz];
    let mut labels = vec![PAD; tgt_steps * bsz];
    let mut dec_mask = vec![A::zero(); tgt_steps * bsz];
    for (b, e) in batch.iter().enumerate() {
        for t in 0..e.tgt.len().saturating_sub(1) {
            in_ids[t * bsz + b] = e.tgt[t];
            labels[t * bsz + b] = e.tgt[t + 1];
            dec_mask[t * bsz + b] = A::one();
        }
    }
    let mut y = embed_rows(&params.tgt_embed, &in_ids);
    let dec_drop = dropout_mask::<A, R>(y.nrows(), y.ncols(), dropout, rng.as_deref_mut());
    if let Some(m) = &dec_drop {
        y *= m;
    }
    let mut dec_caches = Vec::with_capacity(layers);
    for (l, g) in params.decoder.iter().enumerate() {
        let h0 = enc_caches[l].final_state(src_steps, bsz);
        let cache = gru_forward_seq(g, y, h0, &dec_mask, tgt_steps, bsz);
        y = cache.h.clone();
        dec_caches.push(cache);
    }
    let dec_top = y;

    // Attention and output projection over all decoder rows at once.
    let rows = tgt_steps * bsz;
    let enc_slice = enc_top.as_slice().unwrap();
    let dec_slice = dec_top.as_slice().unwrap();
    let mut combined = Array2::<A>::zeros((rows, 2 * hd));
    let mut alphas: Vec<Vec<A>> = vec![Vec::new(); rows];
    for row in 0..rows {
        if dec_mask[row] == A::zero() {
            continue;
        }
        let b = row % bsz;
        let len = batch[b].src.len();
        let keys: Vec<&[A]> = (0..len)
            .map(|s| &enc_slice[(s * bsz + b) * hd..(s * bsz + b + 1) * hd])
            .collect();
        let q = &dec_slice[row * hd..(row + 1) * hd];
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
        alphas[row] = alpha;
    }
    let mut htil = combined.dot(&params.combine_w.t());
    htil += &params.combine_b;
    htil.mapv_inplace(|v| v.tanh());
    let out_drop = dropout_mask::<A, R>(rows, hd, dropout, rng.as_deref_mut());
    let hd_out = match &out_drop {
        Some(m) => &htil * m,
        None => htil.clone(),
    };
    let mut logp = hd_out.dot(&params.out_w.t());
    logp += &params.out_b;
    log_softmax_rows(&mut logp);

    let mut nll = vec![0.0f64; bsz];
    for row in 0..rows {
        if dec_mask[row] != A::zero() {
            nll[row % bsz] -= logp[[row, labels[row] as usize]].f64();
        }
    }

    let Some(grad) = grad else {
        return nll;
    };

    // Output layer.
    let mut dlogits = logp;
    for row in 0..rows {
        let mut r = dlogits.row_mut(row);
        if dec_mask[row] == A::zero() {
            r.fill(A::zero());
            continue;
        }
        let w = A::of(batch[row % bsz].weight);
        r.mapv_inplace(|lp| lp.exp() * w);
        let lab = labels[row] as usize;
        r[lab] = r[lab] - w;
    }
    grad.out_w += &dlogits.t().dot(&hd_out);
    grad.out_b += &dlogits.sum_axis(Axis(0));
    let mut dh = dlogits.dot(&params.out_w);
    if let Some(m) = &out_drop {
        dh *= m;
    }
    let dpre = dh * &htil.mapv(|v| A::one() - v * v);
    grad.combine_w += &dpre.t().dot(&combined);
    grad.combine_b += &dpre.sum_axis(Axis(0));
    let dcombined = dpre.dot(&params.combine_w);

    // Attention.
    let mut d_enc = Array2::<A>::zeros((src_steps * bsz, hd));
    let mut d_dec = dcombined.slice(s![.., hd..]).to_owned();
    let dcomb_s = dcombined.as_slice().expect("standard layout");
    let d_enc_s = d_enc.as_slice_mut().unwrap();
    let d_dec_s = d_dec.as_slice_mut().unwrap();
    for row in 0..rows {
        if dec_mask[row] == A::zero() {
            continue;
        }
        let b = row % bsz;
        let alpha = &alphas[row];
        let q = &dec_slice[row * hd..(row + 1) * hd];
        let dctx = &dcomb_s[row * 2 * hd..row * 2 * hd + hd];
        let dalpha: Vec<A> = (0..alpha.len())
            .map(|s| {
                let k = &enc_slice[(s * bsz + b) * hd..(s * bsz + b + 1) * hd];
                (0..hd).fold(A::zero(), |acc, j| acc + dctx[j] * k[j])
            })
            .collect();
        let mean = alpha
            .iter()
            .zip(&dalpha)
            .fold(A::zero(), |acc, (&a, &d)| acc + a * d);
        for (s, (&a, &da)) in alpha.iter().zip(&dalpha).enumerate() {
            let dscore = a * (da - mean);
            let erow = s * bsz + b;
            let k = &enc_slice[erow * hd..(erow + 1) * hd];
            let de = &mut d_enc_s[erow * hd..(erow + 1) * hd];
            for j in 0..hd {
                de[j] += a * dctx[j] + dscore * q[j];
            }
            let dd = &mut d_dec_s[row * hd..(row + 1) * hd];
            for j in 0..hd {
                dd[j] += dscore * k[j];
            }
        }
    }

    // Decoder, top layer first.
    let mut d_init: Vec<Array2<A>> = vec![Array2::zeros((bsz, hd)); layers];
    let mut d_out = d_dec;
    for l in (0..layers).rev() {
        let (dx, dh0) = gru_backward_seq(
            &params.decoder[l],
            &dec_caches[l],
            d_out,
            None,
            &dec_mask,
            tgt_steps,
            bsz,
            &mut grad.decoder[l],
        );
        d_init[l] = dh0;
        d_out = dx;
    }
    let mut d_y = d_out;
    if let Some(m) = &dec_drop {
        d_y *= m;
    }
    scatter_rows(&mut grad.tgt_embed, &in_ids, &d_y, &dec_mask);

    // Encoder, top layer first; final states feed the decoder.
    let mut d_out = d_enc;
    for l in (0..layers).rev() {
        let (dx, _) = gru_backward_seq(
            &params.encoder[l],
            &enc_caches[l],
            d_out,
            Some(&d_init[l]),
            &src_mask,
            src_steps,
            bsz,
            &mut grad.encoder[l],
        );
        d_out = dx;
    }
    let mut d_x = d_out;
    if let Some(m) = &enc_drop {
        d_x *= m;
    }
    scatter_rows(&mut grad.src_embed, &src_ids, &d_x, &src_mask);
    nll
}

fn scatter_rows<A: Real>(embed: &mut Array2<A>, ids: &[u32], d: &Array2<A>, mask: &[A]) {
    for (row, &id) in ids.iter().enumerate() {
        if mask[row] == A::zero() {
            continue;
        }
        let mut e = embed.row_mut(id as usize);
        e += &d.row(row);
    }
}
