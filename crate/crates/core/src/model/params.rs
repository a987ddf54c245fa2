use std::fmt::{Debug, Display};

use ndarray::{Array1, Array2, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use rand::Rng;

/// Floating-point element type of model tensors.
pub trait Real:
    Float
    + NumAssign
    + LinalgScalar
    + ScalarOperand
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("representable")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("representable")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// One GRU layer. Gate rows are ordered reset, update, candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct GruParams<A> {
    pub w_ih: Array2<A>,
    pub w_hh: Array2<A>,
    pub b_ih: Array1<A>,
    pub b_hh: Array1<A>,
}

impl<A: Real> GruParams<A> {
    fn zeros(input: usize, hidden: usize) -> Self {
        GruParams {
            w_ih: Array2::zeros((3 * hidden, input)),
            w_hh: Array2::zeros((3 * hidden, hidden)),
            b_ih: Array1::zeros(3 * hidden),
            b_hh: Array1::zeros(3 * hidden),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_hh.ncols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Params<A> {
    /// Encoder-side embedding, `vocab x embed`.
    pub src_embed: Array2<A>,
    /// Decoder-side embedding. Kept separate from the encoder's so that
    /// training a language as output does not move how it is read.
    pub tgt_embed: Array2<A>,
    pub encoder: Vec<GruParams<A>>,
    pub decoder: Vec<GruParams<A>>,
    /// `hidden x 2*hidden`, applied to `[context; decoder state]`.
    pub combine_w: Array2<A>,
    pub combine_b: Array1<A>,
    /// `vocab x hidden`.
    pub out_w: Array2<A>,
    pub out_b: Array1<A>,
}

impl<A: Real> Params<A> {
    pub fn zeros(vocab: usize, embed: usize, hidden: usize, layers: usize) -> Self {
        let stack = |first_in: usize| {
            (0..layers)
                .map(|l| GruParams::zeros(if l == 0 { first_in } else { hidden }, hidden))
                .collect()
        };
        Params {
            src_embed: Array2::zeros((vocab, embed)),
            tgt_embed: Array2::zeros((vocab, embed)),
            encoder: stack(embed),
            decoder: stack(embed),
            combine_w: Array2::zeros((hidden, 2 * hidden)),
            combine_b: Array1::zeros(hidden),
            out_w: Array2::zeros((vocab, hidden)),
            out_b: Array1::zeros(vocab),
        }
    }

    /// Uniform initialisation. The output projection is random too: with a
    /// zero head, Adam's first steps drive the combine layer's tanh into
    /// saturation to fit token frequencies, and the source is never used.
    pub fn init<R: Rng>(vocab: usize, embed: usize, hidden: usize, layers: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(vocab, embed, hidden, layers);
        fill_uniform(p.src_embed.as_slice_mut().unwrap(), 1.0, rng);
        fill_uniform(p.tgt_embed.as_slice_mut().unwrap(), 1.0, rng);
        let k = 1.0 / (hidden as f64).sqrt();
        for g in p.encoder.iter_mut().chain(p.decoder.iter_mut()) {
            fill_uniform(g.w_ih.as_slice_mut().unwrap(), k, rng);
            fill_uniform(g.w_hh.as_slice_mut().unwrap(), k, rng);
            fill_uniform(g.b_ih.as_slice_mut().unwrap(), k, rng);
            fill_uniform(g.b_hh.as_slice_mut().unwrap(), k, rng);
        }
        fill_uniform(p.combine_w.as_slice_mut().unwrap(), 1.0 / (2.0 * hidden as f64).sqrt(), rng);
        fill_uniform(p.out_w.as_slice_mut().unwrap(), k, rng);
        p
    }

    pub fn zeros_like(&self) -> Self {
        Params::zeros(
            self.vocab(),
            self.src_embed.ncols(),
            self.hidden(),
            self.encoder.len(),
        )
    }

    pub fn vocab(&self) -> usize {
        self.src_embed.nrows()
    }

    pub fn hidden(&self) -> usize {
        self.combine_b.len()
    }

    /// Tensor names in checkpoint order.
    pub fn names(&self) -> Vec<String> {
        let mut names = vec!["src_embed".to_string(), "tgt_embed".to_string()];
        for (side, stack) in [("encoder", &self.encoder), ("decoder", &self.decoder)] {
            for l in 0..stack.len() {
                for t in ["w_ih", "w_hh", "b_ih", "b_hh"] {
                    names.push(format!("{side}.{l}.{t}"));
                }
            }
        }
        names.extend(["combine_w", "combine_b", "out_w", "out_b"].map(String::from));
        names
    }

    /// Tensor shapes in checkpoint order.
    pub fn shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = vec![self.src_embed.shape().to_vec(), self.tgt_embed.shape().to_vec()];
        for g in self.encoder.iter().chain(&self.decoder) {
            shapes.push(g.w_ih.shape().to_vec());
            shapes.push(g.w_hh.shape().to_vec());
            shapes.push(g.b_ih.shape().to_vec());
            shapes.push(g.b_hh.shape().to_vec());
        }
        shapes.push(self.combine_w.shape().to_vec());
        shapes.push(self.combine_b.shape().to_vec());
        shapes.push(self.out_w.shape().to_vec());
        shapes.push(self.out_b.shape().to_vec());
        shapes
    }

    /// Flat views of every tensor in checkpoint order.
    pub fn slices(&self) -> Vec<&[A]> {
        let mut out: Vec<&[A]> = vec![self.src_embed.as_slice().unwrap(), self.tgt_embed.as_slice().unwrap()];
        for g in self.encoder.iter().chain(&self.decoder) {
            out.push(g.w_ih.as_slice().unwrap());
            out.push(g.w_hh.as_slice().unwrap());
            out.push(g.b_ih.as_slice().unwrap());
            out.push(g.b_hh.as_slice().unwrap());
        }
        out.push(self.combine_w.as_slice().unwrap());
        out.push(self.combine_b.as_slice().unwrap());
        out.push(self.out_w.as_slice().unwrap());
        out.push(self.out_b.as_slice().unwrap());
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [A]> {
        let mut out: Vec<&mut [A]> = vec![self.src_embed.as_slice_mut().unwrap(), self.tgt_embed.as_slice_mut().unwrap()];
        for g in self.encoder.iter_mut().chain(self.decoder.iter_mut()) {
            out.push(g.w_ih.as_slice_mut().unwrap());
            out.push(g.w_hh.as_slice_mut().unwrap());
            out.push(g.b_ih.as_slice_mut().unwrap());
            out.push(g.b_hh.as_slice_mut().unwrap());
        }
        out.push(self.combine_w.as_slice_mut().unwrap());
        out.push(self.combine_b.as_slice_mut().unwrap());
        out.push(self.out_w.as_slice_mut().unwrap());
        out.push(self.out_b.as_slice_mut().unwrap());
        out
    }

    pub fn num_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|x| x.is_finite()))
    }

    pub fn l2_norm(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .map(|x| x.f64() * x.f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, k: A) {
        for s in self.slices_mut() {
            s.iter_mut().for_each(|x| *x = *x * k);
        }
    }

    /// `self += k * other`.
    pub fn add_scaled(&mut self, other: &Params<A>, k: A) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x = *x + k * *y);
        }
    }

    /// Converts element type (used to lift a model into f64 for checks).
    pub fn cast<B: Real>(&self) -> Params<B> {
        let mut out = Params::<B>::zeros(
            self.vocab(),
            self.src_embed.ncols(),
            self.hidden(),
            self.encoder.len(),
        );
        for (dst, src) in out.slices_mut().into_iter().zip(self.slices()) {
            dst.iter_mut().zip(src).for_each(|(d, s)| *d = B::of(s.f64()));
        }
        out
    }
}

fn fill_uniform<A: Real, R: Rng>(xs: &mut [A], k: f64, rng: &mut R) {
    for x in xs {
        *x = A::of(rng.random_range(-k..k));
    }
}
