use super::params::{Params, Real};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// Adam with bias correction. Moments live in the same layout as the
/// parameters they track.
#[derive(Clone, Debug)]
pub struct Adam<A> {
    m: Params<A>,
    v: Params<A>,
    t: u64,
}

impl<A: Real> Adam<A> {
    pub fn new(like: &Params<A>) -> Self {
        Adam {
            m: like.zeros_like(),
            v: like.zeros_like(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn update(&mut self, params: &mut Params<A>, grad: &Params<A>, lr: f64) {
        self.t += 1;
        let (b1, b2) = (A::of(BETA1), A::of(BETA2));
        let c1 = 1.0 - BETA1.powi(self.t as i32);
        let c2 = 1.0 - BETA2.powi(self.t as i32);
        let step = A::of(lr * c2.sqrt() / c1);
        let eps = A::of(EPS * c2.sqrt());
        let one = A::one();
        for (((p, g), m), v) in params
            .slices_mut()
            .into_iter()
            .zip(grad.slices())
            .zip(self.m.slices_mut())
            .zip(self.v.slices_mut())
        {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                p[i] = p[i] - step * m[i] / (v[i].sqrt() + eps);
            }
        }
    }
}
