use ndarray::{s, Array1, Array2, Axis, Zip};
use rand::Rng;

use super::{glorot, sigmoid, visit_array1, visit_array1_mut, visit_array2, visit_array2_mut, Params};

/// Gated recurrent unit with gate blocks ordered `[reset, update, candidate]`:
///
/// ```text
/// r = σ(x Wr + h Ur + b)    z = σ(x Wz + h Uz + b)
/// n = tanh(x Wn + bn + r ⊙ (h Un + bhn))
/// h' = (1 − z) ⊙ n + z ⊙ h
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct Gru {
    pub wx: Array2<f64>,
    pub wh: Array2<f64>,
    pub bx: Array1<f64>,
    pub bh: Array1<f64>,
}

struct StepCache {
    x: Array2<f64>,
    h_prev: Array2<f64>,
    r: Array2<f64>,
    z: Array2<f64>,
    n: Array2<f64>,
    gh_n: Array2<f64>,
}

pub struct GruCache {
    steps: Vec<StepCache>,
}

impl Gru {
    pub fn new<R: Rng + ?Sized>(inputs: usize, hidden: usize, rng: &mut R) -> Self {
        let mut wh = Array2::zeros((hidden, 3 * hidden));
        for g in 0..3 {
            wh.slice_mut(s![.., g * hidden..(g + 1) * hidden]).assign(&glorot(hidden, hidden, rng));
        }
        Self { wx: glorot(inputs, 3 * hidden, rng), wh, bx: Array1::zeros(3 * hidden), bh: Array1::zeros(3 * hidden) }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            wx: Array2::zeros(self.wx.raw_dim()),
            wh: Array2::zeros(self.wh.raw_dim()),
            bx: Array1::zeros(self.bx.len()),
            bh: Array1::zeros(self.bh.len()),
        }
    }

    pub fn hidden(&self) -> usize {
        self.wh.nrows()
    }

    pub fn inputs(&self) -> usize {
        self.wx.nrows()
    }

    fn step(&self, x: &Array2<f64>, h: &Array2<f64>) -> StepCache {
        let hd = self.hidden();
        let gx = x.dot(&self.wx) + &self.bx;
        let gh = h.dot(&self.wh) + &self.bh;
        let r = (&gx.slice(s![.., 0..hd]) + &gh.slice(s![.., 0..hd])).mapv(sigmoid);
        let z = (&gx.slice(s![.., hd..2 * hd]) + &gh.slice(s![.., hd..2 * hd])).mapv(sigmoid);
        let gh_n = gh.slice(s![.., 2 * hd..]).to_owned();
        let n = (&gx.slice(s![.., 2 * hd..]) + &(&r * &gh_n)).mapv(f64::tanh);
        StepCache { x: x.clone(), h_prev: h.clone(), r, z, n, gh_n }
    }

    fn next_hidden(c: &StepCache) -> Array2<f64> {
        let mut h = c.n.clone();
        Zip::from(&mut h).and(&c.z).and(&c.h_prev).for_each(|h, &z, &hp| *h = (1.0 - z) * *h + z * hp);
        h
    }

    /// Runs the sequence from a zero state and returns the final hidden state.
    pub fn forward(&self, xs: &[Array2<f64>]) -> Array2<f64> {
        let batch = xs.first().map_or(0, |x| x.nrows());
        let mut h = Array2::zeros((batch, self.hidden()));
        for x in xs {
            h = Self::next_hidden(&self.step(x, &h));
        }
        h
    }

    pub fn forward_cached(&self, xs: &[Array2<f64>]) -> (Array2<f64>, GruCache) {
        let batch = xs.first().map_or(0, |x| x.nrows());
        let mut h = Array2::zeros((batch, self.hidden()));
        let mut steps = Vec::with_capacity(xs.len());
        for x in xs {
            let c = self.step(x, &h);
            h = Self::next_hidden(&c);
            steps.push(c);
        }
        (h, GruCache { steps })
    }

    /// Backpropagates `dL/dh_final` through time, accumulating into `grad`.
    pub fn backward(&self, cache: &GruCache, dh_final: &Array2<f64>, grad: &mut Gru) {
        let hd = self.hidden();
        let mut dh = dh_final.clone();
        for c in cache.steps.iter().rev() {
            let batch = dh.nrows();
            let mut dgx = Array2::zeros((batch, 3 * hd));
            let mut dgh = Array2::zeros((batch, 3 * hd));
            let mut dh_prev = &dh * &c.z;
            {
                let (mut dgx_r, mut rest) = dgx.view_mut().split_at(Axis(1), hd);
                let (mut dgx_z, mut dgx_n) = rest.view_mut().split_at(Axis(1), hd);
                let (mut dgh_r, mut rest_h) = dgh.view_mut().split_at(Axis(1), hd);
                let (mut dgh_z, mut dgh_n) = rest_h.view_mut().split_at(Axis(1), hd);
                for b in 0..batch {
                    for j in 0..hd {
                        let (z, n, r, hp, ghn) = (c.z[[b, j]], c.n[[b, j]], c.r[[b, j]], c.h_prev[[b, j]], c.gh_n[[b, j]]);
                        let d = dh[[b, j]];
                        let dan = d * (1.0 - z) * (1.0 - n * n);
                        let daz = d * (hp - n) * z * (1.0 - z);
                        let dar = dan * ghn * r * (1.0 - r);
                        dgx_r[[b, j]] = dar;
                        dgx_z[[b, j]] = daz;
                        dgx_n[[b, j]] = dan;
                        dgh_r[[b, j]] = dar;
                        dgh_z[[b, j]] = daz;
                        dgh_n[[b, j]] = dan * r;
                    }
                }
            }
            grad.wx += &c.x.t().dot(&dgx);
            grad.bx += &dgx.sum_axis(Axis(0));
            grad.wh += &c.h_prev.t().dot(&dgh);
            grad.bh += &dgh.sum_axis(Axis(0));
            dh_prev += &dgh.dot(&self.wh.t());
            dh = dh_prev;
        }
    }
}

impl Params for Gru {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        visit_array2("", "wx", &self.wx, f);
        visit_array2("", "wh", &self.wh, f);
        visit_array1("", "bx", &self.bx, f);
        visit_array1("", "bh", &self.bh, f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        visit_array2_mut("", "wx", &mut self.wx, f);
        visit_array2_mut("", "wh", &mut self.wh, f);
        visit_array1_mut("", "bx", &mut self.bx, f);
        visit_array1_mut("", "bh", &mut self.bh, f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::max_rel_error;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bptt_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut gru = Gru::new(3, 4, &mut rng);
        gru.bx.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        gru.bh.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        let xs: Vec<_> = (0..4).map(|_| glorot(2, 3, &mut rng) * 3.0).collect();
        let w = glorot(2, 4, &mut rng);
        let loss = |g: &Gru| (g.forward(&xs) * &w).sum();
        let (_, cache) = gru.forward_cached(&xs);
        let mut grad = gru.zeros_like();
        gru.backward(&cache, &w, &mut grad);
        let err = max_rel_error(&gru, &grad.flat(), 1e-5, loss);
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn cached_and_plain_forward_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gru = Gru::new(5, 6, &mut rng);
        let xs: Vec<_> = (0..3).map(|_| glorot(2, 5, &mut rng)).collect();
        assert_eq!(gru.forward(&xs), gru.forward_cached(&xs).0);
    }
}
