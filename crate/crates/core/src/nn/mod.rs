//! Minimal dense and recurrent layers with hand-written backward passes.
//!
//! Every layer keeps its gradients in a value of its own type, so the same
//! [`Params`] visitor drives the optimizer, checkpointing and gradient checks.

mod adam;
mod dense;
mod gru;

pub use adam::Adam;
pub use dense::{Activation, Dense, Mlp, MlpCache};
pub use gru::{Gru, GruCache};

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

/// Named access to every trainable scalar, in a stable order.
pub trait Params {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64]));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _, v| n += v.len());
        n
    }

    fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(&mut |_, _, v| out.extend_from_slice(v));
        out
    }

    fn set_flat(&mut self, values: &[f64]) {
        let mut off = 0;
        self.visit_mut(&mut |_, _, v| {
            v.copy_from_slice(&values[off..off + v.len()]);
            off += v.len();
        });
    }

    fn fill(&mut self, x: f64) {
        self.visit_mut(&mut |_, _, v| v.iter_mut().for_each(|p| *p = x));
    }

    fn scale(&mut self, s: f64) {
        self.visit_mut(&mut |_, _, v| v.iter_mut().for_each(|p| *p *= s));
    }

    fn norm(&self) -> f64 {
        let mut s = 0.0;
        self.visit(&mut |_, _, v| s += v.iter().map(|x| x * x).sum::<f64>());
        s.sqrt()
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, _, v| ok &= v.iter().all(|x| x.is_finite()));
        ok
    }
}

/// Rescales gradients so their global norm is at most `max_norm`; returns the original norm.
pub fn clip_grad_norm<P: Params>(grads: &mut P, max_norm: f64) -> f64 {
    let n = grads.norm();
    if n > max_norm && n > 0.0 {
        grads.scale(max_norm / n);
    }
    n
}

pub(crate) fn visit_array2(prefix: &str, name: &str, a: &Array2<f64>, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
    f(&format!("{prefix}{name}"), a.shape(), a.as_slice().expect("standard layout"));
}

pub(crate) fn visit_array2_mut(prefix: &str, name: &str, a: &mut Array2<f64>, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
    let shape = a.shape().to_vec();
    f(&format!("{prefix}{name}"), &shape, a.as_slice_mut().expect("standard layout"));
}

pub(crate) fn visit_array1(prefix: &str, name: &str, a: &Array1<f64>, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
    f(&format!("{prefix}{name}"), a.shape(), a.as_slice().expect("standard layout"));
}

pub(crate) fn visit_array1_mut(prefix: &str, name: &str, a: &mut Array1<f64>, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
    let shape = a.shape().to_vec();
    f(&format!("{prefix}{name}"), &shape, a.as_slice_mut().expect("standard layout"));
}

/// Glorot-uniform matrix.
pub fn glorot<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-limit..limit))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Row-wise softmax.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|x| (x - max).exp());
        let s = row.sum();
        row.mapv_inplace(|x| x / s);
    }
    out
}

/// Mean cross-entropy of `logits` against integer `labels`, and its gradient w.r.t. the logits.
pub fn cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let probs = softmax_rows(logits);
    let n = labels.len() as f64;
    let mut loss = 0.0;
    let mut grad = probs.clone();
    for (i, &y) in labels.iter().enumerate() {
        loss -= probs[[i, y]].max(1e-300).ln();
        grad[[i, y]] -= 1.0;
    }
    grad.mapv_inplace(|g| g / n);
    (loss / n, grad)
}

#[cfg(test)]
pub(crate) mod gradcheck {
    use super::Params;

    /// Largest relative error between `analytic` and central differences of `loss`.
    pub fn max_rel_error<P: Params + Clone>(params: &P, analytic: &[f64], h: f64, loss: impl Fn(&P) -> f64) -> f64 {
        let base = params.flat();
        let mut worst: f64 = 0.0;
        let mut probe = params.clone();
        for i in 0..base.len() {
            let mut v = base.clone();
            v[i] = base[i] + h;
            probe.set_flat(&v);
            let up = loss(&probe);
            v[i] = base[i] - h;
            probe.set_flat(&v);
            let down = loss(&probe);
            let numeric = (up - down) / (2.0 * h);
            let denom = numeric.abs().max(analytic[i].abs()).max(1e-6);
            worst = worst.max((numeric - analytic[i]).abs() / denom);
        }
        worst
    }
}
