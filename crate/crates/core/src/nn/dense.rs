use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{glorot, visit_array1, visit_array1_mut, visit_array2, visit_array2_mut, Params};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Tanh,
}

impl Activation {
    fn apply(self, x: &mut Array2<f64>) {
        if self == Activation::Tanh {
            x.mapv_inplace(f64::tanh);
        }
    }

    /// Derivative expressed through the activation's output.
    fn backward(self, out: &Array2<f64>, dout: &mut Array2<f64>) {
        if self == Activation::Tanh {
            ndarray::Zip::from(dout).and(out).for_each(|d, &y| *d *= 1.0 - y * y);
        }
    }
}

/// `y = act(x W + b)` with `W` stored as `(in, out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub act: Activation,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, act: Activation, rng: &mut R) -> Self {
        Self { w: glorot(inputs, outputs, rng), b: Array1::zeros(outputs), act }
    }

    pub fn zeros_like(&self) -> Self {
        Self { w: Array2::zeros(self.w.raw_dim()), b: Array1::zeros(self.b.len()), act: self.act }
    }

    pub fn inputs(&self) -> usize {
        self.w.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.w.ncols()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.w) + &self.b;
        self.act.apply(&mut y);
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &Array2<f64>, y: &Array2<f64>, dy: &Array2<f64>, grad: &mut Dense) -> Array2<f64> {
        let mut dz = dy.clone();
        self.act.backward(y, &mut dz);
        grad.w += &x.t().dot(&dz);
        grad.b += &dz.sum_axis(Axis(0));
        dz.dot(&self.w.t())
    }

    fn visit_named(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        visit_array2(prefix, "w", &self.w, f);
        visit_array1(prefix, "b", &self.b, f);
    }

    fn visit_named_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        visit_array2_mut(prefix, "w", &mut self.w, f);
        visit_array1_mut(prefix, "b", &mut self.b, f);
    }
}

impl Params for Dense {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.visit_named("", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.visit_named_mut("", f);
    }
}

/// Stack of dense layers: tanh on hidden layers, identity on the output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Layer inputs and outputs from a forward pass, consumed by [`Mlp::backward`].
#[derive(Debug, Clone)]
pub struct MlpCache {
    pub activations: Vec<Array2<f64>>,
}

impl MlpCache {
    pub fn output(&self) -> &Array2<f64> {
        self.activations.last().expect("non-empty")
    }
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let n = sizes.len() - 1;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::new(w[0], w[1], if i + 1 == n { Activation::Identity } else { Activation::Tanh }, rng))
            .collect();
        Self { layers }
    }

    pub fn zeros_like(&self) -> Self {
        Self { layers: self.layers.iter().map(Dense::zeros_like).collect() }
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().expect("non-empty").outputs()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        self.layers.iter().fold(x.clone(), |h, l| l.forward(&h))
    }

    pub fn forward_cached(&self, x: &Array2<f64>) -> MlpCache {
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.clone());
        for l in &self.layers {
            let next = l.forward(activations.last().expect("non-empty"));
            activations.push(next);
        }
        MlpCache { activations }
    }

    pub fn backward(&self, cache: &MlpCache, dout: &Array2<f64>, grad: &mut Mlp) -> Array2<f64> {
        let mut d = dout.clone();
        for (i, l) in self.layers.iter().enumerate().rev() {
            d = l.backward(&cache.activations[i], &cache.activations[i + 1], &d, &mut grad.layers[i]);
        }
        d
    }
}

impl Params for Mlp {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit_named(&format!("l{i}."), f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_named_mut(&format!("l{i}."), f);
        }
    }
}
