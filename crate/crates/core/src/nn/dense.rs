use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayD, Axis, Ix1, Ix2, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use super::{join, Param, TrainCtx, Visitor, VisitorRef};

/// Fully connected layer, `y = x Wᵀ + b` with `W` stored as `out × in`.
pub struct Dense {
    pub weight: Param,
    pub bias: Param,
    cache: Option<Array2<f64>>,
}

impl Dense {
    /// Uniform init in `±1/sqrt(in)` for both weight and bias.
    pub fn new(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let u = Uniform::new_inclusive(-bound, bound).unwrap();
        let w: Vec<f64> = (0..inputs * outputs).map(|_| u.sample(rng)).collect();
        let b: Vec<f64> = (0..outputs).map(|_| u.sample(rng)).collect();
        Dense {
            weight: Param::new(ArrayD::from_shape_vec(IxDyn(&[outputs, inputs]), w).unwrap()),
            bias: Param::new(ArrayD::from_shape_vec(IxDyn(&[outputs]), b).unwrap()),
            cache: None,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn infer(&self, x: &Array2<f64>) -> Array2<f64> {
        let w = self.weight.value.view().into_dimensionality::<Ix2>().unwrap();
        let b = self.bias.value.view().into_dimensionality::<Ix1>().unwrap();
        let mut y = Array2::zeros((x.nrows(), self.outputs()));
        general_mat_mul(1.0, x, &w.t(), 0.0, &mut y);
        y += &b;
        y
    }

    pub fn forward(&mut self, x: &Array2<f64>) -> Array2<f64> {
        self.cache = Some(x.clone());
        self.infer(x)
    }

    pub fn backward(&mut self, grad: &Array2<f64>) -> Array2<f64> {
        let x = self.cache.take().expect("backward without forward");
        let mut dw = self.weight.grad.view_mut().into_dimensionality::<Ix2>().unwrap();
        general_mat_mul(1.0, &grad.t(), &x, 1.0, &mut dw);
        self.bias.grad += &grad.sum_axis(Axis(0)).into_dyn();
        let w = self.weight.value.view().into_dimensionality::<Ix2>().unwrap();
        grad.dot(&w)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut Visitor<'_>) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }

    pub fn visit_ref(&self, prefix: &str, f: &mut VisitorRef<'_>) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }
}

/// Inverted dropout: kept units are scaled by `1/(1-p)` during training.
pub struct Dropout {
    pub p: f64,
    mask: Option<Array2<f64>>,
}

impl Dropout {
    pub fn new(p: f64) -> Self {
        Dropout { p, mask: None }
    }

    pub fn forward(&mut self, x: &Array2<f64>, ctx: &mut TrainCtx) -> Array2<f64> {
        if !ctx.stochastic || self.p <= 0.0 {
            self.mask = None;
            return x.clone();
        }
        let keep = 1.0 - self.p;
        let mask = Array2::from_shape_fn(x.raw_dim(), |_| {
            if ctx.rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        let y = x * &mask;
        self.mask = Some(mask);
        y
    }

    pub fn backward(&mut self, grad: &Array2<f64>) -> Array2<f64> {
        match self.mask.take() {
            Some(mask) => grad * &mask,
            None => grad.clone(),
        }
    }
}
