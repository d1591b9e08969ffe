//! Minimal layer library with hand-written backward passes.
//!
//! Everything runs in `f64` on the CPU. Layers come in two flavours of
//! forward pass: [`Layer::infer`] takes `&self` and is the pure evaluation
//! path (batch-norm uses running statistics, dropout is off), while
//! [`Layer::forward`] takes `&mut self`, caches what [`Layer::backward`]
//! needs, and updates batch-norm running statistics.
//!
//! Parameters are visited by dotted path (`blocks.3.0.conv_pw.weight`), which
//! doubles as the checkpoint key and the key used when importing pretrained
//! weights.

mod conv;
mod dense;
mod norm;

pub use conv::{Conv2d, Padding};
pub use dense::{Dense, Dropout};
pub use norm::{BatchNorm1d, BatchNorm2d};

use ndarray::{Array2, Array4, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// A tensor of weights plus its gradient. Buffers (batch-norm running
/// statistics) are stored as non-trainable params so they travel with
/// checkpoints but are ignored by the optimizer and the parameter count.
#[derive(Clone, Debug)]
pub struct Param {
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
    pub trainable: bool,
}

impl Param {
    pub fn new(value: ArrayD<f64>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Param {
            value,
            grad,
            trainable: true,
        }
    }

    pub fn buffer(value: ArrayD<f64>) -> Self {
        Param {
            grad: ArrayD::zeros(IxDyn(&[0])),
            value,
            trainable: false,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Param::new(ArrayD::zeros(IxDyn(shape)))
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        if self.trainable {
            self.grad.fill(0.0);
        }
    }
}

/// State for a training-mode forward pass.
pub struct TrainCtx {
    pub rng: ChaCha8Rng,
    /// Dropout and drop-path are active only when set. Gradient checks turn
    /// this off to get a deterministic training-mode function.
    pub stochastic: bool,
}

impl TrainCtx {
    pub fn new(rng: ChaCha8Rng) -> Self {
        TrainCtx { rng, stochastic: true }
    }

    pub fn deterministic(rng: ChaCha8Rng) -> Self {
        TrainCtx { rng, stochastic: false }
    }
}

pub type Visitor<'a> = dyn FnMut(&str, &mut Param) + 'a;
pub type VisitorRef<'a> = dyn FnMut(&str, &Param) + 'a;

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// A layer over `N×C×H×W` activations.
pub trait Layer: Send + Sync {
    fn infer(&self, x: &Array4<f64>) -> Array4<f64>;
    fn forward(&mut self, x: &Array4<f64>, ctx: &mut TrainCtx) -> Array4<f64>;
    fn backward(&mut self, grad: &Array4<f64>) -> Array4<f64>;
    fn visit(&mut self, _prefix: &str, _f: &mut Visitor<'_>) {}
    fn visit_ref(&self, _prefix: &str, _f: &mut VisitorRef<'_>) {}
    /// Output channel count for a given input channel count.
    fn out_channels(&self, in_channels: usize) -> usize {
        in_channels
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Act {
    Relu,
    Silu,
    Sigmoid,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Act {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Act::Relu => x.max(0.0),
            Act::Silu => x * sigmoid(x),
            Act::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative with respect to the pre-activation input.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Act::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Act::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Act::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
        }
    }
}

pub struct Activation {
    act: Act,
    cache: Option<Array4<f64>>,
}

impl Activation {
    pub fn new(act: Act) -> Self {
        Activation { act, cache: None }
    }
}

impl Layer for Activation {
    fn infer(&self, x: &Array4<f64>) -> Array4<f64> {
        x.mapv(|v| self.act.apply(v))
    }

    fn forward(&mut self, x: &Array4<f64>, _ctx: &mut TrainCtx) -> Array4<f64> {
        self.cache = Some(x.clone());
        self.infer(x)
    }

    fn backward(&mut self, grad: &Array4<f64>) -> Array4<f64> {
        let x = self.cache.take().expect("backward without forward");
        let mut out = grad.clone();
        out.zip_mut_with(&x, |g, &v| *g *= self.act.derivative(v));
        out
    }
}

/// Named children run in order.
#[derive(Default)]
pub struct Sequential {
    children: Vec<(String, Box<dyn Layer>)>,
}

impl Sequential {
    pub fn new() -> Self {
        Sequential::default()
    }

    pub fn push(&mut self, name: impl Into<String>, layer: impl Layer + 'static) -> &mut Self {
        self.children.push((name.into(), Box::new(layer)));
        self
    }

    pub fn push_boxed(&mut self, name: impl Into<String>, layer: Box<dyn Layer>) -> &mut Self {
        self.children.push((name.into(), layer));
        self
    }

    pub fn with(mut self, name: impl Into<String>, layer: impl Layer + 'static) -> Self {
        self.push(name, layer);
        self
    }

    pub fn len(&self) -> usize {
        self.children.len()
    }

    pub fn is_empty(&self) -> bool {
        self.children.is_empty()
    }
}

impl Layer for Sequential {
    fn infer(&self, x: &Array4<f64>) -> Array4<f64> {
        let mut h = x.clone();
        for (_, layer) in &self.children {
            h = layer.infer(&h);
        }
        h
    }

    fn forward(&mut self, x: &Array4<f64>, ctx: &mut TrainCtx) -> Array4<f64> {
        let mut h = x.clone();
        for (_, layer) in &mut self.children {
            h = layer.forward(&h, ctx);
        }
        h
    }

    fn backward(&mut self, grad: &Array4<f64>) -> Array4<f64> {
        let mut g = grad.clone();
        for (_, layer) in self.children.iter_mut().rev() {
            g = layer.backward(&g);
        }
        g
    }

    fn visit(&mut self, prefix: &str, f: &mut Visitor<'_>) {
        for (name, layer) in &mut self.children {
            layer.visit(&join(prefix, name), f);
        }
    }

    fn visit_ref(&self, prefix: &str, f: &mut VisitorRef<'_>) {
        for (name, layer) in &self.children {
            layer.visit_ref(&join(prefix, name), f);
        }
    }

    fn out_channels(&self, in_channels: usize) -> usize {
        self.children
            .iter()
            .fold(in_channels, |c, (_, layer)| layer.out_channels(c))
    }
}

/// `body(x) + x` when `skip` is set, otherwise just `body(x)`. The residual
/// branch is dropped per sample with probability `drop_path` in training.
/// Body children are named directly under the block's own prefix.
pub struct Residual {
    body: Sequential,
    skip: bool,
    drop_path: f64,
    mask: Option<Vec<f64>>,
}

impl Residual {
    pub fn new(body: Sequential, skip: bool, drop_path: f64) -> Self {
        Residual {
            body,
            skip,
            drop_path,
            mask: None,
        }
    }
}

impl Layer for Residual {
    fn infer(&self, x: &Array4<f64>) -> Array4<f64> {
        let y = self.body.infer(x);
        if self.skip {
            y + x
        } else {
            y
        }
    }

    fn forward(&mut self, x: &Array4<f64>, ctx: &mut TrainCtx) -> Array4<f64> {
        let mut y = self.body.forward(x, ctx);
        if !self.skip {
            return y;
        }
        if ctx.stochastic && self.drop_path > 0.0 {
            let keep = 1.0 - self.drop_path;
            let mask: Vec<f64> = (0..x.shape()[0])
                .map(|_| {
                    if ctx.rng.random::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                })
                .collect();
            for (n, m) in mask.iter().enumerate() {
                y.index_axis_mut(ndarray::Axis(0), n).mapv_inplace(|v| v * m);
            }
            self.mask = Some(mask);
        } else {
            self.mask = None;
        }
        y + x
    }

    fn backward(&mut self, grad: &Array4<f64>) -> Array4<f64> {
        if !self.skip {
            return self.body.backward(grad);
        }
        let mut branch = grad.clone();
        if let Some(mask) = self.mask.take() {
            for (n, m) in mask.iter().enumerate() {
                branch.index_axis_mut(ndarray::Axis(0), n).mapv_inplace(|v| v * m);
            }
        }
        self.body.backward(&branch) + grad
    }

    fn visit(&mut self, prefix: &str, f: &mut Visitor<'_>) {
        self.body.visit(prefix, f);
    }

    fn visit_ref(&self, prefix: &str, f: &mut VisitorRef<'_>) {
        self.body.visit_ref(prefix, f);
    }

    fn out_channels(&self, in_channels: usize) -> usize {
        self.body.out_channels(in_channels)
    }
}

/// Channel means over the spatial dimensions: `N×C×H×W → N×C`.
pub fn global_avg_pool(x: &Array4<f64>) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let area = (h * w) as f64;
    Array2::from_shape_fn((n, c), |(i, j)| x.slice(ndarray::s![i, j, .., ..]).sum() / area)
}

/// Gradient of [`global_avg_pool`]: spreads each value evenly over `h×w`.
pub fn global_avg_pool_backward(grad: &Array2<f64>, h: usize, w: usize) -> Array4<f64> {
    let (n, c) = grad.dim();
    let area = (h * w) as f64;
    Array4::from_shape_fn((n, c, h, w), |(i, j, _, _)| grad[[i, j]] / area)
}

/// Total element count of trainable parameters.
pub fn count_trainable(layer: &dyn Layer) -> usize {
    let mut total = 0;
    layer.visit_ref("", &mut |_, p| {
        if p.trainable {
            total += p.len();
        }
    });
    total
}

pub mod gradcheck {
    //! Central finite differences for checking analytic gradients.

    use super::*;
    use rand::SeedableRng;

    pub fn ctx() -> TrainCtx {
        TrainCtx::deterministic(ChaCha8Rng::seed_from_u64(0))
    }

    /// Scalar objective `sum(w ⊙ layer(x))` for a fixed random weighting `w`.
    pub fn objective(layer: &mut dyn Layer, x: &Array4<f64>, w: &Array4<f64>) -> f64 {
        let y = layer.forward(x, &mut ctx());
        (&y * w).sum()
    }

    pub fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / (a.abs() + b.abs()).max(1e-5)
    }

    /// Largest relative error between central differences and the analytic
    /// input and parameter gradients of `layer` at `x`.
    pub fn layer_error(layer: &mut dyn Layer, x: &Array4<f64>) -> f64 {
        let mut worst = 0.0f64;
        for_each_error(layer, x, &mut |_, e| worst = worst.max(e));
        worst
    }

    /// Panics at the first gradient entry whose relative error reaches `tol`.
    pub fn check_layer(layer: &mut dyn Layer, x: &Array4<f64>, tol: f64) {
        for_each_error(layer, x, &mut |what, e| assert!(e < tol, "{what}: relative error {e}"));
    }

    fn for_each_error(layer: &mut dyn Layer, x: &Array4<f64>, sink: &mut dyn FnMut(&str, f64)) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let y = layer.forward(x, &mut ctx());
        let w = Array4::from_shape_fn(y.raw_dim(), |_| rng.random::<f64>() - 0.5);
        layer.visit("", &mut |_, p| p.zero_grad());
        layer.forward(x, &mut ctx());
        let dx = layer.backward(&w);

        let h = 1e-6;
        let mut xp = x.clone();
        for idx in 0..x.len() {
            let orig = xp.as_slice().unwrap()[idx];
            xp.as_slice_mut().unwrap()[idx] = orig + h;
            let fp = objective(layer, &xp, &w);
            xp.as_slice_mut().unwrap()[idx] = orig - h;
            let fm = objective(layer, &xp, &w);
            xp.as_slice_mut().unwrap()[idx] = orig;
            let fd = (fp - fm) / (2.0 * h);
            sink(&format!("input[{idx}]"), rel_err(fd, dx.as_slice().unwrap()[idx]));
        }

        let mut analytic = Vec::new();
        layer.visit("", &mut |name, p| {
            if p.trainable {
                analytic.push((name.to_string(), p.grad.clone()));
            }
        });
        for (name, grad) in analytic {
            for idx in 0..grad.len() {
                let bump = |layer: &mut dyn Layer, delta: f64| {
                    layer.visit("", &mut |n, p| {
                        if n == name {
                            p.value.as_slice_mut().unwrap()[idx] += delta;
                        }
                    });
                };
                bump(layer, h);
                let fp = objective(layer, x, &w);
                bump(layer, -2.0 * h);
                let fm = objective(layer, x, &w);
                bump(layer, h);
                let fd = (fp - fm) / (2.0 * h);
                sink(&format!("{name}[{idx}]"), rel_err(fd, grad.as_slice().unwrap()[idx]));
            }
        }
    }

    pub fn random4(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn(shape, |_| rng.random::<f64>() * 2.0 - 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::gradcheck::*;
    use super::*;

    #[test]
    fn activation_gradients() {
        for act in [Act::Silu, Act::Sigmoid] {
            check_layer(&mut Activation::new(act), &random4((2, 2, 3, 3), 1), 1e-6);
        }
    }

    #[test]
    fn residual_gradients() {
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(4);
        let body = Sequential::new()
            .with("conv", Conv2d::new(3, 3, 3, 1, 1, Padding::Same, false, &mut rng))
            .with("act", Activation::new(Act::Silu));
        check_layer(&mut Residual::new(body, true, 0.2), &random4((2, 3, 4, 4), 2), 1e-5);
    }

    #[test]
    fn pool_backward_spreads_evenly() {
        let x = random4((2, 3, 4, 5), 3);
        let p = global_avg_pool(&x);
        assert!((p[[1, 2]] - x.slice(ndarray::s![1, 2, .., ..]).mean().unwrap()).abs() < 1e-12);
        let g = global_avg_pool_backward(&Array2::ones((2, 3)), 4, 5);
        assert!((g.sum() - 6.0).abs() < 1e-12);
    }
}
