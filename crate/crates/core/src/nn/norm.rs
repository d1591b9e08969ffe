use ndarray::{Array1, Array2, Array4, ArrayD, Axis, IxDyn};

use super::{join, Layer, Param, TrainCtx, Visitor, VisitorRef};

/// Shared batch-norm state; the 1-D and 2-D layers differ only in which axes
/// are reduced.
#[derive(Clone, Debug)]
struct NormState {
    weight: Param,
    bias: Param,
    running_mean: Param,
    running_var: Param,
    eps: f64,
    momentum: f64,
}

impl NormState {
    fn new(channels: usize, eps: f64) -> Self {
        NormState {
            weight: Param::new(ArrayD::ones(IxDyn(&[channels]))),
            bias: Param::zeros(&[channels]),
            running_mean: Param::buffer(ArrayD::zeros(IxDyn(&[channels]))),
            running_var: Param::buffer(ArrayD::ones(IxDyn(&[channels]))),
            eps,
            momentum: 0.1,
        }
    }

    fn channels(&self) -> usize {
        self.weight.len()
    }

    fn visit(&mut self, prefix: &str, f: &mut Visitor<'_>) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }

    fn visit_ref(&self, prefix: &str, f: &mut VisitorRef<'_>) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
        f(&join(prefix, "running_mean"), &self.running_mean);
        f(&join(prefix, "running_var"), &self.running_var);
    }

    /// Eval-mode affine map per channel: `y = x * scale + shift`.
    fn eval_affine(&self) -> (Vec<f64>, Vec<f64>) {
        (0..self.channels())
            .map(|c| {
                let inv = 1.0 / (self.running_var.value[[c]] + self.eps).sqrt();
                let scale = self.weight.value[[c]] * inv;
                (scale, self.bias.value[[c]] - self.running_mean.value[[c]] * scale)
            })
            .unzip()
    }

    fn update_running(&mut self, mean: &Array1<f64>, var: &Array1<f64>, count: usize) {
        let m = self.momentum;
        let unbias = if count > 1 {
            count as f64 / (count - 1) as f64
        } else {
            1.0
        };
        for c in 0..self.channels() {
            let rm = &mut self.running_mean.value[[c]];
            *rm = (1.0 - m) * *rm + m * mean[c];
            let rv = &mut self.running_var.value[[c]];
            *rv = (1.0 - m) * *rv + m * var[c] * unbias;
        }
    }
}

struct NormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

/// Normalizes a `M×C` matrix column-wise with batch statistics and returns
/// the cache for backward.
fn normalize_columns(state: &mut NormState, x: &Array2<f64>) -> (Array2<f64>, NormCache) {
    let count = x.nrows();
    let mean = x.mean_axis(Axis(0)).expect("non-empty batch");
    let centered = x - &mean;
    let var = centered.mapv(|v| v * v).mean_axis(Axis(0)).unwrap();
    let inv_std = var.mapv(|v| 1.0 / (v + state.eps).sqrt());
    let xhat = &centered * &inv_std;
    let gamma = state.weight.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
    let beta = state.bias.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
    let y = &xhat * &gamma + beta;
    state.update_running(&mean, &var, count);
    (y, NormCache { xhat, inv_std })
}

fn normalize_columns_backward(state: &mut NormState, cache: &NormCache, dy: &Array2<f64>) -> Array2<f64> {
    let m = dy.nrows() as f64;
    let dgamma = (dy * &cache.xhat).sum_axis(Axis(0));
    let dbeta = dy.sum_axis(Axis(0));
    state.weight.grad += &dgamma.view().into_dyn();
    state.bias.grad += &dbeta.view().into_dyn();
    let gamma = state.weight.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
    let dxhat = dy * &gamma;
    let sum_dxhat = dxhat.sum_axis(Axis(0));
    let sum_dxhat_xhat = (&dxhat * &cache.xhat).sum_axis(Axis(0));
    let scaled = &dxhat * m - &sum_dxhat - &cache.xhat * &sum_dxhat_xhat;
    scaled * &(&cache.inv_std / m)
}

fn to_rows(x: &Array4<f64>) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    x.view()
        .permuted_axes([0, 2, 3, 1])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((n * h * w, c))
        .unwrap()
}

fn from_rows(rows: Array2<f64>, n: usize, c: usize, h: usize, w: usize) -> Array4<f64> {
    rows.into_shape_with_order((n, h, w, c))
        .unwrap()
        .permuted_axes([0, 3, 1, 2])
        .as_standard_layout()
        .into_owned()
}

/// Batch norm over `N×C×H×W`, statistics per channel.
pub struct BatchNorm2d {
    state: NormState,
    cache: Option<NormCache>,
}

impl BatchNorm2d {
    pub fn new(channels: usize, eps: f64) -> Self {
        BatchNorm2d {
            state: NormState::new(channels, eps),
            cache: None,
        }
    }
}

impl Layer for BatchNorm2d {
    fn infer(&self, x: &Array4<f64>) -> Array4<f64> {
        let (scale, shift) = self.state.eval_affine();
        let mut y = x.clone();
        for (c, mut plane) in y.axis_iter_mut(Axis(1)).enumerate() {
            let (a, b) = (scale[c], shift[c]);
            plane.mapv_inplace(|v| v * a + b);
        }
        y
    }

    fn forward(&mut self, x: &Array4<f64>, _ctx: &mut TrainCtx) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        let (y, cache) = normalize_columns(&mut self.state, &to_rows(x));
        self.cache = Some(cache);
        from_rows(y, n, c, h, w)
    }

    fn backward(&mut self, grad: &Array4<f64>) -> Array4<f64> {
        let (n, c, h, w) = grad.dim();
        let cache = self.cache.take().expect("backward without forward");
        let dx = normalize_columns_backward(&mut self.state, &cache, &to_rows(grad));
        from_rows(dx, n, c, h, w)
    }

    fn visit(&mut self, prefix: &str, f: &mut Visitor<'_>) {
        self.state.visit(prefix, f);
    }

    fn visit_ref(&self, prefix: &str, f: &mut VisitorRef<'_>) {
        self.state.visit_ref(prefix, f);
    }
}

/// Batch norm over `N×C` feature vectors.
pub struct BatchNorm1d {
    state: NormState,
    cache: Option<NormCache>,
}

impl BatchNorm1d {
    pub fn new(channels: usize, eps: f64) -> Self {
        BatchNorm1d {
            state: NormState::new(channels, eps),
            cache: None,
        }
    }

    pub fn infer(&self, x: &Array2<f64>) -> Array2<f64> {
        let (scale, shift) = self.state.eval_affine();
        let mut y = x.clone();
        for (c, mut col) in y.axis_iter_mut(Axis(1)).enumerate() {
            let (a, b) = (scale[c], shift[c]);
            col.mapv_inplace(|v| v * a + b);
        }
        y
    }

    pub fn forward(&mut self, x: &Array2<f64>) -> Array2<f64> {
        let (y, cache) = normalize_columns(&mut self.state, x);
        self.cache = Some(cache);
        y
    }

    pub fn backward(&mut self, grad: &Array2<f64>) -> Array2<f64> {
        let cache = self.cache.take().expect("backward without forward");
        normalize_columns_backward(&mut self.state, &cache, grad)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut Visitor<'_>) {
        self.state.visit(prefix, f);
    }

    pub fn visit_ref(&self, prefix: &str, f: &mut VisitorRef<'_>) {
        self.state.visit_ref(prefix, f);
    }
}
