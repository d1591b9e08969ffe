use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Array3, Array4, ArrayView3, Axis, IxDyn};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::{join, Layer, Param, TrainCtx, Visitor, VisitorRef};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Symmetric zero padding of the given width.
    Fixed(usize),
    /// TensorFlow "SAME": output is `ceil(in / stride)`, any odd padding
    /// goes to the bottom/right.
    Same,
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    pad_top: usize,
    pad_left: usize,
}

/// 2-D convolution with optional groups (depthwise when
/// `groups == in == out`). Weight layout is `out × in/groups × k × k`.
pub struct Conv2d {
    pub weight: Param,
    pub bias: Option<Param>,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    groups: usize,
    padding: Padding,
    cache: Option<Array4<f64>>,
}

impl Conv2d {
    /// Kaiming-normal (fan-out) weights, zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        padding: Padding,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(groups >= 1 && in_ch.is_multiple_of(groups) && out_ch.is_multiple_of(groups));
        let fan_out = (kernel * kernel * out_ch / groups) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_out).sqrt()).unwrap();
        let shape = [out_ch, in_ch / groups, kernel, kernel];
        let n: usize = shape.iter().product();
        let values: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
        Conv2d {
            weight: Param::new(ndarray::ArrayD::from_shape_vec(IxDyn(&shape), values).unwrap()),
            bias: bias.then(|| Param::zeros(&[out_ch])),
            in_ch,
            out_ch,
            kernel,
            stride,
            groups,
            padding,
            cache: None,
        }
    }

    /// PyTorch's default uniform init, used for 1×1 convolutions that act as
    /// fully connected layers.
    pub fn reset_uniform(&mut self, rng: &mut ChaCha8Rng) {
        let fan_in = (self.in_ch / self.groups * self.kernel * self.kernel) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let u = Uniform::new_inclusive(-bound, bound).unwrap();
        self.weight.value.mapv_inplace(|_| u.sample(rng));
        if let Some(b) = &mut self.bias {
            b.value.mapv_inplace(|_| u.sample(rng));
        }
    }

    fn geometry(&self, in_h: usize, in_w: usize) -> Geometry {
        let (k, st) = (self.kernel, self.stride);
        let (out_h, out_w, pad_top, pad_left) = match self.padding {
            Padding::Fixed(p) => ((in_h + 2 * p - k) / st + 1, (in_w + 2 * p - k) / st + 1, p, p),
            Padding::Same => {
                let out_h = in_h.div_ceil(st);
                let out_w = in_w.div_ceil(st);
                let pad_h = ((out_h - 1) * st + k).saturating_sub(in_h);
                let pad_w = ((out_w - 1) * st + k).saturating_sub(in_w);
                (out_h, out_w, pad_h / 2, pad_w / 2)
            }
        };
        Geometry {
            in_h,
            in_w,
            out_h,
            out_w,
            pad_top,
            pad_left,
        }
    }

    fn is_depthwise(&self) -> bool {
        self.groups == self.in_ch && self.groups == self.out_ch
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1
            && self.stride == 1
            && self.groups == 1
            && matches!(self.padding, Padding::Fixed(0) | Padding::Same)
    }

    fn weight_matrix(&self, g: usize) -> ndarray::ArrayView2<'_, f64> {
        let per_out = self.out_ch / self.groups;
        let k = self.in_ch / self.groups * self.kernel * self.kernel;
        let w = self
            .weight
            .value
            .view()
            .into_shape_with_order((self.out_ch, k))
            .expect("contiguous weight");
        w.slice_move(s![g * per_out..(g + 1) * per_out, ..])
    }

    fn im2col(&self, x: ArrayView3<'_, f64>, g: usize, geo: &Geometry) -> Array2<f64> {
        let cin = self.in_ch / self.groups;
        let k = self.kernel;
        let mut cols = Array2::zeros((cin * k * k, geo.out_h * geo.out_w));
        for ci in 0..cin {
            let plane = x.index_axis(Axis(0), g * cin + ci);
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let mut dst = cols.row_mut(row);
                    let dst = dst.as_slice_mut().unwrap();
                    for oy in 0..geo.out_h {
                        let iy = (oy * self.stride + ky) as isize - geo.pad_top as isize;
                        if iy < 0 || iy >= geo.in_h as isize {
                            continue;
                        }
                        for ox in 0..geo.out_w {
                            let ix = (ox * self.stride + kx) as isize - geo.pad_left as isize;
                            if ix >= 0 && ix < geo.in_w as isize {
                                dst[oy * geo.out_w + ox] = plane[[iy as usize, ix as usize]];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im_add(&self, cols: &Array2<f64>, g: usize, geo: &Geometry, dx: &mut ndarray::ArrayViewMut3<'_, f64>) {
        let cin = self.in_ch / self.groups;
        let k = self.kernel;
        for ci in 0..cin {
            let mut plane = dx.index_axis_mut(Axis(0), g * cin + ci);
            for ky in 0..k {
                for kx in 0..k {
                    let row = cols.row((ci * k + ky) * k + kx);
                    for oy in 0..geo.out_h {
                        let iy = (oy * self.stride + ky) as isize - geo.pad_top as isize;
                        if iy < 0 || iy >= geo.in_h as isize {
                            continue;
                        }
                        for ox in 0..geo.out_w {
                            let ix = (ox * self.stride + kx) as isize - geo.pad_left as isize;
                            if ix >= 0 && ix < geo.in_w as isize {
                                plane[[iy as usize, ix as usize]] += row[oy * geo.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    fn forward_sample(&self, x: ArrayView3<'_, f64>, geo: &Geometry) -> Array3<f64> {
        let mut out = Array3::zeros((self.out_ch, geo.out_h, geo.out_w));
        if self.is_depthwise() {
            self.depthwise_forward(x, geo, &mut out);
        } else {
            let per_out = self.out_ch / self.groups;
            let p = geo.out_h * geo.out_w;
            let mut out2 = out.view_mut().into_shape_with_order((self.out_ch, p)).unwrap();
            for g in 0..self.groups {
                let w = self.weight_matrix(g);
                let mut dst = out2.slice_mut(s![g * per_out..(g + 1) * per_out, ..]);
                if self.is_pointwise() {
                    let xs = x.as_standard_layout();
                    let cols = xs.view().into_shape_with_order((self.in_ch, p)).unwrap();
                    general_mat_mul(1.0, &w, &cols, 0.0, &mut dst);
                } else {
                    let cols = self.im2col(x, g, geo);
                    general_mat_mul(1.0, &w, &cols, 0.0, &mut dst);
                }
            }
        }
        if let Some(b) = &self.bias {
            for (c, mut plane) in out.axis_iter_mut(Axis(0)).enumerate() {
                let bc = b.value[[c]];
                plane.mapv_inplace(|v| v + bc);
            }
        }
        out
    }

    fn depthwise_forward(&self, x: ArrayView3<'_, f64>, geo: &Geometry, out: &mut Array3<f64>) {
        let k = self.kernel;
        for c in 0..self.out_ch {
            let plane = x.index_axis(Axis(0), c);
            let w = self.weight.value.slice(s![c, 0, .., ..]);
            for oy in 0..geo.out_h {
                for ox in 0..geo.out_w {
                    let mut acc = 0.0;
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - geo.pad_top as isize;
                        if iy < 0 || iy >= geo.in_h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * self.stride + kx) as isize - geo.pad_left as isize;
                            if ix >= 0 && ix < geo.in_w as isize {
                                acc += w[[ky, kx]] * plane[[iy as usize, ix as usize]];
                            }
                        }
                    }
                    out[[c, oy, ox]] = acc;
                }
            }
        }
    }

    fn depthwise_backward(
        &mut self,
        x: ArrayView3<'_, f64>,
        dy: ArrayView3<'_, f64>,
        geo: &Geometry,
        dx: &mut ndarray::ArrayViewMut3<'_, f64>,
    ) {
        let k = self.kernel;
        let mut dw = self
            .weight
            .grad
            .view_mut()
            .into_shape_with_order((self.out_ch, k, k))
            .unwrap();
        for c in 0..self.out_ch {
            let w = self.weight.value.slice(s![c, 0, .., ..]).to_owned();
            for oy in 0..geo.out_h {
                for ox in 0..geo.out_w {
                    let g = dy[[c, oy, ox]];
                    if g == 0.0 {
                        continue;
                    }
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - geo.pad_top as isize;
                        if iy < 0 || iy >= geo.in_h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * self.stride + kx) as isize - geo.pad_left as isize;
                            if ix >= 0 && ix < geo.in_w as isize {
                                let (iy, ix) = (iy as usize, ix as usize);
                                dw[[c, ky, kx]] += g * x[[c, iy, ix]];
                                dx[[c, iy, ix]] += g * w[[ky, kx]];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Layer for Conv2d {
    fn infer(&self, x: &Array4<f64>) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_ch, "conv expects {} input channels, got {c}", self.in_ch);
        let geo = self.geometry(h, w);
        let mut out = Array4::zeros((n, self.out_ch, geo.out_h, geo.out_w));
        for i in 0..n {
            let y = self.forward_sample(x.index_axis(Axis(0), i), &geo);
            out.index_axis_mut(Axis(0), i).assign(&y);
        }
        out
    }

    fn forward(&mut self, x: &Array4<f64>, _ctx: &mut TrainCtx) -> Array4<f64> {
        let y = self.infer(x);
        self.cache = Some(x.clone());
        y
    }

    fn backward(&mut self, grad: &Array4<f64>) -> Array4<f64> {
        let x = self.cache.take().expect("backward without forward");
        let (n, _, h, w) = x.dim();
        let geo = self.geometry(h, w);
        let p = geo.out_h * geo.out_w;
        let mut dx = Array4::zeros(x.raw_dim());
        if let Some(b) = &mut self.bias {
            let db = grad.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
            b.grad += &db.into_dyn();
        }
        for i in 0..n {
            let xi = x.index_axis(Axis(0), i);
            let dyi = grad.index_axis(Axis(0), i);
            let mut dxi = dx.index_axis_mut(Axis(0), i);
            if self.is_depthwise() {
                self.depthwise_backward(xi, dyi, &geo, &mut dxi);
                continue;
            }
            let dys = dyi.as_standard_layout();
            let dy2 = dys.view().into_shape_with_order((self.out_ch, p)).unwrap();
            let per_out = self.out_ch / self.groups;
            let kdim = self.in_ch / self.groups * self.kernel * self.kernel;
            for g in 0..self.groups {
                let dyg = dy2.slice(s![g * per_out..(g + 1) * per_out, ..]);
                let w = self.weight_matrix(g).to_owned();
                if self.is_pointwise() {
                    let xs = xi.as_standard_layout();
                    let cols = xs.view().into_shape_with_order((self.in_ch, p)).unwrap();
                    let mut dw = self
                        .weight
                        .grad
                        .view_mut()
                        .into_shape_with_order((self.out_ch, kdim))
                        .unwrap();
                    general_mat_mul(1.0, &dyg, &cols.t(), 1.0, &mut dw);
                    let mut dxm = dxi.view_mut().into_shape_with_order((self.in_ch, p)).unwrap();
                    general_mat_mul(1.0, &w.t(), &dyg, 1.0, &mut dxm);
                } else {
                    let cols = self.im2col(xi, g, &geo);
                    {
                        let dw_all = self
                            .weight
                            .grad
                            .view_mut()
                            .into_shape_with_order((self.out_ch, kdim))
                            .unwrap();
                        let mut dw = dw_all.slice_move(s![g * per_out..(g + 1) * per_out, ..]);
                        general_mat_mul(1.0, &dyg, &cols.t(), 1.0, &mut dw);
                    }
                    let mut dcols = Array2::zeros((kdim, p));
                    general_mat_mul(1.0, &w.t(), &dyg, 0.0, &mut dcols);
                    self.col2im_add(&dcols, g, &geo, &mut dxi);
                }
            }
        }
        dx
    }

    fn visit(&mut self, prefix: &str, f: &mut Visitor<'_>) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_ref(&self, prefix: &str, f: &mut VisitorRef<'_>) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn out_channels(&self, _in_channels: usize) -> usize {
        self.out_ch
    }
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck::*;
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    /// Direct definition of convolution, used as the oracle.
    fn naive(conv: &Conv2d, x: &Array4<f64>) -> Array4<f64> {
        let (n, _, h, w) = x.dim();
        let geo = conv.geometry(h, w);
        let cin_g = conv.in_ch / conv.groups;
        let cout_g = conv.out_ch / conv.groups;
        Array4::from_shape_fn((n, conv.out_ch, geo.out_h, geo.out_w), |(i, o, oy, ox)| {
            let g = o / cout_g;
            let mut acc = conv.bias.as_ref().map(|b| b.value[[o]]).unwrap_or(0.0);
            for ci in 0..cin_g {
                for ky in 0..conv.kernel {
                    for kx in 0..conv.kernel {
                        let iy = (oy * conv.stride + ky) as isize - geo.pad_top as isize;
                        let ix = (ox * conv.stride + kx) as isize - geo.pad_left as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            acc +=
                                conv.weight.value[[o, ci, ky, kx]] * x[[i, g * cin_g + ci, iy as usize, ix as usize]];
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn matches_naive_definition() {
        let cases = [
            (4, 6, 3, 1, 1, Padding::Fixed(1)),
            (4, 6, 3, 2, 2, Padding::Same),
            (6, 6, 3, 2, 6, Padding::Same),
            (5, 3, 1, 1, 1, Padding::Fixed(0)),
            (3, 4, 3, 2, 1, Padding::Fixed(0)),
        ];
        for (i, &(cin, cout, k, s, g, pad)) in cases.iter().enumerate() {
            let mut conv = Conv2d::new(cin, cout, k, s, g, pad, true, &mut rng());
            conv.reset_uniform(&mut rng());
            let x = random4((2, cin, 7, 6), i as u64);
            let a = conv.infer(&x);
            let b = naive(&conv, &x);
            assert_eq!(a.dim(), b.dim());
            for (u, v) in a.iter().zip(b.iter()) {
                assert!((u - v).abs() < 1e-12, "case {i}: {u} vs {v}");
            }
        }
    }

    #[test]
    fn same_padding_output_size() {
        let conv = Conv2d::new(3, 8, 3, 2, 1, Padding::Same, false, &mut rng());
        assert_eq!(conv.infer(&random4((1, 3, 384, 384), 0)).dim(), (1, 8, 192, 192));
        assert_eq!(conv.infer(&random4((1, 3, 7, 7), 0)).dim(), (1, 8, 4, 4));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cases = [
            (2, 3, 3, 1, 1, Padding::Fixed(1)),
            (2, 4, 3, 2, 2, Padding::Same),
            (3, 3, 3, 2, 3, Padding::Same),
            (3, 2, 1, 1, 1, Padding::Fixed(0)),
        ];
        for (i, &(cin, cout, k, s, g, pad)) in cases.iter().enumerate() {
            let mut conv = Conv2d::new(cin, cout, k, s, g, pad, true, &mut rng());
            conv.reset_uniform(&mut rng());
            check_layer(&mut conv, &random4((2, cin, 5, 4), 10 + i as u64), 1e-6);
        }
    }
}
