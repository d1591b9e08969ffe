use ndarray::{Array2, Array4, Axis};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{global_avg_pool, join, sigmoid, Act, Dense, Layer, TrainCtx, Visitor, VisitorRef};

/// Squeeze-and-excitation channel attention.
///
/// `y[n,c,:,:] = x[n,c,:,:] * s[n,c]` with
/// `s = sigmoid(fc2(act(fc1(gap(x)))))`. Both FC layers carry a bias.
pub struct SqueezeExcite {
    pub fc1: Dense,
    pub fc2: Dense,
    act: Act,
    names: [&'static str; 2],
    cache: Option<SeCache>,
}

struct SeCache {
    x: Array4<f64>,
    hidden_pre: Array2<f64>,
    gate: Array2<f64>,
}

impl SqueezeExcite {
    /// The classifier's attention block: ReLU bottleneck of width
    /// `max(1, floor(C / reduction))`.
    pub fn new(channels: usize, reduction: usize, rng: &mut ChaCha8Rng) -> Self {
        let reduced = (channels / reduction.max(1)).max(1);
        Self::with_parts(channels, reduced, Act::Relu, ["fc1", "fc2"], rng)
    }

    /// The per-block variant inside EfficientNet stages (SiLU bottleneck).
    pub(crate) fn gated_block(channels: usize, reduced: usize, rng: &mut ChaCha8Rng) -> Self {
        Self::with_parts(channels, reduced, Act::Silu, ["conv_reduce", "conv_expand"], rng)
    }

    fn with_parts(channels: usize, reduced: usize, act: Act, names: [&'static str; 2], rng: &mut ChaCha8Rng) -> Self {
        SqueezeExcite {
            fc1: Dense::new(channels, reduced, rng),
            fc2: Dense::new(reduced, channels, rng),
            act,
            names,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.fc1.inputs()
    }

    pub fn reduced(&self) -> usize {
        self.fc1.outputs()
    }

    fn check(&self, x: &Array4<f64>) -> Result<()> {
        let c = x.shape()[1];
        if c != self.channels() {
            return Err(Error::Shape(format!(
                "attention block built for {} channels, got {c}",
                self.channels()
            )));
        }
        Ok(())
    }

    fn excite(&self, x: &Array4<f64>) -> (Array2<f64>, Array2<f64>) {
        let pre = self.fc1.infer(&global_avg_pool(x));
        let hidden = pre.mapv(|v| self.act.apply(v));
        let gate = self.fc2.infer(&hidden).mapv(sigmoid);
        (pre, gate)
    }

    /// Attention weights `N×C`, each in `[0, 1]`.
    pub fn weights(&self, x: &Array4<f64>) -> Result<Array2<f64>> {
        self.check(x)?;
        Ok(self.excite(x).1)
    }

    /// Recalibrated features together with the attention weights.
    pub fn apply(&self, x: &Array4<f64>) -> Result<(Array4<f64>, Array2<f64>)> {
        self.check(x)?;
        let gate = self.excite(x).1;
        Ok((scale_channels(x, &gate), gate))
    }
}

fn scale_channels(x: &Array4<f64>, gate: &Array2<f64>) -> Array4<f64> {
    let mut y = x.clone();
    for (n, mut sample) in y.axis_iter_mut(Axis(0)).enumerate() {
        for (c, mut plane) in sample.axis_iter_mut(Axis(0)).enumerate() {
            let s = gate[[n, c]];
            plane.mapv_inplace(|v| v * s);
        }
    }
    y
}

impl Layer for SqueezeExcite {
    fn infer(&self, x: &Array4<f64>) -> Array4<f64> {
        let (y, _) = self.apply(x).expect("attention channel mismatch");
        y
    }

    fn forward(&mut self, x: &Array4<f64>, _ctx: &mut TrainCtx) -> Array4<f64> {
        self.check(x).expect("attention channel mismatch");
        let pre = self.fc1.forward(&global_avg_pool(x));
        let hidden = pre.mapv(|v| self.act.apply(v));
        let gate = self.fc2.forward(&hidden).mapv(sigmoid);
        let y = scale_channels(x, &gate);
        self.cache = Some(SeCache {
            x: x.clone(),
            hidden_pre: pre,
            gate,
        });
        y
    }

    fn backward(&mut self, grad: &Array4<f64>) -> Array4<f64> {
        let SeCache { x, hidden_pre, gate } = self.cache.take().expect("backward without forward");
        let (n, c, h, w) = x.dim();
        // d/d gate[n,c] = sum over the plane of grad * x
        let mut dgate = Array2::zeros((n, c));
        for i in 0..n {
            for j in 0..c {
                let g = grad.slice(ndarray::s![i, j, .., ..]);
                let v = x.slice(ndarray::s![i, j, .., ..]);
                dgate[[i, j]] = g.iter().zip(v.iter()).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        let dlogit = &dgate * &gate.mapv(|s| s * (1.0 - s));
        let dhidden = self.fc2.backward(&dlogit);
        let dpre = &dhidden * &hidden_pre.mapv(|v| self.act.derivative(v));
        let dpool = self.fc1.backward(&dpre);
        let area = (h * w) as f64;
        let mut dx = scale_channels(grad, &gate);
        for i in 0..n {
            for j in 0..c {
                let add = dpool[[i, j]] / area;
                dx.slice_mut(ndarray::s![i, j, .., ..]).mapv_inplace(|v| v + add);
            }
        }
        dx
    }

    fn visit(&mut self, prefix: &str, f: &mut Visitor<'_>) {
        self.fc1.visit(&join(prefix, self.names[0]), f);
        self.fc2.visit(&join(prefix, self.names[1]), f);
    }

    fn visit_ref(&self, prefix: &str, f: &mut VisitorRef<'_>) {
        self.fc1.visit_ref(&join(prefix, self.names[0]), f);
        self.fc2.visit_ref(&join(prefix, self.names[1]), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_layer, random4};
    use ndarray::{arr1, ArrayD, IxDyn};
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn set(p: &mut crate::nn::Param, shape: &[usize], values: Vec<f64>) {
        p.value = ArrayD::from_shape_vec(IxDyn(shape), values).unwrap();
    }

    #[test]
    fn bottleneck_width_floors_with_minimum_one() {
        assert_eq!(SqueezeExcite::new(1536, 16, &mut rng()).reduced(), 96);
        assert_eq!(SqueezeExcite::new(42, 16, &mut rng()).reduced(), 2);
        assert_eq!(SqueezeExcite::new(8, 16, &mut rng()).reduced(), 1);
    }

    #[test]
    fn zero_excitation_halves_input() {
        let mut se = SqueezeExcite::new(4, 2, &mut rng());
        se.fc1.weight.value.fill(0.0);
        se.fc1.bias.value.fill(0.0);
        se.fc2.weight.value.fill(0.0);
        se.fc2.bias.value.fill(0.0);
        let x = random4((2, 4, 3, 3), 1);
        let (y, s) = se.apply(&x).unwrap();
        assert!(s.iter().all(|&v| v == 0.5));
        assert_eq!(y, &x * 0.5);
    }

    #[test]
    fn saturated_excitation_is_identity() {
        let mut se = SqueezeExcite::new(4, 2, &mut rng());
        se.fc2.weight.value.fill(0.0);
        se.fc2.bias.value.fill(f64::INFINITY);
        let x = random4((2, 4, 3, 3), 2);
        assert_eq!(se.apply(&x).unwrap().0, x);
    }

    #[test]
    fn matches_scalar_formula() {
        let mut se = SqueezeExcite::new(4, 4, &mut rng());
        set(&mut se.fc1.weight, &[1, 4], vec![0.5, -0.25, 1.0, 0.75]);
        set(&mut se.fc1.bias, &[1], vec![0.1]);
        set(&mut se.fc2.weight, &[4, 1], vec![1.0, -2.0, 0.5, 3.0]);
        set(&mut se.fc2.bias, &[4], vec![0.0, 0.2, -0.3, -1.0]);
        let x = random4((1, 4, 2, 2), 3);

        let w1 = arr1(&[0.5, -0.25, 1.0, 0.75]);
        let w2 = arr1(&[1.0, -2.0, 0.5, 3.0]);
        let b2 = arr1(&[0.0, 0.2, -0.3, -1.0]);
        let mut z = 0.1;
        for c in 0..4 {
            let mut m = 0.0;
            for i in 0..2 {
                for j in 0..2 {
                    m += x[[0, c, i, j]];
                }
            }
            z += w1[c] * m / 4.0;
        }
        let r = if z > 0.0 { z } else { 0.0 };
        let y = se.apply(&x).unwrap().0;
        for c in 0..4 {
            let s = 1.0 / (1.0 + (-(w2[c] * r + b2[c])).exp());
            for i in 0..2 {
                for j in 0..2 {
                    assert!((y[[0, c, i, j]] - x[[0, c, i, j]] * s).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let se = SqueezeExcite::new(4, 2, &mut rng());
        assert!(matches!(se.apply(&random4((1, 3, 2, 2), 0)), Err(Error::Shape(_))));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut se = SqueezeExcite::new(6, 2, &mut rng());
        check_layer(&mut se, &random4((2, 6, 3, 2), 4), 1e-5);
        let mut gated = SqueezeExcite::gated_block(5, 2, &mut rng());
        check_layer(&mut gated, &random4((2, 5, 2, 2), 5), 1e-5);
    }

    #[test]
    fn weights_are_in_unit_interval() {
        let se = SqueezeExcite::new(8, 4, &mut rng());
        let s = se.weights(&(random4((3, 8, 4, 4), 6) * 50.0)).unwrap();
        assert!(s.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
