use ndarray::{ArrayD, Zip};

use crate::model::Model;

/// Adam with decoupled weight decay, matching `torch.optim.AdamW`.
pub struct AdamW {
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    step: i32,
    moments: Vec<(ArrayD<f64>, ArrayD<f64>)>,
}

impl AdamW {
    pub fn new(betas: (f64, f64), eps: f64, weight_decay: f64) -> Self {
        AdamW {
            betas,
            eps,
            weight_decay,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    /// One update of every trainable parameter using its accumulated gradient.
    pub fn step(&mut self, model: &mut Model, lr: f64) {
        self.step += 1;
        let (b1, b2) = self.betas;
        let bc1 = 1.0 - b1.powi(self.step);
        let bc2_sqrt = (1.0 - b2.powi(self.step)).sqrt();
        let (eps, decay) = (self.eps, 1.0 - lr * self.weight_decay);
        let moments = &mut self.moments;
        let mut i = 0;
        model.visit(&mut |_, p| {
            if !p.trainable {
                return;
            }
            if moments.len() <= i {
                moments.push((ArrayD::zeros(p.value.raw_dim()), ArrayD::zeros(p.value.raw_dim())));
            }
            let (m, v) = &mut moments[i];
            Zip::from(&mut p.value)
                .and(&p.grad)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    *w *= decay;
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *w -= lr / bc1 * *m / ((*v).sqrt() / bc2_sqrt + eps);
                });
            i += 1;
        });
    }
}

/// Global L2 norm of all trainable gradients.
pub fn grad_norm(model: &Model) -> f64 {
    let mut sq = 0.0;
    model.visit_ref(&mut |_, p| {
        if p.trainable {
            sq += p.grad.iter().map(|g| g * g).sum::<f64>();
        }
    });
    sq.sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`, as
/// `torch.nn.utils.clip_grad_norm_` does. Returns the norm before clipping.
pub fn clip_grad_norm(model: &mut Model, max_norm: f64) -> f64 {
    let norm = grad_norm(model);
    let coef = max_norm / (norm + 1e-6);
    if coef < 1.0 {
        model.visit(&mut |_, p| {
            if p.trainable {
                p.grad.mapv_inplace(|g| g * coef);
            }
        });
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn model() -> Model {
        Model::build(
            &ModelConfig {
                tiny_width: 4,
                head_dims: vec![3, 2],
                head_dropout: vec![0.0],
                ..ModelConfig::tiny()
            },
            0,
        )
        .unwrap()
    }

    fn set_grads(m: &mut Model, value: f64) {
        m.visit(&mut |_, p| {
            if p.trainable {
                p.grad.fill(value)
            }
        });
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut m = model();
        set_grads(&mut m, 3.0);
        let before = clip_grad_norm(&mut m, 1.0);
        assert!(before > 1.0);
        assert!(grad_norm(&m) <= 1.0 + 1e-6);
        set_grads(&mut m, 1e-4);
        let small = grad_norm(&m);
        clip_grad_norm(&mut m, 1.0);
        assert_eq!(grad_norm(&m), small);
    }

    /// Two steps of the update rule evaluated by hand for one scalar.
    #[test]
    fn matches_reference_update() {
        let mut m = model();
        let mut first = None;
        m.visit(&mut |name, p| {
            if p.trainable && first.is_none() {
                first = Some(name.to_string());
                p.value.fill(0.5);
            }
        });
        let name = first.unwrap();
        let mut opt = AdamW::new((0.9, 0.999), 1e-8, 0.01);
        let (lr, g1, g2) = (0.1, 0.2, -0.4);

        let mut w = 0.5f64;
        let (mut mm, mut vv) = (0.0, 0.0);
        for (t, g) in [(1, g1), (2, g2)] {
            set_grads(&mut m, g);
            opt.step(&mut m, lr);
            w *= 1.0 - lr * 0.01;
            mm = 0.9 * mm + 0.1 * g;
            vv = 0.999 * vv + 0.001 * g * g;
            let mhat = mm / (1.0 - 0.9f64.powi(t));
            let vhat = vv / (1.0 - 0.999f64.powi(t));
            w -= lr * mhat / (vhat.sqrt() + 1e-8);
        }
        let mut got = 0.0;
        m.visit_ref(&mut |n, p| {
            if n == name {
                got = p.value.as_slice().unwrap()[0];
            }
        });
        assert!((got - w).abs() < 1e-12, "{got} vs {w}");
        assert_eq!(opt.steps_taken(), 2);
    }
}
