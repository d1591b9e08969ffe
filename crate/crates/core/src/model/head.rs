use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{join, BatchNorm1d, Dense, Dropout, TrainCtx, Visitor, VisitorRef};

const BN_EPS: f64 = 1e-5;

struct Hidden {
    dropout: Dropout,
    fc: Dense,
    bn: BatchNorm1d,
    pre_relu: Option<Array2<f64>>,
}

/// Classifier head: for each hidden width, dropout → FC → batch norm → ReLU;
/// then a final FC to the logits. No softmax.
pub struct Head {
    hidden: Vec<Hidden>,
    pub out: Dense,
}

impl Head {
    /// `dims` lists every FC width including the output; `dropout[i]` sits in
    /// front of hidden layer `i`.
    pub fn new(inputs: usize, dims: &[usize], dropout: &[f64], rng: &mut ChaCha8Rng) -> Result<Self> {
        let (&outputs, widths) = dims
            .split_last()
            .ok_or_else(|| Error::Config("head needs at least one layer".into()))?;
        if dropout.len() != widths.len() {
            return Err(Error::Config(format!(
                "head has {} hidden layers but {} dropout rates",
                widths.len(),
                dropout.len()
            )));
        }
        let mut hidden = Vec::with_capacity(widths.len());
        let mut prev = inputs;
        for (&w, &p) in widths.iter().zip(dropout) {
            hidden.push(Hidden {
                dropout: Dropout::new(p),
                fc: Dense::new(prev, w, rng),
                bn: BatchNorm1d::new(w, BN_EPS),
                pre_relu: None,
            });
            prev = w;
        }
        Ok(Head {
            hidden,
            out: Dense::new(prev, outputs, rng),
        })
    }

    pub fn inputs(&self) -> usize {
        self.hidden
            .first()
            .map(|h| h.fc.inputs())
            .unwrap_or_else(|| self.out.inputs())
    }

    pub fn outputs(&self) -> usize {
        self.out.outputs()
    }

    /// Mutable access to hidden layer `i`'s FC and batch norm.
    pub fn hidden_mut(&mut self, i: usize) -> (&mut Dense, &mut BatchNorm1d) {
        let h = &mut self.hidden[i];
        (&mut h.fc, &mut h.bn)
    }

    fn check(&self, x: &Array2<f64>) -> Result<()> {
        if x.ncols() != self.inputs() {
            return Err(Error::Shape(format!(
                "head expects {} features, got {}",
                self.inputs(),
                x.ncols()
            )));
        }
        Ok(())
    }

    pub fn infer(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.check(x)?;
        let mut h = x.clone();
        for layer in &self.hidden {
            h = layer.bn.infer(&layer.fc.infer(&h)).mapv(|v| v.max(0.0));
        }
        Ok(self.out.infer(&h))
    }

    pub fn forward(&mut self, x: &Array2<f64>, ctx: &mut TrainCtx) -> Result<Array2<f64>> {
        self.check(x)?;
        let mut h = x.clone();
        for layer in &mut self.hidden {
            let d = layer.dropout.forward(&h, ctx);
            let z = layer.bn.forward(&layer.fc.forward(&d));
            h = z.mapv(|v| v.max(0.0));
            layer.pre_relu = Some(z);
        }
        Ok(self.out.forward(&h))
    }

    pub fn backward(&mut self, grad: &Array2<f64>) -> Array2<f64> {
        let mut g = self.out.backward(grad);
        for layer in self.hidden.iter_mut().rev() {
            let z = layer.pre_relu.take().expect("backward without forward");
            g.zip_mut_with(&z, |gi, &zi| {
                if zi <= 0.0 {
                    *gi = 0.0
                }
            });
            g = layer.dropout.backward(&layer.fc.backward(&layer.bn.backward(&g)));
        }
        g
    }

    pub fn visit(&mut self, prefix: &str, f: &mut Visitor<'_>) {
        for (i, layer) in self.hidden.iter_mut().enumerate() {
            layer.fc.visit(&join(prefix, &format!("fc{}", i + 1)), f);
            layer.bn.visit(&join(prefix, &format!("bn{}", i + 1)), f);
        }
        self.out.visit(&join(prefix, "out"), f);
    }

    pub fn visit_ref(&self, prefix: &str, f: &mut VisitorRef<'_>) {
        for (i, layer) in self.hidden.iter().enumerate() {
            layer.fc.visit_ref(&join(prefix, &format!("fc{}", i + 1)), f);
            layer.bn.visit_ref(&join(prefix, &format!("bn{}", i + 1)), f);
        }
        self.out.visit_ref(&join(prefix, "out"), f);
    }
}

/// Row-wise softmax.
pub fn softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut p = logits.clone();
    for mut row in p.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    p
}
