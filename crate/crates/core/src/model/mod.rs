//! The classifier: backbone → channel attention → global average pool → head.

mod attention;
pub mod backbone;
mod head;
pub mod weights;

use std::path::PathBuf;

use ndarray::{Array2, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use attention::SqueezeExcite;
pub use backbone::Backbone;
pub use head::{softmax, Head};

use crate::error::{Error, Result};
use crate::nn::{global_avg_pool, global_avg_pool_backward, Layer, Param, TrainCtx, Visitor, VisitorRef};
use weights::TensorMap;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone_id: String,
    /// Load ImageNet weights for the backbone from `weights_path`.
    pub pretrained: bool,
    pub weights_path: Option<PathBuf>,
    /// Continue with random backbone weights when pretrained ones are missing.
    pub allow_random_init: bool,
    /// Channel width of the `tiny` backbone.
    pub tiny_width: usize,
    pub input_size: usize,
    /// Disabled for the no-attention ablation.
    pub attention: bool,
    pub se_reduction: usize,
    pub head_dims: Vec<usize>,
    pub head_dropout: Vec<f64>,
    /// Classifier-level dropout of the original backbone. Kept for config
    /// compatibility; it has no effect because the backbone's own classifier
    /// is replaced by the head.
    pub backbone_dropout: f64,
    pub drop_path_rate: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone_id: backbone::EFFICIENTNETV2_B3.into(),
            pretrained: true,
            weights_path: None,
            allow_random_init: false,
            tiny_width: 42,
            input_size: 384,
            attention: true,
            se_reduction: 16,
            head_dims: vec![512, 256, 2],
            head_dropout: vec![0.3, 0.2],
            backbone_dropout: 0.3,
            drop_path_rate: 0.2,
        }
    }
}

impl ModelConfig {
    /// Offline configuration with the tiny backbone at 64×64.
    pub fn tiny() -> Self {
        ModelConfig {
            backbone_id: backbone::TINY.into(),
            pretrained: false,
            input_size: 64,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.se_reduction == 0 {
            return bad("se_reduction must be at least 1".into());
        }
        if self.head_dims.last() != Some(&2) {
            return bad(format!("head output dimension must be 2, got {:?}", self.head_dims));
        }
        if self.head_dims.contains(&0) {
            return bad("head widths must be positive".into());
        }
        if self.head_dropout.len() + 1 != self.head_dims.len() {
            return bad(format!(
                "{} head dropout rates for {} hidden layers",
                self.head_dropout.len(),
                self.head_dims.len() - 1
            ));
        }
        for (name, p) in self.head_dropout.iter().map(|p| ("head_dropout", *p)).chain([
            ("backbone_dropout", self.backbone_dropout),
            ("drop_path_rate", self.drop_path_rate),
        ]) {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("{name} must be in [0, 1), got {p}"));
            }
        }
        if self.input_size < 8 {
            return bad(format!("input_size {} is too small", self.input_size));
        }
        if self.tiny_width == 0 {
            return bad("tiny_width must be positive".into());
        }
        Ok(())
    }
}

/// Builds the feature extractor, importing pretrained weights when asked.
pub fn build_backbone(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Backbone> {
    let mut bb = backbone::by_id(&config.backbone_id, config.tiny_width, config.drop_path_rate, rng)?;
    if !config.pretrained {
        return Ok(bb);
    }
    let hint = format!(
        "download the '{}' safetensors weights and set model.weights_path, or set model.allow_random_init = true",
        config.backbone_id
    );
    let missing = |reason: String| Error::MissingWeights {
        id: config.backbone_id.clone(),
        reason,
        hint: hint.clone(),
    };
    let result = match &config.weights_path {
        None => Err(missing("no weights_path configured".into())),
        Some(p) if !p.is_file() => Err(missing(format!("{} does not exist", p.display()))),
        Some(p) => {
            let (tensors, _) = weights::read(p)?;
            load_into(&mut |f| bb.visit("", f), &tensors, "")
        }
    };
    match result {
        Ok(()) => Ok(bb),
        Err(e @ Error::MissingWeights { .. }) if config.allow_random_init => {
            log::warn!("{e}; continuing with random initialization");
            Ok(bb)
        }
        Err(e) => Err(e),
    }
}

/// Copies tensors named `prefix + param name` into every visited param.
fn load_into(visit: &mut dyn FnMut(&mut Visitor<'_>), tensors: &TensorMap, prefix: &str) -> Result<()> {
    let mut missing = Vec::new();
    let mut mismatched = Vec::new();
    visit(&mut |name, p: &mut Param| {
        let key = format!("{prefix}{name}");
        match tensors.get(&key) {
            None => missing.push(key),
            Some(t) if !weights::compatible(t.shape(), p.value.shape()) => {
                mismatched.push(format!("{key}: file {:?} vs model {:?}", t.shape(), p.value.shape()))
            }
            Some(t) => {
                p.value = t
                    .to_shape(p.value.raw_dim())
                    .expect("compatible shapes have equal size")
                    .into_owned();
            }
        }
    });
    if !mismatched.is_empty() {
        return Err(Error::Shape(mismatched.join("; ")));
    }
    if !missing.is_empty() {
        let shown: Vec<_> = missing.iter().take(10).cloned().collect();
        return Err(Error::Checkpoint(format!(
            "{} tensor(s) missing, e.g. {}",
            missing.len(),
            shown.join(", ")
        )));
    }
    Ok(())
}

/// What the attention block saw and produced for one batch.
pub struct AttentionTrace {
    /// Backbone output before recalibration, `N×C×h×w`.
    pub features: Array4<f64>,
    /// Channel weights, `N×C`.
    pub weights: Array2<f64>,
}

pub struct Model {
    config: ModelConfig,
    backbone: Backbone,
    se: Option<SqueezeExcite>,
    head: Head,
    spatial: Option<(usize, usize)>,
}

impl Model {
    /// Builds the model with all random initialization drawn from `seed`.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = build_backbone(config, &mut rng)?;
        let c = backbone.channels();
        let se = config
            .attention
            .then(|| SqueezeExcite::new(c, config.se_reduction, &mut rng));
        let head = Head::new(c, &config.head_dims, &config.head_dropout, &mut rng)?;
        Ok(Model {
            config: config.clone(),
            backbone,
            se,
            head,
            spatial: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn feature_channels(&self) -> usize {
        self.backbone.channels()
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn attention(&self) -> Option<&SqueezeExcite> {
        self.se.as_ref()
    }

    pub fn attention_mut(&mut self) -> Option<&mut SqueezeExcite> {
        self.se.as_mut()
    }

    pub fn head_mut(&mut self) -> &mut Head {
        &mut self.head
    }

    /// Eval-mode logits, `N×2`.
    pub fn infer(&self, x: &Array4<f64>) -> Result<Array2<f64>> {
        Ok(self.infer_traced(x)?.0)
    }

    /// Eval-mode logits plus the attention block's input and weights.
    pub fn infer_traced(&self, x: &Array4<f64>) -> Result<(Array2<f64>, Option<AttentionTrace>)> {
        let features = self.backbone.infer(x)?;
        let (recalibrated, trace) = match &self.se {
            Some(se) => {
                let (y, w) = se.apply(&features)?;
                (y, Some(AttentionTrace { features, weights: w }))
            }
            None => (features, None),
        };
        let logits = self.head.infer(&global_avg_pool(&recalibrated))?;
        Ok((logits, trace))
    }

    /// Eval-mode class probabilities (softmax of the logits).
    pub fn predict_proba(&self, x: &Array4<f64>) -> Result<Array2<f64>> {
        Ok(softmax(&self.infer(x)?))
    }

    /// Training-mode forward; caches what [`Model::backward`] needs.
    pub fn forward(&mut self, x: &Array4<f64>, ctx: &mut TrainCtx) -> Result<Array2<f64>> {
        let mut features = self.backbone.forward(x, ctx)?;
        if let Some(se) = &mut self.se {
            if features.shape()[1] != se.channels() {
                return Err(Error::Shape("attention width does not match backbone".into()));
            }
            features = se.forward(&features, ctx);
        }
        let (_, _, h, w) = features.dim();
        self.spatial = Some((h, w));
        self.head.forward(&global_avg_pool(&features), ctx)
    }

    /// Accumulates parameter gradients for `d loss / d logits`.
    pub fn backward(&mut self, grad: &Array2<f64>) {
        let (h, w) = self.spatial.take().expect("backward without forward");
        let dpool = self.head.backward(grad);
        let mut dfeat = global_avg_pool_backward(&dpool, h, w);
        if let Some(se) = &mut self.se {
            dfeat = se.backward(&dfeat);
        }
        self.backbone.backward(&dfeat);
    }

    pub fn visit(&mut self, f: &mut Visitor<'_>) {
        self.backbone.visit("backbone", f);
        if let Some(se) = &mut self.se {
            se.visit("se", f);
        }
        self.head.visit("head", f);
    }

    pub fn visit_ref(&self, f: &mut VisitorRef<'_>) {
        self.backbone.visit_ref("backbone", f);
        if let Some(se) = &self.se {
            se.visit_ref("se", f);
        }
        self.head.visit_ref("head", f);
    }

    pub fn zero_grad(&mut self) {
        self.visit(&mut |_, p| p.zero_grad());
    }

    /// Every parameter and buffer by name.
    pub fn state_dict(&self) -> TensorMap {
        let mut map = TensorMap::new();
        self.visit_ref(&mut |name, p| {
            map.insert(name.to_string(), p.value.clone());
        });
        map
    }

    /// Restores every parameter and buffer; all names must be present.
    pub fn load_state_dict(&mut self, tensors: &TensorMap) -> Result<()> {
        load_into(&mut |f| self.visit(f), tensors, "")
    }

    /// Imports backbone weights from a file keyed by the backbone's own
    /// parameter names (extra tensors such as a classifier are ignored).
    pub fn load_backbone_weights(&mut self, path: &std::path::Path) -> Result<()> {
        let (tensors, _) = weights::read(path)?;
        load_into(&mut |f| self.backbone.visit("", f), &tensors, "")
    }
}

/// Number of trainable scalars.
pub fn count_parameters(model: &Model) -> usize {
    let mut total = 0;
    model.visit_ref(&mut |_, p| {
        if p.trainable {
            total += p.len();
        }
    });
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::random4;

    fn tiny(width: usize) -> ModelConfig {
        ModelConfig {
            tiny_width: width,
            ..ModelConfig::tiny()
        }
    }

    #[test]
    fn tiny_width_sets_feature_channels() {
        let m = Model::build(&tiny(32), 0).unwrap();
        assert_eq!(m.feature_channels(), 32);
        let f = m.backbone().infer(&random4((3, 3, 32, 32), 0)).unwrap();
        assert_eq!(f.dim(), (3, 32, 4, 4));
    }

    #[test]
    fn parameter_count_is_closed_form() {
        let mut cfg = tiny(8);
        cfg.head_dims = vec![5, 3, 2];
        let m = Model::build(&cfg, 0).unwrap();
        let backbone = 27 * 8 + 2 * 8 + 3 * (9 * 64 + 2 * 8);
        let se = (8 * 1 + 1) + (1 * 8 + 8);
        let head = (8 * 5 + 5) + 2 * 5 + (5 * 3 + 3) + 2 * 3 + (3 * 2 + 2);
        assert_eq!(count_parameters(&m), backbone + se + head);
    }

    #[test]
    fn parameter_count_ignores_batch_and_resolution() {
        let m = Model::build(&tiny(8), 0).unwrap();
        let before = count_parameters(&m);
        m.infer(&random4((1, 3, 16, 16), 1)).unwrap();
        m.infer(&random4((4, 3, 40, 24), 1)).unwrap();
        assert_eq!(count_parameters(&m), before);
    }

    #[test]
    fn eval_forward_is_pure_and_finite() {
        let m = Model::build(&tiny(12), 3).unwrap();
        let x = random4((8, 3, 64, 64), 2);
        let before = m.state_dict();
        let a = m.infer(&x).unwrap();
        let b = m.infer(&x).unwrap();
        assert_eq!(a.dim(), (8, 2));
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.is_finite()));
        assert_eq!(m.state_dict(), before);
    }

    #[test]
    fn no_attention_variant_has_no_trace() {
        let mut cfg = tiny(8);
        cfg.attention = false;
        let m = Model::build(&cfg, 0).unwrap();
        let (_, trace) = m.infer_traced(&random4((1, 3, 16, 16), 0)).unwrap();
        assert!(trace.is_none());
    }

    #[test]
    fn pretrained_without_weights_gives_hint() {
        let cfg = ModelConfig {
            pretrained: true,
            ..tiny(8)
        };
        match Model::build(&cfg, 0) {
            Err(Error::MissingWeights { hint, .. }) => assert!(hint.contains("allow_random_init")),
            other => panic!("unexpected {:?}", other.err()),
        }
        let fallback = ModelConfig {
            allow_random_init: true,
            ..cfg
        };
        assert!(Model::build(&fallback, 0).is_ok());
    }

    #[test]
    fn state_dict_round_trip() {
        let a = Model::build(&tiny(8), 1).unwrap();
        let mut b = Model::build(&tiny(8), 2).unwrap();
        let x = random4((2, 3, 16, 16), 5);
        assert_ne!(a.infer(&x).unwrap(), b.infer(&x).unwrap());
        b.load_state_dict(&a.state_dict()).unwrap();
        assert_eq!(a.infer(&x).unwrap(), b.infer(&x).unwrap());
    }

    #[test]
    fn backbone_weights_import_from_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bb.safetensors");
        let src = Model::build(&tiny(8), 1).unwrap();
        let mut map = TensorMap::new();
        src.backbone().visit_ref("", &mut |n, p| {
            map.insert(n.to_string(), p.value.clone());
        });
        map.insert(
            "classifier.weight".into(),
            ndarray::ArrayD::zeros(ndarray::IxDyn(&[2, 8])),
        );
        weights::write(&path, &map, &Default::default()).unwrap();

        let cfg = ModelConfig {
            pretrained: true,
            weights_path: Some(path),
            ..tiny(8)
        };
        let m = Model::build(&cfg, 9).unwrap();
        let x = random4((1, 3, 16, 16), 0);
        assert_eq!(m.backbone().infer(&x).unwrap(), src.backbone().infer(&x).unwrap());
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::default();
        assert!(c.validate().is_ok());
        c.head_dims = vec![512, 256, 3];
        assert!(c.validate().is_err());
        let c = ModelConfig {
            se_reduction: 0,
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
