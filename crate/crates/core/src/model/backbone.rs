//! Feature-extractor backbones.
//!
//! Parameter names follow timm's `tf_efficientnetv2_b3` state dict so that
//! its published weights import directly.

use ndarray::Array4;
use rand_chacha::ChaCha8Rng;

use super::attention::SqueezeExcite;
use crate::error::{Error, Result};
use crate::nn::{
    Act, Activation, BatchNorm2d, Conv2d, Layer, Padding, Residual, Sequential, TrainCtx, Visitor, VisitorRef,
};

pub const TINY: &str = "tiny";
pub const EFFICIENTNETV2_B3: &str = "tf_efficientnetv2_b3";
pub const AVAILABLE: [&str; 2] = [TINY, EFFICIENTNETV2_B3];

const TF_BN_EPS: f64 = 1e-3;
const TORCH_BN_EPS: f64 = 1e-5;

/// A backbone maps `N×3×H×W` images to `N×C×h×w` feature maps.
pub struct Backbone {
    id: String,
    body: Sequential,
    channels: usize,
}

impl Backbone {
    fn new(id: &str, body: Sequential) -> Self {
        let channels = body.out_channels(3);
        Backbone {
            id: id.to_string(),
            body,
            channels,
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    /// Feature width `C`, read from the assembled layers.
    pub fn channels(&self) -> usize {
        self.channels
    }

    fn check(x: &Array4<f64>) -> Result<()> {
        let (n, c, h, w) = x.dim();
        if c != 3 {
            return Err(Error::Shape(format!("backbone expects 3 input channels, got {c}")));
        }
        if n == 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("empty input batch {:?}", x.shape())));
        }
        Ok(())
    }

    pub fn infer(&self, x: &Array4<f64>) -> Result<Array4<f64>> {
        Self::check(x)?;
        Ok(self.body.infer(x))
    }

    pub fn forward(&mut self, x: &Array4<f64>, ctx: &mut TrainCtx) -> Result<Array4<f64>> {
        Self::check(x)?;
        Ok(self.body.forward(x, ctx))
    }

    pub fn backward(&mut self, grad: &Array4<f64>) -> Array4<f64> {
        self.body.backward(grad)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut Visitor<'_>) {
        self.body.visit(prefix, f);
    }

    pub fn visit_ref(&self, prefix: &str, f: &mut VisitorRef<'_>) {
        self.body.visit_ref(prefix, f);
    }
}

/// Four conv-BN-ReLU stages with strides 2, 2, 2, 1 and a constant width.
pub fn tiny(width: usize, rng: &mut ChaCha8Rng) -> Backbone {
    let mut body = Sequential::new();
    let mut in_ch = 3;
    for (i, stride) in [2, 2, 2, 1].into_iter().enumerate() {
        let stage = Sequential::new()
            .with(
                "conv",
                Conv2d::new(in_ch, width, 3, stride, 1, Padding::Fixed(1), false, rng),
            )
            .with("bn", BatchNorm2d::new(width, TORCH_BN_EPS))
            .with("act", Activation::new(Act::Relu));
        body.push(format!("layers.{i}"), stage);
        in_ch = width;
    }
    Backbone::new(TINY, body)
}

#[derive(Clone, Copy)]
enum BlockKind {
    ConvBnAct,
    EdgeResidual,
    InvertedResidual,
}

struct StageDef {
    kind: BlockKind,
    repeats: usize,
    stride: usize,
    expansion: usize,
    out_ch: usize,
    se: bool,
}

const B3_STEM: usize = 40;
const B3_HEAD: usize = 1536;
const B3_STAGES: [StageDef; 6] = [
    StageDef {
        kind: BlockKind::ConvBnAct,
        repeats: 2,
        stride: 1,
        expansion: 1,
        out_ch: 16,
        se: false,
    },
    StageDef {
        kind: BlockKind::EdgeResidual,
        repeats: 3,
        stride: 2,
        expansion: 4,
        out_ch: 40,
        se: false,
    },
    StageDef {
        kind: BlockKind::EdgeResidual,
        repeats: 3,
        stride: 2,
        expansion: 4,
        out_ch: 56,
        se: false,
    },
    StageDef {
        kind: BlockKind::InvertedResidual,
        repeats: 5,
        stride: 2,
        expansion: 4,
        out_ch: 112,
        se: true,
    },
    StageDef {
        kind: BlockKind::InvertedResidual,
        repeats: 7,
        stride: 1,
        expansion: 6,
        out_ch: 136,
        se: true,
    },
    StageDef {
        kind: BlockKind::InvertedResidual,
        repeats: 12,
        stride: 2,
        expansion: 6,
        out_ch: 232,
        se: true,
    },
];

fn conv(i: usize, o: usize, k: usize, s: usize, g: usize, rng: &mut ChaCha8Rng) -> Conv2d {
    Conv2d::new(i, o, k, s, g, Padding::Same, false, rng)
}

fn block(
    kind: BlockKind,
    in_ch: usize,
    out_ch: usize,
    stride: usize,
    expansion: usize,
    se: bool,
    drop_path: f64,
    rng: &mut ChaCha8Rng,
) -> Residual {
    let mid = in_ch * expansion;
    let mut body = Sequential::new();
    match kind {
        BlockKind::ConvBnAct => {
            body.push("conv", conv(in_ch, out_ch, 3, stride, 1, rng))
                .push("bn1", BatchNorm2d::new(out_ch, TF_BN_EPS))
                .push("act1", Activation::new(Act::Silu));
        }
        BlockKind::EdgeResidual => {
            body.push("conv_exp", conv(in_ch, mid, 3, stride, 1, rng))
                .push("bn1", BatchNorm2d::new(mid, TF_BN_EPS))
                .push("act1", Activation::new(Act::Silu))
                .push("conv_pwl", conv(mid, out_ch, 1, 1, 1, rng))
                .push("bn2", BatchNorm2d::new(out_ch, TF_BN_EPS));
        }
        BlockKind::InvertedResidual => {
            body.push("conv_pw", conv(in_ch, mid, 1, 1, 1, rng))
                .push("bn1", BatchNorm2d::new(mid, TF_BN_EPS))
                .push("act1", Activation::new(Act::Silu))
                .push("conv_dw", conv(mid, mid, 3, stride, mid, rng))
                .push("bn2", BatchNorm2d::new(mid, TF_BN_EPS))
                .push("act2", Activation::new(Act::Silu));
            if se {
                body.push("se", SqueezeExcite::gated_block(mid, (in_ch / 4).max(1), rng));
            }
            body.push("conv_pwl", conv(mid, out_ch, 1, 1, 1, rng))
                .push("bn3", BatchNorm2d::new(out_ch, TF_BN_EPS));
        }
    }
    let skip = stride == 1 && in_ch == out_ch;
    Residual::new(body, skip, drop_path)
}

/// EfficientNetV2-B3 (TF-ported variant) without its classifier.
pub fn efficientnetv2_b3(drop_path_rate: f64, rng: &mut ChaCha8Rng) -> Backbone {
    let total: usize = B3_STAGES.iter().map(|s| s.repeats).sum();
    let mut body = Sequential::new();
    body.push("conv_stem", conv(3, B3_STEM, 3, 2, 1, rng))
        .push("bn1", BatchNorm2d::new(B3_STEM, TF_BN_EPS))
        .push("act1", Activation::new(Act::Silu));

    let mut in_ch = B3_STEM;
    let mut idx = 0;
    for (si, stage) in B3_STAGES.iter().enumerate() {
        let mut blocks = Sequential::new();
        for bi in 0..stage.repeats {
            let stride = if bi == 0 { stage.stride } else { 1 };
            let dp = drop_path_rate * idx as f64 / total as f64;
            blocks.push(
                bi.to_string(),
                block(
                    stage.kind,
                    in_ch,
                    stage.out_ch,
                    stride,
                    stage.expansion,
                    stage.se,
                    dp,
                    rng,
                ),
            );
            in_ch = stage.out_ch;
            idx += 1;
        }
        body.push(format!("blocks.{si}"), blocks);
    }

    body.push("conv_head", conv(in_ch, B3_HEAD, 1, 1, 1, rng))
        .push("bn2", BatchNorm2d::new(B3_HEAD, TF_BN_EPS))
        .push("act2", Activation::new(Act::Silu));
    Backbone::new(EFFICIENTNETV2_B3, body)
}

/// Instantiates a backbone by id with random weights.
pub fn by_id(id: &str, tiny_width: usize, drop_path_rate: f64, rng: &mut ChaCha8Rng) -> Result<Backbone> {
    match id {
        TINY => Ok(tiny(tiny_width, rng)),
        EFFICIENTNETV2_B3 => Ok(efficientnetv2_b3(drop_path_rate, rng)),
        _ => Err(Error::UnknownBackbone {
            id: id.to_string(),
            available: AVAILABLE.join(", "),
        }),
    }
}
