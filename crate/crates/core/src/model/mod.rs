//! Network description, parameters and the engine forward pass.

mod spec;
mod synth;

pub use spec::{
    build_fracbnn_resnet20, count_ops, BlockSpec, LayerKind, NetworkSpec, OpCounts, Topology,
};
pub use synth::{generate_synthetic, GateMode};

use std::time::{Duration, Instant};

use serde::Serialize;
use thiserror::Error;

use crate::bitpack::PackedBitPlane;
use crate::encoding::{encode_image_thermometer, EncodingError, RgbImage};
use crate::fixed::{Fx, Saturations};
use crate::kernels::{
    avgpool2d, batchnorm_apply, batchnorm_apply_fixed, binary_conv2d, bprelu, channel_duplicate,
    frac_conv2d, global_avgpool, linear_classifier, pooled_features, quantize2bit, shortcut_add,
    Affine, BpreluParams, ClassifierWeights, ConvWeights, FixedFeatureMap, KernelError,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("layer {layer}: {reason}")]
    Layer { layer: usize, reason: String },
    #[error("layer {layer}: {source}")]
    Kernel {
        layer: usize,
        #[source]
        source: KernelError,
    },
    #[error("image is {actual_w}x{actual_h}, network expects {expected_w}x{expected_h}")]
    ImageSize {
        expected_w: usize,
        expected_h: usize,
        actual_w: usize,
        actual_h: usize,
    },
    #[error(transparent)]
    Encoding(#[from] EncodingError),
}

/// Parameters of one output channel of a fractional block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ChannelParams {
    /// Update threshold on the base accumulator.
    pub delta: i32,
    /// Batch norm folded onto the raw convolution sum.
    pub bn: Affine,
    pub bprelu: BpreluParams,
    /// Batch norm after the shortcut add.
    pub out_bn: Affine,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerParams {
    Input {
        weights: ConvWeights,
        bn: Vec<Affine>,
    },
    Block {
        /// Quantizer scale per input channel.
        act_scale: Vec<Fx>,
        weights: ConvWeights,
        channels: Vec<ChannelParams>,
    },
    Pool,
    Classifier {
        weights: ClassifierWeights,
        bias: Vec<i32>,
    },
}

impl LayerParams {
    pub fn conv_weights(&self) -> Option<&ConvWeights> {
        match self {
            LayerParams::Input { weights, .. } | LayerParams::Block { weights, .. } => {
                Some(weights)
            }
            _ => None,
        }
    }

    fn check(&self, layer: usize, b: &BlockSpec) -> Result<(), ModelError> {
        let fail = |reason: String| Err(ModelError::Layer { layer, reason });
        let conv_ok = |w: &ConvWeights| {
            w.in_channels() == b.in_channels
                && w.out_channels() == b.out_channels
                && w.kernel() == b.kernel()
        };
        match (b.kind, self) {
            (LayerKind::InputLayer, LayerParams::Input { weights, bn }) => {
                if !conv_ok(weights) {
                    return fail("input weights do not match the layer shape".into());
                }
                if bn.len() != b.out_channels {
                    return fail(format!(
                        "{} batchnorm entries for {} channels",
                        bn.len(),
                        b.out_channels
                    ));
                }
            }
            (
                LayerKind::Conv3x3Block | LayerKind::Conv1x1Block,
                LayerParams::Block {
                    act_scale,
                    weights,
                    channels,
                },
            ) => {
                if !conv_ok(weights) {
                    return fail("block weights do not match the layer shape".into());
                }
                if act_scale.len() != b.in_channels {
                    return fail(format!(
                        "{} activation scales for {} inputs",
                        act_scale.len(),
                        b.in_channels
                    ));
                }
                if let Some(c) = act_scale.iter().position(|s| s.raw() <= 0) {
                    return fail(format!("activation scale {c} is not positive"));
                }
                if channels.len() != b.out_channels {
                    return fail(format!(
                        "{} channel records for {} channels",
                        channels.len(),
                        b.out_channels
                    ));
                }
            }
            (LayerKind::Pool, LayerParams::Pool) => {}
            (LayerKind::Classifier, LayerParams::Classifier { weights, bias }) => {
                if weights.features() != b.in_channels
                    || weights.classes() != b.out_channels
                    || bias.len() != b.out_channels
                {
                    return fail("classifier parameters do not match the layer shape".into());
                }
            }
            _ => return fail(format!("parameters do not belong to a {}", b.kind.name())),
        }
        Ok(())
    }
}

/// Validated network plus parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Model {
    spec: NetworkSpec,
    layers: Vec<LayerParams>,
}

/// Value flowing between layers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Activation {
    Bits(PackedBitPlane),
    Fixed(FixedFeatureMap),
    Pooled(Vec<Fx>),
    Logits(Vec<i32>),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerStats {
    pub layer: usize,
    pub kind: LayerKind,
    pub outputs: usize,
    /// Skipped-update fraction; only fractional layers have one.
    pub sparsity: Option<f64>,
    pub base_bmacs: u64,
    pub update_bmacs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunStats {
    pub layers: Vec<LayerStats>,
    /// Skipped updates over all fractional-layer outputs.
    pub mean_sparsity: f64,
    /// Average activation bits actually used by the fractional layers.
    pub effective_bitwidth: f64,
    pub base_bmacs: u64,
    pub update_bmacs: u64,
    pub saturations: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub logits: Vec<i32>,
    pub stats: RunStats,
}

impl Model {
    pub fn new(spec: NetworkSpec, layers: Vec<LayerParams>) -> Result<Self, ModelError> {
        spec.validate()?;
        if layers.len() != spec.blocks.len() {
            return Err(ModelError::Layer {
                layer: layers.len().min(spec.blocks.len()),
                reason: format!(
                    "{} parameter records for {} layers",
                    layers.len(),
                    spec.blocks.len()
                ),
            });
        }
        for (i, (p, b)) in layers.iter().zip(&spec.blocks).enumerate() {
            p.check(i, b)?;
        }
        Ok(Self { spec, layers })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    pub fn into_parts(self) -> (NetworkSpec, Vec<LayerParams>) {
        (self.spec, self.layers)
    }

    /// Overrides every update threshold.
    pub fn set_gates(&mut self, mode: GateMode) {
        let delta = match mode {
            GateMode::Open => i32::MIN,
            GateMode::Closed => i32::MAX,
            GateMode::Calibrated => return,
        };
        for layer in &mut self.layers {
            if let LayerParams::Block { channels, .. } = layer {
                channels.iter_mut().for_each(|c| c.delta = delta);
            }
        }
    }

    pub fn check_image(&self, img: &RgbImage) -> Result<(), ModelError> {
        let (w, h) = (self.spec.image_width, self.spec.image_height);
        if img.width() != w || img.height() != h {
            return Err(ModelError::ImageSize {
                expected_w: w,
                expected_h: h,
                actual_w: img.width(),
                actual_h: img.height(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, img: &RgbImage) -> Result<Inference, ModelError> {
        self.run(img, None)
    }

    /// Forward pass that also reports wall time per layer.
    pub fn forward_timed(&self, img: &RgbImage) -> Result<(Inference, Vec<Duration>), ModelError> {
        let mut times = Vec::with_capacity(self.layers.len());
        let out = self.run(img, Some(&mut times))?;
        Ok((out, times))
    }

    /// Output of every layer, in order.
    pub fn trace(&self, img: &RgbImage) -> Result<Vec<Activation>, ModelError> {
        let sat = Saturations::new();
        let mut act = self.encode(img)?;
        let mut outs = Vec::with_capacity(self.layers.len());
        for i in 0..self.layers.len() {
            act = self.run_layer(i, &act, &sat)?.0;
            outs.push(act.clone());
        }
        Ok(outs)
    }

    pub(crate) fn encode(&self, img: &RgbImage) -> Result<Activation, ModelError> {
        self.check_image(img)?;
        Ok(Activation::Bits(encode_image_thermometer(
            img,
            &self.spec.thermometer,
        )?))
    }

    fn run(
        &self,
        img: &RgbImage,
        mut times: Option<&mut Vec<Duration>>,
    ) -> Result<Inference, ModelError> {
        let sat = Saturations::new();
        let mut act = self.encode(img)?;
        let mut layers = Vec::with_capacity(self.layers.len());
        for i in 0..self.layers.len() {
            let start = Instant::now();
            let (next, st) = self.run_layer(i, &act, &sat)?;
            if let Some(t) = times.as_deref_mut() {
                t.push(start.elapsed());
            }
            act = next;
            layers.push(st);
        }
        let Activation::Logits(logits) = act else {
            unreachable!("validated networks end with the classifier")
        };
        Ok(Inference {
            logits,
            stats: summarize(layers, sat.count()),
        })
    }

    /// Runs layer `i` on `act`.
    pub(crate) fn run_layer(
        &self,
        i: usize,
        act: &Activation,
        sat: &Saturations,
    ) -> Result<(Activation, LayerStats), ModelError> {
        let b = &self.spec.blocks[i];
        let k = |source| ModelError::Kernel { layer: i, source };
        let wrong = || ModelError::Layer {
            layer: i,
            reason: "unexpected input activation".into(),
        };
        let mut st = LayerStats {
            layer: i,
            kind: b.kind,
            outputs: 0,
            sparsity: None,
            base_bmacs: 0,
            update_bmacs: 0,
        };
        let per_output = (b.in_channels * b.kernel() * b.kernel()) as u64;
        let next = match (&self.layers[i], act) {
            (LayerParams::Input { weights, bn }, Activation::Bits(x)) => {
                let geom = b.geometry().expect("conv layer");
                let conv = binary_conv2d(x, weights, &geom).map_err(k)?;
                st.outputs = conv.dims().len();
                st.base_bmacs = st.outputs as u64 * per_output;
                Activation::Fixed(batchnorm_apply(&conv, bn, sat).map_err(k)?)
            }
            (
                LayerParams::Block {
                    act_scale,
                    weights,
                    channels,
                },
                Activation::Fixed(x),
            ) => {
                let geom = b.geometry().expect("conv layer");
                let q = quantize2bit(x, act_scale).map_err(k)?;
                let delta: Vec<i32> = channels.iter().map(|c| c.delta).collect();
                let fc = frac_conv2d(&q, weights, &geom, &delta).map_err(k)?;
                st.outputs = fc.output.dims().len();
                st.sparsity = Some(fc.sparsity);
                st.base_bmacs = st.outputs as u64 * per_output;
                st.update_bmacs = fc.mask.open_count() as u64 * per_output;
                let bn: Vec<Affine> = channels.iter().map(|c| c.bn).collect();
                let act: Vec<BpreluParams> = channels.iter().map(|c| c.bprelu).collect();
                let out_bn: Vec<Affine> = channels.iter().map(|c| c.out_bn).collect();
                let mut y = batchnorm_apply(&fc.output, &bn, sat).map_err(k)?;
                y = bprelu(&y, &act, sat).map_err(k)?;
                if b.has_shortcut {
                    let shortcut = if b.downsample {
                        channel_duplicate(&avgpool2d(x, 2, 2).map_err(k)?)
                    } else {
                        x.clone()
                    };
                    y = shortcut_add(&y, &shortcut, sat).map_err(k)?;
                }
                Activation::Fixed(batchnorm_apply_fixed(&y, &out_bn, sat).map_err(k)?)
            }
            (LayerParams::Pool, Activation::Fixed(x)) => {
                st.outputs = x.dims().channels;
                Activation::Pooled(global_avgpool(x))
            }
            (LayerParams::Classifier { weights, bias }, Activation::Pooled(v)) => {
                st.outputs = weights.classes();
                let logits =
                    linear_classifier(&pooled_features(v), weights, bias, sat).map_err(k)?;
                Activation::Logits(logits)
            }
            _ => return Err(wrong()),
        };
        Ok((next, st))
    }
}

fn summarize(layers: Vec<LayerStats>, saturations: u64) -> RunStats {
    let (mut skipped, mut total) = (0.0, 0usize);
    for l in &layers {
        if let Some(s) = l.sparsity {
            skipped += s * l.outputs as f64;
            total += l.outputs;
        }
    }
    let mean_sparsity = if total == 0 {
        1.0
    } else {
        skipped / total as f64
    };
    RunStats {
        base_bmacs: layers.iter().map(|l| l.base_bmacs).sum(),
        update_bmacs: layers.iter().map(|l| l.update_bmacs).sum(),
        mean_sparsity,
        effective_bitwidth: 1.0 + (1.0 - mean_sparsity),
        saturations,
        layers,
    }
}
