use serde::Serialize;

use super::ModelError;
use crate::bitpack::Dims;
use crate::encoding::ThermometerConfig;
use crate::kernels::ConvGeometry;

/// Topology tag stored in model files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    /// Any layer list that passes validation.
    Generic,
    /// The CIFAR ResNet-20 layout produced by [`build_fracbnn_resnet20`].
    FracbnnResnet20,
}

impl Topology {
    pub fn tag(self) -> u16 {
        match self {
            Topology::Generic => 0,
            Topology::FracbnnResnet20 => 1,
        }
    }

    pub fn from_tag(tag: u16) -> Option<Self> {
        match tag {
            0 => Some(Topology::Generic),
            1 => Some(Topology::FracbnnResnet20),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    /// Binary 3x3 convolution over the thermometer planes, then batch norm.
    InputLayer,
    /// 2-bit quantize, fractional conv, BN, BPReLU, shortcut, BN.
    Conv3x3Block,
    Conv1x1Block,
    /// Global average pool.
    Pool,
    Classifier,
}

impl LayerKind {
    pub fn code(self) -> u8 {
        match self {
            LayerKind::InputLayer => 0,
            LayerKind::Conv3x3Block => 1,
            LayerKind::Conv1x1Block => 2,
            LayerKind::Pool => 3,
            LayerKind::Classifier => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => LayerKind::InputLayer,
            1 => LayerKind::Conv3x3Block,
            2 => LayerKind::Conv1x1Block,
            3 => LayerKind::Pool,
            4 => LayerKind::Classifier,
            _ => return None,
        })
    }

    pub fn is_fractional(self) -> bool {
        matches!(self, LayerKind::Conv3x3Block | LayerKind::Conv1x1Block)
    }

    pub fn is_conv(self) -> bool {
        self.is_fractional() || self == LayerKind::InputLayer
    }

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::InputLayer => "input_layer",
            LayerKind::Conv3x3Block => "conv3x3_block",
            LayerKind::Conv1x1Block => "conv1x1_block",
            LayerKind::Pool => "pool",
            LayerKind::Classifier => "classifier",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BlockSpec {
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_height: usize,
    pub in_width: usize,
    pub stride: usize,
    pub pad: usize,
    pub has_shortcut: bool,
    /// Shortcut goes through 2x2 average pooling and channel duplication.
    pub downsample: bool,
}

impl BlockSpec {
    pub fn kernel(&self) -> usize {
        match self.kind {
            LayerKind::InputLayer | LayerKind::Conv3x3Block => 3,
            LayerKind::Conv1x1Block => 1,
            LayerKind::Pool | LayerKind::Classifier => 0,
        }
    }

    pub fn geometry(&self) -> Option<ConvGeometry> {
        self.kind.is_conv().then_some(ConvGeometry {
            kernel: self.kernel(),
            stride: self.stride,
            pad: self.pad,
        })
    }

    pub fn input_dims(&self) -> Dims {
        Dims::new(self.in_channels, self.in_height, self.in_width)
    }

    /// Output shape; pooled and classifier outputs are `C x 1 x 1`.
    pub fn output_dims(&self) -> Option<Dims> {
        match self.geometry() {
            Some(g) => g.output_dims(self.input_dims(), self.out_channels).ok(),
            None => Some(Dims::new(self.out_channels, 1, 1)),
        }
    }

    /// Binary weights held by this layer.
    pub fn binary_weights(&self) -> u64 {
        if self.kind.is_conv() {
            (self.out_channels * self.in_channels * self.kernel() * self.kernel()) as u64
        } else {
            0
        }
    }

    /// Binary MACs of one full convolution pass (padded taps included).
    pub fn conv_bmacs(&self) -> u64 {
        match self.output_dims() {
            Some(out) if self.kind.is_conv() => {
                out.len() as u64 * (self.in_channels * self.kernel() * self.kernel()) as u64
            }
            _ => 0,
        }
    }

    fn check(&self, layer: usize) -> Result<Dims, ModelError> {
        let fail = |reason: String| Err(ModelError::Layer { layer, reason });
        if self.in_channels == 0 || self.out_channels == 0 {
            return fail("zero channels".into());
        }
        if self.in_height == 0 || self.in_width == 0 {
            return fail("empty spatial extent".into());
        }
        let Some(out) = self.output_dims() else {
            return fail(format!(
                "{}x{} kernel does not fit input {}",
                self.kernel(),
                self.kernel(),
                self.input_dims()
            ));
        };
        if let Some(g) = self.geometry() {
            if let Err(e) = g.validate() {
                return fail(e.to_string());
            }
        } else if self.stride != 1 || self.pad != 0 || self.has_shortcut || self.downsample {
            return fail("pool and classifier take no stride, padding or shortcut".into());
        }
        match self.kind {
            LayerKind::InputLayer if self.has_shortcut => {
                return fail("input layer cannot have a shortcut".into())
            }
            LayerKind::Pool if self.out_channels != self.in_channels => {
                return fail("pool must keep the channel count".into())
            }
            LayerKind::Classifier if self.in_height != 1 || self.in_width != 1 => {
                return fail("classifier needs a pooled 1x1 input".into())
            }
            _ => {}
        }
        if self.downsample {
            if !self.has_shortcut || self.stride != 2 || self.out_channels != 2 * self.in_channels {
                return fail("downsample needs a shortcut, stride 2 and doubled channels".into());
            }
            if !self.in_height.is_multiple_of(2) || !self.in_width.is_multiple_of(2) {
                return fail("downsample shortcut needs even spatial dims".into());
            }
            if (out.height, out.width) != (self.in_height / 2, self.in_width / 2) {
                return fail("residual and pooled shortcut shapes differ".into());
            }
        } else if self.has_shortcut && out != self.input_dims() {
            return fail(format!("shortcut {} vs residual {out}", self.input_dims()));
        }
        Ok(out)
    }
}

/// Ordered layer list plus input configuration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    pub topology: Topology,
    pub thermometer: ThermometerConfig,
    pub image_height: usize,
    pub image_width: usize,
    pub classes: usize,
    pub blocks: Vec<BlockSpec>,
}

impl NetworkSpec {
    /// Checks that shapes compose and the graph starts with the input layer and
    /// ends with the classifier.
    pub fn validate(&self) -> Result<(), ModelError> {
        let n = self.blocks.len();
        let first = self.blocks.first().ok_or(ModelError::Layer {
            layer: 0,
            reason: "network has no layers".into(),
        })?;
        if first.kind != LayerKind::InputLayer {
            return Err(ModelError::Layer {
                layer: 0,
                reason: "first layer must be the input layer".into(),
            });
        }
        let expected_in = Dims::new(
            self.thermometer.image_channels(),
            self.image_height,
            self.image_width,
        );
        if first.input_dims() != expected_in {
            return Err(ModelError::Layer {
                layer: 0,
                reason: format!(
                    "input layer takes {}, thermometer image is {expected_in}",
                    first.input_dims()
                ),
            });
        }
        let mut prev: Option<Dims> = None;
        for (layer, b) in self.blocks.iter().enumerate() {
            let is_last = layer + 1 == n;
            if (b.kind == LayerKind::InputLayer) != (layer == 0)
                || (b.kind == LayerKind::Classifier) != is_last
            {
                return Err(ModelError::Layer {
                    layer,
                    reason: format!(
                        "{} not allowed here; the input layer must be first and the classifier last, once each",
                        b.kind.name()
                    ),
                });
            }
            if let Some(p) = prev {
                if p != b.input_dims() {
                    return Err(ModelError::Layer {
                        layer,
                        reason: format!("expects {}, previous layer yields {p}", b.input_dims()),
                    });
                }
            }
            prev = Some(b.check(layer)?);
        }
        let last = &self.blocks[n - 1];
        if last.out_channels != self.classes {
            return Err(ModelError::Layer {
                layer: n - 1,
                reason: format!(
                    "classifier has {} outputs, network declares {} classes",
                    last.out_channels, self.classes
                ),
            });
        }
        Ok(())
    }

    /// Shape after every layer, starting with the encoded input.
    pub fn shape_trace(&self) -> Vec<Dims> {
        let mut trace = Vec::with_capacity(self.blocks.len() + 1);
        if let Some(first) = self.blocks.first() {
            trace.push(first.input_dims());
        }
        trace.extend(self.blocks.iter().filter_map(BlockSpec::output_dims));
        trace
    }
}

fn conv_block(cin: usize, cout: usize, size: usize, downsample: bool) -> BlockSpec {
    BlockSpec {
        kind: LayerKind::Conv3x3Block,
        in_channels: cin,
        out_channels: cout,
        in_height: size,
        in_width: size,
        stride: if downsample { 2 } else { 1 },
        pad: 1,
        has_shortcut: true,
        downsample,
    }
}

/// CIFAR ResNet-20 with fractional convolutions.
///
/// Three stages of three residual blocks at 16, 32 and 64 channels on 32x32
/// inputs. Every residual block holds two 3x3 units, each with its own
/// shortcut; the first unit of stages two and three downsamples.
pub fn build_fracbnn_resnet20(thermometer: ThermometerConfig, classes: usize) -> NetworkSpec {
    const SIZE: usize = 32;
    const WIDTHS: [usize; 3] = [16, 32, 64];
    let mut blocks = vec![BlockSpec {
        kind: LayerKind::InputLayer,
        in_channels: thermometer.image_channels(),
        out_channels: WIDTHS[0],
        in_height: SIZE,
        in_width: SIZE,
        stride: 1,
        pad: 1,
        has_shortcut: false,
        downsample: false,
    }];
    let mut size = SIZE;
    let mut channels = WIDTHS[0];
    for (stage, &width) in WIDTHS.iter().enumerate() {
        for unit in 0..6 {
            let downsample = stage > 0 && unit == 0;
            blocks.push(conv_block(channels, width, size, downsample));
            if downsample {
                size /= 2;
            }
            channels = width;
        }
    }
    blocks.push(BlockSpec {
        kind: LayerKind::Pool,
        in_channels: channels,
        out_channels: channels,
        in_height: size,
        in_width: size,
        stride: 1,
        pad: 0,
        has_shortcut: false,
        downsample: false,
    });
    blocks.push(BlockSpec {
        kind: LayerKind::Classifier,
        in_channels: channels,
        out_channels: classes,
        in_height: 1,
        in_width: 1,
        stride: 1,
        pad: 0,
        has_shortcut: false,
        downsample: false,
    });
    NetworkSpec {
        topology: Topology::FracbnnResnet20,
        thermometer,
        image_height: SIZE,
        image_width: SIZE,
        classes,
        blocks,
    }
}

/// Static parameter and operation counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct OpCounts {
    /// Binary convolution weights (input layer and blocks), one bit each.
    pub binary_weight_params: u64,
    /// Q16.16 channelwise parameters plus thresholds.
    pub channel_params: u64,
    pub classifier_params: u64,
    /// Total model size in bits.
    pub model_bits: u64,
    /// Input-layer BMACs; that layer only ever runs a base phase.
    pub bmacs_input: u64,
    /// Base-phase BMACs of the fractional layers alone.
    pub bmacs_frac_base: u64,
    /// Every base-phase BMAC: input layer plus fractional layers.
    pub bmacs_base: u64,
    /// Update-phase BMACs if no gate ever closes.
    pub bmacs_update_max: u64,
    pub imacs: u64,
}

impl OpCounts {
    /// Expected BMACs when a fraction `sparsity` of updates is skipped.
    pub fn bmacs_total(&self, sparsity: f64) -> f64 {
        self.bmacs_base as f64 + (1.0 - sparsity) * self.bmacs_update_max as f64
    }
}

pub fn count_ops(net: &NetworkSpec) -> OpCounts {
    let mut c = OpCounts {
        binary_weight_params: 0,
        channel_params: 0,
        classifier_params: 0,
        model_bits: 0,
        bmacs_input: 0,
        bmacs_frac_base: 0,
        bmacs_base: 0,
        bmacs_update_max: 0,
        imacs: 0,
    };
    for b in &net.blocks {
        c.binary_weight_params += b.binary_weights();
        match b.kind {
            LayerKind::InputLayer => {
                c.bmacs_input += b.conv_bmacs();
                // bn scale and bias
                c.channel_params += 2 * b.out_channels as u64;
            }
            LayerKind::Conv3x3Block | LayerKind::Conv1x1Block => {
                c.bmacs_frac_base += b.conv_bmacs();
                c.bmacs_update_max += b.conv_bmacs();
                // threshold, two affines, BPReLU triple, plus per-input scales
                c.channel_params += 8 * b.out_channels as u64 + b.in_channels as u64;
            }
            LayerKind::Pool => {}
            LayerKind::Classifier => {
                let macs = (b.in_channels * b.out_channels) as u64;
                c.imacs += macs;
                c.classifier_params += macs + b.out_channels as u64;
            }
        }
    }
    c.bmacs_base = c.bmacs_input + c.bmacs_frac_base;
    let bias_count = net.blocks.last().map_or(0, |b| b.out_channels as u64);
    c.model_bits = c.binary_weight_params
        + 32 * c.channel_params
        + 8 * (c.classifier_params - bias_count)
        + 32 * bias_count;
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resnet() -> NetworkSpec {
        build_fracbnn_resnet20(ThermometerConfig::default(), 10)
    }

    #[test]
    fn resnet20_shape_trace() {
        let net = resnet();
        net.validate().unwrap();
        let trace = net.shape_trace();
        assert_eq!(trace.first(), Some(&Dims::new(96, 32, 32)));
        assert_eq!(trace[1], Dims::new(16, 32, 32));
        assert!(trace.contains(&Dims::new(32, 16, 16)));
        assert!(trace.contains(&Dims::new(64, 8, 8)));
        assert_eq!(trace[trace.len() - 2], Dims::new(64, 1, 1));
        assert_eq!(trace.last(), Some(&Dims::new(10, 1, 1)));
        let frac = net.blocks.iter().filter(|b| b.kind.is_fractional()).count();
        assert_eq!(frac, 18);
    }

    #[test]
    fn resnet20_counts_by_hand() {
        let ops = count_ops(&resnet());
        // input layer: 96 * 16 * 9
        let input_w = 96 * 16 * 9;
        // stage 1: 6 * 16*16*9; stage 2: 16*32*9 + 5*32*32*9; stage 3: 32*64*9 + 5*64*64*9
        let block_w =
            6 * 16 * 16 * 9 + (16 * 32 * 9 + 5 * 32 * 32 * 9) + (32 * 64 * 9 + 5 * 64 * 64 * 9);
        assert_eq!(ops.binary_weight_params, (input_w + block_w) as u64);
        assert_eq!(ops.bmacs_input, (input_w * 32 * 32) as u64);
        let frac = 6 * 16 * 16 * 9 * 32 * 32
            + (16 * 32 * 9 + 5 * 32 * 32 * 9) * 16 * 16
            + (32 * 64 * 9 + 5 * 64 * 64 * 9) * 8 * 8;
        assert_eq!(ops.bmacs_frac_base, frac as u64);
        assert_eq!(ops.bmacs_update_max, frac as u64);
        assert_eq!(ops.imacs, 640);
        assert_eq!(ops.bmacs_total(1.0), ops.bmacs_base as f64);
    }

    #[test]
    fn validate_names_first_bad_layer() {
        let mut net = resnet();
        net.blocks[5].in_channels = 17;
        match net.validate() {
            Err(ModelError::Layer { layer, .. }) => assert_eq!(layer, 5),
            other => panic!("{other:?}"),
        }
        let mut net = resnet();
        net.blocks.swap(0, 1);
        assert!(matches!(
            net.validate(),
            Err(ModelError::Layer { layer: 0, .. })
        ));
        let mut net = resnet();
        net.classes = 11;
        assert!(net.validate().is_err());
    }

    #[test]
    fn downsample_rules() {
        let mut b = conv_block(16, 32, 32, true);
        assert!(b.check(0).is_ok());
        b.out_channels = 48;
        assert!(b.check(0).is_err());
        let mut b = conv_block(16, 16, 8, false);
        b.stride = 2;
        assert!(b.check(0).is_err());
    }

    #[test]
    fn tags_round_trip() {
        for k in [
            LayerKind::InputLayer,
            LayerKind::Conv3x3Block,
            LayerKind::Conv1x1Block,
            LayerKind::Pool,
            LayerKind::Classifier,
        ] {
            assert_eq!(LayerKind::from_code(k.code()), Some(k));
        }
        assert_eq!(LayerKind::from_code(9), None);
        assert_eq!(Topology::from_tag(1), Some(Topology::FracbnnResnet20));
        assert_eq!(Topology::from_tag(7), None);
    }
}
