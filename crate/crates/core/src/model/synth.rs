use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Activation, ChannelParams, LayerKind, LayerParams, Model, ModelError, NetworkSpec};
use crate::bitpack::{Dims, PackedBitPlane};
use crate::encoding::RgbImage;
use crate::fixed::{Fx, Saturations};
use crate::kernels::{
    binary_conv2d, quantize2bit, Affine, BpreluParams, ClassifierWeights, ConvWeights,
};

/// Images drawn to calibrate the update thresholds.
const CALIBRATION_IMAGES: usize = 2;

/// How update thresholds are set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GateMode {
    /// Per-channel median of the base accumulator on calibration images.
    Calibrated,
    /// Every update runs.
    Open,
    /// No update runs.
    Closed,
}

impl std::str::FromStr for GateMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "calibrated" => Ok(GateMode::Calibrated),
            "open" => Ok(GateMode::Open),
            "closed" => Ok(GateMode::Closed),
            _ => Err(format!(
                "unknown gate mode {s:?}; use calibrated, open or closed"
            )),
        }
    }
}

fn fx(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Fx {
    Fx::from_f64(rng.random_range(lo..hi))
}

fn random_weights(rng: &mut ChaCha8Rng, cin: usize, cout: usize, k: usize) -> ConvWeights {
    let planes = (0..cout)
        .map(|_| PackedBitPlane::from_fn(Dims::new(cin, k, k), |_, _, _| rng.random::<bool>()))
        .collect();
    ConvWeights::new(cin, k, planes).expect("generated kernels have the declared shape")
}

/// Seeded random parameters for `spec` with thresholds calibrated to skip
/// roughly half of all updates on random images.
///
/// Only uniform draws and correctly rounded arithmetic are used, so a seed
/// yields the same model on every platform.
pub fn generate_synthetic(seed: u64, spec: &NetworkSpec) -> Result<Model, ModelError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(spec.blocks.len());
    for b in &spec.blocks {
        let fan_in = (b.in_channels * b.kernel() * b.kernel()) as f64;
        let p = match b.kind {
            LayerKind::InputLayer => {
                let weights = random_weights(&mut rng, b.in_channels, b.out_channels, b.kernel());
                let bn = (0..b.out_channels)
                    .map(|_| Affine {
                        scale: Fx::from_f64(rng.random_range(0.5..1.5) / fan_in.sqrt()),
                        bias: fx(&mut rng, -0.5, 0.5),
                    })
                    .collect();
                LayerParams::Input { weights, bn }
            }
            LayerKind::Conv3x3Block | LayerKind::Conv1x1Block => {
                let act_scale = (0..b.in_channels)
                    .map(|_| fx(&mut rng, 0.35, 0.65))
                    .collect();
                let weights = random_weights(&mut rng, b.in_channels, b.out_channels, b.kernel());
                let norm = 1.0 / (4.5 * fan_in).sqrt();
                let channels = (0..b.out_channels)
                    .map(|_| ChannelParams {
                        delta: i32::MAX,
                        bn: Affine {
                            scale: Fx::from_f64(rng.random_range(0.5..1.5) * norm),
                            bias: fx(&mut rng, -0.3, 0.3),
                        },
                        bprelu: BpreluParams {
                            alpha: fx(&mut rng, -0.25, 0.25),
                            slope: fx(&mut rng, 0.0, 0.5),
                            gamma: fx(&mut rng, -0.25, 0.25),
                        },
                        out_bn: Affine {
                            scale: fx(&mut rng, 0.5, 0.9),
                            bias: fx(&mut rng, -0.2, 0.2),
                        },
                    })
                    .collect();
                LayerParams::Block {
                    act_scale,
                    weights,
                    channels,
                }
            }
            LayerKind::Pool => LayerParams::Pool,
            LayerKind::Classifier => {
                let w = (0..b.in_channels * b.out_channels)
                    .map(|_| rng.random_range(-127i8..=127))
                    .collect();
                LayerParams::Classifier {
                    weights: ClassifierWeights::new(b.out_channels, b.in_channels, w)
                        .expect("generated classifier has the declared shape"),
                    bias: (0..b.out_channels)
                        .map(|_| rng.random_range(-512..=512))
                        .collect(),
                }
            }
        };
        layers.push(p);
    }
    let mut model = Model::new(spec.clone(), layers)?;
    let images: Vec<RgbImage> = (0..CALIBRATION_IMAGES)
        .map(|_| RgbImage::random(spec.image_width, spec.image_height, &mut rng))
        .collect();
    calibrate(&mut model, &images)?;
    Ok(model)
}

/// Sets each block threshold to the per-channel median base value, layer by
/// layer, so later layers calibrate on already gated inputs.
fn calibrate(model: &mut Model, images: &[RgbImage]) -> Result<(), ModelError> {
    let sat = Saturations::new();
    let mut acts = images
        .iter()
        .map(|img| model.encode(img))
        .collect::<Result<Vec<_>, _>>()?;
    for i in 0..model.layers.len() {
        let b = model.spec.blocks[i];
        if let LayerParams::Block {
            act_scale, weights, ..
        } = &model.layers[i]
        {
            let geom = b.geometry().expect("conv layer");
            let mut per_channel: Vec<Vec<i32>> = vec![Vec::new(); b.out_channels];
            for act in &acts {
                let Activation::Fixed(x) = act else {
                    unreachable!("blocks take fixed-point maps")
                };
                let k = |source| ModelError::Kernel { layer: i, source };
                let q = quantize2bit(x, act_scale).map_err(k)?;
                let base = binary_conv2d(q.msb(), weights, &geom).map_err(k)?;
                for (c, values) in per_channel.iter_mut().enumerate() {
                    values.extend_from_slice(base.channel(c));
                }
            }
            let medians: Vec<i32> = per_channel
                .into_iter()
                .map(|mut v| {
                    v.sort_unstable();
                    v[v.len() / 2]
                })
                .collect();
            if let LayerParams::Block { channels, .. } = &mut model.layers[i] {
                for (ch, m) in channels.iter_mut().zip(medians) {
                    ch.delta = m;
                }
            }
        }
        acts = acts
            .iter()
            .map(|a| model.run_layer(i, a, &sat).map(|(next, _)| next))
            .collect::<Result<_, _>>()?;
    }
    Ok(())
}
