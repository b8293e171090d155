//! Dense reference implementation.
//!
//! Every tensor is a plain `Vec<i64>` of bipolar or fixed-point values and
//! every loop is the textbook one. Bits are read straight from packed words,
//! pixels are thermometer-coded by counting, and rounding is done on exact
//! rationals in `i128`. Nothing here calls into [`crate::kernels`], so the
//! engine can be checked against it.

use std::time::{Duration, Instant};

use crate::bitpack::PackedBitPlane;
use crate::encoding::RgbImage;
use crate::model::{LayerParams, Model};

const FRAC: u32 = 16;
const FEATURE_SHIFT: u32 = 8;

/// Dense CHW tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DenseTensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<i64>,
}

impl DenseTensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0; channels * height * width],
        }
    }

    pub fn at(&self, c: usize, h: usize, w: usize) -> i64 {
        self.data[(c * self.height + h) * self.width + w]
    }

    pub fn set(&mut self, c: usize, h: usize, w: usize, v: i64) {
        self.data[(c * self.height + h) * self.width + w] = v;
    }

    fn map(&self, mut f: impl FnMut(usize, i64) -> i64) -> Self {
        let plane = self.height * self.width;
        Self {
            data: self
                .data
                .iter()
                .enumerate()
                .map(|(i, &v)| f(i / plane, v))
                .collect(),
            ..*self
        }
    }
}

/// Reads a packed plane bit by bit into a ±1 tensor.
pub fn unpack_plane(p: &PackedBitPlane) -> DenseTensor {
    let d = p.dims();
    let words = p.words();
    let per_pos = d.channels.div_ceil(64);
    let mut t = DenseTensor::zeros(d.channels, d.height, d.width);
    for h in 0..d.height {
        for w in 0..d.width {
            for c in 0..d.channels {
                let word = words[(h * d.width + w) * per_pos + c / 64];
                let bit = (word >> (c % 64)) & 1;
                t.set(c, h, w, if bit == 1 { 1 } else { -1 });
            }
        }
    }
    t
}

/// Thermometer code by counting: the vector for intensity `p` has
/// `round(p / R)` trailing +1 entries out of `ceil(255 / R)`.
pub fn thermometer(img: &RgbImage, resolution: u32) -> DenseTensor {
    let r = resolution as f64;
    let len = (255.0 / r).ceil() as usize;
    let mut t = DenseTensor::zeros(3 * len, img.height(), img.width());
    for y in 0..img.height() {
        for x in 0..img.width() {
            let px = img.pixel(y, x);
            for (color, &p) in px.iter().enumerate() {
                let ones = (p as f64 / r).round() as usize;
                for i in 0..len {
                    let v = if len - i <= ones { 1 } else { -1 };
                    t.set(color * len + i, y, x, v);
                }
            }
        }
    }
    t
}

/// Zero-padded cross-correlation; padded taps contribute nothing.
pub fn conv2d(x: &DenseTensor, kernels: &[DenseTensor], stride: usize, pad: usize) -> DenseTensor {
    let k = kernels[0].height;
    let oh = (x.height + 2 * pad - k) / stride + 1;
    let ow = (x.width + 2 * pad - k) / stride + 1;
    let mut out = DenseTensor::zeros(kernels.len(), oh, ow);
    for (o, kern) in kernels.iter().enumerate() {
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = 0i64;
                for c in 0..x.channels {
                    for ky in 0..k {
                        for kx in 0..k {
                            let y = (i * stride + ky) as isize - pad as isize;
                            let xx = (j * stride + kx) as isize - pad as isize;
                            if y < 0 || xx < 0 || y >= x.height as isize || xx >= x.width as isize {
                                continue;
                            }
                            acc += x.at(c, y as usize, xx as usize) * kern.at(c, ky, kx);
                        }
                    }
                }
                out.set(o, i, j, acc);
            }
        }
    }
    out
}

/// Exact `num / den` rounded to nearest, ties to even.
pub fn round_div(num: i128, den: i128) -> i128 {
    assert!(den > 0);
    let q = num.div_euclid(den);
    let r = num.rem_euclid(den);
    match (2 * r).cmp(&den) {
        std::cmp::Ordering::Greater => q + 1,
        std::cmp::Ordering::Equal => q + (q & 1),
        std::cmp::Ordering::Less => q,
    }
}

/// Clamps to `i32`, counting clamps.
fn clamp(v: i128, sat: &mut u64) -> i64 {
    if v > i32::MAX as i128 {
        *sat += 1;
        i32::MAX as i64
    } else if v < i32::MIN as i128 {
        *sat += 1;
        i32::MIN as i64
    } else {
        v as i64
    }
}

/// Nearest of `{-3, -1, 1, 3} * s` by explicit distance, ties upward.
pub fn quantize_level(x: i64, s: i64) -> i64 {
    let mut best = -3;
    for l in [-1, 1, 3] {
        let d_new = (x as i128 - l as i128 * s as i128).abs();
        let d_best = (x as i128 - best as i128 * s as i128).abs();
        if d_new <= d_best {
            best = l;
        }
    }
    best
}

/// Splits a level into bipolar `(msb, lsb)` with `q = 2 * msb + lsb`.
pub fn split_level(q: i64) -> (i64, i64) {
    let msb = if q > 0 { 1 } else { -1 };
    (msb, q - 2 * msb)
}

/// Fractional convolution computed as two full dense convolutions.
/// Returns the output and the number of opened gates.
pub fn frac_conv(
    msb: &DenseTensor,
    lsb: &DenseTensor,
    kernels: &[DenseTensor],
    stride: usize,
    pad: usize,
    delta: &[i64],
) -> (DenseTensor, usize) {
    let base = conv2d(msb, kernels, stride, pad);
    let fine = conv2d(lsb, kernels, stride, pad);
    let mut out = base.clone();
    let mut opened = 0;
    for (c, &threshold) in delta.iter().enumerate().take(base.channels) {
        for h in 0..base.height {
            for w in 0..base.width {
                let b = base.at(c, h, w);
                let open = b > threshold;
                opened += open as usize;
                out.set(c, h, w, 2 * b + if open { fine.at(c, h, w) } else { 0 });
            }
        }
    }
    (out, opened)
}

/// Result of a reference forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleRun {
    pub logits: Vec<i64>,
    /// Output of every layer; pooled and classifier outputs are `C x 1 x 1`.
    pub layers: Vec<DenseTensor>,
    /// Skipped-update fraction per layer, for fractional layers.
    pub sparsity: Vec<Option<f64>>,
    pub saturations: u64,
    pub layer_times: Vec<Duration>,
}

/// How fractional layers treat their input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activations {
    /// 2-bit quantization with per-channel gates.
    Fractional,
    /// Sign binarization followed by a doubled binary convolution.
    OneBit,
}

fn kernels_of(p: &LayerParams) -> Vec<DenseTensor> {
    p.conv_weights()
        .expect("conv layer")
        .planes()
        .iter()
        .map(unpack_plane)
        .collect()
}

pub fn forward(model: &Model, img: &RgbImage) -> OracleRun {
    forward_with(model, img, Activations::Fractional)
}

/// Reference forward pass over the model's parameters.
pub fn forward_with(model: &Model, img: &RgbImage, mode: Activations) -> OracleRun {
    let spec = model.spec();
    let one = 1i128 << FRAC;
    let mut sat = 0u64;
    let mut x = thermometer(img, spec.thermometer.resolution());
    let mut layers = Vec::new();
    let mut sparsity = Vec::new();
    let mut layer_times = Vec::new();
    for (b, p) in spec.blocks.iter().zip(model.layers()) {
        let start = Instant::now();
        let mut layer_sparsity = None;
        x = match p {
            LayerParams::Input { bn, .. } => {
                let conv = conv2d(&x, &kernels_of(p), b.stride, b.pad);
                conv.map(|c, v| {
                    clamp(
                        bn[c].scale.raw() as i128 * v as i128 + bn[c].bias.raw() as i128,
                        &mut sat,
                    )
                })
            }
            LayerParams::Block {
                act_scale,
                channels,
                ..
            } => {
                let kernels = kernels_of(p);
                let (conv, opened, outputs) = match mode {
                    Activations::Fractional => {
                        let q = x.map(|c, v| quantize_level(v, act_scale[c].raw() as i64));
                        let msb = q.map(|_, v| split_level(v).0);
                        let lsb = q.map(|_, v| split_level(v).1);
                        let delta: Vec<i64> = channels.iter().map(|c| c.delta as i64).collect();
                        let (out, opened) =
                            frac_conv(&msb, &lsb, &kernels, b.stride, b.pad, &delta);
                        let n = out.data.len();
                        (out, opened, n)
                    }
                    Activations::OneBit => {
                        let s = x.map(|_, v| if v >= 0 { 1 } else { -1 });
                        let out = conv2d(&s, &kernels, b.stride, b.pad).map(|_, v| 2 * v);
                        let n = out.data.len();
                        (out, 0, n)
                    }
                };
                layer_sparsity = Some(1.0 - opened as f64 / outputs as f64);
                let mut y = conv.map(|c, v| {
                    let bn = channels[c].bn;
                    clamp(
                        bn.scale.raw() as i128 * v as i128 + bn.bias.raw() as i128,
                        &mut sat,
                    )
                });
                y = y.map(|c, v| {
                    let a = channels[c].bprelu;
                    let z = v as i128 - a.alpha.raw() as i128;
                    let act = if z < 0 {
                        round_div(a.slope.raw() as i128 * z, one)
                    } else {
                        z
                    };
                    clamp(act + a.gamma.raw() as i128, &mut sat)
                });
                if b.has_shortcut {
                    let short = if b.downsample {
                        let mut s = DenseTensor::zeros(2 * x.channels, x.height / 2, x.width / 2);
                        for c in 0..2 * x.channels {
                            for h in 0..x.height / 2 {
                                for w in 0..x.width / 2 {
                                    let src = c % x.channels;
                                    let sum: i128 = (0..4)
                                        .map(|i| x.at(src, 2 * h + i / 2, 2 * w + i % 2) as i128)
                                        .sum();
                                    s.set(c, h, w, round_div(sum, 4) as i64);
                                }
                            }
                        }
                        s
                    } else {
                        x.clone()
                    };
                    for (v, s) in y.data.iter_mut().zip(&short.data) {
                        *v = clamp(*v as i128 + *s as i128, &mut sat);
                    }
                }
                y.map(|c, v| {
                    let bn = channels[c].out_bn;
                    let prod = round_div(bn.scale.raw() as i128 * v as i128, one);
                    clamp(prod + bn.bias.raw() as i128, &mut sat)
                })
            }
            LayerParams::Pool => {
                let mut out = DenseTensor::zeros(x.channels, 1, 1);
                let n = (x.height * x.width) as i128;
                for c in 0..x.channels {
                    let mut sum = 0i128;
                    for h in 0..x.height {
                        for w in 0..x.width {
                            sum += x.at(c, h, w) as i128;
                        }
                    }
                    out.set(c, 0, 0, round_div(sum, n) as i64);
                }
                out
            }
            LayerParams::Classifier { weights, bias } => {
                let features: Vec<i128> = x
                    .data
                    .iter()
                    .map(|&v| round_div(v as i128, 1 << (FRAC - FEATURE_SHIFT)))
                    .collect();
                let mut out = DenseTensor::zeros(weights.classes(), 1, 1);
                for (j, &b) in bias.iter().enumerate().take(weights.classes()) {
                    let mut acc = b as i128;
                    for (i, f) in features.iter().enumerate() {
                        acc += weights.weights()[j * weights.features() + i] as i128 * f;
                    }
                    out.set(j, 0, 0, clamp(acc, &mut sat));
                }
                out
            }
        };
        layer_times.push(start.elapsed());
        sparsity.push(layer_sparsity);
        layers.push(x.clone());
    }
    OracleRun {
        logits: x.data,
        layers,
        sparsity,
        saturations: sat,
        layer_times,
    }
}
