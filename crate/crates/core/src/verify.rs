//! Engine-versus-oracle equivalence suite on seeded random instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bitpack::{Dims, PackedBitPlane};
use crate::encoding::{RgbImage, ThermometerConfig};
use crate::fixed::{Fx, Saturations};
use crate::kernels::{
    avgpool2d, batchnorm_apply, batchnorm_apply_fixed, binary_conv2d, bprelu, frac_conv2d,
    global_avgpool, linear_classifier, quantize2bit, Affine, BpreluParams, ClassifierWeights,
    ConvGeometry, ConvWeights, FixedFeatureMap, FracActivation, IntFeatureMap,
};
use crate::model::{
    generate_synthetic, Activation, BlockSpec, GateMode, LayerKind, LayerParams, Model,
    NetworkSpec, Topology,
};
use crate::oracle::{self, DenseTensor};

/// Channel counts every kernel check cycles through.
pub const CHANNEL_SET: [usize; 6] = [1, 63, 64, 65, 96, 128];

/// One equivalence check accumulated over all cases.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub cases: usize,
    pub failures: usize,
    /// Largest elementwise difference seen, in output units.
    pub max_ulp: u64,
    pub tolerance_ulp: u64,
    pub first_failure: Option<String>,
}

impl CheckResult {
    fn new(name: &'static str, tolerance_ulp: u64) -> Self {
        Self {
            name,
            cases: 0,
            failures: 0,
            max_ulp: 0,
            tolerance_ulp,
            first_failure: None,
        }
    }

    pub fn passed(&self) -> bool {
        self.failures == 0
    }

    /// Records one case comparing `engine` against `reference`.
    fn record(&mut self, engine: &[i64], reference: &[i64], context: impl FnOnce() -> String) {
        self.cases += 1;
        let diff = if engine.len() == reference.len() {
            engine
                .iter()
                .zip(reference)
                .map(|(a, b)| a.abs_diff(*b))
                .max()
                .unwrap_or(0)
        } else {
            u64::MAX
        };
        self.max_ulp = self.max_ulp.max(diff);
        if diff > self.tolerance_ulp {
            self.failures += 1;
            if self.first_failure.is_none() {
                self.first_failure = Some(format!("{} (difference {diff})", context()));
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub cases: usize,
    pub fault_injected: bool,
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }
}

/// Options for [`run_suite`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Random instances per kernel check.
    pub cases: usize,
    /// End-to-end models; each runs on `images_per_model` images.
    pub models: usize,
    pub images_per_model: usize,
    /// Corrupts engine results so the suite must fail.
    pub inject_fault: bool,
}

impl VerifyOptions {
    pub fn new(seed: u64, cases: usize) -> Self {
        Self {
            seed,
            cases,
            models: cases.div_ceil(5),
            images_per_model: 2,
            inject_fault: false,
        }
    }
}

fn fixed_to_i64(v: &[Fx]) -> Vec<i64> {
    v.iter().map(|x| x.raw() as i64).collect()
}

fn ints_to_i64(v: &[i32]) -> Vec<i64> {
    v.iter().map(|&x| x as i64).collect()
}

fn random_plane(rng: &mut ChaCha8Rng, dims: Dims) -> PackedBitPlane {
    PackedBitPlane::from_fn(dims, |_, _, _| rng.random::<bool>())
}

fn random_fx(rng: &mut ChaCha8Rng, bound: f64) -> Fx {
    Fx::from_f64(rng.random_range(-bound..bound))
}

fn random_fixed_map(rng: &mut ChaCha8Rng, dims: Dims, bound: f64) -> FixedFeatureMap {
    let values = (0..dims.len()).map(|_| random_fx(rng, bound)).collect();
    FixedFeatureMap::new(dims, values).expect("length matches dims")
}

/// Shape of one kernel case; channel count, kernel and stride cycle so every
/// combination is covered every 24 cases.
struct ConvCase {
    dims: Dims,
    out_channels: usize,
    geom: ConvGeometry,
}

fn conv_case(rng: &mut ChaCha8Rng, i: usize) -> ConvCase {
    let channels = CHANNEL_SET[i % CHANNEL_SET.len()];
    let kernel = [1, 3][(i / CHANNEL_SET.len()) % 2];
    let stride = [1, 2][(i / (2 * CHANNEL_SET.len())) % 2];
    let pad = if kernel == 3 {
        rng.random_range(0..=1)
    } else {
        0
    };
    let min = if pad == 0 { kernel } else { 1 };
    let height = rng.random_range(min..=7);
    let width = rng.random_range(min..=7);
    ConvCase {
        dims: Dims::new(channels, height, width),
        out_channels: rng.random_range(1..=4),
        geom: ConvGeometry::new(kernel, stride, pad).expect("valid geometry"),
    }
}

fn dense_kernels(w: &ConvWeights) -> Vec<DenseTensor> {
    w.planes().iter().map(oracle::unpack_plane).collect()
}

/// Shifts the first value by more than any check's tolerance.
fn perturb(values: &mut [i64], inject: bool) {
    if inject {
        if let Some(v) = values.first_mut() {
            *v += 2;
        }
    }
}

/// Runs every check and returns the report; never panics on mismatch.
pub fn run_suite(opts: VerifyOptions) -> VerifyReport {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let fault = opts.inject_fault;
    let mut conv = CheckResult::new("binary_conv2d", 0);
    let mut frac = CheckResult::new("frac_conv2d", 0);
    let mut frac_gates = CheckResult::new("frac_conv2d_gates", 0);
    let mut quant = CheckResult::new("quantize2bit", 0);
    let mut bn_int = CheckResult::new("batchnorm_apply", 1);
    let mut bn_fixed = CheckResult::new("batchnorm_apply_fixed", 1);
    let mut act = CheckResult::new("bprelu", 1);
    let mut pool = CheckResult::new("avgpool2d", 1);
    let mut gpool = CheckResult::new("global_avgpool", 1);
    let mut linear = CheckResult::new("linear_classifier", 0);
    let sat = Saturations::new();

    for i in 0..opts.cases {
        let case = conv_case(&mut rng, i);
        let (d, geom) = (case.dims, case.geom);
        let k = geom.kernel;
        let planes = (0..case.out_channels)
            .map(|_| random_plane(&mut rng, Dims::new(d.channels, k, k)))
            .collect();
        let w = ConvWeights::new(d.channels, k, planes).expect("shapes agree");
        let kernels = dense_kernels(&w);
        let ctx = || {
            format!(
                "case {i}: input {d}, {k}x{k} stride {} pad {}",
                geom.stride, geom.pad
            )
        };

        // Binary convolution.
        let x = random_plane(&mut rng, d);
        let mut got = ints_to_i64(binary_conv2d(&x, &w, &geom).expect("valid case").values());
        perturb(&mut got, fault);
        let want = oracle::conv2d(&oracle::unpack_plane(&x), &kernels, geom.stride, geom.pad);
        conv.record(&got, &want.data, ctx);

        // Quantizer on a random fixed map.
        let fm = random_fixed_map(&mut rng, d, 4.0);
        let scales: Vec<Fx> = (0..d.channels)
            .map(|_| Fx::from_f64(rng.random_range(0.05..2.0)))
            .collect();
        let q = quantize2bit(&fm, &scales).expect("positive scales");
        let mut got: Vec<i64> = (0..d.len())
            .map(|j| {
                let c = j / d.spatial();
                let r = j % d.spatial();
                q.level(c, r / d.width, r % d.width) as i64
            })
            .collect();
        perturb(&mut got, fault);
        let want: Vec<i64> = fm
            .values()
            .iter()
            .enumerate()
            .map(|(j, v)| {
                oracle::quantize_level(v.raw() as i64, scales[j / d.spatial()].raw() as i64)
            })
            .collect();
        quant.record(&got, &want, ctx);

        // Fractional convolution with random, open and closed thresholds.
        let act_in = FracActivation::new(random_plane(&mut rng, d), random_plane(&mut rng, d))
            .expect("same dims");
        let msb = oracle::unpack_plane(act_in.msb());
        let lsb = oracle::unpack_plane(act_in.lsb());
        let span = (d.channels * k * k) as i32;
        let delta: Vec<i32> = (0..case.out_channels)
            .map(|_| match rng.random_range(0..8) {
                0 => i32::MIN,
                1 => i32::MAX,
                _ => rng.random_range(-span..=span),
            })
            .collect();
        let out = frac_conv2d(&act_in, &w, &geom, &delta).expect("valid case");
        let mut got = ints_to_i64(out.output.values());
        perturb(&mut got, fault);
        let wide: Vec<i64> = delta.iter().map(|&v| v as i64).collect();
        let (want, opened) = oracle::frac_conv(&msb, &lsb, &kernels, geom.stride, geom.pad, &wide);
        frac.record(&got, &want.data, ctx);
        let want_sparsity = 1.0 - opened as f64 / want.data.len() as f64;
        let mut got_gates = [
            out.mask.open_count() as i64,
            (out.sparsity * 1e9).round() as i64,
        ];
        perturb(&mut got_gates, fault);
        let want_gates = [opened as i64, (want_sparsity * 1e9).round() as i64];
        frac_gates.record(&got_gates, &want_gates, ctx);

        // Batch norm on integer sums, then fixed-point batch norm and BPReLU.
        let ints = IntFeatureMap::new(
            d,
            (0..d.len())
                .map(|_| rng.random_range(-1200..=1200))
                .collect(),
        )
        .expect("length matches dims");
        let bn: Vec<Affine> = (0..d.channels)
            .map(|_| Affine {
                scale: random_fx(&mut rng, 2.0),
                bias: random_fx(&mut rng, 8.0),
            })
            .collect();
        let mut got = fixed_to_i64(batchnorm_apply(&ints, &bn, &sat).expect("lengths").values());
        perturb(&mut got, fault);
        let want: Vec<i64> = ints
            .values()
            .iter()
            .enumerate()
            .map(|(j, &v)| {
                let p = bn[j / d.spatial()];
                p.scale.raw() as i64 * v as i64 + p.bias.raw() as i64
            })
            .collect();
        bn_int.record(&got, &want, ctx);

        let fm = random_fixed_map(&mut rng, d, 64.0);
        let mut got = fixed_to_i64(
            batchnorm_apply_fixed(&fm, &bn, &sat)
                .expect("lengths")
                .values(),
        );
        perturb(&mut got, fault);
        let want: Vec<i64> = fm
            .values()
            .iter()
            .enumerate()
            .map(|(j, v)| {
                let p = bn[j / d.spatial()];
                let prod = oracle::round_div(p.scale.raw() as i128 * v.raw() as i128, 1 << 16);
                (prod + p.bias.raw() as i128) as i64
            })
            .collect();
        bn_fixed.record(&got, &want, ctx);

        let params: Vec<BpreluParams> = (0..d.channels)
            .map(|_| BpreluParams {
                alpha: random_fx(&mut rng, 2.0),
                slope: Fx::from_f64(rng.random_range(0.0..1.0)),
                gamma: random_fx(&mut rng, 2.0),
            })
            .collect();
        let mut got = fixed_to_i64(bprelu(&fm, &params, &sat).expect("lengths").values());
        perturb(&mut got, fault);
        let want: Vec<i64> = fm
            .values()
            .iter()
            .enumerate()
            .map(|(j, v)| {
                let p = params[j / d.spatial()];
                let z = v.raw() as i128 - p.alpha.raw() as i128;
                let y = if z < 0 {
                    oracle::round_div(p.slope.raw() as i128 * z, 1 << 16)
                } else {
                    z
                };
                (y + p.gamma.raw() as i128) as i64
            })
            .collect();
        act.record(&got, &want, ctx);

        // Pooling on even-sized maps.
        let pd = Dims::new(
            d.channels,
            2 * d.height.div_ceil(2),
            2 * d.width.div_ceil(2),
        );
        let fm = random_fixed_map(&mut rng, pd, 1000.0);
        let mut got = fixed_to_i64(avgpool2d(&fm, 2, 2).expect("even dims").values());
        perturb(&mut got, fault);
        let mut want = Vec::new();
        for c in 0..pd.channels {
            for h in 0..pd.height / 2 {
                for w in 0..pd.width / 2 {
                    let s: i128 = (0..4)
                        .map(|t| fm.get(c, 2 * h + t / 2, 2 * w + t % 2).raw() as i128)
                        .sum();
                    want.push(oracle::round_div(s, 4) as i64);
                }
            }
        }
        pool.record(&got, &want, ctx);
        let mut got = fixed_to_i64(&global_avgpool(&fm));
        perturb(&mut got, fault);
        let want: Vec<i64> = (0..pd.channels)
            .map(|c| {
                let s: i128 = fm.channel(c).iter().map(|v| v.raw() as i128).sum();
                oracle::round_div(s, pd.spatial() as i128) as i64
            })
            .collect();
        gpool.record(&got, &want, ctx);

        // Classifier over `channels` features.
        let classes = rng.random_range(1..=10);
        let wts: Vec<i8> = (0..classes * d.channels).map(|_| rng.random()).collect();
        let cw = ClassifierWeights::new(classes, d.channels, wts).expect("shape");
        let feats: Vec<i32> = (0..d.channels)
            .map(|_| rng.random_range(-50_000..50_000))
            .collect();
        let bias: Vec<i32> = (0..classes)
            .map(|_| rng.random_range(-100_000..100_000))
            .collect();
        let mut got = ints_to_i64(&linear_classifier(&feats, &cw, &bias, &sat).expect("shape"));
        perturb(&mut got, fault);
        let want: Vec<i64> = (0..classes)
            .map(|j| {
                bias[j] as i64
                    + cw.row(j)
                        .iter()
                        .zip(&feats)
                        .map(|(&a, &f)| a as i64 * f as i64)
                        .sum::<i64>()
            })
            .collect();
        linear.record(&got, &want, ctx);
    }

    let mut e2e = CheckResult::new("forward_logits", 0);
    let mut layerwise = CheckResult::new("forward_layers", 0);
    let mut argmax = CheckResult::new("forward_argmax", 0);
    let mut one_bit = CheckResult::new("closed_gates_one_bit", 0);
    for m in 0..opts.models {
        let spec = random_network(&mut rng);
        let reference_model =
            generate_synthetic(rng.random(), &spec).expect("random networks validate");
        let model = if fault {
            flip_first_weight(reference_model.clone())
        } else {
            reference_model.clone()
        };
        for n in 0..opts.images_per_model {
            let img = RgbImage::random(spec.image_width, spec.image_height, &mut rng);
            let ctx = || format!("model {m}, image {n}");
            let reference = oracle::forward(&reference_model, &img);
            let trace = model.trace(&img).expect("valid model");
            let Some(Activation::Logits(logits)) = trace.last() else {
                unreachable!("networks end with the classifier")
            };
            e2e.record(&ints_to_i64(logits), &reference.logits, ctx);
            let mut got_arg = [crate::kernels::argmax(logits).map_or(-1, |v| v as i64)];
            perturb(&mut got_arg, fault);
            let want_arg = argmax_i64(&reference.logits);
            argmax.record(&got_arg, &[want_arg], ctx);
            for (l, (a, r)) in trace.iter().zip(&reference.layers).enumerate() {
                layerwise.record(&activation_values(a), &r.data, || {
                    format!("{}, layer {l}", ctx())
                });
            }

            let mut closed = model.clone();
            closed.set_gates(GateMode::Closed);
            let mut closed_reference = reference_model.clone();
            closed_reference.set_gates(GateMode::Closed);
            let got = closed.forward(&img).expect("valid model").logits;
            let want = oracle::forward_with(&closed_reference, &img, oracle::Activations::OneBit);
            one_bit.record(&ints_to_i64(&got), &want.logits, ctx);
        }
    }

    VerifyReport {
        seed: opts.seed,
        cases: opts.cases,
        fault_injected: fault,
        checks: vec![
            conv, frac, frac_gates, quant, bn_int, bn_fixed, act, pool, gpool, linear, e2e,
            layerwise, argmax, one_bit,
        ],
    }
}

fn argmax_i64(v: &[i64]) -> i64 {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    if v.is_empty() {
        -1
    } else {
        best as i64
    }
}

/// Engine activation as a flat dense vector in CHW order.
pub fn activation_values(a: &Activation) -> Vec<i64> {
    match a {
        Activation::Bits(p) => oracle::unpack_plane(p).data,
        Activation::Fixed(m) => fixed_to_i64(m.values()),
        Activation::Pooled(v) => fixed_to_i64(v),
        Activation::Logits(v) => ints_to_i64(v),
    }
}

/// Flips the centre tap of input-layer kernel 0, channel 0.
fn flip_first_weight(model: Model) -> Model {
    let (spec, mut layers) = model.into_parts();
    if let LayerParams::Input { weights, .. } = &mut layers[0] {
        let mut planes = weights.planes().to_vec();
        let p = &planes[0];
        let d = p.dims();
        let (ch, cw) = (d.height / 2, d.width / 2);
        planes[0] = PackedBitPlane::from_fn(d, |c, h, w| {
            let bit = p.get(c, h, w) == 1;
            if (c, h, w) == (0, ch, cw) {
                !bit
            } else {
                bit
            }
        });
        *weights =
            ConvWeights::new(weights.in_channels(), weights.kernel(), planes).expect("same shape");
    }
    Model::new(spec, layers).expect("flipping a bit keeps the model valid")
}

/// Small random network mixing every block flavour.
pub fn random_network(rng: &mut ChaCha8Rng) -> NetworkSpec {
    let resolution = [8, 16, 32, 64, 128][rng.random_range(0..5)];
    let thermometer = ThermometerConfig::new(resolution).expect("valid resolution");
    let size = [4, 6, 8][rng.random_range(0..3)];
    let mut c = [1, 4, 8, 16][rng.random_range(0..4)];
    let mut h = size;
    let block = |kind, cin, cout, h, stride, pad, has_shortcut, downsample| BlockSpec {
        kind,
        in_channels: cin,
        out_channels: cout,
        in_height: h,
        in_width: h,
        stride,
        pad,
        has_shortcut,
        downsample,
    };
    let mut blocks = vec![block(
        LayerKind::InputLayer,
        thermometer.image_channels(),
        c,
        h,
        1,
        1,
        false,
        false,
    )];
    for _ in 0..rng.random_range(1..=3) {
        let b = match rng.random_range(0..4) {
            0 if h % 2 == 0 && h >= 2 && c <= 64 => {
                let b = block(LayerKind::Conv3x3Block, c, 2 * c, h, 2, 1, true, true);
                c *= 2;
                h /= 2;
                b
            }
            1 => {
                let cout = rng.random_range(1..=70);
                let b = block(LayerKind::Conv1x1Block, c, cout, h, 1, 0, false, false);
                c = cout;
                b
            }
            2 if h >= 3 => {
                let cout = rng.random_range(1..=20);
                let b = block(LayerKind::Conv3x3Block, c, cout, h, 1, 0, false, false);
                c = cout;
                h -= 2;
                b
            }
            _ => block(LayerKind::Conv3x3Block, c, c, h, 1, 1, true, false),
        };
        blocks.push(b);
    }
    let classes = rng.random_range(2..=10);
    blocks.push(block(LayerKind::Pool, c, c, h, 1, 0, false, false));
    blocks.push(block(
        LayerKind::Classifier,
        c,
        classes,
        1,
        1,
        0,
        false,
        false,
    ));
    NetworkSpec {
        topology: Topology::Generic,
        thermometer,
        image_height: size,
        image_width: size,
        classes,
        blocks,
    }
}
