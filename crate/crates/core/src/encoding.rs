//! Input encodings that turn 8-bit RGB images into bipolar tensors.
//!
//! The thermometer code is the one the network consumes: a pixel of intensity
//! `p` becomes a vector of `L = ceil(255 / R)` bits whose top `round(p / R)`
//! entries are one. Bits are then remapped `0 -> -1`. The bit-plane code (binary
//! digits, MSB first) is kept as a comparison baseline.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use thiserror::Error;

use crate::bitpack::{Dims, PackedBitPlane};

pub const MAX_INTENSITY: u32 = 255;
pub const COLOR_CHANNELS: usize = 3;
pub const BITPLANE_DEPTH: usize = 8;
/// Minimum number of (window, kernel) pairs for a correlation estimate.
pub const MIN_CORRELATION_PAIRS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EncodingError {
    #[error("resolution {0} outside 1..=255")]
    Resolution(u32),
    #[error("intensity {0} outside 0..=255")]
    Intensity(i64),
    #[error("image is empty ({width}x{height})")]
    EmptyImage { width: usize, height: usize },
    #[error("image buffer holds {actual} bytes, {width}x{height} RGB needs {expected}")]
    BufferSize {
        width: usize,
        height: usize,
        expected: usize,
        actual: usize,
    },
    #[error("kernel {kernel} has {actual} weights, encoder needs {expected}")]
    KernelSize {
        kernel: usize,
        expected: usize,
        actual: usize,
    },
    #[error("{pairs} (window, kernel) pairs sampled, need at least {MIN_CORRELATION_PAIRS}")]
    TooFewPairs { pairs: usize },
    #[error("no image is large enough for a 3x3 window")]
    NoWindows,
    #[error("correlation undefined for kernel {kernel}: zero variance")]
    Degenerate { kernel: usize },
}

/// Interleaved 8-bit RGB image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self, EncodingError> {
        if width == 0 || height == 0 {
            return Err(EncodingError::EmptyImage { width, height });
        }
        let expected = width * height * COLOR_CHANNELS;
        if data.len() != expected {
            return Err(EncodingError::BufferSize {
                width,
                height,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut pixel: impl FnMut(usize, usize) -> [u8; 3],
    ) -> Result<Self, EncodingError> {
        let mut data = Vec::with_capacity(width * height * COLOR_CHANNELS);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&pixel(y, x));
            }
        }
        Self::new(width, height, data)
    }

    /// Uniformly random pixels.
    pub fn random(width: usize, height: usize, rng: &mut impl Rng) -> Self {
        let mut data = vec![0u8; width * height * COLOR_CHANNELS];
        rng.fill(&mut data[..]);
        Self::new(width, height, data).expect("non-empty random image")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * COLOR_CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

/// Thermometer resolution: the intensity one set bit stands for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ThermometerConfig {
    resolution: u8,
}

impl ThermometerConfig {
    pub fn new(resolution: u32) -> Result<Self, EncodingError> {
        match u8::try_from(resolution) {
            Ok(r) if r >= 1 => Ok(Self { resolution: r }),
            _ => Err(EncodingError::Resolution(resolution)),
        }
    }

    pub fn resolution(&self) -> u32 {
        self.resolution as u32
    }

    /// Vector length `L = ceil(255 / R)`.
    pub fn length(&self) -> usize {
        MAX_INTENSITY.div_ceil(self.resolution()) as usize
    }

    /// Set bits for intensity `p`: `p / R` rounded half away from zero.
    #[inline]
    pub fn ones(&self, p: u8) -> usize {
        let r = self.resolution();
        ((2 * p as u32 + r) / (2 * r)) as usize
    }

    /// Channels produced for an RGB image.
    pub fn image_channels(&self) -> usize {
        COLOR_CHANNELS * self.length()
    }
}

impl Default for ThermometerConfig {
    fn default() -> Self {
        Self { resolution: 8 }
    }
}

/// Thermometer vector of `p`; ones fill the high-index end.
pub fn thermometer_encode_pixel(
    p: i64,
    cfg: &ThermometerConfig,
) -> Result<Vec<bool>, EncodingError> {
    let p = u8::try_from(p).map_err(|_| EncodingError::Intensity(p))?;
    let len = cfg.length();
    let zeros = len - cfg.ones(p);
    Ok((0..len).map(|i| i >= zeros).collect())
}

/// Thermometer-encodes every pixel; channel `color * L + i` holds bit `i` of
/// that color's vector.
pub fn encode_image_thermometer(
    img: &RgbImage,
    cfg: &ThermometerConfig,
) -> Result<PackedBitPlane, EncodingError> {
    let len = cfg.length();
    let dims = Dims::new(cfg.image_channels(), img.height(), img.width());
    let mut zeros = [0usize; COLOR_CHANNELS];
    let mut last = (usize::MAX, usize::MAX);
    Ok(PackedBitPlane::from_fn(dims, |c, h, w| {
        if (h, w) != last {
            let px = img.pixel(h, w);
            for (z, &p) in zeros.iter_mut().zip(&px) {
                *z = len - cfg.ones(p);
            }
            last = (h, w);
        }
        c % len >= zeros[c / len]
    }))
}

/// Binary digits of each color, MSB first: channel `color * 8 + j` is bit `7 - j`.
pub fn encode_image_bitplane(img: &RgbImage) -> Result<PackedBitPlane, EncodingError> {
    let dims = Dims::new(COLOR_CHANNELS * BITPLANE_DEPTH, img.height(), img.width());
    Ok(PackedBitPlane::from_fn(dims, |c, h, w| {
        let p = img.pixel(h, w)[c / BITPLANE_DEPTH];
        (p >> (BITPLANE_DEPTH - 1 - c % BITPLANE_DEPTH)) & 1 == 1
    }))
}

/// How a 3x3 RGB window is presented to a real-valued kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputEncoding {
    Thermometer(ThermometerConfig),
    BitPlane,
    /// Raw intensities mapped linearly onto `[-1, 1]`.
    Rgb,
}

impl InputEncoding {
    pub fn channels(&self) -> usize {
        match self {
            InputEncoding::Thermometer(cfg) => cfg.image_channels(),
            InputEncoding::BitPlane => COLOR_CHANNELS * BITPLANE_DEPTH,
            InputEncoding::Rgb => COLOR_CHANNELS,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            InputEncoding::Thermometer(_) => "thermometer",
            InputEncoding::BitPlane => "bitplane",
            InputEncoding::Rgb => "rgb",
        }
    }

    /// Appends the encoded channel values of one pixel.
    fn push_pixel(&self, px: [u8; 3], out: &mut Vec<f64>) {
        let bipolar = |b: bool| if b { 1.0 } else { -1.0 };
        match self {
            InputEncoding::Thermometer(cfg) => {
                let len = cfg.length();
                for p in px {
                    let zeros = len - cfg.ones(p);
                    out.extend((0..len).map(|i| bipolar(i >= zeros)));
                }
            }
            InputEncoding::BitPlane => {
                for p in px {
                    out.extend(
                        (0..BITPLANE_DEPTH)
                            .rev()
                            .map(|b| bipolar((p >> b) & 1 == 1)),
                    );
                }
            }
            InputEncoding::Rgb => {
                out.extend(
                    px.iter()
                        .map(|&p| 2.0 * p as f64 / MAX_INTENSITY as f64 - 1.0),
                );
            }
        }
    }

    /// Encoded 3x3 window with top-left corner `(y, x)`, laid out `(c, ky, kx)`.
    fn window(&self, img: &RgbImage, y: usize, x: usize) -> Vec<f64> {
        let channels = self.channels();
        let mut per_tap = Vec::with_capacity(channels * 9);
        for ky in 0..3 {
            for kx in 0..3 {
                self.push_pixel(img.pixel(y + ky, x + kx), &mut per_tap);
            }
        }
        let mut out = vec![0.0; channels * 9];
        for tap in 0..9 {
            for c in 0..channels {
                out[c * 9 + tap] = per_tap[tap * channels + c];
            }
        }
        out
    }
}

/// Seeded zero-mean, unit-variance Gaussian 3x3 kernels over `channels` inputs.
pub fn gaussian_kernels(count: usize, channels: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            (0..channels * 9)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect()
        })
        .collect()
}

/// Smooth synthetic scene: a lit gradient, a color cast, a few flat-shaded
/// ellipses and mild sensor noise.
pub fn synthetic_scene(width: usize, height: usize, rng: &mut impl Rng) -> RgbImage {
    let level: f64 = rng.random_range(30.0..225.0);
    let slope = Normal::new(0.0, 40.0).unwrap();
    let (gx, gy): (f64, f64) = (slope.sample(rng), slope.sample(rng));
    let tint = Normal::new(0.0, 20.0).unwrap();
    let cast: [f64; 3] = [tint.sample(rng), tint.sample(rng), tint.sample(rng)];
    let shade = Normal::new(0.0, 50.0).unwrap();
    let blobs: Vec<(f64, f64, f64, f64, [f64; 3])> = (0..4)
        .map(|_| {
            (
                rng.random_range(0.0..height as f64),
                rng.random_range(0.0..width as f64),
                rng.random_range(3.0..12.0),
                rng.random_range(3.0..12.0),
                [shade.sample(rng), shade.sample(rng), shade.sample(rng)],
            )
        })
        .collect();
    let noise = Normal::new(0.0, 4.0).unwrap();
    RgbImage::from_fn(width, height, |y, x| {
        let (fy, fx) = (y as f64 / height as f64, x as f64 / width as f64);
        let mut px = [0u8; 3];
        for (c, out) in px.iter_mut().enumerate() {
            let mut v = level + gx * fx + gy * fy + cast[c];
            for (cy, cx, ry, rx, col) in &blobs {
                let (dy, dx) = ((y as f64 - cy) / ry, (x as f64 - cx) / rx);
                if dy * dy + dx * dx <= 1.0 {
                    v += col[c];
                }
            }
            v += noise.sample(rng);
            *out = v.round().clamp(0.0, 255.0) as u8;
        }
        px
    })
    .expect("non-empty scene")
}

/// Outcome of the pre/post weight-binarization correlation experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationReport {
    pub encoding: InputEncoding,
    /// Mean over kernels of the per-kernel Pearson r.
    pub mean_r: f64,
    /// Pearson r over all (window, kernel) pairs pooled together.
    pub pooled_r: f64,
    pub per_kernel: Vec<f64>,
    pub pairs: usize,
}

/// Correlates `dot(x, w)` with `dot(x, sign(w))` over sampled 3x3 windows.
///
/// Each kernel is scored by the Pearson r of its two dot products across the
/// same `windows` encoded input windows; the headline figure is the mean over
/// kernels. With i.i.d. symmetric weights the pooled r depends only on the
/// weight distribution (`E|w| / sqrt(E w^2)`), so it is reported but not used
/// to compare encoders.
pub fn correlation_experiment(
    images: &[RgbImage],
    kernels: &[Vec<f64>],
    encoding: InputEncoding,
    windows: usize,
    seed: u64,
) -> Result<CorrelationReport, EncodingError> {
    let pairs = windows * kernels.len();
    if pairs < MIN_CORRELATION_PAIRS {
        return Err(EncodingError::TooFewPairs { pairs });
    }
    let len = encoding.channels() * 9;
    if let Some((kernel, k)) = kernels.iter().enumerate().find(|(_, k)| k.len() != len) {
        return Err(EncodingError::KernelSize {
            kernel,
            expected: len,
            actual: k.len(),
        });
    }
    let usable: Vec<&RgbImage> = images
        .iter()
        .filter(|i| i.width() >= 3 && i.height() >= 3)
        .collect();
    if usable.is_empty() {
        return Err(EncodingError::NoWindows);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples: Vec<Vec<f64>> = (0..windows)
        .map(|_| {
            let img = usable[rng.random_range(0..usable.len())];
            let y = rng.random_range(0..=img.height() - 3);
            let x = rng.random_range(0..=img.width() - 3);
            encoding.window(img, y, x)
        })
        .collect();

    // Exact zeros stay zero so a kernel's support is preserved; continuous
    // weights never hit this case.
    let sign = |w: f64| if w == 0.0 { 0.0 } else { w.signum() };
    let mut per_kernel = Vec::with_capacity(kernels.len());
    let (mut all_real, mut all_bin) = (Vec::with_capacity(pairs), Vec::with_capacity(pairs));
    for (kernel, w) in kernels.iter().enumerate() {
        let wb: Vec<f64> = w.iter().map(|&v| sign(v)).collect();
        let real: Vec<f64> = samples.iter().map(|x| dot(x, w)).collect();
        let bin: Vec<f64> = samples.iter().map(|x| dot(x, &wb)).collect();
        per_kernel.push(pearson(&real, &bin).ok_or(EncodingError::Degenerate { kernel })?);
        all_real.extend(real);
        all_bin.extend(bin);
    }
    let pooled_r = pearson(&all_real, &all_bin).ok_or(EncodingError::Degenerate { kernel: 0 })?;
    let mean_r = per_kernel.iter().sum::<f64>() / per_kernel.len() as f64;
    Ok(CorrelationReport {
        encoding,
        mean_r,
        pooled_r,
        per_kernel,
        pairs,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Pearson r, or `None` when either series has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    // Dot products of integer-valued windows can cancel to tiny residues.
    let eps = 1e-12 * n;
    if saa <= eps || sbb <= eps {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(r: u32) -> ThermometerConfig {
        ThermometerConfig::new(r).unwrap()
    }

    #[test]
    fn config_lengths() {
        assert_eq!(cfg(8).length(), 32);
        assert_eq!(cfg(1).length(), 255);
        assert_eq!(cfg(32).length(), 8);
        assert_eq!(cfg(255).length(), 1);
        assert!(ThermometerConfig::new(0).is_err());
        assert!(ThermometerConfig::new(256).is_err());
    }

    #[test]
    fn pixel_109_at_r32_has_three_ones() {
        let v = thermometer_encode_pixel(109, &cfg(32)).unwrap();
        assert_eq!(v.len(), 8);
        assert_eq!(v.iter().filter(|&&b| b).count(), 3);
        assert_eq!(v, [false, false, false, false, false, true, true, true]);
    }

    #[test]
    fn zero_and_full_intensity() {
        for r in [1, 4, 8, 16, 32, 64] {
            assert!(thermometer_encode_pixel(0, &cfg(r))
                .unwrap()
                .iter()
                .all(|b| !b));
        }
        let v = thermometer_encode_pixel(255, &cfg(8)).unwrap();
        assert_eq!(v.len(), 32);
        assert!(v.iter().all(|&b| b));
    }

    #[test]
    fn rounding_is_half_away_from_zero() {
        // 12 / 8 = 1.5 rounds up, 11 / 8 = 1.375 rounds down.
        assert_eq!(cfg(8).ones(12), 2);
        assert_eq!(cfg(8).ones(11), 1);
        // An intensity below R / 2 rounds to nothing.
        assert_eq!(cfg(32).ones(15), 0);
        assert_eq!(cfg(32).ones(16), 1);
    }

    #[test]
    fn intensity_out_of_range() {
        assert_eq!(
            thermometer_encode_pixel(256, &cfg(8)),
            Err(EncodingError::Intensity(256))
        );
        assert_eq!(
            thermometer_encode_pixel(-1, &cfg(8)),
            Err(EncodingError::Intensity(-1))
        );
    }

    #[test]
    fn image_extremes() {
        let black = RgbImage::new(1, 1, vec![0, 0, 0]).unwrap();
        let plane = encode_image_thermometer(&black, &cfg(8)).unwrap();
        assert_eq!(plane.dims(), Dims::new(96, 1, 1));
        assert!(plane.unpack().iter().all(|&v| v == -1));

        let white = RgbImage::new(1, 1, vec![255; 3]).unwrap();
        let plane = encode_image_thermometer(&white, &cfg(8)).unwrap();
        assert!(plane.unpack().iter().all(|&v| v == 1));
    }

    #[test]
    fn image_matches_pixel_encoder() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let c = cfg(8);
        for _ in 0..20 {
            let img = RgbImage::random(2, 2, &mut rng);
            let plane = encode_image_thermometer(&img, &c).unwrap();
            for y in 0..2 {
                for x in 0..2 {
                    let px = img.pixel(y, x);
                    for (color, &p) in px.iter().enumerate() {
                        let tv = thermometer_encode_pixel(p as i64, &c).unwrap();
                        for (i, &bit) in tv.iter().enumerate() {
                            let expected = if bit { 1 } else { -1 };
                            assert_eq!(plane.get(color * 32 + i, y, x), expected);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn empty_image_rejected() {
        assert!(matches!(
            RgbImage::new(0, 3, vec![]),
            Err(EncodingError::EmptyImage { .. })
        ));
        assert!(matches!(
            RgbImage::new(2, 2, vec![0; 5]),
            Err(EncodingError::BufferSize { .. })
        ));
    }

    #[test]
    fn bitplane_digits() {
        let img = RgbImage::new(1, 1, vec![0b1011_0100, 0, 255]).unwrap();
        let plane = encode_image_bitplane(&img).unwrap();
        let v = plane.unpack();
        assert_eq!(&v[0..8], &[1, -1, 1, 1, -1, 1, -1, -1]);
        assert_eq!(&v[8..16], &[-1; 8]);
        assert_eq!(&v[16..24], &[1; 8]);
    }

    #[test]
    fn bitplane_reconstructs_every_intensity() {
        for p in 0..=255u8 {
            let img = RgbImage::new(1, 1, vec![p, p, p]).unwrap();
            let v = encode_image_bitplane(&img).unwrap().unpack();
            let rebuilt: u32 = (0..8)
                .map(|j| if v[j] == 1 { 1u32 << (7 - j) } else { 0 })
                .sum();
            assert_eq!(rebuilt, p as u32);
        }
    }

    #[test]
    fn single_nonzero_weight_is_perfectly_correlated() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let images: Vec<RgbImage> = (0..8).map(|_| synthetic_scene(16, 16, &mut rng)).collect();
        for encoding in [
            InputEncoding::Thermometer(cfg(8)),
            InputEncoding::BitPlane,
            InputEncoding::Rgb,
        ] {
            let mut w = vec![0.0; encoding.channels() * 9];
            // Mid-range channel so it actually toggles across windows.
            let c = encoding.channels() / 2;
            w[c * 9 + 4] = -0.37;
            let report = correlation_experiment(&images, &[w], encoding, 1000, 9).unwrap();
            assert!((report.mean_r - 1.0).abs() < 1e-12, "{}", report.mean_r);
        }
    }

    #[test]
    fn correlation_rejects_bad_inputs() {
        let img = RgbImage::new(4, 4, vec![7; 48]).unwrap();
        let enc = InputEncoding::Rgb;
        assert!(matches!(
            correlation_experiment(std::slice::from_ref(&img), &[vec![1.0; 27]], enc, 10, 0),
            Err(EncodingError::TooFewPairs { pairs: 10 })
        ));
        assert!(matches!(
            correlation_experiment(std::slice::from_ref(&img), &[vec![1.0; 26]], enc, 1000, 0),
            Err(EncodingError::KernelSize { .. })
        ));
        // A flat image gives constant dot products.
        assert_eq!(
            correlation_experiment(&[img], &[vec![1.0; 27]], enc, 1000, 0),
            Err(EncodingError::Degenerate { kernel: 0 })
        );
    }

    #[test]
    fn gaussian_kernels_are_seeded() {
        let a = gaussian_kernels(3, 96, 5);
        assert_eq!(a, gaussian_kernels(3, 96, 5));
        assert_ne!(a, gaussian_kernels(3, 96, 6));
        assert_eq!(a[0].len(), 96 * 9);
    }
}
