use rayon::prelude::*;

use super::{expect_len, shape_err, FracActivation, IntFeatureMap, KernelError};
use crate::bitpack::{mismatches, Dims, PackedBitPlane};

/// Kernel size, stride and zero padding of a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn new(kernel: usize, stride: usize, pad: usize) -> Result<Self, KernelError> {
        let g = Self {
            kernel,
            stride,
            pad,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), KernelError> {
        if !matches!(self.kernel, 1 | 3) {
            return Err(KernelError::Geometry(format!("kernel {}", self.kernel)));
        }
        if !matches!(self.stride, 1 | 2) {
            return Err(KernelError::Geometry(format!("stride {}", self.stride)));
        }
        if self.pad > 1 || (self.pad == 1 && self.kernel != 3) {
            return Err(KernelError::Geometry(format!(
                "pad {} with kernel {}",
                self.pad, self.kernel
            )));
        }
        Ok(())
    }

    /// Output extent along one axis, or `None` if the kernel does not fit.
    pub fn output_len(&self, input: usize) -> Option<usize> {
        let padded = input + 2 * self.pad;
        (padded >= self.kernel && input > 0).then(|| (padded - self.kernel) / self.stride + 1)
    }

    pub fn output_dims(&self, input: Dims, out_channels: usize) -> Result<Dims, KernelError> {
        match (self.output_len(input.height), self.output_len(input.width)) {
            (Some(h), Some(w)) => Ok(Dims::new(out_channels, h, w)),
            _ => Err(shape_err(format!(
                "input {input} too small for {}x{} kernel",
                self.kernel, self.kernel
            ))),
        }
    }
}

/// Binary kernels, one `(in_channels, k, k)` plane per output channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvWeights {
    in_channels: usize,
    kernel: usize,
    planes: Vec<PackedBitPlane>,
}

impl ConvWeights {
    pub fn new(
        in_channels: usize,
        kernel: usize,
        planes: Vec<PackedBitPlane>,
    ) -> Result<Self, KernelError> {
        let expect = Dims::new(in_channels, kernel, kernel);
        if planes.is_empty() {
            return Err(shape_err("no output channels"));
        }
        if let Some((i, p)) = planes.iter().enumerate().find(|(_, p)| p.dims() != expect) {
            return Err(shape_err(format!(
                "kernel {i} is {}, expected {expect}",
                p.dims()
            )));
        }
        Ok(Self {
            in_channels,
            kernel,
            planes,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.planes.len()
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn planes(&self) -> &[PackedBitPlane] {
        &self.planes
    }
}

fn check_conv(x: Dims, w: &ConvWeights, geom: &ConvGeometry) -> Result<Dims, KernelError> {
    geom.validate()?;
    if w.kernel != geom.kernel {
        return Err(shape_err(format!(
            "weights are {0}x{0}, geometry says {1}x{1}",
            w.kernel, geom.kernel
        )));
    }
    if x.channels != w.in_channels {
        return Err(shape_err(format!(
            "input has {} channels, weights expect {}",
            x.channels, w.in_channels
        )));
    }
    geom.output_dims(x, w.out_channels())
}

/// Signed dot product of one kernel against the window producing `(oh, ow)`.
/// Taps that fall in the padding contribute nothing.
#[inline]
fn window_dot(
    x: &PackedBitPlane,
    kernel: &PackedBitPlane,
    geom: &ConvGeometry,
    oh: usize,
    ow: usize,
) -> i32 {
    let d = x.dims();
    let wpp = x.words_per_pos();
    let (xs, ks) = (x.words(), kernel.words());
    let mut taps = 0;
    let mut diff = 0u32;
    for ky in 0..geom.kernel {
        let ih = (oh * geom.stride + ky).wrapping_sub(geom.pad);
        if ih >= d.height {
            continue;
        }
        for kx in 0..geom.kernel {
            let iw = (ow * geom.stride + kx).wrapping_sub(geom.pad);
            if iw >= d.width {
                continue;
            }
            let xi = (ih * d.width + iw) * wpp;
            let ki = (ky * geom.kernel + kx) * wpp;
            diff += mismatches(&xs[xi..xi + wpp], &ks[ki..ki + wpp]);
            taps += 1;
        }
    }
    (taps * d.channels) as i32 - 2 * diff as i32
}

/// Output columns `lo..hi` whose tap `kx` lands inside the input row.
#[inline]
fn valid_columns(
    kx: usize,
    geom: &ConvGeometry,
    in_width: usize,
    out_width: usize,
) -> (usize, usize) {
    let lo = if kx < geom.pad {
        (geom.pad - kx).div_ceil(geom.stride)
    } else {
        0
    };
    let hi = if in_width + geom.pad > kx {
        ((in_width - 1 + geom.pad - kx) / geom.stride + 1).min(out_width)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Dense signed dot products of one kernel at every output position, written
/// row by row into `dst`. Each tap sweeps its valid column range once.
fn dense_dots(
    x: &PackedBitPlane,
    kernel: &PackedBitPlane,
    geom: &ConvGeometry,
    out: Dims,
    dst: &mut [i32],
) {
    let d = x.dims();
    let wpp = x.words_per_pos();
    let (xs, ks) = (x.words(), kernel.words());
    let k = geom.kernel;
    let cols: Vec<(usize, usize)> = (0..k)
        .map(|kx| valid_columns(kx, geom, d.width, out.width))
        .collect();
    let mut taps_per_col = vec![0usize; out.width];
    for &(lo, hi) in &cols {
        taps_per_col[lo..hi].iter_mut().for_each(|t| *t += 1);
    }
    for (oh, row) in dst.chunks_exact_mut(out.width).enumerate() {
        row.fill(0);
        let mut rows = 0;
        for ky in 0..k {
            let ih = (oh * geom.stride + ky).wrapping_sub(geom.pad);
            if ih >= d.height {
                continue;
            }
            rows += 1;
            let line = &xs[ih * d.width * wpp..(ih + 1) * d.width * wpp];
            for (kx, &(lo, hi)) in cols.iter().enumerate() {
                let ki = (ky * k + kx) * wpp;
                let first = (lo * geom.stride + kx - geom.pad) * wpp;
                let step = geom.stride * wpp;
                if wpp == 1 {
                    let kw = ks[ki];
                    let src = line[first..].iter().step_by(step);
                    for (acc, &xw) in row[lo..hi].iter_mut().zip(src) {
                        *acc += (xw ^ kw).count_ones() as i32;
                    }
                } else {
                    let kw = &ks[ki..ki + wpp];
                    for (n, acc) in row[lo..hi].iter_mut().enumerate() {
                        let xi = first + n * step;
                        *acc += mismatches(&line[xi..xi + wpp], kw) as i32;
                    }
                }
            }
        }
        for (acc, &taps) in row.iter_mut().zip(&taps_per_col) {
            *acc = (rows * taps * d.channels) as i32 - 2 * *acc;
        }
    }
}

/// XNOR/popcount convolution of a packed input with binary kernels.
pub fn binary_conv2d(
    x: &PackedBitPlane,
    w: &ConvWeights,
    geom: &ConvGeometry,
) -> Result<IntFeatureMap, KernelError> {
    let out = check_conv(x.dims(), w, geom)?;
    let mut values = vec![0i32; out.len()];
    values
        .par_chunks_mut(out.spatial())
        .zip(w.planes.par_iter())
        .for_each(|(dst, kernel)| dense_dots(x, kernel, geom, out, dst));
    IntFeatureMap::new(out, values)
}

/// Output elements whose LSB update ran.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UpdateMask {
    dims: Dims,
    open: Vec<bool>,
}

impl UpdateMask {
    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn get(&self, c: usize, h: usize, w: usize) -> bool {
        self.open[self.dims.index(c, h, w)]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.open
    }

    pub fn open_count(&self) -> usize {
        self.open.iter().filter(|&&o| o).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FracConvOutput {
    pub output: IntFeatureMap,
    pub mask: UpdateMask,
    /// Fraction of output elements whose update was skipped.
    pub sparsity: f64,
}

/// Two-phase fractional convolution.
///
/// The base phase convolves the MSB plane. Once every input channel has been
/// accumulated, an element whose base value exceeds its channel threshold gets
/// the LSB convolution added on top of `base << 1`; the rest keep `base << 1`.
/// `i32::MIN` and `i32::MAX` thresholds therefore mean always open and always
/// closed.
pub fn frac_conv2d(
    x: &FracActivation,
    w: &ConvWeights,
    geom: &ConvGeometry,
    delta: &[i32],
) -> Result<FracConvOutput, KernelError> {
    let out = check_conv(x.dims(), w, geom)?;
    expect_len("threshold vector", delta.len(), w.out_channels())?;
    let n = out.spatial();
    let mut values = vec![0i32; out.len()];
    let mut open = vec![false; out.len()];
    values
        .par_chunks_mut(n)
        .zip(open.par_chunks_mut(n))
        .zip(w.planes.par_iter().zip(delta.par_iter()))
        .for_each(|((dst, gate), (kernel, &threshold))| {
            dense_dots(x.msb(), kernel, geom, out, dst);
            for oh in 0..out.height {
                for ow in 0..out.width {
                    let i = oh * out.width + ow;
                    let base = dst[i];
                    dst[i] = base << 1;
                    if base > threshold {
                        dst[i] += window_dot(x.lsb(), kernel, geom, oh, ow);
                        gate[i] = true;
                    }
                }
            }
        });
    let mask = UpdateMask { dims: out, open };
    let sparsity = 1.0 - mask.open_count() as f64 / out.len() as f64;
    Ok(FracConvOutput {
        output: IntFeatureMap::new(out, values)?,
        mask,
        sparsity,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones(dims: Dims) -> PackedBitPlane {
        PackedBitPlane::from_fn(dims, |_, _, _| true)
    }

    #[test]
    fn padding_taps_are_excluded() {
        let x = ones(Dims::new(1, 1, 1));
        let w = ConvWeights::new(1, 3, vec![ones(Dims::new(1, 3, 3))]).unwrap();
        let geom = ConvGeometry::new(3, 1, 1).unwrap();
        let out = binary_conv2d(&x, &w, &geom).unwrap();
        assert_eq!(out.values(), &[1]);
    }

    #[test]
    fn self_correlation_no_padding() {
        let c = 70;
        let pattern = |c: usize, _: usize, _: usize| c % 3 != 1;
        let x = PackedBitPlane::from_fn(Dims::new(c, 5, 4), pattern);
        let k = PackedBitPlane::from_fn(Dims::new(c, 3, 3), pattern);
        let w = ConvWeights::new(c, 3, vec![k]).unwrap();
        let out = binary_conv2d(&x, &w, &ConvGeometry::new(3, 1, 0).unwrap()).unwrap();
        assert_eq!(out.dims(), Dims::new(1, 3, 2));
        assert!(out.values().iter().all(|&v| v == 9 * c as i32));
    }

    #[test]
    fn geometry_rules() {
        assert!(ConvGeometry::new(1, 1, 1).is_err());
        assert!(ConvGeometry::new(5, 1, 0).is_err());
        assert!(ConvGeometry::new(3, 3, 1).is_err());
        let g = ConvGeometry::new(3, 2, 1).unwrap();
        assert_eq!(g.output_len(32), Some(16));
        assert_eq!(g.output_len(7), Some(4));
        assert_eq!(ConvGeometry::new(3, 1, 0).unwrap().output_len(2), None);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let x = ones(Dims::new(4, 3, 3));
        let w = ConvWeights::new(5, 3, vec![ones(Dims::new(5, 3, 3))]).unwrap();
        let geom = ConvGeometry::new(3, 1, 1).unwrap();
        assert!(matches!(
            binary_conv2d(&x, &w, &geom),
            Err(KernelError::Shape(_))
        ));
        let w1 = ConvWeights::new(4, 1, vec![ones(Dims::new(4, 1, 1))]).unwrap();
        assert!(binary_conv2d(&x, &w1, &geom).is_err());
    }

    #[test]
    fn frac_threshold_length_checked() {
        let x = FracActivation::new(ones(Dims::new(2, 2, 2)), ones(Dims::new(2, 2, 2))).unwrap();
        let w = ConvWeights::new(2, 1, vec![ones(Dims::new(2, 1, 1)); 3]).unwrap();
        let geom = ConvGeometry::new(1, 1, 0).unwrap();
        assert!(frac_conv2d(&x, &w, &geom, &[0, 0]).is_err());
        let out = frac_conv2d(&x, &w, &geom, &[0, 0, 0]).unwrap();
        // base 2, lsb 2: 2 << 1 + 2
        assert!(out.output.values().iter().all(|&v| v == 6));
        assert_eq!(out.sparsity, 0.0);
    }

    #[test]
    fn sentinel_thresholds() {
        let dims = Dims::new(3, 3, 3);
        let x = FracActivation::new(
            PackedBitPlane::from_fn(dims, |c, h, w| (c + h + w) % 2 == 0),
            PackedBitPlane::from_fn(dims, |c, h, _| (c * h) % 3 == 0),
        )
        .unwrap();
        let w = ConvWeights::new(
            3,
            3,
            vec![PackedBitPlane::from_fn(Dims::new(3, 3, 3), |c, h, w| {
                c != h || w == 1
            })],
        )
        .unwrap();
        let geom = ConvGeometry::new(3, 1, 1).unwrap();
        let base = binary_conv2d(x.msb(), &w, &geom).unwrap();
        let closed = frac_conv2d(&x, &w, &geom, &[i32::MAX]).unwrap();
        assert_eq!(closed.sparsity, 1.0);
        for (o, b) in closed.output.values().iter().zip(base.values()) {
            assert_eq!(*o, b << 1);
        }
        let lsb = binary_conv2d(x.lsb(), &w, &geom).unwrap();
        let open = frac_conv2d(&x, &w, &geom, &[i32::MIN]).unwrap();
        assert_eq!(open.sparsity, 0.0);
        for ((o, b), l) in open
            .output
            .values()
            .iter()
            .zip(base.values())
            .zip(lsb.values())
        {
            assert_eq!(*o, (b << 1) + l);
        }
    }
}
