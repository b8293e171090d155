use rayon::prelude::*;

use super::{expect_len, FixedFeatureMap, IntFeatureMap, KernelError};
use crate::bitpack::Dims;
use crate::fixed::{mul_wide, saturate, shift_round_even, Fx, Saturations, FRAC_BITS};

/// Folded per-channel affine transform `y = scale * x + bias`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Affine {
    pub scale: Fx,
    pub bias: Fx,
}

impl Affine {
    pub const IDENTITY: Affine = Affine {
        scale: Fx::ONE,
        bias: Fx::ZERO,
    };
}

/// Biased PReLU: `PReLU(x - alpha) + gamma` with negative-side slope `slope`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BpreluParams {
    pub alpha: Fx,
    pub slope: Fx,
    pub gamma: Fx,
}

/// Applies `f` channel by channel, saturating each result to `i32`.
fn per_channel<T, P, F>(dims: Dims, input: &[T], params: &[P], sat: &Saturations, f: F) -> Vec<Fx>
where
    T: Copy + Sync,
    P: Sync,
    F: Fn(T, &P) -> i64 + Sync,
{
    let n = dims.spatial();
    let mut out = vec![Fx::ZERO; dims.len()];
    out.par_chunks_mut(n)
        .zip(input.par_chunks(n))
        .zip(params.par_iter())
        .for_each(|((dst, src), p)| {
            let mut clipped = 0;
            for (d, &s) in dst.iter_mut().zip(src) {
                let (v, hit) = saturate(f(s, p));
                clipped += hit as u64;
                *d = Fx(v);
            }
            sat.add(clipped);
        });
    out
}

/// Batch norm on raw convolution sums. An integer times a Q16.16 scale is
/// already exact in Q16.16, so only saturation can perturb the result.
pub fn batchnorm_apply(
    x: &IntFeatureMap,
    params: &[Affine],
    sat: &Saturations,
) -> Result<FixedFeatureMap, KernelError> {
    let d = x.dims();
    expect_len("batchnorm parameters", params.len(), d.channels)?;
    let values = per_channel(d, x.values(), params, sat, |v, p| {
        p.scale.raw() as i64 * v as i64 + p.bias.raw() as i64
    });
    FixedFeatureMap::new(d, values)
}

/// Batch norm on a Q16.16 map; the product rounds to nearest even.
pub fn batchnorm_apply_fixed(
    x: &FixedFeatureMap,
    params: &[Affine],
    sat: &Saturations,
) -> Result<FixedFeatureMap, KernelError> {
    let d = x.dims();
    expect_len("batchnorm parameters", params.len(), d.channels)?;
    let values = per_channel(d, x.values(), params, sat, |v, p| {
        mul_wide(p.scale, v) + p.bias.raw() as i64
    });
    FixedFeatureMap::new(d, values)
}

pub fn bprelu(
    x: &FixedFeatureMap,
    params: &[BpreluParams],
    sat: &Saturations,
) -> Result<FixedFeatureMap, KernelError> {
    let d = x.dims();
    expect_len("BPReLU parameters", params.len(), d.channels)?;
    let values = per_channel(d, x.values(), params, sat, |v, p| {
        let z = v.raw() as i64 - p.alpha.raw() as i64;
        let act = if z >= 0 {
            z
        } else {
            shift_round_even(p.slope.raw() as i64 * z, FRAC_BITS)
        };
        act + p.gamma.raw() as i64
    });
    FixedFeatureMap::new(d, values)
}
