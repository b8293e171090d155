use super::{shape_err, FixedFeatureMap, KernelError};
use crate::bitpack::Dims;
use crate::fixed::{div_round_even, saturate, Fx, Saturations};

/// Non-overlapping `k x k` average pooling (`stride == k`).
pub fn avgpool2d(
    x: &FixedFeatureMap,
    k: usize,
    stride: usize,
) -> Result<FixedFeatureMap, KernelError> {
    let d = x.dims();
    if k == 0 || stride != k {
        return Err(KernelError::Geometry(format!(
            "average pool needs stride == kernel, got {k}/{stride}"
        )));
    }
    if !d.height.is_multiple_of(k) || !d.width.is_multiple_of(k) {
        return Err(shape_err(format!("{d} not divisible by pool size {k}")));
    }
    let out = Dims::new(d.channels, d.height / k, d.width / k);
    let area = (k * k) as i64;
    let mut values = Vec::with_capacity(out.len());
    for c in 0..out.channels {
        for oh in 0..out.height {
            for ow in 0..out.width {
                let mut sum = 0i64;
                for dy in 0..k {
                    for dx in 0..k {
                        sum += x.get(c, oh * k + dy, ow * k + dx).raw() as i64;
                    }
                }
                // A mean of i32 values always fits in i32.
                values.push(Fx(div_round_even(sum, area) as i32));
            }
        }
    }
    FixedFeatureMap::new(out, values)
}

/// Per-channel spatial mean.
pub fn global_avgpool(x: &FixedFeatureMap) -> Vec<Fx> {
    let d = x.dims();
    let n = d.spatial() as i64;
    (0..d.channels)
        .map(|c| {
            let sum: i64 = x.channel(c).iter().map(|v| v.raw() as i64).sum();
            Fx(div_round_even(sum, n) as i32)
        })
        .collect()
}

/// Repeats the channel stack once: output is `[x | x]`.
pub fn channel_duplicate(x: &FixedFeatureMap) -> FixedFeatureMap {
    let d = x.dims();
    let mut values = Vec::with_capacity(2 * d.len());
    values.extend_from_slice(x.values());
    values.extend_from_slice(x.values());
    FixedFeatureMap::new(Dims::new(2 * d.channels, d.height, d.width), values)
        .expect("doubled length matches doubled dims")
}

/// Elementwise saturating sum.
pub fn shortcut_add(
    a: &FixedFeatureMap,
    b: &FixedFeatureMap,
    sat: &Saturations,
) -> Result<FixedFeatureMap, KernelError> {
    if a.dims() != b.dims() {
        return Err(shape_err(format!(
            "shortcut {} does not match residual {}",
            b.dims(),
            a.dims()
        )));
    }
    let mut clipped = 0;
    let values = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| {
            let (v, hit) = saturate(x.raw() as i64 + y.raw() as i64);
            clipped += hit as u64;
            Fx(v)
        })
        .collect();
    sat.add(clipped);
    FixedFeatureMap::new(a.dims(), values)
}
