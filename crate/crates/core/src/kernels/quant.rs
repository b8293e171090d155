use super::{expect_len, FixedFeatureMap, FracActivation, KernelError};
use crate::bitpack::PackedBitPlane;
use crate::fixed::Fx;

/// The four levels of the 2-bit activation quantizer, in units of the scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum QuantLevel {
    NegThree,
    NegOne,
    PosOne,
    PosThree,
}

impl QuantLevel {
    /// Nearest level to `x / s`, ties toward the more positive level.
    ///
    /// Decision boundaries sit at `-2s`, `0` and `2s`, so this is three exact
    /// integer comparisons with no division.
    #[inline]
    pub fn nearest(x: Fx, s: Fx) -> Self {
        let x = x.raw() as i64;
        let two_s = 2 * s.raw() as i64;
        if x >= two_s {
            QuantLevel::PosThree
        } else if x >= 0 {
            QuantLevel::PosOne
        } else if x >= -two_s {
            QuantLevel::NegOne
        } else {
            QuantLevel::NegThree
        }
    }

    pub fn value(self) -> i8 {
        match self {
            QuantLevel::NegThree => -3,
            QuantLevel::NegOne => -1,
            QuantLevel::PosOne => 1,
            QuantLevel::PosThree => 3,
        }
    }

    /// `(msb, lsb)` bits (true = +1) with `value = 2 * msb + lsb`.
    #[inline]
    pub fn bits(self) -> (bool, bool) {
        match self {
            QuantLevel::PosThree => (true, true),
            QuantLevel::PosOne => (true, false),
            QuantLevel::NegOne => (false, true),
            QuantLevel::NegThree => (false, false),
        }
    }
}

/// Quantizes each element to `{-3, -1, 1, 3} * s[c]` and splits it into
/// MSB and LSB planes.
pub fn quantize2bit(x: &FixedFeatureMap, scale: &[Fx]) -> Result<FracActivation, KernelError> {
    let d = x.dims();
    expect_len("activation scales", scale.len(), d.channels)?;
    if let Some((c, s)) = scale.iter().enumerate().find(|(_, s)| s.raw() <= 0) {
        return Err(KernelError::Param(format!(
            "activation scale of channel {c} is {s}, must be positive"
        )));
    }
    let level = |c: usize, h: usize, w: usize| QuantLevel::nearest(x.get(c, h, w), scale[c]).bits();
    let msb = PackedBitPlane::from_fn(d, |c, h, w| level(c, h, w).0);
    let lsb = PackedBitPlane::from_fn(d, |c, h, w| level(c, h, w).1);
    FracActivation::new(msb, lsb)
}

/// Elementwise sign with `sign(0) = +1`.
pub fn sign_binarize(x: &FixedFeatureMap) -> PackedBitPlane {
    PackedBitPlane::from_fn(x.dims(), |c, h, w| x.get(c, h, w).raw() >= 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bitpack::Dims;

    fn map(raw: &[i32]) -> FixedFeatureMap {
        FixedFeatureMap::from_raw(Dims::new(1, 1, raw.len()), raw.to_vec()).unwrap()
    }

    #[test]
    fn tie_and_nearest_cases() {
        let s = Fx::ONE;
        // x/s = 2.5 -> +3
        assert_eq!(
            QuantLevel::nearest(Fx::from_f64(2.5), s),
            QuantLevel::PosThree
        );
        assert_eq!(QuantLevel::PosThree.bits(), (true, true));
        // x/s = 0 -> +1, tie resolved upward
        assert_eq!(QuantLevel::nearest(Fx::ZERO, s), QuantLevel::PosOne);
        assert_eq!(QuantLevel::PosOne.bits(), (true, false));
        // x/s = 2 and -2 are ties too
        assert_eq!(
            QuantLevel::nearest(Fx::from_int(2), s),
            QuantLevel::PosThree
        );
        assert_eq!(QuantLevel::nearest(Fx::from_int(-2), s), QuantLevel::NegOne);
        assert_eq!(
            QuantLevel::nearest(Fx::from_f64(-2.01), s),
            QuantLevel::NegThree
        );
    }

    #[test]
    fn planes_reconstruct_levels() {
        let x = map(&[-300_000, -65_536, -1, 0, 65_536, 131_072, 500_000]);
        let q = quantize2bit(&x, &[Fx::ONE]).unwrap();
        let levels: Vec<i8> = (0..7).map(|i| q.level(0, 0, i)).collect();
        assert_eq!(levels, [-3, -1, -1, 1, 1, 3, 3]);
    }

    #[test]
    fn scale_validation() {
        let x = map(&[0]);
        assert!(quantize2bit(&x, &[Fx::ZERO]).is_err());
        assert!(quantize2bit(&x, &[Fx::ONE, Fx::ONE]).is_err());
    }

    #[test]
    fn sign_of_zero_is_positive() {
        let x = map(&[0, -32768, 1, i32::MIN]);
        assert_eq!(sign_binarize(&x).unpack(), vec![1, -1, 1, -1]);
    }
}
