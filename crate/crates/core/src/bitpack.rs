//! Packed bipolar tensors and the XNOR/popcount dot-product primitives.
//!
//! A [`PackedBitPlane`] stores a `{-1, +1}` tensor of shape `(C, H, W)` with the
//! channel dimension packed into 64-bit words. At every spatial position `(h, w)`
//! word `k` holds channels `[64k, 64k + 64)`, least significant bit first. A set
//! bit encodes `+1`, a clear bit encodes `-1`, and lanes past `C` in the last word
//! of each position are always zero.
//!
//! All convolutions in the engine reduce to [`dot_words`]: the bipolar dot
//! product of two lane vectors is `2 * popcount(XNOR(a, b)) - valid`. The engine
//! works with this signed value rather than the raw popcount so that partial
//! sums compose across channel words and across padded taps.

use thiserror::Error;

/// Lanes per packed word.
pub const LANES: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BitpackError {
    #[error("element {index} is {value}, expected -1 or +1")]
    NotBipolar { index: usize, value: i64 },
    #[error("dims {dims} need {expected} values, got {actual}")]
    LengthMismatch {
        dims: Dims,
        expected: usize,
        actual: usize,
    },
    #[error("dims {dims} need {expected} words, got {actual}")]
    WordCountMismatch {
        dims: Dims,
        expected: usize,
        actual: usize,
    },
    #[error("padding lanes set in word {word}")]
    PaddingLanes { word: usize },
    #[error("channel count mismatch: {left} vs {right}")]
    ChannelMismatch { left: usize, right: usize },
    #[error("position ({h}, {w}) outside {dims}")]
    OutOfBounds { h: usize, w: usize, dims: Dims },
}

/// Tensor shape in `(channels, height, width)` order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dims {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Dims {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub const fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn spatial(&self) -> usize {
        self.height * self.width
    }

    /// Flat index of `(c, h, w)` in channel-major (CHW) order.
    #[inline]
    pub const fn index(&self, c: usize, h: usize, w: usize) -> usize {
        (c * self.height + h) * self.width + w
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// Number of 64-bit words needed for `channels` lanes.
#[inline]
pub const fn words_for(channels: usize) -> usize {
    channels.div_ceil(LANES)
}

/// Mask with the low `valid` lanes set.
#[inline]
pub const fn lane_mask(valid: usize) -> u64 {
    if valid >= LANES {
        u64::MAX
    } else {
        (1u64 << valid) - 1
    }
}

/// Bipolar `{-1, +1}` tensor packed along channels.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PackedBitPlane {
    dims: Dims,
    words_per_pos: usize,
    words: Vec<u64>,
}

impl PackedBitPlane {
    /// All lanes `-1`.
    pub fn negative(dims: Dims) -> Self {
        let words_per_pos = words_for(dims.channels);
        Self {
            dims,
            words_per_pos,
            words: vec![0; words_per_pos * dims.spatial()],
        }
    }

    /// Packs a CHW tensor of `-1`/`+1` values.
    pub fn pack<T>(values: &[T], dims: Dims) -> Result<Self, BitpackError>
    where
        T: Copy + Into<i64>,
    {
        if values.len() != dims.len() {
            return Err(BitpackError::LengthMismatch {
                dims,
                expected: dims.len(),
                actual: values.len(),
            });
        }
        if let Some((index, &v)) = values
            .iter()
            .enumerate()
            .find(|(_, &v)| !matches!(v.into(), -1 | 1))
        {
            return Err(BitpackError::NotBipolar {
                index,
                value: v.into(),
            });
        }
        Ok(Self::from_fn(dims, |c, h, w| {
            values[dims.index(c, h, w)].into() == 1
        }))
    }

    /// Builds a plane from a predicate returning `true` for `+1`.
    pub fn from_fn(dims: Dims, mut positive: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let mut plane = Self::negative(dims);
        let wpp = plane.words_per_pos;
        for h in 0..dims.height {
            for w in 0..dims.width {
                let base = (h * dims.width + w) * wpp;
                for c in 0..dims.channels {
                    if positive(c, h, w) {
                        plane.words[base + c / LANES] |= 1u64 << (c % LANES);
                    }
                }
            }
        }
        plane
    }

    /// Wraps raw words, rejecting a wrong word count or set padding lanes.
    pub fn from_words(dims: Dims, words: Vec<u64>) -> Result<Self, BitpackError> {
        let words_per_pos = words_for(dims.channels);
        let expected = words_per_pos * dims.spatial();
        if words.len() != expected {
            return Err(BitpackError::WordCountMismatch {
                dims,
                expected,
                actual: words.len(),
            });
        }
        let tail = dims.channels % LANES;
        if tail != 0 {
            let pad = !lane_mask(tail);
            for pos in 0..dims.spatial() {
                let word = pos * words_per_pos + words_per_pos - 1;
                if words[word] & pad != 0 {
                    return Err(BitpackError::PaddingLanes { word });
                }
            }
        }
        Ok(Self {
            dims,
            words_per_pos,
            words,
        })
    }

    /// Unpacks to a CHW tensor of `-1`/`+1`.
    pub fn unpack(&self) -> Vec<i8> {
        let d = self.dims;
        let mut out = vec![0i8; d.len()];
        for h in 0..d.height {
            for w in 0..d.width {
                let words = self.words_at(h, w);
                for c in 0..d.channels {
                    let bit = (words[c / LANES] >> (c % LANES)) & 1;
                    out[d.index(c, h, w)] = if bit == 1 { 1 } else { -1 };
                }
            }
        }
        out
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn words_per_pos(&self) -> usize {
        self.words_per_pos
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn into_words(self) -> Vec<u64> {
        self.words
    }

    /// Channel words at spatial position `(h, w)`.
    #[inline]
    pub fn words_at(&self, h: usize, w: usize) -> &[u64] {
        let start = (h * self.dims.width + w) * self.words_per_pos;
        &self.words[start..start + self.words_per_pos]
    }

    /// Bipolar value at `(c, h, w)`.
    pub fn get(&self, c: usize, h: usize, w: usize) -> i8 {
        let words = self.words_at(h, w);
        if (words[c / LANES] >> (c % LANES)) & 1 == 1 {
            1
        } else {
            -1
        }
    }
}

/// Bipolar dot product of the low `valid` lanes of two words.
///
/// Lanes at or above `valid` must be zero in both words.
#[inline]
pub fn dot_words(a: u64, b: u64, valid: usize) -> i32 {
    debug_assert!((1..=LANES).contains(&valid));
    let mask = lane_mask(valid);
    debug_assert_eq!(a & !mask, 0, "padding lanes set in lhs");
    debug_assert_eq!(b & !mask, 0, "padding lanes set in rhs");
    2 * (!(a ^ b) & mask).count_ones() as i32 - valid as i32
}

/// Bipolar dot product of two planes' channel vectors at one position.
pub fn dot_planes_at(
    x: &PackedBitPlane,
    w: &PackedBitPlane,
    position: (usize, usize),
) -> Result<i32, BitpackError> {
    let (h, col) = position;
    if x.dims.channels != w.dims.channels {
        return Err(BitpackError::ChannelMismatch {
            left: x.dims.channels,
            right: w.dims.channels,
        });
    }
    for plane in [x, w] {
        if h >= plane.dims.height || col >= plane.dims.width {
            return Err(BitpackError::OutOfBounds {
                h,
                w: col,
                dims: plane.dims,
            });
        }
    }
    Ok(dot_channel_words(
        x.words_at(h, col),
        w.words_at(h, col),
        x.dims.channels,
    ))
}

/// Sum of [`dot_words`] over a run of channel words holding `channels` lanes.
#[inline]
pub(crate) fn dot_channel_words(x: &[u64], w: &[u64], channels: usize) -> i32 {
    let mut remaining = channels;
    let mut acc = 0;
    for (&a, &b) in x.iter().zip(w) {
        let valid = remaining.min(LANES);
        acc += dot_words(a, b, valid);
        remaining -= valid;
    }
    acc
}

/// Count of differing lanes across a run of channel words.
///
/// With zeroed padding lanes, `channels - 2 * mismatches` equals the bipolar dot
/// product, so the hot convolution loop skips per-word masking.
#[inline]
pub(crate) fn mismatches(x: &[u64], w: &[u64]) -> u32 {
    x.iter().zip(w).map(|(&a, &b)| (a ^ b).count_ones()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_bipolar(rng: &mut ChaCha8Rng, n: usize) -> Vec<i8> {
        (0..n)
            .map(|_| if rng.random::<bool>() { 1 } else { -1 })
            .collect()
    }

    #[test]
    fn all_positive_three_channels() {
        let dims = Dims::new(3, 2, 2);
        let plane = PackedBitPlane::pack(&vec![1i8; dims.len()], dims).unwrap();
        assert!(plane.words().iter().all(|&w| w == 0b111));
    }

    #[test]
    fn all_negative_is_zero() {
        let dims = Dims::new(70, 3, 2);
        let plane = PackedBitPlane::pack(&vec![-1i8; dims.len()], dims).unwrap();
        assert_eq!(plane.words().len(), 2 * 6);
        assert!(plane.words().iter().all(|&w| w == 0));
    }

    #[test]
    fn round_trip_seeded_c70() {
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        for _ in 0..100 {
            let dims = Dims::new(70, rng.random_range(1..5), rng.random_range(1..5));
            let x = random_bipolar(&mut rng, dims.len());
            let plane = PackedBitPlane::pack(&x, dims).unwrap();
            assert_eq!(plane.unpack(), x);
            let tail = !lane_mask(70 - 64);
            for pos in 0..dims.spatial() {
                assert_eq!(plane.words()[pos * 2 + 1] & tail, 0);
            }
        }
    }

    #[test]
    fn alternating_pattern_c64() {
        let dims = Dims::new(64, 1, 1);
        let x: Vec<i8> = (0..64).map(|i| if i % 2 == 0 { 1 } else { -1 }).collect();
        let plane = PackedBitPlane::pack(&x, dims).unwrap();
        assert_eq!(plane.words(), &[0x5555_5555_5555_5555]);
        assert_eq!(plane.unpack(), x);
    }

    #[test]
    fn single_word_one_is_plus_one() {
        let plane = PackedBitPlane::from_words(Dims::new(1, 1, 1), vec![1]).unwrap();
        assert_eq!(plane.unpack(), vec![1]);
    }

    #[test]
    fn pack_rejects_non_bipolar_with_index() {
        let err = PackedBitPlane::pack(&[1i8, -1, 0, 1], Dims::new(4, 1, 1)).unwrap_err();
        assert_eq!(err, BitpackError::NotBipolar { index: 2, value: 0 });
    }

    #[test]
    fn pack_rejects_dims_mismatch() {
        let err = PackedBitPlane::pack(&[1i8; 5], Dims::new(2, 1, 2)).unwrap_err();
        assert!(matches!(err, BitpackError::LengthMismatch { .. }));
    }

    #[test]
    fn from_words_rejects_padding() {
        let err = PackedBitPlane::from_words(Dims::new(3, 1, 1), vec![0b1000]).unwrap_err();
        assert_eq!(err, BitpackError::PaddingLanes { word: 0 });
    }

    #[test]
    fn dot_words_identical_and_antipodal() {
        let a = 0xDEAD_BEEF_0123_4567u64;
        assert_eq!(dot_words(a, a, 64), 64);
        assert_eq!(dot_words(a, !a, 64), -64);
    }

    #[test]
    fn dot_words_matches_lane_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        for _ in 0..200 {
            let mask = lane_mask(37);
            let a = rng.random::<u64>() & mask;
            let b = rng.random::<u64>() & mask;
            let expected: i32 = (0..37)
                .map(|i| {
                    let x = if (a >> i) & 1 == 1 { 1 } else { -1 };
                    let y = if (b >> i) & 1 == 1 { 1 } else { -1 };
                    x * y
                })
                .sum();
            assert_eq!(dot_words(a, b, 37), expected);
        }
    }

    #[test]
    fn dot_planes_trivial_cases() {
        let dims = Dims::new(128, 1, 1);
        let x = PackedBitPlane::from_fn(dims, |c, _, _| c % 3 == 0);
        assert_eq!(dot_planes_at(&x, &x, (0, 0)).unwrap(), 128);

        let pos = PackedBitPlane::pack(&[1i8], Dims::new(1, 1, 1)).unwrap();
        let neg = PackedBitPlane::pack(&[-1i8], Dims::new(1, 1, 1)).unwrap();
        assert_eq!(dot_planes_at(&pos, &neg, (0, 0)).unwrap(), -1);
    }

    #[test]
    fn dot_planes_c96_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(96);
        let dims = Dims::new(96, 2, 3);
        for _ in 0..50 {
            let xs = random_bipolar(&mut rng, dims.len());
            let ws = random_bipolar(&mut rng, dims.len());
            let x = PackedBitPlane::pack(&xs, dims).unwrap();
            let w = PackedBitPlane::pack(&ws, dims).unwrap();
            for h in 0..2 {
                for col in 0..3 {
                    let dense: i32 = (0..96)
                        .map(|c| {
                            xs[dims.index(c, h, col)] as i32 * ws[dims.index(c, h, col)] as i32
                        })
                        .sum();
                    assert_eq!(dot_planes_at(&x, &w, (h, col)).unwrap(), dense);
                }
            }
        }
    }

    #[test]
    fn dot_planes_shape_mismatch() {
        let x = PackedBitPlane::negative(Dims::new(3, 1, 1));
        let w = PackedBitPlane::negative(Dims::new(4, 1, 1));
        assert!(matches!(
            dot_planes_at(&x, &w, (0, 0)),
            Err(BitpackError::ChannelMismatch { .. })
        ));
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        fn bipolar_tensor() -> impl Strategy<Value = (Dims, Vec<i8>)> {
            (1usize..=130, 1usize..4, 1usize..4).prop_flat_map(|(c, h, w)| {
                let dims = Dims::new(c, h, w);
                (
                    Just(dims),
                    proptest::collection::vec(prop_oneof![Just(-1i8), Just(1i8)], dims.len()),
                )
            })
        }

        proptest! {
            #[test]
            fn unpack_inverts_pack((dims, x) in bipolar_tensor()) {
                let plane = PackedBitPlane::pack(&x, dims).unwrap();
                prop_assert_eq!(plane.unpack(), x);
                prop_assert_eq!(plane.words().len(), dims.spatial() * words_for(dims.channels));
            }

            #[test]
            fn self_and_antipodal_dot(a in any::<u64>(), valid in 1usize..=64) {
                let mask = lane_mask(valid);
                let a = a & mask;
                prop_assert_eq!(dot_words(a, a, valid), valid as i32);
                prop_assert_eq!(dot_words(a, !a & mask, valid), -(valid as i32));
            }

            #[test]
            fn dot_parity(a in any::<u64>(), b in any::<u64>(), valid in 1usize..=64) {
                let mask = lane_mask(valid);
                let d = dot_words(a & mask, b & mask, valid);
                prop_assert_eq!(d.rem_euclid(2) as usize, valid % 2);
                prop_assert!(d.unsigned_abs() as usize <= valid);
            }
        }
    }
}
