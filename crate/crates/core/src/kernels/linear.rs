use super::{expect_len, shape_err, KernelError};
use crate::fixed::{saturate, shift_round_even, Fx, Saturations, FRAC_BITS};

/// Fractional bits kept when pooled Q16.16 features enter the classifier.
pub const FEATURE_FRAC_BITS: u32 = 8;

/// Row-major `classes x features` matrix of 8-bit weights.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassifierWeights {
    classes: usize,
    features: usize,
    weights: Vec<i8>,
}

impl ClassifierWeights {
    pub fn new(classes: usize, features: usize, weights: Vec<i8>) -> Result<Self, KernelError> {
        if classes == 0 || features == 0 {
            return Err(shape_err(format!("empty classifier {classes}x{features}")));
        }
        expect_len("classifier weights", weights.len(), classes * features)?;
        Ok(Self {
            classes,
            features,
            weights,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn weights(&self) -> &[i8] {
        &self.weights
    }

    pub fn row(&self, class: usize) -> &[i8] {
        &self.weights[class * self.features..(class + 1) * self.features]
    }
}

/// Requantizes pooled Q16.16 features to integers with
/// [`FEATURE_FRAC_BITS`] fractional bits.
pub fn pooled_features(pooled: &[Fx]) -> Vec<i32> {
    pooled
        .iter()
        .map(|v| shift_round_even(v.raw() as i64, FRAC_BITS - FEATURE_FRAC_BITS) as i32)
        .collect()
}

/// `logits = W * f + bias`, accumulated in 64 bits and saturated to `i32`.
pub fn linear_classifier(
    features: &[i32],
    w: &ClassifierWeights,
    bias: &[i32],
    sat: &Saturations,
) -> Result<Vec<i32>, KernelError> {
    expect_len("feature vector", features.len(), w.features)?;
    expect_len("classifier bias", bias.len(), w.classes)?;
    let mut clipped = 0;
    let logits = (0..w.classes)
        .map(|j| {
            let acc: i64 = w
                .row(j)
                .iter()
                .zip(features)
                .map(|(&a, &f)| a as i64 * f as i64)
                .sum();
            let (v, hit) = saturate(acc + bias[j] as i64);
            clipped += hit as u64;
            v
        })
        .collect();
    sat.add(clipped);
    Ok(logits)
}

/// Index of the first maximum.
pub fn argmax(logits: &[i32]) -> Option<usize> {
    logits
        .iter()
        .enumerate()
        .fold(None, |best: Option<(usize, i32)>, (i, &v)| match best {
            Some((_, b)) if b >= v => best,
            _ => Some((i, v)),
        })
        .map(|(i, _)| i)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_and_zero_features() {
        let n = 4;
        let eye: Vec<i8> = (0..n * n).map(|i| (i % (n + 1) == 0) as i8).collect();
        let w = ClassifierWeights::new(n, n, eye).unwrap();
        let sat = Saturations::new();
        let f = [5, -3, 0, 1000];
        assert_eq!(linear_classifier(&f, &w, &[0; 4], &sat).unwrap(), f);
        let bias = [1, 2, 3, -4];
        assert_eq!(linear_classifier(&[0; 4], &w, &bias, &sat).unwrap(), bias);
    }

    #[test]
    fn saturates_on_overflow() {
        let w = ClassifierWeights::new(1, 2, vec![127, 127]).unwrap();
        let sat = Saturations::new();
        let out = linear_classifier(&[i32::MAX, i32::MAX], &w, &[0], &sat).unwrap();
        assert_eq!(out, [i32::MAX]);
        assert_eq!(sat.count(), 1);
    }

    #[test]
    fn dims_checked() {
        let w = ClassifierWeights::new(2, 3, vec![0; 6]).unwrap();
        let sat = Saturations::new();
        assert!(linear_classifier(&[0; 2], &w, &[0; 2], &sat).is_err());
        assert!(linear_classifier(&[0; 3], &w, &[0; 3], &sat).is_err());
        assert!(ClassifierWeights::new(2, 3, vec![0; 5]).is_err());
    }

    #[test]
    fn argmax_prefers_first() {
        assert_eq!(argmax(&[1, 5, 5, 2]), Some(1));
        assert_eq!(argmax(&[]), None);
    }

    #[test]
    fn feature_requantization() {
        let f = pooled_features(&[Fx::ONE, Fx(128), Fx(384), Fx(-128)]);
        // 1.0 -> 256; 0.5 of an output ulp ties to even.
        assert_eq!(f, [256, 0, 2, 0]);
    }
}
