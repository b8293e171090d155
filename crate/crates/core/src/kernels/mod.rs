//! Layer kernels.
//!
//! Convolutions run on packed bipolar planes and accumulate signed dot
//! products in `i32`. Everything between convolutions lives in Q16.16. No
//! kernel touches floating point, so results are bitwise identical under any
//! rayon schedule.

mod conv;
mod linear;
mod norm;
mod pool;
mod quant;

pub use conv::{binary_conv2d, frac_conv2d, ConvGeometry, ConvWeights, FracConvOutput, UpdateMask};
pub use linear::{
    argmax, linear_classifier, pooled_features, ClassifierWeights, FEATURE_FRAC_BITS,
};
pub use norm::{batchnorm_apply, batchnorm_apply_fixed, bprelu, Affine, BpreluParams};
pub use pool::{avgpool2d, channel_duplicate, global_avgpool, shortcut_add};
pub use quant::{quantize2bit, sign_binarize, QuantLevel};

use thiserror::Error;

use crate::bitpack::{Dims, PackedBitPlane};
use crate::fixed::Fx;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KernelError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("unsupported geometry: {0}")]
    Geometry(String),
    #[error("invalid parameter: {0}")]
    Param(String),
}

pub(crate) fn shape_err(msg: impl Into<String>) -> KernelError {
    KernelError::Shape(msg.into())
}

pub(crate) fn expect_len(what: &str, actual: usize, expected: usize) -> Result<(), KernelError> {
    if actual == expected {
        Ok(())
    } else {
        Err(shape_err(format!(
            "{what} has {actual} entries, expected {expected}"
        )))
    }
}

/// Signed integer accumulator map (CHW).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntFeatureMap {
    dims: Dims,
    values: Vec<i32>,
}

impl IntFeatureMap {
    pub fn new(dims: Dims, values: Vec<i32>) -> Result<Self, KernelError> {
        expect_len("integer map", values.len(), dims.len())?;
        Ok(Self { dims, values })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn values(&self) -> &[i32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<i32> {
        self.values
    }

    pub fn get(&self, c: usize, h: usize, w: usize) -> i32 {
        self.values[self.dims.index(c, h, w)]
    }

    pub fn channel(&self, c: usize) -> &[i32] {
        let n = self.dims.spatial();
        &self.values[c * n..(c + 1) * n]
    }
}

/// Q16.16 feature map (CHW).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FixedFeatureMap {
    dims: Dims,
    values: Vec<Fx>,
}

impl FixedFeatureMap {
    pub fn new(dims: Dims, values: Vec<Fx>) -> Result<Self, KernelError> {
        expect_len("fixed map", values.len(), dims.len())?;
        Ok(Self { dims, values })
    }

    pub fn from_raw(dims: Dims, raw: Vec<i32>) -> Result<Self, KernelError> {
        Self::new(dims, raw.into_iter().map(Fx).collect())
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn values(&self) -> &[Fx] {
        &self.values
    }

    pub fn get(&self, c: usize, h: usize, w: usize) -> Fx {
        self.values[self.dims.index(c, h, w)]
    }

    pub fn channel(&self, c: usize) -> &[Fx] {
        let n = self.dims.spatial();
        &self.values[c * n..(c + 1) * n]
    }
}

/// Two-bit activation `2 * msb + lsb` stored as two bipolar planes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FracActivation {
    msb: PackedBitPlane,
    lsb: PackedBitPlane,
}

impl FracActivation {
    pub fn new(msb: PackedBitPlane, lsb: PackedBitPlane) -> Result<Self, KernelError> {
        if msb.dims() != lsb.dims() {
            return Err(shape_err(format!(
                "msb plane {} vs lsb plane {}",
                msb.dims(),
                lsb.dims()
            )));
        }
        Ok(Self { msb, lsb })
    }

    pub fn dims(&self) -> Dims {
        self.msb.dims()
    }

    pub fn msb(&self) -> &PackedBitPlane {
        &self.msb
    }

    pub fn lsb(&self) -> &PackedBitPlane {
        &self.lsb
    }

    /// Level in `{-3, -1, 1, 3}` at `(c, h, w)`.
    pub fn level(&self, c: usize, h: usize, w: usize) -> i8 {
        2 * self.msb.get(c, h, w) + self.lsb.get(c, h, w)
    }
}
