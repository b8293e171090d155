//! Bit-packed inference engine for binarized networks with fractional
//! (dynamically gated 2-bit) activations and thermometer-encoded inputs.
//!
//! All arithmetic on the inference path is integer: packed XNOR/popcount
//! convolutions and Q16.16 fixed point everywhere else. The [`oracle`] module
//! is a dense, deliberately naive reimplementation used to check the engine.

pub mod bench;
pub mod bitpack;
pub mod encoding;
pub mod fixed;
pub mod kernels;
pub mod model;
pub mod modelfile;
pub mod oracle;
pub mod ppm;
pub mod tensorfile;
pub mod verify;
