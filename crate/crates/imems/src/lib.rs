//! Segmentation by image embedding: represent a K-label mask as K grayscale
//! channels that each carry both the mask and the image intensity, train
//! image-to-image networks to predict those channels, and score the argmax
//! decode against ground truth.
//!
//! Modules:
//! - [`embedding`]: the channel codec (encode / decode / recover).
//! - [`data`]: dataset manifests, folds, and geometric preprocessing.
//! - [`synth`]: deterministic synthetic datasets for end-to-end checks.
//! - [`nets`]: encoder-decoder and patch discriminator networks on ndarray.
//! - [`losses`]: training objectives and their analytic gradients.
//! - [`training`]: optimizers, per-method training loops, grid search.
//! - [`evaluation`]: confusion matrices, F-measures, overlays, tables.

pub mod data;
pub mod embedding;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod losses;
pub mod nets;
pub mod synth;
pub mod training;

pub use error::{Error, Result};

/// Mix a user seed with a stream index (splitmix64 finalizer) so the
/// independent RNG streams of one run never overlap.
pub(crate) fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Floating-point element type for tensors. Networks train in `f32`;
/// gradient verification runs the same code in `f64`.
pub trait Scalar: ndarray::NdFloat {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn to_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }

    fn to_f64(self) -> f64 {
        self
    }
}
