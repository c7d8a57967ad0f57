//! Attention-gated feature-pyramid fusion, bounding-polygon labels and
//! saliency evaluation metrics for mirror detection.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: rank-4 maps, the kernel set, a gradient tape and the
//!   `FMAP1` file format.
//! * [`attention`]: CBAM channel/spatial gates and the SE baseline.
//! * [`neck`]: DBL blocks, hypercolumn and stairstep fusion, neck assembly.
//! * [`polygon`]: polar vertex labels from masks, thresholding, scanline fill.
//! * [`metrics`]: MAE, F-beta, E-measure, S-measure, SSIM and dataset similarity.
//! * [`gradcheck`]: finite-difference verification of every differentiable block.
//! * [`cli`]: the `mirrorscope` command line front-end.

pub mod attention;
pub mod cli;
pub mod error;
pub mod gradcheck;
pub mod image;
pub mod metrics;
pub mod neck;
pub mod polygon;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{FeatureMap, GradTape, Matrix, Var};

/// The RNG behind every seeded draw in the crate.
pub fn seeded_rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    rand::SeedableRng::seed_from_u64(seed)
}
