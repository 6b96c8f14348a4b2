//! Few-shot microscopy image denoising with a conditional adversarial
//! network, structural losses, and contrastive representation learning.
//!
//! The crate is organized around the stages of a denoising experiment:
//!
//! - [`data`]: acquisition stacks, ground-truth synthesis by frame
//!   averaging, percentile normalization, splits, patch sampling, and the
//!   stochastic augmentations used for contrastive view pairs.
//! - [`autodiff`]: a small reverse-mode differentiation engine over
//!   `f64` ndarrays. All training math runs through it so gradients can
//!   be verified against central finite differences at double precision.
//! - [`models`]: the U-Net generator, the patch discriminator, and the
//!   contrastive projection head, plus checkpoint serialization.
//! - [`losses`]: adversarial, L1, structural-dissimilarity, total
//!   variation, and NT-Xent terms with their weighted composition.
//! - [`metrics`]: evaluation-only PSNR / SSIM / NRMSE and report assembly.
//! - [`training`]: alternating generator/discriminator optimization with
//!   Adam, the linear decay schedule, seeded determinism, and resume.
//! - [`inference`]: tiled denoising of arbitrarily sized frames and
//!   qualitative crop export.
//! - [`harness`]: the experiment matrix (ablations x few-shot sizes x
//!   datasets) driven from a declarative plan file.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod harness;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod rng;
pub mod training;

pub use error::Error;

/// Crate result alias.
pub type Result<T> = std::result::Result<T, Error>;
