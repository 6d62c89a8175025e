//! Copy-move forgery detection.
//!
//! The crate is split along the two stages of the detector:
//!
//! - [`backbone`]: the self deep matching network. Feature extraction with
//!   atrous convolution, descriptor normalization, self-correlation reinforced
//!   by spatial attention, top-T sort pooling, skip matching and an ASPP
//!   decoder producing a per-pixel [`ScoreMap`]. Forward and backward passes
//!   are written by hand so the network trains without an external autograd.
//! - [`proposal`], [`keypoint`], [`fusion`] and [`crf`]: proposal selection
//!   driven by the score map, keypoint matching inside the selected boxes,
//!   superpixel score projection and fusion, and mean-field CRF refinement
//!   into a [`BinaryMask`].
//!
//! [`synth`] produces synthetic forgeries with ground truth and [`metrics`]
//! implements the pixel- and image-level evaluation protocols.
//!
//! The crate is `no_std` (it needs `alloc`). Enable the `std` feature for
//! runtime SIMD detection in the matrix kernels and `serde` for serializable
//! configuration types.
#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod backbone;
pub mod crf;
pub mod error;
pub mod fusion;
pub mod image;
pub mod keypoint;
pub(crate) mod math;
pub mod metrics;
pub mod pipeline;
pub mod proposal;
pub mod superpixel;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use image::{BinaryMask, RgbImage, ScoreMap};
pub use proposal::BBox;
pub use tensor::Tensor;
