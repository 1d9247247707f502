//! Mutual-information regularization for semi-supervised segmentation.
//!
//! The crate is organised bottom-up:
//!
//! - [`ndcore`]: array engine with reverse-mode gradients.
//! - [`transforms`]: invertible flips, quarter turns and cyclic shifts.
//! - [`infomax`]: joint distributions of cluster assignments and the
//!   global/local mutual-information, consistency and entropy losses.
//! - [`network`]: small U-shaped encoder-decoder with projection heads.
//! - [`data`]: synthetic pseudo-volumes, splits, augmentation and Dice.
//! - [`trainer`]: objective assembly, Adam, schedule and every method variant.
//! - [`toy`]: clustering of random 3-D points by maximizing mutual information.

pub mod data;
pub mod error;
pub mod infomax;
pub mod ndcore;
pub mod network;
pub mod rng;
pub mod toy;
pub mod trainer;
pub mod transforms;
pub mod verify;

pub use error::{Error, Result};
