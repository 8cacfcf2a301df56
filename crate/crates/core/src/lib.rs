//! Test-time adaptation of segmentation networks with input-space and
//! latent shape prompts, teacher/student alternating momentum updates, and
//! a synthetic domain-shift benchmark to exercise them on a desktop.

pub mod bench;
pub mod error;
pub mod nn;
pub mod prompts;
pub mod selfcheck;
pub mod shape;
pub mod tensor;
pub mod tta;

pub use error::{Error, Result};
