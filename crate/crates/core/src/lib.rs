//! Actions as transformations.
//!
//! Videos arrive as per-frame feature matrices. A precondition tower embeds
//! the average of the early frames, an effect tower embeds the average of
//! the late frames, and each action class owns a `d x d` matrix that should
//! carry the first embedding onto the second. The split points are latent
//! and found by exhaustive search inside a fixed window; training alternates
//! that search with momentum-SGD steps on a contrastive cosine loss.

mod binio;
pub mod error;
pub mod dataset;
pub mod cli;
pub mod eval;
pub mod features;
pub mod grad;
pub mod manifest;
pub mod model;
pub mod parallel;
pub mod search;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
