//! Unsupervised gland segmentation guided by a morphology cue.
//!
//! The pipeline has two learning stages. Proposal mining ([`spm`]) trains a
//! tiny convolutional encoder per image, clusters its features, picks the
//! darkest cluster as the gland border and fills what it encloses to obtain
//! a three-class proposal map. Semantic grouping ([`msg`]) then trains a
//! segmentation network on those proposals, pulling interior embeddings
//! towards the border prototype and relabelling background pixels that look
//! like gland tissue.
//!
//! Everything numerical (convolutions, gradients, clustering, morphology and
//! the evaluation metrics) lives in this crate and is exercised against
//! independent oracles in the test suite.

pub mod config;
pub mod error;
pub mod imaging;
pub mod metrics;
pub mod msg;
pub mod nn;
pub mod pipeline;
pub mod spm;
pub mod synth;

pub use error::{Error, Result};
