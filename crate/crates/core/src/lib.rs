//! Classification with multiple learnable text descriptors per class.
//!
//! Each class owns `K` descriptors, each a frozen context block followed by
//! `M` learnable tokens. Images are classified by their mean cosine
//! similarity to a class's descriptor embeddings. Training runs in two
//! stages: descriptors first, with the encoders frozen, then the image
//! adapter, with the descriptors frozen.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod harness;
pub mod inference;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
