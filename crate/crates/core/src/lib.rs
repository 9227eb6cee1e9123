//! Token-level fusion of domain-specialist language models.
//!
//! Several small decoder-only models, each pre-trained on one synthetic
//! domain, are combined per token: a shared gate scores every specialist's
//! hidden state, the scores are softmaxed over specialists, and the fused
//! next-token logits are the weighted sum of the specialists' logits.

pub mod analysis;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod fuser;
pub mod gate;
pub mod infer;
pub mod lm;
pub mod numcore;
pub mod params;
pub mod train;

pub use error::{Error, Result};
