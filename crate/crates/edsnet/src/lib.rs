//! Efficient video summarization: encode frame features through a swappable
//! token mixer, score anchor-based temporal proposals, and assemble a keyshot
//! summary under a length budget.
//!
//! The numeric core is self-contained: a small f32 tensor type, a reverse-mode
//! tape covering exactly the operations the model needs, and hand-rolled
//! FFT / wavelet / linear-algebra kernels.

pub mod bench;
pub mod cli;
pub mod config;
pub mod dataio;
pub mod error;
pub mod mixers;
pub mod numcore;
pub mod oracle;
pub mod pooling;
pub mod proposals;
pub mod summarize;
pub mod train;

pub use config::RunConfig;
pub use error::{EdsError, Result};
pub use numcore::Tensor;
