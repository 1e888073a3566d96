//! Linearizing softmax attention into gated linear attention plus
//! sliding-window attention with meta memory.

pub mod bench;
pub mod error;
pub mod featgate;
pub mod gla;
pub mod model;
pub mod numcore;
pub mod oracle;
pub mod pipeline;
pub mod refattn;
pub mod swa;
pub mod verify;

pub use error::{Error, Result};
