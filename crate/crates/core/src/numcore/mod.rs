//! Dense tensors and a define-by-run reverse-mode tape.

pub mod dense;
mod tape;
mod tensor;

pub use dense::{mul_count, reset_mul_count, Mat, Real};
pub use tape::{Tape, Var};
pub(crate) use tape::{band, rope_tables, rotate_pairs};
pub use tensor::Tensor;
