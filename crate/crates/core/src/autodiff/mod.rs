//! Dense tensors, the gradient tape, parameter storage and the
//! finite-difference gradient checker.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{check_gradients, GradCheckEntry, GradCheckReport, FD_STEP};
pub use params::{ParamStore, ParamSnapshot};
pub use tape::{AttentionBlock, AttentionProbs, Tape, Var};
pub use tensor::Tensor;
#[cfg(test)]
pub(crate) use tensor::argmax;
