//! Prompt-enhanced graph clustering for continual test-time adaptation.

pub mod adapt;
pub mod backbone;
pub mod checkpoint;
pub mod dgcs;
pub mod error;
pub mod fd;
pub mod gradcheck;
pub mod losses;
pub mod nodes;
pub mod optim;
pub mod ot;
pub mod rng;
pub mod spfe;
pub mod stream;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::{Purpose, Rng};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor2;
