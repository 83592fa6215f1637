//! Minimal reverse-mode differentiable array engine.

mod checkpoint;
mod conv;
mod gradcheck;
mod graph;
mod loss;
mod optim;
mod tensor;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use conv::Padding;
pub use gradcheck::{grad_check, relative_error};
pub use graph::{Graph, Var};
pub use loss::{sigmoid, Focal};
pub use optim::{sgd_momentum_step, Parameter};
pub use tensor::{resize_nearest, Tensor};
