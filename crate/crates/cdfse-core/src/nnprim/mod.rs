//! Neural-network primitives: flat f64 tensors, a reverse-mode tape over a
//! fixed op set, parameterized layers, Adam with warmup, and a
//! finite-difference gradient checker.

pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use params::{BufId, Buffer, Gradients, ParamId, ParamStore, Parameter};
pub use tape::{Phase, Tape, Var};
pub use tensor::Tensor;
