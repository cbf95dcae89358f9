//! Dense tensors and a define-by-run reverse-mode differentiation tape.
//!
//! A [`Graph`] borrows a [`ParamStore`] immutably while recording a forward
//! pass. [`Graph::backward`] returns [`Gradients`] keyed by parameter; the
//! caller then loads them into the store (running grad hooks) and steps the
//! optimizer. Keeping forward/backward read-only on the store lets frozen
//! models be evaluated from several threads.

mod graph;
mod tensor;

pub use graph::{sigmoid, Gradients, Graph, Var};
pub use tensor::{GradHook, ParamId, ParamStore, Parameter, Tensor};
