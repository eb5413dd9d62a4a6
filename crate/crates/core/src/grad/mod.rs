//! Minimal reverse-mode differentiation engine.
//!
//! Exactly the primitives the detector and the attack losses need, on dense
//! `f32` tensors with `f64` accumulation: convolution, dense layers, 2x2 max
//! pooling, relu/sigmoid/softmax, elementwise arithmetic, log, norms, means,
//! nearest-column distances, and the patch-embedding data movement ops.
//! Graphs are immutable once built; evaluation and differentiation are pure.
//!
//! Every gradient rule is checkable against central differences via
//! [`check::finite_difference_check`], with kink-adjacent coordinates
//! (relu/pool/argmin/clamp branch flips within 10 steps) detected and
//! excluded.

mod adam;
mod backward;
mod check;
mod graph;
mod tensor;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use check::{finite_difference_check, CoordStatus, FdConfig, FdEntry, FdReport};
pub use graph::{sigmoid as stable_sigmoid, Bindings, Graph, NodeId};
pub use tensor::Tensor;
