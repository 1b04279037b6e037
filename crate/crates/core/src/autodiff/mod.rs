//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every primitive as it is evaluated. Primitives cover
//! elementwise arithmetic, reductions, shape manipulation, GEMM-backed affine
//! maps and 2-D correlation, real FFTs, and a low-rank kernel bank used by the
//! cortical stage. Complex values travel as paired real/imaginary tensors.

mod adam;
mod bank;
mod conv;
mod gradcheck;
mod spectral;
mod tape;
mod tensor;

pub use adam::AdamState;
pub(crate) use conv::conv2d_shifted;
pub use gradcheck::{
    check_components, grad_check, relative_error, CheckStatus, ComponentCheck, GRAD_FLOOR,
};
pub(crate) use tape::gelu;
pub use tape::{Gradients, Pins, Tape, Var, DROP};
pub use tensor::Tensor;
