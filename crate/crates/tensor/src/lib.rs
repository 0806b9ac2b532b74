//! Dense `f64` tensors with a single-threaded reverse-mode gradient tape.
//!
//! Values live on a [`Tape`] and are manipulated through [`Var`] handles;
//! every primitive records itself so [`Tape::backward`] can replay the
//! chain rule in reverse. Learnable state is kept in a [`ParamStore`] and
//! bound to a fresh tape for each forward pass.
//!
//! Broadcasting aligns trailing dimensions. Non-differentiable selections
//! (argmax, matching) happen outside the tape on plain values.

mod backward;
pub mod error;
pub mod gradcheck;
pub mod ops;
pub mod params;
pub mod suite;
pub mod tape;
pub mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{gradcheck, gradcheck_with, GradcheckOptions, GradcheckReport};
pub use ops::elementwise::{broadcast_shape, sigmoid};
pub use ops::sampling::{logit_shift_value, trilinear_corners, Corner};
pub use params::{Bound, ParamId, ParamStore};
pub use tape::{Gradients, LevelSpec, Tape, Var, ZERO_INDEX};
pub use tensor::{numel, strides, Tensor};
