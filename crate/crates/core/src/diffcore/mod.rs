//! Reverse-mode differentiation, parameter storage and the straight-through
//! Gumbel sampler.

pub mod gradcheck;
pub mod gumbel;
pub mod ops;
pub mod store;
pub mod tape;

pub use gradcheck::{check_gradients, GradCheckOptions, GradCheckReport};
pub use gumbel::{GumbelSampler, StSample};
pub use ops::{l2_normalize, softmax};
pub use store::{Gradients, Moments, ParamId, ParameterStore, Tensor};
pub use tape::{Tape, Var};
