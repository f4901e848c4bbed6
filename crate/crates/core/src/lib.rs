// Negated float comparisons reject NaN alongside out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attribute;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod lm;
pub mod optim;
pub mod rldaf;
pub mod scalar;
pub mod steer;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tape::{Axis, Tape, Var};
pub use tensor::Tensor;

/// Double-precision instantiations used by the command-line tools.
pub type Model = lm::LanguageModel<f64>;
pub type Prefix = lm::PrefixState<f64>;
pub type Disc = attribute::Discriminator<f64>;
pub type RlPolicy = rldaf::Policy<f64>;
