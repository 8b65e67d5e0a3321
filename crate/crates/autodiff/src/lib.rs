//! Minimal deterministic reverse-mode automatic differentiation over dense
//! `f64` tensors.
//!
//! A [`Tape`] records each primitive as it is evaluated; [`Tape::backward`]
//! replays the record in reverse and leaves `dLoss/dLeaf` on every leaf that
//! asked for a gradient. The primitive set is deliberately small: exactly
//! what a convolutional pose/depth head needs.
//!
//! ```
//! use hdnet_autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]).with_requires_grad(true));
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq).unwrap();
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
//! ```

mod backward;
mod conv;
mod error;
mod gemm;
pub mod gradcheck;
pub mod init;
mod ops;
pub mod suite;
mod tape;
mod tensor;

pub use error::{AutodiffError, Result};
pub use gradcheck::{gradient_check, gradient_check_on, GradCheckConfig, GradCheckReport};
pub use ops::{BatchNormMode, BatchStats, Conv2dSpec};
pub use suite::{primitive_suite, primitive_suite_on, PrimitiveCheck};
pub use tape::{OpKind, Tape, Var};
pub use tensor::Tensor;
