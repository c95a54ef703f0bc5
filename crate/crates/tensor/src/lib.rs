//! Minimal reverse-mode automatic differentiation over dense `f64` tensors
//! of rank at most four.
//!
//! The operation set is closed: only the shapes needed by the feature
//! encoder, the episodic heads and the adversarial losses are supported, so
//! every backward rule stays small enough to audit against finite
//! differences ([`grad_check`]).
//!
//! ```
//! use afa_tensor::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::vector(vec![1.0, 2.0, 3.0, 4.0]).unwrap());
//! let sq = tape.square(x).unwrap();
//! let loss = tape.mean(sq).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.wrt(x).data(), &[0.5, 1.0, 1.5, 2.0]);
//! ```

pub mod adam;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod ops;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, relative_error, GradCheckReport, FD_STEP};
pub use io::{load_tensor_file, save_tensor_file};
pub use ops::elementwise::{sigmoid, softplus};
pub use ops::linalg::solve;
pub use ops::norm::{BatchNormState, BatchStats, NormMode, BN_EPS, BN_MOMENTUM};
pub use rng::{Rng, Stream};
pub use tape::{Activation, Gradients, Tape, Var};
pub use tensor::Tensor;
