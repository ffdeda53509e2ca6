//! A small reverse-mode automatic differentiation engine.
//!
//! The engine is deliberately narrow: rank-2 `f64` tensors, a tape rebuilt
//! for every forward pass, and exactly the primitives a compact
//! attention/recurrent policy network needs. Parameters live in a
//! [`ParamStore`] and are borrowed by the tape, so building a graph never
//! copies weights.
//!
//! ```
//! use tensorgrad::{ParamStore, Tape, Tensor, Gradients};
//!
//! let mut store = ParamStore::new();
//! let theta = store.insert("theta", Tensor::scalar(3.0)).unwrap();
//! let mut tape = Tape::new();
//! let x = tape.param(&store, theta);
//! let y = tape.square(x);
//! let mut grads = Gradients::zeros_like(&store);
//! tape.backward_into(y, &mut grads).unwrap();
//! assert_eq!(grads.get(theta).item(), 6.0);
//! ```

pub mod checkpoint;
mod error;
pub mod gradcheck;
pub mod gumbel;
pub mod nn;
pub mod optim;
mod params;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheck, GradCheckReport};
pub use optim::{Adam, AdamConfig};
pub use params::{glorot_uniform, Gradients, ParamId, ParamStore};
pub use tape::{NodeGrads, Tape, Var};
pub use tensor::Tensor;
