//! Small dense reverse-mode differentiation engine.
//!
//! Only two-dimensional `f64` tensors are supported; vectors are `1 x n`
//! rows. The primitive set is exactly what an attention encoder/decoder
//! stack with a regression head needs: matrix products, bias-add linear
//! layers, row/column concatenation, ReLU, row softmax, row layer
//! normalisation, scaling and a mean weighted squared error loss.
//!
//! ```
//! use alece_autodiff::{ParamStore, Tape, Tensor};
//!
//! let mut store = ParamStore::new();
//! let w = store.add("w", Tensor::row_vector(vec![1.0, 2.0]));
//! let mut tape = Tape::new();
//! let bound = tape.bind(&store).unwrap();
//! let loss = tape.sum(bound.var(w)).unwrap();
//! let grads = tape.backward(loss).unwrap().param_gradients(&tape, &store);
//! assert_eq!(grads.get(w).data(), &[1.0, 1.0]);
//! ```

mod adam;
pub mod checkpoint;
mod error;
pub mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use error::{AutodiffError, Result};
pub use params::{Gradients, ParamId, ParamStore};
pub use tape::{Adjoints, Bound, Tape, Var};
pub use tensor::{matmul, Tensor};
