//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles; calling
//! [`Tape::backward`] on a scalar sweeps the recording once in reverse and returns
//! gradients for the tracked leaves. Parameters live in a [`ParamStore`] outside any
//! tape and are bound afresh for each step, so a tape is created per training step
//! and thrown away after the update. Only first derivatives are supported.
//!
//! Operator set: elementwise `add`/`sub`/`mul`/`div` with numpy broadcasting,
//! `matmul`, `conv2d` (stride 1, zero "same" padding), `maxpool2x2` (floors odd
//! extents: 28 -> 14 -> 7 -> 3), `relu`, `exp`, `log`, `sqrt`, `square`, `clamp`,
//! `logsumexp`, `softmax`, `sum`, `mean`, `gather`, `concat`, `reshape`, `transpose`.
//!
//! ```
//! use dvsmc::autodiff::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.var(Tensor::from_vec(vec![3.0]));
//! let y = x.square().sum();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.wrt(x).data(), &[6.0]);
//! ```

mod conv;
mod optim;
mod params;
mod tape;
mod tensor;

pub use optim::{AdamW, AdamWConfig};
pub use params::{ParamId, ParamStore, ParamVars};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
