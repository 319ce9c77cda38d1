//! Concerto self-attention, cross-dimensional communication, the gated-dconv
//! MLP block and the Concertormer U-Net, with tooling to verify them.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`], [`kernels`], [`tape`]: dense tensors, forward kernels and a
//!   reverse-mode tape; [`gradcheck`] compares the tape to finite differences.
//! * [`zoo`]: full, windowed and transposed self-attention plus the
//!   direct-formula concerto prototype, used as oracles.
//! * [`concerto`]: the efficient concerto attention module.
//! * [`block`]: the gated-dconv MLP and the fused block.
//! * [`model`]: the multi-scale U-Net, its loss and the analytic cost counter.
//! * [`golden`], [`bench`], [`infer`], [`overfit`], [`permtest`]: the
//!   analysis tools behind the `concertormer` binary.

pub mod error;
pub mod prng;
pub mod tensor;
pub mod kernels;
pub mod io;
pub mod tape;
pub mod gradcheck;
pub mod params;
pub mod cost;
pub mod zoo;
pub mod concerto;
pub mod block;
pub mod model;
pub mod overfit;
pub mod permtest;
pub mod golden;
pub mod bench;
pub mod infer;

pub use error::{Error, Result};
pub use prng::Prng;
pub use tape::{Grads, Tape, Var};
pub use tensor::{Dist, Real, Tensor};
