//! Dual-process policy runtime.
//!
//! A large autoregressive model ([`lsys2`]) turns the first camera frame and
//! the instruction into a latent feature once; a small policy ([`ssys1`])
//! consumes that latent with fresh observations at every control step. The
//! [`runtime`] decides when the large model runs and meters both, and
//! [`evalbench`] reproduces the success, timing and ablation experiments on
//! the [`simenv`] tabletop.

pub mod evalbench;
pub mod hashing;
pub mod lsys2;
pub mod runtime;
pub mod simenv;
pub mod ssys1;
pub mod tensor;
