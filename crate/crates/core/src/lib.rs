//! RET-CLIP core: a small reverse-mode autodiff engine, transformer
//! encoders, the tripartite contrastive objective, training and evaluation.
//!
//! The crate is `no_std` (with `alloc`) so the numerics can be embedded
//! without an operating system. File formats and the command line live in
//! the `retclip` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod image;
pub mod math;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use image::Image;
pub use nn::{Graph, ParamStore};
pub use tensor::{Tape, Tensor, Var};
