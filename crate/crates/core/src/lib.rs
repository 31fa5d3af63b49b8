#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod cli;
pub mod cohort;
pub mod config;
pub mod container;
pub mod error;
pub mod eval;
pub mod frope;
pub mod nn;
pub mod omics;
pub mod probes;
pub mod rng;
pub mod siglip;
pub mod tensor;
pub mod train;
pub mod verify;

pub use autodiff::{ParamSet, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
