//! Semantic segmentation as sequence-to-sequence prediction: images become
//! patch sequences, a transformer encoder models them with global attention
//! and a small decoder restores per-pixel logits. The guide in `book/`
//! walks through each stage.

// `!(x > y)` rejects NaN along with the ordinary failures.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod data;
pub mod decoders;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod model;
pub mod parallel;
pub mod params;
pub mod sequentializer;
pub mod tensor;
pub mod training;
pub mod viz;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};

/// The guide in `book/`, compiled so that its examples run as doctests.
#[cfg(doctest)]
pub mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    pub mod autodiff {}
    #[doc = include_str!("../../../book/src/sequence.md")]
    pub mod sequence {}
    #[doc = include_str!("../../../book/src/encoder.md")]
    pub mod encoder {}
    #[doc = include_str!("../../../book/src/decoders.md")]
    pub mod decoders {}
    #[doc = include_str!("../../../book/src/training.md")]
    pub mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    pub mod evaluation {}
    #[doc = include_str!("../../../book/src/visualization.md")]
    pub mod visualization {}
    #[doc = include_str!("../../../book/src/cli.md")]
    pub mod cli {}
}
