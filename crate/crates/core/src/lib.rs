//! Hierarchical self-attention for high-resolution vision-language models.
//!
//! A small decoder consumes low-resolution image tokens followed by text
//! tokens. Its trailing layers additionally attend to a handful of
//! high-resolution patch tokens, chosen from the previous layer's attention
//! map, through separate key/value projections. Everything runs on a tiny
//! `f64` tensor substrate that counts FLOPs exactly, so the analytical cost
//! model in [`cost`] can be reconciled against real forward passes.

pub mod attention;
pub mod cost;
pub mod error;
pub mod model;
pub mod needle;
pub mod plot;
pub mod selection;
pub mod selftest;
pub mod tensor;
pub mod train;

pub use error::{FlexError, Result};
pub use tensor::{FlopCounter, Flops, GradTape, Matrix, Var};
