//! tandemnet: an image classifier that can exploit a paired diagnostic-style
//! text report when one exists and still answer alone when it does not.
//!
//! A small pre-activation residual CNN turns the image into a grid of region
//! features; an LSTM turns the report into per-sentence features; a dual
//! attention layer scores both sets jointly and mixes them into one context
//! vector; an MLP classifies the context plus a pooled visual skip
//! connection. Text is randomly withheld during training so the model stays
//! accurate with or without it.
//!
//! Everything runs on a small self-contained f64 tape (see [`tensor`]), and
//! a synthetic corpus generator (images + token reports with known ground
//! truth) makes the whole pipeline testable end to end.

pub mod attention;
pub mod captioner;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod head;
pub mod model;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod text;
pub mod trainer;
pub mod viz;
pub mod vocab;

pub use error::{Error, Result};
pub use tensor::tape::{Mode, Tape, TensorId};
pub use tensor::{Elem, SharedTensor, Tensor};
