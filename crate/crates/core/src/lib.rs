//! Traffic forecasting with temporal-folding graph tokens, node visibility
//! training and a small reverse-mode autodiff engine.

pub mod autograd;
pub mod cli;
pub mod config;
pub mod data;
pub mod exec;
pub mod model;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod tokenizer;
pub mod train;
pub mod visibility;
