//! Structured channel pruning from randomly initialized weights.

pub mod analysis;
pub mod arch;
pub mod config;
pub mod data;
pub mod gates;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod search;
pub mod tensor;
pub mod train;
