//! Library side of the `ldam` binary, shared with its tests.

pub mod commands;
pub mod fetch;
pub mod neurons;
pub mod sample;
