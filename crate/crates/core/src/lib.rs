pub mod cli;
pub mod config;
pub mod data;
pub mod graph;
pub mod io;
pub mod metrics;
pub mod split;
pub mod tensor;
pub mod train;
