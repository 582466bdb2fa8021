pub mod artifacts;
pub mod autodiff;
pub mod bench;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod graph;
pub mod mappo;
pub mod network;
pub mod sim;
pub mod tgn;
pub mod topo;
pub mod train;

pub use error::{Error, Result};
