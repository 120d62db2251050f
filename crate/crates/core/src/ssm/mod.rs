//! Selective state-space scan kernels, the SPSS block and the hierarchical
//! decoder built from it.

pub mod bench;
pub mod block;
pub mod decoder;
pub mod kernels;

pub use bench::{scan_runtime_benchmark, BenchRow};
pub use block::{SpssBlock, SpssBlockConfig};
pub use decoder::{Decoder, DecoderConfig};
pub use kernels::{discretize, selective_scan_parallel, selective_scan_sequential, Discretized};
