//! Simulator and toolchain for the PLENA flattened-systolic LLM accelerator.

pub mod formats;
pub mod hbm;
pub mod isa;
pub mod machine;
pub mod compiler;
pub mod quantizer;
pub mod dse;
pub mod cli;
