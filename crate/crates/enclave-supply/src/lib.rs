//! Std side of the enclave supply-chain simulation: file formats, the
//! builder-enclave channel, scenario reports, benchmarks and the CLI glue.

pub mod agent_script;
pub mod bench;
pub mod central;
pub mod dist;
pub mod files;
pub mod scenario;
