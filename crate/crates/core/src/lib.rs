//! Simulation of an enclave build-and-sign supply chain: the toy `SET1`
//! container and assembler, measurement and RSA signing, a pre-signing
//! patcher, a deterministic enclave VM, and a majority-arbitration build
//! contract.
//!
//! The crate is `no_std` and only needs `alloc`.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod attack;
pub mod contract;
pub mod format;
pub mod samples;
pub mod signing;
pub mod vm;
