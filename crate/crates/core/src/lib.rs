//! Core of a software-defined quantum network fabric.
//!
//! Everything in this crate is pure computation over owned state: the fiber
//! link model, the emulated subcarrier-wave QKD key sources, per-channel key
//! pools, the three data codecs, the flow switch with its control wire
//! format, the policy controller and a discrete-event scenario engine that
//! wires them together. No I/O happens here; the `qfabric` crate layers
//! sockets, HTTP, files and the CLI on top.
//!
//! The crate is `no_std` and only needs `alloc`.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod codec;
pub mod controller;
pub mod flow;
pub mod keystore;
pub mod net;
pub mod qkd;
pub mod scenario;
mod time;

pub use time::SimTime;
