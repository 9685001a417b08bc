//! Bit-level refinement typing of x86 execution traces for cache side-channel
//! detection.

pub mod cli;
pub mod detector;
pub mod infer;
pub mod ir;
pub mod layout;
pub mod oracle;
pub mod synth;
pub mod trace;
