//! Exhaustive ground truth for small programs: concrete execution under
//! every secret and random assignment, compared against detector reports.

pub mod gaps;
pub mod gen;
pub mod machine;
pub mod program;
pub mod truth;

pub use gaps::{audit, Audit, KnownGap, CATALOGUE, XOR_MASK_REUSE};
pub use gen::{check_program, generate, Checked, GenParams};
pub use machine::Machine;
pub use program::{parse_program, OracleProgram, Slot, SlotKind, SlotLoc};
pub use truth::{
    check_uniform, compare, enumerate_leakage, enumerate_leakage_ordered, EnumOrder, GroundTruth, Miss, SiteKind,
    Verdict,
};

use crate::trace::ParseError;

#[derive(Debug, thiserror::Error)]
pub enum OracleError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("secret {secret:#x}, random {random:#x}: record {seq} at {addr:#x}: {message}")]
    Exec {
        secret: u32,
        random: u32,
        seq: u64,
        addr: u32,
        message: String,
    },
    #[error("secret {secret:#x}, random {random:#x}: no halt within {budget} instructions")]
    Budget { secret: u32, random: u32, budget: u64 },
    #[error("analysis: {0}")]
    Analysis(#[from] crate::detector::AnalysisError),
    #[error("{secret_bits} secret and {random_bits} random bits exceed the enumeration limit")]
    Infeasible { secret_bits: u32, random_bits: u32 },
}
