//! Trace input: parsing, annotations, lifting and the taint pre-pass.

pub mod annot;
pub mod instr;
pub mod lift;
pub mod record;
pub mod taint;

pub use annot::{build_initial_env, parse_annotations, AnnotKind, Annotation, AnnotationSet};
pub use instr::{CondCode, Instruction, MemOperand, Mnemonic, Operand, RegFile, Size};
pub use lift::{lift, BranchEvent, LiftError, Lifted};
pub use record::{parse_trace, trace_to_string, write_trace, ParseError, TraceRecord};
pub use taint::{taint_pass, TaintState, TaintTracker};

/// Resolves a memory operand against a register snapshot.
pub fn resolve_address(operand: &MemOperand, regs: &RegFile) -> u32 {
    operand.address(regs)
}
