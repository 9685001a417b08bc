//! Synthetic traces for benchmarking: a loop body that loads key bytes,
//! indexes a table with them and mixes the result into public state.

use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ir::{AnnotTarget, Reg};
use crate::oracle::Machine;
use crate::trace::{AnnotKind, Annotation, AnnotationSet, Instruction, RegFile, TraceRecord};

pub const MAX_LENGTH: u64 = 10_000_000;
pub const MIN_BODY: usize = 9;
pub const MAX_BODY: usize = 1000;

pub const KEY_ADDR: u32 = 0x2000;
pub const KEY_LEN: u32 = 16;
const LOOP_ADDR: u32 = 0x0804_9000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthSpec {
    /// Instructions per loop iteration, including the loop control.
    pub body_len: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec { body_len: 10, seed: 0 }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("trace length {0} exceeds {MAX_LENGTH}")]
    TooLong(u64),
    #[error("loop body must have {MIN_BODY}..={MAX_BODY} instructions, got {0}")]
    Body(usize),
    #[error(transparent)]
    Io(#[from] io::Error),
}

const PADDING: [&str; 7] = [
    "lea edi,[ebx+edx*2+0x10]",
    "xor edi,ebx",
    "shl edi,0x3",
    "or edi,eax",
    "add edi,0x7",
    "cmp edi,edx",
    "cmove edi,ebx",
];

fn body(spec: &SynthSpec) -> Result<Vec<(u32, Instruction)>, SynthError> {
    if !(MIN_BODY..=MAX_BODY).contains(&spec.body_len) {
        return Err(SynthError::Body(spec.body_len));
    }
    let mut text = vec![
        format!("movzx eax,byte [esi+{KEY_ADDR:#x}]"),
        "xor eax,ebx".to_string(),
        "and eax,0xff".to_string(),
        "movzx edx,byte [eax+0x10000]".to_string(),
        "add ebx,edx".to_string(),
    ];
    for i in 0..spec.body_len - MIN_BODY {
        text.push(PADDING[i % PADDING.len()].to_string());
    }
    text.push("add esi,0x1".into());
    text.push(format!("and esi,{:#x}", KEY_LEN - 1));
    text.push("sub ecx,0x1".into());
    text.push(format!("jne {LOOP_ADDR:#x}"));
    Ok(text
        .iter()
        .enumerate()
        .map(|(i, t)| (LOOP_ADDR + 4 * i as u32, t.parse().expect("synthetic instructions parse")))
        .collect())
}

/// Writes exactly `length` records to `w`.
pub fn write_synthetic<W: Write>(spec: &SynthSpec, length: u64, mut w: W) -> Result<(), SynthError> {
    if length > MAX_LENGTH {
        return Err(SynthError::TooLong(length));
    }
    for_each_record(spec, length, |r| writeln!(w, "{r}"))?;
    w.flush()?;
    Ok(())
}

pub fn synthetic(spec: &SynthSpec, length: u64) -> Result<Vec<TraceRecord>, SynthError> {
    if length > MAX_LENGTH {
        return Err(SynthError::TooLong(length));
    }
    let mut out = Vec::with_capacity(length as usize);
    for_each_record(spec, length, |r| {
        out.push(r);
        Ok(())
    })?;
    Ok(out)
}

fn for_each_record<F>(spec: &SynthSpec, length: u64, mut emit: F) -> Result<(), SynthError>
where
    F: FnMut(TraceRecord) -> io::Result<()>,
{
    let body = body(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut regs = RegFile::default();
    for r in Reg::ALL {
        regs.set(r, rng.gen());
    }
    regs.set(Reg::Esi, 0);
    regs.set(Reg::Ecx, u32::MAX);
    let mut m = Machine::new(regs);
    for i in 0..KEY_LEN {
        m.mem.insert(KEY_ADDR + i, rng.gen());
    }
    for seq in 0..length {
        let (addr, ins) = &body[(seq % body.len() as u64) as usize];
        let rec = TraceRecord {
            seq,
            addr: *addr,
            instr: ins.clone(),
            regs: m.regs,
        };
        m.step(ins).expect("synthetic body executes");
        emit(rec)?;
    }
    Ok(())
}

/// The key bytes, secret from the first record.
pub fn annotations() -> AnnotationSet {
    AnnotationSet::new(vec![Annotation {
        kind: AnnotKind::Secret,
        target: AnnotTarget::Mem {
            addr: KEY_ADDR,
            len: KEY_LEN,
        },
        at_seq: 0,
    }])
    .expect("one annotation")
}
