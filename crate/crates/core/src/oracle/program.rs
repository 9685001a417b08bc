//! Oracle programs: instruction templates plus public initial state and the
//! bit slots that bind enumerated secret and random bits to locations.
//!
//! ```text
//! REGS ebp=0xbf000010 esp=0xbf000000
//! MEM 0x2000 00 11 22 33
//! SLOT secret 0 mem 0x2000 0
//! SLOT random 0 reg ebx 4
//! BC 0x100 0x102 0x110 0x140
//! I 0x100 mov eax,[0x2000]
//! ```
//!
//! Trace lines (`T ...`) are accepted as instruction templates; the register
//! snapshot of the first one seeds the initial registers when no `REGS` line
//! is given.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use super::machine::{Effect, Machine};
use super::OracleError;
use crate::ir::{AnnotTarget, Reg, RegRef};
use crate::layout::{parse_branch_line, BranchTable};
use crate::trace::instr::parse_int;
use crate::trace::record::parse_record_line;
use crate::trace::{AnnotKind, Annotation, AnnotationSet, Instruction, ParseError, RegFile, TraceRecord};

pub const MAX_SLOT_BITS: u32 = 16;
pub const DEFAULT_BUDGET: u64 = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SlotKind {
    Secret,
    Random,
}

impl SlotKind {
    fn name(self) -> &'static str {
        match self {
            SlotKind::Secret => "secret",
            SlotKind::Random => "random",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SlotLoc {
    Mem { addr: u32, bit: u8 },
    Reg { reg: Reg, bit: u8 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Slot {
    pub kind: SlotKind,
    pub index: u8,
    pub loc: SlotLoc,
}

impl fmt::Display for Slot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SLOT {} {} ", self.kind.name(), self.index)?;
        match self.loc {
            SlotLoc::Mem { addr, bit } => write!(f, "mem {addr:#x} {bit}"),
            SlotLoc::Reg { reg, bit } => write!(f, "reg {reg} {bit}"),
        }
    }
}

/// One executed instruction, as seen by an observer.
pub struct StepView<'a> {
    pub seq: u64,
    pub addr: u32,
    pub instr: &'a Instruction,
    pub pre: RegFile,
    pub effect: &'a Effect,
    pub after: &'a Machine,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleProgram {
    pub instrs: Vec<(u32, Instruction)>,
    pub init_regs: RegFile,
    pub init_mem: BTreeMap<u32, u8>,
    pub slots: Vec<Slot>,
    pub table: BranchTable,
    pub budget: u64,
}

impl OracleProgram {
    /// Checks slot numbering, target consistency and instruction order.
    pub fn new(
        instrs: Vec<(u32, Instruction)>,
        init_regs: RegFile,
        init_mem: BTreeMap<u32, u8>,
        slots: Vec<Slot>,
        table: BranchTable,
    ) -> Result<OracleProgram, String> {
        if let Some(w) = instrs.windows(2).find(|w| w[0].0 >= w[1].0) {
            return Err(format!("instruction addresses must increase ({:#x} then {:#x})", w[0].0, w[1].0));
        }
        for kind in [SlotKind::Secret, SlotKind::Random] {
            let mut idx: Vec<u8> = slots.iter().filter(|s| s.kind == kind).map(|s| s.index).collect();
            idx.sort_unstable();
            if idx.len() as u32 > MAX_SLOT_BITS {
                return Err(format!("at most {MAX_SLOT_BITS} {} bits", kind.name()));
            }
            if idx.iter().enumerate().any(|(i, x)| *x as usize != i) {
                return Err(format!("{} bits must be numbered 0.. without gaps or repeats", kind.name()));
            }
        }
        let mut owner: HashMap<AnnotTarget, SlotKind> = HashMap::new();
        let mut bits = std::collections::HashSet::new();
        for s in &slots {
            match s.loc {
                SlotLoc::Mem { bit, .. } if bit > 7 => return Err(format!("`{s}`: byte bit out of range")),
                SlotLoc::Reg { bit, .. } if bit > 31 => return Err(format!("`{s}`: register bit out of range")),
                _ => {}
            }
            if !bits.insert(s.loc) {
                return Err(format!("`{s}`: location bound twice"));
            }
            let t = slot_target(s.loc);
            if *owner.entry(t).or_insert(s.kind) != s.kind {
                return Err(format!("`{s}`: secret and random bits share a location"));
            }
        }
        Ok(OracleProgram {
            instrs,
            init_regs,
            init_mem,
            slots,
            table,
            budget: DEFAULT_BUDGET,
        })
    }

    pub fn secret_bits(&self) -> u32 {
        self.slots.iter().filter(|s| s.kind == SlotKind::Secret).count() as u32
    }

    pub fn random_bits(&self) -> u32 {
        self.slots.iter().filter(|s| s.kind == SlotKind::Random).count() as u32
    }

    /// Initial machine state for one assignment.
    pub fn initial(&self, secret: u32, random: u32) -> Machine {
        let mut m = Machine::new(self.init_regs);
        m.mem.extend(self.init_mem.iter().map(|(a, b)| (*a, *b)));
        for s in &self.slots {
            let v = match s.kind {
                SlotKind::Secret => secret,
                SlotKind::Random => random,
            } >> s.index
                & 1;
            match s.loc {
                SlotLoc::Mem { addr, bit } => {
                    let b = m.mem.entry(addr).or_insert(0);
                    *b = (*b & !(1 << bit)) | (v as u8) << bit;
                }
                SlotLoc::Reg { reg, bit } => {
                    let r = m.regs.get(reg);
                    m.regs.set(reg, (r & !(1 << bit)) | v << bit);
                }
            }
        }
        m
    }

    /// Runs one assignment to completion, calling `observe` after each
    /// instruction. Returns the final machine.
    pub fn execute<F: FnMut(&StepView)>(&self, secret: u32, random: u32, mut observe: F) -> Result<Machine, OracleError> {
        let index: HashMap<u32, usize> = self.instrs.iter().enumerate().map(|(i, (a, _))| (*a, i)).collect();
        let mut m = self.initial(secret, random);
        let mut pc = 0usize;
        let mut seq = 0u64;
        while pc < self.instrs.len() {
            if seq >= self.budget {
                return Err(OracleError::Budget {
                    secret,
                    random,
                    budget: self.budget,
                });
            }
            let (addr, ins) = &self.instrs[pc];
            let pre = m.regs;
            let effect = m.step(ins).map_err(|message| OracleError::Exec {
                secret,
                random,
                seq,
                addr: *addr,
                message,
            })?;
            observe(&StepView {
                seq,
                addr: *addr,
                instr: ins,
                pre,
                effect: &effect,
                after: &m,
            });
            seq += 1;
            pc = match effect.jump {
                Some(t) => match index.get(&t) {
                    Some(i) => *i,
                    None => break,
                },
                None => pc + 1,
            };
        }
        Ok(m)
    }

    /// The execution trace of one assignment.
    pub fn trace(&self, secret: u32, random: u32) -> Result<Vec<TraceRecord>, OracleError> {
        let mut out = Vec::new();
        self.execute(secret, random, |s| {
            out.push(TraceRecord {
                seq: s.seq,
                addr: s.addr,
                instr: s.instr.clone(),
                regs: s.pre,
            })
        })?;
        Ok(out)
    }

    /// Secret and random locations as annotations at record 0. Whole bytes
    /// and registers are annotated.
    pub fn annotations(&self) -> AnnotationSet {
        let mut seen: BTreeMap<String, Annotation> = BTreeMap::new();
        for s in &self.slots {
            let kind = match s.kind {
                SlotKind::Secret => AnnotKind::Secret,
                SlotKind::Random => AnnotKind::Random,
            };
            let target = slot_target(s.loc);
            seen.entry(target.to_string()).or_insert(Annotation { kind, target, at_seq: 0 });
        }
        AnnotationSet::new(seen.into_values().collect()).expect("targets are distinct")
    }
}

fn slot_target(loc: SlotLoc) -> AnnotTarget {
    match loc {
        SlotLoc::Mem { addr, .. } => AnnotTarget::Mem { addr, len: 1 },
        SlotLoc::Reg { reg, .. } => AnnotTarget::Reg(RegRef::full(reg)),
    }
}

impl fmt::Display for OracleProgram {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "REGS")?;
        for r in Reg::ALL {
            write!(f, " {r}={:#x}", self.init_regs.get(r))?;
        }
        writeln!(f)?;
        let bytes: Vec<(u32, u8)> = self.init_mem.iter().map(|(a, b)| (*a, *b)).collect();
        // runs of consecutive bytes, 16 per line
        let mut i = 0;
        while i < bytes.len() {
            let start = bytes[i].0;
            write!(f, "MEM {start:#x}")?;
            let mut n = 0;
            while i < bytes.len() && bytes[i].0 == start.wrapping_add(n) && n < 16 {
                write!(f, " {:02x}", bytes[i].1)?;
                i += 1;
                n += 1;
            }
            writeln!(f)?;
        }
        for s in &self.slots {
            writeln!(f, "{s}")?;
        }
        write!(f, "{}", self.table)?;
        for (a, ins) in &self.instrs {
            writeln!(f, "I {a:#x} {ins}")?;
        }
        Ok(())
    }
}

fn parse_slot(words: &[&str]) -> Result<Slot, String> {
    let [kind, index, loc, target, bit] = words else {
        return Err("expected `SLOT secret|random <index> mem 0x<addr> <bit>` or `... reg <name> <bit>`".into());
    };
    let kind = match *kind {
        "secret" => SlotKind::Secret,
        "random" => SlotKind::Random,
        k => return Err(format!("unknown slot kind `{k}`")),
    };
    let index: u8 = index.parse().map_err(|_| format!("invalid slot index `{index}`"))?;
    if index as u32 >= MAX_SLOT_BITS {
        return Err(format!("slot index {index} exceeds {}", MAX_SLOT_BITS - 1));
    }
    let bit: u8 = bit.parse().map_err(|_| format!("invalid bit `{bit}`"))?;
    let loc = match *loc {
        "mem" => SlotLoc::Mem {
            addr: parse_int(target)?,
            bit,
        },
        "reg" => {
            let r = RegRef::parse(target).ok_or_else(|| format!("unknown register `{target}`"))?;
            if r != RegRef::full(r.reg) {
                return Err("register slots name a full 32-bit register".into());
            }
            SlotLoc::Reg { reg: r.reg, bit }
        }
        l => return Err(format!("unknown slot location `{l}`")),
    };
    Ok(Slot { kind, index, loc })
}

fn parse_regs(words: &[&str], regs: &mut RegFile) -> Result<(), String> {
    for w in words {
        let (name, v) = w.split_once('=').ok_or_else(|| format!("expected reg=value, got `{w}`"))?;
        let r = RegRef::parse(name).ok_or_else(|| format!("unknown register `{name}`"))?;
        if r != RegRef::full(r.reg) {
            return Err("REGS names full 32-bit registers".into());
        }
        regs.set(r.reg, parse_int(v)?);
    }
    Ok(())
}

pub fn parse_program(text: &str) -> Result<OracleProgram, ParseError> {
    let mut instrs = Vec::new();
    let mut regs: Option<RegFile> = None;
    let mut first_snapshot = None;
    let mut mem = BTreeMap::new();
    let mut slots = Vec::new();
    let mut table = BranchTable::default();
    let mut last_line = 0;
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        last_line = n;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let err = |m: String| ParseError::new(n, m);
        let (head, rest) = t.split_once(char::is_whitespace).unwrap_or((t, ""));
        let words: Vec<&str> = rest.split_whitespace().collect();
        match head {
            "REGS" => parse_regs(&words, regs.get_or_insert_with(RegFile::default)).map_err(err)?,
            "MEM" => {
                let (addr, bytes) = words.split_first().ok_or_else(|| err("MEM needs an address".into()))?;
                let addr = parse_int(addr).map_err(err)?;
                for (k, b) in bytes.iter().enumerate() {
                    let v = u8::from_str_radix(b, 16).map_err(|_| err(format!("invalid byte `{b}`")))?;
                    mem.insert(addr.wrapping_add(k as u32), v);
                }
            }
            "SLOT" => slots.push(parse_slot(&words).map_err(err)?),
            "BC" => table.insert(parse_branch_line(t).map_err(err)?).map_err(err)?,
            "I" => {
                let (addr, ins) = rest.trim().split_once(char::is_whitespace).ok_or_else(|| err("expected `I 0x<addr> <instruction>`".into()))?;
                let addr = parse_int(addr).map_err(err)?;
                instrs.push((addr, ins.parse::<Instruction>().map_err(err)?));
            }
            "T" => {
                let r = parse_record_line(t).map_err(err)?;
                first_snapshot.get_or_insert(r.regs);
                instrs.push((r.addr, r.instr));
            }
            h => return Err(err(format!("unknown line kind `{h}`"))),
        }
    }
    let regs = regs.or(first_snapshot).unwrap_or_default();
    OracleProgram::new(instrs, regs, mem, slots, table).map_err(|m| ParseError::new(last_line, m))
}

#[cfg(test)]
mod tests {
    use super::*;

    const SRC: &str = "\
# table load indexed by two secret bits
REGS ebp=0x2000
MEM 0x2000 00
MEM 0x3000 aa bb
SLOT secret 0 mem 0x2000 0
SLOT secret 1 mem 0x2000 1
SLOT random 0 reg ebx 7
I 0x100 movzx eax,byte [ebp+0x0]
I 0x104 shl eax,0x6
I 0x107 mov cl,byte [eax+0x3000]
";

    #[test]
    fn parses_and_runs() {
        let p = parse_program(SRC).unwrap();
        assert_eq!((p.secret_bits(), p.random_bits()), (2, 1));
        let t = p.trace(3, 1).unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t[0].regs.get(Reg::Ebx), 0x80);
        assert_eq!(t[2].regs.get(Reg::Eax), 0xc0);
        let ann = p.annotations();
        assert_eq!(ann.entries().len(), 2);
        assert_eq!(ann.to_string().lines().count(), 2);
        let m = p.execute(0, 0, |_| {}).unwrap();
        assert_eq!(m.regs.get(Reg::Ecx) & 0xff, 0xaa);
    }

    #[test]
    fn display_round_trips() {
        let p = parse_program(SRC).unwrap();
        assert_eq!(parse_program(&p.to_string()).unwrap(), p);
    }

    #[test]
    fn rejects_bad_slots() {
        let gap = "SLOT secret 1 mem 0x2000 0\nI 0x0 mov eax,0x1";
        assert!(parse_program(gap).is_err());
        let mixed = "SLOT secret 0 mem 0x2000 0\nSLOT random 0 mem 0x2000 1";
        assert!(parse_program(mixed).is_err());
        let twice = "SLOT secret 0 mem 0x2000 0\nSLOT secret 1 mem 0x2000 0";
        assert!(parse_program(twice).is_err());
        assert!(parse_program("SLOT secret 0 reg al 0").is_err());
        assert_eq!(parse_program("I 0x10 nop").unwrap_err().line, 1);
    }

    #[test]
    fn loops_hit_the_budget() {
        let mut p = parse_program("I 0x0 jmp 0x0").unwrap();
        p.budget = 50;
        assert!(matches!(p.trace(0, 0), Err(OracleError::Budget { .. })));
    }

    #[test]
    fn trace_lines_are_templates() {
        let p = parse_program(
            "T 0 0x10 mov eax,0x1 | eax=0x0 ebx=0x0 ecx=0x0 edx=0x0 esi=0x0 edi=0x0 ebp=0x5 esp=0x0\nT 1 0x12 add eax,ebp | eax=0x1 ebx=0x0 ecx=0x0 edx=0x0 esi=0x0 edi=0x0 ebp=0x5 esp=0x0",
        )
        .unwrap();
        let m = p.execute(0, 0, |_| {}).unwrap();
        assert_eq!(m.regs.get(Reg::Eax), 6);
    }
}
