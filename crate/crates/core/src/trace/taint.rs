//! Forward explicit-flow taint over lifted records.
//!
//! Granularity is whole registers, flags and memory bytes. Secrets and random
//! values are both taint sources. A record is kept for type inference when it
//! reads or overwrites tainted state.

use std::collections::{BTreeSet, HashSet};

use super::annot::{Annotation, AnnotationSet};
use super::lift::{lift, LiftError, Lifted};
use super::record::TraceRecord;
use crate::ir::{AnnotTarget, Expr, Flag, MemRef, Reg, RegView, Stmt, Var};

#[derive(Debug, Clone, Default)]
pub struct TaintTracker {
    regs: [bool; 8],
    flags: [bool; 4],
    temps: Vec<bool>,
    bytes: HashSet<u32>,
}

impl TaintTracker {
    pub fn new() -> TaintTracker {
        TaintTracker::default()
    }

    pub fn apply(&mut self, a: &Annotation) {
        match a.target {
            AnnotTarget::Reg(r) => self.regs[r.reg.index()] = true,
            AnnotTarget::Mem { addr, len } => {
                for i in 0..len {
                    self.bytes.insert(addr.wrapping_add(i));
                }
            }
        }
    }

    pub fn var(&self, v: Var) -> bool {
        match v {
            Var::Reg(r) => self.regs[r.reg.index()],
            Var::Flag(f) => self.flags[f.index()],
            Var::Temp(i) => self.temps.get(i as usize).copied().unwrap_or(false),
        }
    }

    pub fn reg(&self, r: Reg) -> bool {
        self.regs[r.index()]
    }

    pub fn flag(&self, f: Flag) -> bool {
        self.flags[f.index()]
    }

    pub fn byte(&self, addr: u32) -> bool {
        self.bytes.contains(&addr)
    }

    fn expr(&self, e: &Expr) -> bool {
        let mut vars = Vec::new();
        e.vars(&mut vars);
        vars.into_iter().any(|v| self.var(v))
    }

    fn address(&self, m: &MemRef) -> bool {
        self.expr(&m.base) || m.offset.as_ref().is_some_and(|o| self.expr(o))
    }

    fn bytes_of(m: &MemRef) -> impl Iterator<Item = u32> + '_ {
        (0..m.bytes as u32).map(|i| m.addr.wrapping_add(i))
    }

    fn set(&mut self, v: Var, tainted: bool) {
        match v {
            Var::Reg(r) if r.view == RegView::Full => self.regs[r.reg.index()] = tainted,
            // a partial write cannot clear the rest of the register
            Var::Reg(r) => self.regs[r.reg.index()] |= tainted,
            Var::Flag(f) => self.flags[f.index()] = tainted,
            Var::Temp(i) => {
                let i = i as usize;
                if self.temps.len() <= i {
                    self.temps.resize(i + 1, false);
                }
                self.temps[i] = tainted;
            }
        }
    }

    fn stmt(&mut self, s: &Stmt) -> bool {
        match s {
            Stmt::Seq(a, b) => {
                let x = self.stmt(a);
                self.stmt(b) || x
            }
            Stmt::Assign(v, e) => {
                let src = self.expr(e);
                let touched = src || self.var(*v);
                self.set(*v, src);
                touched
            }
            Stmt::Load(v, m) => {
                let src = self.address(m) || Self::bytes_of(m).any(|a| self.byte(a));
                let touched = src || self.var(*v);
                self.set(*v, src);
                touched
            }
            Stmt::Store(m, e) => {
                let src = self.address(m) || self.expr(e);
                let touched = src || Self::bytes_of(m).any(|a| self.byte(a));
                for a in Self::bytes_of(m) {
                    if src {
                        self.bytes.insert(a);
                    } else {
                        self.bytes.remove(&a);
                    }
                }
                touched
            }
        }
    }

    /// Propagates taint through one lifted record; returns whether the
    /// record touched tainted state.
    pub fn step(&mut self, lifted: &Lifted) -> bool {
        self.temps.clear();
        let mut touched = false;
        for s in &lifted.stmts {
            touched |= self.stmt(s);
        }
        if let Some(b) = &lifted.branch {
            touched |= self.expr(&b.cond);
        }
        touched
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TaintState {
    pub tainted_regs: BTreeSet<Reg>,
    pub tainted_flags: BTreeSet<Flag>,
    pub tainted_bytes: BTreeSet<u32>,
    pub tainted_seqs: Vec<u64>,
}

/// Runs the taint pre-pass over a whole trace.
pub fn taint_pass(trace: &[TraceRecord], ann: &AnnotationSet) -> Result<TaintState, LiftError> {
    let by_seq = ann.by_seq();
    let mut t = TaintTracker::new();
    let mut seqs = Vec::new();
    for rec in trace {
        let annotated = match by_seq.get(&rec.seq) {
            Some(list) => {
                list.iter().for_each(|a| t.apply(a));
                true
            }
            None => false,
        };
        let lifted = lift(rec)?;
        if t.step(&lifted) || annotated {
            seqs.push(rec.seq);
        }
    }
    Ok(TaintState {
        tainted_regs: Reg::ALL.into_iter().filter(|r| t.reg(*r)).collect(),
        tainted_flags: Flag::ALL.into_iter().filter(|f| t.flag(*f)).collect(),
        tainted_bytes: t.bytes.iter().copied().collect(),
        tainted_seqs: seqs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::annot::parse_annotations;
    use crate::trace::instr::RegFile;

    fn trace(lines: &[&str]) -> Vec<TraceRecord> {
        lines
            .iter()
            .enumerate()
            .map(|(i, t)| TraceRecord {
                seq: i as u64,
                addr: 0x100 + 4 * i as u32,
                instr: t.parse().unwrap(),
                regs: RegFile([0, 0, 0, 0, 0, 0, 0xbf00_0010, 0x7000]),
            })
            .collect()
    }

    #[test]
    fn no_annotations_no_taint() {
        let t = trace(&["mov eax,[ebp+0x8]", "add eax,0x1"]);
        let s = taint_pass(&t, &AnnotationSet::default()).unwrap();
        assert!(s.tainted_seqs.is_empty());
    }

    #[test]
    fn unread_secret_register_taints_only_the_annotation_point() {
        let t = trace(&["mov ebx,0x1", "add ebx,0x2", "mov ecx,ebx"]);
        let ann = parse_annotations("SECRET reg eax @1").unwrap();
        let s = taint_pass(&t, &ann).unwrap();
        assert_eq!(s.tainted_seqs, vec![1]);
        assert!(s.tainted_regs.contains(&Reg::Eax));
    }

    #[test]
    fn taint_flows_through_memory_and_flags() {
        let t = trace(&[
            "mov eax,[ebp+0x8]",
            "mov ebx,0x5",
            "test eax,eax",
            "je 0x200",
            "mov [ebp+0x20],eax",
            "mov ecx,[ebp+0x20]",
            "mov eax,0x0",
        ]);
        let ann = parse_annotations("SECRET mem 0xbf000018 4 @0").unwrap();
        let s = taint_pass(&t, &ann).unwrap();
        assert_eq!(s.tainted_seqs, vec![0, 2, 3, 4, 5, 6]);
        assert!(s.tainted_regs.contains(&Reg::Ecx));
        // overwritten with a constant
        assert!(!s.tainted_regs.contains(&Reg::Eax));
        assert!(s.tainted_flags.contains(&Flag::Zf));
        assert!(s.tainted_bytes.contains(&0xbf00_0030));
    }

    #[test]
    fn partial_writes_keep_taint() {
        let t = trace(&["mov al,0x1", "mov ebx,eax"]);
        let ann = parse_annotations("SECRET reg eax @0").unwrap();
        let s = taint_pass(&t, &ann).unwrap();
        assert_eq!(s.tainted_seqs, vec![0, 1]);
        assert!(s.tainted_regs.contains(&Reg::Ebx));
    }
}
