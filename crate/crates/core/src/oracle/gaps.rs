//! Known ways the type system can miss a leak, and a classifier that
//! attributes an oracle-confirmed miss to one of them.

use std::collections::{BTreeSet, HashMap};

use super::program::{OracleProgram, SlotKind, SlotLoc};
use super::truth::{compare, GroundTruth, Miss, SiteKind, Verdict};
use super::OracleError;
use crate::detector::Report;
use crate::ir::{BinOp, Expr, MemRef, RegView, Stmt, Var};
use crate::trace::{lift, Lifted};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KnownGap {
    pub id: &'static str,
    pub summary: &'static str,
}

pub const XOR_MASK_REUSE: KnownGap = KnownGap {
    id: "xor-mask-reuse",
    summary: "a value xored twice with the same random mask is still typed uniformly random, \
              although the mask has cancelled and the secret is exposed",
};

pub const CATALOGUE: &[KnownGap] = &[XOR_MASK_REUSE];

pub fn lookup(id: &str) -> Option<&'static KnownGap> {
    CATALOGUE.iter().find(|g| g.id == id)
}

/// Which random locations a value derives from, and whether some xor
/// combined two values sharing one of them.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct Lineage {
    randoms: BTreeSet<usize>,
    reused: bool,
}

impl Lineage {
    fn union(mut self, o: &Lineage) -> Lineage {
        self.randoms.extend(&o.randoms);
        self.reused |= o.reused;
        self
    }
}

#[derive(Default)]
struct Tracker {
    regs: [Lineage; 8],
    flags: [Lineage; 4],
    temps: HashMap<u8, Lineage>,
    bytes: HashMap<u32, Lineage>,
}

impl Tracker {
    fn var(&self, v: Var) -> Lineage {
        match v {
            Var::Reg(r) => self.regs[r.reg.index()].clone(),
            Var::Flag(f) => self.flags[f.index()].clone(),
            Var::Temp(t) => self.temps.get(&t).cloned().unwrap_or_default(),
        }
    }

    fn set(&mut self, v: Var, l: Lineage) {
        match v {
            Var::Reg(r) if r.view == RegView::Full => self.regs[r.reg.index()] = l,
            Var::Reg(r) => {
                let old = std::mem::take(&mut self.regs[r.reg.index()]);
                self.regs[r.reg.index()] = old.union(&l);
            }
            Var::Flag(f) => self.flags[f.index()] = l,
            Var::Temp(t) => {
                self.temps.insert(t, l);
            }
        }
    }

    fn expr(&self, e: &Expr) -> Lineage {
        match e {
            Expr::Bit(_) | Expr::Const { .. } => Lineage::default(),
            Expr::Var(v) => self.var(*v),
            Expr::Not(a) | Expr::Extract { e: a, .. } => self.expr(a),
            Expr::Bin(op, a, b) => {
                let (la, lb) = (self.expr(a), self.expr(b));
                let shared = la.randoms.intersection(&lb.randoms).next().is_some();
                let mut l = la.union(&lb);
                l.reused |= *op == BinOp::Xor && shared;
                l
            }
            Expr::Concat(a, b) => self.expr(a).union(&self.expr(b)),
            Expr::Cond(c, t, f) => self.expr(c).union(&self.expr(t)).union(&self.expr(f)),
            Expr::Shift { value, amount, .. } => self.expr(value).union(&self.expr(amount)),
        }
    }

    fn address(&self, m: &MemRef) -> Lineage {
        let l = self.expr(&m.base);
        match &m.offset {
            Some(o) => l.union(&self.expr(o)),
            None => l,
        }
    }

    fn stmt(&mut self, s: &Stmt, site: u32, hits: &mut Hits) {
        match s {
            Stmt::Assign(v, e) => {
                let l = self.expr(e);
                self.set(*v, l);
            }
            Stmt::Load(v, m) => {
                let mut l = self.address(m);
                if l.reused {
                    hits.mem.insert(site);
                }
                for i in 0..m.bytes as u32 {
                    if let Some(b) = self.bytes.get(&m.addr.wrapping_add(i)) {
                        l = l.union(b);
                    }
                }
                self.set(*v, l);
            }
            Stmt::Store(m, e) => {
                let a = self.address(m);
                if a.reused {
                    hits.mem.insert(site);
                }
                let l = self.expr(e).union(&a);
                for i in 0..m.bytes as u32 {
                    self.bytes.insert(m.addr.wrapping_add(i), l.clone());
                }
            }
            Stmt::Seq(a, b) => {
                self.stmt(a, site, hits);
                self.stmt(b, site, hits);
            }
        }
    }

    fn record(&mut self, addr: u32, lifted: &Lifted, hits: &mut Hits) {
        self.temps.clear();
        if let Some(b) = &lifted.branch {
            if self.expr(&b.cond).reused {
                hits.branch.insert(addr);
            }
        }
        for s in &lifted.stmts {
            self.stmt(s, addr, hits);
        }
    }
}

#[derive(Debug, Default)]
struct Hits {
    mem: BTreeSet<u32>,
    branch: BTreeSet<u32>,
}

/// Sites whose address or condition depends on a cancelled random mask, on
/// the all-zero assignment's trace.
fn reuse_sites(p: &OracleProgram) -> Result<Hits, OracleError> {
    let trace = p.trace(0, 0)?;
    let mut t = Tracker::default();
    let mut ids: HashMap<SlotLoc, usize> = HashMap::new();
    for s in p.slots.iter().filter(|s| s.kind == SlotKind::Random) {
        let key = match s.loc {
            SlotLoc::Mem { addr, .. } => SlotLoc::Mem { addr, bit: 0 },
            SlotLoc::Reg { reg, .. } => SlotLoc::Reg { reg, bit: 0 },
        };
        let n = ids.len();
        let id = *ids.entry(key).or_insert(n);
        match key {
            SlotLoc::Mem { addr, .. } => {
                t.bytes.entry(addr).or_default().randoms.insert(id);
            }
            SlotLoc::Reg { reg, .. } => {
                t.regs[reg.index()].randoms.insert(id);
            }
        }
    }
    let mut hits = Hits::default();
    for rec in &trace {
        let lifted = lift(rec).map_err(|e| OracleError::Exec {
            secret: 0,
            random: 0,
            seq: rec.seq,
            addr: rec.addr,
            message: e.message,
        })?;
        t.record(rec.addr, &lifted, &mut hits);
    }
    Ok(hits)
}

/// Soundness verdict with every miss either attributed to a catalogued gap
/// or left unexplained.
#[derive(Debug, Clone)]
pub struct Audit {
    pub verdict: Verdict,
    pub expected: Vec<(Miss, &'static KnownGap)>,
    pub unexpected: Vec<Miss>,
}

impl Audit {
    /// No miss outside the catalogue.
    pub fn accounted(&self) -> bool {
        self.unexpected.is_empty()
    }
}

pub fn audit(p: &OracleProgram, report: &Report, truth: &GroundTruth) -> Result<Audit, OracleError> {
    let verdict = compare(report, truth);
    let hits = if verdict.sound { Hits::default() } else { reuse_sites(p)? };
    let mut expected = Vec::new();
    let mut unexpected = Vec::new();
    for m in &verdict.false_negatives {
        let reused = match m.kind {
            SiteKind::Mem => hits.mem.contains(&m.addr),
            SiteKind::Branch => hits.branch.contains(&m.addr),
        };
        if reused {
            expected.push((*m, &XOR_MASK_REUSE));
        } else {
            unexpected.push(*m);
        }
    }
    Ok(Audit {
        verdict,
        expected,
        unexpected,
    })
}
