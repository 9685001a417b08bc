//! Random oracle programs for soundness testing.
//!
//! Programs stay inside the fragment where uniform-randomness typing is
//! meant to hold:
//! - each random byte is loaded once and masked to its random bits straight
//!   away;
//! - values derived from randomness never meet another value derived from
//!   the same random byte, and never go through arithmetic, sign extension or
//!   arithmetic shifts;
//! - branch conditions do not depend on randomness;
//! - branch bodies only write a dead register (`edi`);
//! - stores go to fixed addresses, and table indices are zero-extended bytes.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gaps::{audit, Audit};
use super::program::{OracleProgram, Slot, SlotKind, SlotLoc};
use super::truth::{enumerate_leakage, GroundTruth};
use super::OracleError;
use crate::detector::{analyze, Analysis, AnalysisOptions};
use crate::ir::{Reg, RegRef, RegView};
use crate::layout::{BranchEntry, BranchTable};
use crate::trace::{CondCode, Instruction, MemOperand, Mnemonic, Operand, RegFile, Size};

pub const SECRET_BASE: u32 = 0x2000;
pub const RANDOM_BASE: u32 = 0x3000;
pub const SCRATCH_BASE: u32 = 0x4000;
pub const TABLE_BASE: u32 = 0x10000;
pub const TABLE_LEN: u32 = 0x400;
pub const STACK_TOP: u32 = 0x7000;
pub const CODE_BASE: u32 = 0x0804_8000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenParams {
    pub max_instrs: usize,
    pub max_secret_bits: u32,
    pub max_random_bits: u32,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            max_instrs: 30,
            max_secret_bits: 8,
            max_random_bits: 4,
        }
    }
}

const WORK: [Reg; 5] = [Reg::Eax, Reg::Ebx, Reg::Ecx, Reg::Edx, Reg::Esi];
const BYTE_REGS: [Reg; 4] = [Reg::Eax, Reg::Ebx, Reg::Ecx, Reg::Edx];

#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct Val {
    randoms: BTreeSet<usize>,
    secret: bool,
}

impl Val {
    fn random(&self) -> bool {
        !self.randoms.is_empty()
    }

    fn join(&self, o: &Val) -> Val {
        Val {
            randoms: self.randoms.union(&o.randoms).copied().collect(),
            secret: self.secret || o.secret,
        }
    }

    fn shares(&self, o: &Val) -> bool {
        self.randoms.intersection(&o.randoms).next().is_some()
    }
}

enum Item {
    Op(Instruction),
    Jump(Mnemonic, usize),
    Label(usize),
    /// Address padding in bytes.
    Gap(u32),
}

struct Builder {
    rng: ChaCha8Rng,
    items: Vec<Item>,
    count: usize,
    labels: usize,
    regs: BTreeMap<Reg, Val>,
    scratch: BTreeMap<u32, Val>,
    stack: Vec<Val>,
    secret_bytes: Vec<u32>,
    random_bytes: Vec<(u32, u8)>,
    next_random: usize,
    diamonds: Vec<(usize, usize, usize, bool)>,
}

fn reg(r: Reg) -> Operand {
    Operand::Reg(RegRef::full(r))
}

fn low8(r: Reg) -> Operand {
    Operand::Reg(RegRef {
        reg: r,
        view: RegView::Low8,
    })
}

fn mem(size: Option<Size>, base: Option<Reg>, index: Option<(Reg, u8)>, disp: u32) -> Operand {
    Operand::Mem(MemOperand { size, base, index, disp })
}

fn ins(m: Mnemonic, ops: Vec<Operand>) -> Instruction {
    Instruction::new(m, ops)
}

impl Builder {
    fn op(&mut self, i: Instruction) {
        self.items.push(Item::Op(i));
        self.count += 1;
    }

    fn val(&self, r: Reg) -> Val {
        self.regs.get(&r).cloned().unwrap_or_default()
    }

    fn pick(&mut self, from: &[Reg]) -> Reg {
        *from.choose(&mut self.rng).expect("non-empty register list")
    }

    fn imm(&mut self) -> u32 {
        match self.rng.gen_range(0..4) {
            0 => self.rng.gen_range(0..8),
            1 => self.rng.gen_range(0..0x100),
            2 => 1 << self.rng.gen_range(0..32),
            _ => self.rng.gen(),
        }
    }

    fn load_secret(&mut self) {
        let d = self.pick(&WORK);
        let a = *self.secret_bytes.choose(&mut self.rng).expect("at least one secret byte");
        self.op(ins(Mnemonic::Movzx, vec![reg(d), mem(Some(Size::Byte), None, None, a)]));
        self.regs.insert(
            d,
            Val {
                randoms: BTreeSet::new(),
                secret: true,
            },
        );
    }

    fn load_random(&mut self) -> bool {
        if self.next_random >= self.random_bytes.len() {
            return false;
        }
        let id = self.next_random;
        self.next_random += 1;
        let (a, bits) = self.random_bytes[id];
        let d = self.pick(&WORK);
        self.op(ins(Mnemonic::Movzx, vec![reg(d), mem(Some(Size::Byte), None, None, a)]));
        self.op(ins(Mnemonic::And, vec![reg(d), Operand::Imm((1 << bits) - 1)]));
        self.regs.insert(
            d,
            Val {
                randoms: BTreeSet::from([id]),
                secret: false,
            },
        );
        true
    }

    fn alu_reg(&mut self) -> bool {
        let d = self.pick(&WORK);
        let s = self.pick(&WORK);
        let (vd, vs) = (self.val(d), self.val(s));
        if vd.shares(&vs) || (d == s && vd.random()) {
            return false;
        }
        let arith_ok = !vd.random() && !vs.random();
        let ops: &[Mnemonic] = if arith_ok {
            &[Mnemonic::Add, Mnemonic::Sub, Mnemonic::And, Mnemonic::Or, Mnemonic::Xor, Mnemonic::Imul]
        } else {
            &[Mnemonic::And, Mnemonic::Or, Mnemonic::Xor]
        };
        let m = *ops.choose(&mut self.rng).expect("non-empty");
        self.op(ins(m, vec![reg(d), reg(s)]));
        // `xor r,r` zeroes r, but the typing only folds it for constant bits
        self.regs.insert(d, vd.join(&vs));
        true
    }

    fn alu_imm(&mut self) -> bool {
        let d = self.pick(&WORK);
        let vd = self.val(d);
        let k = self.imm();
        let i = match self.rng.gen_range(0..9) {
            0 if !vd.random() => ins(Mnemonic::Add, vec![reg(d), Operand::Imm(k)]),
            1 if !vd.random() => ins(Mnemonic::Sub, vec![reg(d), Operand::Imm(k)]),
            2 if !vd.random() => ins(Mnemonic::Imul, vec![reg(d), reg(d), Operand::Imm(k)]),
            3 if !vd.random() => ins(Mnemonic::Sar, vec![reg(d), Operand::Imm(self.rng.gen_range(1..32))]),
            4 if !vd.random() => ins(Mnemonic::Neg, vec![reg(d)]),
            5 => ins(Mnemonic::Shl, vec![reg(d), Operand::Imm(self.rng.gen_range(1..32))]),
            6 => ins(Mnemonic::Shr, vec![reg(d), Operand::Imm(self.rng.gen_range(1..32))]),
            7 => ins(Mnemonic::Not, vec![reg(d)]),
            8 => {
                let m = *[Mnemonic::And, Mnemonic::Or, Mnemonic::Xor].choose(&mut self.rng).expect("non-empty");
                ins(m, vec![reg(d), Operand::Imm(k)])
            }
            _ => return false,
        };
        self.op(i);
        true
    }

    fn shift_cl(&mut self) -> bool {
        if self.val(Reg::Ecx) != Val::default() {
            return false;
        }
        let d = self.pick(&WORK);
        let m = if self.val(d).random() {
            *[Mnemonic::Shl, Mnemonic::Shr].choose(&mut self.rng).expect("non-empty")
        } else {
            *[Mnemonic::Shl, Mnemonic::Shr, Mnemonic::Sar].choose(&mut self.rng).expect("non-empty")
        };
        let cl = RegRef {
            reg: Reg::Ecx,
            view: RegView::Low8,
        };
        self.op(ins(m, vec![reg(d), Operand::Reg(cl)]));
        true
    }

    fn moves(&mut self) -> bool {
        let d = self.pick(&WORK);
        match self.rng.gen_range(0..3) {
            0 => {
                let s = self.pick(&WORK);
                self.op(ins(Mnemonic::Mov, vec![reg(d), reg(s)]));
                let v = self.val(s);
                self.regs.insert(d, v);
            }
            1 => {
                let k = self.imm();
                self.op(ins(Mnemonic::Mov, vec![reg(d), Operand::Imm(k)]));
                self.regs.insert(d, Val::default());
            }
            _ => {
                let s = self.pick(&BYTE_REGS);
                let v = self.val(s);
                let m = if v.random() || self.rng.gen_bool(0.5) {
                    Mnemonic::Movzx
                } else {
                    Mnemonic::Movsx
                };
                self.op(ins(m, vec![reg(d), low8(s)]));
                self.regs.insert(d, v);
            }
        }
        true
    }

    fn table_load(&mut self) -> bool {
        let i = self.pick(&BYTE_REGS);
        let t = self.pick(&WORK);
        let d = self.pick(&WORK);
        let idx = self.val(i);
        self.op(ins(Mnemonic::Movzx, vec![reg(t), low8(i)]));
        let scale = *[1u8, 2, 4].choose(&mut self.rng).expect("non-empty");
        let src = if scale == 4 && self.rng.gen_bool(0.5) {
            mem(Some(Size::Dword), None, Some((t, 4)), TABLE_BASE)
        } else if scale == 1 {
            mem(Some(Size::Byte), Some(t), None, TABLE_BASE)
        } else {
            mem(Some(Size::Byte), None, Some((t, scale)), TABLE_BASE)
        };
        let m = if matches!(src, Operand::Mem(MemOperand { size: Some(Size::Dword), .. })) {
            Mnemonic::Mov
        } else {
            Mnemonic::Movzx
        };
        self.op(ins(m, vec![reg(d), src]));
        self.regs.insert(t, idx.clone());
        self.regs.insert(d, idx);
        true
    }

    fn scratch(&mut self) -> bool {
        let off = 4 * self.rng.gen_range(0..16);
        let r = self.pick(&WORK);
        let at = mem(None, Some(Reg::Ebp), None, off);
        if self.rng.gen_bool(0.5) {
            self.op(ins(Mnemonic::Mov, vec![at, reg(r)]));
            let v = self.val(r);
            self.scratch.insert(off, v);
        } else {
            self.op(ins(Mnemonic::Mov, vec![reg(r), at]));
            let v = self.scratch.get(&off).cloned().unwrap_or_default();
            self.regs.insert(r, v);
        }
        true
    }

    fn stack(&mut self) -> bool {
        let r = self.pick(&WORK);
        if self.stack.is_empty() || (self.stack.len() < 4 && self.rng.gen_bool(0.5)) {
            self.op(ins(Mnemonic::Push, vec![reg(r)]));
            let v = self.val(r);
            self.stack.push(v);
        } else {
            self.op(ins(Mnemonic::Pop, vec![reg(r)]));
            let v = self.stack.pop().expect("checked non-empty");
            self.regs.insert(r, v);
        }
        true
    }

    /// `cmp`/`test` on a value; returns its dependence.
    fn compare(&mut self, allow_random: bool) -> Option<Val> {
        let a = self.pick(&WORK);
        let va = self.val(a);
        if va.random() && !allow_random {
            return None;
        }
        let m = if self.rng.gen_bool(0.7) { Mnemonic::Cmp } else { Mnemonic::Test };
        if self.rng.gen_bool(0.6) {
            let k = self.imm();
            self.op(ins(m, vec![reg(a), Operand::Imm(k)]));
            Some(va)
        } else {
            let b = self.pick(&WORK);
            let vb = self.val(b);
            if (vb.random() && !allow_random) || va.shares(&vb) {
                return None;
            }
            self.op(ins(m, vec![reg(a), reg(b)]));
            Some(va.join(&vb))
        }
    }

    fn cmov(&mut self) -> bool {
        let Some(flag) = self.compare(true) else {
            return false;
        };
        let d = self.pick(&WORK);
        let s = self.pick(&WORK);
        if d == s {
            // the compare is still valid code; nothing else to do
            return true;
        }
        let cc = *CondCode::ALL.choose(&mut self.rng).expect("non-empty");
        self.op(ins(Mnemonic::Cmov(cc), vec![reg(d), reg(s)]));
        let v = self.val(d).join(&self.val(s)).join(&flag);
        self.regs.insert(d, v);
        true
    }

    fn body(&mut self, n: usize) {
        for _ in 0..n {
            let s = self.pick(&WORK);
            let i = match self.rng.gen_range(0..4) {
                0 => ins(Mnemonic::Add, vec![reg(Reg::Edi), reg(s)]),
                1 => ins(Mnemonic::Xor, vec![reg(Reg::Edi), reg(s)]),
                2 => ins(Mnemonic::Lea, vec![reg(Reg::Edi), mem(None, Some(s), None, 0x10)]),
                _ => ins(Mnemonic::Add, vec![reg(Reg::Edi), Operand::Imm(self.rng.gen_range(1..0x100))]),
            };
            self.op(i);
            if self.rng.gen_bool(0.3) {
                let g = self.rng.gen_range(8..80);
                self.items.push(Item::Gap(g));
            }
        }
    }

    /// Emits at most `room` instructions.
    fn diamond(&mut self, room: usize) -> bool {
        let before = (self.items.len(), self.count);
        if self.compare(false).is_none() {
            self.items.truncate(before.0);
            self.count = before.1;
            return false;
        }
        let cc = *CondCode::ALL.choose(&mut self.rng).expect("non-empty");
        let (else_l, end_l) = (self.labels, self.labels + 1);
        self.labels += 2;
        let jcc = self.items.len();
        self.items.push(Item::Jump(Mnemonic::Jcc(cc), else_l));
        self.count += 1;
        let then_len = self.rng.gen_range(1..=(room - 3).min(3));
        self.body(then_len);
        self.items.push(Item::Jump(Mnemonic::Jmp, end_l));
        self.count += 1;
        self.items.push(Item::Label(else_l));
        let else_len = self.rng.gen_range(0..=(room - 3 - then_len).min(3));
        self.body(else_len);
        self.items.push(Item::Label(end_l));
        let common = self.rng.gen_bool(0.3);
        self.diamonds.push((jcc, else_l, end_l, common));
        true
    }
}

/// A random program drawn from `seed`.
pub fn generate(seed: u64, params: &GenParams) -> OracleProgram {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let secret_bits = rng.gen_range(1..=params.max_secret_bits.max(1));
    let random_bits = rng.gen_range(0..=params.max_random_bits);
    let target = rng.gen_range(params.max_instrs.min(8)..=params.max_instrs);

    let mut slots = Vec::new();
    let mut init_mem = BTreeMap::new();
    // secret bits spread over one or two bytes
    let secret_bytes = if secret_bits > 4 && rng.gen_bool(0.5) { 2 } else { 1 };
    let mut positions: Vec<(u32, u8)> = (0..secret_bytes)
        .flat_map(|b| (0..8u8).map(move |i| (SECRET_BASE + b, i)))
        .collect();
    positions.shuffle(&mut rng);
    for b in 0..secret_bytes {
        init_mem.insert(SECRET_BASE + b, rng.gen::<u8>());
    }
    for (i, (addr, bit)) in positions.iter().take(secret_bits as usize).enumerate() {
        slots.push(Slot {
            kind: SlotKind::Secret,
            index: i as u8,
            loc: SlotLoc::Mem { addr: *addr, bit: *bit },
        });
    }
    // random bits in the low bits of up to two bytes
    let mut random_bytes = Vec::new();
    let mut left = random_bits;
    let mut index = 0u8;
    while left > 0 {
        let n = if left > 1 && rng.gen_bool(0.4) { rng.gen_range(1..left) } else { left };
        let addr = RANDOM_BASE + random_bytes.len() as u32;
        init_mem.insert(addr, 0);
        for bit in 0..n as u8 {
            slots.push(Slot {
                kind: SlotKind::Random,
                index,
                loc: SlotLoc::Mem { addr, bit },
            });
            index += 1;
        }
        random_bytes.push((addr, n as u8));
        left -= n;
    }
    for i in 0..TABLE_LEN {
        init_mem.insert(TABLE_BASE + i, rng.gen());
    }
    let mut regs = RegFile::default();
    for r in WORK {
        regs.set(r, rng.gen());
    }
    regs.set(Reg::Ebp, SCRATCH_BASE);
    regs.set(Reg::Esp, STACK_TOP);

    let mut b = Builder {
        rng,
        items: Vec::new(),
        count: 0,
        labels: 0,
        regs: BTreeMap::new(),
        scratch: BTreeMap::new(),
        stack: Vec::new(),
        secret_bytes: (0..secret_bytes).map(|i| SECRET_BASE + i).collect(),
        random_bytes,
        next_random: 0,
        diamonds: Vec::new(),
    };
    b.load_secret();
    while b.count < target {
        let room = target - b.count;
        let _ = match b.rng.gen_range(0..12) {
            0 => {
                b.load_secret();
                true
            }
            1 if room >= 2 => b.load_random(),
            2 | 3 => b.alu_reg(),
            4 | 5 => b.alu_imm(),
            6 => b.shift_cl(),
            7 => b.moves(),
            8 if room >= 2 => b.table_load(),
            9 => {
                if b.rng.gen_bool(0.5) {
                    b.scratch()
                } else {
                    b.stack()
                }
            }
            10 if room >= 2 => b.cmov(),
            11 if room >= 4 => b.diamond(room),
            _ => false,
        };
    }
    layout(b, regs, init_mem, slots)
}

fn layout(b: Builder, regs: RegFile, init_mem: BTreeMap<u32, u8>, slots: Vec<Slot>) -> OracleProgram {
    let mut rng = b.rng;
    let mut addr = CODE_BASE + rng.gen_range(0..0x40);
    let mut item_addr = vec![0u32; b.items.len()];
    let mut label_addr = vec![0u32; b.labels];
    for (i, it) in b.items.iter().enumerate() {
        match it {
            Item::Op(_) | Item::Jump(..) => {
                item_addr[i] = addr;
                addr += rng.gen_range(2..8);
            }
            Item::Label(l) => label_addr[*l] = addr,
            Item::Gap(g) => addr += g,
        }
    }
    let mut instrs = Vec::new();
    for (i, it) in b.items.iter().enumerate() {
        match it {
            Item::Op(ins) => instrs.push((item_addr[i], ins.clone())),
            Item::Jump(m, l) => instrs.push((item_addr[i], Instruction::new(*m, vec![Operand::Imm(label_addr[*l])]))),
            _ => {}
        }
    }
    let mut table = BranchTable::default();
    for (jcc, else_l, end_l, common) in b.diamonds {
        let next = b.items[jcc + 1..]
            .iter()
            .enumerate()
            .find(|(_, it)| matches!(it, Item::Op(_) | Item::Jump(..)))
            .map(|(k, _)| item_addr[jcc + 1 + k])
            .expect("a diamond has a then-body");
        let (else_a, end_a) = (label_addr[else_l], label_addr[end_l]);
        let common = common.then_some((end_a, end_a + 8));
        let entry = BranchEntry::new(item_addr[jcc], next, else_a, end_a, common).expect("layout is ordered");
        table.insert(entry).expect("one entry per jump");
    }
    OracleProgram::new(instrs, regs, init_mem, slots, table).expect("generated programs are well formed")
}

/// One oracle run: ground truth, the detector's report on the all-zero
/// assignment's trace, and the audited comparison.
#[derive(Debug, Clone)]
pub struct Checked {
    pub truth: GroundTruth,
    pub analysis: Analysis,
    pub audit: Audit,
}

pub fn check_program(p: &OracleProgram, opts: &AnalysisOptions) -> Result<Checked, OracleError> {
    let truth = enumerate_leakage(p, opts.geometry, &p.table)?;
    let trace = p.trace(0, 0)?;
    let analysis = analyze(&trace, &p.annotations(), Some(&p.table), opts)?;
    let audit = audit(p, &analysis.report, &truth)?;
    Ok(Checked { truth, analysis, audit })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::program::parse_program;
    use crate::trace::lift;

    #[test]
    fn generation_is_deterministic_and_bounded() {
        let p = GenParams::default();
        for seed in 0..40 {
            let a = generate(seed, &p);
            assert_eq!(a, generate(seed, &p));
            assert!(a.instrs.len() <= p.max_instrs, "seed {seed}: {} instructions", a.instrs.len());
            assert!(a.secret_bits() >= 1 && a.secret_bits() <= 8);
            assert!(a.random_bits() <= 4);
            assert_eq!(parse_program(&a.to_string()).unwrap(), a);
        }
    }

    #[test]
    fn generated_programs_run_and_lift() {
        for seed in 0..40 {
            let p = generate(seed, &GenParams::default());
            let t = p.trace(0, 0).unwrap_or_else(|e| panic!("seed {seed}: {e}"));
            for r in &t {
                lift(r).unwrap_or_else(|e| panic!("seed {seed}: {e}"));
            }
        }
    }
}
