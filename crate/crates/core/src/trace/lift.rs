//! Lifting micro-x86 records into IR statements.
//!
//! Each instruction computes its result into a temporary, then updates the
//! flags, then writes the destination. Memory operands carry the concrete
//! address resolved from the record's register snapshot.

use thiserror::Error;

use super::instr::{CondCode, Instruction, MemOperand, Mnemonic, Operand, RegFile};
use super::record::TraceRecord;
use crate::ir::{BinOp, Expr, Flag, MemRef, Reg, RegRef, ShiftKind, Stmt, Var};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("record {seq} at {addr:#x} (`{instr}`): {message}")]
pub struct LiftError {
    pub seq: u64,
    pub addr: u32,
    pub instr: String,
    pub message: String,
}

/// A conditional jump: the flag expression it consumes and its target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BranchEvent {
    pub cc: CondCode,
    pub cond: Expr,
    pub target: u32,
}

/// Lifted form of one record.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Lifted {
    pub stmts: Vec<Stmt>,
    pub branch: Option<BranchEvent>,
}

/// Flag expression tested by a condition code.
pub fn cond_expr(cc: CondCode) -> Expr {
    let f = |fl| Expr::Var(Var::Flag(fl));
    match cc {
        CondCode::E => f(Flag::Zf),
        CondCode::Ne => Expr::not(f(Flag::Zf)),
        CondCode::B => f(Flag::Cf),
        CondCode::Ae => Expr::not(f(Flag::Cf)),
        CondCode::L => Expr::bin(BinOp::Xor, f(Flag::Sf), f(Flag::Of)),
        CondCode::Ge => Expr::not(Expr::bin(BinOp::Xor, f(Flag::Sf), f(Flag::Of))),
    }
}

/// Base and offset expressions for a memory operand. A scaled index is
/// lifted as a left shift.
pub fn address_exprs(m: &MemOperand) -> (Expr, Option<Expr>) {
    let mut terms = Vec::with_capacity(3);
    if let Some(b) = m.base {
        terms.push(Expr::reg(b));
    }
    if let Some((r, s)) = m.index {
        let k = s.trailing_zeros();
        let idx = Expr::reg(r);
        terms.push(if k == 0 {
            idx
        } else {
            Expr::concat(Expr::extract(0, 31 - k, idx), Expr::konst(0, k))
        });
    }
    if m.disp != 0 || terms.is_empty() {
        terms.push(Expr::konst(m.disp as u64, 32));
    }
    let mut it = terms.into_iter();
    let base = it.next().expect("at least one term");
    let offset = it.reduce(|a, b| Expr::bin(BinOp::Add, a, b));
    (base, offset)
}

struct Lifter<'a> {
    regs: &'a RegFile,
    temps: u8,
    out: Lifted,
}

type LResult<T> = Result<T, String>;

impl<'a> Lifter<'a> {
    fn fresh(&mut self) -> Var {
        let t = Var::Temp(self.temps);
        self.temps += 1;
        t
    }

    fn emit(&mut self, s: Stmt) {
        self.out.stmts.push(s);
    }

    fn mem_ref(&self, m: &MemOperand, bytes: u8) -> MemRef {
        let (base, offset) = address_exprs(m);
        MemRef {
            base,
            offset,
            addr: m.address(self.regs),
            bytes,
        }
    }

    fn mem_width(m: &MemOperand, width: u32) -> LResult<u32> {
        match m.size {
            Some(s) if s.bits() != width => Err(format!(
                "memory operand is {} bits, instruction needs {width}",
                s.bits()
            )),
            _ => Ok(width),
        }
    }

    /// Reads an operand at `width` bits; memory is loaded into a temporary.
    fn read(&mut self, op: &Operand, width: u32) -> LResult<Expr> {
        match op {
            Operand::Reg(r) => {
                if r.width() != width {
                    return Err(format!("register {r} is not {width} bits wide"));
                }
                Ok(Expr::Var(Var::Reg(*r)))
            }
            Operand::Imm(v) => Ok(Expr::konst(*v as u64, width)),
            Operand::Mem(m) => {
                let w = Self::mem_width(m, width)?;
                let t = self.fresh();
                let r = self.mem_ref(m, (w / 8) as u8);
                self.emit(Stmt::Load(t, r));
                Ok(Expr::Var(t))
            }
        }
    }

    fn write(&mut self, op: &Operand, value: Expr, width: u32) -> LResult<()> {
        match op {
            Operand::Reg(r) => {
                if r.width() != width {
                    return Err(format!("register {r} is not {width} bits wide"));
                }
                self.emit(Stmt::Assign(Var::Reg(*r), value));
                Ok(())
            }
            Operand::Mem(m) => {
                let w = Self::mem_width(m, width)?;
                let r = self.mem_ref(m, (w / 8) as u8);
                self.emit(Stmt::Store(r, value));
                Ok(())
            }
            Operand::Imm(_) => Err("immediate destination".into()),
        }
    }

    fn set_flag(&mut self, f: Flag, e: Expr) {
        self.emit(Stmt::Assign(Var::Flag(f), e));
    }

    fn result_flags(&mut self, t: &Expr, w: u32) {
        self.set_flag(Flag::Zf, Expr::bin(BinOp::Eq, t.clone(), Expr::konst(0, w)));
        self.set_flag(Flag::Sf, msb(t, w));
    }

    fn add_flags(&mut self, a: &Expr, b: &Expr, t: &Expr, w: u32) {
        self.result_flags(t, w);
        self.set_flag(Flag::Cf, Expr::bin(BinOp::Ult, t.clone(), a.clone()));
        let same_sign = Expr::not(Expr::bin(BinOp::Xor, msb(a, w), msb(b, w)));
        let flipped = Expr::bin(BinOp::Xor, msb(a, w), msb(t, w));
        self.set_flag(Flag::Of, Expr::bin(BinOp::And, same_sign, flipped));
    }

    fn sub_flags(&mut self, a: &Expr, b: &Expr, t: &Expr, w: u32) {
        self.result_flags(t, w);
        self.set_flag(Flag::Cf, Expr::bin(BinOp::Ult, a.clone(), b.clone()));
        let diff_sign = Expr::bin(BinOp::Xor, msb(a, w), msb(b, w));
        let flipped = Expr::bin(BinOp::Xor, msb(a, w), msb(t, w));
        self.set_flag(Flag::Of, Expr::bin(BinOp::And, diff_sign, flipped));
    }

    fn logic_flags(&mut self, t: &Expr, w: u32) {
        self.result_flags(t, w);
        self.set_flag(Flag::Cf, Expr::Bit(false));
        self.set_flag(Flag::Of, Expr::Bit(false));
    }

    /// Operand width of a two-operand instruction.
    fn width2(dst: &Operand, src: &Operand) -> LResult<u32> {
        let w = match (dst, src) {
            (Operand::Reg(r), _) | (_, Operand::Reg(r)) => r.width(),
            (Operand::Mem(m), _) | (_, Operand::Mem(m)) => m.size.map_or(32, |s| s.bits()),
            _ => 32,
        };
        if let (Operand::Mem(_), Operand::Mem(_)) = (dst, src) {
            return Err("two memory operands".into());
        }
        Ok(w)
    }

    fn width1(op: &Operand) -> u32 {
        match op {
            Operand::Reg(r) => r.width(),
            Operand::Mem(m) => m.size.map_or(32, |s| s.bits()),
            Operand::Imm(_) => 32,
        }
    }

    fn lift(&mut self, ins: &Instruction) -> LResult<()> {
        let ops = &ins.operands;
        use Mnemonic::*;
        match ins.mnemonic {
            Mov => {
                let w = Self::width2(&ops[0], &ops[1])?;
                match (&ops[0], &ops[1]) {
                    (Operand::Reg(r), Operand::Mem(m)) => {
                        let w = Self::mem_width(m, w)?;
                        let mr = self.mem_ref(m, (w / 8) as u8);
                        self.emit(Stmt::Load(Var::Reg(*r), mr));
                    }
                    (dst, src) => {
                        let v = self.read(src, w)?;
                        self.write(dst, v, w)?;
                    }
                }
            }
            Movzx | Movsx => {
                let Operand::Reg(dst) = ops[0] else {
                    return Err("destination must be a register".into());
                };
                let ws = match &ops[1] {
                    Operand::Reg(r) => r.width(),
                    Operand::Mem(m) => m
                        .size
                        .map(|s| s.bits())
                        .ok_or("memory source needs a size prefix")?,
                    Operand::Imm(_) => return Err("immediate source".into()),
                };
                let wd = dst.width();
                if ws >= wd {
                    return Err("source must be narrower than destination".into());
                }
                let v = self.read(&ops[1], ws)?;
                let e = if ins.mnemonic == Movzx {
                    Expr::concat(Expr::konst(0, wd - ws), v)
                } else {
                    shift(
                        ShiftKind::RightArith,
                        Expr::concat(v, Expr::konst(0, wd - ws)),
                        wd - ws,
                        wd,
                    )
                };
                self.emit(Stmt::Assign(Var::Reg(dst), e));
            }
            Lea => {
                let (Operand::Reg(dst), Operand::Mem(m)) = (&ops[0], &ops[1]) else {
                    return Err("lea needs a register and a memory operand".into());
                };
                if dst.width() != 32 {
                    return Err("lea destination must be 32 bits".into());
                }
                let (base, off) = address_exprs(m);
                let e = match off {
                    Some(o) => Expr::bin(BinOp::Add, base, o),
                    None => base,
                };
                self.emit(Stmt::Assign(Var::Reg(*dst), e));
            }
            Add | Sub | And | Or | Xor | Cmp | Test => {
                let w = Self::width2(&ops[0], &ops[1])?;
                let a = self.read(&ops[0], w)?;
                let b = self.read(&ops[1], w)?;
                let op = match ins.mnemonic {
                    Add => BinOp::Add,
                    Sub | Cmp => BinOp::Sub,
                    And | Test => BinOp::And,
                    Or => BinOp::Or,
                    _ => BinOp::Xor,
                };
                let t = self.fresh();
                self.emit(Stmt::Assign(t, Expr::bin(op, a.clone(), b.clone())));
                let te = Expr::Var(t);
                match op {
                    BinOp::Add => self.add_flags(&a, &b, &te, w),
                    BinOp::Sub => self.sub_flags(&a, &b, &te, w),
                    _ => self.logic_flags(&te, w),
                }
                if !matches!(ins.mnemonic, Cmp | Test) {
                    self.write(&ops[0], te, w)?;
                }
            }
            Not => {
                let w = Self::width1(&ops[0]);
                let a = self.read(&ops[0], w)?;
                self.write(&ops[0], Expr::not(a), w)?;
            }
            Neg => {
                let w = Self::width1(&ops[0]);
                let a = self.read(&ops[0], w)?;
                let zero = Expr::konst(0, w);
                let t = self.fresh();
                self.emit(Stmt::Assign(t, Expr::bin(BinOp::Sub, zero.clone(), a.clone())));
                let te = Expr::Var(t);
                self.sub_flags(&zero, &a, &te, w);
                self.write(&ops[0], te, w)?;
            }
            Shl | Shr | Sar => self.lift_shift(ins)?,
            Mul | Imul if ops.len() == 1 => {
                if Self::width1(&ops[0]) != 32 || matches!(ops[0], Operand::Imm(_)) {
                    return Err("only 32-bit register or memory multiplicands".into());
                }
                let signed = ins.mnemonic == Imul;
                let a = Expr::reg(Reg::Eax);
                let b = self.read(&ops[0], 32)?;
                self.widening_mul(a, b, signed, Some(Reg::Edx), &Operand::Reg(RegRef::full(Reg::Eax)))?;
            }
            Imul => {
                let Operand::Reg(dst) = ops[0] else {
                    return Err("destination must be a register".into());
                };
                let w = dst.width();
                if w == 8 {
                    return Err("8-bit imul forms are not supported".into());
                }
                let (a, b) = if ops.len() == 2 {
                    (self.read(&ops[0], w)?, self.read(&ops[1], w)?)
                } else {
                    if !matches!(ops[2], Operand::Imm(_)) {
                        return Err("third operand must be an immediate".into());
                    }
                    (self.read(&ops[1], w)?, self.read(&ops[2], w)?)
                };
                self.widening_mul(a, b, true, None, &ops[0])?;
            }
            Mul => unreachable!("mul takes one operand"),
            Div => {
                if Self::width1(&ops[0]) != 32 || matches!(ops[0], Operand::Imm(_)) {
                    return Err("only 32-bit register or memory divisors".into());
                }
                let b = self.read(&ops[0], 32)?;
                let dividend = Expr::concat(Expr::reg(Reg::Edx), Expr::reg(Reg::Eax));
                let divisor = Expr::concat(Expr::konst(0, 32), b);
                let q = self.fresh();
                let r = self.fresh();
                self.emit(Stmt::Assign(q, Expr::bin(BinOp::DivU, dividend.clone(), divisor.clone())));
                self.emit(Stmt::Assign(r, Expr::bin(BinOp::RemU, dividend, divisor)));
                self.emit(Stmt::Assign(Var::reg(Reg::Eax), Expr::extract(0, 31, Expr::Var(q))));
                self.emit(Stmt::Assign(Var::reg(Reg::Edx), Expr::extract(0, 31, Expr::Var(r))));
            }
            Jmp => {
                if !matches!(ops[0], Operand::Imm(_)) {
                    return Err("indirect jumps are not supported".into());
                }
            }
            Jcc(cc) => {
                let Operand::Imm(target) = ops[0] else {
                    return Err("indirect jumps are not supported".into());
                };
                self.out.branch = Some(BranchEvent {
                    cc,
                    cond: cond_expr(cc),
                    target,
                });
            }
            Cmov(cc) => {
                let Operand::Reg(dst) = ops[0] else {
                    return Err("destination must be a register".into());
                };
                let w = dst.width();
                if w == 8 {
                    return Err("cmov needs a 16- or 32-bit destination".into());
                }
                if matches!(ops[1], Operand::Imm(_)) {
                    return Err("cmov source cannot be an immediate".into());
                }
                let b = self.read(&ops[1], w)?;
                let e = Expr::cond(cond_expr(cc), b, Expr::Var(Var::Reg(dst)));
                self.emit(Stmt::Assign(Var::Reg(dst), e));
            }
            Push => {
                if Self::width1(&ops[0]) != 32 {
                    return Err("only 32-bit pushes".into());
                }
                let v = self.read(&ops[0], 32)?;
                let esp = self.regs.get(Reg::Esp);
                self.emit(Stmt::Store(
                    MemRef {
                        base: Expr::reg(Reg::Esp),
                        offset: Some(Expr::konst(0xffff_fffc, 32)),
                        addr: esp.wrapping_sub(4),
                        bytes: 4,
                    },
                    v,
                ));
                self.emit(Stmt::Assign(
                    Var::reg(Reg::Esp),
                    Expr::bin(BinOp::Add, Expr::reg(Reg::Esp), Expr::konst(0xffff_fffc, 32)),
                ));
            }
            Pop => {
                let Operand::Reg(dst) = ops[0] else {
                    return Err("pop needs a register destination".into());
                };
                if dst.width() != 32 {
                    return Err("only 32-bit pops".into());
                }
                let t = self.fresh();
                self.emit(Stmt::Load(
                    t,
                    MemRef {
                        base: Expr::reg(Reg::Esp),
                        offset: None,
                        addr: self.regs.get(Reg::Esp),
                        bytes: 4,
                    },
                ));
                if dst.reg != Reg::Esp {
                    self.emit(Stmt::Assign(
                        Var::reg(Reg::Esp),
                        Expr::bin(BinOp::Add, Expr::reg(Reg::Esp), Expr::konst(4, 32)),
                    ));
                }
                self.emit(Stmt::Assign(Var::Reg(dst), Expr::Var(t)));
            }
        }
        Ok(())
    }

    /// `lo = a*b`, `hi = high half`; cf = of = (hi is not the extension of lo).
    fn widening_mul(
        &mut self,
        a: Expr,
        b: Expr,
        signed: bool,
        hi_dst: Option<Reg>,
        lo_dst: &Operand,
    ) -> LResult<()> {
        let w = match lo_dst {
            Operand::Reg(r) => r.width(),
            _ => 32,
        };
        let lo = self.fresh();
        let hi = self.fresh();
        let hi_op = if signed { BinOp::MulHiS } else { BinOp::MulHiU };
        self.emit(Stmt::Assign(lo, Expr::bin(BinOp::Mul, a.clone(), b.clone())));
        self.emit(Stmt::Assign(hi, Expr::bin(hi_op, a, b)));
        let ext = if signed {
            shift(ShiftKind::RightArith, Expr::Var(lo), w - 1, w)
        } else {
            Expr::konst(0, w)
        };
        let overflow = Expr::bin(BinOp::Ne, Expr::Var(hi), ext);
        self.set_flag(Flag::Cf, overflow.clone());
        self.set_flag(Flag::Of, overflow);
        self.write(lo_dst, Expr::Var(lo), w)?;
        if let Some(r) = hi_dst {
            self.emit(Stmt::Assign(Var::reg(r), Expr::Var(hi)));
        }
        Ok(())
    }

    fn lift_shift(&mut self, ins: &Instruction) -> LResult<()> {
        let ops = &ins.operands;
        let kind = match ins.mnemonic {
            Mnemonic::Shl => ShiftKind::Left,
            Mnemonic::Shr => ShiftKind::RightLogical,
            _ => ShiftKind::RightArith,
        };
        let w = Self::width1(&ops[0]);
        let (amount, n) = match ops[1] {
            Operand::Imm(v) => (None, v & 0x1f),
            Operand::Reg(r) if r == RegRef::parse("cl").unwrap() => {
                (Some(Expr::Var(Var::Reg(r))), self.regs.read(r) & 0x1f)
            }
            _ => return Err("shift amount must be an immediate or cl".into()),
        };
        if amount.is_none() && n == 0 {
            return Ok(());
        }
        let a = self.read(&ops[0], w)?;
        let value = match amount {
            Some(amt) => Expr::Shift {
                kind,
                value: Box::new(a.clone()),
                amount: Box::new(amt),
                concrete: n,
            },
            None => shift(kind, a.clone(), n, w),
        };
        let t = self.fresh();
        self.emit(Stmt::Assign(t, value));
        let te = Expr::Var(t);
        if n > 0 {
            self.result_flags(&te, w);
            let cf = match kind {
                ShiftKind::Left if n <= w => Expr::extract(w - n, w - n, a.clone()),
                ShiftKind::Left | ShiftKind::RightLogical if n > w => Expr::Bit(false),
                ShiftKind::RightArith if n > w => msb(&a, w),
                _ => Expr::extract(n - 1, n - 1, a.clone()),
            };
            self.set_flag(Flag::Cf, cf);
            self.set_flag(Flag::Of, Expr::Bit(false));
        }
        self.write(&ops[0], te, w)
    }
}

fn msb(e: &Expr, w: u32) -> Expr {
    Expr::extract(w - 1, w - 1, e.clone())
}

/// Shift of a `w`-bit value by a constant: Concat/Extract for logical
/// shifts, a constant-amount shift node for arithmetic right shifts.
fn shift(kind: ShiftKind, e: Expr, n: u32, w: u32) -> Expr {
    match kind {
        ShiftKind::Left if n < w => Expr::concat(Expr::extract(0, w - 1 - n, e), Expr::konst(0, n)),
        ShiftKind::RightLogical if n < w => Expr::concat(Expr::konst(0, n), Expr::extract(n, w - 1, e)),
        ShiftKind::Left | ShiftKind::RightLogical => Expr::konst(0, w),
        ShiftKind::RightArith => Expr::Shift {
            kind,
            value: Box::new(e),
            amount: Box::new(Expr::konst(n as u64, 8)),
            concrete: n,
        },
    }
}

/// Lifts one record. Pure in the record.
pub fn lift(rec: &TraceRecord) -> Result<Lifted, LiftError> {
    let mut l = Lifter {
        regs: &rec.regs,
        temps: 0,
        out: Lifted::default(),
    };
    match l.lift(&rec.instr) {
        Ok(()) => Ok(l.out),
        Err(message) => Err(LiftError {
            seq: rec.seq,
            addr: rec.addr,
            instr: rec.instr.to_string(),
            message,
        }),
    }
}

/// Destinations written by `stmts`: variables and memory byte addresses.
pub fn written(stmts: &[Stmt], vars: &mut Vec<Var>, bytes: &mut Vec<u32>) {
    for s in stmts {
        match s {
            Stmt::Assign(v, _) | Stmt::Load(v, _) => vars.push(*v),
            Stmt::Store(m, _) => bytes.extend((0..m.bytes as u32).map(|i| m.addr.wrapping_add(i))),
            Stmt::Seq(a, b) => {
                written(std::slice::from_ref(a), vars, bytes);
                written(std::slice::from_ref(b), vars, bytes);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::infer::{exec_stmt_in, StepLog};
    use crate::ir::{mk_constant, SecurityType, TypeEnv, TypedBitvector};

    fn rec(text: &str, regs: [u32; 8]) -> TraceRecord {
        TraceRecord {
            seq: 0,
            addr: 0x1000,
            instr: text.parse().unwrap(),
            regs: RegFile(regs),
        }
    }

    fn run(text: &str, regs: [u32; 8], env: &mut TypeEnv) -> Lifted {
        let l = lift(&rec(text, regs)).unwrap();
        let mut log = StepLog::default();
        for s in &l.stmts {
            exec_stmt_in(s, env, &mut log).unwrap();
        }
        env.clear_temps();
        l
    }

    #[test]
    fn and_lifts_to_logic_then_flags() {
        let l = lift(&rec("and eax,0xffff0000", [0; 8])).unwrap();
        assert_eq!(
            l.stmts[0],
            Stmt::Assign(
                Var::Temp(0),
                Expr::bin(BinOp::And, Expr::reg(Reg::Eax), Expr::konst(0xffff_0000, 32))
            )
        );
        assert!(matches!(l.stmts[1], Stmt::Assign(Var::Flag(Flag::Zf), _)));
        assert_eq!(
            l.stmts.last().unwrap(),
            &Stmt::Assign(Var::reg(Reg::Eax), Expr::Var(Var::Temp(0)))
        );
    }

    #[test]
    fn loads_carry_concrete_addresses() {
        let mut regs = [0; 8];
        regs[Reg::Eax.index()] = 0x37;
        let l = lift(&rec("mov al,[eax+0x8110460]", regs)).unwrap();
        match &l.stmts[0] {
            Stmt::Load(v, m) => {
                assert_eq!(*v, Var::Reg(RegRef::parse("al").unwrap()));
                assert_eq!(m.addr, 0x811_0497);
                assert_eq!(m.bytes, 1);
            }
            s => panic!("unexpected {s}"),
        }
    }

    #[test]
    fn conditional_jumps_emit_branch_events() {
        let l = lift(&rec("je 0x8049661", [0; 8])).unwrap();
        assert!(l.stmts.is_empty());
        let b = l.branch.unwrap();
        assert_eq!(b.target, 0x8049661);
        assert_eq!(b.cond, Expr::Var(Var::Flag(Flag::Zf)));
    }

    #[test]
    fn typed_shift_matches_table_layout() {
        let mut env = TypeEnv::new();
        env.write(Var::reg(Reg::Eax), TypedBitvector::unknown(SecurityType::Sdd, 32));
        run("shr eax,0x18", [0; 8], &mut env);
        assert_eq!(env.read(Var::reg(Reg::Eax)).evidence(), "{0}²⁴{K}⁸:SDD");
    }

    #[test]
    fn push_pop_move_through_the_stack() {
        let mut regs = [0; 8];
        regs[Reg::Esp.index()] = 0x7000;
        let mut env = TypeEnv::new();
        env.write(Var::reg(Reg::Ebx), mk_constant(0x1234, 32));
        env.write(Var::reg(Reg::Esp), mk_constant(0x7000, 32));
        let l = run("push ebx", regs, &mut env);
        assert!(matches!(&l.stmts[0], Stmt::Store(m, _) if m.addr == 0x6ffc));
        assert_eq!(env.read(Var::reg(Reg::Esp)).const_value(), Some(0x6ffc));
        regs[Reg::Esp.index()] = 0x6ffc;
        run("pop ecx", regs, &mut env);
        assert_eq!(env.read(Var::reg(Reg::Ecx)).const_value(), Some(0x1234));
        assert_eq!(env.read(Var::reg(Reg::Esp)).const_value(), Some(0x7000));
    }

    #[test]
    fn movzx_and_movsx_extend() {
        let mut env = TypeEnv::new();
        env.write(Var::Reg(RegRef::parse("bl").unwrap()), mk_constant(0x80, 8));
        run("movzx eax,bl", [0; 8], &mut env);
        assert_eq!(env.read(Var::reg(Reg::Eax)).const_value(), Some(0x80));
        run("movsx eax,bl", [0; 8], &mut env);
        assert_eq!(env.read(Var::reg(Reg::Eax)).const_value(), Some(0xffff_ff80));
    }

    #[test]
    fn unsupported_forms_are_errors() {
        for text in ["mov [eax],[ebx]", "shl eax,ebx", "jmp eax", "pop dword [eax]", "lea ax,[eax]"] {
            let r: Result<Instruction, _> = text.parse();
            if let Ok(i) = r {
                let e = lift(&TraceRecord {
                    seq: 4,
                    addr: 0x10,
                    instr: i,
                    regs: RegFile::default(),
                })
                .unwrap_err();
                assert_eq!(e.seq, 4, "{text}");
            }
        }
    }

    #[test]
    fn lifting_is_deterministic() {
        let r = rec("imul eax,[ebx+ecx*4+0x10],0x3", [1, 2, 3, 4, 5, 6, 7, 8]);
        assert_eq!(lift(&r).unwrap(), lift(&r).unwrap());
    }
}
