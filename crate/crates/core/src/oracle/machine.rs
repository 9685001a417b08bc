//! Concrete micro-x86 semantics, written directly against machine words so it
//! can serve as a reference for the lifter.

use std::collections::HashMap;

use crate::infer::AccessKind;
use crate::ir::{Reg, RegRef};
use crate::trace::{CondCode, Instruction, MemOperand, Mnemonic, Operand, RegFile};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct Flags {
    pub zf: bool,
    pub cf: bool,
    pub sf: bool,
    pub of: bool,
}

impl Flags {
    pub fn test(&self, cc: CondCode) -> bool {
        match cc {
            CondCode::E => self.zf,
            CondCode::Ne => !self.zf,
            CondCode::B => self.cf,
            CondCode::Ae => !self.cf,
            CondCode::L => self.sf != self.of,
            CondCode::Ge => self.sf == self.of,
        }
    }
}

/// One memory access made by an instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Access {
    pub kind: AccessKind,
    pub addr: u32,
    pub bytes: u8,
}

/// What one instruction did besides updating state.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Effect {
    pub accesses: Vec<Access>,
    /// Direction of a conditional jump.
    pub taken: Option<bool>,
    /// Control transfer target, if any was taken.
    pub jump: Option<u32>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Machine {
    pub regs: RegFile,
    pub flags: Flags,
    pub mem: HashMap<u32, u8>,
}

fn mask(w: u32) -> u32 {
    if w >= 32 {
        u32::MAX
    } else {
        (1 << w) - 1
    }
}

fn msb(v: u32, w: u32) -> bool {
    v >> (w - 1) & 1 == 1
}

fn sext(v: u32, w: u32) -> i64 {
    let v = (v & mask(w)) as i64;
    if msb(v as u32, w) {
        v - (1i64 << w)
    } else {
        v
    }
}

fn width_of(op: &Operand) -> u32 {
    match op {
        Operand::Reg(r) => r.width(),
        Operand::Mem(m) => m.size.map_or(32, |s| s.bits()),
        Operand::Imm(_) => 32,
    }
}

type MResult<T> = Result<T, String>;

impl Machine {
    pub fn new(regs: RegFile) -> Machine {
        Machine {
            regs,
            ..Machine::default()
        }
    }

    pub fn load(&self, addr: u32, bytes: u8) -> u32 {
        (0..bytes as u32).fold(0, |v, i| {
            v | (*self.mem.get(&addr.wrapping_add(i)).unwrap_or(&0) as u32) << (8 * i)
        })
    }

    pub fn store(&mut self, addr: u32, bytes: u8, value: u32) {
        for i in 0..bytes as u32 {
            self.mem.insert(addr.wrapping_add(i), (value >> (8 * i)) as u8);
        }
    }

    /// Executes one instruction. Memory addresses use the register values
    /// from before the instruction.
    pub fn step(&mut self, ins: &Instruction) -> MResult<Effect> {
        let mut x = Exec {
            pre: self.regs,
            m: self,
            fx: Effect::default(),
        };
        x.run(ins)?;
        Ok(x.fx)
    }
}

struct Exec<'a> {
    pre: RegFile,
    m: &'a mut Machine,
    fx: Effect,
}

impl Exec<'_> {
    fn mem_bytes(m: &MemOperand, w: u32) -> MResult<u8> {
        match m.size {
            Some(s) if s.bits() != w => Err(format!("memory operand is {} bits, instruction needs {w}", s.bits())),
            _ => Ok((w / 8) as u8),
        }
    }

    fn read(&mut self, op: &Operand, w: u32) -> MResult<u32> {
        match op {
            Operand::Reg(r) => {
                if r.width() != w {
                    return Err(format!("register {r} is not {w} bits wide"));
                }
                Ok(self.m.regs.read(*r))
            }
            Operand::Imm(v) => Ok(v & mask(w)),
            Operand::Mem(mo) => {
                let bytes = Self::mem_bytes(mo, w)?;
                let addr = mo.address(&self.pre);
                self.fx.accesses.push(Access {
                    kind: AccessKind::Load,
                    addr,
                    bytes,
                });
                Ok(self.m.load(addr, bytes))
            }
        }
    }

    fn write(&mut self, op: &Operand, v: u32, w: u32) -> MResult<()> {
        match op {
            Operand::Reg(r) => {
                if r.width() != w {
                    return Err(format!("register {r} is not {w} bits wide"));
                }
                self.m.regs.write(*r, v & mask(w));
                Ok(())
            }
            Operand::Mem(mo) => {
                let bytes = Self::mem_bytes(mo, w)?;
                let addr = mo.address(&self.pre);
                self.fx.accesses.push(Access {
                    kind: AccessKind::Store,
                    addr,
                    bytes,
                });
                self.m.store(addr, bytes, v);
                Ok(())
            }
            Operand::Imm(_) => Err("immediate destination".into()),
        }
    }

    fn width2(dst: &Operand, src: &Operand) -> MResult<u32> {
        if let (Operand::Mem(_), Operand::Mem(_)) = (dst, src) {
            return Err("two memory operands".into());
        }
        Ok(match (dst, src) {
            (Operand::Reg(r), _) | (_, Operand::Reg(r)) => r.width(),
            (Operand::Mem(m), _) | (_, Operand::Mem(m)) => m.size.map_or(32, |s| s.bits()),
            _ => 32,
        })
    }

    fn result_flags(&mut self, t: u32, w: u32) {
        self.m.flags.zf = t & mask(w) == 0;
        self.m.flags.sf = msb(t, w);
    }

    fn add_flags(&mut self, a: u32, b: u32, t: u32, w: u32) {
        self.result_flags(t, w);
        self.m.flags.cf = t < a;
        self.m.flags.of = msb(a, w) == msb(b, w) && msb(a, w) != msb(t, w);
    }

    fn sub_flags(&mut self, a: u32, b: u32, t: u32, w: u32) {
        self.result_flags(t, w);
        self.m.flags.cf = a < b;
        self.m.flags.of = msb(a, w) != msb(b, w) && msb(a, w) != msb(t, w);
    }

    fn run(&mut self, ins: &Instruction) -> MResult<()> {
        use Mnemonic::*;
        let ops = &ins.operands;
        match ins.mnemonic {
            Mov => {
                let w = Self::width2(&ops[0], &ops[1])?;
                let v = self.read(&ops[1], w)?;
                self.write(&ops[0], v, w)?;
            }
            Movzx | Movsx => {
                let Operand::Reg(dst) = ops[0] else {
                    return Err("destination must be a register".into());
                };
                let ws = match &ops[1] {
                    Operand::Reg(r) => r.width(),
                    Operand::Mem(m) => m.size.ok_or("memory source needs a size prefix")?.bits(),
                    Operand::Imm(_) => return Err("immediate source".into()),
                };
                let wd = dst.width();
                if ws >= wd {
                    return Err("source must be narrower than destination".into());
                }
                let v = self.read(&ops[1], ws)?;
                let v = if ins.mnemonic == Movzx { v } else { sext(v, ws) as u32 & mask(wd) };
                self.m.regs.write(dst, v);
            }
            Lea => {
                let (Operand::Reg(dst), Operand::Mem(m)) = (&ops[0], &ops[1]) else {
                    return Err("lea needs a register and a memory operand".into());
                };
                if dst.width() != 32 {
                    return Err("lea destination must be 32 bits".into());
                }
                let a = m.address(&self.pre);
                self.m.regs.write(*dst, a);
            }
            Add | Sub | And | Or | Xor | Cmp | Test => {
                let w = Self::width2(&ops[0], &ops[1])?;
                let a = self.read(&ops[0], w)?;
                let b = self.read(&ops[1], w)?;
                let t = match ins.mnemonic {
                    Add => a.wrapping_add(b),
                    Sub | Cmp => a.wrapping_sub(b),
                    And | Test => a & b,
                    Or => a | b,
                    _ => a ^ b,
                } & mask(w);
                match ins.mnemonic {
                    Add => self.add_flags(a, b, t, w),
                    Sub | Cmp => self.sub_flags(a, b, t, w),
                    _ => {
                        self.result_flags(t, w);
                        self.m.flags.cf = false;
                        self.m.flags.of = false;
                    }
                }
                if !matches!(ins.mnemonic, Cmp | Test) {
                    self.write(&ops[0], t, w)?;
                }
            }
            Not => {
                let w = width_of(&ops[0]);
                let a = self.read(&ops[0], w)?;
                self.write(&ops[0], !a & mask(w), w)?;
            }
            Neg => {
                let w = width_of(&ops[0]);
                let a = self.read(&ops[0], w)?;
                let t = 0u32.wrapping_sub(a) & mask(w);
                self.sub_flags(0, a, t, w);
                self.write(&ops[0], t, w)?;
            }
            Shl | Shr | Sar => self.shift(ins)?,
            Mul | Imul if ops.len() == 1 => {
                if width_of(&ops[0]) != 32 || matches!(ops[0], Operand::Imm(_)) {
                    return Err("only 32-bit register or memory multiplicands".into());
                }
                let a = self.m.regs.get(Reg::Eax);
                let b = self.read(&ops[0], 32)?;
                let (lo, hi, over) = if ins.mnemonic == Mul {
                    let p = a as u64 * b as u64;
                    (p as u32, (p >> 32) as u32, p >> 32 != 0)
                } else {
                    let p = a as i32 as i64 * b as i32 as i64;
                    (p as u32, (p >> 32) as u32, p != p as i32 as i64)
                };
                self.m.flags.cf = over;
                self.m.flags.of = over;
                self.m.regs.set(Reg::Eax, lo);
                self.m.regs.set(Reg::Edx, hi);
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
                let p = sext(a, w) * sext(b, w);
                let over = p != sext(p as u32, w);
                self.m.flags.cf = over;
                self.m.flags.of = over;
                self.m.regs.write(dst, p as u32 & mask(w));
            }
            Mul => return Err("mul takes one operand".into()),
            Div => {
                if width_of(&ops[0]) != 32 || matches!(ops[0], Operand::Imm(_)) {
                    return Err("only 32-bit register or memory divisors".into());
                }
                let b = self.read(&ops[0], 32)? as u64;
                if b == 0 {
                    return Err("division by zero".into());
                }
                let n = (self.m.regs.get(Reg::Edx) as u64) << 32 | self.m.regs.get(Reg::Eax) as u64;
                self.m.regs.set(Reg::Eax, (n / b) as u32);
                self.m.regs.set(Reg::Edx, (n % b) as u32);
            }
            Jmp => {
                let Operand::Imm(t) = ops[0] else {
                    return Err("indirect jumps are not supported".into());
                };
                self.fx.jump = Some(t);
            }
            Jcc(cc) => {
                let Operand::Imm(t) = ops[0] else {
                    return Err("indirect jumps are not supported".into());
                };
                let taken = self.m.flags.test(cc);
                self.fx.taken = Some(taken);
                if taken {
                    self.fx.jump = Some(t);
                }
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
                let v = self.read(&ops[1], w)?;
                if self.m.flags.test(cc) {
                    self.m.regs.write(dst, v);
                }
            }
            Push => {
                if width_of(&ops[0]) != 32 {
                    return Err("only 32-bit pushes".into());
                }
                let v = self.read(&ops[0], 32)?;
                let sp = self.pre.get(Reg::Esp).wrapping_sub(4);
                self.fx.accesses.push(Access {
                    kind: AccessKind::Store,
                    addr: sp,
                    bytes: 4,
                });
                self.m.store(sp, 4, v);
                self.m.regs.set(Reg::Esp, sp);
            }
            Pop => {
                let Operand::Reg(dst) = ops[0] else {
                    return Err("pop needs a register destination".into());
                };
                if dst.width() != 32 {
                    return Err("only 32-bit pops".into());
                }
                let sp = self.pre.get(Reg::Esp);
                self.fx.accesses.push(Access {
                    kind: AccessKind::Load,
                    addr: sp,
                    bytes: 4,
                });
                let v = self.m.load(sp, 4);
                if dst.reg != Reg::Esp {
                    self.m.regs.set(Reg::Esp, sp.wrapping_add(4));
                }
                self.m.regs.write(dst, v);
            }
        }
        Ok(())
    }

    fn shift(&mut self, ins: &Instruction) -> MResult<()> {
        let ops = &ins.operands;
        let w = width_of(&ops[0]);
        let cl = RegRef::parse("cl").expect("cl is a register");
        let (n, by_cl) = match ops[1] {
            Operand::Imm(v) => (v & 0x1f, false),
            Operand::Reg(r) if r == cl => (self.pre.read(cl) & 0x1f, true),
            _ => return Err("shift amount must be an immediate or cl".into()),
        };
        if !by_cl && n == 0 {
            return Ok(());
        }
        let a = self.read(&ops[0], w)?;
        let t = match ins.mnemonic {
            Mnemonic::Shl if n < w => (a << n) & mask(w),
            Mnemonic::Shr if n < w => a >> n,
            Mnemonic::Shl | Mnemonic::Shr => 0,
            _ => (sext(a, w) >> n.min(w - 1)) as u32 & mask(w),
        };
        if n > 0 {
            self.result_flags(t, w);
            let bit = |i: u32| a >> i & 1 == 1;
            self.m.flags.cf = match ins.mnemonic {
                Mnemonic::Shl if n <= w => bit(w - n),
                Mnemonic::Shl | Mnemonic::Shr if n > w => false,
                Mnemonic::Sar if n > w => msb(a, w),
                _ => bit(n - 1),
            };
            self.m.flags.of = false;
        }
        self.write(&ops[0], t, w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(m: &mut Machine, s: &str) -> Effect {
        m.step(&s.parse().unwrap()).unwrap()
    }

    fn regs(pairs: &[(Reg, u32)]) -> RegFile {
        let mut r = RegFile::default();
        for (k, v) in pairs {
            r.set(*k, *v);
        }
        r
    }

    #[test]
    fn arithmetic_flags() {
        let mut m = Machine::new(regs(&[(Reg::Eax, 0xffff_ffff)]));
        run(&mut m, "add eax,0x1");
        assert_eq!(m.regs.get(Reg::Eax), 0);
        assert!(m.flags.zf && m.flags.cf && !m.flags.of);
        m.regs.set(Reg::Eax, 0x7fff_ffff);
        run(&mut m, "add eax,0x1");
        assert!(m.flags.of && m.flags.sf && !m.flags.cf);
        run(&mut m, "cmp eax,0x80000001");
        assert!(m.flags.cf);
        assert!(m.flags.test(CondCode::B));
        m.regs.set(Reg::Ebx, 5);
        run(&mut m, "neg ebx");
        assert_eq!(m.regs.get(Reg::Ebx), 0xffff_fffb);
        assert!(m.flags.cf);
    }

    #[test]
    fn sub_registers_and_extension() {
        let mut m = Machine::new(regs(&[(Reg::Eax, 0x1234_5680)]));
        run(&mut m, "movsx ebx,al");
        assert_eq!(m.regs.get(Reg::Ebx), 0xffff_ff80);
        run(&mut m, "movzx ecx,ah");
        assert_eq!(m.regs.get(Reg::Ecx), 0x56);
        run(&mut m, "mov al,0x1");
        assert_eq!(m.regs.get(Reg::Eax), 0x1234_5601);
    }

    #[test]
    fn shifts_match_x86() {
        let mut m = Machine::new(regs(&[(Reg::Eax, 0x8000_0001), (Reg::Ecx, 33)]));
        run(&mut m, "sar eax,0x4");
        assert_eq!(m.regs.get(Reg::Eax), 0xf800_0000);
        assert!(!m.flags.cf);
        run(&mut m, "shl eax,cl");
        // count is masked to 1
        assert_eq!(m.regs.get(Reg::Eax), 0xf000_0000);
        assert!(m.flags.cf);
        m.regs.set(Reg::Ebx, 0x80);
        m.regs.set(Reg::Ecx, 9);
        run(&mut m, "sar bl,cl");
        assert_eq!(m.regs.get(Reg::Ebx), 0xff);
        assert!(m.flags.cf);
    }

    #[test]
    fn multiply_and_divide() {
        let mut m = Machine::new(regs(&[(Reg::Eax, 0x8000_0000), (Reg::Ebx, 4)]));
        run(&mut m, "mul ebx");
        assert_eq!((m.regs.get(Reg::Edx), m.regs.get(Reg::Eax)), (2, 0));
        assert!(m.flags.cf);
        m.regs.set(Reg::Eax, 0xffff_fffe);
        run(&mut m, "imul ebx");
        assert_eq!((m.regs.get(Reg::Edx), m.regs.get(Reg::Eax)), (0xffff_ffff, 0xffff_fff8));
        assert!(!m.flags.cf);
        run(&mut m, "imul ecx,ebx,0x3");
        assert_eq!(m.regs.get(Reg::Ecx), 12);
        m.regs.set(Reg::Edx, 1);
        m.regs.set(Reg::Eax, 2);
        run(&mut m, "div ebx");
        assert_eq!((m.regs.get(Reg::Eax), m.regs.get(Reg::Edx)), (0x4000_0000, 2));
        m.regs.set(Reg::Ebx, 0);
        assert!(m.step(&"div ebx".parse().unwrap()).is_err());
    }

    #[test]
    fn memory_and_stack() {
        let mut m = Machine::new(regs(&[(Reg::Esp, 0x7000), (Reg::Eax, 0xdead_beef)]));
        let fx = run(&mut m, "push eax");
        assert_eq!(fx.accesses[0].addr, 0x6ffc);
        assert_eq!(m.load(0x6ffc, 4), 0xdead_beef);
        let fx = run(&mut m, "mov bl,byte [esp+0x1]");
        assert_eq!(fx.accesses[0].kind, AccessKind::Load);
        assert_eq!(m.regs.get(Reg::Ebx), 0xbe);
        run(&mut m, "pop ecx");
        assert_eq!(m.regs.get(Reg::Ecx), 0xdead_beef);
        assert_eq!(m.regs.get(Reg::Esp), 0x7000);
    }

    #[test]
    fn conditional_moves_and_jumps() {
        let mut m = Machine::new(regs(&[(Reg::Eax, 3), (Reg::Ebx, 9)]));
        run(&mut m, "cmp eax,0x3");
        run(&mut m, "cmovne eax,ebx");
        assert_eq!(m.regs.get(Reg::Eax), 3);
        run(&mut m, "cmove eax,ebx");
        assert_eq!(m.regs.get(Reg::Eax), 9);
        let fx = run(&mut m, "je 0x40");
        assert_eq!((fx.taken, fx.jump), (Some(true), Some(0x40)));
        run(&mut m, "cmp eax,0x10");
        assert_eq!(run(&mut m, "jge 0x40").taken, Some(false));
        assert_eq!(run(&mut m, "jl 0x40").jump, Some(0x40));
    }
}
