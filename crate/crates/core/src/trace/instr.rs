//! Micro-x86 instruction syntax.

use std::fmt;
use std::str::FromStr;

use crate::ir::{Reg, RegRef, RegView};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Size {
    Byte,
    Word,
    Dword,
}

impl Size {
    pub fn bytes(self) -> u8 {
        match self {
            Size::Byte => 1,
            Size::Word => 2,
            Size::Dword => 4,
        }
    }

    pub fn bits(self) -> u32 {
        self.bytes() as u32 * 8
    }

    pub fn from_bits(bits: u32) -> Option<Size> {
        match bits {
            8 => Some(Size::Byte),
            16 => Some(Size::Word),
            32 => Some(Size::Dword),
            _ => None,
        }
    }

    fn keyword(self) -> &'static str {
        match self {
            Size::Byte => "byte",
            Size::Word => "word",
            Size::Dword => "dword",
        }
    }
}

/// `[base + index*scale + disp]` with an optional size prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MemOperand {
    pub size: Option<Size>,
    pub base: Option<Reg>,
    pub index: Option<(Reg, u8)>,
    pub disp: u32,
}

impl MemOperand {
    /// Effective address for a register snapshot, modulo 2^32.
    pub fn address(&self, regs: &RegFile) -> u32 {
        let mut a = self.disp;
        if let Some(b) = self.base {
            a = a.wrapping_add(regs.get(b));
        }
        if let Some((r, s)) = self.index {
            a = a.wrapping_add(regs.get(r).wrapping_mul(s as u32));
        }
        a
    }
}

impl fmt::Display for MemOperand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(s) = self.size {
            write!(f, "{} ", s.keyword())?;
        }
        f.write_str("[")?;
        let mut first = true;
        if let Some(b) = self.base {
            write!(f, "{b}")?;
            first = false;
        }
        if let Some((r, s)) = self.index {
            if !first {
                f.write_str("+")?;
            }
            write!(f, "{r}*{s}")?;
            first = false;
        }
        if first {
            write!(f, "{:#x}", self.disp)?;
        } else if (self.disp as i32) < 0 {
            write!(f, "-{:#x}", (self.disp as i32).unsigned_abs())?;
        } else if self.disp != 0 {
            write!(f, "+{:#x}", self.disp)?;
        }
        f.write_str("]")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Operand {
    Reg(RegRef),
    Imm(u32),
    Mem(MemOperand),
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operand::Reg(r) => write!(f, "{r}"),
            Operand::Imm(v) => write!(f, "{v:#x}"),
            Operand::Mem(m) => write!(f, "{m}"),
        }
    }
}

/// Condition codes shared by `jcc` and `cmovcc`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CondCode {
    E,
    Ne,
    B,
    Ae,
    L,
    Ge,
}

impl CondCode {
    pub const ALL: [CondCode; 6] = [
        CondCode::E,
        CondCode::Ne,
        CondCode::B,
        CondCode::Ae,
        CondCode::L,
        CondCode::Ge,
    ];

    fn suffix(self) -> &'static str {
        match self {
            CondCode::E => "e",
            CondCode::Ne => "ne",
            CondCode::B => "b",
            CondCode::Ae => "ae",
            CondCode::L => "l",
            CondCode::Ge => "ge",
        }
    }

    fn from_suffix(s: &str) -> Option<CondCode> {
        CondCode::ALL.into_iter().find(|c| c.suffix() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mnemonic {
    Mov,
    Movzx,
    Movsx,
    Lea,
    Add,
    Sub,
    Mul,
    Imul,
    Div,
    And,
    Or,
    Xor,
    Not,
    Neg,
    Shl,
    Shr,
    Sar,
    Test,
    Cmp,
    Jmp,
    Jcc(CondCode),
    Cmov(CondCode),
    Push,
    Pop,
}

impl Mnemonic {
    const SIMPLE: [(&'static str, Mnemonic); 21] = [
        ("mov", Mnemonic::Mov),
        ("movzx", Mnemonic::Movzx),
        ("movsx", Mnemonic::Movsx),
        ("lea", Mnemonic::Lea),
        ("add", Mnemonic::Add),
        ("sub", Mnemonic::Sub),
        ("mul", Mnemonic::Mul),
        ("imul", Mnemonic::Imul),
        ("div", Mnemonic::Div),
        ("and", Mnemonic::And),
        ("or", Mnemonic::Or),
        ("xor", Mnemonic::Xor),
        ("not", Mnemonic::Not),
        ("neg", Mnemonic::Neg),
        ("shl", Mnemonic::Shl),
        ("shr", Mnemonic::Shr),
        ("sar", Mnemonic::Sar),
        ("test", Mnemonic::Test),
        ("cmp", Mnemonic::Cmp),
        ("jmp", Mnemonic::Jmp),
        ("push", Mnemonic::Push),
    ];

    pub fn name(self) -> String {
        match self {
            Mnemonic::Jcc(c) => format!("j{}", c.suffix()),
            Mnemonic::Cmov(c) => format!("cmov{}", c.suffix()),
            Mnemonic::Pop => "pop".to_string(),
            m => Mnemonic::SIMPLE
                .iter()
                .find(|(_, x)| *x == m)
                .map(|(n, _)| n.to_string())
                .expect("every simple mnemonic has a name"),
        }
    }

    /// Operand counts accepted by the mnemonic.
    fn arity(self) -> &'static [usize] {
        match self {
            Mnemonic::Mul | Mnemonic::Div | Mnemonic::Not | Mnemonic::Neg => &[1],
            Mnemonic::Jmp | Mnemonic::Jcc(_) | Mnemonic::Push | Mnemonic::Pop => &[1],
            Mnemonic::Imul => &[1, 2, 3],
            _ => &[2],
        }
    }
}

impl FromStr for Mnemonic {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some((_, m)) = Mnemonic::SIMPLE.iter().find(|(n, _)| *n == s) {
            return Ok(*m);
        }
        if s == "pop" {
            return Ok(Mnemonic::Pop);
        }
        if let Some(c) = s.strip_prefix("cmov").and_then(CondCode::from_suffix) {
            return Ok(Mnemonic::Cmov(c));
        }
        if let Some(c) = s.strip_prefix('j').and_then(CondCode::from_suffix) {
            return Ok(Mnemonic::Jcc(c));
        }
        Err(format!("unsupported mnemonic `{s}`"))
    }
}

impl fmt::Display for Mnemonic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Instruction {
    pub mnemonic: Mnemonic,
    pub operands: Vec<Operand>,
}

impl Instruction {
    pub fn new(mnemonic: Mnemonic, operands: Vec<Operand>) -> Instruction {
        Instruction { mnemonic, operands }
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.mnemonic)?;
        for (i, op) in self.operands.iter().enumerate() {
            f.write_str(if i == 0 { " " } else { "," })?;
            write!(f, "{op}")?;
        }
        Ok(())
    }
}

impl FromStr for Instruction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let (mn, rest) = match s.find(char::is_whitespace) {
            Some(i) => (&s[..i], s[i..].trim()),
            None => (s, ""),
        };
        let mnemonic: Mnemonic = mn.to_ascii_lowercase().parse()?;
        let operands = if rest.is_empty() {
            Vec::new()
        } else {
            rest.split(',')
                .map(parse_operand)
                .collect::<Result<Vec<_>, _>>()?
        };
        if !mnemonic.arity().contains(&operands.len()) {
            return Err(format!(
                "`{mnemonic}` takes {:?} operands, got {}",
                mnemonic.arity(),
                operands.len()
            ));
        }
        Ok(Instruction { mnemonic, operands })
    }
}

/// Parses a decimal or `0x` hexadecimal integer with an optional sign,
/// wrapping negatives to 32 bits.
pub fn parse_int(s: &str) -> Result<u32, String> {
    let s = s.trim();
    let (neg, digits) = match s.strip_prefix('-') {
        Some(d) => (true, d.trim()),
        None => (false, s.strip_prefix('+').unwrap_or(s).trim()),
    };
    let v = match digits
        .strip_prefix("0x")
        .or_else(|| digits.strip_prefix("0X"))
    {
        Some(h) => u64::from_str_radix(h, 16),
        None => digits.parse::<u64>(),
    }
    .map_err(|_| format!("invalid integer `{s}`"))?;
    if v > u32::MAX as u64 {
        return Err(format!("integer `{s}` exceeds 32 bits"));
    }
    let v = v as u32;
    Ok(if neg { v.wrapping_neg() } else { v })
}

fn parse_operand(s: &str) -> Result<Operand, String> {
    let s = s.trim();
    if s.is_empty() {
        return Err("empty operand".into());
    }
    let lower = s.to_ascii_lowercase();
    if lower.contains('[') {
        return parse_mem(&lower).map(Operand::Mem);
    }
    if let Some(r) = RegRef::parse(&lower) {
        return Ok(Operand::Reg(r));
    }
    parse_int(&lower)
        .map(Operand::Imm)
        .map_err(|_| format!("invalid operand `{s}`"))
}

fn parse_mem(s: &str) -> Result<MemOperand, String> {
    let open = s.find('[').expect("caller checked for '['");
    let close = s
        .rfind(']')
        .filter(|c| *c > open && s[c + 1..].trim().is_empty())
        .ok_or_else(|| format!("malformed memory operand `{s}`"))?;
    let mut prefix = s[..open].split_whitespace();
    let size = match prefix.next() {
        None => None,
        Some("ptr") => {
            if prefix.next().is_some() {
                return Err(format!("malformed memory operand `{s}`"));
            }
            None
        }
        Some("byte") => Some(Size::Byte),
        Some("word") => Some(Size::Word),
        Some("dword") => Some(Size::Dword),
        Some(other) => return Err(format!("unknown size prefix `{other}`")),
    };
    match prefix.next() {
        None | Some("ptr") => {}
        Some(other) => return Err(format!("unexpected `{other}` in memory operand")),
    }
    if prefix.next().is_some() {
        return Err(format!("malformed memory operand `{s}`"));
    }

    let inner: String = s[open + 1..close].chars().filter(|c| !c.is_whitespace()).collect();
    if inner.is_empty() {
        return Err("empty memory operand".into());
    }
    let mut m = MemOperand {
        size,
        base: None,
        index: None,
        disp: 0,
    };
    // split into signed terms
    let mut terms: Vec<(bool, &str)> = Vec::new();
    let mut start = 0;
    let mut neg = false;
    for (i, c) in inner.char_indices() {
        if (c == '+' || c == '-') && i > start {
            terms.push((neg, &inner[start..i]));
            start = i + 1;
            neg = c == '-';
        } else if (c == '+' || c == '-') && i == start {
            if i != 0 {
                return Err(format!("malformed memory operand `{s}`"));
            }
            start = i + 1;
            neg = c == '-';
        }
    }
    if start >= inner.len() {
        return Err(format!("malformed memory operand `{s}`"));
    }
    terms.push((neg, &inner[start..]));

    for (neg, term) in terms {
        if let Some((a, b)) = term.split_once('*') {
            let (reg, scale) = match (RegRef::parse(a), RegRef::parse(b)) {
                (Some(r), None) => (r, b),
                (None, Some(r)) => (r, a),
                _ => return Err(format!("invalid scaled index `{term}`")),
            };
            let scale = parse_int(scale)?;
            if !matches!(scale, 1 | 2 | 4 | 8) || neg || reg.view != RegView::Full {
                return Err(format!("invalid scaled index `{term}`"));
            }
            if m.index.replace((reg.reg, scale as u8)).is_some() {
                return Err(format!("two index registers in `{s}`"));
            }
        } else if let Some(r) = RegRef::parse(term) {
            if neg || r.view != RegView::Full {
                return Err(format!("invalid base register `{term}`"));
            }
            if m.base.is_none() {
                m.base = Some(r.reg);
            } else if m.index.is_none() {
                m.index = Some((r.reg, 1));
            } else {
                return Err(format!("too many registers in `{s}`"));
            }
        } else {
            let v = parse_int(term)?;
            m.disp = if neg {
                m.disp.wrapping_sub(v)
            } else {
                m.disp.wrapping_add(v)
            };
        }
    }
    // `[esi*1+...]` and `[esi+...]` mean the same; keep the base form
    if m.base.is_none() {
        if let Some((r, 1)) = m.index {
            m.base = Some(r);
            m.index = None;
        }
    }
    Ok(m)
}

/// Register values before an instruction executes, in trace order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct RegFile(pub [u32; 8]);

impl RegFile {
    pub fn get(&self, r: Reg) -> u32 {
        self.0[r.index()]
    }

    pub fn set(&mut self, r: Reg, v: u32) {
        self.0[r.index()] = v;
    }

    pub fn read(&self, r: RegRef) -> u32 {
        r.read_value(self.get(r.reg))
    }

    pub fn write(&mut self, r: RegRef, v: u32) {
        let p = r.write_value(self.get(r.reg), v);
        self.set(r.reg, p);
    }
}

impl fmt::Display for RegFile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, r) in Reg::ALL.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{r}={:#010x}", self.0[i])?;
        }
        Ok(())
    }
}
