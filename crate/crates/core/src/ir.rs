//! Bit-level intermediate representation.
//!
//! Every register, flag and memory byte is a vector of [`RefinedBit`]s. A bit
//! carries a security level from the five-point chain
//! `CST <= URA <= WRA <= SID <= SDD` and, optionally, a value predicate saying
//! the bit is statically known to be `0` or `1`.
//!
//! Bit index 0 is the least significant bit everywhere in this crate. The
//! display form produced by [`TypedBitvector::evidence`] is MSB-first, e.g.
//! `{0}²⁴{K}⁸:SDD`.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use smallvec::SmallVec;
use thiserror::Error;

/// Security level of a single bit.
///
/// The derived `Ord` is the lattice order, so `join` is simply `max`.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(rename_all = "UPPERCASE")]
pub enum SecurityType {
    /// Constant.
    Cst,
    /// Uniformly random.
    Ura,
    /// Weakly random: derived from randomness but no longer uniform.
    Wra,
    /// Secret-independent.
    #[default]
    Sid,
    /// Secret-dependent.
    Sdd,
}

impl SecurityType {
    pub const ALL: [SecurityType; 5] = [
        SecurityType::Cst,
        SecurityType::Ura,
        SecurityType::Wra,
        SecurityType::Sid,
        SecurityType::Sdd,
    ];

    /// Least upper bound in the chain.
    pub fn join(self, other: SecurityType) -> SecurityType {
        self.max(other)
    }

    pub fn name(self) -> &'static str {
        match self {
            SecurityType::Cst => "CST",
            SecurityType::Ura => "URA",
            SecurityType::Wra => "WRA",
            SecurityType::Sid => "SID",
            SecurityType::Sdd => "SDD",
        }
    }

    /// One-letter symbol used in bit patterns (K, I, W, U as in the
    /// inference log; C for a constant bit whose value is unknown).
    pub fn symbol(self) -> char {
        match self {
            SecurityType::Cst => 'C',
            SecurityType::Ura => 'U',
            SecurityType::Wra => 'W',
            SecurityType::Sid => 'I',
            SecurityType::Sdd => 'K',
        }
    }
}

impl fmt::Display for SecurityType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Free-function form of [`SecurityType::join`].
pub fn join(a: SecurityType, b: SecurityType) -> SecurityType {
    a.join(b)
}

/// One bit's refinement: a security level and an optional known value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RefinedBit {
    pub sec: SecurityType,
    pub value: Option<bool>,
}

impl RefinedBit {
    pub const ZERO: RefinedBit = RefinedBit::constant(false);
    pub const ONE: RefinedBit = RefinedBit::constant(true);

    pub const fn constant(value: bool) -> RefinedBit {
        RefinedBit {
            sec: SecurityType::Cst,
            value: Some(value),
        }
    }

    pub const fn unknown(sec: SecurityType) -> RefinedBit {
        RefinedBit { sec, value: None }
    }

    /// The bit's value when it is a CST bit with a value predicate.
    pub fn const_value(self) -> Option<bool> {
        match self.sec {
            SecurityType::Cst => self.value,
            _ => None,
        }
    }

    pub fn symbol(self) -> char {
        match self.value {
            Some(false) => '0',
            Some(true) => '1',
            None => self.sec.symbol(),
        }
    }
}

impl Default for RefinedBit {
    fn default() -> Self {
        RefinedBit::unknown(SecurityType::Sid)
    }
}

pub type Bits = SmallVec<[RefinedBit; 32]>;

/// An ordered vector of refined bits, index 0 = least significant.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TypedBitvector {
    bits: Bits,
}

impl TypedBitvector {
    /// Builds a vector from LSB-first bits.
    ///
    /// Panics on an empty iterator: zero-width vectors do not exist.
    pub fn from_bits<I: IntoIterator<Item = RefinedBit>>(bits: I) -> TypedBitvector {
        let bits: Bits = bits.into_iter().collect();
        assert!(!bits.is_empty(), "bitvector must have at least one bit");
        TypedBitvector { bits }
    }

    pub fn splat(bit: RefinedBit, width: u32) -> TypedBitvector {
        assert!(width > 0, "bitvector must have at least one bit");
        TypedBitvector {
            bits: smallvec::smallvec![bit; width as usize],
        }
    }

    /// All bits at `sec` without value predicates.
    pub fn unknown(sec: SecurityType, width: u32) -> TypedBitvector {
        TypedBitvector::splat(RefinedBit::unknown(sec), width)
    }

    pub fn width(&self) -> u32 {
        self.bits.len() as u32
    }

    pub fn bits(&self) -> &[RefinedBit] {
        &self.bits
    }

    pub fn bits_mut(&mut self) -> &mut [RefinedBit] {
        &mut self.bits
    }

    pub fn bit(&self, i: u32) -> RefinedBit {
        self.bits[i as usize]
    }

    pub fn msb(&self) -> RefinedBit {
        self.bits[self.bits.len() - 1]
    }

    pub fn vector_type(&self) -> SecurityType {
        vector_type(self)
    }

    /// Join of every bit's level (ignores structural priority).
    pub fn max_level(&self) -> SecurityType {
        self.bits
            .iter()
            .map(|b| b.sec)
            .max()
            .unwrap_or(SecurityType::Cst)
    }

    pub fn has_level(&self, sec: SecurityType) -> bool {
        self.bits.iter().any(|b| b.sec == sec)
    }

    /// The integer value when every bit is CST with a value predicate.
    pub fn const_value(&self) -> Option<u64> {
        if self.bits.len() > 64 {
            return None;
        }
        let mut v = 0u64;
        for (i, b) in self.bits.iter().enumerate() {
            if b.const_value()? {
                v |= 1 << i;
            }
        }
        Some(v)
    }

    /// The integer value when every bit has a value predicate, whatever its
    /// level.
    pub fn known_value(&self) -> Option<u64> {
        if self.bits.len() > 64 {
            return None;
        }
        let mut v = 0u64;
        for (i, b) in self.bits.iter().enumerate() {
            if b.value? {
                v |= 1 << i;
            }
        }
        Some(v)
    }

    /// Bits `lo..=hi`, verbatim. Panics on an invalid range; use
    /// [`TypedBitvector::try_extract`] for untrusted indices.
    pub fn extract(&self, lo: u32, hi: u32) -> TypedBitvector {
        self.try_extract(lo, hi)
            .unwrap_or_else(|e| panic!("{e}"))
    }

    pub fn try_extract(&self, lo: u32, hi: u32) -> Result<TypedBitvector, IrError> {
        if lo > hi || hi >= self.width() {
            return Err(IrError::ExtractRange {
                lo,
                hi,
                width: self.width(),
            });
        }
        Ok(TypedBitvector {
            bits: self.bits[lo as usize..=hi as usize].iter().copied().collect(),
        })
    }

    /// `hi # lo`: `hi` supplies the most significant bits.
    pub fn concat(hi: &TypedBitvector, lo: &TypedBitvector) -> TypedBitvector {
        let mut bits = lo.bits.clone();
        bits.extend(hi.bits.iter().copied());
        TypedBitvector { bits }
    }

    /// Replaces bits `lo..lo+width(part)` with `part`.
    pub fn splice(&mut self, lo: u32, part: &TypedBitvector) {
        let lo = lo as usize;
        assert!(lo + part.bits.len() <= self.bits.len(), "splice out of range");
        self.bits[lo..lo + part.bits.len()].copy_from_slice(&part.bits);
    }

    /// MSB-first run-length rendering with the vector type, e.g.
    /// `{0}²⁴{K}⁸:SDD`.
    pub fn evidence(&self) -> String {
        format!("{}:{}", self.pattern(), self.vector_type())
    }

    /// MSB-first run-length pattern without the type suffix.
    pub fn pattern(&self) -> String {
        let mut out = String::new();
        let mut iter = self.bits.iter().rev().map(|b| b.symbol()).peekable();
        while let Some(sym) = iter.next() {
            let mut run = 1usize;
            while iter.peek() == Some(&sym) {
                iter.next();
                run += 1;
            }
            out.push('{');
            out.push(sym);
            out.push('}');
            if run > 1 {
                out.push_str(&superscript(run));
            }
        }
        out
    }
}

impl fmt::Display for TypedBitvector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.evidence())
    }
}

fn superscript(n: usize) -> String {
    const DIGITS: [char; 10] = ['⁰', '¹', '²', '³', '⁴', '⁵', '⁶', '⁷', '⁸', '⁹'];
    n.to_string()
        .chars()
        .map(|c| DIGITS[c.to_digit(10).unwrap() as usize])
        .collect()
}

/// Vector-level type from the constituent bits, by structural priority:
/// SDD, then URA, then SID, then WRA, else CST.
pub fn vector_type(v: &TypedBitvector) -> SecurityType {
    let mut seen = [false; 5];
    for b in v.bits() {
        seen[b.sec as usize] = true;
    }
    const PRIORITY: [SecurityType; 4] = [
        SecurityType::Sdd,
        SecurityType::Ura,
        SecurityType::Sid,
        SecurityType::Wra,
    ];
    PRIORITY
        .into_iter()
        .find(|s| seen[*s as usize])
        .unwrap_or(SecurityType::Cst)
}

/// A CST vector carrying the binary digits of `value`.
///
/// Panics when `value` does not fit in `width` bits or `width` is 0 or
/// above 64.
pub fn mk_constant(value: u64, width: u32) -> TypedBitvector {
    assert!((1..=64).contains(&width), "constant width {width} out of range");
    assert!(
        width == 64 || value >> width == 0,
        "constant {value:#x} does not fit in {width} bits"
    );
    TypedBitvector::from_bits((0..width).map(|i| RefinedBit::constant(value >> i & 1 == 1)))
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IrError {
    #[error("extract [{lo}:{hi}] out of range for width {width}")]
    ExtractRange { lo: u32, hi: u32, width: u32 },
    #[error("annotation level must be SDD or URA, got {0}")]
    AnnotationLevel(SecurityType),
    #[error("annotation range at {addr:#x} has zero length")]
    EmptyRange { addr: u32 },
}

/// General-purpose 32-bit registers, in trace-file order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reg {
    Eax,
    Ebx,
    Ecx,
    Edx,
    Esi,
    Edi,
    Ebp,
    Esp,
}

impl Reg {
    pub const ALL: [Reg; 8] = [
        Reg::Eax,
        Reg::Ebx,
        Reg::Ecx,
        Reg::Edx,
        Reg::Esi,
        Reg::Edi,
        Reg::Ebp,
        Reg::Esp,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Reg::Eax => "eax",
            Reg::Ebx => "ebx",
            Reg::Ecx => "ecx",
            Reg::Edx => "edx",
            Reg::Esi => "esi",
            Reg::Edi => "edi",
            Reg::Ebp => "ebp",
            Reg::Esp => "esp",
        }
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which slice of a 32-bit register an operand names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RegView {
    Full,
    Low16,
    Low8,
    High8,
}

impl RegView {
    /// `(lowest bit, width)` inside the parent register.
    pub fn span(self) -> (u32, u32) {
        match self {
            RegView::Full => (0, 32),
            RegView::Low16 => (0, 16),
            RegView::Low8 => (0, 8),
            RegView::High8 => (8, 8),
        }
    }
}

/// A register operand: parent register plus view.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RegRef {
    pub reg: Reg,
    pub view: RegView,
}

impl RegRef {
    pub const fn full(reg: Reg) -> RegRef {
        RegRef {
            reg,
            view: RegView::Full,
        }
    }

    pub fn width(self) -> u32 {
        self.view.span().1
    }

    pub fn parse(name: &str) -> Option<RegRef> {
        use Reg::*;
        use RegView::*;
        let (reg, view) = match name {
            "eax" => (Eax, Full),
            "ebx" => (Ebx, Full),
            "ecx" => (Ecx, Full),
            "edx" => (Edx, Full),
            "esi" => (Esi, Full),
            "edi" => (Edi, Full),
            "ebp" => (Ebp, Full),
            "esp" => (Esp, Full),
            "ax" => (Eax, Low16),
            "bx" => (Ebx, Low16),
            "cx" => (Ecx, Low16),
            "dx" => (Edx, Low16),
            "si" => (Esi, Low16),
            "di" => (Edi, Low16),
            "bp" => (Ebp, Low16),
            "sp" => (Esp, Low16),
            "al" => (Eax, Low8),
            "bl" => (Ebx, Low8),
            "cl" => (Ecx, Low8),
            "dl" => (Edx, Low8),
            "ah" => (Eax, High8),
            "bh" => (Ebx, High8),
            "ch" => (Ecx, High8),
            "dh" => (Edx, High8),
            _ => return None,
        };
        Some(RegRef { reg, view })
    }

    pub fn name(self) -> &'static str {
        use Reg::*;
        use RegView::*;
        match (self.view, self.reg) {
            (Full, r) => r.name(),
            (Low16, Eax) => "ax",
            (Low16, Ebx) => "bx",
            (Low16, Ecx) => "cx",
            (Low16, Edx) => "dx",
            (Low16, Esi) => "si",
            (Low16, Edi) => "di",
            (Low16, Ebp) => "bp",
            (Low16, Esp) => "sp",
            (Low8, Eax) => "al",
            (Low8, Ebx) => "bl",
            (Low8, Ecx) => "cl",
            (Low8, Edx) => "dl",
            (High8, Eax) => "ah",
            (High8, Ebx) => "bh",
            (High8, Ecx) => "ch",
            (High8, Edx) => "dh",
            // No 8-bit views exist for esi/edi/ebp/esp in 32-bit mode.
            (Low8 | High8, _) => "<invalid>",
        }
    }

    /// Reads this view out of a concrete 32-bit register value.
    pub fn read_value(self, parent: u32) -> u32 {
        let (lo, w) = self.view.span();
        let mask = if w == 32 { u32::MAX } else { (1u32 << w) - 1 };
        (parent >> lo) & mask
    }

    /// Writes `value` into this view of `parent`, returning the new parent.
    pub fn write_value(self, parent: u32, value: u32) -> u32 {
        let (lo, w) = self.view.span();
        if w == 32 {
            return value;
        }
        let mask = ((1u32 << w) - 1) << lo;
        (parent & !mask) | ((value << lo) & mask)
    }
}

impl fmt::Display for RegRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Flag {
    Zf,
    Cf,
    Sf,
    Of,
}

impl Flag {
    pub const ALL: [Flag; 4] = [Flag::Zf, Flag::Cf, Flag::Sf, Flag::Of];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Flag::Zf => "zf",
            Flag::Cf => "cf",
            Flag::Sf => "sf",
            Flag::Of => "of",
        }
    }
}

/// A variable of the typing environment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Var {
    Reg(RegRef),
    Flag(Flag),
    /// Per-instruction temporary (`r0`, `r1`, ...).
    Temp(u8),
}

impl Var {
    pub const fn reg(reg: Reg) -> Var {
        Var::Reg(RegRef::full(reg))
    }
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Var::Reg(r) => write!(f, "{r}"),
            Var::Flag(fl) => f.write_str(fl.name()),
            Var::Temp(i) => write!(f, "r{i}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinOp {
    And,
    Or,
    Xor,
    Add,
    Sub,
    Mul,
    /// High half of the unsigned double-width product.
    MulHiU,
    /// High half of the signed double-width product.
    MulHiS,
    DivU,
    RemU,
    Ult,
    Ule,
    Ugt,
    Uge,
    Slt,
    Sle,
    Sgt,
    Sge,
    Eq,
    Ne,
}

impl BinOp {
    pub fn is_logic(self) -> bool {
        matches!(self, BinOp::And | BinOp::Or | BinOp::Xor)
    }

    pub fn is_arith(self) -> bool {
        matches!(
            self,
            BinOp::Add
                | BinOp::Sub
                | BinOp::Mul
                | BinOp::MulHiU
                | BinOp::MulHiS
                | BinOp::DivU
                | BinOp::RemU
        )
    }

    pub fn is_comparison(self) -> bool {
        !self.is_logic() && !self.is_arith()
    }

    pub fn symbol(self) -> &'static str {
        match self {
            BinOp::And => "&",
            BinOp::Or => "|",
            BinOp::Xor => "^",
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::MulHiU => "*hu",
            BinOp::MulHiS => "*hs",
            BinOp::DivU => "/u",
            BinOp::RemU => "%u",
            BinOp::Ult => "<u",
            BinOp::Ule => "<=u",
            BinOp::Ugt => ">u",
            BinOp::Uge => ">=u",
            BinOp::Slt => "<s",
            BinOp::Sle => "<=s",
            BinOp::Sgt => ">s",
            BinOp::Sge => ">=s",
            BinOp::Eq => "==",
            BinOp::Ne => "!=",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShiftKind {
    Left,
    RightLogical,
    RightArith,
}

/// Bit-level expressions.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Expr {
    Bit(bool),
    Var(Var),
    Const { value: u64, width: u32 },
    Not(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    /// `cond ? then : else`, `cond` one bit wide.
    Cond(Box<Expr>, Box<Expr>, Box<Expr>),
    /// `hi # lo`.
    Concat(Box<Expr>, Box<Expr>),
    Extract { lo: u32, hi: u32, e: Box<Expr> },
    /// Shift by a register amount. `concrete` is the masked count observed on
    /// the trace, used when the amount is secret-independent but carries no
    /// value predicates.
    Shift {
        kind: ShiftKind,
        value: Box<Expr>,
        amount: Box<Expr>,
        concrete: u32,
    },
}

impl Expr {
    pub fn var(v: Var) -> Expr {
        Expr::Var(v)
    }

    pub fn reg(r: Reg) -> Expr {
        Expr::Var(Var::reg(r))
    }

    pub fn konst(value: u64, width: u32) -> Expr {
        let value = if width >= 64 {
            value
        } else {
            value & ((1u64 << width) - 1)
        };
        Expr::Const { value, width }
    }

    pub fn not(e: Expr) -> Expr {
        Expr::Not(Box::new(e))
    }

    pub fn bin(op: BinOp, a: Expr, b: Expr) -> Expr {
        Expr::Bin(op, Box::new(a), Box::new(b))
    }

    pub fn cond(c: Expr, t: Expr, e: Expr) -> Expr {
        Expr::Cond(Box::new(c), Box::new(t), Box::new(e))
    }

    pub fn concat(hi: Expr, lo: Expr) -> Expr {
        Expr::Concat(Box::new(hi), Box::new(lo))
    }

    pub fn extract(lo: u32, hi: u32, e: Expr) -> Expr {
        Expr::Extract {
            lo,
            hi,
            e: Box::new(e),
        }
    }

    /// Every variable read by this expression.
    pub fn vars(&self, out: &mut Vec<Var>) {
        match self {
            Expr::Bit(_) | Expr::Const { .. } => {}
            Expr::Var(v) => out.push(*v),
            Expr::Not(e) | Expr::Extract { e, .. } => e.vars(out),
            Expr::Bin(_, a, b) | Expr::Concat(a, b) => {
                a.vars(out);
                b.vars(out);
            }
            Expr::Cond(c, t, e) => {
                c.vars(out);
                t.vars(out);
                e.vars(out);
            }
            Expr::Shift { value, amount, .. } => {
                value.vars(out);
                amount.vars(out);
            }
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Bit(b) => write!(f, "{}", *b as u8),
            Expr::Var(v) => write!(f, "{v}"),
            Expr::Const { value, width } => write!(f, "{value:#x}:{width}"),
            Expr::Not(e) => write!(f, "~({e})"),
            Expr::Bin(op, a, b) => write!(f, "({a} {} {b})", op.symbol()),
            Expr::Cond(c, t, e) => write!(f, "({c} ? {t} : {e})"),
            Expr::Concat(a, b) => write!(f, "({a} # {b})"),
            Expr::Extract { lo, hi, e } => write!(f, "[{lo}:{hi}]/{e}"),
            Expr::Shift {
                kind,
                value,
                amount,
                ..
            } => {
                let op = match kind {
                    ShiftKind::Left => "<<",
                    ShiftKind::RightLogical => ">>",
                    ShiftKind::RightArith => ">>s",
                };
                write!(f, "({value} {op} {amount})")
            }
        }
    }
}

/// A memory operand: `base + offset`, plus the concrete address taken from
/// the trace.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MemRef {
    pub base: Expr,
    pub offset: Option<Expr>,
    pub addr: u32,
    pub bytes: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Stmt {
    Assign(Var, Expr),
    Load(Var, MemRef),
    Store(MemRef, Expr),
    Seq(Box<Stmt>, Box<Stmt>),
}

impl Stmt {
    pub fn seq(a: Stmt, b: Stmt) -> Stmt {
        Stmt::Seq(Box::new(a), Box::new(b))
    }

    /// The written variable, if any.
    pub fn target(&self) -> Option<Var> {
        match self {
            Stmt::Assign(v, _) | Stmt::Load(v, _) => Some(*v),
            _ => None,
        }
    }
}

impl fmt::Display for Stmt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stmt::Assign(v, e) => write!(f, "{v} <- {e}"),
            Stmt::Load(v, m) => write!(f, "{v} <- mem[{:#x}]:{}", m.addr, m.bytes),
            Stmt::Store(m, e) => write!(f, "mem[{:#x}]:{} <- {e}", m.addr, m.bytes),
            Stmt::Seq(a, b) => write!(f, "{a}; {b}"),
        }
    }
}

/// What an annotation applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AnnotTarget {
    Reg(RegRef),
    Mem { addr: u32, len: u32 },
}

impl fmt::Display for AnnotTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AnnotTarget::Reg(r) => write!(f, "reg {r}"),
            AnnotTarget::Mem { addr, len } => write!(f, "mem {addr:#x} {len}"),
        }
    }
}

pub type ByteType = [RefinedBit; 8];

/// Flow-sensitive typing environment.
///
/// Registers and flags always have a type (SID by default). Memory bytes are
/// tracked only once written or annotated; reading an untracked byte yields
/// the SID default.
#[derive(Debug, Clone, PartialEq)]
pub struct TypeEnv {
    regs: [TypedBitvector; 8],
    flags: [RefinedBit; 4],
    temps: Vec<Option<TypedBitvector>>,
    mem: HashMap<u32, ByteType>,
}

impl Default for TypeEnv {
    fn default() -> Self {
        TypeEnv::new()
    }
}

impl TypeEnv {
    pub fn new() -> TypeEnv {
        TypeEnv {
            regs: std::array::from_fn(|_| TypedBitvector::unknown(SecurityType::Sid, 32)),
            flags: [RefinedBit::default(); 4],
            temps: Vec::new(),
            mem: HashMap::new(),
        }
    }

    pub fn reg(&self, reg: Reg) -> &TypedBitvector {
        &self.regs[reg.index()]
    }

    pub fn flag(&self, flag: Flag) -> RefinedBit {
        self.flags[flag.index()]
    }

    pub fn read(&self, var: Var) -> TypedBitvector {
        match var {
            Var::Reg(r) => {
                let (lo, w) = r.view.span();
                let parent = &self.regs[r.reg.index()];
                if w == 32 {
                    parent.clone()
                } else {
                    parent.extract(lo, lo + w - 1)
                }
            }
            Var::Flag(f) => TypedBitvector::splat(self.flags[f.index()], 1),
            Var::Temp(i) => self
                .temps
                .get(i as usize)
                .and_then(|t| t.clone())
                .unwrap_or_else(|| panic!("temporary r{i} read before written")),
        }
    }

    /// Overwrites `var`. Sub-register writes splice into the parent.
    pub fn write(&mut self, var: Var, value: TypedBitvector) {
        match var {
            Var::Reg(r) => {
                let (lo, w) = r.view.span();
                assert_eq!(value.width(), w, "width mismatch writing {r}");
                if w == 32 {
                    self.regs[r.reg.index()] = value;
                } else {
                    self.regs[r.reg.index()].splice(lo, &value);
                }
            }
            Var::Flag(f) => {
                assert_eq!(value.width(), 1, "flags are one bit wide");
                self.flags[f.index()] = value.bit(0);
            }
            Var::Temp(i) => {
                let i = i as usize;
                if self.temps.len() <= i {
                    self.temps.resize(i + 1, None);
                }
                self.temps[i] = Some(value);
            }
        }
    }

    /// Resets `var` to the SID default without value predicates.
    pub fn reset(&mut self, var: Var) {
        let w = self.read_width(var);
        self.write(var, TypedBitvector::unknown(SecurityType::Sid, w));
    }

    fn read_width(&self, var: Var) -> u32 {
        match var {
            Var::Reg(r) => r.width(),
            Var::Flag(_) => 1,
            Var::Temp(i) => self
                .temps
                .get(i as usize)
                .and_then(|t| t.as_ref().map(|t| t.width()))
                .unwrap_or(32),
        }
    }

    pub fn clear_temps(&mut self) {
        self.temps.clear();
    }

    pub fn mem_byte(&self, addr: u32) -> Option<&ByteType> {
        self.mem.get(&addr)
    }

    pub fn write_mem_byte(&mut self, addr: u32, byte: ByteType) {
        self.mem.insert(addr, byte);
    }

    pub fn forget_mem_byte(&mut self, addr: u32) {
        self.mem.remove(&addr);
    }

    pub fn tracked_bytes(&self) -> impl Iterator<Item = (u32, &ByteType)> {
        self.mem.iter().map(|(a, b)| (*a, b))
    }

    pub fn tracked_byte_count(&self) -> usize {
        self.mem.len()
    }

    /// Marks every bit of `target` with `level` and no value predicate.
    pub fn annotate_in_place(
        &mut self,
        target: AnnotTarget,
        level: SecurityType,
    ) -> Result<(), IrError> {
        if !matches!(level, SecurityType::Sdd | SecurityType::Ura) {
            return Err(IrError::AnnotationLevel(level));
        }
        match target {
            AnnotTarget::Reg(r) => {
                self.write(Var::Reg(r), TypedBitvector::unknown(level, r.width()));
            }
            AnnotTarget::Mem { addr, len } => {
                if len == 0 {
                    return Err(IrError::EmptyRange { addr });
                }
                for i in 0..len {
                    self.write_mem_byte(addr.wrapping_add(i), [RefinedBit::unknown(level); 8]);
                }
            }
        }
        Ok(())
    }
}

/// Returns `env` with `target` annotated at `level` (SDD or URA).
pub fn annotate(
    mut env: TypeEnv,
    target: AnnotTarget,
    level: SecurityType,
) -> Result<TypeEnv, IrError> {
    env.annotate_in_place(target, level)?;
    Ok(env)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use SecurityType::*;

    fn level() -> impl Strategy<Value = SecurityType> {
        prop::sample::select(SecurityType::ALL.to_vec())
    }

    fn bits_of(spec: &[(SecurityType, usize)]) -> TypedBitvector {
        // spec is LSB-first runs
        TypedBitvector::from_bits(
            spec.iter()
                .flat_map(|(s, n)| std::iter::repeat_n(RefinedBit::unknown(*s), *n)),
        )
    }

    #[test]
    fn join_examples() {
        assert_eq!(join(Sid, Sdd), Sdd);
        assert_eq!(join(Cst, Cst), Cst);
        assert_eq!(join(Ura, Wra), Wra);
    }

    #[test]
    fn vector_type_keeps_randomness() {
        // lower 16 SID, upper 16 URA
        assert_eq!(vector_type(&bits_of(&[(Sid, 16), (Ura, 16)])), Ura);
        assert_eq!(vector_type(&mk_constant(0, 32)), Cst);
        assert_eq!(vector_type(&bits_of(&[(Cst, 31), (Sdd, 1)])), Sdd);
        assert_eq!(vector_type(&bits_of(&[(Cst, 31), (Wra, 1)])), Wra);
        assert_eq!(vector_type(&bits_of(&[(Wra, 31), (Sid, 1)])), Sid);
    }

    #[test]
    fn mk_constant_expands_binary_digits() {
        let v = mk_constant(0x7, 32);
        for i in 0..32 {
            assert_eq!(v.bit(i), RefinedBit::constant(i < 3));
        }
        let v = mk_constant(0xffff_0000, 32);
        assert_eq!(v.pattern(), "{1}¹⁶{0}¹⁶");
        assert_eq!(mk_constant(0, 1).bits(), &[RefinedBit::ZERO]);
    }

    #[test]
    #[should_panic]
    fn mk_constant_overflow_is_rejected() {
        mk_constant(0x100, 8);
    }

    #[test]
    fn annotate_register_and_memory() {
        let env = annotate(TypeEnv::new(), AnnotTarget::Reg(RegRef::full(Reg::Eax)), Sdd).unwrap();
        let eax = env.read(Var::reg(Reg::Eax));
        assert!(eax.bits().iter().all(|b| *b == RefinedBit::unknown(Sdd)));
        assert_eq!(eax.evidence(), "{K}³²:SDD");
        // Extract view over the annotated parent.
        let ax = env.read(Var::Reg(RegRef::parse("ax").unwrap()));
        assert_eq!(ax, TypedBitvector::unknown(Sdd, 16));

        let env = annotate(
            TypeEnv::new(),
            AnnotTarget::Mem {
                addr: 0x1000,
                len: 4,
            },
            Ura,
        )
        .unwrap();
        for a in 0x1000..0x1004 {
            assert_eq!(env.mem_byte(a), Some(&[RefinedBit::unknown(Ura); 8]));
        }
        assert_eq!(env.mem_byte(0x1004), None);
    }

    #[test]
    fn annotate_rejects_other_levels() {
        let r = annotate(TypeEnv::new(), AnnotTarget::Reg(RegRef::full(Reg::Eax)), Sid);
        assert_eq!(r.unwrap_err(), IrError::AnnotationLevel(Sid));
        let r = annotate(TypeEnv::new(), AnnotTarget::Reg(RegRef::full(Reg::Eax)), Cst);
        assert!(r.is_err());
    }

    #[test]
    fn subregister_write_splices_parent() {
        let mut env = annotate(TypeEnv::new(), AnnotTarget::Reg(RegRef::full(Reg::Eax)), Sdd).unwrap();
        env.write(Var::Reg(RegRef::parse("al").unwrap()), mk_constant(0x5a, 8));
        let eax = env.read(Var::reg(Reg::Eax));
        assert_eq!(eax.extract(0, 7), mk_constant(0x5a, 8));
        assert_eq!(eax.extract(8, 31), TypedBitvector::unknown(Sdd, 24));
        env.write(Var::Reg(RegRef::parse("ah").unwrap()), mk_constant(0x1, 8));
        assert_eq!(env.read(Var::Reg(RegRef::parse("ax").unwrap())).const_value(), Some(0x15a));
    }

    #[test]
    fn evidence_rendering_is_msb_first() {
        let v = TypedBitvector::concat(&mk_constant(0, 24), &TypedBitvector::unknown(Sdd, 8));
        assert_eq!(v.evidence(), "{0}²⁴{K}⁸:SDD");
        let one = mk_constant(1, 1);
        assert_eq!(one.evidence(), "{1}:CST");
    }

    #[test]
    fn extract_range_errors() {
        let v = mk_constant(0, 8);
        assert!(v.try_extract(3, 2).is_err());
        assert!(v.try_extract(0, 8).is_err());
        assert_eq!(v.try_extract(7, 7).unwrap().width(), 1);
    }

    #[test]
    fn register_names_round_trip() {
        for name in [
            "eax", "ebx", "ecx", "edx", "esi", "edi", "ebp", "esp", "ax", "bx", "cx", "dx", "si",
            "di", "bp", "sp", "al", "bl", "cl", "dl", "ah", "bh", "ch", "dh",
        ] {
            assert_eq!(RegRef::parse(name).unwrap().name(), name);
        }
        assert!(RegRef::parse("sil").is_none());
    }

    proptest! {
        #[test]
        fn join_is_a_semilattice(a in level(), b in level(), c in level()) {
            prop_assert_eq!(join(a, b), join(b, a));
            prop_assert_eq!(join(a, join(b, c)), join(join(a, b), c));
            prop_assert_eq!(join(a, a), a);
        }

        #[test]
        fn vector_type_is_monotone_in_priority(
            levels in prop::collection::vec(level(), 1..40),
            idx in any::<prop::sample::Index>(),
            raised in level(),
        ) {
            // URA outranks SID and WRA when picking the vector type
            let rank = |s: SecurityType| match s {
                SecurityType::Cst => 0,
                SecurityType::Wra => 1,
                SecurityType::Sid => 2,
                SecurityType::Ura => 3,
                SecurityType::Sdd => 4,
            };
            let v = TypedBitvector::from_bits(levels.iter().map(|s| RefinedBit::unknown(*s)));
            let i = idx.index(levels.len());
            prop_assume!(rank(raised) >= rank(levels[i]));
            let mut w = v.clone();
            w.bits_mut()[i].sec = raised;
            prop_assert!(rank(vector_type(&w)) >= rank(vector_type(&v)));
            let top = levels.iter().copied().max_by_key(|s| rank(*s)).unwrap();
            prop_assert_eq!(vector_type(&v), top);
        }

        #[test]
        fn concat_then_extract_low_recovers_low(
            hi in prop::collection::vec((level(), any::<Option<bool>>()), 1..20),
            lo in prop::collection::vec((level(), any::<Option<bool>>()), 1..20),
        ) {
            let mk = |v: &Vec<(SecurityType, Option<bool>)>| TypedBitvector::from_bits(
                v.iter().map(|(s, b)| RefinedBit { sec: *s, value: *b }));
            let (h, l) = (mk(&hi), mk(&lo));
            let c = TypedBitvector::concat(&h, &l);
            prop_assert_eq!(c.width(), h.width() + l.width());
            prop_assert_eq!(c.extract(0, l.width() - 1), l);
            prop_assert_eq!(c.extract(lo.len() as u32, c.width() - 1), h);
        }

        #[test]
        fn mk_constant_predicates_reproduce_value(width in 1u32..=64, raw in any::<u64>()) {
            let value = if width == 64 { raw } else { raw & ((1 << width) - 1) };
            let v = mk_constant(value, width);
            prop_assert_eq!(v.const_value(), Some(value));
            prop_assert_eq!(vector_type(&v), SecurityType::Cst);
        }
    }
}
