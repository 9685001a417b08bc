//! Refinement type inference over the bit-level IR.
//!
//! Every `infer_*` function takes a `&mut RuleSet` and records the rules it
//! applied. Statement execution additionally reports memory accesses so the
//! detector can check the typed address.

use std::fmt;

use thiserror::Error;

use crate::ir::{
    mk_constant, vector_type, BinOp, Expr, IrError, MemRef, RefinedBit, SecurityType, ShiftKind,
    Stmt, TypeEnv, TypedBitvector, Var,
};

use SecurityType::*;

/// Names of the inference rules, in display order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum Rule {
    LogicI,
    LogicII,
    ConjDisjI,
    ConjDisjII,
    ConstConjI,
    ConstConjII,
    ConstDisjI,
    ConstDisjII,
    XorI,
    XorII,
    XorIII,
    XorIV,
    NegI,
    NegII,
    NegIII,
    ConstFold,
    ArithI,
    ArithII1,
    ArithII2,
    Comp,
    CondI,
    CondII,
    Extraction,
    ConcatI,
    ConcatII1,
    ConcatII2,
    AssignI,
    AssignII,
    LoadI,
    LoadII,
    LoadIII,
    StoreI,
    StoreII,
    Seq,
}

impl Rule {
    pub const ALL: [Rule; 34] = [
        Rule::LogicI,
        Rule::LogicII,
        Rule::ConjDisjI,
        Rule::ConjDisjII,
        Rule::ConstConjI,
        Rule::ConstConjII,
        Rule::ConstDisjI,
        Rule::ConstDisjII,
        Rule::XorI,
        Rule::XorII,
        Rule::XorIII,
        Rule::XorIV,
        Rule::NegI,
        Rule::NegII,
        Rule::NegIII,
        Rule::ConstFold,
        Rule::ArithI,
        Rule::ArithII1,
        Rule::ArithII2,
        Rule::Comp,
        Rule::CondI,
        Rule::CondII,
        Rule::Extraction,
        Rule::ConcatI,
        Rule::ConcatII1,
        Rule::ConcatII2,
        Rule::AssignI,
        Rule::AssignII,
        Rule::LoadI,
        Rule::LoadII,
        Rule::LoadIII,
        Rule::StoreI,
        Rule::StoreII,
        Rule::Seq,
    ];

    /// `(family, variant)`; the variant is empty for single-rule families.
    pub fn parts(self) -> (&'static str, &'static str) {
        match self {
            Rule::LogicI => ("Logic", "I"),
            Rule::LogicII => ("Logic", "II"),
            Rule::ConjDisjI => ("Conj&Disj", "I"),
            Rule::ConjDisjII => ("Conj&Disj", "II"),
            Rule::ConstConjI => ("Const-Conj", "I"),
            Rule::ConstConjII => ("Const-Conj", "II"),
            Rule::ConstDisjI => ("Const-Disj", "I"),
            Rule::ConstDisjII => ("Const-Disj", "II"),
            Rule::XorI => ("XOR", "I"),
            Rule::XorII => ("XOR", "II"),
            Rule::XorIII => ("XOR", "III"),
            Rule::XorIV => ("XOR", "IV"),
            Rule::NegI => ("Neg", "I"),
            Rule::NegII => ("Neg", "II"),
            Rule::NegIII => ("Neg", "III"),
            Rule::ConstFold => ("Const-Fold", ""),
            Rule::ArithI => ("Arith", "I"),
            Rule::ArithII1 => ("Arith", "II-1"),
            Rule::ArithII2 => ("Arith", "II-2"),
            Rule::Comp => ("Comp", ""),
            Rule::CondI => ("Cond", "I"),
            Rule::CondII => ("Cond", "II"),
            Rule::Extraction => ("Extraction", ""),
            Rule::ConcatI => ("Concat", "I"),
            Rule::ConcatII1 => ("Concat", "II-1"),
            Rule::ConcatII2 => ("Concat", "II-2"),
            Rule::AssignI => ("Assign", "I"),
            Rule::AssignII => ("Assign", "II"),
            Rule::LoadI => ("Load", "I"),
            Rule::LoadII => ("Load", "II"),
            Rule::LoadIII => ("Load", "III"),
            Rule::StoreI => ("Store", "I"),
            Rule::StoreII => ("Store", "II"),
            Rule::Seq => ("Seq", ""),
        }
    }

    pub fn name(self) -> String {
        match self.parts() {
            (fam, "") => fam.to_string(),
            (fam, var) => format!("{fam}.{var}"),
        }
    }

    /// Statement rules (Assign, Load, Store, Seq) as opposed to expression
    /// rules.
    pub fn is_statement(self) -> bool {
        self >= Rule::AssignI
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

/// A set of rules, displayed grouped by family in canonical order:
/// `Logic.I, Conj&Disj.I, Const-Conj.I&II`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct RuleSet(u64);

impl RuleSet {
    pub const EMPTY: RuleSet = RuleSet(0);

    pub fn insert(&mut self, r: Rule) {
        self.0 |= 1 << r as u8;
    }

    pub fn contains(self, r: Rule) -> bool {
        self.0 & (1 << r as u8) != 0
    }

    pub fn extend(&mut self, other: RuleSet) {
        self.0 |= other.0;
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn iter(self) -> impl Iterator<Item = Rule> {
        Rule::ALL.into_iter().filter(move |r| self.contains(*r))
    }

    pub fn expression_rules(self) -> RuleSet {
        self.iter().filter(|r| !r.is_statement()).collect()
    }

    pub fn statement_rules(self) -> RuleSet {
        self.iter().filter(|r| r.is_statement()).collect()
    }

    /// The grouped display names, one per family.
    pub fn grouped(self) -> Vec<String> {
        let mut out: Vec<(&'static str, Vec<&'static str>)> = Vec::new();
        for r in self.iter() {
            let (fam, var) = r.parts();
            match out.last_mut() {
                Some((f, vars)) if *f == fam => vars.push(var),
                _ => out.push((fam, vec![var])),
            }
        }
        out.into_iter()
            .map(|(fam, vars)| {
                if vars == [""] {
                    fam.to_string()
                } else {
                    format!("{fam}.{}", vars.join("&"))
                }
            })
            .collect()
    }
}

impl FromIterator<Rule> for RuleSet {
    fn from_iter<I: IntoIterator<Item = Rule>>(iter: I) -> Self {
        let mut s = RuleSet::EMPTY;
        for r in iter {
            s.insert(r);
        }
        s
    }
}

impl fmt::Display for RuleSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.grouped().join(", "))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InferError {
    #[error("width mismatch in {op}: {left} vs {right}")]
    WidthMismatch {
        op: &'static str,
        left: u32,
        right: u32,
    },
    #[error("division by constant zero")]
    DivideByZero,
    #[error("unsupported secret shift: amount typed {0}")]
    SecretShift(String),
    #[error(transparent)]
    Ir(#[from] IrError),
}

fn same_width(op: &'static str, a: &TypedBitvector, b: &TypedBitvector) -> Result<(), InferError> {
    if a.width() != b.width() {
        return Err(InferError::WidthMismatch {
            op,
            left: a.width(),
            right: b.width(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LogicOp {
    And,
    Or,
}

/// One-bit AND/OR.
pub fn infer_bit_logic(
    op: LogicOp,
    a: RefinedBit,
    b: RefinedBit,
    rules: &mut RuleSet,
) -> RefinedBit {
    // absorbing and identity constants for the operator
    let (absorb, ident, r_absorb, r_ident) = match op {
        LogicOp::And => (false, true, Rule::ConstConjI, Rule::ConstConjII),
        LogicOp::Or => (true, false, Rule::ConstDisjII, Rule::ConstDisjI),
    };
    let (ca, cb) = (a.const_value(), b.const_value());
    if ca == Some(absorb) || cb == Some(absorb) {
        rules.insert(r_absorb);
        return RefinedBit::constant(absorb);
    }
    if ca == Some(ident) || cb == Some(ident) {
        rules.insert(r_ident);
        let other = if ca == Some(ident) { b } else { a };
        if other.sec != Cst {
            rules.insert(Rule::ConjDisjI);
        }
        return other;
    }
    if a.sec == Ura && b.sec == Ura {
        rules.insert(Rule::ConjDisjII);
        return RefinedBit::unknown(Wra);
    }
    rules.insert(Rule::ConjDisjI);
    RefinedBit::unknown(a.sec.join(b.sec))
}

/// One-bit XOR. `same_operand` is true when both bits come from the
/// syntactically identical source expression.
pub fn infer_bit_xor(
    a: RefinedBit,
    b: RefinedBit,
    same_operand: bool,
    rules: &mut RuleSet,
) -> RefinedBit {
    if a.sec == Cst && b.sec == Cst {
        if same_operand {
            rules.insert(Rule::XorIV);
            return RefinedBit::ZERO;
        }
        if let (Some(x), Some(y)) = (a.value, b.value) {
            rules.insert(Rule::XorIII);
            return RefinedBit::constant(x ^ y);
        }
    }
    if a.sec == Ura || b.sec == Ura {
        rules.insert(Rule::XorII);
        return RefinedBit::unknown(Ura);
    }
    rules.insert(Rule::XorI);
    RefinedBit::unknown(a.sec.join(b.sec))
}

pub fn infer_neg(b: RefinedBit, rules: &mut RuleSet) -> RefinedBit {
    match b.const_value() {
        Some(false) => {
            rules.insert(Rule::NegII);
            RefinedBit::ONE
        }
        Some(true) => {
            rules.insert(Rule::NegIII);
            RefinedBit::ZERO
        }
        None => {
            rules.insert(Rule::NegI);
            RefinedBit {
                sec: b.sec,
                value: b.value.map(|v| !v),
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VecLogicOp {
    And,
    Or,
    Xor,
}

/// Bitwise AND/OR/XOR over equal-width vectors.
pub fn infer_logic_vec(
    op: VecLogicOp,
    a: &TypedBitvector,
    b: &TypedBitvector,
    same_operand: bool,
    rules: &mut RuleSet,
) -> Result<TypedBitvector, InferError> {
    same_width("logic", a, b)?;
    rules.insert(Rule::LogicI);
    let bits = a.bits().iter().zip(b.bits()).map(|(x, y)| match op {
        VecLogicOp::And => infer_bit_logic(LogicOp::And, *x, *y, rules),
        VecLogicOp::Or => infer_bit_logic(LogicOp::Or, *x, *y, rules),
        VecLogicOp::Xor => infer_bit_xor(*x, *y, same_operand, rules),
    });
    Ok(TypedBitvector::from_bits(bits.collect::<Vec<_>>()))
}

pub fn infer_not_vec(v: &TypedBitvector, rules: &mut RuleSet) -> TypedBitvector {
    rules.insert(Rule::LogicII);
    TypedBitvector::from_bits(v.bits().iter().map(|b| infer_neg(*b, rules)).collect::<Vec<_>>())
}

/// `hi # lo` with the Concat rule chosen by the operands' vector types.
pub fn infer_concat(hi: &TypedBitvector, lo: &TypedBitvector, rules: &mut RuleSet) -> TypedBitvector {
    let (th, tl) = (vector_type(hi), vector_type(lo));
    let rule = if th == Ura || tl == Ura {
        if th == Sdd || tl == Sdd {
            Rule::ConcatII2
        } else {
            Rule::ConcatII1
        }
    } else {
        Rule::ConcatI
    };
    rules.insert(rule);
    TypedBitvector::concat(hi, lo)
}

pub fn infer_extract(
    lo: u32,
    hi: u32,
    v: &TypedBitvector,
    rules: &mut RuleSet,
) -> Result<TypedBitvector, InferError> {
    let out = v.try_extract(lo, hi)?;
    rules.insert(Rule::Extraction);
    Ok(out)
}

/// Shift by a known amount, built from Extract and Concat.
pub fn infer_shift(
    v: &TypedBitvector,
    amount: u32,
    kind: ShiftKind,
    rules: &mut RuleSet,
) -> TypedBitvector {
    let w = v.width();
    if amount == 0 {
        return v.clone();
    }
    let fill = |n: u32| match kind {
        ShiftKind::RightArith => TypedBitvector::splat(v.msb(), n),
        _ => mk_constant(0, n.min(64)),
    };
    if amount >= w {
        return match kind {
            ShiftKind::RightArith => {
                rules.insert(Rule::Extraction);
                TypedBitvector::splat(v.msb(), w)
            }
            _ => TypedBitvector::splat(RefinedBit::ZERO, w),
        };
    }
    match kind {
        ShiftKind::Left => {
            let kept = v.extract(0, w - 1 - amount);
            rules.insert(Rule::Extraction);
            let zeros = TypedBitvector::splat(RefinedBit::ZERO, amount);
            infer_concat(&kept, &zeros, rules)
        }
        ShiftKind::RightLogical | ShiftKind::RightArith => {
            let kept = v.extract(amount, w - 1);
            rules.insert(Rule::Extraction);
            let top = if amount <= 64 {
                fill(amount)
            } else {
                TypedBitvector::splat(fill(1).bit(0), amount)
            };
            infer_concat(&top, &kept, rules)
        }
    }
}

fn width_mask(w: u32) -> u64 {
    if w >= 64 {
        u64::MAX
    } else {
        (1u64 << w) - 1
    }
}

fn sign_extend(v: u64, w: u32) -> i128 {
    let v = v as i128;
    if w < 128 && v >> (w - 1) & 1 == 1 {
        v - (1i128 << w)
    } else {
        v
    }
}

/// Machine arithmetic modulo 2^w.
pub fn fold_arith(op: BinOp, a: u64, b: u64, w: u32) -> Result<u64, InferError> {
    let m = width_mask(w);
    let r = match op {
        BinOp::Add => a.wrapping_add(b),
        BinOp::Sub => a.wrapping_sub(b),
        BinOp::Mul => (a as u128 * b as u128) as u64,
        BinOp::MulHiU => ((a as u128 * b as u128) >> w) as u64,
        BinOp::MulHiS => ((sign_extend(a, w) * sign_extend(b, w)) >> w) as u64,
        BinOp::DivU => {
            if b == 0 {
                return Err(InferError::DivideByZero);
            }
            a / b
        }
        BinOp::RemU => {
            if b == 0 {
                return Err(InferError::DivideByZero);
            }
            a % b
        }
        other => panic!("{other:?} is not an arithmetic operator"),
    };
    Ok(r & m)
}

/// Comparison on concrete values.
pub fn fold_comp(op: BinOp, a: u64, b: u64, w: u32) -> bool {
    let (sa, sb) = (sign_extend(a, w), sign_extend(b, w));
    match op {
        BinOp::Ult => a < b,
        BinOp::Ule => a <= b,
        BinOp::Ugt => a > b,
        BinOp::Uge => a >= b,
        BinOp::Slt => sa < sb,
        BinOp::Sle => sa <= sb,
        BinOp::Sgt => sa > sb,
        BinOp::Sge => sa >= sb,
        BinOp::Eq => a == b,
        BinOp::Ne => a != b,
        other => panic!("{other:?} is not a comparison"),
    }
}

fn xor3(a: Option<bool>, b: Option<bool>, c: Option<bool>) -> Option<bool> {
    Some(a? ^ b? ^ c?)
}

fn majority(a: Option<bool>, b: Option<bool>, c: Option<bool>) -> Option<bool> {
    let ones = [a, b, c].iter().filter(|x| **x == Some(true)).count();
    let zeros = [a, b, c].iter().filter(|x| **x == Some(false)).count();
    if ones >= 2 {
        Some(true)
    } else if zeros >= 2 {
        Some(false)
    } else {
        None
    }
}

/// Three-valued ripple-carry sum.
fn ripple(a: &[Option<bool>], b: &[Option<bool>], carry_in: bool) -> Vec<Option<bool>> {
    let mut c = Some(carry_in);
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let s = xor3(*x, *y, c);
            c = majority(*x, *y, c);
            s
        })
        .collect()
}

/// Arithmetic over equal-width vectors.
pub fn infer_arith(
    op: BinOp,
    a: &TypedBitvector,
    b: &TypedBitvector,
    rules: &mut RuleSet,
) -> Result<TypedBitvector, InferError> {
    assert!(op.is_arith(), "{op:?} is not an arithmetic operator");
    same_width("arith", a, b)?;
    let w = a.width();
    if matches!(op, BinOp::DivU | BinOp::RemU) && b.const_value() == Some(0) {
        return Err(InferError::DivideByZero);
    }
    if let (Some(x), Some(y)) = (a.const_value(), b.const_value()) {
        rules.insert(Rule::ConstFold);
        return Ok(mk_constant(fold_arith(op, x, y, w)?, w));
    }
    let (ta, tb) = (vector_type(a), vector_type(b));
    if ta == Ura || tb == Ura {
        return Ok(if ta == Sdd || tb == Sdd {
            rules.insert(Rule::ArithII2);
            TypedBitvector::unknown(Sdd, w)
        } else {
            rules.insert(Rule::ArithII1);
            TypedBitvector::unknown(Ura, w)
        });
    }
    rules.insert(Rule::ArithI);
    let level = ta.join(tb);
    let windowed = matches!(op, BinOp::Add | BinOp::Sub)
        && (a.const_value().is_some() || b.const_value().is_some());
    if !windowed {
        return Ok(TypedBitvector::unknown(level, w));
    }
    let av: Vec<Option<bool>> = a.bits().iter().map(|x| x.value).collect();
    let mut bv: Vec<Option<bool>> = b.bits().iter().map(|x| x.value).collect();
    let sum = if op == BinOp::Sub {
        bv.iter_mut().for_each(|x| *x = x.map(|v| !v));
        ripple(&av, &bv, true)
    } else {
        ripple(&av, &bv, false)
    };
    let highest_unknown = sum.iter().rposition(|x| x.is_none());
    let bits = sum.iter().enumerate().map(|(i, s)| match highest_unknown {
        Some(h) if i <= h => RefinedBit::unknown(level),
        _ => RefinedBit::constant(s.expect("bits above the window are known")),
    });
    let out = TypedBitvector::from_bits(bits.collect::<Vec<_>>());
    if matches!(highest_unknown, Some(h) if h + 1 < w as usize) {
        rules.insert(Rule::ConcatI);
    }
    Ok(out)
}

fn unsigned_range(v: &TypedBitvector) -> (i128, i128) {
    let mut lo = 0i128;
    let mut hi = 0i128;
    for (i, b) in v.bits().iter().enumerate() {
        match b.value {
            Some(true) => {
                lo += 1 << i;
                hi += 1 << i;
            }
            Some(false) => {}
            None => hi += 1 << i,
        }
    }
    (lo, hi)
}

fn signed_range(v: &TypedBitvector) -> (i128, i128) {
    let w = v.width();
    if w == 1 {
        return match v.bit(0).value {
            Some(true) => (-1, -1),
            Some(false) => (0, 0),
            None => (-1, 0),
        };
    }
    let (lo, hi) = unsigned_range(&v.extract(0, w - 2));
    let sign = 1i128 << (w - 1);
    match v.msb().value {
        Some(false) => (lo, hi),
        Some(true) => (lo - sign, hi - sign),
        None => (lo - sign, hi),
    }
}

/// Outcome of `op` if the operands' known bits force it.
fn forced_outcome(op: BinOp, a: &TypedBitvector, b: &TypedBitvector) -> Option<bool> {
    let signed = matches!(op, BinOp::Slt | BinOp::Sle | BinOp::Sgt | BinOp::Sge);
    let ((alo, ahi), (blo, bhi)) = if signed {
        (signed_range(a), signed_range(b))
    } else {
        (unsigned_range(a), unsigned_range(b))
    };
    let lt = |alo: i128, ahi: i128, blo: i128, bhi: i128| {
        if ahi < blo {
            Some(true)
        } else if alo >= bhi {
            Some(false)
        } else {
            None
        }
    };
    let le = |alo: i128, ahi: i128, blo: i128, bhi: i128| {
        if ahi <= blo {
            Some(true)
        } else if alo > bhi {
            Some(false)
        } else {
            None
        }
    };
    let eq = || {
        let conflict = a
            .bits()
            .iter()
            .zip(b.bits())
            .any(|(x, y)| matches!((x.value, y.value), (Some(p), Some(q)) if p != q));
        if conflict || ahi < blo || bhi < alo {
            Some(false)
        } else if alo == ahi && blo == bhi && alo == blo {
            Some(true)
        } else {
            None
        }
    };
    match op {
        BinOp::Ult | BinOp::Slt => lt(alo, ahi, blo, bhi),
        BinOp::Ule | BinOp::Sle => le(alo, ahi, blo, bhi),
        BinOp::Ugt | BinOp::Sgt => lt(blo, bhi, alo, ahi),
        BinOp::Uge | BinOp::Sge => le(blo, bhi, alo, ahi),
        BinOp::Eq => eq(),
        BinOp::Ne => eq().map(|x| !x),
        _ => None,
    }
}

/// Comparison producing a one-bit vector.
pub fn infer_comp(
    op: BinOp,
    a: &TypedBitvector,
    b: &TypedBitvector,
    rules: &mut RuleSet,
) -> Result<TypedBitvector, InferError> {
    assert!(op.is_comparison(), "{op:?} is not a comparison");
    same_width("comparison", a, b)?;
    rules.insert(Rule::Comp);
    let bit = match forced_outcome(op, a, b) {
        Some(v) => RefinedBit::constant(v),
        None => RefinedBit::unknown(vector_type(a).join(vector_type(b))),
    };
    Ok(TypedBitvector::splat(bit, 1))
}

/// `c ? t : e`.
///
/// Without a decided condition the result is `vt(t) ⊔ vt(e) ⊔ level(c)`,
/// and URA is lowered to WRA: selecting between two values does not keep a
/// uniform distribution.
pub fn infer_cond(
    c: &TypedBitvector,
    t: &TypedBitvector,
    e: &TypedBitvector,
    rules: &mut RuleSet,
) -> Result<TypedBitvector, InferError> {
    if c.width() != 1 {
        return Err(InferError::WidthMismatch {
            op: "condition",
            left: c.width(),
            right: 1,
        });
    }
    same_width("cond", t, e)?;
    let flag = c.bit(0);
    if flag.sec == Sdd {
        rules.insert(Rule::CondI);
        return Ok(TypedBitvector::unknown(Sdd, t.width()));
    }
    rules.insert(Rule::CondII);
    if let Some(v) = flag.const_value() {
        return Ok(if v { t.clone() } else { e.clone() });
    }
    let mut level = vector_type(t).join(vector_type(e)).join(flag.sec);
    if level == Ura {
        level = Wra;
    }
    Ok(TypedBitvector::unknown(level, t.width()))
}

/// Typed value of `e` in `env`.
pub fn eval_expr(env: &TypeEnv, e: &Expr, rules: &mut RuleSet) -> Result<TypedBitvector, InferError> {
    match e {
        Expr::Bit(b) => Ok(TypedBitvector::splat(RefinedBit::constant(*b), 1)),
        Expr::Var(v) => Ok(env.read(*v)),
        Expr::Const { value, width } => Ok(mk_constant(*value, *width)),
        Expr::Not(x) => {
            let v = eval_expr(env, x, rules)?;
            Ok(infer_not_vec(&v, rules))
        }
        Expr::Bin(op, x, y) => {
            let a = eval_expr(env, x, rules)?;
            let b = eval_expr(env, y, rules)?;
            match op {
                BinOp::And => infer_logic_vec(VecLogicOp::And, &a, &b, x == y, rules),
                BinOp::Or => infer_logic_vec(VecLogicOp::Or, &a, &b, x == y, rules),
                BinOp::Xor => infer_logic_vec(VecLogicOp::Xor, &a, &b, x == y, rules),
                op if op.is_arith() => infer_arith(*op, &a, &b, rules),
                op => infer_comp(*op, &a, &b, rules),
            }
        }
        Expr::Cond(c, t, f) => {
            let c = eval_expr(env, c, rules)?;
            let t = eval_expr(env, t, rules)?;
            let f = eval_expr(env, f, rules)?;
            infer_cond(&c, &t, &f, rules)
        }
        Expr::Concat(h, l) => {
            let h = eval_expr(env, h, rules)?;
            let l = eval_expr(env, l, rules)?;
            Ok(infer_concat(&h, &l, rules))
        }
        Expr::Extract { lo, hi, e } => {
            let v = eval_expr(env, e, rules)?;
            infer_extract(*lo, *hi, &v, rules)
        }
        Expr::Shift {
            kind,
            value,
            amount,
            concrete,
        } => {
            let v = eval_expr(env, value, rules)?;
            let amt = eval_expr(env, amount, rules)?;
            let n = match amt.const_value() {
                Some(n) => (n & 0x1f) as u32,
                None if amt.bits().iter().all(|b| matches!(b.sec, Cst | Sid)) => *concrete,
                None => return Err(InferError::SecretShift(amt.evidence())),
            };
            Ok(infer_shift(&v, n, *kind, rules))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccessKind {
    Load,
    Store,
}

/// A memory access performed by a statement, with its typed address.
#[derive(Debug, Clone, PartialEq)]
pub struct MemAccess {
    pub kind: AccessKind,
    pub addr: u32,
    pub bytes: u8,
    pub addr_type: TypedBitvector,
}

/// One executed statement, for the inference log.
#[derive(Debug, Clone, PartialEq)]
pub struct RuleStep {
    /// Destination, e.g. `eax`, `zf`, `r0` or `mem[0xbf000018]`.
    pub target: String,
    pub is_flag: bool,
    pub is_temp: bool,
    /// Typed operands of the top-level expression.
    pub inputs: Vec<TypedBitvector>,
    pub output: TypedBitvector,
    /// Expression rules plus the statement rule.
    pub rules: RuleSet,
}

/// Per-record side output of statement execution.
#[derive(Debug, Clone, Default)]
pub struct StepLog {
    pub record_steps: bool,
    pub accesses: Vec<MemAccess>,
    pub steps: Vec<RuleStep>,
}

impl StepLog {
    pub fn recording() -> StepLog {
        StepLog {
            record_steps: true,
            ..StepLog::default()
        }
    }

    pub fn clear(&mut self) {
        self.accesses.clear();
        self.steps.clear();
    }
}

/// Executes `s`, returning the updated environment.
pub fn exec_stmt(s: &Stmt, mut env: TypeEnv) -> Result<TypeEnv, InferError> {
    exec_stmt_in(s, &mut env, &mut StepLog::default())?;
    Ok(env)
}

fn has_predicate(v: &TypedBitvector) -> bool {
    v.bits().iter().any(|b| b.value.is_some())
}

fn operands(env: &TypeEnv, e: &Expr, log: &StepLog) -> Vec<TypedBitvector> {
    if !log.record_steps {
        return Vec::new();
    }
    let mut scratch = RuleSet::EMPTY;
    let subs: Vec<&Expr> = match e {
        Expr::Not(x) | Expr::Extract { e: x, .. } => vec![x],
        Expr::Bin(_, x, y) | Expr::Concat(x, y) => vec![x, y],
        Expr::Cond(c, t, f) => vec![c, t, f],
        Expr::Shift { value, amount, .. } => vec![value, amount],
        _ => vec![],
    };
    subs.into_iter()
        .filter_map(|x| eval_expr(env, x, &mut scratch).ok())
        .collect()
}

/// Typed address of `m`, the join of the operand vector types, and the rules
/// used to compute it.
fn eval_address(
    env: &TypeEnv,
    m: &MemRef,
) -> Result<(TypedBitvector, SecurityType, RuleSet), InferError> {
    let mut rules = RuleSet::EMPTY;
    let base = eval_expr(env, &m.base, &mut rules)?;
    match &m.offset {
        None => {
            let t = vector_type(&base);
            Ok((base, t, rules))
        }
        Some(off) => {
            let o = eval_expr(env, off, &mut rules)?;
            let t = vector_type(&base).join(vector_type(&o));
            let a = infer_arith(BinOp::Add, &base, &o, &mut rules)?;
            Ok((a, t, rules))
        }
    }
}

/// Executes `s` in place, appending accesses (and steps when recording) to
/// `log`.
pub fn exec_stmt_in(s: &Stmt, env: &mut TypeEnv, log: &mut StepLog) -> Result<(), InferError> {
    match s {
        Stmt::Seq(a, b) => {
            exec_stmt_in(a, env, log)?;
            exec_stmt_in(b, env, log)
        }
        Stmt::Assign(var, e) => {
            let mut rules = RuleSet::EMPTY;
            let v = eval_expr(env, e, &mut rules)?;
            rules.insert(if has_predicate(&v) {
                Rule::AssignI
            } else {
                Rule::AssignII
            });
            if log.record_steps {
                let inputs = operands(env, e, log);
                log.steps.push(step(*var, inputs, v.clone(), rules));
            }
            env.write(*var, v);
            Ok(())
        }
        Stmt::Load(var, m) => {
            let (addr_type, level, addr_rules) = eval_address(env, m)?;
            let mut rules = RuleSet::EMPTY;
            let secret_addr = level == Sdd;
            if secret_addr {
                rules.extend(addr_rules);
            }
            let mut bits = Vec::with_capacity(m.bytes as usize * 8);
            let mut stmt_rule = Rule::LoadII;
            for i in 0..m.bytes as u32 {
                let a = m.addr.wrapping_add(i);
                match env.mem_byte(a) {
                    Some(_) if secret_addr => {
                        stmt_rule = Rule::LoadIII;
                        bits.extend([RefinedBit::unknown(Sdd); 8]);
                    }
                    Some(byte) => {
                        if byte.iter().any(|b| b.value.is_some()) && stmt_rule == Rule::LoadII {
                            stmt_rule = Rule::LoadI;
                        }
                        bits.extend_from_slice(byte);
                    }
                    None => {
                        stmt_rule = Rule::LoadIII;
                        bits.extend([RefinedBit::unknown(Sid.join(level)); 8]);
                    }
                }
            }
            rules.insert(stmt_rule);
            let v = TypedBitvector::from_bits(bits);
            if log.record_steps {
                log.steps.push(step(*var, vec![addr_type.clone()], v.clone(), rules));
            }
            log.accesses.push(MemAccess {
                kind: AccessKind::Load,
                addr: m.addr,
                bytes: m.bytes,
                addr_type,
            });
            env.write(*var, v);
            Ok(())
        }
        Stmt::Store(m, e) => {
            let (addr_type, level, addr_rules) = eval_address(env, m)?;
            let mut rules = RuleSet::EMPTY;
            if level == Sdd {
                rules.extend(addr_rules);
            }
            let mut v = eval_expr(env, e, &mut rules)?;
            if v.width() != m.bytes as u32 * 8 {
                return Err(InferError::WidthMismatch {
                    op: "store",
                    left: v.width(),
                    right: m.bytes as u32 * 8,
                });
            }
            if level == Sdd {
                v = TypedBitvector::unknown(Sdd, v.width());
            }
            rules.insert(if has_predicate(&v) {
                Rule::StoreI
            } else {
                Rule::StoreII
            });
            for i in 0..m.bytes as u32 {
                let lo = (i * 8) as usize;
                let byte: [RefinedBit; 8] = v.bits()[lo..lo + 8].try_into().expect("8 bits");
                env.write_mem_byte(m.addr.wrapping_add(i), byte);
            }
            if log.record_steps {
                let inputs = vec![addr_type.clone()];
                log.steps.push(RuleStep {
                    target: format!("mem[{:#x}]", m.addr),
                    is_flag: false,
                    is_temp: false,
                    inputs,
                    output: v,
                    rules,
                });
            }
            log.accesses.push(MemAccess {
                kind: AccessKind::Store,
                addr: m.addr,
                bytes: m.bytes,
                addr_type,
            });
            Ok(())
        }
    }
}

fn step(var: Var, inputs: Vec<TypedBitvector>, output: TypedBitvector, rules: RuleSet) -> RuleStep {
    RuleStep {
        target: var.to_string(),
        is_flag: matches!(var, Var::Flag(_)),
        is_temp: matches!(var, Var::Temp(_)),
        inputs,
        output,
        rules,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{annotate, AnnotTarget, Reg, RegRef};
    use proptest::prelude::*;

    fn unk(sec: SecurityType, w: u32) -> TypedBitvector {
        TypedBitvector::unknown(sec, w)
    }

    fn rs() -> RuleSet {
        RuleSet::EMPTY
    }

    fn bit(sec: SecurityType) -> RefinedBit {
        RefinedBit::unknown(sec)
    }

    #[test]
    fn bit_logic_examples() {
        let mut r = rs();
        assert_eq!(
            infer_bit_logic(LogicOp::And, bit(Sdd), RefinedBit::ZERO, &mut r),
            RefinedBit::ZERO
        );
        assert!(r.contains(Rule::ConstConjI));
        assert_eq!(infer_bit_logic(LogicOp::And, bit(Ura), bit(Ura), &mut r), bit(Wra));
        assert!(r.contains(Rule::ConjDisjII));
        assert_eq!(infer_bit_logic(LogicOp::Or, bit(Sid), bit(Sdd), &mut r), bit(Sdd));
        assert_eq!(
            infer_bit_logic(LogicOp::Or, bit(Sdd), RefinedBit::ONE, &mut r),
            RefinedBit::ONE
        );
        assert_eq!(
            infer_bit_logic(LogicOp::Or, RefinedBit::ZERO, bit(Ura), &mut r),
            bit(Ura)
        );
        assert_eq!(
            infer_bit_logic(LogicOp::And, RefinedBit::ONE, RefinedBit::ONE, &mut r),
            RefinedBit::ONE
        );
    }

    #[test]
    fn bit_xor_examples() {
        let mut r = rs();
        assert_eq!(infer_bit_xor(bit(Sdd), bit(Ura), false, &mut r), bit(Ura));
        assert_eq!(
            infer_bit_xor(RefinedBit::ONE, RefinedBit::ONE, false, &mut r),
            RefinedBit::ZERO
        );
        assert_eq!(infer_bit_xor(bit(Sid), bit(Sdd), false, &mut r), bit(Sdd));
        assert_eq!(infer_bit_xor(bit(Cst), bit(Cst), true, &mut r), RefinedBit::ZERO);
        assert!(r.contains(Rule::XorIV));
    }

    #[test]
    fn neg_examples() {
        let mut r = rs();
        assert_eq!(infer_neg(bit(Sdd), &mut r), bit(Sdd));
        assert_eq!(infer_neg(RefinedBit::ZERO, &mut r), RefinedBit::ONE);
        assert_eq!(infer_neg(RefinedBit::ONE, &mut r), RefinedBit::ZERO);
        assert_eq!(r.to_string(), "Neg.I&II&III");
    }

    #[test]
    fn concat_examples() {
        let mut r = rs();
        let v = infer_concat(&unk(Ura, 16), &unk(Sid, 16), &mut r);
        assert_eq!(vector_type(&v), Ura);
        assert!(r.contains(Rule::ConcatII1));
        let v = infer_concat(&unk(Ura, 16), &unk(Sdd, 16), &mut r);
        assert_eq!(vector_type(&v), Sdd);
        assert!(r.contains(Rule::ConcatII2));
        let v = infer_concat(&mk_constant(0xab, 8), &mk_constant(0xcd, 8), &mut r);
        assert_eq!(v.const_value(), Some(0xabcd));
    }

    #[test]
    fn extract_examples() {
        let mut r = rs();
        assert_eq!(infer_extract(24, 31, &unk(Sdd, 32), &mut r).unwrap(), unk(Sdd, 8));
        let v = TypedBitvector::concat(&unk(Ura, 16), &unk(Sid, 16));
        assert_eq!(infer_extract(16, 31, &v, &mut r).unwrap(), unk(Ura, 16));
        assert_eq!(infer_extract(0, 0, &v, &mut r).unwrap(), unk(Sid, 1));
        assert!(infer_extract(4, 32, &v, &mut r).is_err());
    }

    #[test]
    fn shift_examples() {
        let mut r = rs();
        let v = infer_shift(&unk(Sdd, 32), 24, ShiftKind::RightLogical, &mut r);
        assert_eq!(v.evidence(), "{0}²⁴{K}⁸:SDD");
        assert_eq!(r.to_string(), "Extraction, Concat.I");
        let v = infer_shift(&mk_constant(1, 32), 6, ShiftKind::Left, &mut r);
        assert_eq!(v.const_value(), Some(0x40));
        let v = infer_shift(&unk(Sdd, 8), 1, ShiftKind::RightArith, &mut r);
        assert_eq!(v, unk(Sdd, 8));
        let signed = TypedBitvector::concat(&mk_constant(1, 1), &unk(Sid, 7));
        let v = infer_shift(&signed, 3, ShiftKind::RightArith, &mut r);
        assert_eq!(v.pattern(), "{1}⁴{I}⁴");
        assert_eq!(
            infer_shift(&signed, 40, ShiftKind::RightArith, &mut r).const_value(),
            Some(0xff)
        );
        assert_eq!(
            infer_shift(&signed, 8, ShiftKind::Left, &mut r).const_value(),
            Some(0)
        );
    }

    #[test]
    fn logic_vec_examples() {
        let mut r = rs();
        let v = infer_logic_vec(
            VecLogicOp::And,
            &unk(Sdd, 32),
            &mk_constant(0xffff_0000, 32),
            false,
            &mut r,
        )
        .unwrap();
        assert_eq!(v.evidence(), "{K}¹⁶{0}¹⁶:SDD");
        assert_eq!(r.to_string(), "Logic.I, Conj&Disj.I, Const-Conj.I&II");
        let v = infer_logic_vec(VecLogicOp::Xor, &unk(Sdd, 32), &unk(Ura, 32), false, &mut rs())
            .unwrap();
        assert_eq!(v.evidence(), "{U}³²:URA");
        assert!(infer_logic_vec(VecLogicOp::Or, &unk(Sdd, 8), &unk(Sdd, 16), false, &mut r)
            .is_err());
        let c = mk_constant(0x5a, 8);
        assert_eq!(infer_logic_vec(VecLogicOp::And, &c, &c, true, &mut r).unwrap(), c);
    }

    #[test]
    fn arith_examples() {
        let mut r = rs();
        let secret_byte = TypedBitvector::concat(&mk_constant(0, 24), &unk(Sdd, 8));
        let v = infer_arith(BinOp::Add, &secret_byte, &mk_constant(0x811_0460, 32), &mut r).unwrap();
        // The sum stays below 0x8110460 + 0x100, so bits 9 and up keep the
        // constant's digits while bits 0..=8 absorb a possible carry.
        assert_eq!(v.extract(9, 31).const_value(), Some(0x811_0460 >> 9));
        assert_eq!(v.extract(0, 8), unk(Sdd, 9));
        assert_eq!(r.to_string(), "Arith.I, Concat.I");

        let mut r = rs();
        assert_eq!(infer_arith(BinOp::Add, &unk(Ura, 32), &unk(Sdd, 32), &mut r).unwrap(), unk(Sdd, 32));
        assert_eq!(r.to_string(), "Arith.II-2");
        assert_eq!(
            infer_arith(BinOp::Add, &unk(Ura, 32), &unk(Sid, 32), &mut rs()).unwrap(),
            unk(Ura, 32)
        );
        assert_eq!(
            infer_arith(BinOp::Mul, &mk_constant(3, 32), &mk_constant(5, 32), &mut rs())
                .unwrap()
                .const_value(),
            Some(15)
        );
        assert_eq!(
            infer_arith(BinOp::DivU, &unk(Sid, 32), &mk_constant(0, 32), &mut rs()),
            Err(InferError::DivideByZero)
        );
    }

    #[test]
    fn subtraction_window_tracks_borrow() {
        // x in [0, 7] minus 0x29 always borrows out of the top.
        let x = TypedBitvector::concat(&mk_constant(0, 29), &unk(Sdd, 3));
        let v = infer_arith(BinOp::Sub, &x, &mk_constant(0x29, 32), &mut rs()).unwrap();
        assert_eq!(v.bit(31), RefinedBit::ONE);
        assert_eq!(v.bit(0).sec, Sdd);
        for x in 0..8u32 {
            let r = x.wrapping_sub(0x29);
            for i in 0..32 {
                if let Some(b) = v.bit(i).value {
                    assert_eq!(b, r >> i & 1 == 1);
                }
            }
        }
        // x in [0, 7] plus 8 never carries into bit 3
        let v = infer_arith(BinOp::Add, &x, &mk_constant(8, 32), &mut rs()).unwrap();
        assert_eq!(v.extract(3, 31).const_value(), Some(1));
        assert_eq!(v.extract(0, 2), unk(Sdd, 3));
        // plus 1 may carry all the way to bit 3
        let v = infer_arith(BinOp::Add, &x, &mk_constant(1, 32), &mut rs()).unwrap();
        assert_eq!(v.extract(4, 31).const_value(), Some(0));
        assert_eq!(v.extract(0, 3), unk(Sdd, 4));
    }

    #[test]
    fn comp_examples() {
        let masked = TypedBitvector::concat(&mk_constant(0, 29), &unk(Sdd, 3));
        let mut r = rs();
        let v = infer_comp(BinOp::Ugt, &masked, &mk_constant(40, 32), &mut r).unwrap();
        assert_eq!(v.bit(0), RefinedBit::ZERO);
        assert_eq!(r.to_string(), "Comp");
        let half = TypedBitvector::concat(&unk(Sdd, 16), &mk_constant(0, 16));
        let v = infer_comp(BinOp::Eq, &half, &mk_constant(0, 32), &mut rs()).unwrap();
        assert_eq!(v.evidence(), "{K}:SDD");
        let v = infer_comp(BinOp::Eq, &mk_constant(5, 32), &mk_constant(5, 32), &mut rs()).unwrap();
        assert_eq!(v.bit(0), RefinedBit::ONE);
        // a known bit conflict decides equality
        let v = infer_comp(BinOp::Ne, &half, &mk_constant(1, 32), &mut rs()).unwrap();
        assert_eq!(v.bit(0), RefinedBit::ONE);
    }

    #[test]
    fn cond_examples() {
        let c = unk(Sdd, 1);
        let v = infer_cond(&c, &mk_constant(1, 32), &mk_constant(2, 32), &mut rs()).unwrap();
        assert_eq!(v, unk(Sdd, 32));
        let a = unk(Sid, 32);
        let b = mk_constant(9, 32);
        assert_eq!(infer_cond(&mk_constant(1, 1), &a, &b, &mut rs()).unwrap(), a);
        assert_eq!(infer_cond(&mk_constant(0, 1), &a, &b, &mut rs()).unwrap(), b);
        let v = infer_cond(&unk(Sid, 1), &unk(Ura, 32), &unk(Sid, 32), &mut rs()).unwrap();
        assert_eq!(v, unk(Sid, 32));
        // a choice between random values is no longer uniform
        let v = infer_cond(&unk(Cst, 1), &unk(Ura, 8), &unk(Ura, 8), &mut rs()).unwrap();
        assert_eq!(v, unk(Wra, 8));
    }

    #[test]
    fn secret_shift_is_rejected() {
        let env = annotate(TypeEnv::new(), AnnotTarget::Reg(RegRef::full(Reg::Ecx)), Sdd).unwrap();
        let e = Expr::Shift {
            kind: ShiftKind::Left,
            value: Box::new(Expr::reg(Reg::Eax)),
            amount: Box::new(Expr::Var(Var::Reg(RegRef::parse("cl").unwrap()))),
            concrete: 3,
        };
        assert!(matches!(eval_expr(&env, &e, &mut rs()), Err(InferError::SecretShift(_))));
        let v = eval_expr(&TypeEnv::new(), &e, &mut rs()).unwrap();
        assert_eq!(v.extract(0, 2).const_value(), Some(0));
    }

    #[test]
    fn statements_follow_load_and_store_rules() {
        let env = annotate(
            TypeEnv::new(),
            AnnotTarget::Mem {
                addr: 0xbf00_0018,
                len: 4,
            },
            Sdd,
        )
        .unwrap();
        let mref = MemRef {
            base: Expr::reg(Reg::Ebp),
            offset: Some(Expr::konst(8, 32)),
            addr: 0xbf00_0018,
            bytes: 4,
        };
        let mut log = StepLog::recording();
        let mut env2 = env.clone();
        exec_stmt_in(&Stmt::Load(Var::reg(Reg::Eax), mref.clone()), &mut env2, &mut log).unwrap();
        assert_eq!(env2.read(Var::reg(Reg::Eax)), unk(Sdd, 32));
        // SID base: the address computation is not part of the record's rules.
        assert_eq!(log.steps[0].rules.to_string(), "Load.II");

        // untracked bytes default to SID
        let other = MemRef {
            addr: 0x5000,
            ..mref.clone()
        };
        let env3 = exec_stmt(&Stmt::Load(Var::reg(Reg::Ebx), other), env2.clone()).unwrap();
        assert_eq!(env3.read(Var::reg(Reg::Ebx)), unk(Sid, 32));

        // secret address: the loaded value is secret
        let secret_addr = MemRef {
            base: Expr::reg(Reg::Eax),
            offset: None,
            addr: 0x100,
            bytes: 1,
        };
        let env4 = exec_stmt(
            &Stmt::Load(Var::Reg(RegRef::parse("bl").unwrap()), secret_addr.clone()),
            env3.clone(),
        )
        .unwrap();
        assert_eq!(env4.read(Var::Reg(RegRef::parse("bl").unwrap())), unk(Sdd, 8));

        let env5 = exec_stmt(
            &Stmt::Store(secret_addr, Expr::konst(7, 8)),
            env4,
        )
        .unwrap();
        assert_eq!(env5.mem_byte(0x100), Some(&[RefinedBit::unknown(Sdd); 8]));

        let seq = Stmt::seq(
            Stmt::Assign(Var::reg(Reg::Ecx), Expr::konst(3, 32)),
            Stmt::Assign(Var::reg(Reg::Edx), Expr::reg(Reg::Ecx)),
        );
        let env6 = exec_stmt(&seq, TypeEnv::new()).unwrap();
        assert_eq!(env6.read(Var::reg(Reg::Edx)).const_value(), Some(3));
    }

    #[test]
    fn rule_set_display_groups_families() {
        let s: RuleSet = [Rule::ConstConjII, Rule::LogicI, Rule::ConstConjI, Rule::ConjDisjI]
            .into_iter()
            .collect();
        assert_eq!(s.to_string(), "Logic.I, Conj&Disj.I, Const-Conj.I&II");
        let s: RuleSet = [Rule::ConcatI, Rule::ArithI].into_iter().collect();
        assert_eq!(s.to_string(), "Arith.I, Concat.I");
        let s: RuleSet = [Rule::ArithII1, Rule::LoadIII].into_iter().collect();
        assert_eq!(s.expression_rules().to_string(), "Arith.II-1");
        assert_eq!(s.statement_rules().to_string(), "Load.III");
    }

    fn any_level() -> impl Strategy<Value = SecurityType> {
        prop::sample::select(SecurityType::ALL.to_vec())
    }

    fn any_bit() -> impl Strategy<Value = RefinedBit> {
        (any_level(), any::<Option<bool>>()).prop_map(|(sec, value)| {
            // only CST bits carry predicates in practice
            RefinedBit {
                sec,
                value: if sec == Cst { value } else { None },
            }
        })
    }

    fn any_vec(w: u32) -> impl Strategy<Value = TypedBitvector> {
        prop::collection::vec(any_bit(), w as usize).prop_map(TypedBitvector::from_bits)
    }

    /// Every concrete value consistent with the predicates of `v`.
    fn concretizations(v: &TypedBitvector) -> Vec<u64> {
        let mut out = vec![0u64];
        for (i, b) in v.bits().iter().enumerate() {
            out = out
                .into_iter()
                .flat_map(|x| match b.value {
                    Some(true) => vec![x | 1 << i],
                    Some(false) => vec![x],
                    None => vec![x, x | 1 << i],
                })
                .collect();
        }
        out
    }

    fn reference_arith(op: BinOp, a: u64, b: u64, w: u32) -> Option<u64> {
        // independent two's-complement reference on i64
        let m = (1i64 << w) - 1;
        let sx = |v: u64| {
            let v = v as i64;
            if v >> (w - 1) & 1 == 1 {
                v - (1 << w)
            } else {
                v
            }
        };
        let (a, b) = (a as i64, b as i64);
        Some(match op {
            BinOp::Add => (a + b) & m,
            BinOp::Sub => (a - b) & m,
            BinOp::Mul => (a * b) & m,
            BinOp::MulHiU => ((a * b) >> w) & m,
            BinOp::MulHiS => ((sx(a as u64) * sx(b as u64)) >> w) & m,
            BinOp::DivU => {
                if b == 0 {
                    return None;
                }
                a / b
            }
            BinOp::RemU => {
                if b == 0 {
                    return None;
                }
                a % b
            }
            _ => unreachable!(),
        } as u64)
    }

    const ARITH: [BinOp; 7] = [
        BinOp::Add,
        BinOp::Sub,
        BinOp::Mul,
        BinOp::MulHiU,
        BinOp::MulHiS,
        BinOp::DivU,
        BinOp::RemU,
    ];

    const COMPS: [BinOp; 10] = [
        BinOp::Ult,
        BinOp::Ule,
        BinOp::Ugt,
        BinOp::Uge,
        BinOp::Slt,
        BinOp::Sle,
        BinOp::Sgt,
        BinOp::Sge,
        BinOp::Eq,
        BinOp::Ne,
    ];

    #[test]
    fn constant_folding_matches_reference_exhaustively() {
        for w in 1..=6u32 {
            for a in 0..1u64 << w {
                for b in 0..1u64 << w {
                    for op in ARITH {
                        let got = infer_arith(op, &mk_constant(a, w), &mk_constant(b, w), &mut rs());
                        match reference_arith(op, a, b, w) {
                            Some(x) => assert_eq!(got.unwrap().const_value(), Some(x), "{op:?} {a} {b} w{w}"),
                            None => assert_eq!(got, Err(InferError::DivideByZero)),
                        }
                    }
                }
            }
        }
        // spot-check width 8 on a coarser grid
        for a in (0..256u64).step_by(7) {
            for b in (1..256u64).step_by(5) {
                for op in ARITH {
                    let got = infer_arith(op, &mk_constant(a, 8), &mk_constant(b, 8), &mut rs())
                        .unwrap()
                        .const_value();
                    assert_eq!(got, reference_arith(op, a, b, 8));
                }
            }
        }
    }

    proptest! {
        #[test]
        fn xor_with_fresh_random_is_uniform(v in any_vec(16)) {
            prop_assume!(vector_type(&v) != Ura);
            let r = unk(Ura, 16);
            let out = infer_logic_vec(VecLogicOp::Xor, &v, &r, false, &mut rs()).unwrap();
            prop_assert_eq!(vector_type(&out), Ura);
        }

        #[test]
        fn window_sums_are_consistent(a in any_vec(6), k in 0u64..64, sub in any::<bool>()) {
            let op = if sub { BinOp::Sub } else { BinOp::Add };
            let out = infer_arith(op, &a, &mk_constant(k, 6), &mut rs()).unwrap();
            for x in concretizations(&a) {
                let y = reference_arith(op, x, k, 6).unwrap();
                for (i, b) in out.bits().iter().enumerate() {
                    if let Some(v) = b.value {
                        prop_assert_eq!(v, y >> i & 1 == 1, "bit {} of {:?}({}, {})", i, op, x, k);
                    }
                }
            }
        }

        #[test]
        fn forced_comparisons_hold_for_all_concretizations(
            a in any_vec(10), b in any_vec(10), op in prop::sample::select(COMPS.to_vec()),
        ) {
            let out = infer_comp(op, &a, &b, &mut rs()).unwrap();
            if let Some(v) = out.bit(0).const_value() {
                for x in concretizations(&a) {
                    for y in concretizations(&b) {
                        prop_assert_eq!(fold_comp(op, x, y, 10), v);
                    }
                }
            }
        }

        #[test]
        fn raising_an_input_level_never_lowers_outputs(
            a in any_vec(8), b in any_vec(8),
            idx in 0usize..8, raised in any_level(),
            which in 0usize..6,
        ) {
            let mut a2 = a.clone();
            prop_assume!(raised >= a.bit(idx as u32).sec);
            a2.bits_mut()[idx].sec = raised;
            if raised != Cst {
                a2.bits_mut()[idx].value = None;
            }
            let run = |x: &TypedBitvector| -> TypedBitvector {
                let mut r = rs();
                match which {
                    0 => infer_logic_vec(VecLogicOp::And, x, &b, false, &mut r).unwrap(),
                    1 => infer_logic_vec(VecLogicOp::Or, x, &b, false, &mut r).unwrap(),
                    2 => infer_not_vec(x, &mut r),
                    3 => infer_concat(x, &b, &mut r),
                    4 => infer_shift(x, 3, ShiftKind::RightArith, &mut r),
                    _ => infer_extract(2, 5, x, &mut r).unwrap(),
                }
            };
            let (lo, hi) = (run(&a), run(&a2));
            for (x, y) in lo.bits().iter().zip(hi.bits()) {
                prop_assert!(y.sec >= x.sec, "{:?} -> {:?}", x, y);
            }
        }

        #[test]
        fn arith_never_lowers_the_weakest_guarantee(a in any_vec(8), b in any_vec(8)) {
            // every non-constant result bit is at least the join of the
            // non-random operand levels
            let out = infer_arith(BinOp::Add, &a, &b, &mut rs()).unwrap();
            let floor = vector_type(&a).join(vector_type(&b));
            if floor == Sdd {
                prop_assert!(out.bits().iter().all(|x| x.sec == Sdd || x.const_value().is_some()));
            }
        }
    }
}
