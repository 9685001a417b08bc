//! Secret and random annotations.
//!
//! ```text
//! SECRET reg eax @0
//! RANDOM mem 0x2000 4 @5
//! ```

use std::collections::BTreeMap;
use std::fmt;

use super::instr::parse_int;
use super::record::{is_blank, ParseError};
use crate::ir::{AnnotTarget, IrError, RegRef, SecurityType, TypeEnv};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AnnotKind {
    Secret,
    Random,
}

impl AnnotKind {
    pub fn level(self) -> SecurityType {
        match self {
            AnnotKind::Secret => SecurityType::Sdd,
            AnnotKind::Random => SecurityType::Ura,
        }
    }

    fn keyword(self) -> &'static str {
        match self {
            AnnotKind::Secret => "SECRET",
            AnnotKind::Random => "RANDOM",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Annotation {
    pub kind: AnnotKind,
    pub target: AnnotTarget,
    pub at_seq: u64,
}

impl fmt::Display for Annotation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} @{}", self.kind.keyword(), self.target, self.at_seq)
    }
}

fn overlaps(a: &AnnotTarget, b: &AnnotTarget) -> bool {
    match (a, b) {
        (AnnotTarget::Reg(x), AnnotTarget::Reg(y)) => {
            let (xl, xw) = x.view.span();
            let (yl, yw) = y.view.span();
            x.reg == y.reg && xl < yl + yw && yl < xl + xw
        }
        (AnnotTarget::Mem { addr: a, len: la }, AnnotTarget::Mem { addr: b, len: lb }) => {
            let (a, b) = (*a as u64, *b as u64);
            a < b + *lb as u64 && b < a + *la as u64
        }
        _ => false,
    }
}

/// Annotations grouped by the record they apply before.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AnnotationSet {
    entries: Vec<Annotation>,
}

impl AnnotationSet {
    /// Builds a set, rejecting overlapping targets at one seq.
    pub fn new(entries: Vec<Annotation>) -> Result<AnnotationSet, String> {
        let mut set = AnnotationSet::default();
        for e in entries {
            set.push(e)?;
        }
        Ok(set)
    }

    pub fn push(&mut self, a: Annotation) -> Result<(), String> {
        if let AnnotTarget::Mem { len: 0, .. } = a.target {
            return Err(format!("`{a}` has zero length"));
        }
        if let Some(prev) = self
            .entries
            .iter()
            .find(|e| e.at_seq == a.at_seq && overlaps(&e.target, &a.target))
        {
            return Err(format!("`{a}` overlaps `{prev}`"));
        }
        self.entries.push(a);
        Ok(())
    }

    pub fn entries(&self) -> &[Annotation] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries keyed by `at_seq`, file order preserved within a seq.
    pub fn by_seq(&self) -> BTreeMap<u64, Vec<Annotation>> {
        let mut m: BTreeMap<u64, Vec<Annotation>> = BTreeMap::new();
        for e in &self.entries {
            m.entry(e.at_seq).or_default().push(*e);
        }
        m
    }

    /// Checks every `at_seq` names an existing record.
    pub fn check_against(&self, trace_len: usize) -> Result<(), String> {
        match self.entries.iter().find(|e| e.at_seq >= trace_len as u64) {
            Some(e) if trace_len > 0 || e.at_seq > 0 => Err(format!(
                "`{e}` refers past the end of a {trace_len}-record trace"
            )),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for AnnotationSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            writeln!(f, "{e}")?;
        }
        Ok(())
    }
}

fn parse_line(line: &str) -> Result<Annotation, String> {
    let words: Vec<&str> = line.split_whitespace().collect();
    let kind = match words.first().copied() {
        Some("SECRET") => AnnotKind::Secret,
        Some("RANDOM") => AnnotKind::Random,
        _ => return Err("annotations start with SECRET or RANDOM".into()),
    };
    let seq_word = words.last().copied().unwrap_or_default();
    let at_seq = seq_word
        .strip_prefix('@')
        .and_then(|s| s.parse::<u64>().ok())
        .ok_or_else(|| format!("expected `@<seq>`, found `{seq_word}`"))?;
    let target = match &words[1..words.len() - 1] {
        ["reg", name] => AnnotTarget::Reg(
            RegRef::parse(name).ok_or_else(|| format!("unknown register `{name}`"))?,
        ),
        ["mem", addr, len] => {
            if !addr.starts_with("0x") {
                return Err(format!("address `{addr}` must be 0x-prefixed"));
            }
            AnnotTarget::Mem {
                addr: parse_int(addr)?,
                len: len
                    .parse()
                    .map_err(|_| format!("invalid length `{len}`"))?,
            }
        }
        _ => return Err("expected `reg <name>` or `mem 0x<addr> <len>`".into()),
    };
    Ok(Annotation {
        kind,
        target,
        at_seq,
    })
}

pub fn parse_annotations(text: &str) -> Result<AnnotationSet, ParseError> {
    let mut set = AnnotationSet::default();
    for (i, line) in text.lines().enumerate() {
        if is_blank(line) {
            continue;
        }
        let a = parse_line(line).map_err(|m| ParseError::new(i + 1, m))?;
        set.push(a).map_err(|m| ParseError::new(i + 1, m))?;
    }
    Ok(set)
}

/// Environment with every `@0` annotation applied. Later entries are applied
/// by the analysis when it reaches their record.
pub fn build_initial_env(ann: &AnnotationSet) -> Result<TypeEnv, IrError> {
    let mut env = TypeEnv::new();
    for a in ann.entries().iter().filter(|a| a.at_seq == 0) {
        env.annotate_in_place(a.target, a.kind.level())?;
    }
    Ok(env)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{Reg, TypedBitvector, Var};

    #[test]
    fn parses_both_shapes() {
        let set = parse_annotations("# secrets\nSECRET reg eax @0\nRANDOM mem 0x2000 4 @5\n").unwrap();
        assert_eq!(set.entries().len(), 2);
        assert_eq!(set.entries()[1].to_string(), "RANDOM mem 0x2000 4 @5");
        assert_eq!(set.by_seq()[&5].len(), 1);
    }

    #[test]
    fn initial_env_applies_seq_zero_only() {
        let set = parse_annotations("SECRET reg eax @0\nRANDOM mem 0x2000 4 @5\n").unwrap();
        let env = build_initial_env(&set).unwrap();
        assert_eq!(
            env.read(Var::reg(Reg::Eax)),
            TypedBitvector::unknown(SecurityType::Sdd, 32)
        );
        assert_eq!(env.mem_byte(0x2000), None);
    }

    #[test]
    fn overlapping_targets_at_one_seq_are_rejected() {
        let e = parse_annotations("SECRET reg eax @0\nRANDOM reg eax @0\n").unwrap_err();
        assert_eq!(e.line, 2);
        assert!(parse_annotations("SECRET reg eax @0\nRANDOM reg al @0\n").is_err());
        assert!(parse_annotations("SECRET reg ah @0\nRANDOM reg al @0\n").is_ok());
        assert!(parse_annotations("SECRET mem 0x10 4 @0\nRANDOM mem 0x13 1 @0\n").is_err());
        assert!(parse_annotations("SECRET mem 0x10 4 @0\nRANDOM mem 0x14 1 @0\n").is_ok());
        assert!(parse_annotations("SECRET reg eax @0\nRANDOM reg eax @1\n").is_ok());
    }

    #[test]
    fn malformed_lines() {
        for bad in [
            "SECRET reg eax",
            "PUBLIC reg eax @0",
            "SECRET reg xmm0 @0",
            "SECRET mem 4096 4 @0",
            "SECRET mem 0x10 0 @0",
        ] {
            assert!(parse_annotations(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn seq_must_exist() {
        let set = parse_annotations("SECRET reg eax @3\n").unwrap();
        assert!(set.check_against(3).is_err());
        assert!(set.check_against(4).is_ok());
        let set = parse_annotations("SECRET reg eax @0\n").unwrap();
        assert!(set.check_against(0).is_ok());
    }
}
