//! Cache-line geometry and the branch layout table.
//!
//! ```text
//! BC 0x<cond> 0x<a> 0x<b> 0x<c> [COMMON 0x<s> 0x<e>]
//! ```
//!
//! The if-branch occupies `[a, b)` and the else-branch `[b, c)`. The
//! optional `COMMON` range is code reached by both paths.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

use crate::trace::instr::parse_int;
use crate::trace::ParseError;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LayoutError {
    #[error("cache line bits must be between 4 and 12, got {0}")]
    LineBits(u32),
    #[error("range start {start:#x} is past its end {end:#x}")]
    Range { start: u32, end: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CacheGeometry {
    line_bits: u32,
}

impl Default for CacheGeometry {
    fn default() -> Self {
        CacheGeometry { line_bits: 6 }
    }
}

impl CacheGeometry {
    pub fn new(line_bits: u32) -> Result<CacheGeometry, LayoutError> {
        if !(4..=12).contains(&line_bits) {
            return Err(LayoutError::LineBits(line_bits));
        }
        Ok(CacheGeometry { line_bits })
    }

    pub fn line_bits(self) -> u32 {
        self.line_bits
    }

    pub fn cache_line(self, addr: u32) -> u32 {
        addr >> self.line_bits
    }

    /// Lines covered by `[start, end)`.
    pub fn lines_of_range(self, start: u32, end: u32) -> Result<BTreeSet<u32>, LayoutError> {
        if start > end {
            return Err(LayoutError::Range { start, end });
        }
        if start == end {
            return Ok(BTreeSet::new());
        }
        Ok((self.cache_line(start)..=self.cache_line(end - 1)).collect())
    }
}

pub fn cache_line(addr: u32, g: CacheGeometry) -> u32 {
    g.cache_line(addr)
}

pub fn lines_of_range(start: u32, end: u32, g: CacheGeometry) -> Result<BTreeSet<u32>, LayoutError> {
    g.lines_of_range(start, end)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BranchEntry {
    pub cond_addr: u32,
    pub a: u32,
    pub b: u32,
    pub c: u32,
    pub common: Option<(u32, u32)>,
}

impl BranchEntry {
    pub fn new(cond_addr: u32, a: u32, b: u32, c: u32, common: Option<(u32, u32)>) -> Result<BranchEntry, String> {
        if a >= b {
            return Err(format!("if-branch start {a:#x} must be below {b:#x}"));
        }
        if b > c {
            return Err(format!("else-branch start {b:#x} is past its end {c:#x}"));
        }
        if let Some((s, e)) = common {
            if s > e {
                return Err(format!("common range start {s:#x} is past its end {e:#x}"));
            }
        }
        Ok(BranchEntry {
            cond_addr,
            a,
            b,
            c,
            common,
        })
    }

    /// `(if-lines, else-lines)`, each including the common range.
    pub fn line_sets(&self, g: CacheGeometry) -> (BTreeSet<u32>, BTreeSet<u32>) {
        let common = match self.common {
            Some((s, e)) => g.lines_of_range(s, e).expect("validated range"),
            None => BTreeSet::new(),
        };
        let mut if_lines = g.lines_of_range(self.a, self.b).expect("validated range");
        let mut else_lines = g.lines_of_range(self.b, self.c).expect("validated range");
        if_lines.extend(&common);
        else_lines.extend(&common);
        (if_lines, else_lines)
    }

    pub fn distinguishable(&self, g: CacheGeometry) -> bool {
        let (i, e) = self.line_sets(g);
        i != e
    }
}

impl fmt::Display for BranchEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BC {:#x} {:#x} {:#x} {:#x}", self.cond_addr, self.a, self.b, self.c)?;
        if let Some((s, e)) = self.common {
            write!(f, " COMMON {s:#x} {e:#x}")?;
        }
        Ok(())
    }
}

pub fn distinguishable(e: &BranchEntry, g: CacheGeometry) -> bool {
    e.distinguishable(g)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BranchTable {
    entries: BTreeMap<u32, BranchEntry>,
}

impl BranchTable {
    pub fn insert(&mut self, e: BranchEntry) -> Result<(), String> {
        if self.entries.contains_key(&e.cond_addr) {
            return Err(format!("duplicate entry for {:#x}", e.cond_addr));
        }
        self.entries.insert(e.cond_addr, e);
        Ok(())
    }

    pub fn get(&self, cond_addr: u32) -> Option<&BranchEntry> {
        self.entries.get(&cond_addr)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &BranchEntry> {
        self.entries.values()
    }
}

impl fmt::Display for BranchTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in self.entries.values() {
            writeln!(f, "{e}")?;
        }
        Ok(())
    }
}

fn hex(word: &str) -> Result<u32, String> {
    if !word.starts_with("0x") {
        return Err(format!("address `{word}` must be 0x-prefixed"));
    }
    parse_int(word)
}

/// Parses one `BC` line.
pub fn parse_branch_line(line: &str) -> Result<BranchEntry, String> {
    let words: Vec<&str> = line.split_whitespace().collect();
    match words.as_slice() {
        ["BC", cond, a, b, c] => BranchEntry::new(hex(cond)?, hex(a)?, hex(b)?, hex(c)?, None),
        ["BC", cond, a, b, c, "COMMON", s, e] => {
            BranchEntry::new(hex(cond)?, hex(a)?, hex(b)?, hex(c)?, Some((hex(s)?, hex(e)?)))
        }
        _ => Err("expected `BC 0x<cond> 0x<a> 0x<b> 0x<c> [COMMON 0x<s> 0x<e>]`".into()),
    }
}

pub fn parse_branch_table(text: &str) -> Result<BranchTable, ParseError> {
    let mut t = BranchTable::default();
    for (i, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let e = parse_branch_line(trimmed).map_err(|m| ParseError::new(i + 1, m))?;
        t.insert(e).map_err(|m| ParseError::new(i + 1, m))?;
    }
    Ok(t)
}
