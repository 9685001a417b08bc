//! Trace records and the line-oriented trace format.
//!
//! ```text
//! T <seq> 0x<addr> <mnemonic> <operands> | eax=0x.. ebx=0x.. ecx=0x.. edx=0x.. esi=0x.. edi=0x.. ebp=0x.. esp=0x..
//! ```

use std::fmt;
use std::io::{self, Write};

use thiserror::Error;

use super::instr::{parse_int, Instruction, RegFile};
use crate::ir::Reg;

/// A parse failure with its 1-based line number.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub message: String,
}

impl ParseError {
    pub fn new(line: usize, message: impl Into<String>) -> ParseError {
        ParseError {
            line,
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TraceRecord {
    pub seq: u64,
    pub addr: u32,
    pub instr: Instruction,
    /// Register values before the instruction executes.
    pub regs: RegFile,
}

impl fmt::Display for TraceRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "T {} {:#010x} {} | {}",
            self.seq, self.addr, self.instr, self.regs
        )
    }
}

/// Lines that carry no record.
pub(crate) fn is_blank(line: &str) -> bool {
    let t = line.trim();
    t.is_empty() || t.starts_with('#')
}

/// Parses one `T` line.
pub fn parse_record_line(line: &str) -> Result<TraceRecord, String> {
    let (head, regs) = line
        .split_once('|')
        .ok_or("missing `|` before register values")?;
    let head = head.trim();
    let mut parts = head.splitn(4, char::is_whitespace);
    if parts.next() != Some("T") {
        return Err("record lines start with `T`".into());
    }
    let seq = parts
        .next()
        .ok_or("missing sequence number")?
        .parse::<u64>()
        .map_err(|_| "invalid sequence number".to_string())?;
    let addr_text = parts.next().ok_or("missing instruction address")?;
    if !addr_text.starts_with("0x") {
        return Err(format!("instruction address `{addr_text}` must be 0x-prefixed"));
    }
    let addr = parse_int(addr_text)?;
    let instr: Instruction = parts.next().ok_or("missing instruction")?.parse()?;
    Ok(TraceRecord {
        seq,
        addr,
        instr,
        regs: parse_regs(regs)?,
    })
}

fn parse_regs(text: &str) -> Result<RegFile, String> {
    let mut regs = RegFile::default();
    let mut fields = text.split_whitespace();
    for r in Reg::ALL {
        let field = fields
            .next()
            .ok_or_else(|| format!("missing register {r}"))?;
        let (name, value) = field
            .split_once('=')
            .ok_or_else(|| format!("malformed register field `{field}`"))?;
        if name != r.name() {
            return Err(format!("expected register {r}, found `{name}`"));
        }
        let hex = value
            .strip_prefix("0x")
            .ok_or_else(|| format!("register value `{value}` must be 0x-prefixed"))?;
        let v = u32::from_str_radix(hex, 16)
            .map_err(|_| format!("invalid register value `{value}`"))?;
        regs.set(r, v);
    }
    if let Some(extra) = fields.next() {
        return Err(format!("unexpected `{extra}` after register values"));
    }
    Ok(regs)
}

/// Parses a whole trace. Sequence numbers must run 0, 1, 2, ...
pub fn parse_trace(text: &str) -> Result<Vec<TraceRecord>, ParseError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if is_blank(line) {
            continue;
        }
        let rec = parse_record_line(line).map_err(|m| ParseError::new(i + 1, m))?;
        if rec.seq != out.len() as u64 {
            return Err(ParseError::new(
                i + 1,
                format!(
                    "non-contiguous sequence: expected {}, found {}",
                    out.len(),
                    rec.seq
                ),
            ));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn write_trace<W: Write>(records: &[TraceRecord], mut w: W) -> io::Result<()> {
    for r in records {
        writeln!(w, "{r}")?;
    }
    Ok(())
}

pub fn trace_to_string(records: &[TraceRecord]) -> String {
    let mut buf = Vec::new();
    write_trace(records, &mut buf).expect("writing to a Vec cannot fail");
    String::from_utf8(buf).expect("trace text is ASCII")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::instr::{Mnemonic, Operand};
    use proptest::prelude::*;

    const LINE: &str = "T 0 0x804961d mov eax,[ebp+0x8] | eax=0x00000000 ebx=0x00000000 ecx=0x00000000 edx=0x00000000 esi=0x00000000 edi=0x00000000 ebp=0xbf000010 esp=0xbf000000";

    #[test]
    fn parses_a_record() {
        let r = parse_record_line(LINE).unwrap();
        assert_eq!(r.seq, 0);
        assert_eq!(r.addr, 0x804961d);
        assert_eq!(r.instr.mnemonic, Mnemonic::Mov);
        assert!(matches!(r.instr.operands[1], Operand::Mem(_)));
        assert_eq!(r.regs.get(Reg::Ebp), 0xbf00_0010);
    }

    #[test]
    fn empty_and_comment_only_traces() {
        assert!(parse_trace("").unwrap().is_empty());
        assert!(parse_trace("# nothing\n\n").unwrap().is_empty());
    }

    #[test]
    fn sequence_gaps_are_errors() {
        let text = format!("{LINE}\n{}", LINE.replacen("T 0", "T 2", 1));
        let e = parse_trace(&text).unwrap_err();
        assert_eq!(e.line, 2);
        assert!(e.message.contains("non-contiguous sequence"));
    }

    #[test]
    fn malformed_lines_report_line_numbers() {
        let text = format!("# header\n{LINE}\nT 1 0x10 frob eax | eax=0x0");
        let e = parse_trace(&text).unwrap_err();
        assert_eq!(e.line, 3);
        assert!(e.message.contains("frob"));
        let e = parse_trace(&LINE.replace(" esp=0xbf000000", "")).unwrap_err();
        assert!(e.message.contains("esp"));
    }

    fn instr_text() -> impl Strategy<Value = String> {
        prop::sample::select(vec![
            "mov eax,[ebp+0x8]",
            "and eax,0xffff0000",
            "test eax,eax",
            "je 0x8049661",
            "shr eax,0x18",
            "mov al,byte [eax+0x8110460]",
            "movzx ecx,word [esi*2+0x4000]",
            "lea edx,[ebx+ecx*8-0x20]",
            "cmovl eax,dword [esp]",
            "imul eax,ebx,0x7",
            "push 0xffffffff",
            "pop ebp",
            "sar dh,cl",
        ])
        .prop_map(str::to_string)
    }

    proptest! {
        #[test]
        fn records_round_trip(
            instrs in prop::collection::vec((any::<u32>(), instr_text(), any::<[u32; 8]>()), 0..20)
        ) {
            let recs: Vec<TraceRecord> = instrs
                .iter()
                .enumerate()
                .map(|(i, (addr, text, regs))| TraceRecord {
                    seq: i as u64,
                    addr: *addr,
                    instr: text.parse().unwrap(),
                    regs: RegFile(*regs),
                })
                .collect();
            let text = trace_to_string(&recs);
            prop_assert_eq!(parse_trace(&text).unwrap(), recs);
        }
    }
}
