//! Command-line driver. Exit status: 0 clean, 1 input error, 2 findings.

use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};

use crate::detector::{analyze, render_log, AnalysisError, AnalysisOptions, Report};
use crate::layout::{parse_branch_table, BranchTable, CacheGeometry};
use crate::oracle::{audit, enumerate_leakage, parse_program, OracleError};
use crate::synth::{self, SynthSpec};
use crate::trace::{parse_annotations, parse_trace, AnnotationSet, ParseError, TraceRecord};

pub const EXIT_CLEAN: i32 = 0;
pub const EXIT_INPUT: i32 = 1;
pub const EXIT_FINDINGS: i32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Analyze,
    OracleCompare,
    GenTrace,
}

/// Detect secret-dependent memory accesses and branches in x86 traces.
#[derive(Debug, Parser)]
#[command(name = "cachetype", version)]
pub struct Args {
    #[arg(long, value_enum, default_value_t = Mode::Analyze)]
    pub mode: Mode,
    /// Trace to analyze; oracle program in oracle-compare mode; output in gen-trace mode (default stdout).
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// SECRET/RANDOM annotations; written in gen-trace mode.
    #[arg(long)]
    pub annot: Option<PathBuf>,
    /// BC lines describing conditional jump layouts.
    #[arg(long)]
    pub branch_table: Option<PathBuf>,
    #[arg(long, default_value_t = 6, value_parser = clap::value_parser!(u32).range(4..=12))]
    pub cache_line_bits: u32,
    /// Largest address gap, in bytes, between sites of one leakage unit.
    #[arg(long, default_value_t = 32)]
    pub unit_gap: u32,
    /// Where to write the JSON report.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Print the per-record inference log.
    #[arg(long)]
    pub verbose: bool,
    /// gen-trace: number of records.
    #[arg(long)]
    pub length: Option<u64>,
    /// gen-trace: instructions per loop iteration.
    #[arg(long, default_value_t = 10)]
    pub body_len: usize,
    /// gen-trace: seed for initial register and key values.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// An input problem, reported as `path:line: message` when the line is known.
#[derive(Debug)]
pub struct InputError {
    pub path: Option<PathBuf>,
    pub line: Option<usize>,
    pub message: String,
}

impl InputError {
    fn new(path: Option<&Path>, line: Option<usize>, message: impl Into<String>) -> InputError {
        InputError {
            path: path.map(Path::to_path_buf),
            line,
            message: message.into(),
        }
    }

    fn usage(message: impl Into<String>) -> InputError {
        InputError::new(None, None, message)
    }

    fn parse(path: &Path, e: ParseError) -> InputError {
        InputError::new(Some(path), Some(e.line), e.message)
    }
}

impl fmt::Display for InputError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(p) = &self.path {
            write!(f, "{}:", p.display())?;
            if let Some(l) = self.line {
                write!(f, "{l}:")?;
            }
            write!(f, " ")?;
        }
        write!(f, "{}", self.message)
    }
}

fn read(path: &Path) -> Result<String, InputError> {
    fs::read_to_string(path).map_err(|e| InputError::new(Some(path), None, e.to_string()))
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str, mode: &str) -> Result<&'a Path, InputError> {
    p.as_deref()
        .ok_or_else(|| InputError::usage(format!("{mode} needs --{flag}")))
}

/// 1-based line of the `index`-th record in trace text.
fn record_line(text: &str, index: usize) -> Option<usize> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| {
            let t = l.trim();
            !t.is_empty() && !t.starts_with('#')
        })
        .nth(index)
        .map(|(i, _)| i + 1)
}

fn analysis_error(e: AnalysisError, trace: &Path, text: &str, records: &[TraceRecord], annot: &Path) -> InputError {
    let seq = match &e {
        AnalysisError::Lift(l) => Some(l.seq),
        AnalysisError::Infer { seq, .. } => Some(*seq),
        AnalysisError::Annotation(m) => return InputError::new(Some(annot), None, m.clone()),
    };
    let line = seq
        .and_then(|s| records.iter().position(|r| r.seq == s))
        .and_then(|i| record_line(text, i));
    InputError::new(Some(trace), line, e.to_string())
}

fn write_report(path: Option<&Path>, report: &Report) -> Result<(), InputError> {
    if let Some(p) = path {
        fs::write(p, report.to_json() + "\n").map_err(|e| InputError::new(Some(p), None, e.to_string()))?;
    }
    Ok(())
}

fn options(args: &Args) -> AnalysisOptions {
    AnalysisOptions {
        geometry: CacheGeometry::new(args.cache_line_bits).expect("range checked by the argument parser"),
        unit_gap: args.unit_gap,
        verbose: args.verbose,
        ..AnalysisOptions::default()
    }
}

fn load_table(path: Option<&Path>) -> Result<Option<BranchTable>, InputError> {
    path.map(|p| parse_branch_table(&read(p)?).map_err(|e| InputError::parse(p, e)))
        .transpose()
}

fn run_analyze(args: &Args, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32, InputError> {
    let trace_path = required(&args.trace, "trace", "analyze")?;
    let annot_path = required(&args.annot, "annot", "analyze")?;
    let text = read(trace_path)?;
    let trace = parse_trace(&text).map_err(|e| InputError::parse(trace_path, e))?;
    let ann: AnnotationSet = parse_annotations(&read(annot_path)?).map_err(|e| InputError::parse(annot_path, e))?;
    let table = load_table(args.branch_table.as_deref())?;
    let opts = options(args);
    let a = analyze(&trace, &ann, table.as_ref(), &opts)
        .map_err(|e| analysis_error(e, trace_path, &text, &trace, annot_path))?;
    for d in &a.report.diagnostics {
        let _ = writeln!(err, "warning: {d}");
    }
    if args.verbose {
        let _ = write!(out, "{}", render_log(&a.log, opts.geometry));
    }
    let _ = write!(out, "{}", a.report.summary());
    write_report(args.report.as_deref(), &a.report)?;
    Ok(if a.report.findings.is_empty() { EXIT_CLEAN } else { EXIT_FINDINGS })
}

fn oracle_error(path: &Path, e: OracleError) -> InputError {
    match e {
        OracleError::Parse(p) => InputError::parse(path, p),
        e => InputError::new(Some(path), None, e.to_string()),
    }
}

fn run_oracle(args: &Args, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32, InputError> {
    let path = required(&args.trace, "trace", "oracle-compare")?;
    let p = parse_program(&read(path)?).map_err(|e| InputError::parse(path, e))?;
    let table = load_table(args.branch_table.as_deref())?.unwrap_or_else(|| p.table.clone());
    let ann = match &args.annot {
        Some(a) => parse_annotations(&read(a)?).map_err(|e| InputError::parse(a, e))?,
        None => p.annotations(),
    };
    let opts = options(args);
    let truth = enumerate_leakage(&p, opts.geometry, &table).map_err(|e| oracle_error(path, e))?;
    let trace = p.trace(0, 0).map_err(|e| oracle_error(path, e))?;
    let a = analyze(&trace, &ann, Some(&table), &opts).map_err(|e| InputError::new(Some(path), None, e.to_string()))?;
    let audit = audit(&p, &a.report, &truth).map_err(|e| oracle_error(path, e))?;
    for d in &a.report.diagnostics {
        let _ = writeln!(err, "warning: {d}");
    }
    if args.verbose {
        let _ = write!(out, "{}", render_log(&a.log, opts.geometry));
    }
    let _ = write!(out, "{}", a.report.summary());
    let v = &audit.verdict;
    let _ = writeln!(
        out,
        "oracle: {} assignments, {} leaky memory site(s), {} leaky branch site(s)",
        truth.assignments,
        truth.leaky_mem_sites.len(),
        truth.leaky_branch_sites.len()
    );
    for (m, gap) in &audit.expected {
        let _ = writeln!(out, "false negative {} {:#x} (known gap: {})", m.kind, m.addr, gap.id);
    }
    for m in &audit.unexpected {
        let _ = writeln!(out, "false negative {} {:#x}", m.kind, m.addr);
    }
    for m in &v.false_positives {
        let _ = writeln!(out, "false positive {m:#x}");
    }
    let _ = writeln!(out, "verdict: {}", if v.sound { "sound" } else { "unsound" });
    write_report(args.report.as_deref(), &a.report)?;
    Ok(if v.sound { EXIT_CLEAN } else { EXIT_FINDINGS })
}

fn run_gen(args: &Args, out: &mut dyn Write) -> Result<i32, InputError> {
    let length = args
        .length
        .ok_or_else(|| InputError::usage("gen-trace needs --length"))?;
    let spec = SynthSpec {
        body_len: args.body_len,
        seed: args.seed,
    };
    let result = match &args.trace {
        Some(p) => {
            let f = fs::File::create(p).map_err(|e| InputError::new(Some(p), None, e.to_string()))?;
            synth::write_synthetic(&spec, length, io::BufWriter::new(f))
        }
        None => synth::write_synthetic(&spec, length, &mut *out),
    };
    result.map_err(|e| InputError::usage(e.to_string()))?;
    if let Some(a) = &args.annot {
        fs::write(a, synth::annotations().to_string()).map_err(|e| InputError::new(Some(a), None, e.to_string()))?;
    }
    Ok(EXIT_CLEAN)
}

/// Runs one invocation, writing normal output to `out` and diagnostics to
/// `err`. Returns the exit status.
pub fn run(args: &Args, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let result = match args.mode {
        Mode::Analyze => run_analyze(args, out, err),
        Mode::OracleCompare => run_oracle(args, out, err),
        Mode::GenTrace => run_gen(args, out),
    };
    result.unwrap_or_else(|e| {
        let _ = writeln!(err, "error: {e}");
        EXIT_INPUT
    })
}

/// Parses `argv` and runs. Argument errors are input errors.
pub fn main_with<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Args::try_parse_from(argv) {
        Ok(args) => run(&args, out, err),
        Err(e) if !e.use_stderr() => {
            let _ = write!(out, "{e}");
            EXIT_CLEAN
        }
        Err(e) => {
            let _ = write!(err, "{e}");
            EXIT_INPUT
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_args(argv: &[&str]) -> (i32, String, String) {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let code = main_with(std::iter::once("cachetype").chain(argv.iter().copied()), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn bad_arguments_are_input_errors() {
        assert_eq!(run_args(&["--cache-line-bits", "3"]).0, EXIT_INPUT);
        assert_eq!(run_args(&["--bogus"]).0, EXIT_INPUT);
        let (code, _, err) = run_args(&["--mode", "analyze"]);
        assert_eq!(code, EXIT_INPUT);
        assert!(err.contains("--trace"), "{err}");
        assert_eq!(run_args(&["--help"]).0, EXIT_CLEAN);
    }

    #[test]
    fn parse_errors_name_file_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let trace = dir.path().join("t.trace");
        let annot = dir.path().join("a.annot");
        fs::write(&trace, "# header\n\nT 0 0x10 mov eax,0x1 | eax=0x0 ebx=0x0 ecx=0x0 edx=0x0 esi=0x0 edi=0x0 ebp=0x0 esp=0x0\nT 1 0x12 frob eax\n").unwrap();
        fs::write(&annot, "SECRET eax @0\n").unwrap();
        let (code, _, err) = run_args(&["--trace", trace.to_str().unwrap(), "--annot", annot.to_str().unwrap()]);
        assert_eq!(code, EXIT_INPUT);
        assert!(err.contains(&format!("{}:4:", trace.display())), "{err}");
    }

    #[test]
    fn record_lines_skip_comments() {
        assert_eq!(record_line("# c\nT a\n\nT b\n", 1), Some(4));
        assert_eq!(record_line("T a\n", 3), None);
    }
}
