//! SDMA/SDBC checks, the analysis loop and the leakage report.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::infer::{eval_expr, exec_stmt_in, AccessKind, InferError, MemAccess, RuleSet, RuleStep, StepLog};
use crate::ir::{vector_type, Flag, IrError, Reg, SecurityType, TypeEnv, TypedBitvector, Var};
use crate::layout::{BranchTable, CacheGeometry};
use crate::trace::lift::written;
use crate::trace::{lift, AnnotationSet, LiftError, TaintTracker, TraceRecord};

/// JSON schema of [`Report`].
pub const REPORT_SCHEMA: &str = include_str!("../schema/report.schema.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FindingKind {
    #[serde(rename = "SDMA")]
    Sdma,
    #[serde(rename = "SDBC")]
    Sdbc,
    #[serde(rename = "SDBC-layout-unknown")]
    SdbcLayoutUnknown,
}

impl FindingKind {
    pub fn name(self) -> &'static str {
        match self {
            FindingKind::Sdma => "SDMA",
            FindingKind::Sdbc => "SDBC",
            FindingKind::SdbcLayoutUnknown => "SDBC-layout-unknown",
        }
    }
}

mod hex {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn parse(s: &str) -> Option<u32> {
        u32::from_str_radix(s.strip_prefix("0x")?, 16).ok()
    }

    pub fn serialize<S: Serializer>(v: &u32, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{v:#x}"))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u32, D::Error> {
        let s = String::deserialize(d)?;
        parse(&s).ok_or_else(|| D::Error::custom(format!("invalid hex address `{s}`")))
    }

    pub mod list {
        use serde::{de::Error, ser::SerializeSeq, Deserialize, Deserializer, Serializer};

        pub fn serialize<S: Serializer>(v: &[u32], s: S) -> Result<S::Ok, S::Error> {
            let mut seq = s.serialize_seq(Some(v.len()))?;
            for x in v {
                seq.serialize_element(&format!("{x:#x}"))?;
            }
            seq.end()
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u32>, D::Error> {
            Vec::<String>::deserialize(d)?
                .iter()
                .map(|s| super::parse(s).ok_or_else(|| D::Error::custom(format!("invalid hex address `{s}`"))))
                .collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Finding {
    pub kind: FindingKind,
    #[serde(with = "hex")]
    pub site_addr: u32,
    /// First record where the site was found.
    pub seq: u64,
    pub evidence: String,
    #[serde(with = "hex::list")]
    pub lines: Vec<u32>,
    /// Number of records that hit this site.
    pub hits: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LeakageUnit {
    #[serde(with = "hex::list")]
    pub member_addrs: Vec<u32>,
    #[serde(with = "hex")]
    pub representative: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stats {
    pub sdma: usize,
    pub sdbc: usize,
    pub sdbc_layout_unknown: usize,
    pub sites: usize,
    pub units: usize,
    pub trace_len: usize,
    pub tainted_records: usize,
    pub elapsed_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Report {
    pub findings: Vec<Finding>,
    pub units: Vec<LeakageUnit>,
    pub stats: Stats,
    pub diagnostics: Vec<String>,
}

impl Report {
    pub fn count(&self, kind: FindingKind) -> usize {
        self.findings.iter().filter(|f| f.kind == kind).count()
    }

    pub fn sites(&self, kind: FindingKind) -> Vec<u32> {
        self.findings
            .iter()
            .filter(|f| f.kind == kind)
            .map(|f| f.site_addr)
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One line per finding.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        for f in &self.findings {
            let _ = writeln!(
                s,
                "{:<20} {:#010x}  seq {:<8} hits {:<6} {}",
                f.kind.name(),
                f.site_addr,
                f.seq,
                f.hits,
                f.evidence
            );
        }
        let _ = writeln!(
            s,
            "{} finding(s) in {} unit(s); {} of {} records tainted",
            self.findings.len(),
            self.units.len(),
            self.stats.tainted_records,
            self.stats.trace_len
        );
        s
    }
}

/// Where a check fires.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Site {
    pub addr: u32,
    pub seq: u64,
}

/// True when some bit at or above the line offset is secret-dependent.
pub fn sdma_leaks(addr_vec: &TypedBitvector, g: CacheGeometry) -> bool {
    let l = g.line_bits();
    l < addr_vec.width() && vector_type(&addr_vec.extract(l, addr_vec.width() - 1)) == SecurityType::Sdd
}

pub fn check_sdma(access: &MemAccess, g: CacheGeometry, site: Site) -> Option<Finding> {
    sdma_leaks(&access.addr_type, g).then(|| Finding {
        kind: FindingKind::Sdma,
        site_addr: site.addr,
        seq: site.seq,
        evidence: access.addr_type.evidence(),
        lines: vec![g.cache_line(access.addr)],
        hits: 1,
    })
}

/// `table = None` means no layout information is available at all.
pub fn check_sdbc(
    flag: &TypedBitvector,
    table: Option<&BranchTable>,
    g: CacheGeometry,
    site: Site,
) -> Option<Finding> {
    let bit = flag.bit(0);
    if bit.sec != SecurityType::Sdd || bit.const_value().is_some() {
        return None;
    }
    let finding = |kind, lines| Finding {
        kind,
        site_addr: site.addr,
        seq: site.seq,
        evidence: flag.evidence(),
        lines,
        hits: 1,
    };
    match table.and_then(|t| t.get(site.addr)) {
        None => Some(finding(FindingKind::SdbcLayoutUnknown, Vec::new())),
        Some(entry) if entry.distinguishable(g) => {
            let (i, e) = entry.line_sets(g);
            let mut lines: Vec<u32> = i.union(&e).copied().collect();
            lines.sort_unstable();
            Some(finding(FindingKind::Sdbc, lines))
        }
        Some(_) => None,
    }
}

/// Deduplicates sites and merges those within `gap` bytes of each other.
pub fn group_units(findings: &[Finding], gap: u32) -> Vec<LeakageUnit> {
    let mut sites: Vec<u32> = findings.iter().map(|f| f.site_addr).collect();
    sites.sort_unstable();
    sites.dedup();
    let mut units: Vec<Vec<u32>> = Vec::new();
    for s in sites {
        match units.last_mut() {
            Some(u) if s - *u.last().expect("units are non-empty") <= gap => u.push(s),
            _ => units.push(vec![s]),
        }
    }
    units
        .into_iter()
        .map(|m| LeakageUnit {
            representative: m[0],
            member_addrs: m,
        })
        .collect()
}

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Lift(#[from] LiftError),
    #[error("record {seq} at {addr:#x}: {source}")]
    Infer {
        seq: u64,
        addr: u32,
        source: InferError,
    },
    #[error("annotation: {0}")]
    Annotation(String),
}

impl From<IrError> for AnalysisError {
    fn from(e: IrError) -> Self {
        AnalysisError::Annotation(e.to_string())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AnalysisOptions {
    pub geometry: CacheGeometry,
    pub unit_gap: u32,
    /// Record the per-record inference log.
    pub verbose: bool,
    /// Check after every record that SDD/URA state is tainted.
    pub check_containment: bool,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        AnalysisOptions {
            geometry: CacheGeometry::default(),
            unit_gap: 32,
            verbose: false,
            check_containment: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchLog {
    pub flag: TypedBitvector,
    pub entry: Option<(u32, u32, u32)>,
    pub if_lines: Vec<u32>,
    pub else_lines: Vec<u32>,
}

/// One row of the inference log.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub seq: u64,
    pub addr: u32,
    pub instr: String,
    pub steps: Vec<RuleStep>,
    pub accesses: Vec<MemAccess>,
    pub branch: Option<BranchLog>,
    pub verdicts: Vec<FindingKind>,
}

impl LogRow {
    /// Expression rules of the record's non-flag statements.
    pub fn rules(&self) -> RuleSet {
        let mut r = RuleSet::EMPTY;
        for s in self.steps.iter().filter(|s| !s.is_flag) {
            r.extend(s.rules.expression_rules());
        }
        r
    }

    pub fn flag_rules(&self) -> RuleSet {
        let mut r = RuleSet::EMPTY;
        for s in self.steps.iter().filter(|s| s.is_flag) {
            r.extend(s.rules.expression_rules());
        }
        r
    }

    pub fn statement_rules(&self) -> RuleSet {
        let mut r = RuleSet::EMPTY;
        for s in &self.steps {
            r.extend(s.rules.statement_rules());
        }
        r
    }

    /// Final typed value written to `target` by this record.
    pub fn output(&self, target: &str) -> Option<&TypedBitvector> {
        self.steps.iter().rev().find(|s| s.target == target).map(|s| &s.output)
    }

    pub fn types_column(&self) -> String {
        let mut parts: Vec<String> = Vec::new();
        for a in &self.accesses {
            parts.push(format!("addr = {}", a.addr_type.evidence()));
        }
        for s in &self.steps {
            if s.target.starts_with("mem[") || s.is_temp {
                continue;
            }
            parts.push(format!("{} = {}", s.target, s.output.evidence()));
        }
        if let Some(b) = &self.branch {
            parts.push(format!("cond = {}", b.flag.evidence()));
        }
        parts.join("; ")
    }

    pub fn control_column(&self, g: CacheGeometry) -> String {
        let hex = |v: &[u32]| v.iter().map(|x| format!("{x:x}")).collect::<Vec<_>>().join(" ");
        let mut parts = Vec::new();
        for a in &self.accesses {
            let kind = match a.kind {
                AccessKind::Load => "MA",
                AccessKind::Store => "MA(store)",
            };
            parts.push(format!("{kind}({:x}) → c-line {:x}", self.addr, g.cache_line(a.addr)));
        }
        if let Some(b) = &self.branch {
            match b.entry {
                Some((a, bb, c)) => parts.push(format!(
                    "BC({a:x},{bb:x},{c:x}) true → c-line {}; false → c-line {}",
                    hex(&b.if_lines),
                    hex(&b.else_lines)
                )),
                None => parts.push("BC(?) layout unknown".into()),
            }
        }
        if !self.verdicts.is_empty() {
            parts.push("secret-dependent".into());
        }
        parts.join("; ")
    }
}

/// Renders log rows as a text table with the columns refinement types,
/// applied rules and control flow & cache lines.
pub fn render_log(rows: &[LogRow], g: CacheGeometry) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:>6} {:>10}  {:<32} | {:<60} | {:<40} | control flow & cache lines",
        "seq", "addr", "instruction", "refinement types", "applied rules"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:>6} {:>10x}  {:<32} | {:<60} | {:<40} | {}",
            r.seq,
            r.addr,
            r.instr,
            r.types_column(),
            r.rules().to_string(),
            r.control_column(g)
        );
    }
    s
}

#[derive(Debug, Clone)]
pub struct Analysis {
    pub report: Report,
    pub log: Vec<LogRow>,
    pub containment_violations: Vec<String>,
}

/// Runs the full analysis.
pub fn analyze(
    trace: &[TraceRecord],
    ann: &AnnotationSet,
    table: Option<&BranchTable>,
    opts: &AnalysisOptions,
) -> Result<Analysis, AnalysisError> {
    analyze_with(trace, ann, table, opts, |_, _| {})
}

fn contained(env: &TypeEnv, taint: &TaintTracker, seq: u64, out: &mut Vec<String>) {
    let hot = |v: &TypedBitvector| v.has_level(SecurityType::Sdd) || v.has_level(SecurityType::Ura);
    for r in Reg::ALL {
        if hot(env.reg(r)) && !taint.reg(r) {
            out.push(format!("seq {seq}: {r} typed {} but untainted", env.reg(r).evidence()));
        }
    }
    for f in Flag::ALL {
        let v = env.read(Var::Flag(f));
        if hot(&v) && !taint.flag(f) {
            out.push(format!("seq {seq}: {} typed {} but untainted", f.name(), v.evidence()));
        }
    }
    for (a, byte) in env.tracked_bytes() {
        let v = TypedBitvector::from_bits(byte.iter().copied());
        if hot(&v) && !taint.byte(a) {
            out.push(format!("seq {seq}: mem[{a:#x}] typed {} but untainted", v.evidence()));
        }
    }
}

/// Like [`analyze`], calling `observe(seq, env)` after every record.
pub fn analyze_with<F: FnMut(u64, &TypeEnv)>(
    trace: &[TraceRecord],
    ann: &AnnotationSet,
    table: Option<&BranchTable>,
    opts: &AnalysisOptions,
    mut observe: F,
) -> Result<Analysis, AnalysisError> {
    let start = Instant::now();
    let g = opts.geometry;
    let mut diagnostics = Vec::new();
    ann.check_against(trace.len()).map_err(AnalysisError::Annotation)?;
    if table.is_none() {
        diagnostics.push(
            "no branch table: secret-dependent branches are reported as SDBC-layout-unknown".to_string(),
        );
    }
    let by_seq = ann.by_seq();
    let mut env = TypeEnv::new();
    let mut taint = TaintTracker::new();
    let mut log = StepLog {
        record_steps: opts.verbose,
        ..StepLog::default()
    };
    let mut rows = Vec::new();
    let mut violations = Vec::new();
    let mut findings: Vec<Finding> = Vec::new();
    let mut index: HashMap<(FindingKind, u32), usize> = HashMap::new();
    let mut tainted_records = 0usize;
    let mut written_vars = Vec::new();
    let mut written_bytes = Vec::new();

    let mut record = |f: Finding, findings: &mut Vec<Finding>| match index.get(&(f.kind, f.site_addr)) {
        Some(&i) => findings[i].hits += 1,
        None => {
            index.insert((f.kind, f.site_addr), findings.len());
            findings.push(f);
        }
    };

    for rec in trace {
        let mut annotated = false;
        if let Some(list) = by_seq.get(&rec.seq) {
            for a in list {
                env.annotate_in_place(a.target, a.kind.level())?;
                taint.apply(a);
            }
            annotated = true;
        }
        let lifted = lift(rec)?;
        let touched = taint.step(&lifted) || annotated;
        env.clear_temps();
        if touched {
            tainted_records += 1;
            log.clear();
            let site = Site {
                addr: rec.addr,
                seq: rec.seq,
            };
            let mut verdicts = Vec::new();
            let mut branch_log = None;
            if let Some(b) = &lifted.branch {
                let mut scratch = RuleSet::EMPTY;
                let flag = eval_expr(&env, &b.cond, &mut scratch).map_err(|source| AnalysisError::Infer {
                    seq: rec.seq,
                    addr: rec.addr,
                    source,
                })?;
                if let Some(f) = check_sdbc(&flag, table, g, site) {
                    verdicts.push(f.kind);
                    record(f, &mut findings);
                }
                if opts.verbose {
                    let entry = table.and_then(|t| t.get(rec.addr));
                    let (i, e) = entry.map(|e| e.line_sets(g)).unwrap_or_default();
                    branch_log = Some(BranchLog {
                        flag,
                        entry: entry.map(|e| (e.a, e.b, e.c)),
                        if_lines: i.into_iter().collect(),
                        else_lines: e.into_iter().collect(),
                    });
                }
            }
            for s in &lifted.stmts {
                exec_stmt_in(s, &mut env, &mut log).map_err(|source| AnalysisError::Infer {
                    seq: rec.seq,
                    addr: rec.addr,
                    source,
                })?;
            }
            for a in &log.accesses {
                if let Some(f) = check_sdma(a, g, site) {
                    verdicts.push(f.kind);
                    record(f, &mut findings);
                }
            }
            if opts.verbose {
                rows.push(LogRow {
                    seq: rec.seq,
                    addr: rec.addr,
                    instr: rec.instr.to_string(),
                    steps: std::mem::take(&mut log.steps),
                    accesses: std::mem::take(&mut log.accesses),
                    branch: branch_log,
                    verdicts,
                });
            }
        } else {
            // Skipped records may still overwrite state; forget what they wrote.
            written_vars.clear();
            written_bytes.clear();
            written(&lifted.stmts, &mut written_vars, &mut written_bytes);
            for v in &written_vars {
                if !matches!(v, Var::Temp(_)) {
                    env.reset(*v);
                }
            }
            for a in &written_bytes {
                env.forget_mem_byte(*a);
            }
        }
        env.clear_temps();
        if opts.check_containment {
            contained(&env, &taint, rec.seq, &mut violations);
        }
        observe(rec.seq, &env);
    }

    findings.sort_by_key(|f| (f.site_addr, f.kind));
    let units = group_units(&findings, opts.unit_gap);
    let sites = {
        let mut s: Vec<u32> = findings.iter().map(|f| f.site_addr).collect();
        s.sort_unstable();
        s.dedup();
        s.len()
    };
    let count = |k| findings.iter().filter(|f| f.kind == k).count();
    let stats = Stats {
        sdma: count(FindingKind::Sdma),
        sdbc: count(FindingKind::Sdbc),
        sdbc_layout_unknown: count(FindingKind::SdbcLayoutUnknown),
        sites,
        units: units.len(),
        trace_len: trace.len(),
        tainted_records,
        elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
    };
    Ok(Analysis {
        report: Report {
            findings,
            units,
            stats,
            diagnostics,
        },
        log: rows,
        containment_violations: violations,
    })
}
