//! C interface to the analyzer.
//!
//! Inputs are parsed into opaque handles, analyzed into a report handle, and
//! the report is read back as counts or JSON. Every function returns a
//! [`CtStatus`]; on failure [`ct_last_error`] describes the problem for the
//! calling thread. Handles are freed with their matching `*_free` function,
//! which accepts null.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use cachetype::detector::{analyze, AnalysisOptions, FindingKind, Report};
use cachetype::layout::{parse_branch_table, BranchTable, CacheGeometry};
use cachetype::trace::{parse_annotations, parse_trace, AnnotationSet, TraceRecord};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CtStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Parse = 3,
    InvalidArgument = 4,
    Analysis = 5,
    Panic = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CtFindingKind {
    Sdma = 0,
    Sdbc = 1,
    SdbcLayoutUnknown = 2,
}

impl From<CtFindingKind> for FindingKind {
    fn from(k: CtFindingKind) -> FindingKind {
        match k {
            CtFindingKind::Sdma => FindingKind::Sdma,
            CtFindingKind::Sdbc => FindingKind::Sdbc,
            CtFindingKind::SdbcLayoutUnknown => FindingKind::SdbcLayoutUnknown,
        }
    }
}

/// A parsed execution trace.
pub struct CtTrace(Vec<TraceRecord>);

/// Parsed secret and random annotations.
pub struct CtAnnotations(AnnotationSet);

/// Parsed branch layout table.
pub struct CtBranchTable(BranchTable);

/// An analysis result with its JSON rendering.
pub struct CtReport {
    report: Report,
    json: CString,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let mut bytes = msg.into().into_bytes();
    bytes.retain(|&b| b != 0);
    let c = CString::new(bytes).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

type Failure = (CtStatus, String);

fn guard<F: FnOnce() -> Result<(), Failure>>(f: F) -> CtStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CtStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            CtStatus::Panic
        }
    }
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err((CtStatus::NullArgument, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| (CtStatus::InvalidUtf8, format!("{what}: {e}")))
}

unsafe fn out_ptr<'a, T>(p: *mut *mut T) -> Result<&'a mut *mut T, Failure> {
    if p.is_null() {
        return Err((CtStatus::NullArgument, "output pointer is null".into()));
    }
    *p = ptr::null_mut();
    Ok(&mut *p)
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| (CtStatus::NullArgument, format!("{what} is null")))
}

/// Message for the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ct_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// # Safety
/// `text` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ct_trace_parse(text: *const c_char, out: *mut *mut CtTrace) -> CtStatus {
    guard(|| {
        let out = out_ptr(out)?;
        let records = parse_trace(c_str(text, "trace")?).map_err(|e| (CtStatus::Parse, format!("trace {e}")))?;
        *out = Box::into_raw(Box::new(CtTrace(records)));
        Ok(())
    })
}

/// Number of records, or 0 for null.
///
/// # Safety
/// `trace` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ct_trace_len(trace: *const CtTrace) -> usize {
    trace.as_ref().map_or(0, |t| t.0.len())
}

/// # Safety
/// `trace` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ct_trace_free(trace: *mut CtTrace) {
    if !trace.is_null() {
        drop(Box::from_raw(trace));
    }
}

/// # Safety
/// `text` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ct_annotations_parse(text: *const c_char, out: *mut *mut CtAnnotations) -> CtStatus {
    guard(|| {
        let out = out_ptr(out)?;
        let set = parse_annotations(c_str(text, "annotations")?)
            .map_err(|e| (CtStatus::Parse, format!("annotations {e}")))?;
        *out = Box::into_raw(Box::new(CtAnnotations(set)));
        Ok(())
    })
}

/// # Safety
/// `annotations` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ct_annotations_free(annotations: *mut CtAnnotations) {
    if !annotations.is_null() {
        drop(Box::from_raw(annotations));
    }
}

/// # Safety
/// `text` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ct_branch_table_parse(text: *const c_char, out: *mut *mut CtBranchTable) -> CtStatus {
    guard(|| {
        let out = out_ptr(out)?;
        let table = parse_branch_table(c_str(text, "branch table")?)
            .map_err(|e| (CtStatus::Parse, format!("branch table {e}")))?;
        *out = Box::into_raw(Box::new(CtBranchTable(table)));
        Ok(())
    })
}

/// # Safety
/// `table` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ct_branch_table_free(table: *mut CtBranchTable) {
    if !table.is_null() {
        drop(Box::from_raw(table));
    }
}

/// Runs the analysis. `table` may be null, in which case secret-dependent
/// branches are reported with unknown layout. `cache_line_bits` must be in
/// 4..=12; `unit_gap` of 0 selects the default.
///
/// # Safety
/// `trace` and `annotations` must be live handles, `table` null or live,
/// and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ct_analyze(
    trace: *const CtTrace,
    annotations: *const CtAnnotations,
    table: *const CtBranchTable,
    cache_line_bits: u32,
    unit_gap: u32,
    out: *mut *mut CtReport,
) -> CtStatus {
    guard(|| {
        let out = out_ptr(out)?;
        let trace = handle(trace, "trace")?;
        let annotations = handle(annotations, "annotations")?;
        let table = table.as_ref().map(|t| &t.0);
        let geometry =
            CacheGeometry::new(cache_line_bits).map_err(|e| (CtStatus::InvalidArgument, e.to_string()))?;
        let mut opts = AnalysisOptions {
            geometry,
            ..AnalysisOptions::default()
        };
        if unit_gap != 0 {
            opts.unit_gap = unit_gap;
        }
        let a = analyze(&trace.0, &annotations.0, table, &opts).map_err(|e| (CtStatus::Analysis, e.to_string()))?;
        let json = CString::new(a.report.to_json()).map_err(|e| (CtStatus::Analysis, e.to_string()))?;
        *out = Box::into_raw(Box::new(CtReport { report: a.report, json }));
        Ok(())
    })
}

/// Findings of one kind, or 0 for null.
///
/// # Safety
/// `report` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ct_report_count(report: *const CtReport, kind: CtFindingKind) -> usize {
    report.as_ref().map_or(0, |r| r.report.count(kind.into()))
}

/// Number of leakage units, or 0 for null.
///
/// # Safety
/// `report` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ct_report_units(report: *const CtReport) -> usize {
    report.as_ref().map_or(0, |r| r.report.units.len())
}

/// The report as JSON, owned by the handle. Null for a null handle.
///
/// # Safety
/// `report` must be null or a live handle; the string dies with it.
#[no_mangle]
pub unsafe extern "C" fn ct_report_json(report: *const CtReport) -> *const c_char {
    report.as_ref().map_or(ptr::null(), |r| r.json.as_ptr())
}

/// # Safety
/// `report` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ct_report_free(report: *mut CtReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}
