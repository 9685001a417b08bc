#![allow(dead_code)]

use std::path::PathBuf;

use cachetype::detector::{analyze, Analysis, AnalysisOptions};
use cachetype::layout::parse_branch_table;
use cachetype::oracle::{parse_program, OracleProgram};
use cachetype::trace::{parse_annotations, parse_trace, AnnotationSet, TraceRecord};
use cachetype::layout::BranchTable;

pub fn fixture_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn fixture(name: &str) -> String {
    let p = fixture_path(name);
    std::fs::read_to_string(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

pub fn program(name: &str) -> OracleProgram {
    parse_program(&fixture(&format!("{name}.prog"))).unwrap_or_else(|e| panic!("{name}.prog: {e}"))
}

pub fn options() -> AnalysisOptions {
    AnalysisOptions {
        verbose: true,
        check_containment: true,
        ..AnalysisOptions::default()
    }
}

/// The detector on a program's all-zero run, annotated from its slots.
pub fn analyze_program(p: &OracleProgram) -> Analysis {
    let trace = p.trace(0, 0).expect("fixture runs");
    analyze(&trace, &p.annotations(), Some(&p.table), &options()).expect("fixture analyzes")
}

pub struct NumBitsWord {
    pub trace: Vec<TraceRecord>,
    pub annotations: AnnotationSet,
    pub table: BranchTable,
}

pub fn num_bits_word() -> NumBitsWord {
    NumBitsWord {
        trace: parse_trace(&fixture("num_bits_word.trace")).unwrap(),
        annotations: parse_annotations(&fixture("num_bits_word.annot")).unwrap(),
        table: parse_branch_table(&fixture("num_bits_word.bt")).unwrap(),
    }
}

/// Every `.prog` fixture by stem.
pub fn program_names() -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(fixture_path(""))
        .unwrap()
        .filter_map(|e| {
            let p = e.ok()?.path();
            (p.extension()? == "prog").then(|| p.file_stem().unwrap().to_string_lossy().into_owned())
        })
        .collect();
    names.sort();
    names
}

pub const CONSTANT_TIME: [&str; 5] = [
    "ct_select",
    "ct_eq",
    "ct_lt",
    "always_execute_select",
    "always_access_select",
];
