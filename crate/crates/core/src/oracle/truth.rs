//! Exact enumeration of secret and random assignments.
//!
//! A site leaks when the distribution, over the random bits, of what it
//! exposes differs between two secrets that both reach it. A memory site
//! exposes the sequence of cache lines it touches; a branch site exposes its
//! sequence of directions and only counts when its two sides are
//! distinguishable in the layout.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::program::OracleProgram;
use super::OracleError;
use crate::detector::{FindingKind, Report};
use crate::ir::{Reg, RegRef};
use crate::layout::{BranchTable, CacheGeometry};

/// Largest number of assignments the oracle will enumerate.
pub const MAX_ASSIGNMENTS: u64 = 1 << 24;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GroundTruth {
    pub leaky_mem_sites: BTreeSet<u32>,
    pub leaky_branch_sites: BTreeSet<u32>,
    /// Registers whose final value is distributed differently for some two
    /// secrets.
    pub nonuniform_vars: BTreeSet<Reg>,
    pub assignments: u64,
}

/// Order in which secrets are enumerated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EnumOrder {
    #[default]
    Natural,
    Reversed,
    Shuffled(u64),
}

/// Observation distribution of one site under one secret, conditioned on
/// the site executing: each distinct observation with its count, counts
/// divided by their gcd so equal distributions compare equal.
type Dist<T> = Vec<(Vec<T>, u64)>;

fn reduce<T: Ord + Clone>(runs: Vec<Vec<T>>) -> Option<Dist<T>> {
    let mut counts: BTreeMap<Vec<T>, u64> = BTreeMap::new();
    for o in runs.into_iter().filter(|o| !o.is_empty()) {
        *counts.entry(o).or_default() += 1;
    }
    let g = counts.values().copied().reduce(gcd)?;
    Some(counts.into_iter().map(|(o, c)| (o, c / g)).collect())
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 { a } else { gcd(b, a % b) }
}

#[derive(Debug, Default, Clone, PartialEq, Eq)]
struct Signature {
    mem: BTreeMap<u32, Dist<u32>>,
    branch: BTreeMap<u32, Dist<bool>>,
    regs: [Vec<u32>; 8],
}

fn check_feasible(p: &OracleProgram) -> Result<(), OracleError> {
    let (s, r) = (p.secret_bits(), p.random_bits());
    if s + r > 24 || (1u64 << (s + r)) > MAX_ASSIGNMENTS {
        return Err(OracleError::Infeasible {
            secret_bits: s,
            random_bits: r,
        });
    }
    Ok(())
}

/// Per-site observations of one secret over every random assignment.
fn signature(p: &OracleProgram, secret: u32, g: CacheGeometry) -> Result<Signature, OracleError> {
    let runs = 1u32 << p.random_bits();
    let mut mem: BTreeMap<u32, Vec<Vec<u32>>> = BTreeMap::new();
    let mut branch: BTreeMap<u32, Vec<Vec<bool>>> = BTreeMap::new();
    let mut regs: [Vec<u32>; 8] = Default::default();
    for random in 0..runs {
        let mut m_obs: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
        let mut b_obs: BTreeMap<u32, Vec<bool>> = BTreeMap::new();
        let end = p.execute(secret, random, |s| {
            for a in &s.effect.accesses {
                m_obs.entry(s.addr).or_default().push(g.cache_line(a.addr));
            }
            if let Some(t) = s.effect.taken {
                b_obs.entry(s.addr).or_default().push(t);
            }
        })?;
        for (site, o) in m_obs {
            mem.entry(site).or_default().push(o);
        }
        for (site, o) in b_obs {
            branch.entry(site).or_default().push(o);
        }
        for r in Reg::ALL {
            regs[r.index()].push(end.regs.get(r));
        }
    }
    regs.iter_mut().for_each(|v| v.sort_unstable());
    Ok(Signature {
        mem: mem.into_iter().filter_map(|(k, v)| Some((k, reduce(v)?))).collect(),
        branch: branch.into_iter().filter_map(|(k, v)| Some((k, reduce(v)?))).collect(),
        regs,
    })
}

/// First distribution seen per site, and the sites where two differed.
#[derive(Default)]
struct Sites<T> {
    first: BTreeMap<u32, Dist<T>>,
    leaky: BTreeSet<u32>,
}

impl<T: PartialEq> Sites<T> {
    fn add(&mut self, site: u32, d: Dist<T>) {
        match self.first.get(&site) {
            Some(f) if *f != d => {
                self.leaky.insert(site);
            }
            Some(_) => {}
            None => {
                self.first.insert(site, d);
            }
        }
    }

    fn merge(&mut self, o: Sites<T>) {
        self.leaky.extend(o.leaky);
        for (site, d) in o.first {
            self.add(site, d);
        }
    }
}

pub fn enumerate_leakage(p: &OracleProgram, g: CacheGeometry, table: &BranchTable) -> Result<GroundTruth, OracleError> {
    enumerate_leakage_ordered(p, g, table, EnumOrder::Natural)
}

type Partial = (Sites<u32>, Sites<bool>, Option<[Vec<u32>; 8]>, BTreeSet<Reg>);

/// Enumerates every assignment. A site leaks when two secrets that both
/// reach it see different distributions there; whether it is reached at all
/// is the enclosing branch's leak. The result does not depend on `order`.
pub fn enumerate_leakage_ordered(
    p: &OracleProgram,
    g: CacheGeometry,
    table: &BranchTable,
    order: EnumOrder,
) -> Result<GroundTruth, OracleError> {
    check_feasible(p)?;
    let mut secrets: Vec<u32> = (0..1u32 << p.secret_bits()).collect();
    match order {
        EnumOrder::Natural => {}
        EnumOrder::Reversed => secrets.reverse(),
        EnumOrder::Shuffled(seed) => secrets.shuffle(&mut ChaCha8Rng::seed_from_u64(seed)),
    }
    let runs = 1usize << p.random_bits();
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(secrets.len());
    let chunk = secrets.len().div_ceil(threads);
    let partial: Vec<Result<Partial, OracleError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = secrets
            .chunks(chunk.max(1))
            .map(|ks| {
                scope.spawn(move || {
                    let (mut mem, mut br) = (Sites::default(), Sites::default());
                    let mut regs: Option<[Vec<u32>; 8]> = None;
                    let mut vars = BTreeSet::new();
                    for k in ks {
                        let s = signature(p, *k, g)?;
                        s.mem.into_iter().for_each(|(site, d)| mem.add(site, d));
                        s.branch.into_iter().for_each(|(site, d)| br.add(site, d));
                        match &regs {
                            None => regs = Some(s.regs),
                            Some(first) => vars.extend(Reg::ALL.into_iter().filter(|r| first[r.index()] != s.regs[r.index()])),
                        }
                    }
                    Ok((mem, br, regs, vars))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("enumeration thread panicked")).collect()
    });

    let mut truth = GroundTruth {
        assignments: (secrets.len() * runs) as u64,
        ..GroundTruth::default()
    };
    let (mut mem, mut br) = (Sites::default(), Sites::<bool>::default());
    let mut regs: Option<[Vec<u32>; 8]> = None;
    for part in partial {
        let (m, b, r, vars) = part?;
        mem.merge(m);
        br.merge(b);
        truth.nonuniform_vars.extend(vars);
        if let Some(r) = r {
            match &regs {
                None => regs = Some(r),
                Some(first) => truth
                    .nonuniform_vars
                    .extend(Reg::ALL.into_iter().filter(|x| first[x.index()] != r[x.index()])),
            }
        }
    }
    truth.leaky_mem_sites = mem.leaky;
    truth.leaky_branch_sites = br.leaky;
    truth
        .leaky_branch_sites
        .retain(|site| table.get(*site).is_none_or(|e| e.distinguishable(g)));
    Ok(truth)
}

/// True iff, for every secret, the multiset of `var`'s values after record
/// `at_seq` over all random assignments is the same. Runs that end before
/// `at_seq` contribute a distinct "absent" value.
pub fn check_uniform(p: &OracleProgram, var: RegRef, at_seq: u64) -> Result<bool, OracleError> {
    check_feasible(p)?;
    let dist = |secret: u32| -> Result<Vec<Option<u32>>, OracleError> {
        let mut out = Vec::with_capacity(1 << p.random_bits());
        for random in 0..1u32 << p.random_bits() {
            let mut v = None;
            p.execute(secret, random, |s| {
                if s.seq == at_seq {
                    v = Some(s.after.regs.read(var));
                }
            })?;
            out.push(v);
        }
        out.sort_unstable();
        Ok(out)
    };
    let first = dist(0)?;
    for k in 1..1u32 << p.secret_bits() {
        if dist(k)? != first {
            return Ok(false);
        }
    }
    Ok(true)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SiteKind {
    Mem,
    Branch,
}

impl std::fmt::Display for SiteKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SiteKind::Mem => "memory",
            SiteKind::Branch => "branch",
        })
    }
}

/// A truly leaky site the report missed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Miss {
    pub kind: SiteKind,
    pub addr: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verdict {
    pub sound: bool,
    pub false_negatives: Vec<Miss>,
    /// Reported sites the oracle found not leaky.
    pub false_positives: Vec<u32>,
}

/// Sound iff every leaky memory site is an SDMA finding and every leaky
/// branch is an SDBC (or layout-unknown) finding.
pub fn compare(report: &Report, truth: &GroundTruth) -> Verdict {
    let sdma: BTreeSet<u32> = report.sites(FindingKind::Sdma).into_iter().collect();
    let sdbc: BTreeSet<u32> = report
        .findings
        .iter()
        .filter(|f| f.kind != FindingKind::Sdma)
        .map(|f| f.site_addr)
        .collect();
    let mut misses: Vec<Miss> = truth
        .leaky_mem_sites
        .difference(&sdma)
        .map(|a| Miss {
            kind: SiteKind::Mem,
            addr: *a,
        })
        .collect();
    misses.extend(truth.leaky_branch_sites.difference(&sdbc).map(|a| Miss {
        kind: SiteKind::Branch,
        addr: *a,
    }));
    let mut fps: Vec<u32> = sdma
        .difference(&truth.leaky_mem_sites)
        .chain(sdbc.difference(&truth.leaky_branch_sites))
        .copied()
        .collect();
    fps.sort_unstable();
    fps.dedup();
    Verdict {
        sound: misses.is_empty(),
        false_negatives: misses,
        false_positives: fps,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::program::parse_program;
    use proptest::prelude::*;

    fn g() -> CacheGeometry {
        CacheGeometry::default()
    }

    fn truth(src: &str) -> GroundTruth {
        let p = parse_program(src).unwrap();
        enumerate_leakage(&p, g(), &p.table).unwrap()
    }

    #[test]
    fn line_indexed_load_leaks() {
        let t = truth(
            "SLOT secret 0 mem 0x2000 0\n\
             I 0x10 movzx eax,byte [0x2000]\n\
             I 0x14 shl eax,0x6\n\
             I 0x17 mov bl,byte [eax+0x10000]\n",
        );
        assert_eq!(t.leaky_mem_sites, BTreeSet::from([0x17]));
        assert_eq!(t.assignments, 2);
    }

    #[test]
    fn offset_only_load_does_not_leak() {
        let t = truth(
            "SLOT secret 0 mem 0x2000 0\nSLOT secret 1 mem 0x2000 5\n\
             I 0x10 movzx eax,byte [0x2000]\n\
             I 0x14 and eax,0x3f\n\
             I 0x17 mov bl,byte [eax+0x10000]\n",
        );
        assert!(t.leaky_mem_sites.is_empty());
        assert!(t.nonuniform_vars.contains(&Reg::Eax));
    }

    #[test]
    fn masked_compare_never_branches() {
        let src = "SLOT secret 0 mem 0x2000 0\nSLOT secret 1 mem 0x2000 3\nSLOT secret 2 mem 0x2000 7\n\
             BC 0x1a 0x1c 0x40 0x80\n\
             I 0x10 movzx eax,byte [0x2000]\n\
             I 0x14 and eax,0x7\n\
             I 0x17 cmp eax,0x28\n\
             I 0x1a ja 0x40\n";
        // `ja` is not in the supported set; use the signed form
        assert!(parse_program(src).is_err());
        let t = truth(&src.replace("ja 0x40", "jge 0x40"));
        assert!(t.leaky_branch_sites.is_empty());
        let t = truth(&src.replace("and eax,0x7", "and eax,0xff").replace("ja 0x40", "jge 0x40"));
        assert_eq!(t.leaky_branch_sites, BTreeSet::from([0x1a]));
    }

    #[test]
    fn indistinguishable_branches_are_not_leaky() {
        let t = truth(
            "SLOT secret 0 mem 0x2000 0\nBC 0x16 0x18 0x20 0x30\n\
             I 0x10 test byte [0x2000],0x1\n\
             I 0x16 je 0x20\n\
             I 0x18 jmp 0x30\n\
             I 0x20 jmp 0x30\n\
             I 0x30 mov eax,0x0\n",
        );
        assert!(t.leaky_branch_sites.is_empty());
    }

    #[test]
    fn reaching_a_site_is_the_branch_leak() {
        // the load at 0x18 runs only for one secret, always on the same line
        let t = truth(
            "SLOT secret 0 mem 0x2000 0\nBC 0x16 0x18 0x48 0x50\n\
             I 0x10 movzx eax,byte [0x2000]\n\
             I 0x14 test eax,eax\n\
             I 0x16 je 0x48\n\
             I 0x18 mov ebx,dword [0x3000]\n\
             I 0x48 mov ecx,0x1\n",
        );
        assert!(t.leaky_mem_sites.is_empty());
        assert_eq!(t.leaky_branch_sites, BTreeSet::from([0x16]));
    }

    const XOR_MASK: &str ="SLOT secret 0 mem 0x2000 0\nSLOT random 0 mem 0x3000 0\n\
        I 0x10 movzx eax,byte [0x2000]\n\
        I 0x14 movzx ebx,byte [0x3000]\n\
        I 0x18 xor eax,ebx\n";

    #[test]
    fn uniformity_examples() {
        let p = parse_program(XOR_MASK).unwrap();
        let eax = RegRef::full(Reg::Eax);
        assert!(check_uniform(&p, eax, 2).unwrap());
        assert!(!check_uniform(&p, eax, 1).unwrap());
        let and = parse_program(&XOR_MASK.replace("xor eax,ebx", "and eax,ebx")).unwrap();
        assert!(!check_uniform(&and, eax, 2).unwrap());
        let reuse = parse_program(&format!("{XOR_MASK}I 0x1c xor eax,ebx\n")).unwrap();
        assert!(!check_uniform(&reuse, eax, 3).unwrap());
        // constant variables are trivially uniform
        assert!(check_uniform(&p, RegRef::full(Reg::Ecx), 2).unwrap());
    }

    #[test]
    fn no_randomness_means_secret_dependence_is_nonuniform() {
        let p = parse_program("SLOT secret 0 reg eax 0\nI 0x0 mov ebx,eax\nI 0x2 mov ecx,0x5").unwrap();
        assert!(!check_uniform(&p, RegRef::full(Reg::Ebx), 0).unwrap());
        assert!(check_uniform(&p, RegRef::full(Reg::Ecx), 1).unwrap());
    }

    #[test]
    fn refuses_oversized_enumeration() {
        let mut src = String::new();
        for i in 0..16 {
            src += &format!("SLOT secret {i} reg eax {i}\nSLOT random {i} reg ebx {i}\n");
        }
        let p = parse_program(&src).unwrap();
        assert!(matches!(
            enumerate_leakage(&p, g(), &p.table),
            Err(OracleError::Infeasible { .. })
        ));
    }

    fn report_with(sites: &[(FindingKind, u32)]) -> Report {
        let findings = sites
            .iter()
            .map(|(k, a)| crate::detector::Finding {
                kind: *k,
                site_addr: *a,
                seq: 0,
                evidence: String::new(),
                lines: vec![],
                hits: 1,
            })
            .collect();
        Report {
            findings,
            units: vec![],
            stats: crate::detector::Stats {
                sdma: 0,
                sdbc: 0,
                sdbc_layout_unknown: 0,
                sites: 0,
                units: 0,
                trace_len: 0,
                tainted_records: 0,
                elapsed_ms: 0.0,
            },
            diagnostics: vec![],
        }
    }

    #[test]
    fn compare_examples() {
        let truth = GroundTruth {
            leaky_mem_sites: BTreeSet::from([0x10]),
            leaky_branch_sites: BTreeSet::from([0x20]),
            ..GroundTruth::default()
        };
        let v = compare(&report_with(&[(FindingKind::Sdma, 0x10), (FindingKind::Sdbc, 0x20)]), &truth);
        assert!(v.sound);
        let v = compare(&report_with(&[(FindingKind::Sdma, 0x10)]), &truth);
        assert_eq!(
            v.false_negatives,
            vec![Miss {
                kind: SiteKind::Branch,
                addr: 0x20
            }]
        );
        let v = compare(
            &report_with(&[(FindingKind::Sdma, 0x10), (FindingKind::SdbcLayoutUnknown, 0x20), (FindingKind::Sdma, 0x30)]),
            &truth,
        );
        assert!(v.sound);
        assert_eq!(v.false_positives, vec![0x30]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn enumeration_order_is_irrelevant(seed in any::<u64>(), shift in 0u32..8) {
            let src = format!(
                "SLOT secret 0 mem 0x2000 0\nSLOT secret 1 mem 0x2000 1\nSLOT secret 2 mem 0x2000 2\n\
                 SLOT random 0 mem 0x3000 0\nSLOT random 1 mem 0x3000 1\n\
                 I 0x10 movzx eax,byte [0x2000]\n\
                 I 0x14 movzx ebx,byte [0x3000]\n\
                 I 0x18 xor eax,ebx\n\
                 I 0x1a shl eax,{shift:#x}\n\
                 I 0x1d mov cl,byte [eax+0x10000]\n\
                 I 0x20 cmp eax,0x40\n\
                 I 0x23 jl 0x30\n\
                 I 0x30 mov edx,eax\n"
            );
            let p = parse_program(&src).unwrap();
            let a = enumerate_leakage_ordered(&p, g(), &p.table, EnumOrder::Natural).unwrap();
            let b = enumerate_leakage_ordered(&p, g(), &p.table, EnumOrder::Reversed).unwrap();
            let c = enumerate_leakage_ordered(&p, g(), &p.table, EnumOrder::Shuffled(seed)).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(&a, &c);
        }

        #[test]
        fn adding_findings_never_removes_soundness(
            mem in prop::collection::btree_set(0u32..16, 0..6),
            br in prop::collection::btree_set(16u32..32, 0..6),
            found in prop::collection::vec((any::<bool>(), 0u32..32), 0..12),
            extra in (any::<bool>(), 0u32..32),
        ) {
            let truth = GroundTruth { leaky_mem_sites: mem, leaky_branch_sites: br, ..GroundTruth::default() };
            let kind = |b: bool| if b { FindingKind::Sdma } else { FindingKind::Sdbc };
            let mut sites: Vec<(FindingKind, u32)> = found.iter().map(|(b, a)| (kind(*b), *a)).collect();
            let before = compare(&report_with(&sites), &truth);
            sites.push((kind(extra.0), extra.1));
            let after = compare(&report_with(&sites), &truth);
            prop_assert!(!before.sound || after.sound);
            prop_assert!(after.false_negatives.len() <= before.false_negatives.len());
        }
    }
}
