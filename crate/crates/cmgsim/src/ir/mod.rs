//! Loop-kernel workload IR: typed vector/scalar operations with declarative
//! memory patterns, thread partitioning, region markers, generators for the
//! kernel suite and Stream Triad, and micro-op expansion.
//!
//! Semantics are timing-only: loop control and predicates are evaluated but
//! floating-point values are never computed; indexed patterns derive their
//! addresses from a seeded generator instead of data.

mod expand;
mod gen;
mod parse;

pub use expand::{expand_microops, AddrCtx, MemRange, MicroOp, UnitClass};
pub use gen::{
    fadd_chain, ffma_flood, gather_stream, gen_kernel, gen_triad, load_stream, store_stream,
    triad_elems_l2, triad_elems_mem, KernelSpec, KERNEL_NAMES, TRIAD_SCALE,
};
pub use parse::{parse_kernel, render_kernel};

use thiserror::Error;

/// Instruction grouping that keys latency, unit assignment and statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum OpClass {
    LoadV,
    StoreV,
    LoadS,
    StoreS,
    GatherV,
    ScatterV,
    PrefetchRead,
    PrefetchWrite,
    FAdd,
    FSub,
    FMul,
    FFma,
    FRecipEst,
    FSqrtEst,
    FDiv,
    FCvt,
    ICvt,
    FAbs,
    FMax,
    FMin,
    FSign,
    Branch,
    IntAlu,
}

impl OpClass {
    pub const ALL: &'static [OpClass] = &[
        OpClass::LoadV,
        OpClass::StoreV,
        OpClass::LoadS,
        OpClass::StoreS,
        OpClass::GatherV,
        OpClass::ScatterV,
        OpClass::PrefetchRead,
        OpClass::PrefetchWrite,
        OpClass::FAdd,
        OpClass::FSub,
        OpClass::FMul,
        OpClass::FFma,
        OpClass::FRecipEst,
        OpClass::FSqrtEst,
        OpClass::FDiv,
        OpClass::FCvt,
        OpClass::ICvt,
        OpClass::FAbs,
        OpClass::FMax,
        OpClass::FMin,
        OpClass::FSign,
        OpClass::Branch,
        OpClass::IntAlu,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpClass::LoadV => "load_v",
            OpClass::StoreV => "store_v",
            OpClass::LoadS => "load_s",
            OpClass::StoreS => "store_s",
            OpClass::GatherV => "gather_v",
            OpClass::ScatterV => "scatter_v",
            OpClass::PrefetchRead => "prefetch_read",
            OpClass::PrefetchWrite => "prefetch_write",
            OpClass::FAdd => "fadd",
            OpClass::FSub => "fsub",
            OpClass::FMul => "fmul",
            OpClass::FFma => "ffma",
            OpClass::FRecipEst => "frecip_est",
            OpClass::FSqrtEst => "fsqrt_est",
            OpClass::FDiv => "fdiv",
            OpClass::FCvt => "fcvt",
            OpClass::ICvt => "icvt",
            OpClass::FAbs => "fabs",
            OpClass::FMax => "fmax",
            OpClass::FMin => "fmin",
            OpClass::FSign => "fsign",
            OpClass::Branch => "branch",
            OpClass::IntAlu => "int_alu",
        }
    }

    pub fn from_name(s: &str) -> Option<OpClass> {
        OpClass::ALL.iter().copied().find(|op| op.name() == s)
    }

    pub fn is_memory(self) -> bool {
        matches!(
            self,
            OpClass::LoadV
                | OpClass::StoreV
                | OpClass::LoadS
                | OpClass::StoreS
                | OpClass::GatherV
                | OpClass::ScatterV
                | OpClass::PrefetchRead
                | OpClass::PrefetchWrite
        )
    }

    pub fn is_store_kind(self) -> bool {
        matches!(self, OpClass::StoreV | OpClass::StoreS | OpClass::ScatterV)
    }

    pub fn is_prefetch(self) -> bool {
        matches!(self, OpClass::PrefetchRead | OpClass::PrefetchWrite)
    }

    /// Elements are addressed one (or, combined, two) at a time.
    pub fn is_per_element(self) -> bool {
        matches!(self, OpClass::GatherV | OpClass::ScatterV)
    }
}

/// Virtual register id, renamed at dispatch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VReg(pub u16);

/// Lane mask over a vector instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PredicateMask(pub u16);

impl PredicateMask {
    pub fn full(lanes: u8) -> Self {
        PredicateMask(((1u32 << lanes) - 1) as u16)
    }
    pub fn popcount(self) -> u32 {
        self.0.count_ones()
    }
    pub fn lane(self, lane: u8) -> bool {
        self.0 >> lane & 1 == 1
    }
}

/// Declarative access pattern of a memory instruction. Element indices are
/// relative to the loop induction value of `var_depth`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MemPattern {
    /// Lanes cover consecutive elements starting at induction + offset.
    Contiguous { elem_offset: i64, lines_ahead: u32 },
    /// Lane j touches element induction + offset + j * stride.
    Strided { elem_offset: i64, stride_elems: u32 },
    /// Lane addresses come from a seeded pseudo-random permutation window.
    Indexed { seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemRef {
    pub array: u16,
    /// Index into the loop nest (0 = outermost) whose induction value
    /// anchors the pattern.
    pub var_depth: u8,
    pub pattern: MemPattern,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instruction {
    pub op: OpClass,
    pub width_bits: u8,
    pub lanes: u8,
    pub pred: Option<u8>,
    pub dst: Option<VReg>,
    pub srcs: Vec<VReg>,
    pub mem: Option<MemRef>,
}

impl Instruction {
    pub fn active_mask(&self, preds: &[PredicateMask]) -> PredicateMask {
        let full = PredicateMask::full(self.lanes);
        match self.pred {
            Some(p) => PredicateMask(preds[p as usize].0 & full.0),
            None => full,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArrayDecl {
    pub name: String,
    pub elem_bytes: u32,
    pub len: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoopSpec {
    pub var: String,
    pub lo: i64,
    pub hi: i64,
    pub step: i64,
}

impl LoopSpec {
    pub fn iterations(&self) -> u64 {
        if self.hi <= self.lo {
            0
        } else {
            ((self.hi - self.lo) as u64).div_ceil(self.step as u64)
        }
    }
}

/// One node of the program body tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProgramItem {
    Instr(Instruction),
    Loop(LoopSpec, Vec<ProgramItem>),
    RegionBegin(String),
    RegionEnd(String),
}

/// A complete workload: arrays, predicate registers, a body tree and a
/// thread count. The innermost loop's iteration space is block-partitioned
/// across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelProgram {
    pub name: String,
    pub arrays: Vec<ArrayDecl>,
    pub preds: Vec<PredicateMask>,
    pub items: Vec<ProgramItem>,
    pub threads: u32,
}

#[derive(Debug, Error)]
pub enum IrError {
    #[error("line {line}: syntax error: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: undeclared array {name}")]
    UndeclaredArray { line: usize, name: String },
    #[error("line {line}: {msg}")]
    Invalid { line: usize, msg: String },
    #[error("invalid program:\n{}", problems.join("\n"))]
    Validation { problems: Vec<String> },
    #[error("unknown kernel id `{0}`")]
    UnknownKernel(String),
    #[error("program requests {requested} threads but only {available} cores are configured")]
    TooManyThreads { requested: u32, available: u32 },
}

impl KernelProgram {
    pub fn array_index(&self, name: &str) -> Option<u16> {
        self.arrays
            .iter()
            .position(|a| a.name == name)
            .map(|i| i as u16)
    }

    /// Total bytes declared across all arrays.
    pub fn footprint_bytes(&self) -> u64 {
        self.arrays
            .iter()
            .map(|a| a.elem_bytes as u64 * a.len)
            .sum()
    }

    /// Byte base of each array (and total span) with arrays packed
    /// line-aligned into one flat address space.
    pub fn layout(&self, line_bytes: u64) -> (Vec<u64>, u64) {
        let mut bases = Vec::with_capacity(self.arrays.len());
        let mut cursor = 0u64;
        for a in &self.arrays {
            bases.push(cursor);
            let sz = a.elem_bytes as u64 * a.len;
            cursor += sz.div_ceil(line_bytes) * line_bytes;
        }
        (bases, cursor)
    }

    /// Innermost loop iteration range owned by `thread`, as a [lo, hi)
    /// iteration-index pair over the innermost loop of `loop_path`. Block
    /// split; any remainder is spread one iteration at a time from thread 0.
    pub fn partition(&self, total_iters: u64, thread: u32) -> (u64, u64) {
        let t = self.threads as u64;
        let base = total_iters / t;
        let rem = total_iters % t;
        let th = thread as u64;
        let lo = th * base + th.min(rem);
        let hi = lo + base + if th < rem { 1 } else { 0 };
        (lo, hi)
    }

    /// Structural validation; returns human-readable problems.
    pub fn validate(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.threads == 0 {
            out.push("threads must be >= 1".into());
        }
        let mut region_stack: Vec<&str> = Vec::new();
        self.walk(&mut |item, depth, loops| match item {
            ProgramItem::Loop(spec, _) => {
                if spec.step <= 0 {
                    out.push(format!("loop {} step must be > 0", spec.var));
                }
                let _ = (depth, loops);
            }
            ProgramItem::Instr(ins) => {
                let lanes_bits = ins.lanes as u32 * ins.width_bits as u32;
                if lanes_bits > 512 {
                    out.push(format!("{}: lanes x width exceeds 512 bits", ins.op.name()));
                }
                if ins.op.is_memory() != ins.mem.is_some() {
                    out.push(format!(
                        "{}: memory reference presence mismatch",
                        ins.op.name()
                    ));
                }
                if let Some(p) = ins.pred {
                    if p as usize >= self.preds.len() {
                        out.push(format!("{}: undefined predicate p{}", ins.op.name(), p));
                    }
                }
                if let Some(m) = &ins.mem {
                    if m.array as usize >= self.arrays.len() {
                        out.push("memory op references unknown array".into());
                    } else if m.var_depth as usize >= loops.len() {
                        out.push("memory op references missing loop var".into());
                    } else if let Some(msg) = check_bounds(self, ins, m, loops) {
                        out.push(msg);
                    }
                }
            }
            ProgramItem::RegionBegin(l) => region_stack.push(l),
            ProgramItem::RegionEnd(l) => {
                if region_stack.pop().map(|b| b == l.as_str()) != Some(true) {
                    out.push(format!("region end `{l}` without matching begin"));
                }
            }
        });
        if let Some(open) = region_stack.last() {
            out.push(format!("region `{open}` never ends"));
        }
        out
    }

    /// Depth-first walk carrying the enclosing loop stack.
    pub fn walk<'a, F: FnMut(&'a ProgramItem, usize, &[&'a LoopSpec])>(&'a self, f: &mut F) {
        fn rec<'a, F: FnMut(&'a ProgramItem, usize, &[&'a LoopSpec])>(
            items: &'a [ProgramItem],
            loops: &mut Vec<&'a LoopSpec>,
            f: &mut F,
        ) {
            for item in items {
                f(item, loops.len(), loops);
                if let ProgramItem::Loop(spec, body) = item {
                    loops.push(spec);
                    rec(body, loops, f);
                    loops.pop();
                }
            }
        }
        rec(&self.items, &mut Vec::new(), f);
    }

    /// Dynamic instruction count per thread: body instructions plus the
    /// synthetic induction update and back-edge branch per loop iteration.
    /// Only the innermost loop is partitioned.
    pub fn dynamic_count(&self, thread: u32) -> u64 {
        count_items(self, &self.items, thread, false)
    }

    pub fn total_dynamic_count(&self) -> u64 {
        (0..self.threads).map(|t| self.dynamic_count(t)).sum()
    }
}

fn innermost(items: &[ProgramItem]) -> bool {
    !items
        .iter()
        .any(|it| matches!(it, ProgramItem::Loop(_, _)))
}

fn count_items(prog: &KernelProgram, items: &[ProgramItem], thread: u32, partitioned: bool) -> u64 {
    let mut n = 0;
    for item in items {
        match item {
            ProgramItem::Instr(_) => n += 1,
            ProgramItem::RegionBegin(_) | ProgramItem::RegionEnd(_) => {}
            ProgramItem::Loop(spec, body) => {
                let iters = if innermost(body) && !partitioned {
                    let (lo, hi) = prog.partition(spec.iterations(), thread);
                    hi - lo
                } else {
                    spec.iterations()
                };
                // +2: induction update and back-edge branch.
                n += iters * (count_items(prog, body, thread, true) + 2);
            }
        }
    }
    n
}

fn check_bounds(
    prog: &KernelProgram,
    ins: &Instruction,
    m: &MemRef,
    loops: &[&LoopSpec],
) -> Option<String> {
    let arr = &prog.arrays[m.array as usize];
    let spec = loops[m.var_depth as usize];
    let last_iter = spec.lo + spec.step * (spec.iterations() as i64 - 1).max(0);
    let (min_elem, max_elem) = match m.pattern {
        MemPattern::Contiguous { elem_offset, lines_ahead } => {
            // Prefetch look-ahead is clamped at run time, not a bounds error.
            if lines_ahead > 0 {
                return None;
            }
            (
                spec.lo + elem_offset,
                last_iter + elem_offset + ins.lanes as i64 - 1,
            )
        }
        MemPattern::Strided { elem_offset, stride_elems } => (
            spec.lo + elem_offset,
            last_iter + elem_offset + (ins.lanes as i64 - 1) * stride_elems as i64,
        ),
        MemPattern::Indexed { .. } => return None,
    };
    if min_elem < 0 || max_elem as u64 >= arr.len {
        Some(format!(
            "{} on `{}` touches elements {min_elem}..={max_elem}, array length {}",
            ins.op.name(),
            arr.name,
            arr.len
        ))
    } else {
        None
    }
}

/// Deterministic address scrambler for Indexed patterns.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn predicate_mask_basics() {
        assert_eq!(PredicateMask::full(8).0, 0xff);
        assert_eq!(PredicateMask(0b1011_0111).popcount(), 6);
        assert!(PredicateMask(0b10).lane(1));
        assert!(!PredicateMask(0b10).lane(0));
    }

    #[test]
    fn partition_is_balanced() {
        let mut prog = gen_triad(2048, 4, None).unwrap();
        prog.threads = 4;
        let sizes: Vec<u64> = (0..4)
            .map(|t| {
                let (lo, hi) = prog.partition(100, t);
                hi - lo
            })
            .collect();
        assert_eq!(sizes.iter().sum::<u64>(), 100);
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn splitmix_is_stable() {
        assert_eq!(splitmix64(0), splitmix64(0));
        assert_ne!(splitmix64(1), splitmix64(2));
    }
}
