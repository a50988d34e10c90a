//! Expansion of instructions into micro-ops with concrete address ranges.
//!
//! Non-memory ops become a single µop on their unit. Contiguous memory ops
//! become one address-generation µop (stores add a data µop); per-element
//! ops (gathers, scatters, strided accesses) expand per active lane, or per
//! lane pair when combined gather is enabled.

use super::{Instruction, KernelProgram, MemPattern, OpClass, PredicateMask, splitmix64};
use crate::config::SimConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnitClass {
    Agen,
    FpSimd,
    Int,
    Branch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemRange {
    pub addr: u64,
    pub bytes: u32,
}

/// Byte footprint of one memory µop. A combined gather pair may touch two
/// disjoint ranges in one access.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemAccess {
    pub first: MemRange,
    pub second: Option<MemRange>,
}

impl MemAccess {
    pub fn one(addr: u64, bytes: u32) -> Self {
        MemAccess {
            first: MemRange { addr, bytes },
            second: None,
        }
    }
    pub fn ranges(&self) -> impl Iterator<Item = MemRange> + '_ {
        std::iter::once(self.first).chain(self.second)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MicroOp {
    pub slot: u8,
    pub unit: UnitClass,
    /// Lane subset this µop covers.
    pub lanes: PredicateMask,
    /// Present on address-generation µops of memory instructions.
    pub mem: Option<MemAccess>,
}

/// Address-resolution context for one dynamic instance of an instruction.
pub struct AddrCtx<'a> {
    pub prog: &'a KernelProgram,
    /// Byte base of each array in the flat simulated address space.
    pub bases: &'a [u64],
    /// Induction values of the enclosing loops, outermost first.
    pub ind: [i64; 4],
    pub line_bytes: u64,
}

impl AddrCtx<'_> {
    fn elem_addr(&self, array: u16, elem: i64) -> u64 {
        let a = &self.prog.arrays[array as usize];
        self.bases[array as usize] + elem as u64 * a.elem_bytes as u64
    }

    fn lane_elem(&self, m: &super::MemRef, lane: u8) -> i64 {
        let ind = self.ind[m.var_depth as usize];
        let a = &self.prog.arrays[m.array as usize];
        match m.pattern {
            MemPattern::Contiguous { elem_offset, .. } => ind + elem_offset + lane as i64,
            MemPattern::Strided { elem_offset, stride_elems } => {
                ind + elem_offset + lane as i64 * stride_elems as i64
            }
            MemPattern::Indexed { seed } => {
                let h = splitmix64(seed ^ ((ind as u64) << 8) ^ lane as u64);
                (h % a.len) as i64
            }
        }
    }
}

pub fn unit_of(op: OpClass) -> UnitClass {
    match op {
        OpClass::IntAlu => UnitClass::Int,
        OpClass::Branch => UnitClass::Branch,
        op if op.is_memory() => UnitClass::Agen,
        _ => UnitClass::FpSimd,
    }
}

/// True when the pattern addresses elements one at a time.
fn per_element(instr: &Instruction) -> bool {
    if instr.op.is_per_element() {
        return true;
    }
    matches!(
        instr.mem,
        Some(super::MemRef {
            pattern: MemPattern::Strided { stride_elems, .. },
            ..
        }) if stride_elems > 1
    )
}

/// Expands one dynamic instruction instance into its ordered µop list.
pub fn expand_microops(instr: &Instruction, cfg: &SimConfig, ctx: &AddrCtx) -> Vec<MicroOp> {
    let active = instr.active_mask(&ctx.prog.preds);
    if !instr.op.is_memory() {
        return vec![MicroOp {
            slot: 0,
            unit: unit_of(instr.op),
            lanes: active,
            mem: None,
        }];
    }
    let m = instr.mem.as_ref().expect("memory op without mem ref");
    let mut ops = Vec::new();
    if instr.op.is_prefetch() {
        // Line-granular; look-ahead clamps to the array extent.
        let lines_ahead = match m.pattern {
            MemPattern::Contiguous { lines_ahead, .. } => lines_ahead,
            _ => 0,
        };
        let a = &ctx.prog.arrays[m.array as usize];
        let base = ctx.bases[m.array as usize];
        let end = base + a.elem_bytes as u64 * a.len;
        let target = ctx.elem_addr(m.array, ctx.lane_elem(m, 0).max(0))
            + lines_ahead as u64 * ctx.line_bytes;
        let line = (target.min(end.saturating_sub(1)) / ctx.line_bytes) * ctx.line_bytes;
        ops.push(MicroOp {
            slot: 0,
            unit: UnitClass::Agen,
            lanes: active,
            mem: Some(MemAccess::one(line, ctx.line_bytes as u32)),
        });
        return ops;
    }
    let esz = (instr.width_bits / 8) as u32;
    let lanes_active: Vec<u8> = (0..instr.lanes).filter(|&l| active.lane(l)).collect();
    if lanes_active.is_empty() {
        // Timing is still charged, but no memory is touched.
        ops.push(MicroOp {
            slot: 0,
            unit: UnitClass::Agen,
            lanes: active,
            mem: None,
        });
    } else if per_element(instr) {
        let combine = cfg.flags.combined_gather && instr.op == OpClass::GatherV;
        let group = if combine { 2 } else { 1 };
        for (slot, pair) in lanes_active.chunks(group).enumerate() {
            let mut mask = 0u16;
            for &l in pair {
                mask |= 1 << l;
            }
            let first = MemRange {
                addr: ctx.elem_addr(m.array, ctx.lane_elem(m, pair[0])),
                bytes: esz,
            };
            let second = pair.get(1).map(|&l| MemRange {
                addr: ctx.elem_addr(m.array, ctx.lane_elem(m, l)),
                bytes: esz,
            });
            ops.push(MicroOp {
                slot: slot as u8,
                unit: UnitClass::Agen,
                lanes: PredicateMask(mask),
                mem: Some(MemAccess { first, second }),
            });
        }
    } else {
        // Contiguous span over the active lanes.
        let first = *lanes_active.first().unwrap();
        let last = *lanes_active.last().unwrap();
        let start = ctx.elem_addr(m.array, ctx.lane_elem(m, first));
        let bytes = (last - first + 1) as u32 * esz;
        let crosses = (start / ctx.line_bytes) != ((start + bytes as u64 - 1) / ctx.line_bytes);
        if crosses && !cfg.flags.split_line_access_free {
            // Pre-split into two sequential line-local accesses.
            let boundary = (start / ctx.line_bytes + 1) * ctx.line_bytes;
            let first_bytes = (boundary - start) as u32;
            let mut lo_mask = 0u16;
            let mut hi_mask = 0u16;
            for &l in &lanes_active {
                let addr = ctx.elem_addr(m.array, ctx.lane_elem(m, l));
                if addr < boundary {
                    lo_mask |= 1 << l;
                } else {
                    hi_mask |= 1 << l;
                }
            }
            ops.push(MicroOp {
                slot: 0,
                unit: UnitClass::Agen,
                lanes: PredicateMask(lo_mask),
                mem: Some(MemAccess::one(start, first_bytes)),
            });
            ops.push(MicroOp {
                slot: 1,
                unit: UnitClass::Agen,
                lanes: PredicateMask(hi_mask),
                mem: Some(MemAccess::one(boundary, bytes - first_bytes)),
            });
        } else {
            ops.push(MicroOp {
                slot: 0,
                unit: UnitClass::Agen,
                lanes: active,
                mem: Some(MemAccess::one(start, bytes)),
            });
        }
    }
    if instr.op.is_store_kind() {
        // Write-data µop; ready when the data operand is.
        ops.push(MicroOp {
            slot: ops.len() as u8,
            unit: UnitClass::FpSimd,
            lanes: active,
            mem: None,
        });
    }
    ops
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::preset_a64fx_cmg;
    use crate::ir::{ArrayDecl, MemRef};

    fn test_prog() -> KernelProgram {
        KernelProgram {
            name: "t".into(),
            arrays: vec![ArrayDecl {
                name: "x".into(),
                elem_bytes: 8,
                len: 4096,
            }],
            preds: vec![PredicateMask(0b1011_0111)],
            items: vec![],
            threads: 1,
        }
    }

    fn gather_instr(pred: Option<u8>) -> Instruction {
        Instruction {
            op: OpClass::GatherV,
            width_bits: 64,
            lanes: 8,
            pred,
            dst: Some(super::super::VReg(1)),
            srcs: vec![],
            mem: Some(MemRef {
                array: 0,
                var_depth: 0,
                pattern: MemPattern::Indexed { seed: 7 },
            }),
        }
    }

    #[test]
    fn gather_expands_per_lane() {
        let prog = test_prog();
        let bases = [0u64];
        let ctx = AddrCtx {
            prog: &prog,
            bases: &bases,
            ind: [0; 4],
            line_bytes: 256,
        };
        let mut cfg = preset_a64fx_cmg();
        cfg.flags.combined_gather = false;
        assert_eq!(expand_microops(&gather_instr(None), &cfg, &ctx).len(), 8);
        cfg.flags.combined_gather = true;
        assert_eq!(expand_microops(&gather_instr(None), &cfg, &ctx).len(), 4);
        // 6 active lanes -> 3 pairs.
        assert_eq!(expand_microops(&gather_instr(Some(0)), &cfg, &ctx).len(), 3);
    }

    #[test]
    fn empty_predicate_charges_timing_only() {
        let mut prog = test_prog();
        prog.preds = vec![PredicateMask(0)];
        let bases = [0u64];
        let ctx = AddrCtx {
            prog: &prog,
            bases: &bases,
            ind: [0; 4],
            line_bytes: 256,
        };
        let cfg = preset_a64fx_cmg();
        let fadd = Instruction {
            op: OpClass::FAdd,
            width_bits: 64,
            lanes: 8,
            pred: Some(0),
            dst: Some(super::super::VReg(3)),
            srcs: vec![super::super::VReg(1), super::super::VReg(2)],
            mem: None,
        };
        let ops = expand_microops(&fadd, &cfg, &ctx);
        assert_eq!(ops.len(), 1);
        assert_eq!(ops[0].unit, UnitClass::FpSimd);
        assert!(ops[0].mem.is_none());
        // Predicated-off load: one AGEN µop, no memory footprint.
        let load = Instruction {
            op: OpClass::LoadV,
            width_bits: 64,
            lanes: 8,
            pred: Some(0),
            dst: Some(super::super::VReg(1)),
            srcs: vec![],
            mem: Some(MemRef {
                array: 0,
                var_depth: 0,
                pattern: MemPattern::Contiguous { elem_offset: 0, lines_ahead: 0 },
            }),
        };
        let ops = expand_microops(&load, &cfg, &ctx);
        assert_eq!(ops.len(), 1);
        assert!(ops[0].mem.is_none());
    }

    #[test]
    fn line_crossing_splits_without_flag() {
        let prog = test_prog();
        let bases = [0u64];
        let ctx = AddrCtx {
            prog: &prog,
            bases: &bases,
            ind: [28, 0, 0, 0], // byte 224: a 64 B access spans lines 0 and 1
            line_bytes: 256,
        };
        let load = Instruction {
            op: OpClass::LoadV,
            width_bits: 64,
            lanes: 8,
            pred: None,
            dst: Some(super::super::VReg(1)),
            srcs: vec![],
            mem: Some(MemRef {
                array: 0,
                var_depth: 0,
                pattern: MemPattern::Contiguous { elem_offset: 0, lines_ahead: 0 },
            }),
        };
        let mut cfg = preset_a64fx_cmg();
        cfg.flags.split_line_access_free = true;
        let ops = expand_microops(&load, &cfg, &ctx);
        assert_eq!(ops.len(), 1);
        cfg.flags.split_line_access_free = false;
        let ops = expand_microops(&load, &cfg, &ctx);
        assert_eq!(ops.len(), 2);
        assert_eq!(ops[0].mem.unwrap().first.bytes, 32);
        assert_eq!(ops[1].mem.unwrap().first.bytes, 32);
    }

    #[test]
    fn store_gains_a_data_microop() {
        let prog = test_prog();
        let bases = [0u64];
        let ctx = AddrCtx {
            prog: &prog,
            bases: &bases,
            ind: [0; 4],
            line_bytes: 256,
        };
        let cfg = preset_a64fx_cmg();
        let store = Instruction {
            op: OpClass::StoreV,
            width_bits: 64,
            lanes: 8,
            pred: None,
            dst: None,
            srcs: vec![super::super::VReg(3)],
            mem: Some(MemRef {
                array: 0,
                var_depth: 0,
                pattern: MemPattern::Contiguous { elem_offset: 0, lines_ahead: 0 },
            }),
        };
        let ops = expand_microops(&store, &cfg, &ctx);
        assert_eq!(ops.len(), 2);
        assert_eq!(ops[0].unit, UnitClass::Agen);
        assert!(ops[0].mem.is_some());
        assert_eq!(ops[1].unit, UnitClass::FpSimd);
        assert!(ops[1].mem.is_none());
    }
}
