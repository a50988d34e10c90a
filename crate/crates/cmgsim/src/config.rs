//! Simulator configuration: every tunable microarchitectural parameter plus
//! feature flags, with the A64FX CMG preset, a flat `key = value` config
//! grammar, validation, and a canonical renderer (configs round-trip).

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::ir::OpClass;

/// Geometry of one cache level.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheGeometry {
    pub capacity_bytes: u64,
    pub line_bytes: u64,
    pub associativity: u32,
    pub hit_latency: u32,
    pub mshr_entries: u32,
    /// Interleaved banks; 1 for L1.
    pub banks: u32,
}

impl CacheGeometry {
    pub fn sets(&self) -> u64 {
        self.capacity_bytes / (self.line_bytes * self.associativity as u64)
    }
}

/// HBM2-style memory controller parameters. Timings are in core cycles.
#[derive(Debug, Clone, PartialEq)]
pub struct Hbm2Config {
    pub channels: u32,
    pub banks_per_channel: u32,
    pub burst_length: u32,
    pub beat_bytes: u32,
    pub trcd: u32,
    pub trp: u32,
    pub tcl: u32,
    pub trc: u32,
    pub tccd: u32,
    /// Aggregate data-return cap, bytes per cycle.
    pub peak_bytes_per_cycle: u32,
    pub row_bytes: u64,
    pub queue_depth: u32,
}

impl Hbm2Config {
    /// Peak implied by the channel structure itself.
    pub fn structural_peak(&self) -> u32 {
        self.channels * self.beat_bytes / self.tccd
    }
}

/// Feature toggles for the modeled microarchitectural gap list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureFlags {
    pub split_line_access_free: bool,
    pub sw_prefetch_store: bool,
    pub hw_prefetch_l1: bool,
    pub hw_prefetch_l2: bool,
    pub combined_gather: bool,
    pub write_merge: bool,
    pub l2_fairness: bool,
    pub ideal_crossbar: bool,
    pub l1_fill_exclusive: bool,
    pub l1_wb_exclusive: bool,
}

/// Sizes of the four reservation stations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RsSizes {
    pub rsa: u32,
    pub rse0: u32,
    pub rse1: u32,
    pub rsbr: u32,
}

/// Execution unit counts per kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExecUnits {
    pub fp_simd: u32,
    pub int: u32,
    pub agen: u32,
    pub branch: u32,
}

/// Bus byte/cycle budgets. Fill and writeback directions are independent
/// links; L1 links are per core, L2 links are per bank.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BusWidths {
    pub l1_fill: u32,
    pub l1_wb: u32,
    pub l2_fill: u32,
    pub l2_wb: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrefetchConfig {
    pub l1_distance: u32,
    pub l2_distance: u32,
    /// Stream table entries per engine.
    pub streams: u32,
}

/// Latency and issue interval for one op class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatencySpec {
    pub latency: u32,
    /// Cycles the issuing pipe stays blocked; 1 = fully pipelined.
    pub interval: u32,
}

/// (op class, element width) -> latency/throughput. Width-specific entries
/// override the per-class default.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct OpLatencyTable {
    pub base: BTreeMap<OpClass, LatencySpec>,
    pub by_width: BTreeMap<(OpClass, u8), LatencySpec>,
}

impl OpLatencyTable {
    pub fn lookup(&self, op: OpClass, width_bits: u8) -> Option<LatencySpec> {
        self.by_width
            .get(&(op, width_bits))
            .or_else(|| self.base.get(&op))
            .copied()
    }
}

/// One step of a math-function expansion recipe.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecipeOp {
    Arith(OpClass),
    /// Table lookup modeled as a gather from the kernel's input array.
    Gather,
}

pub type RecipeTable = BTreeMap<String, Vec<RecipeOp>>;

/// Full parameter space of the simulated CMG. Immutable once validated.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    /// Used only to convert cycles to seconds/bandwidth in reports.
    pub clock_ghz: f64,
    pub cores: u32,
    pub decode_width: u32,
    pub commit_width: u32,
    pub rob_entries: u32,
    pub rs_sizes: RsSizes,
    pub exec_units: ExecUnits,
    pub lq_entries: u32,
    pub sq_entries: u32,
    pub frontend_latency: u32,
    pub mispredict_penalty: u32,
    pub opclass_latency: OpLatencyTable,
    pub l1: CacheGeometry,
    pub l2: CacheGeometry,
    /// Cycles an L2 bank is occupied per accepted access.
    pub l2_bank_busy: u32,
    pub buses: BusWidths,
    pub hbm2: Hbm2Config,
    pub prefetch: PrefetchConfig,
    /// Coalesced store-buffer drain width when write_merge is on.
    pub store_merge_bytes: u32,
    pub recipes: RecipeTable,
    pub flags: FeatureFlags,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: syntax error: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key `{key}`: {msg}")]
    TypeMismatch { line: usize, key: String, msg: String },
    #[error("invalid configuration:\n{}", violations.join("\n"))]
    Invalid { violations: Vec<String> },
}

/// Op classes the kernel generators may emit; the latency table must cover
/// all of them for a config to validate.
pub const GENERATED_OP_CLASSES: &[OpClass] = &[
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

fn default_latency_table() -> OpLatencyTable {
    use OpClass::*;
    let mut base = BTreeMap::new();
    let lat = |l, i| LatencySpec {
        latency: l,
        interval: i,
    };
    // Main FP pipe.
    for op in [FAdd, FSub, FMul, FFma, FCvt, ICvt] {
        base.insert(op, lat(9, 1));
    }
    // Short FP ops and estimates.
    for op in [FAbs, FMax, FMin, FSign, FRecipEst, FSqrtEst] {
        base.insert(op, lat(4, 1));
    }
    // Non-pipelined divide, kept for completeness; generators use the
    // reciprocal-estimate sequence instead.
    base.insert(FDiv, lat(43, 36));
    base.insert(IntAlu, lat(1, 1));
    base.insert(Branch, lat(1, 1));
    // Memory classes: the table entry is the address-generation stage;
    // cache/memory latency comes from the memory system.
    for op in [
        LoadV,
        StoreV,
        LoadS,
        StoreS,
        GatherV,
        ScatterV,
        PrefetchRead,
        PrefetchWrite,
    ] {
        base.insert(op, lat(1, 1));
    }
    OpLatencyTable {
        base,
        by_width: BTreeMap::new(),
    }
}

fn default_recipes() -> RecipeTable {
    use OpClass::*;
    use RecipeOp::{Arith, Gather};
    let chain = |ops: &[RecipeOp]| ops.to_vec();
    let mut t = BTreeMap::new();
    // Range reduction, table lookup, then a polynomial tail. Op counts are
    // estimates of inlined vector math code and are overridable per kernel.
    let trig: Vec<RecipeOp> = chain(&[
        Arith(FMul),
        Arith(FCvt),
        Arith(FFma),
        Arith(FFma),
        Gather,
        Arith(FFma),
        Arith(FFma),
        Arith(FFma),
        Arith(FFma),
        Arith(FFma),
        Arith(FFma),
        Arith(FMul),
    ]);
    t.insert("cos".to_string(), trig.clone());
    t.insert("sin".to_string(), trig);
    let exp: Vec<RecipeOp> = chain(&[
        Arith(FMul),
        Arith(FCvt),
        Arith(FFma),
        Arith(FFma),
        Arith(FFma),
        Arith(FFma),
        Arith(FFma),
        Arith(FFma),
        Arith(FFma),
        Arith(FMul),
    ]);
    t.insert("exp".to_string(), exp.clone());
    let mut exp10 = exp.clone();
    exp10.push(Arith(FMul));
    t.insert("exp10".to_string(), exp10);
    let log: Vec<RecipeOp> = chain(&[
        Arith(ICvt),
        Arith(FCvt),
        Gather,
        Arith(FRecipEst),
        Arith(FFma),
        Arith(FFma),
        Arith(FFma),
        Arith(FFma),
        Arith(FFma),
        Arith(FFma),
        Arith(FFma),
        Arith(FAdd),
    ]);
    t.insert("log".to_string(), log.clone());
    let mut log10 = log.clone();
    log10.push(Arith(FMul));
    t.insert("log10".to_string(), log10);
    let atan: Vec<RecipeOp> = chain(&[
        Arith(FAbs),
        Arith(FMul),
        Arith(FFma),
        Arith(FFma),
        Arith(FFma),
        Arith(FFma),
        Arith(FFma),
        Arith(FFma),
        Arith(FFma),
        Arith(FFma),
        Arith(FMul),
        Arith(FAdd),
    ]);
    t.insert("atan".to_string(), atan.clone());
    let mut atan2 = atan;
    atan2.extend_from_slice(&[
        Arith(FRecipEst),
        Arith(FFma),
        Arith(FFma),
        Arith(FMul),
        Arith(FSign),
    ]);
    t.insert("atan2".to_string(), atan2);
    // pwr = log shape + scale + exp tail.
    let mut pwr = log;
    pwr.push(Arith(FMul));
    pwr.extend_from_slice(&[
        Arith(FCvt),
        Arith(FFma),
        Arith(FFma),
        Arith(FFma),
        Arith(FFma),
        Arith(FMul),
    ]);
    t.insert("pwr".to_string(), pwr);
    t
}

/// The default configuration: one A64FX-like CMG at 2.0 GHz with 12 cores,
/// two 512-bit SIMD pipes per core, 64 KiB L1s, an 8 MiB banked L2, and
/// 256 GB/s of HBM2 behind it.
pub fn preset_a64fx_cmg() -> SimConfig {
    SimConfig {
        clock_ghz: 2.0,
        cores: 12,
        decode_width: 4,
        commit_width: 4,
        rob_entries: 128,
        rs_sizes: RsSizes {
            rsa: 10,
            rse0: 20,
            rse1: 20,
            rsbr: 19,
        },
        exec_units: ExecUnits {
            fp_simd: 2,
            int: 2,
            agen: 2,
            branch: 1,
        },
        lq_entries: 32,
        sq_entries: 32,
        frontend_latency: 5,
        mispredict_penalty: 12,
        opclass_latency: default_latency_table(),
        l1: CacheGeometry {
            capacity_bytes: 64 * 1024,
            line_bytes: 256,
            associativity: 16,
            hit_latency: 5,
            mshr_entries: 8,
            banks: 1,
        },
        l2: CacheGeometry {
            capacity_bytes: 8 * 1024 * 1024,
            line_bytes: 256,
            associativity: 16,
            hit_latency: 40,
            mshr_entries: 16,
            banks: 4,
        },
        l2_bank_busy: 3,
        buses: BusWidths {
            l1_fill: 64,
            l1_wb: 32,
            l2_fill: 64,
            l2_wb: 32,
        },
        hbm2: Hbm2Config {
            channels: 8,
            banks_per_channel: 16,
            burst_length: 4,
            beat_bytes: 32,
            trcd: 14,
            trp: 14,
            tcl: 14,
            trc: 48,
            tccd: 2,
            peak_bytes_per_cycle: 128,
            row_bytes: 2048,
            queue_depth: 16,
        },
        prefetch: PrefetchConfig {
            l1_distance: 4,
            l2_distance: 16,
            streams: 8,
        },
        store_merge_bytes: 128,
        recipes: default_recipes(),
        flags: FeatureFlags {
            split_line_access_free: true,
            sw_prefetch_store: true,
            hw_prefetch_l1: true,
            hw_prefetch_l2: false,
            combined_gather: false,
            write_merge: false,
            l2_fairness: false,
            ideal_crossbar: false,
            l1_fill_exclusive: true,
            l1_wb_exclusive: false,
        },
    }
}

fn is_pow2(v: u64) -> bool {
    v != 0 && v & (v - 1) == 0
}

fn validate_geometry(name: &str, g: &CacheGeometry, out: &mut Vec<String>) {
    if !is_pow2(g.line_bytes) {
        out.push(format!("{name}: line size must be a power of two"));
        return;
    }
    if g.associativity == 0 || g.capacity_bytes == 0 {
        out.push(format!("{name}: sizes must be > 0"));
        return;
    }
    let way_bytes = g.line_bytes * g.associativity as u64;
    if g.capacity_bytes % way_bytes != 0 {
        out.push(format!(
            "{name}: capacity must be sets x associativity x line size with integral sets"
        ));
        return;
    }
    if !is_pow2(g.capacity_bytes / g.line_bytes) {
        out.push(format!(
            "{name}: capacity must be a power-of-two multiple of the line size"
        ));
    }
    if g.hit_latency == 0 || g.mshr_entries == 0 {
        out.push(format!("{name}: latency and MSHR count must be > 0"));
    }
}

/// Returns every violated invariant, one human-readable message each.
/// Empty means valid.
pub fn validate_config(cfg: &SimConfig) -> Vec<String> {
    let mut v = Vec::new();
    if cfg.cores == 0 {
        v.push("cores must be >= 1".to_string());
    }
    if cfg.cores > 12 {
        v.push("cores must be <= 12".to_string());
    }
    if cfg.clock_ghz <= 0.0 {
        v.push("clock_ghz must be > 0".to_string());
    }
    for (key, val) in [
        ("decode_width", cfg.decode_width),
        ("commit_width", cfg.commit_width),
        ("rob_entries", cfg.rob_entries),
        ("rs.rsa", cfg.rs_sizes.rsa),
        ("rs.rse0", cfg.rs_sizes.rse0),
        ("rs.rse1", cfg.rs_sizes.rse1),
        ("rs.rsbr", cfg.rs_sizes.rsbr),
        ("units.fp_simd", cfg.exec_units.fp_simd),
        ("units.int", cfg.exec_units.int),
        ("units.agen", cfg.exec_units.agen),
        ("units.branch", cfg.exec_units.branch),
        ("lq_entries", cfg.lq_entries),
        ("sq_entries", cfg.sq_entries),
        ("frontend_latency", cfg.frontend_latency),
        ("l2.bank_busy", cfg.l2_bank_busy),
        ("bus.l1_fill", cfg.buses.l1_fill),
        ("bus.l1_wb", cfg.buses.l1_wb),
        ("bus.l2_fill", cfg.buses.l2_fill),
        ("bus.l2_wb", cfg.buses.l2_wb),
        ("store_merge_bytes", cfg.store_merge_bytes),
        ("prefetch.streams", cfg.prefetch.streams),
    ] {
        if val == 0 {
            v.push(format!("{key} must be > 0"));
        }
    }
    validate_geometry("l1", &cfg.l1, &mut v);
    validate_geometry("l2", &cfg.l2, &mut v);
    if cfg.l1.line_bytes != cfg.l2.line_bytes {
        v.push("l1 and l2 line sizes must match".to_string());
    }
    if cfg.l2.banks == 0 || !is_pow2(cfg.l2.banks as u64) {
        v.push("l2 bank count must be a power of two".to_string());
    } else if cfg.l2.sets() % cfg.l2.banks as u64 != 0 {
        v.push(format!(
            "l2 bank count must divide set count ({} sets, {} banks)",
            cfg.l2.sets(),
            cfg.l2.banks
        ));
    }
    let h = &cfg.hbm2;
    for (key, val) in [
        ("hbm2.channels", h.channels),
        ("hbm2.banks", h.banks_per_channel),
        ("hbm2.burst_length", h.burst_length),
        ("hbm2.beat_bytes", h.beat_bytes),
        ("hbm2.trcd", h.trcd),
        ("hbm2.trp", h.trp),
        ("hbm2.tcl", h.tcl),
        ("hbm2.trc", h.trc),
        ("hbm2.tccd", h.tccd),
        ("hbm2.peak", h.peak_bytes_per_cycle),
        ("hbm2.queue_depth", h.queue_depth),
    ] {
        if val == 0 {
            v.push(format!("{key} must be > 0"));
        }
    }
    if h.tccd != 0 && h.peak_bytes_per_cycle > h.structural_peak() {
        v.push(format!(
            "hbm2.peak ({}) exceeds channels x beat_bytes / tccd ({})",
            h.peak_bytes_per_cycle,
            h.structural_peak()
        ));
    }
    if h.row_bytes < cfg.l2.line_bytes || !is_pow2(h.row_bytes) {
        v.push("hbm2.row_bytes must be a power of two >= the line size".to_string());
    }
    for &op in GENERATED_OP_CLASSES {
        if cfg.opclass_latency.lookup(op, 64).is_none() {
            v.push(format!("latency table missing op class `{}`", op.name()));
        }
    }
    v
}

// --- flat key=value grammar ---------------------------------------------

fn parse_size(s: &str) -> Option<u64> {
    let s = s.trim();
    if let Some(k) = s.strip_suffix("KiB") {
        return k.trim().parse::<u64>().ok().map(|v| v * 1024);
    }
    if let Some(m) = s.strip_suffix("MiB") {
        return m.trim().parse::<u64>().ok().map(|v| v * 1024 * 1024);
    }
    if let Some(g) = s.strip_suffix("GiB") {
        return g.trim().parse::<u64>().ok().map(|v| v * 1024 * 1024 * 1024);
    }
    s.parse::<u64>().ok()
}

fn parse_recipe(s: &str) -> Option<Vec<RecipeOp>> {
    let mut out = Vec::new();
    for part in s.split(',') {
        let part = part.trim();
        if part.is_empty() {
            return None;
        }
        let (name, reps) = match part.split_once('*') {
            Some((n, r)) => (n.trim(), r.trim().parse::<usize>().ok()?),
            None => (part, 1),
        };
        let op = if name == "gather" {
            RecipeOp::Gather
        } else {
            RecipeOp::Arith(OpClass::from_name(name)?)
        };
        for _ in 0..reps {
            out.push(op);
        }
    }
    if out.is_empty() {
        None
    } else {
        Some(out)
    }
}

fn render_recipe(r: &[RecipeOp]) -> String {
    r.iter()
        .map(|op| match op {
            RecipeOp::Gather => "gather".to_string(),
            RecipeOp::Arith(o) => o.name().to_string(),
        })
        .collect::<Vec<_>>()
        .join(",")
}

struct KeyCtx<'a> {
    line: usize,
    key: &'a str,
    value: &'a str,
}

impl KeyCtx<'_> {
    fn err(&self, msg: &str) -> ConfigError {
        ConfigError::TypeMismatch {
            line: self.line,
            key: self.key.to_string(),
            msg: msg.to_string(),
        }
    }
    fn u32(&self) -> Result<u32, ConfigError> {
        parse_size(self.value)
            .and_then(|v| u32::try_from(v).ok())
            .ok_or_else(|| self.err("expected an unsigned integer"))
    }
    fn u64(&self) -> Result<u64, ConfigError> {
        parse_size(self.value).ok_or_else(|| self.err("expected an unsigned integer or size"))
    }
    fn f64(&self) -> Result<f64, ConfigError> {
        self.value
            .trim()
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| self.err("expected a number"))
    }
    fn bool(&self) -> Result<bool, ConfigError> {
        match self.value.trim() {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(self.err("expected true or false")),
        }
    }
}

/// Applies one `key = value` override to `cfg`.
fn apply_key(cfg: &mut SimConfig, ctx: &KeyCtx) -> Result<(), ConfigError> {
    // Latency / interval / recipe tables take structured key paths.
    if let Some(rest) = ctx.key.strip_prefix("latency.") {
        return apply_latency(cfg, ctx, rest, true);
    }
    if let Some(rest) = ctx.key.strip_prefix("interval.") {
        return apply_latency(cfg, ctx, rest, false);
    }
    if let Some(name) = ctx.key.strip_prefix("recipe.") {
        let ops = parse_recipe(ctx.value)
            .ok_or_else(|| ctx.err("expected a comma-separated op list"))?;
        cfg.recipes.insert(name.to_string(), ops);
        return Ok(());
    }
    if let Some(flag) = ctx.key.strip_prefix("flags.") {
        let v = ctx.bool()?;
        let f = &mut cfg.flags;
        match flag {
            "split_line_access_free" => f.split_line_access_free = v,
            "sw_prefetch_store" => f.sw_prefetch_store = v,
            "hw_prefetch_l1" => f.hw_prefetch_l1 = v,
            "hw_prefetch_l2" => f.hw_prefetch_l2 = v,
            "combined_gather" => f.combined_gather = v,
            "write_merge" => f.write_merge = v,
            "l2_fairness" => f.l2_fairness = v,
            "ideal_crossbar" => f.ideal_crossbar = v,
            "l1_fill_exclusive" => f.l1_fill_exclusive = v,
            "l1_wb_exclusive" => f.l1_wb_exclusive = v,
            _ => {
                return Err(ConfigError::UnknownKey {
                    line: ctx.line,
                    key: ctx.key.to_string(),
                })
            }
        }
        return Ok(());
    }
    match ctx.key {
        "clock_ghz" => cfg.clock_ghz = ctx.f64()?,
        "cores" => cfg.cores = ctx.u32()?,
        "decode_width" => cfg.decode_width = ctx.u32()?,
        "commit_width" => cfg.commit_width = ctx.u32()?,
        "rob_entries" => cfg.rob_entries = ctx.u32()?,
        "lq_entries" => cfg.lq_entries = ctx.u32()?,
        "sq_entries" => cfg.sq_entries = ctx.u32()?,
        "frontend_latency" => cfg.frontend_latency = ctx.u32()?,
        "mispredict_penalty" => cfg.mispredict_penalty = ctx.u32()?,
        "store_merge_bytes" => cfg.store_merge_bytes = ctx.u32()?,
        "rs.rsa" => cfg.rs_sizes.rsa = ctx.u32()?,
        "rs.rse0" => cfg.rs_sizes.rse0 = ctx.u32()?,
        "rs.rse1" => cfg.rs_sizes.rse1 = ctx.u32()?,
        "rs.rsbr" => cfg.rs_sizes.rsbr = ctx.u32()?,
        "units.fp_simd" => cfg.exec_units.fp_simd = ctx.u32()?,
        "units.int" => cfg.exec_units.int = ctx.u32()?,
        "units.agen" => cfg.exec_units.agen = ctx.u32()?,
        "units.branch" => cfg.exec_units.branch = ctx.u32()?,
        "l1.capacity" => cfg.l1.capacity_bytes = ctx.u64()?,
        "l1.line" => cfg.l1.line_bytes = ctx.u64()?,
        "l1.assoc" => cfg.l1.associativity = ctx.u32()?,
        "l1.hit_latency" => cfg.l1.hit_latency = ctx.u32()?,
        "l1.mshr" => cfg.l1.mshr_entries = ctx.u32()?,
        "l2.capacity" => cfg.l2.capacity_bytes = ctx.u64()?,
        "l2.line" => cfg.l2.line_bytes = ctx.u64()?,
        "l2.assoc" => cfg.l2.associativity = ctx.u32()?,
        "l2.hit_latency" => cfg.l2.hit_latency = ctx.u32()?,
        "l2.mshr" => cfg.l2.mshr_entries = ctx.u32()?,
        "l2.banks" => cfg.l2.banks = ctx.u32()?,
        "l2.bank_busy" => cfg.l2_bank_busy = ctx.u32()?,
        "bus.l1_fill" => cfg.buses.l1_fill = ctx.u32()?,
        "bus.l1_wb" => cfg.buses.l1_wb = ctx.u32()?,
        "bus.l2_fill" => cfg.buses.l2_fill = ctx.u32()?,
        "bus.l2_wb" => cfg.buses.l2_wb = ctx.u32()?,
        "hbm2.channels" => cfg.hbm2.channels = ctx.u32()?,
        "hbm2.banks" => cfg.hbm2.banks_per_channel = ctx.u32()?,
        "hbm2.burst_length" => cfg.hbm2.burst_length = ctx.u32()?,
        "hbm2.beat_bytes" => cfg.hbm2.beat_bytes = ctx.u32()?,
        "hbm2.trcd" => cfg.hbm2.trcd = ctx.u32()?,
        "hbm2.trp" => cfg.hbm2.trp = ctx.u32()?,
        "hbm2.tcl" => cfg.hbm2.tcl = ctx.u32()?,
        "hbm2.trc" => cfg.hbm2.trc = ctx.u32()?,
        "hbm2.tccd" => cfg.hbm2.tccd = ctx.u32()?,
        "hbm2.peak" => cfg.hbm2.peak_bytes_per_cycle = ctx.u32()?,
        "hbm2.row_bytes" => cfg.hbm2.row_bytes = ctx.u64()?,
        "hbm2.queue_depth" => cfg.hbm2.queue_depth = ctx.u32()?,
        "prefetch.l1_distance" => cfg.prefetch.l1_distance = ctx.u32()?,
        "prefetch.l2_distance" => cfg.prefetch.l2_distance = ctx.u32()?,
        "prefetch.streams" => cfg.prefetch.streams = ctx.u32()?,
        _ => {
            return Err(ConfigError::UnknownKey {
                line: ctx.line,
                key: ctx.key.to_string(),
            })
        }
    }
    Ok(())
}

fn apply_latency(
    cfg: &mut SimConfig,
    ctx: &KeyCtx,
    path: &str,
    is_latency: bool,
) -> Result<(), ConfigError> {
    let (op_name, width) = match path.split_once('.') {
        Some((op, w)) => {
            let w = w
                .parse::<u8>()
                .ok()
                .filter(|w| matches!(w, 8 | 16 | 32 | 64))
                .ok_or_else(|| ctx.err("width must be 8, 16, 32 or 64"))?;
            (op, Some(w))
        }
        None => (path, None),
    };
    let op = OpClass::from_name(op_name).ok_or_else(|| ConfigError::UnknownKey {
        line: ctx.line,
        key: ctx.key.to_string(),
    })?;
    let val = ctx.u32()?;
    if val == 0 {
        return Err(ctx.err("must be > 0"));
    }
    let table = &mut cfg.opclass_latency;
    let entry = match width {
        Some(w) => table.by_width.entry((op, w)).or_insert_with(|| {
            table
                .base
                .get(&op)
                .copied()
                .unwrap_or(LatencySpec { latency: 1, interval: 1 })
        }),
        None => table
            .base
            .entry(op)
            .or_insert(LatencySpec { latency: 1, interval: 1 }),
    };
    if is_latency {
        entry.latency = val;
    } else {
        entry.interval = val;
    }
    Ok(())
}

/// Parses a config document on top of the A64FX preset and validates the
/// result. An empty document yields exactly `preset_a64fx_cmg()`.
pub fn parse_config(text: &str) -> Result<SimConfig, ConfigError> {
    let mut cfg = preset_a64fx_cmg();
    apply_document(&mut cfg, text)?;
    let violations = validate_config(&cfg);
    if violations.is_empty() {
        Ok(cfg)
    } else {
        Err(ConfigError::Invalid { violations })
    }
}

fn apply_document(cfg: &mut SimConfig, text: &str) -> Result<(), ConfigError> {
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let stripped = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        };
        let stripped = stripped.trim();
        if stripped.is_empty() {
            continue;
        }
        let (key, value) = stripped.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line,
            msg: "expected `key = value`".to_string(),
        })?;
        let key = key.trim();
        let value = value.trim();
        if key.is_empty() || value.is_empty() {
            return Err(ConfigError::Syntax {
                line,
                msg: "empty key or value".to_string(),
            });
        }
        apply_key(cfg, &KeyCtx { line, key, value })?;
    }
    Ok(())
}

/// Applies `--set key=value` overrides (last wins) and revalidates.
pub fn apply_overrides(cfg: &mut SimConfig, overrides: &[String]) -> Result<(), ConfigError> {
    for (idx, ov) in overrides.iter().enumerate() {
        let line = idx + 1;
        let (key, value) = ov.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line,
            msg: format!("override `{ov}`: expected key=value"),
        })?;
        apply_key(
            cfg,
            &KeyCtx {
                line,
                key: key.trim(),
                value: value.trim(),
            },
        )?;
    }
    let violations = validate_config(cfg);
    if violations.is_empty() {
        Ok(())
    } else {
        Err(ConfigError::Invalid { violations })
    }
}

/// Renders the full configuration in the config grammar; parsing the output
/// reproduces the value exactly.
pub fn render(cfg: &SimConfig) -> String {
    let mut s = String::new();
    let mut kv = |k: &str, v: String| {
        let _ = writeln!(s, "{k} = {v}");
    };
    kv("clock_ghz", format!("{}", cfg.clock_ghz));
    kv("cores", cfg.cores.to_string());
    kv("decode_width", cfg.decode_width.to_string());
    kv("commit_width", cfg.commit_width.to_string());
    kv("rob_entries", cfg.rob_entries.to_string());
    kv("lq_entries", cfg.lq_entries.to_string());
    kv("sq_entries", cfg.sq_entries.to_string());
    kv("frontend_latency", cfg.frontend_latency.to_string());
    kv("mispredict_penalty", cfg.mispredict_penalty.to_string());
    kv("store_merge_bytes", cfg.store_merge_bytes.to_string());
    kv("rs.rsa", cfg.rs_sizes.rsa.to_string());
    kv("rs.rse0", cfg.rs_sizes.rse0.to_string());
    kv("rs.rse1", cfg.rs_sizes.rse1.to_string());
    kv("rs.rsbr", cfg.rs_sizes.rsbr.to_string());
    kv("units.fp_simd", cfg.exec_units.fp_simd.to_string());
    kv("units.int", cfg.exec_units.int.to_string());
    kv("units.agen", cfg.exec_units.agen.to_string());
    kv("units.branch", cfg.exec_units.branch.to_string());
    kv("l1.capacity", cfg.l1.capacity_bytes.to_string());
    kv("l1.line", cfg.l1.line_bytes.to_string());
    kv("l1.assoc", cfg.l1.associativity.to_string());
    kv("l1.hit_latency", cfg.l1.hit_latency.to_string());
    kv("l1.mshr", cfg.l1.mshr_entries.to_string());
    kv("l2.capacity", cfg.l2.capacity_bytes.to_string());
    kv("l2.line", cfg.l2.line_bytes.to_string());
    kv("l2.assoc", cfg.l2.associativity.to_string());
    kv("l2.hit_latency", cfg.l2.hit_latency.to_string());
    kv("l2.mshr", cfg.l2.mshr_entries.to_string());
    kv("l2.banks", cfg.l2.banks.to_string());
    kv("l2.bank_busy", cfg.l2_bank_busy.to_string());
    kv("bus.l1_fill", cfg.buses.l1_fill.to_string());
    kv("bus.l1_wb", cfg.buses.l1_wb.to_string());
    kv("bus.l2_fill", cfg.buses.l2_fill.to_string());
    kv("bus.l2_wb", cfg.buses.l2_wb.to_string());
    kv("hbm2.channels", cfg.hbm2.channels.to_string());
    kv("hbm2.banks", cfg.hbm2.banks_per_channel.to_string());
    kv("hbm2.burst_length", cfg.hbm2.burst_length.to_string());
    kv("hbm2.beat_bytes", cfg.hbm2.beat_bytes.to_string());
    kv("hbm2.trcd", cfg.hbm2.trcd.to_string());
    kv("hbm2.trp", cfg.hbm2.trp.to_string());
    kv("hbm2.tcl", cfg.hbm2.tcl.to_string());
    kv("hbm2.trc", cfg.hbm2.trc.to_string());
    kv("hbm2.tccd", cfg.hbm2.tccd.to_string());
    kv("hbm2.peak", cfg.hbm2.peak_bytes_per_cycle.to_string());
    kv("hbm2.row_bytes", cfg.hbm2.row_bytes.to_string());
    kv("hbm2.queue_depth", cfg.hbm2.queue_depth.to_string());
    kv("prefetch.l1_distance", cfg.prefetch.l1_distance.to_string());
    kv("prefetch.l2_distance", cfg.prefetch.l2_distance.to_string());
    kv("prefetch.streams", cfg.prefetch.streams.to_string());
    let f = &cfg.flags;
    kv("flags.split_line_access_free", f.split_line_access_free.to_string());
    kv("flags.sw_prefetch_store", f.sw_prefetch_store.to_string());
    kv("flags.hw_prefetch_l1", f.hw_prefetch_l1.to_string());
    kv("flags.hw_prefetch_l2", f.hw_prefetch_l2.to_string());
    kv("flags.combined_gather", f.combined_gather.to_string());
    kv("flags.write_merge", f.write_merge.to_string());
    kv("flags.l2_fairness", f.l2_fairness.to_string());
    kv("flags.ideal_crossbar", f.ideal_crossbar.to_string());
    kv("flags.l1_fill_exclusive", f.l1_fill_exclusive.to_string());
    kv("flags.l1_wb_exclusive", f.l1_wb_exclusive.to_string());
    for (op, spec) in &cfg.opclass_latency.base {
        kv(&format!("latency.{}", op.name()), spec.latency.to_string());
        kv(&format!("interval.{}", op.name()), spec.interval.to_string());
    }
    for ((op, w), spec) in &cfg.opclass_latency.by_width {
        kv(&format!("latency.{}.{w}", op.name()), spec.latency.to_string());
        kv(&format!("interval.{}.{w}", op.name()), spec.interval.to_string());
    }
    for (name, recipe) in &cfg.recipes {
        kv(&format!("recipe.{name}"), render_recipe(recipe));
    }
    s
}

/// FNV-1a over the canonical rendering; stable across runs.
pub fn config_hash(cfg: &SimConfig) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in render(cfg).bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_is_valid() {
        assert!(validate_config(&preset_a64fx_cmg()).is_empty());
    }

    #[test]
    fn preset_headline_values() {
        let cfg = preset_a64fx_cmg();
        assert_eq!(cfg.cores, 12);
        assert_eq!(cfg.l1.capacity_bytes, 65536);
        assert_eq!(cfg.l2.capacity_bytes, 8 * 1024 * 1024);
        assert_eq!(cfg.exec_units.fp_simd, 2);
        // 128 B/cycle at 2.0 GHz = 256 GB/s.
        assert_eq!(cfg.hbm2.peak_bytes_per_cycle, 128);
        assert_eq!(cfg.clock_ghz, 2.0);
        assert!(!cfg.flags.combined_gather);
        assert!(!cfg.flags.write_merge);
        assert!(!cfg.flags.l2_fairness);
        assert!(!cfg.flags.hw_prefetch_l2);
        assert!(!cfg.flags.ideal_crossbar);
        assert!(!cfg.flags.l1_wb_exclusive);
    }

    #[test]
    fn empty_document_is_identity() {
        assert_eq!(parse_config("").unwrap(), preset_a64fx_cmg());
    }

    #[test]
    fn single_override() {
        let cfg = parse_config("cores = 4").unwrap();
        let mut expect = preset_a64fx_cmg();
        expect.cores = 4;
        assert_eq!(cfg, expect);
    }

    #[test]
    fn bank_count_must_divide_sets() {
        // 8 MiB / 256 B / 16-way = 2048 sets; 3 does not divide 2048.
        let err = parse_config("l2.banks = 3").unwrap_err();
        match err {
            ConfigError::Invalid { violations } => {
                assert!(violations.iter().any(|v| v.contains("bank count")));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn thirteen_cores_rejected() {
        let mut cfg = preset_a64fx_cmg();
        cfg.cores = 13;
        let v = validate_config(&cfg);
        assert_eq!(v, vec!["cores must be <= 12".to_string()]);
    }

    #[test]
    fn non_pow2_line_rejected() {
        let mut cfg = preset_a64fx_cmg();
        cfg.l1.line_bytes = 100;
        let v = validate_config(&cfg);
        assert!(v.iter().any(|m| m.contains("power of two")));
    }

    #[test]
    fn unknown_key_and_bad_type() {
        assert!(matches!(
            parse_config("nonsense = 1"),
            Err(ConfigError::UnknownKey { .. })
        ));
        assert!(matches!(
            parse_config("cores = banana"),
            Err(ConfigError::TypeMismatch { .. })
        ));
        assert!(matches!(
            parse_config("cores"),
            Err(ConfigError::Syntax { .. })
        ));
    }

    #[test]
    fn sizes_and_comments() {
        let cfg = parse_config("l1.capacity = 128KiB # bigger L1\n\n# comment\n").unwrap();
        assert_eq!(cfg.l1.capacity_bytes, 131072);
    }

    #[test]
    fn latency_overrides() {
        let cfg = parse_config("latency.ffma = 7\nlatency.fadd.32 = 5").unwrap();
        assert_eq!(cfg.opclass_latency.lookup(OpClass::FFma, 64).unwrap().latency, 7);
        assert_eq!(cfg.opclass_latency.lookup(OpClass::FAdd, 32).unwrap().latency, 5);
        assert_eq!(cfg.opclass_latency.lookup(OpClass::FAdd, 64).unwrap().latency, 9);
    }

    #[test]
    fn render_round_trips() {
        let cfg = parse_config("cores = 7\nflags.write_merge = true\nrecipe.cos = ffma*3,gather,fmul").unwrap();
        let again = parse_config(&render(&cfg)).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(config_hash(&cfg), config_hash(&again));
    }
}
