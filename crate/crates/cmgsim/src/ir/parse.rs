//! Text form of the kernel IR (`.kir` files), one construct per line.

use super::{
    ArrayDecl, Instruction, IrError, KernelProgram, LoopSpec, MemPattern, MemRef, OpClass,
    PredicateMask, ProgramItem, VReg,
};

fn width_of_type(ty: &str) -> Option<u8> {
    match ty {
        "f64" | "i64" => Some(64),
        "f32" | "i32" => Some(32),
        "f16" | "i16" => Some(16),
        "i8" => Some(8),
        _ => None,
    }
}

fn type_of_width(bits: u8) -> &'static str {
    match bits {
        64 => "f64",
        32 => "f32",
        16 => "f16",
        _ => "i8",
    }
}

fn type_of_bytes(bytes: u32) -> &'static str {
    type_of_width((bytes * 8).min(64) as u8)
}

struct Parser {
    prog: KernelProgram,
    // Stack of open bodies; the bottom entry is the top-level item list.
    stack: Vec<(Option<LoopSpec>, Vec<ProgramItem>)>,
}

fn err_syntax(line: usize, msg: impl Into<String>) -> IrError {
    IrError::Syntax {
        line,
        msg: msg.into(),
    }
}

fn parse_int(line: usize, s: &str) -> Result<i64, IrError> {
    s.parse::<i64>()
        .map_err(|_| err_syntax(line, format!("expected integer, got `{s}`")))
}

fn parse_mask(line: usize, s: &str) -> Result<u16, IrError> {
    let v = if let Some(b) = s.strip_prefix("0b") {
        u16::from_str_radix(b, 2)
    } else if let Some(h) = s.strip_prefix("0x") {
        u16::from_str_radix(h, 16)
    } else {
        s.parse::<u16>()
    };
    v.map_err(|_| err_syntax(line, format!("bad predicate mask `{s}`")))
}

fn parse_vreg(line: usize, s: &str) -> Result<VReg, IrError> {
    s.strip_prefix('v')
        .and_then(|d| d.parse::<u16>().ok())
        .filter(|&n| n < 4096)
        .map(VReg)
        .ok_or_else(|| err_syntax(line, format!("expected register vN, got `{s}`")))
}

/// Splits `name[inner]` into its parts.
fn split_bracket(line: usize, s: &str) -> Result<(&str, &str), IrError> {
    let open = s
        .find('[')
        .ok_or_else(|| err_syntax(line, format!("expected array reference, got `{s}`")))?;
    if !s.ends_with(']') {
        return Err(err_syntax(line, format!("unterminated `[` in `{s}`")));
    }
    Ok((&s[..open], &s[open + 1..s.len() - 1]))
}

impl Parser {
    fn loop_depth_of(&self, line: usize, var: &str) -> Result<u8, IrError> {
        let depth = self
            .stack
            .iter()
            .filter_map(|(l, _)| l.as_ref())
            .position(|l| l.var == var);
        depth
            .map(|d| d as u8)
            .ok_or_else(|| err_syntax(line, format!("unknown loop variable `{var}`")))
    }

    fn array_of(&self, line: usize, name: &str) -> Result<u16, IrError> {
        self.prog
            .array_index(name)
            .ok_or_else(|| IrError::UndeclaredArray {
                line,
                name: name.to_string(),
            })
    }

    /// Index expression inside brackets: `i`, `i+8`, `i-8`, `i+4L`,
    /// `i stride 4`, `idx seed=7`.
    fn parse_memref(&self, line: usize, arr: &str, inner: &str) -> Result<MemRef, IrError> {
        let array = self.array_of(line, arr)?;
        let inner = inner.trim();
        if let Some(seed) = inner.strip_prefix("idx seed=") {
            let seed = seed
                .trim()
                .parse::<u64>()
                .map_err(|_| err_syntax(line, "bad seed"))?;
            return Ok(MemRef {
                array,
                var_depth: self.innermost_depth(line)?,
                pattern: MemPattern::Indexed { seed },
            });
        }
        let parts: Vec<&str> = inner.split_whitespace().collect();
        if parts.len() == 3 && parts[1] == "stride" {
            let var_depth = self.loop_depth_of(line, parts[0])?;
            let stride = parts[2]
                .parse::<u32>()
                .map_err(|_| err_syntax(line, "bad stride"))?;
            return Ok(MemRef {
                array,
                var_depth,
                pattern: MemPattern::Strided {
                    elem_offset: 0,
                    stride_elems: stride,
                },
            });
        }
        if parts.len() != 1 {
            return Err(err_syntax(line, format!("bad index expression `{inner}`")));
        }
        let expr = parts[0];
        let (var, offset, lines_ahead) = if let Some(plus) = expr.find(['+', '-']) {
            let var = &expr[..plus];
            let rest = &expr[plus..];
            if let Some(l) = rest.strip_suffix('L') {
                (var, 0i64, parse_int(line, l)?.unsigned_abs() as u32)
            } else {
                (var, parse_int(line, rest)?, 0)
            }
        } else {
            (expr, 0, 0)
        };
        Ok(MemRef {
            array,
            var_depth: self.loop_depth_of(line, var)?,
            pattern: MemPattern::Contiguous {
                elem_offset: offset,
                lines_ahead,
            },
        })
    }

    fn innermost_depth(&self, line: usize) -> Result<u8, IrError> {
        let depth = self.stack.iter().filter(|(l, _)| l.is_some()).count();
        if depth == 0 {
            return Err(err_syntax(line, "memory op outside any loop"));
        }
        Ok((depth - 1) as u8)
    }

    fn push(&mut self, item: ProgramItem) {
        self.stack.last_mut().unwrap().1.push(item);
    }

    fn parse_line(&mut self, line: usize, text: &str) -> Result<(), IrError> {
        let toks: Vec<&str> = text.split_whitespace().collect();
        match toks[0] {
            "array" => {
                if toks.len() != 4 {
                    return Err(err_syntax(line, "expected `array <name> <type> <len>`"));
                }
                let width = width_of_type(toks[2])
                    .ok_or_else(|| err_syntax(line, format!("unknown type `{}`", toks[2])))?;
                if self.prog.array_index(toks[1]).is_some() {
                    return Err(err_syntax(line, format!("array `{}` redeclared", toks[1])));
                }
                self.prog.arrays.push(ArrayDecl {
                    name: toks[1].to_string(),
                    elem_bytes: width as u32 / 8,
                    len: parse_int(line, toks[3])? as u64,
                });
            }
            "pred" => {
                // pred p0 = 0b11111111
                if toks.len() != 4 || toks[2] != "=" {
                    return Err(err_syntax(line, "expected `pred pN = <mask>`"));
                }
                let idx = toks[1]
                    .strip_prefix('p')
                    .and_then(|d| d.parse::<usize>().ok())
                    .ok_or_else(|| err_syntax(line, "expected predicate name pN"))?;
                if self.prog.preds.len() <= idx {
                    self.prog.preds.resize(idx + 1, PredicateMask(0));
                }
                self.prog.preds[idx] = PredicateMask(parse_mask(line, toks[3])?);
            }
            "threads" => {
                if toks.len() != 2 {
                    return Err(err_syntax(line, "expected `threads <n>`"));
                }
                self.prog.threads = parse_int(line, toks[1])? as u32;
            }
            "loop" => {
                if toks.len() != 6 || toks[4] != "step" {
                    return Err(err_syntax(line, "expected `loop <var> <lo> <hi> step <k>`"));
                }
                let spec = LoopSpec {
                    var: toks[1].to_string(),
                    lo: parse_int(line, toks[2])?,
                    hi: parse_int(line, toks[3])?,
                    step: parse_int(line, toks[5])?,
                };
                self.stack.push((Some(spec), Vec::new()));
            }
            "end" => {
                if self.stack.len() == 1 {
                    return Err(err_syntax(line, "`end` without open loop"));
                }
                let (spec, body) = self.stack.pop().unwrap();
                self.push(ProgramItem::Loop(spec.unwrap(), body));
            }
            "region" => {
                if toks.len() != 3 {
                    return Err(err_syntax(line, "expected `region begin|end <label>`"));
                }
                let item = match toks[1] {
                    "begin" => ProgramItem::RegionBegin(toks[2].to_string()),
                    "end" => ProgramItem::RegionEnd(toks[2].to_string()),
                    _ => return Err(err_syntax(line, "expected `region begin|end <label>`")),
                };
                self.push(item);
            }
            _ => {
                let ins = self.parse_instruction(line, &toks)?;
                self.push(ProgramItem::Instr(ins));
            }
        }
        Ok(())
    }

    fn parse_instruction(&mut self, line: usize, toks: &[&str]) -> Result<Instruction, IrError> {
        let (dst, rest) = if toks.len() >= 3 && toks[1] == "=" {
            (Some(parse_vreg(line, toks[0])?), &toks[2..])
        } else {
            (None, toks)
        };
        // Trailing predicate annotation.
        let (rest, pred) = match rest.last() {
            Some(last) if last.starts_with("[pred=") => {
                let p = last
                    .strip_prefix("[pred=p")
                    .and_then(|s| s.strip_suffix(']'))
                    .and_then(|s| s.parse::<u8>().ok())
                    .ok_or_else(|| err_syntax(line, "bad predicate annotation"))?;
                if p as usize >= self.prog.preds.len() {
                    return Err(err_syntax(line, format!("undeclared predicate p{p}")));
                }
                (&rest[..rest.len() - 1], Some(p))
            }
            _ => (rest, None),
        };
        if rest.is_empty() {
            return Err(err_syntax(line, "empty instruction"));
        }
        let (mnemonic, suffix) = match rest[0].split_once('.') {
            Some((m, s)) => (m, Some(s)),
            None => (rest[0], None),
        };
        // Prefetches carry no type suffix.
        if mnemonic == "prefetch" {
            let op = match suffix {
                Some("read") => OpClass::PrefetchRead,
                Some("write") => OpClass::PrefetchWrite,
                _ => return Err(err_syntax(line, "expected prefetch.read or prefetch.write")),
            };
            if rest.len() != 2 {
                return Err(err_syntax(line, "expected `prefetch.<kind> arr[expr]`"));
            }
            let (arr, inner) = split_bracket(line, rest[1])?;
            let mem = self.parse_memref(line, arr, inner)?;
            return Ok(Instruction {
                op,
                width_bits: 64,
                lanes: 1,
                pred,
                dst: None,
                srcs: Vec::new(),
                mem: Some(mem),
            });
        }
        let suffix = suffix.ok_or_else(|| err_syntax(line, "missing type suffix"))?;
        let (ty, lanes) = match suffix.split_once('x') {
            Some((t, l)) => (
                t,
                l.parse::<u8>()
                    .map_err(|_| err_syntax(line, "bad lane count"))?,
            ),
            None => (suffix, 1),
        };
        let width_bits =
            width_of_type(ty).ok_or_else(|| err_syntax(line, format!("unknown type `{ty}`")))?;
        let args = &rest[1..];
        let build = |op, dst, srcs, mem| Instruction {
            op,
            width_bits,
            lanes,
            pred,
            dst,
            srcs,
            mem,
        };
        match mnemonic {
            "load" => {
                if args.len() != 1 {
                    return Err(err_syntax(line, "expected `load.<ty> arr[expr]`"));
                }
                let (arr, inner) = split_bracket(line, args[0])?;
                let mem = self.parse_memref(line, arr, inner)?;
                let op = if lanes > 1 { OpClass::LoadV } else { OpClass::LoadS };
                Ok(build(op, dst, Vec::new(), Some(mem)))
            }
            "gather" => {
                if args.len() != 1 {
                    return Err(err_syntax(line, "expected `gather.<ty> arr[idx seed=N]`"));
                }
                let (arr, inner) = split_bracket(line, args[0])?;
                let mem = self.parse_memref(line, arr, inner)?;
                Ok(build(OpClass::GatherV, dst, Vec::new(), Some(mem)))
            }
            "store" | "scatter" => {
                if args.len() != 2 {
                    return Err(err_syntax(line, "expected `<op>.<ty> arr[expr] <src>`"));
                }
                let (arr, inner) = split_bracket(line, args[0])?;
                let mem = self.parse_memref(line, arr, inner)?;
                let src = parse_vreg(line, args[1])?;
                let op = match (mnemonic, lanes > 1) {
                    ("scatter", _) => OpClass::ScatterV,
                    ("store", true) => OpClass::StoreV,
                    ("store", false) => OpClass::StoreS,
                    _ => unreachable!(),
                };
                Ok(build(op, None, vec![src], Some(mem)))
            }
            _ => {
                let op = OpClass::from_name(mnemonic)
                    .filter(|o| !o.is_memory() && !matches!(o, OpClass::Branch))
                    .ok_or_else(|| err_syntax(line, format!("unknown op `{mnemonic}`")))?;
                let srcs = args
                    .iter()
                    .map(|a| parse_vreg(line, a))
                    .collect::<Result<Vec<_>, _>>()?;
                if srcs.is_empty() || srcs.len() > 3 {
                    return Err(err_syntax(line, "expected 1 to 3 source registers"));
                }
                Ok(build(op, dst, srcs, None))
            }
        }
    }
}

/// Parses a `.kir` document into a structurally valid program.
pub fn parse_kernel(text: &str) -> Result<KernelProgram, IrError> {
    let mut p = Parser {
        prog: KernelProgram {
            name: "kernel".to_string(),
            arrays: Vec::new(),
            preds: Vec::new(),
            items: Vec::new(),
            threads: 1,
        },
        stack: vec![(None, Vec::new())],
    };
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let stripped = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        };
        if stripped.trim().is_empty() {
            continue;
        }
        p.parse_line(line, stripped)?;
    }
    if p.stack.len() != 1 {
        return Err(err_syntax(text.lines().count(), "unterminated loop"));
    }
    p.prog.items = p.stack.pop().unwrap().1;
    let problems = p.prog.validate();
    if problems.is_empty() {
        Ok(p.prog)
    } else {
        Err(IrError::Validation { problems })
    }
}

/// Renders a program back into the text grammar; parsing the output yields
/// an identical program.
pub fn render_kernel(prog: &KernelProgram) -> String {
    let mut out = String::new();
    for a in &prog.arrays {
        out.push_str(&format!(
            "array {} {} {}\n",
            a.name,
            type_of_bytes(a.elem_bytes),
            a.len
        ));
    }
    for (i, p) in prog.preds.iter().enumerate() {
        out.push_str(&format!("pred p{i} = 0b{:b}\n", p.0));
    }
    if prog.threads != 1 {
        out.push_str(&format!("threads {}\n", prog.threads));
    }
    fn render_items(prog: &KernelProgram, items: &[ProgramItem], loops: &mut Vec<String>, out: &mut String) {
        let pad = "  ".repeat(loops.len());
        for item in items {
            match item {
                ProgramItem::RegionBegin(l) => out.push_str(&format!("{pad}region begin {l}\n")),
                ProgramItem::RegionEnd(l) => out.push_str(&format!("{pad}region end {l}\n")),
                ProgramItem::Loop(spec, body) => {
                    out.push_str(&format!(
                        "{pad}loop {} {} {} step {}\n",
                        spec.var, spec.lo, spec.hi, spec.step
                    ));
                    loops.push(spec.var.clone());
                    render_items(prog, body, loops, out);
                    loops.pop();
                    out.push_str(&format!("{pad}end\n"));
                }
                ProgramItem::Instr(ins) => {
                    out.push_str(&format!("{pad}{}\n", render_instr(prog, ins, loops)));
                }
            }
        }
    }
    let mut loops = Vec::new();
    render_items(prog, &prog.items, &mut loops, &mut out);
    out
}

fn render_instr(prog: &KernelProgram, ins: &Instruction, loops: &[String]) -> String {
    let ty = type_of_width(ins.width_bits);
    let suffix = if ins.lanes > 1 {
        format!("{ty}x{}", ins.lanes)
    } else {
        ty.to_string()
    };
    let memref = |m: &MemRef| {
        let arr = &prog.arrays[m.array as usize].name;
        let var = &loops[m.var_depth as usize];
        match m.pattern {
            MemPattern::Contiguous { elem_offset: 0, lines_ahead: 0 } => format!("{arr}[{var}]"),
            MemPattern::Contiguous { elem_offset, lines_ahead: 0 } => {
                format!("{arr}[{var}{elem_offset:+}]")
            }
            MemPattern::Contiguous { lines_ahead, .. } => format!("{arr}[{var}+{lines_ahead}L]"),
            MemPattern::Strided { stride_elems, .. } => format!("{arr}[{var} stride {stride_elems}]"),
            MemPattern::Indexed { seed } => format!("{arr}[idx seed={seed}]"),
        }
    };
    let pred = match ins.pred {
        Some(p) => format!(" [pred=p{p}]"),
        None => String::new(),
    };
    let dst = |d: Option<VReg>| d.map(|v| format!("v{} = ", v.0)).unwrap_or_default();
    match ins.op {
        OpClass::PrefetchRead => format!("prefetch.read {}{pred}", memref(ins.mem.as_ref().unwrap())),
        OpClass::PrefetchWrite => {
            format!("prefetch.write {}{pred}", memref(ins.mem.as_ref().unwrap()))
        }
        OpClass::LoadV | OpClass::LoadS => format!(
            "{}load.{suffix} {}{pred}",
            dst(ins.dst),
            memref(ins.mem.as_ref().unwrap())
        ),
        OpClass::GatherV => format!(
            "{}gather.{suffix} {}{pred}",
            dst(ins.dst),
            memref(ins.mem.as_ref().unwrap())
        ),
        OpClass::StoreV | OpClass::StoreS => format!(
            "store.{suffix} {} v{}{pred}",
            memref(ins.mem.as_ref().unwrap()),
            ins.srcs[0].0
        ),
        OpClass::ScatterV => format!(
            "scatter.{suffix} {} v{}{pred}",
            memref(ins.mem.as_ref().unwrap()),
            ins.srcs[0].0
        ),
        op => {
            let srcs: Vec<String> = ins.srcs.iter().map(|s| format!("v{}", s.0)).collect();
            format!("{}{}.{suffix} {}{pred}", dst(ins.dst), op.name(), srcs.join(" "))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const ADD_KERNEL: &str = "\
# elementwise add
array y f64 64
array x1 f64 64
array x2 f64 64
loop i 0 64 step 8
  v1 = load.f64x8 x1[i]
  v2 = load.f64x8 x2[i]
  v3 = fadd.f64x8 v1 v2
  store.f64x8 y[i] v3
end
";

    #[test]
    fn parses_minimal_add_kernel() {
        let prog = parse_kernel(ADD_KERNEL).unwrap();
        assert_eq!(prog.items.len(), 1);
        let ProgramItem::Loop(spec, body) = &prog.items[0] else {
            panic!("expected loop");
        };
        assert_eq!(spec.iterations(), 8);
        assert_eq!(body.len(), 4);
        let ops: Vec<OpClass> = body
            .iter()
            .map(|it| match it {
                ProgramItem::Instr(i) => i.op,
                _ => panic!(),
            })
            .collect();
        assert_eq!(
            ops,
            vec![OpClass::LoadV, OpClass::LoadV, OpClass::FAdd, OpClass::StoreV]
        );
    }

    #[test]
    fn undeclared_array_is_an_error() {
        let text = "array y f64 64\nloop i 0 64 step 8\n v1 = load.f64x8 z[i]\nend\n";
        match parse_kernel(text) {
            Err(IrError::UndeclaredArray { name, .. }) => assert_eq!(name, "z"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn out_of_bounds_pattern_is_an_error() {
        let text = "array y f64 32\nloop i 0 64 step 8\n v1 = load.f64x8 y[i]\nend\n";
        assert!(matches!(parse_kernel(text), Err(IrError::Validation { .. })));
    }

    #[test]
    fn triad_text_partitions() {
        let text = "\
array a f64 2048
array b f64 2048
array c f64 2048
threads 4
loop i 0 2048 step 8
  v1 = load.f64x8 b[i]
  v2 = load.f64x8 c[i]
  v3 = ffma.f64x8 v1 v2 v1
  store.f64x8 a[i] v3
end
";
        let prog = parse_kernel(text).unwrap();
        assert_eq!(prog.threads, 4);
        let ProgramItem::Loop(spec, _) = &prog.items[0] else { panic!() };
        for t in 0..4 {
            let (lo, hi) = prog.partition(spec.iterations(), t);
            assert_eq!(hi - lo, 64);
        }
    }

    #[test]
    fn round_trip_identity() {
        let text = "\
array y f64 128
array t f64 128
pred p0 = 0b10110111
loop i 0 128 step 8
  region begin hot
  v1 = load.f64x8 y[i]
  v2 = gather.f64x8 t[idx seed=7]
  v3 = fadd.f64x8 v1 v2 [pred=p0]
  prefetch.read y[i+4L]
  store.f64x8 y[i] v3
  region end hot
end
";
        let prog = parse_kernel(text).unwrap();
        let again = parse_kernel(&render_kernel(&prog)).unwrap();
        assert_eq!(prog, again);
    }

    #[test]
    fn predicate_must_be_declared() {
        let text = "array y f64 64\nloop i 0 64 step 8\n v1 = load.f64x8 y[i] [pred=p0]\nend\n";
        assert!(matches!(parse_kernel(text), Err(IrError::Syntax { .. })));
    }
}
