use std::fmt::{self, Display, Formatter, Write};

use super::*;

impl Display for Operand {
    fn fmt(&self, f: &mut Formatter<'_>) -> fmt::Result {
        match self {
            Operand::Var(n) => f.write_str(n),
            Operand::Lit(v) => write!(f, "{v}"),
            Operand::Reg(r) => write!(f, "%r{r}"),
        }
    }
}

impl Display for BufferRef {
    fn fmt(&self, f: &mut Formatter<'_>) -> fmt::Result {
        match self {
            BufferRef::Named(n) => f.write_str(n),
            BufferRef::Raw(o) => write!(f, "@{o}"),
        }
    }
}

impl Display for Label {
    fn fmt(&self, f: &mut Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Lib => "lib",
            Label::App => "app",
        })
    }
}

impl Display for Region {
    fn fmt(&self, f: &mut Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Region::Unprotected => "unprotected",
            Region::Protected => "protected",
        })
    }
}

impl Display for Param {
    fn fmt(&self, f: &mut Formatter<'_>) -> fmt::Result {
        match self.kind {
            ValueKind::Val => write!(f, "{}: val", self.name),
            ValueKind::Buf(n) => write!(f, "{}: buf[{n}]", self.name),
        }
    }
}

fn write_header(
    out: &mut impl Write,
    params: &[Param],
    declassify: &std::collections::BTreeSet<String>,
) -> fmt::Result {
    out.write_char('(')?;
    for (i, p) in params.iter().enumerate() {
        if i > 0 {
            out.write_str(", ")?;
        }
        write!(out, "{p}")?;
    }
    out.write_char(')')?;
    if !declassify.is_empty() {
        let names: Vec<&str> = declassify.iter().map(String::as_str).collect();
        write!(out, " declassify({})", names.join(", "))?;
    }
    Ok(())
}

fn write_block(out: &mut impl Write, block: &[Instr], depth: usize) -> fmt::Result {
    for instr in block {
        write_instr(out, instr, depth)?;
    }
    Ok(())
}

fn write_instr(out: &mut impl Write, instr: &Instr, depth: usize) -> fmt::Result {
    let pad = "    ".repeat(depth);
    out.write_str(&pad)?;
    match instr {
        Instr::Assign { dst, src } => writeln!(out, "{dst} = {src}"),
        Instr::BinOp { dst, op, lhs, rhs } => writeln!(out, "{dst} = {lhs} {} {rhs}", op.symbol()),
        Instr::Load { dst, buf, index } => writeln!(out, "{dst} = load {buf}[{index}]"),
        Instr::Store { buf, index, src } => writeln!(out, "store {buf}[{index}] = {src}"),
        Instr::If { cond, then_block, else_block, .. } => {
            writeln!(out, "if {cond} {{")?;
            write_block(out, then_block, depth + 1)?;
            if else_block.is_empty() {
                writeln!(out, "{pad}}}")
            } else {
                writeln!(out, "{pad}}} else {{")?;
                write_block(out, else_block, depth + 1)?;
                writeln!(out, "{pad}}}")
            }
        }
        Instr::Loop { counter, bound, body } => {
            writeln!(out, "loop {counter} {bound} {{")?;
            write_block(out, body, depth + 1)?;
            writeln!(out, "{pad}}}")
        }
        Instr::Call { dst, callee, args } => {
            if let Some(d) = dst {
                write!(out, "{d} = ")?;
            }
            let args: Vec<String> = args.iter().map(|a| a.to_string()).collect();
            writeln!(out, "call {callee}({})", args.join(", "))
        }
        Instr::Return(None) => writeln!(out, "return"),
        Instr::Return(Some(o)) => writeln!(out, "return {o}"),
        Instr::MemZero(b) => writeln!(out, "memzero {b}"),
        Instr::Fence => writeln!(out, "fence"),
        Instr::Pkru(on) => writeln!(out, "pkru {}", if *on { "on" } else { "off" }),
        Instr::Stack(op) => writeln!(out, "pstack {}", op.keyword()),
        Instr::ClearRegs => writeln!(out, "clearregs"),
    }
}

impl Display for Instr {
    fn fmt(&self, f: &mut Formatter<'_>) -> fmt::Result {
        let mut s = String::new();
        write_instr(&mut s, self, 0)?;
        f.write_str(s.trim_end())
    }
}

impl Display for Function {
    fn fmt(&self, f: &mut Formatter<'_>) -> fmt::Result {
        write!(f, "fn {} {}", self.label, self.name)?;
        write_header(f, &self.params, &self.declassify)?;
        writeln!(f, " {{")?;
        if !self.locals.is_empty() {
            writeln!(f, "    var {}", self.locals.join(", "))?;
        }
        for b in &self.buffers {
            match b.region {
                Region::Unprotected => writeln!(f, "    buf {}[{}]", b.name, b.len)?,
                Region::Protected => writeln!(f, "    buf {}[{}] protected", b.name, b.len)?,
            }
        }
        write_block(f, &self.body, 1)?;
        writeln!(f, "}}")
    }
}

fn write_api(f: &mut Formatter<'_>, api: &ApiContext) -> fmt::Result {
    for (name, sig) in api {
        write!(f, "api {name}")?;
        write_header(f, &sig.params, &sig.declassify)?;
        writeln!(f)?;
    }
    Ok(())
}

fn write_secrets(f: &mut Formatter<'_>, secrets: &SecretContext) -> fmt::Result {
    for (name, len) in secrets.iter() {
        writeln!(f, "secret {name}[{len}]")?;
    }
    if !secrets.is_empty() {
        writeln!(f)?;
    }
    Ok(())
}

impl Display for Program {
    fn fmt(&self, f: &mut Formatter<'_>) -> fmt::Result {
        write_api(f, &self.api)?;
        for func in self.functions.values() {
            if !self.api.is_empty() || func.name != *self.functions.keys().next().unwrap() {
                writeln!(f)?;
            }
            write!(f, "{func}")?;
        }
        Ok(())
    }
}

impl Display for LibrarySource {
    fn fmt(&self, f: &mut Formatter<'_>) -> fmt::Result {
        write_secrets(f, &self.secrets)?;
        write_api(f, &self.api)?;
        for func in self.library.functions() {
            writeln!(f)?;
            write!(f, "{func}")?;
        }
        Ok(())
    }
}

impl Display for Unit {
    fn fmt(&self, f: &mut Formatter<'_>) -> fmt::Result {
        write_secrets(f, &self.secrets)?;
        write_api(f, &self.api)?;
        for func in &self.functions {
            writeln!(f)?;
            write!(f, "{func}")?;
        }
        Ok(())
    }
}
