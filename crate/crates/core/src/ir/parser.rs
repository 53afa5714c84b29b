use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use super::*;

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub struct ParseError {
    pub line: usize,
    pub column: usize,
    pub message: String,
    /// Tokens that would have been accepted at the error position.
    pub expected: Vec<String>,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}: {}", self.line, self.column, self.message)?;
        if !self.expected.is_empty() {
            write!(f, " (expected one of: {})", self.expected.join(", "))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Tok {
    Ident(String),
    Int(u64),
    Reg(u8),
    Sym(&'static str),
    Newline,
    Eof,
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Ident(s) => write!(f, "`{s}`"),
            Tok::Int(n) => write!(f, "`{n}`"),
            Tok::Reg(r) => write!(f, "`%r{r}`"),
            Tok::Sym(s) => write!(f, "`{s}`"),
            Tok::Newline => write!(f, "newline"),
            Tok::Eof => write!(f, "end of input"),
        }
    }
}

const KEYWORDS: &[&str] = &[
    "fn", "secret", "api", "buf", "var", "declassify", "load", "store", "if", "else", "loop",
    "call", "return", "memzero", "fence", "clearregs", "pkru", "pstack",
];

// Longest symbols first.
const SYMBOLS: &[&str] = &[
    "<<", ">>", "==", "(", ")", "{", "}", "[", "]", ",", ":", "=", "@", "+", "-", "*", "&", "|",
    "^", "<",
];

struct Spanned {
    tok: Tok,
    line: usize,
    column: usize,
}

fn lex(text: &str) -> Result<Vec<Spanned>, ParseError> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line_no = lineno + 1;
        let code = match line.find('#') {
            Some(i) => &line[..i],
            None => line,
        };
        let bytes = code.as_bytes();
        let mut i = 0;
        while i < bytes.len() {
            let c = bytes[i] as char;
            let column = i + 1;
            if c.is_whitespace() {
                i += 1;
                continue;
            }
            if c.is_ascii_alphabetic() || c == '_' {
                let start = i;
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                out.push(Spanned { tok: Tok::Ident(code[start..i].to_string()), line: line_no, column });
                continue;
            }
            if c.is_ascii_digit() {
                let start = i;
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                let lit = &code[start..i];
                let parsed = if let Some(hex) = lit.strip_prefix("0x") {
                    u64::from_str_radix(hex, 16)
                } else {
                    lit.parse::<u64>()
                };
                let n = parsed.map_err(|_| ParseError {
                    line: line_no,
                    column,
                    message: format!("invalid integer literal `{lit}`"),
                    expected: vec![],
                })?;
                out.push(Spanned { tok: Tok::Int(n), line: line_no, column });
                continue;
            }
            if c == '%' {
                let start = i + 1;
                let mut j = start;
                while j < bytes.len() && bytes[j].is_ascii_alphanumeric() {
                    j += 1;
                }
                let name = &code[start..j];
                let reg = name
                    .strip_prefix('r')
                    .and_then(|n| n.parse::<u8>().ok())
                    .filter(|&r| (r as usize) < crate::semantics::SCRATCH_REGISTERS);
                match reg {
                    Some(r) => {
                        out.push(Spanned { tok: Tok::Reg(r), line: line_no, column });
                        i = j;
                        continue;
                    }
                    None => {
                        return Err(ParseError {
                            line: line_no,
                            column,
                            message: format!("invalid register `%{name}`"),
                            expected: vec![format!(
                                "%r0..%r{}",
                                crate::semantics::SCRATCH_REGISTERS - 1
                            )],
                        })
                    }
                }
            }
            match SYMBOLS.iter().find(|s| code[i..].starts_with(**s)) {
                Some(s) => {
                    out.push(Spanned { tok: Tok::Sym(s), line: line_no, column });
                    i += s.len();
                }
                None => {
                    return Err(ParseError {
                        line: line_no,
                        column,
                        message: format!("unexpected character `{c}`"),
                        expected: vec![],
                    })
                }
            }
        }
        out.push(Spanned { tok: Tok::Newline, line: line_no, column: code.len() + 1 });
    }
    let last = out.last().map(|s| s.line).unwrap_or(1);
    out.push(Spanned { tok: Tok::Eof, line: last + 1, column: 1 });
    Ok(out)
}

struct Parser {
    toks: Vec<Spanned>,
    pos: usize,
}

type PResult<T> = Result<T, ParseError>;

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].tok
    }

    fn here(&self) -> (usize, usize) {
        let s = &self.toks[self.pos];
        (s.line, s.column)
    }

    fn bump(&mut self) -> Tok {
        let t = self.toks[self.pos].tok.clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn error<T>(&self, expected: &[&str]) -> PResult<T> {
        let (line, column) = self.here();
        Err(ParseError {
            line,
            column,
            message: format!("unexpected {}", self.peek()),
            expected: expected.iter().map(|s| s.to_string()).collect(),
        })
    }

    fn skip_newlines(&mut self) {
        while *self.peek() == Tok::Newline {
            self.bump();
        }
    }

    fn is_sym(&self, s: &str) -> bool {
        matches!(self.peek(), Tok::Sym(t) if *t == s)
    }

    fn is_kw(&self, kw: &str) -> bool {
        matches!(self.peek(), Tok::Ident(t) if t == kw)
    }

    fn expect_sym(&mut self, s: &'static str) -> PResult<()> {
        if self.is_sym(s) {
            self.bump();
            Ok(())
        } else {
            self.error(&[s])
        }
    }

    fn ident(&mut self) -> PResult<String> {
        match self.peek() {
            Tok::Ident(s) if !KEYWORDS.contains(&s.as_str()) => {
                let s = s.clone();
                self.bump();
                Ok(s)
            }
            _ => self.error(&["identifier"]),
        }
    }

    fn int(&mut self) -> PResult<u64> {
        match *self.peek() {
            Tok::Int(n) => {
                self.bump();
                Ok(n)
            }
            _ => self.error(&["integer"]),
        }
    }

    fn end_of_statement(&mut self) -> PResult<()> {
        match self.peek() {
            Tok::Newline => {
                self.bump();
                Ok(())
            }
            Tok::Sym("}") | Tok::Eof => Ok(()),
            _ => self.error(&["newline", "}"]),
        }
    }

    fn unit(&mut self) -> PResult<(Unit, Vec<(usize, usize)>)> {
        let mut unit = Unit::default();
        let mut positions = Vec::new();
        loop {
            self.skip_newlines();
            let pos = self.here();
            match self.peek() {
                Tok::Eof => break,
                Tok::Ident(k) if k == "secret" => {
                    self.bump();
                    let name = self.ident()?;
                    self.expect_sym("[")?;
                    let len = self.int()? as usize;
                    self.expect_sym("]")?;
                    unit.secrets.insert(name, len).map_err(|m| ParseError {
                        line: pos.0,
                        column: pos.1,
                        message: m,
                        expected: vec![],
                    })?;
                }
                Tok::Ident(k) if k == "api" => {
                    self.bump();
                    let name = self.ident()?;
                    let params = self.params()?;
                    let declassify = self.declassify()?;
                    if unit.api.contains_key(&name) {
                        return Err(scope_error(pos, format!("duplicate api `{name}`")));
                    }
                    unit.api.insert(name, Signature { params, declassify });
                }
                Tok::Ident(k) if k == "fn" => {
                    self.bump();
                    let f = self.function()?;
                    positions.push(pos);
                    unit.functions.push(f);
                }
                _ => return self.error(&["secret", "api", "fn"]),
            }
            self.end_of_statement()?;
        }
        Ok((unit, positions))
    }

    fn params(&mut self) -> PResult<Vec<Param>> {
        self.expect_sym("(")?;
        let mut params = Vec::new();
        if !self.is_sym(")") {
            loop {
                let name = self.ident()?;
                self.expect_sym(":")?;
                let kind = if self.is_kw("val") {
                    self.bump();
                    ValueKind::Val
                } else if self.is_kw("buf") {
                    self.bump();
                    self.expect_sym("[")?;
                    let n = self.int()? as usize;
                    self.expect_sym("]")?;
                    ValueKind::Buf(n)
                } else {
                    return self.error(&["val", "buf"]);
                };
                params.push(Param { name, kind });
                if self.is_sym(",") {
                    self.bump();
                } else {
                    break;
                }
            }
        }
        self.expect_sym(")")?;
        Ok(params)
    }

    fn declassify(&mut self) -> PResult<BTreeSet<String>> {
        let mut out = BTreeSet::new();
        if self.is_kw("declassify") {
            self.bump();
            self.expect_sym("(")?;
            loop {
                out.insert(self.ident()?);
                if self.is_sym(",") {
                    self.bump();
                } else {
                    break;
                }
            }
            self.expect_sym(")")?;
        }
        Ok(out)
    }

    fn function(&mut self) -> PResult<Function> {
        let label = if self.is_kw("lib") {
            Label::Lib
        } else if self.is_kw("app") {
            Label::App
        } else {
            return self.error(&["lib", "app"]);
        };
        self.bump();
        let name = self.ident()?;
        let mut f = Function::new(name, label);
        f.params = self.params()?;
        f.declassify = self.declassify()?;
        self.expect_sym("{")?;
        loop {
            self.skip_newlines();
            if self.is_sym("}") {
                self.bump();
                break;
            }
            if self.is_kw("var") {
                self.bump();
                loop {
                    f.locals.push(self.ident()?);
                    if self.is_sym(",") {
                        self.bump();
                    } else {
                        break;
                    }
                }
            } else if self.is_kw("buf") {
                self.bump();
                let name = self.ident()?;
                self.expect_sym("[")?;
                let len = self.int()? as usize;
                self.expect_sym("]")?;
                let region = if self.is_kw("protected") {
                    self.bump();
                    Region::Protected
                } else {
                    Region::Unprotected
                };
                f.buffers.push(BufferDecl { name, len, region });
            } else {
                let s = self.statement()?;
                f.body.push(s);
            }
            self.end_of_statement()?;
        }
        Ok(f)
    }

    fn block(&mut self) -> PResult<Block> {
        self.expect_sym("{")?;
        let mut out = Vec::new();
        loop {
            self.skip_newlines();
            if self.is_sym("}") {
                self.bump();
                return Ok(out);
            }
            out.push(self.statement()?);
            self.end_of_statement()?;
        }
    }

    fn operand(&mut self) -> PResult<Operand> {
        match self.peek().clone() {
            Tok::Int(n) => {
                self.bump();
                Ok(Operand::Lit(n))
            }
            Tok::Reg(r) => {
                self.bump();
                Ok(Operand::Reg(r))
            }
            Tok::Ident(s) if !KEYWORDS.contains(&s.as_str()) => {
                self.bump();
                Ok(Operand::Var(s))
            }
            _ => self.error(&["identifier", "integer", "register"]),
        }
    }

    fn buffer_ref(&mut self) -> PResult<BufferRef> {
        if self.is_sym("@") {
            self.bump();
            Ok(BufferRef::Raw(self.operand()?))
        } else {
            Ok(BufferRef::Named(self.ident()?))
        }
    }

    fn indexed(&mut self) -> PResult<(BufferRef, Operand)> {
        let buf = self.buffer_ref()?;
        self.expect_sym("[")?;
        let index = self.operand()?;
        self.expect_sym("]")?;
        Ok((buf, index))
    }

    fn call_tail(&mut self) -> PResult<(String, Vec<Operand>)> {
        let callee = self.ident()?;
        self.expect_sym("(")?;
        let mut args = Vec::new();
        if !self.is_sym(")") {
            loop {
                args.push(self.operand()?);
                if self.is_sym(",") {
                    self.bump();
                } else {
                    break;
                }
            }
        }
        self.expect_sym(")")?;
        Ok((callee, args))
    }

    fn binop(&self) -> Option<BinOp> {
        match self.peek() {
            Tok::Sym(s) => BinOp::ALL.iter().copied().find(|op| op.symbol() == *s),
            _ => None,
        }
    }

    fn statement(&mut self) -> PResult<Instr> {
        let kw = match self.peek() {
            Tok::Ident(s) => s.clone(),
            _ => return self.error(&["statement"]),
        };
        match kw.as_str() {
            "store" => {
                self.bump();
                let (buf, index) = self.indexed()?;
                self.expect_sym("=")?;
                let src = self.operand()?;
                Ok(Instr::Store { buf, index, src })
            }
            "if" => {
                self.bump();
                let cond = self.operand()?;
                let then_block = self.block()?;
                let else_block = if self.is_kw("else") {
                    self.bump();
                    self.block()?
                } else {
                    Vec::new()
                };
                Ok(Instr::If { cond, then_block, else_block, site: 0 })
            }
            "loop" => {
                self.bump();
                let counter = self.ident()?;
                let bound = self.int()?;
                let body = self.block()?;
                Ok(Instr::Loop { counter, bound, body })
            }
            "call" => {
                self.bump();
                let (callee, args) = self.call_tail()?;
                Ok(Instr::Call { dst: None, callee, args })
            }
            "return" => {
                self.bump();
                match self.peek() {
                    Tok::Newline | Tok::Eof | Tok::Sym("}") => Ok(Instr::Return(None)),
                    _ => Ok(Instr::Return(Some(self.operand()?))),
                }
            }
            "memzero" => {
                self.bump();
                Ok(Instr::MemZero(self.ident()?))
            }
            "fence" => {
                self.bump();
                Ok(Instr::Fence)
            }
            "clearregs" => {
                self.bump();
                Ok(Instr::ClearRegs)
            }
            "pkru" => {
                self.bump();
                let on = if self.is_kw("on") {
                    true
                } else if self.is_kw("off") {
                    false
                } else {
                    return self.error(&["on", "off"]);
                };
                self.bump();
                Ok(Instr::Pkru(on))
            }
            "pstack" => {
                self.bump();
                let op = [StackOp::Save, StackOp::CopyArgs, StackOp::Switch, StackOp::Restore]
                    .into_iter()
                    .find(|op| self.is_kw(op.keyword()));
                match op {
                    Some(op) => {
                        self.bump();
                        Ok(Instr::Stack(op))
                    }
                    None => self.error(&["save", "args", "switch", "restore"]),
                }
            }
            _ => {
                let dst = self.ident()?;
                self.expect_sym("=")?;
                if self.is_kw("load") {
                    self.bump();
                    let (buf, index) = self.indexed()?;
                    return Ok(Instr::Load { dst, buf, index });
                }
                if self.is_kw("call") {
                    self.bump();
                    let (callee, args) = self.call_tail()?;
                    return Ok(Instr::Call { dst: Some(dst), callee, args });
                }
                let lhs = self.operand()?;
                match self.binop() {
                    Some(op) => {
                        self.bump();
                        let rhs = self.operand()?;
                        Ok(Instr::BinOp { dst, op, lhs, rhs })
                    }
                    None => Ok(Instr::Assign { dst, src: lhs }),
                }
            }
        }
    }
}

fn scope_error(pos: (usize, usize), message: String) -> ParseError {
    ParseError { line: pos.0, column: pos.1, message, expected: vec![] }
}

/// Parse any unit of source text, checking that every function is well
/// scoped. Secrets are visible to lib functions only.
pub fn parse_unit(text: &str) -> Result<Unit, ParseError> {
    let toks = lex(text)?;
    let mut parser = Parser { toks, pos: 0 };
    let (unit, positions) = parser.unit()?;
    let mut seen = BTreeSet::new();
    for (f, pos) in unit.functions.iter().zip(&positions) {
        if !seen.insert(f.name.as_str()) {
            return Err(scope_error(*pos, format!("duplicate function `{}`", f.name)));
        }
    }
    let known: BTreeSet<&str> = unit
        .functions
        .iter()
        .map(|f| f.name.as_str())
        .chain(unit.api.keys().map(String::as_str))
        .collect();
    for (f, pos) in unit.functions.iter().zip(&positions) {
        check_scope(f, &unit.secrets, &known).map_err(|m| scope_error(*pos, m))?;
    }
    Ok(unit)
}

/// Verify the well-scopedness of one function. `callable` holds every name
/// a call may target.
pub(crate) fn check_scope(
    f: &Function,
    secrets: &SecretContext,
    callable: &BTreeSet<&str>,
) -> Result<(), String> {
    let mut names = BTreeSet::new();
    for n in f.declared_names() {
        if !names.insert(n) {
            return Err(format!("`{}` declares `{n}` twice", f.name));
        }
    }
    for d in &f.declassify {
        if !matches!(f.param(d).map(|p| p.kind), Some(ValueKind::Buf(_))) {
            return Err(format!("`{}` declassifies `{d}`, which is not a buffer parameter", f.name));
        }
    }
    let is_buffer = |n: &str| {
        f.buffer_len(n).is_some() || (f.label == Label::Lib && secrets.contains(n))
    };
    let scalar = |n: &str| -> Result<(), String> {
        if f.is_scalar(n) {
            Ok(())
        } else {
            Err(format!("`{}` uses undeclared scalar `{n}`", f.name))
        }
    };
    let operand = |o: &Operand| -> Result<(), String> {
        match o {
            Operand::Var(n) => scalar(n),
            _ => Ok(()),
        }
    };
    let buffer = |b: &BufferRef| -> Result<(), String> {
        match b {
            BufferRef::Named(n) if is_buffer(n) => Ok(()),
            BufferRef::Named(n) => Err(format!("`{}` uses undeclared buffer `{n}`", f.name)),
            BufferRef::Raw(o) => operand(o),
        }
    };
    let mut result = Ok(());
    walk(&f.body, &mut |i| {
        if result.is_err() {
            return;
        }
        result = (|| match i {
            Instr::Assign { dst, src } => {
                scalar(dst)?;
                operand(src)
            }
            Instr::BinOp { dst, lhs, rhs, .. } => {
                scalar(dst)?;
                operand(lhs)?;
                operand(rhs)
            }
            Instr::Load { dst, buf, index } => {
                scalar(dst)?;
                buffer(buf)?;
                operand(index)
            }
            Instr::Store { buf, index, src } => {
                buffer(buf)?;
                operand(index)?;
                operand(src)
            }
            Instr::If { cond, .. } => operand(cond),
            Instr::Loop { counter, .. } => scalar(counter),
            Instr::Call { dst, callee, args } => {
                if let Some(d) = dst {
                    scalar(d)?;
                }
                if !callable.contains(callee.as_str()) {
                    return Err(format!("`{}` calls unresolved function `{callee}`", f.name));
                }
                for a in args {
                    match a {
                        Operand::Var(n) if is_buffer(n) => {}
                        other => operand(other)?,
                    }
                }
                Ok(())
            }
            Instr::Return(Some(o)) => operand(o),
            Instr::MemZero(b) if is_buffer(b) => Ok(()),
            Instr::MemZero(b) => Err(format!("`{}` zeroes undeclared buffer `{b}`", f.name)),
            _ => Ok(()),
        })();
    });
    result
}

/// Parse an application program: app functions with a parameterless
/// `main`, calling only each other or declared API holes.
pub fn parse_program(text: &str) -> Result<Program, ParseError> {
    let unit = parse_unit(text)?;
    let at_start = |message: String| ParseError { line: 1, column: 1, message, expected: vec![] };
    if !unit.secrets.is_empty() {
        return Err(at_start("programs may not declare secrets".into()));
    }
    let mut functions = BTreeMap::new();
    for f in unit.functions {
        if f.label != Label::App {
            return Err(at_start(format!("program function `{}` must be labeled app", f.name)));
        }
        functions.insert(f.name.clone(), f);
    }
    match functions.get(ENTRY) {
        Some(m) if m.params.is_empty() => {}
        Some(_) => return Err(at_start(format!("`{ENTRY}` must take no parameters"))),
        None => return Err(at_start(format!("missing entry function `{ENTRY}`"))),
    }
    Ok(Program { functions, entry: ENTRY.to_string(), api: unit.api })
}

/// Parse a library file: secrets, API declarations and lib functions.
/// Functions named in an `api` declaration form the public part.
pub fn parse_library(text: &str) -> Result<LibrarySource, ParseError> {
    let unit = parse_unit(text)?;
    let mut library = Library::default();
    for f in unit.functions {
        if unit.api.contains_key(&f.name) {
            library.public.insert(f.name.clone(), f);
        } else {
            library.private.insert(f.name.clone(), f);
        }
    }
    Ok(LibrarySource { library, api: unit.api, secrets: unit.secrets })
}
