//! The library/application IR.
//!
//! A unit of source text declares secret buffers (`secret`), API holes
//! (`api`) and functions labeled `lib` or `app`. Application programs are
//! app-labeled functions with a `main` entry; libraries are lib-labeled
//! functions split into a public part (one per API name) and a private part.

mod library;
mod parser;
mod printer;

use std::collections::{BTreeMap, BTreeSet};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

pub use library::{check_library, link, LinkError, WellFormednessError, WholeProgram};
pub use parser::{parse_library, parse_program, parse_unit, ParseError};

/// Machine word. One memory cell holds one value.
pub type Value = u64;

/// Name of the entry function of every application program.
pub const ENTRY: &str = "main";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Lib,
    App,
}

/// Memory region. The protected region is only accessible while the
/// protection key is enabled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Unprotected,
    Protected,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ValueKind {
    /// A scalar.
    Val,
    /// A pointer to a buffer of the given static length.
    Buf(usize),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Param {
    pub name: String,
    pub kind: ValueKind,
}

impl Param {
    pub fn val(name: impl Into<String>) -> Self {
        Param { name: name.into(), kind: ValueKind::Val }
    }

    pub fn buf(name: impl Into<String>, len: usize) -> Self {
        Param { name: name.into(), kind: ValueKind::Buf(len) }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BufferDecl {
    pub name: String,
    pub len: usize,
    pub region: Region,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Operand {
    Var(String),
    Lit(Value),
    /// Direct read of a scratch register.
    Reg(u8),
}

impl Operand {
    pub fn var(name: impl Into<String>) -> Self {
        Operand::Var(name.into())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    And,
    Or,
    Xor,
    Shl,
    Shr,
    Lt,
    Eq,
}

impl BinOp {
    pub fn eval(self, a: Value, b: Value) -> Value {
        match self {
            BinOp::Add => a.wrapping_add(b),
            BinOp::Sub => a.wrapping_sub(b),
            BinOp::Mul => a.wrapping_mul(b),
            BinOp::And => a & b,
            BinOp::Or => a | b,
            BinOp::Xor => a ^ b,
            BinOp::Shl => a.wrapping_shl((b & 63) as u32),
            BinOp::Shr => a.wrapping_shr((b & 63) as u32),
            BinOp::Lt => (a < b) as Value,
            BinOp::Eq => (a == b) as Value,
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::And => "&",
            BinOp::Or => "|",
            BinOp::Xor => "^",
            BinOp::Shl => "<<",
            BinOp::Shr => ">>",
            BinOp::Lt => "<",
            BinOp::Eq => "==",
        }
    }

    pub const ALL: [BinOp; 10] = [
        BinOp::Add,
        BinOp::Sub,
        BinOp::Mul,
        BinOp::And,
        BinOp::Or,
        BinOp::Xor,
        BinOp::Shl,
        BinOp::Shr,
        BinOp::Lt,
        BinOp::Eq,
    ];
}

/// Target of a load or store.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum BufferRef {
    /// A declared buffer, buffer parameter, or secret buffer.
    Named(String),
    /// A raw address. The only source of memory unsafety in the language.
    Raw(Operand),
}

/// Stack manipulation performed by API wrappers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StackOp {
    /// Save the current stack pointer to the top of the protected stack.
    Save,
    /// Copy the current function's arguments onto the protected stack.
    CopyArgs,
    /// Make the protected stack the active stack.
    Switch,
    /// Make the program stack the active stack again.
    Restore,
}

impl StackOp {
    pub fn keyword(self) -> &'static str {
        match self {
            StackOp::Save => "save",
            StackOp::CopyArgs => "args",
            StackOp::Switch => "switch",
            StackOp::Restore => "restore",
        }
    }
}

pub type Block = Vec<Instr>;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Instr {
    Assign { dst: String, src: Operand },
    BinOp { dst: String, op: BinOp, lhs: Operand, rhs: Operand },
    Load { dst: String, buf: BufferRef, index: Operand },
    Store { buf: BufferRef, index: Operand, src: Operand },
    /// `site` is assigned at link time; parsing always yields 0.
    If { cond: Operand, then_block: Block, else_block: Block, site: u32 },
    Loop { counter: String, bound: u64, body: Block },
    Call { dst: Option<String>, callee: String, args: Vec<Operand> },
    Return(Option<Operand>),
    MemZero(String),
    Fence,
    Pkru(bool),
    Stack(StackOp),
    ClearRegs,
}

impl Instr {
    /// Wrapper-only instructions; application code may not use them.
    pub fn is_privileged(&self) -> bool {
        matches!(self, Instr::Pkru(_) | Instr::Stack(_) | Instr::ClearRegs)
    }
}

/// Visit every instruction of a block, depth first, in program order.
pub fn walk<'a>(block: &'a [Instr], f: &mut impl FnMut(&'a Instr)) {
    for instr in block {
        f(instr);
        match instr {
            Instr::If { then_block, else_block, .. } => {
                walk(then_block, f);
                walk(else_block, f);
            }
            Instr::Loop { body, .. } => walk(body, f),
            _ => {}
        }
    }
}

pub fn walk_mut(block: &mut [Instr], f: &mut impl FnMut(&mut Instr)) {
    for instr in block.iter_mut() {
        f(instr);
        match instr {
            Instr::If { then_block, else_block, .. } => {
                walk_mut(then_block, f);
                walk_mut(else_block, f);
            }
            Instr::Loop { body, .. } => walk_mut(body, f),
            _ => {}
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Function {
    pub name: String,
    pub label: Label,
    pub params: Vec<Param>,
    pub locals: Vec<String>,
    pub buffers: Vec<BufferDecl>,
    pub body: Block,
    /// Buffer parameters whose final contents are public.
    pub declassify: BTreeSet<String>,
}

impl Function {
    pub fn new(name: impl Into<String>, label: Label) -> Self {
        Function {
            name: name.into(),
            label,
            params: Vec::new(),
            locals: Vec::new(),
            buffers: Vec::new(),
            body: Vec::new(),
            declassify: BTreeSet::new(),
        }
    }

    pub fn signature(&self) -> Signature {
        Signature { params: self.params.clone(), declassify: self.declassify.clone() }
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn buffer(&self, name: &str) -> Option<&BufferDecl> {
        self.buffers.iter().find(|b| b.name == name)
    }

    pub fn is_scalar(&self, name: &str) -> bool {
        self.locals.iter().any(|l| l == name)
            || self.params.iter().any(|p| p.name == name && p.kind == ValueKind::Val)
    }

    /// Length of a buffer visible by name inside this function (local buffer
    /// or buffer parameter), not counting secrets.
    pub fn buffer_len(&self, name: &str) -> Option<usize> {
        if let Some(b) = self.buffer(name) {
            return Some(b.len);
        }
        match self.param(name)?.kind {
            ValueKind::Buf(n) => Some(n),
            ValueKind::Val => None,
        }
    }

    /// All names declared in the function, in declaration order.
    pub fn declared_names(&self) -> impl Iterator<Item = &str> {
        self.params
            .iter()
            .map(|p| p.name.as_str())
            .chain(self.locals.iter().map(String::as_str))
            .chain(self.buffers.iter().map(|b| b.name.as_str()))
    }

    /// Register that a scalar is allocated to.
    pub fn register_slot(&self, name: &str) -> Option<u8> {
        self.params
            .iter()
            .map(|p| p.name.as_str())
            .chain(self.locals.iter().map(String::as_str))
            .position(|n| n == name)
            .map(|i| (i % crate::semantics::SCRATCH_REGISTERS) as u8)
    }

    /// Callees named anywhere in the body.
    pub fn callees(&self) -> BTreeSet<&str> {
        let mut out = BTreeSet::new();
        walk(&self.body, &mut |i| {
            if let Instr::Call { callee, .. } = i {
                out.insert(callee.as_str());
            }
        });
        out
    }
}

/// API signature: parameter names and kinds, plus declassified outputs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Signature {
    pub params: Vec<Param>,
    pub declassify: BTreeSet<String>,
}

impl Signature {
    /// Two signatures match when kinds agree positionally and the same
    /// positions are declassified. Parameter names may differ.
    pub fn matches(&self, other: &Signature) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| a.kind == b.kind)
            && self.declassified_positions() == other.declassified_positions()
    }

    fn declassified_positions(&self) -> Vec<usize> {
        self.params
            .iter()
            .enumerate()
            .filter(|(_, p)| self.declassify.contains(&p.name))
            .map(|(i, _)| i)
            .collect()
    }
}

/// The API context: functions the application may call.
pub type ApiContext = BTreeMap<String, Signature>;

/// The secret context: secret buffers and their lengths, in layout order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SecretContext {
    buffers: IndexMap<String, usize>,
}

impl SecretContext {
    pub fn new() -> Self {
        Self::default()
    }

    /// Fails on a duplicate name or a zero length.
    pub fn insert(&mut self, name: impl Into<String>, len: usize) -> Result<(), String> {
        let name = name.into();
        if len == 0 {
            return Err(format!("secret `{name}` must have length >= 1"));
        }
        if self.buffers.contains_key(&name) {
            return Err(format!("duplicate secret `{name}`"));
        }
        self.buffers.insert(name, len);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<usize> {
        self.buffers.get(name).copied()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.buffers.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, usize)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn len(&self) -> usize {
        self.buffers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffers.is_empty()
    }

    pub fn total_cells(&self) -> usize {
        self.buffers.values().sum()
    }
}

impl<S: Into<String>> FromIterator<(S, usize)> for SecretContext {
    fn from_iter<I: IntoIterator<Item = (S, usize)>>(iter: I) -> Self {
        let mut ctx = SecretContext::new();
        for (name, len) in iter {
            ctx.insert(name, len).expect("valid secret context");
        }
        ctx
    }
}

/// An application program.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Program {
    pub functions: BTreeMap<String, Function>,
    pub entry: String,
    /// API holes the program may call.
    pub api: ApiContext,
}

/// A Γ-Δ library: lib-labeled implementations of the API plus private helpers.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Library {
    pub public: BTreeMap<String, Function>,
    pub private: BTreeMap<String, Function>,
}

impl Library {
    pub fn function(&self, name: &str) -> Option<&Function> {
        self.public.get(name).or_else(|| self.private.get(name))
    }

    pub fn functions(&self) -> impl Iterator<Item = &Function> {
        self.public.values().chain(self.private.values())
    }

    pub fn functions_mut(&mut self) -> impl Iterator<Item = &mut Function> {
        self.public.values_mut().chain(self.private.values_mut())
    }

    pub fn is_public(&self, name: &str) -> bool {
        self.public.contains_key(name)
    }

    /// The API context this library's public part implements.
    pub fn api(&self) -> ApiContext {
        self.public.iter().map(|(n, f)| (n.clone(), f.signature())).collect()
    }
}

/// A parsed library file: the library together with its Γ and Δ.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LibrarySource {
    pub library: Library,
    pub api: ApiContext,
    pub secrets: SecretContext,
}

/// Everything a source file may declare.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Unit {
    pub secrets: SecretContext,
    pub api: ApiContext,
    pub functions: Vec<Function>,
}
