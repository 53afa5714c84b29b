//! Flow-insensitive secret-taint analysis over a library.
//!
//! Every name in a function (parameter, local, buffer) carries one taint bit.
//! Secret buffers are secret from the start, register reads are treated as
//! secret, and the fixpoint joins facts across assignments, loads, stores
//! and calls. Callee summaries are context-insensitive: a parameter is secret
//! if any call site passes a secret argument, and buffer arguments alias
//! their parameters in both directions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::ir::{
    walk, ApiContext, BufferRef, Function, Instr, Library, Operand, SecretContext, ValueKind,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Taint {
    Public,
    Secret,
}

impl Taint {
    pub fn join(self, other: Taint) -> Taint {
        self.max(other)
    }

    pub fn is_secret(self) -> bool {
        self == Taint::Secret
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionTaint {
    pub names: BTreeMap<String, Taint>,
    #[serde(rename = "return")]
    pub ret: Option<Taint>,
    /// Buffer parameters this function, or a callee through it, stores
    /// secret data into.
    pub written: BTreeMap<String, Taint>,
}

impl FunctionTaint {
    pub fn get(&self, name: &str) -> Taint {
        self.names.get(name).copied().unwrap_or(Taint::Public)
    }

    pub fn ret(&self) -> Taint {
        self.ret.unwrap_or(Taint::Public)
    }

    pub fn written(&self, param: &str) -> Taint {
        self.written.get(param).copied().unwrap_or(Taint::Public)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaintMap {
    /// Internal view: taint anywhere inside each function.
    pub functions: BTreeMap<String, FunctionTaint>,
    /// Boundary view of API parameters: secret if the call leaves secret
    /// data in them, with declassified outputs public.
    pub boundary: BTreeMap<String, BTreeMap<String, Taint>>,
}

impl TaintMap {
    pub fn get(&self, function: &str, name: &str) -> Taint {
        self.functions.get(function).map_or(Taint::Public, |f| f.get(name))
    }

    pub fn boundary(&self, function: &str, param: &str) -> Taint {
        self.boundary
            .get(function)
            .and_then(|m| m.get(param))
            .copied()
            .unwrap_or(Taint::Public)
    }
}

struct Analysis<'a> {
    lib: &'a Library,
    secrets: &'a SecretContext,
    map: BTreeMap<String, FunctionTaint>,
    changed: bool,
}

impl<'a> Analysis<'a> {
    fn taint_of(&self, f: &Function, name: &str) -> Taint {
        if !f.declared_names().any(|n| n == name) && self.secrets.contains(name) {
            return Taint::Secret;
        }
        self.map[&f.name].get(name)
    }

    fn operand(&self, f: &Function, o: &Operand) -> Taint {
        match o {
            Operand::Lit(_) => Taint::Public,
            Operand::Reg(_) => Taint::Secret,
            Operand::Var(n) => self.taint_of(f, n),
        }
    }

    fn buffer(&self, f: &Function, b: &BufferRef) -> Taint {
        match b {
            BufferRef::Named(n) => self.taint_of(f, n),
            BufferRef::Raw(_) => Taint::Secret,
        }
    }

    fn raise(&mut self, function: &str, name: &str, t: Taint) {
        if !t.is_secret() {
            return;
        }
        let entry = self
            .map
            .get_mut(function)
            .expect("function present")
            .names
            .entry(name.to_string())
            .or_insert(Taint::Public);
        if *entry != Taint::Secret {
            *entry = Taint::Secret;
            self.changed = true;
        }
    }

    fn raise_written(&mut self, function: &str, param: &str, t: Taint) {
        if !t.is_secret() {
            return;
        }
        let f = self.lib.function(function).expect("function present");
        if !f.params.iter().any(|p| p.name == param) {
            return;
        }
        let entry = self
            .map
            .get_mut(function)
            .expect("function present")
            .written
            .entry(param.to_string())
            .or_insert(Taint::Public);
        if *entry != Taint::Secret {
            *entry = Taint::Secret;
            self.changed = true;
        }
    }

    fn raise_ret(&mut self, function: &str, t: Taint) {
        let entry = &mut self.map.get_mut(function).expect("function present").ret;
        let joined = entry.map_or(t, |old| old.join(t));
        if *entry != Some(joined) {
            *entry = Some(joined);
            self.changed = true;
        }
    }

    fn pass(&mut self, f: &'a Function) {
        let mut instrs = Vec::new();
        walk(&f.body, &mut |i| instrs.push(i));
        for i in instrs {
            match i {
                Instr::Assign { dst, src } => {
                    let t = self.operand(f, src);
                    self.raise(&f.name, dst, t);
                }
                Instr::BinOp { dst, lhs, rhs, .. } => {
                    let t = self.operand(f, lhs).join(self.operand(f, rhs));
                    self.raise(&f.name, dst, t);
                }
                Instr::Load { dst, buf, index } => {
                    let t = self.buffer(f, buf).join(self.operand(f, index));
                    self.raise(&f.name, dst, t);
                }
                Instr::Store { buf: BufferRef::Named(b), index, src } => {
                    let t = self.operand(f, src).join(self.operand(f, index));
                    if !self.secrets.contains(b) || f.declared_names().any(|n| n == b) {
                        self.raise(&f.name, b, t);
                        self.raise_written(&f.name, b, t);
                    }
                }
                Instr::Store { .. } => {}
                Instr::Return(o) => {
                    let t = o.as_ref().map_or(Taint::Public, |o| self.operand(f, o));
                    self.raise_ret(&f.name, t);
                }
                Instr::Call { dst, callee, args } => {
                    let Some(g) = self.lib.function(callee) else { continue };
                    for (a, p) in args.iter().zip(&g.params) {
                        let at = self.operand(f, a);
                        self.raise(&g.name, &p.name, at);
                        if let (ValueKind::Buf(_), Operand::Var(n)) = (p.kind, a) {
                            let pt = self.map[&g.name].get(&p.name);
                            self.raise(&f.name, n, pt);
                            let wt = self.map[&g.name].written(&p.name);
                            self.raise_written(&f.name, n, wt);
                        }
                    }
                    if let Some(d) = dst {
                        let rt = self.map[&g.name].ret();
                        self.raise(&f.name, d, rt);
                    }
                }
                Instr::If { .. }
                | Instr::Loop { .. }
                | Instr::MemZero(_)
                | Instr::Fence
                | Instr::Pkru(_)
                | Instr::Stack(_)
                | Instr::ClearRegs => {}
            }
        }
    }
}

/// Compute the taint fixpoint for `lib` given its secret buffers.
pub fn taint_analysis(lib: &Library, api: &ApiContext, secrets: &SecretContext) -> TaintMap {
    let mut a = Analysis {
        lib,
        secrets,
        map: lib.functions().map(|f| (f.name.clone(), FunctionTaint::default())).collect(),
        changed: true,
    };
    while a.changed {
        a.changed = false;
        for f in lib.functions() {
            a.pass(f);
        }
    }
    let functions = a.map;
    let boundary = api
        .iter()
        .filter_map(|(name, sig)| {
            let ft = functions.get(name)?;
            let params = sig
                .params
                .iter()
                .map(|p| {
                    let t = if sig.declassify.contains(&p.name) {
                        Taint::Public
                    } else {
                        ft.written(&p.name)
                    };
                    (p.name.clone(), t)
                })
                .collect();
            Some((name.clone(), params))
        })
        .collect();
    TaintMap { functions, boundary }
}
