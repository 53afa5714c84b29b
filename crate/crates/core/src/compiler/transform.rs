//! Library rewrites: region relocation, zeroization and API wrapping.

use thiserror::Error;

use super::plan::{Action, MitigationPlan};
use crate::ir::{
    walk, walk_mut, BufferDecl, BufferRef, Function, Instr, Label, Library, Operand,
    Region, StackOp, ValueKind,
};

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum WrapError {
    #[error("`{0}` is already wrapped")]
    AlreadyWrapped(String),
    #[error("wrap target `{0}` is not a public library function")]
    NotPublic(String),
}

/// Name of the private clone holding a wrapped function's original body.
pub fn clone_name(function: &str) -> String {
    format!("__{function}_clone")
}

fn copy_name(param: &str) -> String {
    format!("__copy_{param}")
}

/// Insert `prefix` before every `return` in `body`, and at the end if the
/// body can fall off its last instruction.
fn insert_before_returns(body: &mut Vec<Instr>, prefix: &[Instr]) {
    fn block(b: &mut Vec<Instr>, prefix: &[Instr]) {
        let mut i = 0;
        while i < b.len() {
            match &mut b[i] {
                Instr::Return(_) => {
                    for (k, p) in prefix.iter().enumerate() {
                        b.insert(i + k, p.clone());
                    }
                    i += prefix.len() + 1;
                    continue;
                }
                Instr::If { then_block, else_block, .. } => {
                    block(then_block, prefix);
                    block(else_block, prefix);
                }
                Instr::Loop { body, .. } => block(body, prefix),
                _ => {}
            }
            i += 1;
        }
    }
    block(body, prefix);
    if !matches!(body.last(), Some(Instr::Return(_))) {
        body.extend(prefix.iter().cloned());
    }
}

/// Apply the plan's relocations and zeroizations. Without wrapping, API
/// functions also clear registers before returning.
pub fn relocate_and_zeroize(lib: &Library, plan: &MitigationPlan) -> Library {
    let mut out = lib.clone();
    for action in &plan.actions {
        match action {
            Action::Relocate { function, buffer } => {
                if let Some(f) = function_mut(&mut out, function) {
                    for b in f.buffers.iter_mut().filter(|b| &b.name == buffer) {
                        b.region = Region::Protected;
                    }
                }
            }
            Action::Zeroize { function, buffer } => {
                let mut seq = vec![Instr::MemZero(buffer.clone())];
                if plan.fences() {
                    seq.push(Instr::Fence);
                }
                if let Some(f) = function_mut(&mut out, function) {
                    insert_before_returns(&mut f.body, &seq);
                }
            }
            Action::ClearScratchRegisters => {
                let unwrapped: Vec<String> = lib
                    .public
                    .keys()
                    .filter(|f| !plan.wraps(f))
                    .cloned()
                    .collect();
                for name in unwrapped {
                    if let Some(f) = function_mut(&mut out, &name) {
                        insert_before_returns(&mut f.body, &[Instr::ClearRegs]);
                    }
                }
            }
            Action::Wrap { .. } | Action::CopyBuffer { .. } | Action::FenceAtBoundary { .. } => {}
        }
    }
    out
}

fn function_mut<'a>(lib: &'a mut Library, name: &str) -> Option<&'a mut Function> {
    lib.public.get_mut(name).or_else(|| lib.private.get_mut(name))
}

fn fresh(f: &Function, base: &str) -> String {
    let mut n = base.to_string();
    while f.declared_names().any(|d| d == n) {
        n.push('_');
    }
    n
}

fn copy_loop(counter: &str, tmp: &str, len: usize, from: &str, to: &str) -> Instr {
    Instr::Loop {
        counter: counter.to_string(),
        bound: len as u64,
        body: vec![
            Instr::Load {
                dst: tmp.to_string(),
                buf: BufferRef::Named(from.to_string()),
                index: Operand::Var(counter.to_string()),
            },
            Instr::Store {
                buf: BufferRef::Named(to.to_string()),
                index: Operand::Var(counter.to_string()),
                src: Operand::Var(tmp.to_string()),
            },
        ],
    }
}

fn wrapper(original: &Function, plan: &MitigationPlan) -> Function {
    let name = &original.name;
    let mut w = Function::new(name.clone(), Label::Lib);
    w.params = original.params.clone();
    w.declassify = original.declassify.clone();
    let ret = fresh(&w, "__r");
    let counter = fresh(&w, "__i");
    let tmp = fresh(&w, "__t");
    w.locals = vec![ret.clone()];

    let copies: Vec<(String, usize, bool)> = plan
        .copies(name)
        .filter_map(|(p, back)| match original.param(p)?.kind {
            ValueKind::Buf(n) => Some((p.to_string(), n, back)),
            ValueKind::Val => None,
        })
        .collect();
    if !copies.is_empty() {
        w.locals.push(counter.clone());
        w.locals.push(tmp.clone());
    }

    let fence = plan.fences();
    let mut body = Vec::new();
    if fence {
        body.push(Instr::Fence);
    }
    body.push(Instr::Pkru(true));
    body.push(Instr::Stack(StackOp::Save));
    body.push(Instr::Stack(StackOp::CopyArgs));
    for (p, len, _) in &copies {
        let c = copy_name(p);
        w.buffers.push(BufferDecl { name: c.clone(), len: *len, region: Region::Protected });
        body.push(copy_loop(&counter, &tmp, *len, p, &c));
    }
    body.push(Instr::Stack(StackOp::Switch));
    let args = original
        .params
        .iter()
        .map(|p| match copies.iter().find(|(c, _, _)| *c == p.name) {
            Some((c, _, _)) => Operand::Var(copy_name(c)),
            None => Operand::Var(p.name.clone()),
        })
        .collect();
    body.push(Instr::Call { dst: Some(ret.clone()), callee: clone_name(name), args });
    for (p, len, back) in &copies {
        if *back {
            body.push(copy_loop(&counter, &tmp, *len, &copy_name(p), p));
        }
    }
    body.push(Instr::ClearRegs);
    body.push(Instr::Stack(StackOp::Restore));
    body.push(Instr::Pkru(false));
    if fence {
        body.push(Instr::Fence);
    }
    body.push(Instr::Return(Some(Operand::Var(ret))));
    w.body = body;
    w
}

fn is_wrapper(f: &Function) -> bool {
    let mut found = false;
    walk(&f.body, &mut |i| found |= matches!(i, Instr::Stack(StackOp::Switch)));
    found
}

/// Replace every wrapped API function by a domain-switching wrapper around
/// a private clone of its body. Internal calls go straight to the clone.
pub fn wrap_api(lib: &Library, plan: &MitigationPlan) -> Result<Library, WrapError> {
    let mut out = lib.clone();
    let targets: Vec<String> = plan.wrapped().map(str::to_string).collect();
    for f in &targets {
        let original = out.public.get(f).ok_or_else(|| WrapError::NotPublic(f.clone()))?;
        if is_wrapper(original) || out.private.contains_key(&clone_name(f)) {
            return Err(WrapError::AlreadyWrapped(f.clone()));
        }
    }
    for f in &targets {
        let original = out.public[f].clone();
        let mut clone = original.clone();
        clone.name = clone_name(f);
        out.private.insert(clone.name.clone(), clone);
        out.public.insert(f.clone(), wrapper(&original, plan));
    }
    for func in out.public.values_mut().chain(out.private.values_mut()) {
        if targets.contains(&func.name) {
            continue;
        }
        walk_mut(&mut func.body, &mut |i| {
            if let Instr::Call { callee, .. } = i {
                if targets.contains(callee) {
                    *callee = clone_name(callee);
                }
            }
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prefix_lands_before_nested_and_implicit_returns() {
        let mut body = vec![
            Instr::If {
                cond: Operand::Lit(1),
                then_block: vec![Instr::Return(None)],
                else_block: vec![],
                site: 0,
            },
            Instr::Fence,
        ];
        insert_before_returns(&mut body, &[Instr::ClearRegs]);
        let Instr::If { then_block, .. } = &body[0] else { panic!() };
        assert_eq!(then_block, &vec![Instr::ClearRegs, Instr::Return(None)]);
        assert_eq!(body.last(), Some(&Instr::ClearRegs));
    }
}
