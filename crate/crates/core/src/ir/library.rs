use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use super::parser::check_scope;
use super::*;

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum WellFormednessError {
    #[error("library does not implement API function `{0}`")]
    MissingApiFunction(String),
    #[error("library function `{0}` does not match its API signature")]
    SignatureMismatch(String),
    #[error("library function `{0}` is not labeled lib")]
    NonLibLabel(String),
    #[error("library references secret buffer `{0}` absent from the secret context")]
    UnknownSecret(String),
    #[error("library function is ill-scoped: {0}")]
    IllScoped(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum LinkError {
    #[error("application calls private library function `{0}`")]
    AppCallsPrivate(String),
    #[error("call to unresolved function `{0}`")]
    UnresolvedCall(String),
    #[error("application function `{0}` is labeled lib")]
    AppLabeledLib(String),
    #[error("application and library both define `{0}`")]
    NameClash(String),
    #[error("call cycle through `{0}`")]
    Recursive(String),
    #[error("application function `{0}` uses a wrapper-only instruction")]
    PrivilegedInApp(String),
    #[error("missing entry function `{0}`")]
    MissingEntry(String),
}

/// Check that `lib` is a Γ-Δ library: it implements every API function with
/// a matching signature, every function is lib-labeled, and every non-local
/// buffer it touches is a declared secret.
pub fn check_library(
    lib: &Library,
    api: &ApiContext,
    secrets: &SecretContext,
) -> Result<(), WellFormednessError> {
    for (name, sig) in api {
        let f = lib
            .public
            .get(name)
            .ok_or_else(|| WellFormednessError::MissingApiFunction(name.clone()))?;
        if !f.signature().matches(sig) {
            return Err(WellFormednessError::SignatureMismatch(name.clone()));
        }
    }
    for f in lib.functions() {
        if f.label != Label::Lib {
            return Err(WellFormednessError::NonLibLabel(f.name.clone()));
        }
    }
    for f in lib.functions() {
        let mut unknown = None;
        let mut note = |name: &str| {
            if unknown.is_none() && f.buffer_len(name).is_none() && !secrets.contains(name) {
                unknown = Some(name.to_string());
            }
        };
        walk(&f.body, &mut |i| match i {
            Instr::Load { buf: BufferRef::Named(n), .. }
            | Instr::Store { buf: BufferRef::Named(n), .. }
            | Instr::MemZero(n) => note(n),
            Instr::Call { args, .. } => {
                for a in args {
                    if let Operand::Var(n) = a {
                        if !f.is_scalar(n) {
                            note(n);
                        }
                    }
                }
            }
            _ => {}
        });
        if let Some(name) = unknown {
            return Err(WellFormednessError::UnknownSecret(name));
        }
        let callable: BTreeSet<&str> = lib.functions().map(|g| g.name.as_str()).collect();
        check_scope(f, secrets, &callable).map_err(WellFormednessError::IllScoped)?;
    }
    Ok(())
}

/// A closed program: library and application linked together, with branch
/// sites numbered.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WholeProgram {
    pub functions: BTreeMap<String, Function>,
    pub entry: String,
    /// Names of the library's public functions.
    pub api: BTreeSet<String>,
    /// Number of static branch sites.
    pub branch_sites: u32,
}

impl WholeProgram {
    pub fn function(&self, name: &str) -> Option<&Function> {
        self.functions.get(name)
    }

    /// Close an application program on its own (it must make no API calls).
    pub fn standalone(app: &Program) -> Result<Self, LinkError> {
        link(&Library::default(), app)
    }

    /// Number of cross-domain call edges in the call graph.
    pub fn cross_domain_edges(&self) -> usize {
        self.functions
            .values()
            .filter(|f| f.label == Label::App)
            .map(|f| f.callees().into_iter().filter(|c| self.api.contains(*c)).count())
            .sum()
    }
}

/// Link library `lib` with application `app`. Every API call site resolves
/// to the library's public function; the application cannot name private
/// library functions.
pub fn link(lib: &Library, app: &Program) -> Result<WholeProgram, LinkError> {
    let mut functions = BTreeMap::new();
    for f in app.functions.values() {
        if f.label != Label::App {
            return Err(LinkError::AppLabeledLib(f.name.clone()));
        }
        let mut privileged = false;
        walk(&f.body, &mut |i| privileged |= i.is_privileged());
        if privileged {
            return Err(LinkError::PrivilegedInApp(f.name.clone()));
        }
        for callee in f.callees() {
            if app.functions.contains_key(callee) || lib.public.contains_key(callee) {
                continue;
            }
            if lib.private.contains_key(callee) {
                return Err(LinkError::AppCallsPrivate(callee.to_string()));
            }
            return Err(LinkError::UnresolvedCall(callee.to_string()));
        }
        functions.insert(f.name.clone(), f.clone());
    }
    for f in lib.functions() {
        if functions.contains_key(&f.name) {
            return Err(LinkError::NameClash(f.name.clone()));
        }
        for callee in f.callees() {
            if lib.function(callee).is_none() {
                return Err(LinkError::UnresolvedCall(callee.to_string()));
            }
        }
        functions.insert(f.name.clone(), f.clone());
    }
    if !functions.contains_key(&app.entry) {
        return Err(LinkError::MissingEntry(app.entry.clone()));
    }
    check_acyclic(&functions)?;

    let mut site = 0u32;
    for f in functions.values_mut() {
        walk_mut(&mut f.body, &mut |i| {
            if let Instr::If { site: s, .. } = i {
                *s = site;
                site += 1;
            }
        });
    }
    Ok(WholeProgram {
        functions,
        entry: app.entry.clone(),
        api: lib.public.keys().cloned().collect(),
        branch_sites: site,
    })
}

fn check_acyclic(functions: &BTreeMap<String, Function>) -> Result<(), LinkError> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        Active,
        Done,
    }
    fn visit<'a>(
        name: &'a str,
        functions: &'a BTreeMap<String, Function>,
        marks: &mut BTreeMap<&'a str, Mark>,
    ) -> Result<(), LinkError> {
        match marks.get(name) {
            Some(Mark::Done) => return Ok(()),
            Some(Mark::Active) => return Err(LinkError::Recursive(name.to_string())),
            None => {}
        }
        marks.insert(name, Mark::Active);
        if let Some(f) = functions.get(name) {
            for c in f.callees() {
                visit(c, functions, marks)?;
            }
        }
        marks.insert(name, Mark::Done);
        Ok(())
    }
    let mut marks = BTreeMap::new();
    for name in functions.keys() {
        visit(name, functions, &mut marks)?;
    }
    Ok(())
}
