//! Per-model choice of mitigation actions.
//!
//! | model              | actions                                                        |
//! |--------------------|----------------------------------------------------------------|
//! | memory-safe        | clear registers, zeroize secret scratch params                 |
//! | read-only          | + relocate secret locals, wrap every API function              |
//! | memory-unsafe      | same as read-only                                              |
//! | speculative        | read-only + fences at wrapper entry/exit and after memzero     |
//! | parallel-read-only | read-only + copy buffers for declassified and scratch params   |

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::taint::TaintMap;
use crate::attackers::AttackerModel;
use crate::ir::{ApiContext, Library, ValueKind};

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Action {
    ClearScratchRegisters,
    /// Move a secret-tainted local buffer to the protected region.
    Relocate { function: String, buffer: String },
    /// Zero a buffer before every return of `function`.
    Zeroize { function: String, buffer: String },
    Wrap { function: String },
    /// Run the library on a protected copy of an API buffer parameter.
    CopyBuffer { function: String, param: String, write_back: bool },
    FenceAtBoundary { function: String },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MitigationPlan {
    pub model: AttackerModel,
    pub actions: BTreeSet<Action>,
}

impl MitigationPlan {
    pub fn wraps(&self, function: &str) -> bool {
        self.actions.contains(&Action::Wrap { function: function.to_string() })
    }

    pub fn wrapped(&self) -> impl Iterator<Item = &str> {
        self.actions.iter().filter_map(|a| match a {
            Action::Wrap { function } => Some(function.as_str()),
            _ => None,
        })
    }

    pub fn copies(&self, function: &str) -> impl Iterator<Item = (&str, bool)> + '_ {
        let function = function.to_string();
        self.actions.iter().filter_map(move |a| match a {
            Action::CopyBuffer { function: f, param, write_back } if *f == function => {
                Some((param.as_str(), *write_back))
            }
            _ => None,
        })
    }

    pub fn fences(&self) -> bool {
        matches!(self.model, AttackerModel::Speculative(_))
    }
}

/// Choose mitigations for `lib` against `model`.
pub fn plan(
    lib: &Library,
    api: &ApiContext,
    taint: &TaintMap,
    model: &AttackerModel,
) -> MitigationPlan {
    let mut actions = BTreeSet::new();
    actions.insert(Action::ClearScratchRegisters);

    // Secret data left in the application's own buffers is visible to every
    // attacker, so scratch parameters are zeroized in all models.
    for (f, sig) in api {
        for p in &sig.params {
            if matches!(p.kind, ValueKind::Buf(_))
                && !sig.declassify.contains(&p.name)
                && taint.boundary(f, &p.name).is_secret()
            {
                actions.insert(Action::Zeroize { function: f.clone(), buffer: p.name.clone() });
            }
        }
    }

    if matches!(model, AttackerModel::MemorySafe) {
        return MitigationPlan { model: model.clone(), actions };
    }

    for f in lib.functions() {
        for b in &f.buffers {
            if taint.get(&f.name, &b.name).is_secret() {
                actions.insert(Action::Relocate { function: f.name.clone(), buffer: b.name.clone() });
            }
        }
    }
    for f in api.keys() {
        actions.insert(Action::Wrap { function: f.clone() });
    }

    match model {
        AttackerModel::Speculative(_) => {
            for f in api.keys() {
                actions.insert(Action::FenceAtBoundary { function: f.clone() });
            }
        }
        AttackerModel::ParallelReadOnly { .. } => {
            for (f, sig) in api {
                for p in &sig.params {
                    if !matches!(p.kind, ValueKind::Buf(_)) {
                        continue;
                    }
                    if sig.declassify.contains(&p.name) {
                        actions.insert(Action::CopyBuffer {
                            function: f.clone(),
                            param: p.name.clone(),
                            write_back: true,
                        });
                    } else if taint.boundary(f, &p.name).is_secret() {
                        actions.insert(Action::CopyBuffer {
                            function: f.clone(),
                            param: p.name.clone(),
                            write_back: false,
                        });
                    }
                }
            }
        }
        _ => {}
    }
    MitigationPlan { model: model.clone(), actions }
}
