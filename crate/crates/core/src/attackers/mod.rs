//! Attacker models as trace-safety predicates, and generators of
//! application contexts for each model.

mod generate;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ir::{
    link, ApiContext, Function, Instr, Label, Library, LinkError, Operand, Program,
    SecretContext, ValueKind,
};
use crate::semantics::{initial_states, traces, Event, SemanticsError, Trace};
use crate::speculation::SpeculatorModel;

pub use generate::{generate_attackers, generate_attackers_with, GeneratorConfig};

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackerModel {
    /// Neither reads nor writes out of bounds.
    MemorySafe,
    /// May read out of bounds.
    ReadOnly,
    /// May read and write out of bounds.
    MemoryUnsafe,
    /// Memory-unsafe, and controls branch prediction through a speculator.
    Speculative(SpeculatorModel),
    /// Read-only, with a concurrent observer of unprotected memory during
    /// library execution, limited to `schedule_budget` observations per run.
    ParallelReadOnly { schedule_budget: usize },
}

impl AttackerModel {
    pub const DEFAULT_SCHEDULE_BUDGET: usize = 4096;

    pub fn speculative_default() -> Self {
        AttackerModel::Speculative(SpeculatorModel::exhaustive(vec![1, 2], 1))
    }

    pub fn parallel_default() -> Self {
        AttackerModel::ParallelReadOnly { schedule_budget: Self::DEFAULT_SCHEDULE_BUDGET }
    }

    /// The five models with default parameters, weakest first.
    pub fn all() -> Vec<AttackerModel> {
        vec![
            AttackerModel::MemorySafe,
            AttackerModel::ReadOnly,
            AttackerModel::MemoryUnsafe,
            AttackerModel::speculative_default(),
            AttackerModel::parallel_default(),
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            AttackerModel::MemorySafe => "memory-safe",
            AttackerModel::ReadOnly => "read-only",
            AttackerModel::MemoryUnsafe => "memory-unsafe",
            AttackerModel::Speculative(_) => "speculative",
            AttackerModel::ParallelReadOnly { .. } => "parallel-read-only",
        }
    }

    /// Whether this model's grammar permits raw-address loads and register
    /// reads.
    pub fn reads_raw(&self) -> bool {
        !matches!(self, AttackerModel::MemorySafe)
    }

    pub fn writes_raw(&self) -> bool {
        matches!(self, AttackerModel::MemoryUnsafe | AttackerModel::Speculative(_))
    }

    pub fn speculator_model(&self) -> Option<&SpeculatorModel> {
        match self {
            AttackerModel::Speculative(m) => Some(m),
            _ => None,
        }
    }
}

impl fmt::Display for AttackerModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
#[error("unknown attacker model `{0}`")]
pub struct UnknownModel(pub String);

impl FromStr for AttackerModel {
    type Err = UnknownModel;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "memory-safe" => Ok(AttackerModel::MemorySafe),
            "read-only" => Ok(AttackerModel::ReadOnly),
            "memory-unsafe" => Ok(AttackerModel::MemoryUnsafe),
            "speculative" => Ok(AttackerModel::speculative_default()),
            "parallel-read-only" => Ok(AttackerModel::parallel_default()),
            other => Err(UnknownModel(other.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum AttackerError {
    #[error("attacker budget must be at least 1")]
    ZeroBudget,
    #[error("generator gave up after {attempts} attempts with {accepted} programs accepted")]
    BudgetExceeded { attempts: usize, accepted: usize },
    #[error(transparent)]
    Link(#[from] LinkError),
    #[error(transparent)]
    Semantics(#[from] SemanticsError),
}

/// Whether the application events of `trace` stay within what `model`
/// permits. Library segments are never inspected; speculation markers and
/// concurrent snapshots are observer artifacts, not application actions.
pub fn trace_satisfies(model: &AttackerModel, trace: &Trace) -> bool {
    let forbidden = |e: &Event| match model {
        AttackerModel::MemorySafe => {
            matches!(e, Event::OobRead { .. } | Event::OobWrite { .. } | Event::MemFault { .. })
        }
        AttackerModel::ReadOnly | AttackerModel::ParallelReadOnly { .. } => {
            matches!(e, Event::OobWrite { .. })
        }
        AttackerModel::MemoryUnsafe | AttackerModel::Speculative(_) => false,
    };
    !trace.app_events().any(forbidden)
}

/// Probe libraries that every attacker check must include: one whose API
/// functions return immediately, and one whose API functions read every
/// secret cell before returning.
pub fn mandatory_probes(api: &ApiContext, secrets: &SecretContext) -> Vec<Library> {
    let mut immediate = Library::default();
    let mut touching = Library::default();
    for (name, sig) in api {
        let mut f = Function::new(name.clone(), Label::Lib);
        f.params = sig.params.clone();
        f.declassify = sig.declassify.clone();
        f.body.push(Instr::Return(Some(Operand::Lit(0))));
        immediate.public.insert(name.clone(), f.clone());

        let mut g = f;
        g.body.clear();
        let mut taken: Vec<&str> = g.params.iter().map(|p| p.name.as_str()).collect();
        let fresh = |base: &str, taken: &mut Vec<&str>| {
            let mut n = base.to_string();
            while taken.contains(&n.as_str()) {
                n.push('_');
            }
            n
        };
        let t = fresh("probe_t", &mut taken);
        let i = fresh("probe_i", &mut taken);
        g.locals = vec![t.clone(), i.clone()];
        for (secret, len) in secrets.iter() {
            g.body.push(Instr::Loop {
                counter: i.clone(),
                bound: len as u64,
                body: vec![Instr::Load {
                    dst: t.clone(),
                    buf: crate::ir::BufferRef::Named(secret.to_string()),
                    index: Operand::Var(i.clone()),
                }],
            });
        }
        g.body.push(Instr::ClearRegs);
        g.body.push(Instr::Return(Some(Operand::Lit(0))));
        touching.public.insert(name.clone(), g);
    }
    vec![immediate, touching]
}

/// Finite approximation of "for all Γ-Δ libraries and initial states": every
/// trace of `app` linked with each probe, from each seeded state, satisfies
/// `model`.
pub fn is_attacker(
    app: &Program,
    model: &AttackerModel,
    secrets: &SecretContext,
    probes: &[Library],
    seeds: &[u64],
) -> Result<bool, AttackerError> {
    let states = initial_states(secrets, seeds);
    for probe in probes {
        let whole = link(probe, app)?;
        for s in &states {
            let t = traces(&whole, s)?;
            if !trace_satisfies(model, &t) {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// Parameter kinds of the buffers an API call needs, for generators and
/// drivers.
pub(crate) fn buffer_params(api: &ApiContext) -> Vec<(String, String, usize)> {
    let mut out = Vec::new();
    for (f, sig) in api {
        for p in &sig.params {
            if let ValueKind::Buf(n) = p.kind {
                out.push((f.clone(), p.name.clone(), n));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::Region;

    fn app(events: Vec<Event>) -> Trace {
        Trace::new(events)
    }

    #[test]
    fn oob_read_is_read_only_but_not_memory_safe() {
        let t = app(vec![Event::OobRead { address: 5, value: 1 }]);
        assert!(trace_satisfies(&AttackerModel::ReadOnly, &t));
        assert!(!trace_satisfies(&AttackerModel::MemorySafe, &t));
        assert!(trace_satisfies(&AttackerModel::MemoryUnsafe, &t));
    }

    #[test]
    fn oob_write_is_only_memory_unsafe() {
        let t = app(vec![Event::OobWrite { address: 5 }]);
        assert!(!trace_satisfies(&AttackerModel::MemorySafe, &t));
        assert!(!trace_satisfies(&AttackerModel::ReadOnly, &t));
        assert!(!trace_satisfies(&AttackerModel::parallel_default(), &t));
        assert!(trace_satisfies(&AttackerModel::MemoryUnsafe, &t));
        assert!(trace_satisfies(&AttackerModel::speculative_default(), &t));
    }

    #[test]
    fn empty_trace_satisfies_everything() {
        for m in AttackerModel::all() {
            assert!(trace_satisfies(&m, &Trace::default()), "{m}");
        }
    }

    #[test]
    fn library_segments_are_ignored() {
        let t = app(vec![
            Event::Call { from: Label::App, to: Label::Lib, name: "f".into() },
            Event::OobWrite { address: 1 },
            Event::Ret { name: "f".into(), from: Label::Lib, to: Label::App, value: Some(0) },
            Event::Read { region: Region::Unprotected, address: 0 },
        ]);
        assert!(trace_satisfies(&AttackerModel::MemorySafe, &t));
    }

    #[test]
    fn model_names_round_trip() {
        for m in AttackerModel::all() {
            assert_eq!(m.name().parse::<AttackerModel>().unwrap(), m);
        }
        assert!("bogus".parse::<AttackerModel>().is_err());
    }
}
