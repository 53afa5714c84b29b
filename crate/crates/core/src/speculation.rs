//! Speculative semantics parameterized by a speculator.
//!
//! At every executed branch the speculator may order a misprediction. The
//! machine is then cloned, sent down the other arm for up to `window` steps
//! (memory and register effects stay in the clone, so later speculative
//! loads see earlier speculative stores), and discarded. Events produced on
//! the wrong path are real observations and stay in the trace between
//! `SpecStart` and `Rollback` markers.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ir::WholeProgram;
use crate::semantics::{
    step_bound, BranchRecord, Event, ExecConfig, Machine, MachineState, SemanticsError, Step,
    Trace,
};

/// Hard limit on speculation nesting.
pub const MAX_NESTING: u32 = 4;

/// Default cap on the number of speculators an exhaustive model may produce.
pub const DEFAULT_ENUMERATION_CAP: usize = 4096;

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum SpeculationError {
    #[error("speculator nesting depth {0} exceeds the limit of {MAX_NESTING}")]
    NestingExceeded(u32),
    #[error("speculation window must be at least 1")]
    EmptyWindow,
    #[error("enumeration of {count} speculators exceeds the cap of {cap}")]
    BudgetExceeded { count: u128, cap: usize },
    #[error(transparent)]
    Semantics(#[from] SemanticsError),
}

/// One scripted misprediction: the `occurrence`-th dynamic execution of
/// static branch `site` (every execution when `None`) is mispredicted for
/// `window` steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScriptEntry(pub u32, pub Option<u32>, pub u32);

impl ScriptEntry {
    pub fn site(&self) -> u32 {
        self.0
    }
    pub fn occurrence(&self) -> Option<u32> {
        self.1
    }
    pub fn window(&self) -> u32 {
        self.2
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    Follow,
    Mispredict { window: u32 },
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    Never,
    /// Mispredict the first execution of every branch site.
    FirstOccurrence { window: u32 },
    Script(Vec<ScriptEntry>),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Speculator {
    pub rule: Rule,
    pub max_depth: u32,
}

impl Speculator {
    pub fn never() -> Self {
        Speculator { rule: Rule::Never, max_depth: 1 }
    }

    pub fn script(entries: Vec<ScriptEntry>, max_depth: u32) -> Self {
        Speculator { rule: Rule::Script(entries), max_depth }
    }

    pub fn decide(&self, site: u32, occurrence: u32) -> Decision {
        match &self.rule {
            Rule::Never => Decision::Follow,
            Rule::FirstOccurrence { window } if occurrence == 0 => {
                Decision::Mispredict { window: *window }
            }
            Rule::FirstOccurrence { .. } => Decision::Follow,
            Rule::Script(entries) => entries
                .iter()
                .find(|e| e.0 == site && e.1.is_none_or(|o| o == occurrence))
                .map_or(Decision::Follow, |e| Decision::Mispredict { window: e.2 }),
        }
    }

    pub fn validate(&self) -> Result<(), SpeculationError> {
        if self.max_depth > MAX_NESTING {
            return Err(SpeculationError::NestingExceeded(self.max_depth));
        }
        let empty = match &self.rule {
            Rule::Never => false,
            Rule::FirstOccurrence { window } => *window == 0,
            Rule::Script(entries) => entries.iter().any(|e| e.2 == 0),
        };
        if empty {
            return Err(SpeculationError::EmptyWindow);
        }
        Ok(())
    }

    /// Scripted decisions as `(site, occurrence, window)` triples, if the
    /// speculator is a script.
    pub fn entries(&self) -> Option<&[ScriptEntry]> {
        match &self.rule {
            Rule::Script(e) => Some(e),
            Rule::Never => Some(&[]),
            Rule::FirstOccurrence { .. } => None,
        }
    }
}

/// A family of speculators.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpeculatorModel {
    NeverSpeculate,
    AlwaysMispredictOnce { window: u32 },
    Scripted(Vec<ScriptEntry>),
    /// Every assignment of "follow" or one of `windows` to each static
    /// branch site.
    Exhaustive { windows: Vec<u32>, depth: u32 },
}

impl SpeculatorModel {
    pub fn exhaustive(windows: impl Into<Vec<u32>>, depth: u32) -> Self {
        SpeculatorModel::Exhaustive { windows: windows.into(), depth }
    }
}

/// The finite list of speculators a model denotes for `prog`.
pub fn enumerate_speculators(
    model: &SpeculatorModel,
    prog: &WholeProgram,
    cap: usize,
) -> Result<Vec<Speculator>, SpeculationError> {
    match model {
        SpeculatorModel::NeverSpeculate => Ok(vec![Speculator::never()]),
        SpeculatorModel::AlwaysMispredictOnce { window } => Ok(vec![Speculator {
            rule: Rule::FirstOccurrence { window: *window },
            max_depth: 1,
        }]),
        SpeculatorModel::Scripted(entries) => Ok(vec![Speculator::script(entries.clone(), 1)]),
        SpeculatorModel::Exhaustive { windows, depth } => {
            if windows.contains(&0) {
                return Err(SpeculationError::EmptyWindow);
            }
            if *depth > MAX_NESTING {
                return Err(SpeculationError::NestingExceeded(*depth));
            }
            let sites = prog.branch_sites;
            if sites == 0 {
                return Ok(vec![Speculator::never()]);
            }
            let radix = windows.len() as u128 + 1;
            let count = (0..sites).try_fold(1u128, |acc, _| acc.checked_mul(radix));
            match count {
                Some(c) if c <= cap as u128 => {}
                Some(c) => return Err(SpeculationError::BudgetExceeded { count: c, cap }),
                None => return Err(SpeculationError::BudgetExceeded { count: u128::MAX, cap }),
            }
            let count = count.unwrap() as usize;
            let mut out = Vec::with_capacity(count);
            for mut code in 0..count {
                let mut entries = Vec::new();
                for site in 0..sites {
                    let digit = code % radix as usize;
                    code /= radix as usize;
                    if digit > 0 {
                        entries.push(ScriptEntry(site, None, windows[digit - 1]));
                    }
                }
                if entries.is_empty() {
                    out.push(Speculator { rule: Rule::Never, max_depth: *depth });
                } else {
                    out.push(Speculator::script(entries, *depth));
                }
            }
            Ok(out)
        }
    }
}

/// The speculative trace of `prog` from `state` under `speculator`.
pub fn spec_traces(
    prog: &WholeProgram,
    state: &MachineState,
    speculator: &Speculator,
) -> Result<Trace, SpeculationError> {
    Ok(spec_run(prog, state, speculator, ExecConfig::default())?.0)
}

/// Speculative run returning the trace and the final architectural state.
pub fn spec_run(
    prog: &WholeProgram,
    state: &MachineState,
    speculator: &Speculator,
    config: ExecConfig,
) -> Result<(Trace, MachineState), SpeculationError> {
    speculator.validate()?;
    let mut m = Machine::with_config(prog, state.clone(), config)?;
    let bound = step_bound(prog, state);
    let mut events = Vec::new();
    let mut next_id = 0u32;
    loop {
        if m.steps() > bound {
            return Err(SemanticsError::StepBudgetExceeded(bound).into());
        }
        match m.step()? {
            Step::Halt => break,
            Step::Continue(e) => events.extend(e),
        }
        if let Some(branch) = m.last_branch.take() {
            if let Decision::Mispredict { window } = speculator.decide(branch.site, branch.occurrence)
            {
                if speculator.max_depth > 0 {
                    speculate(&m, branch, window, 1, speculator, &mut events, &mut next_id)?;
                }
            }
        }
    }
    Ok((Trace::new(events), m.state))
}

fn speculate<'p>(
    m: &Machine<'p>,
    branch: BranchRecord<'p>,
    window: u32,
    depth: u32,
    speculator: &Speculator,
    events: &mut Vec<Event>,
    next_id: &mut u32,
) -> Result<(), SpeculationError> {
    let id = *next_id;
    *next_id += 1;
    events.push(Event::SpecStart { id });
    let mut s = m.clone();
    s.speculative = true;
    s.last_branch = Some(branch);
    s.redirect_last_branch();
    for _ in 0..window {
        match s.step()? {
            Step::Halt => break,
            Step::Continue(e) => events.extend(e),
        }
        if s.hit_fence || s.faulted {
            break;
        }
        if let Some(inner) = s.last_branch.take() {
            if depth < speculator.max_depth {
                if let Decision::Mispredict { window } = speculator.decide(inner.site, inner.occurrence)
                {
                    speculate(&s, inner, window, depth + 1, speculator, events, next_id)?;
                }
            }
        }
    }
    events.push(Event::Rollback { id });
    Ok(())
}
