//! Attacker-model-parameterized mitigation compiler.
//!
//! `compile` refuses libraries that are not classically constant-time, then
//! runs taint analysis, picks mitigations for the model, relocates and
//! zeroizes secret data, and wraps the API behind domain-switching
//! wrappers.

mod plan;
mod taint;
mod transform;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use plan::{plan, Action, MitigationPlan};
pub use taint::{taint_analysis, FunctionTaint, Taint, TaintMap};
pub use transform::{clone_name, relocate_and_zeroize, wrap_api, WrapError};

use crate::attackers::AttackerModel;
use crate::checker::{benign_driver, classical_ct_check, CheckError, Verdict, Witness};
use crate::ir::{
    check_library, link, Instr, LibrarySource, Operand, Program, Value, WellFormednessError,
};
use crate::semantics::{initial_states, run, Event, ExecConfig};

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum CompileError {
    #[error(transparent)]
    WellFormedness(#[from] WellFormednessError),
    #[error("library is not classically constant-time (divergence at event {})", .0.divergence.index)]
    NotClassicallyCT(Box<Witness>),
    #[error(transparent)]
    Check(#[from] CheckError),
    #[error(transparent)]
    Wrap(#[from] WrapError),
}

/// Seeds used to establish the classical constant-time premise.
pub const CLASSICAL_SEEDS: [u64; 3] = [0, 1, 2];

#[derive(Clone, Debug, PartialEq)]
pub struct Compiled {
    pub source: LibrarySource,
    pub plan: MitigationPlan,
    pub taint: TaintMap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MitigationReport {
    pub model: String,
    pub actions: Vec<Action>,
    pub wrapped: Vec<String>,
    pub taint: TaintMap,
}

impl Compiled {
    pub fn report(&self) -> MitigationReport {
        MitigationReport {
            model: self.plan.model.name().to_string(),
            actions: self.plan.actions.iter().cloned().collect(),
            wrapped: self.plan.wrapped().map(str::to_string).collect(),
            taint: self.taint.clone(),
        }
    }

    /// `(function, param)` pairs whose contents the compiled library zeroes
    /// or stops writing back, and which are therefore excluded from
    /// functional comparisons.
    pub fn scratch_params(&self) -> BTreeSet<(String, String)> {
        self.plan
            .actions
            .iter()
            .filter_map(|a| match a {
                Action::Zeroize { function, buffer } if self.source.api.contains_key(function) => {
                    Some((function.clone(), buffer.clone()))
                }
                _ => None,
            })
            .collect()
    }
}

/// Compile `source` with the mitigations required against `model`.
pub fn compile(source: &LibrarySource, model: &AttackerModel) -> Result<Compiled, CompileError> {
    let LibrarySource { library, api, secrets } = source;
    check_library(library, api, secrets)?;
    let driver = benign_driver(api);
    if let Verdict::Violation { witness, .. } =
        classical_ct_check(library, api, secrets, &driver, &CLASSICAL_SEEDS)?
    {
        return Err(CompileError::NotClassicallyCT(Box::new(witness)));
    }
    let taint = taint_analysis(library, api, secrets);
    let plan = plan(library, api, &taint, model);
    let relocated = relocate_and_zeroize(library, &plan);
    let wrapped = wrap_api(&relocated, &plan)?;
    check_library(&wrapped, api, secrets)?;
    Ok(Compiled {
        source: LibrarySource { library: wrapped, api: api.clone(), secrets: secrets.clone() },
        plan,
        taint,
    })
}

/// What a benign driver can observe architecturally: API return values and
/// the final contents of its own frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Outcome {
    pub returns: Vec<Value>,
    pub app_memory: Vec<Value>,
}

/// Run `driver` against `source` from seed `seed`. Cells of driver buffers
/// passed to any `(function, param)` in `masked` read as zero.
pub fn run_outcome(
    source: &LibrarySource,
    driver: &Program,
    seed: u64,
    masked: &BTreeSet<(String, String)>,
) -> Result<Outcome, CheckError> {
    let whole = link(&source.library, driver)?;
    let state = initial_states(&source.secrets, &[seed]).remove(0);
    let (trace, end) = run(&whole, &state, ExecConfig::default())?;
    let returns = trace
        .events
        .iter()
        .filter_map(|e| match e {
            Event::Ret { value, .. } => *value,
            _ => None,
        })
        .collect();

    let main = &driver.functions[&driver.entry];
    let mut hidden = BTreeSet::new();
    let mut instrs = Vec::new();
    crate::ir::walk(&main.body, &mut |i| instrs.push(i));
    for i in instrs {
        if let Instr::Call { callee, args, .. } = i {
            let Some(sig) = source.api.get(callee) else { continue };
            for (a, p) in args.iter().zip(&sig.params) {
                if let Operand::Var(b) = a {
                    if masked.contains(&(callee.clone(), p.name.clone())) {
                        hidden.insert(b.as_str());
                    }
                }
            }
        }
    }
    // Entry-frame buffers sit at the bottom of the program stack in
    // declaration order.
    let mut app_memory = Vec::new();
    let mut base = 0usize;
    for b in &main.buffers {
        let cells = &end.mem[base..base + b.len];
        if hidden.contains(b.name.as_str()) {
            app_memory.extend(std::iter::repeat_n(0, b.len));
        } else {
            app_memory.extend_from_slice(cells);
        }
        base += b.len;
    }
    Ok(Outcome { returns, app_memory })
}
