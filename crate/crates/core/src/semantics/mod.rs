//! Sequential small-step semantics and the constant-time leakage model.
//!
//! Branch outcomes and access addresses leak; values leak only through
//! out-of-bounds application reads, concurrent snapshots, and returns that
//! cross from the library to the application.

mod machine;
mod state;
mod trace;

pub use machine::{
    step_bound, ExecConfig, Machine, Profile, SemanticsError, Step, COPY_BUFFER_PREFIX,
};
pub(crate) use machine::BranchRecord;
pub use state::{
    initial_states, initial_states_with_layout, secret_fill, MachineState, MemoryLayout,
    StackKind, StackPointers, SCRATCH_REGISTERS,
};
pub use trace::{observable_projection, Event, Segment, Trace};

use crate::ir::WholeProgram;

/// The complete event sequence of running `prog` from `state`.
pub fn traces(prog: &WholeProgram, state: &MachineState) -> Result<Trace, SemanticsError> {
    Ok(run(prog, state, ExecConfig::default())?.0)
}

/// Run to completion, returning the trace and the final state.
pub fn run(
    prog: &WholeProgram,
    state: &MachineState,
    config: ExecConfig,
) -> Result<(Trace, MachineState), SemanticsError> {
    Machine::with_config(prog, state.clone(), config)?.run()
}
