//! Robust constant-time checking for a small library/application IR.
//!
//! The crate interprets programs split into a trusted library and an
//! untrusted application, records leakage traces (sequential and
//! speculative), checks trace equivalence across secret states against
//! generated attacker contexts, and compiles libraries with mitigations
//! chosen per attacker model.

pub mod attackers;
pub mod checker;
pub mod compiler;
pub mod corpus;
pub mod costbench;
pub mod ir;
pub mod semantics;
pub mod speculation;

pub use attackers::AttackerModel;
pub use checker::Verdict;
pub use ir::{Library, LibrarySource, Program, Value, WholeProgram};
pub use semantics::{Event, MachineState, Trace};
pub use speculation::{Speculator, SpeculatorModel};
