use std::collections::{HashMap, VecDeque};

use thiserror::Error;

use super::state::{MachineState, StackKind, StackPointers, SCRATCH_REGISTERS};
use super::trace::{Event, Trace};
use crate::ir::{
    BufferRef, Function, Instr, Label, Operand, Region, StackOp, Value, ValueKind, WholeProgram,
};

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum SemanticsError {
    /// Malformed control; signals an IR bug rather than an attacker action.
    #[error("illegal instruction in `{function}`: {reason}")]
    IllegalInstruction { function: String, reason: String },
    #[error("run exceeded its static step bound of {0}")]
    StepBudgetExceeded(u64),
}

/// Observer and speculation settings for one run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExecConfig {
    /// When set, every library write to unprotected memory is also observed
    /// by a concurrent reader, up to this many observations.
    pub parallel_observer: Option<usize>,
    /// Protection keys block speculative application accesses to the
    /// protected region. When false, such accesses leak their value.
    pub mpk_under_speculation: bool,
}

impl Default for ExecConfig {
    fn default() -> Self {
        ExecConfig { parallel_observer: None, mpk_under_speculation: true }
    }
}

/// Counts of executed instructions, by the categories the cost model
/// prices separately.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Profile {
    pub instructions: u64,
    pub pkru: u64,
    pub fences: u64,
    pub clearregs: u64,
    pub memzero_cells: u64,
    /// Cells moved into or out of compiler-generated copy buffers.
    pub copy_cells: u64,
}

/// Prefix of compiler-generated copy buffer names.
pub const COPY_BUFFER_PREFIX: &str = "__copy_";

/// Result of one small step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Step {
    Continue(Option<Event>),
    Halt,
}

#[derive(Clone, Debug)]
enum Cursor<'p> {
    Block { instrs: &'p [Instr], pc: usize },
    Loop { counter: &'p str, bound: u64, iter: u64, body: &'p [Instr] },
}

#[derive(Clone, Debug)]
struct Frame<'p> {
    func: &'p Function,
    scalars: HashMap<&'p str, Value>,
    buffers: HashMap<&'p str, (u64, usize)>,
    args: Vec<Value>,
    conts: Vec<Cursor<'p>>,
    ret_dst: Option<&'p str>,
    saved: StackPointers,
    caller_domain: Label,
}

/// The branch most recently executed, with both arms so the speculative
/// layer can redirect it.
#[derive(Clone, Copy, Debug)]
pub(crate) struct BranchRecord<'p> {
    pub site: u32,
    pub occurrence: u32,
    pub taken: bool,
    then_block: &'p [Instr],
    else_block: &'p [Instr],
}

/// Small-step interpreter over a closed program.
#[derive(Clone, Debug)]
pub struct Machine<'p> {
    prog: &'p WholeProgram,
    pub state: MachineState,
    frames: Vec<Frame<'p>>,
    pending: VecDeque<Event>,
    halted: bool,
    config: ExecConfig,
    occurrences: Vec<u32>,
    snapshots: usize,
    steps: u64,
    profile: Profile,
    pub(crate) speculative: bool,
    pub(crate) last_branch: Option<BranchRecord<'p>>,
    pub(crate) hit_fence: bool,
    pub(crate) faulted: bool,
}

enum Access {
    Load,
    Store(Value),
}

impl<'p> Machine<'p> {
    pub fn new(prog: &'p WholeProgram, state: MachineState) -> Result<Self, SemanticsError> {
        Self::with_config(prog, state, ExecConfig::default())
    }

    pub fn with_config(
        prog: &'p WholeProgram,
        state: MachineState,
        config: ExecConfig,
    ) -> Result<Self, SemanticsError> {
        let mut m = Machine {
            prog,
            state,
            frames: Vec::new(),
            pending: VecDeque::new(),
            halted: false,
            config,
            occurrences: vec![0; prog.branch_sites as usize],
            snapshots: 0,
            steps: 0,
            profile: Profile::default(),
            speculative: false,
            last_branch: None,
            hit_fence: false,
            faulted: false,
        };
        let entry = m.lookup(&prog.entry)?;
        m.state.domain = entry.label;
        m.push_frame(entry, Vec::new(), None, entry.label)?;
        Ok(m)
    }

    pub fn is_halted(&self) -> bool {
        self.halted && self.pending.is_empty()
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Name of the function currently executing, if any.
    pub fn profile(&self) -> Profile {
        self.profile
    }

    pub fn current_function(&self) -> Option<&str> {
        self.frames.last().map(|f| f.func.name.as_str())
    }

    fn illegal(&self, reason: impl Into<String>) -> SemanticsError {
        SemanticsError::IllegalInstruction {
            function: self.current_function().unwrap_or("<none>").to_string(),
            reason: reason.into(),
        }
    }

    fn lookup(&self, name: &str) -> Result<&'p Function, SemanticsError> {
        self.prog.function(name).ok_or_else(|| self.illegal(format!("unknown function `{name}`")))
    }

    fn frame(&self) -> &Frame<'p> {
        self.frames.last().expect("live frame")
    }

    fn frame_mut(&mut self) -> &mut Frame<'p> {
        self.frames.last_mut().expect("live frame")
    }

    fn emit(&mut self, e: Event) {
        self.pending.push_back(e);
    }

    /// Execute one step. Queued events from a previous instruction are
    /// drained one per step before the next instruction runs.
    pub fn step(&mut self) -> Result<Step, SemanticsError> {
        self.steps += 1;
        if let Some(e) = self.pending.pop_front() {
            return Ok(Step::Continue(Some(e)));
        }
        if self.halted {
            return Ok(Step::Halt);
        }
        self.last_branch = None;
        self.hit_fence = false;
        let instr = loop {
            let frame = self.frames.last_mut().expect("live frame");
            match frame.conts.last_mut() {
                None => break None,
                Some(Cursor::Block { instrs, pc }) => {
                    if *pc < instrs.len() {
                        let i = &instrs[*pc];
                        *pc += 1;
                        break Some(i);
                    }
                    frame.conts.pop();
                }
                Some(Cursor::Loop { counter, bound, iter, body }) => {
                    if *iter + 1 < *bound {
                        *iter += 1;
                        let (counter, value, body) = (*counter, *iter, *body);
                        frame.conts.push(Cursor::Block { instrs: body, pc: 0 });
                        self.deposit(counter, value);
                    } else {
                        frame.conts.pop();
                    }
                }
            }
        };
        match instr {
            Some(i) => self.execute(i)?,
            None => self.do_return(0)?,
        }
        Ok(Step::Continue(self.pending.pop_front()))
    }

    fn deposit(&mut self, name: &str, value: Value) {
        let frame = self.frames.last_mut().expect("live frame");
        if let Some(slot) = frame.func.register_slot(name) {
            self.state.registers[slot as usize] = value;
        }
        if let Some(v) = frame.scalars.get_mut(name) {
            *v = value;
        }
    }

    fn eval(&self, o: &Operand) -> Result<Value, SemanticsError> {
        match o {
            Operand::Lit(v) => Ok(*v),
            Operand::Reg(r) => Ok(self.state.registers[*r as usize]),
            Operand::Var(n) => self
                .frame()
                .scalars
                .get(n.as_str())
                .copied()
                .ok_or_else(|| self.illegal(format!("unbound scalar `{n}`"))),
        }
    }

    /// Base and length of a buffer visible by name.
    fn buffer(&self, name: &str) -> Result<(u64, usize), SemanticsError> {
        let frame = self.frame();
        if let Some(b) = frame.buffers.get(name) {
            return Ok(*b);
        }
        if frame.func.label == Label::Lib {
            if let Some(b) = self.state.secrets.get(name) {
                return Ok(*b);
            }
        }
        Err(self.illegal(format!("unbound buffer `{name}`")))
    }

    /// Address and whether the access stays within the named buffer.
    fn target(&self, buf: &BufferRef, index: &Operand) -> Result<(u64, bool), SemanticsError> {
        let idx = self.eval(index)?;
        match buf {
            BufferRef::Named(n) => {
                let (base, len) = self.buffer(n)?;
                Ok((base.wrapping_add(idx), idx < len as u64))
            }
            BufferRef::Raw(o) => Ok((self.eval(o)?.wrapping_add(idx), false)),
        }
    }

    fn fault(&mut self, address: u64) {
        self.faulted = true;
        self.halted = true;
        if !self.speculative {
            self.emit(Event::MemFault { address });
        }
    }

    /// Perform a memory access, emitting its observation. Returns `None` if
    /// the access faulted.
    fn access(&mut self, address: u64, in_bounds: bool, kind: Access) -> Option<Value> {
        let region = match self.state.layout.region_of(address) {
            Some(r) => r,
            None => {
                self.fault(address);
                return None;
            }
        };
        let domain = self.state.domain;
        let mut leaks_value = domain == Label::App && !in_bounds;
        if region == Region::Protected && !self.state.pkru_enabled {
            let pessimistic = self.speculative && !self.config.mpk_under_speculation;
            if !pessimistic {
                self.fault(address);
                return None;
            }
            leaks_value = true;
        }
        let cell = address as usize;
        match kind {
            Access::Load => {
                let value = self.state.mem[cell];
                self.emit(if leaks_value {
                    Event::OobRead { address, value }
                } else {
                    Event::Read { region, address }
                });
                Some(value)
            }
            Access::Store(value) => {
                self.state.mem[cell] = value;
                self.emit(if domain == Label::App && !in_bounds {
                    Event::OobWrite { address }
                } else {
                    Event::Write { region, address }
                });
                if domain == Label::Lib && region == Region::Unprotected {
                    if let Some(limit) = self.config.parallel_observer {
                        if self.snapshots < limit {
                            self.snapshots += 1;
                            self.emit(Event::Snapshot { address, value });
                        }
                    }
                }
                Some(value)
            }
        }
    }

    fn execute(&mut self, instr: &'p Instr) -> Result<(), SemanticsError> {
        if instr.is_privileged() && self.state.domain == Label::App {
            return Err(self.illegal(format!("`{instr}` in application domain")));
        }
        self.count(instr);
        match instr {
            Instr::Assign { dst, src } => {
                let v = self.eval(src)?;
                self.deposit(dst, v);
            }
            Instr::BinOp { dst, op, lhs, rhs } => {
                let v = op.eval(self.eval(lhs)?, self.eval(rhs)?);
                self.deposit(dst, v);
            }
            Instr::Load { dst, buf, index } => {
                let (address, in_bounds) = self.target(buf, index)?;
                if let Some(v) = self.access(address, in_bounds, Access::Load) {
                    self.deposit(dst, v);
                }
            }
            Instr::Store { buf, index, src } => {
                let v = self.eval(src)?;
                let (address, in_bounds) = self.target(buf, index)?;
                self.access(address, in_bounds, Access::Store(v));
            }
            Instr::If { cond, then_block, else_block, site } => {
                let taken = self.eval(cond)? != 0;
                let occurrence = match self.occurrences.get_mut(*site as usize) {
                    Some(o) => {
                        *o += 1;
                        *o - 1
                    }
                    None => return Err(self.illegal(format!("unnumbered branch site {site}"))),
                };
                self.emit(Event::Branch { taken });
                let arm = if taken { then_block } else { else_block };
                self.frame_mut().conts.push(Cursor::Block { instrs: arm, pc: 0 });
                self.last_branch = Some(BranchRecord {
                    site: *site,
                    occurrence,
                    taken,
                    then_block,
                    else_block,
                });
            }
            Instr::Loop { counter, bound, body } => {
                if *bound > 0 {
                    let frame = self.frame_mut();
                    frame.conts.push(Cursor::Loop { counter, bound: *bound, iter: 0, body });
                    frame.conts.push(Cursor::Block { instrs: body, pc: 0 });
                    self.deposit(counter, 0);
                }
            }
            Instr::Call { dst, callee, args } => {
                let f = self.lookup(callee)?;
                if f.params.len() != args.len() {
                    return Err(self.illegal(format!("arity mismatch calling `{callee}`")));
                }
                let mut values = Vec::with_capacity(args.len());
                for (a, p) in args.iter().zip(&f.params) {
                    let v = match (a, p.kind) {
                        (Operand::Var(n), ValueKind::Buf(_)) if !self.frame().func.is_scalar(n) => {
                            self.buffer(n)?.0
                        }
                        _ => self.eval(a)?,
                    };
                    values.push(v);
                }
                for (i, v) in values.iter().enumerate() {
                    self.state.registers[i % SCRATCH_REGISTERS] = *v;
                }
                let caller = self.state.domain;
                if caller != f.label {
                    if caller == Label::Lib {
                        return Err(self.illegal(format!("library calls application `{callee}`")));
                    }
                    self.state.domain = f.label;
                    self.state.pkru_enabled = true;
                }
                self.emit(Event::Call { from: caller, to: f.label, name: callee.clone() });
                self.push_frame(f, values, dst.as_deref(), caller)?;
            }
            Instr::Return(o) => {
                let v = match o {
                    Some(o) => self.eval(o)?,
                    None => 0,
                };
                self.do_return(v)?;
            }
            Instr::MemZero(name) => {
                let (base, len) = self.buffer(name)?;
                for i in 0..len as u64 {
                    if self.access(base + i, true, Access::Store(0)).is_none() {
                        break;
                    }
                }
            }
            Instr::Fence => self.hit_fence = true,
            Instr::Pkru(on) => self.state.pkru_enabled = *on,
            Instr::Stack(op) => self.stack_op(*op)?,
            Instr::ClearRegs => self.state.registers = [0; SCRATCH_REGISTERS],
        }
        Ok(())
    }

    fn count(&mut self, instr: &Instr) {
        let is_copy = |b: &BufferRef| matches!(b, BufferRef::Named(n) if n.starts_with(COPY_BUFFER_PREFIX));
        let zeroed = match instr {
            Instr::MemZero(name) => self.buffer(name).map_or(0, |(_, len)| len as u64),
            _ => 0,
        };
        let p = &mut self.profile;
        p.instructions += 1;
        match instr {
            Instr::Pkru(_) => p.pkru += 1,
            Instr::Fence => p.fences += 1,
            Instr::ClearRegs => p.clearregs += 1,
            Instr::MemZero(_) => p.memzero_cells += zeroed,
            Instr::Store { buf, .. } | Instr::Load { buf, .. } if is_copy(buf) => p.copy_cells += 1,
            _ => {}
        }
    }

    fn stack_op(&mut self, op: StackOp) -> Result<(), SemanticsError> {
        match op {
            StackOp::Save => {
                let top = self.state.stacks.protected;
                let sp = self.state.stacks.program;
                if self.access(top, true, Access::Store(sp)).is_some() {
                    self.state.stacks.protected += 1;
                }
            }
            StackOp::CopyArgs => {
                let args = self.frame().args.clone();
                for v in args {
                    let top = self.state.stacks.protected;
                    if self.access(top, true, Access::Store(v)).is_none() {
                        break;
                    }
                    self.state.stacks.protected += 1;
                }
            }
            StackOp::Switch => self.state.stacks.active = StackKind::Protected,
            StackOp::Restore => self.state.stacks.active = StackKind::Program,
        }
        Ok(())
    }

    fn push_frame(
        &mut self,
        f: &'p Function,
        args: Vec<Value>,
        ret_dst: Option<&'p str>,
        caller_domain: Label,
    ) -> Result<(), SemanticsError> {
        let saved = self.state.stacks;
        let mut scalars = HashMap::new();
        let mut buffers = HashMap::new();
        for (p, v) in f.params.iter().zip(&args) {
            match p.kind {
                ValueKind::Val => {
                    scalars.insert(p.name.as_str(), *v);
                }
                ValueKind::Buf(len) => {
                    buffers.insert(p.name.as_str(), (*v, len));
                }
            }
        }
        for l in &f.locals {
            scalars.insert(l.as_str(), 0);
        }
        let layout = self.state.layout;
        for b in &f.buffers {
            let on_protected =
                b.region == Region::Protected || self.state.stacks.active == StackKind::Protected;
            let (sp, limit) = if on_protected {
                (&mut self.state.stacks.protected, layout.end())
            } else {
                (&mut self.state.stacks.program, layout.protected_base())
            };
            let base = *sp;
            if base + b.len as u64 > limit {
                self.fault(base);
                return Ok(());
            }
            *sp += b.len as u64;
            // Fresh buffers are zero-initialized.
            self.state.mem[base as usize..base as usize + b.len].fill(0);
            buffers.insert(b.name.as_str(), (base, b.len));
        }
        self.frames.push(Frame {
            func: f,
            scalars,
            buffers,
            args,
            conts: vec![Cursor::Block { instrs: &f.body, pc: 0 }],
            ret_dst,
            saved,
            caller_domain,
        });
        Ok(())
    }

    fn do_return(&mut self, value: Value) -> Result<(), SemanticsError> {
        self.state.registers[0] = value;
        let frame = self.frames.pop().expect("live frame");
        self.state.stacks = frame.saved;
        if self.frames.is_empty() {
            self.halted = true;
            return Ok(());
        }
        let from = frame.func.label;
        let to = frame.caller_domain;
        let crossing = from == Label::Lib && to == Label::App;
        if crossing {
            self.state.domain = Label::App;
            self.state.pkru_enabled = false;
        }
        self.emit(Event::Ret {
            name: frame.func.name.clone(),
            from,
            to,
            value: crossing.then_some(value),
        });
        if let Some(dst) = frame.ret_dst {
            self.deposit(dst, value);
        }
        Ok(())
    }

    /// Re-enter the arm of the last branch that was not taken. Used to start
    /// a mispredicted speculative path.
    pub(crate) fn redirect_last_branch(&mut self) {
        let record = self.last_branch.expect("a branch was just executed");
        let frame = self.frames.last_mut().expect("live frame");
        frame.conts.pop();
        let arm = if record.taken { record.else_block } else { record.then_block };
        frame.conts.push(Cursor::Block { instrs: arm, pc: 0 });
    }

    /// Run to completion, enforcing the static step bound.
    pub fn run(self) -> Result<(Trace, MachineState), SemanticsError> {
        self.run_profiled().map(|(t, s, _)| (t, s))
    }

    /// Run to completion, also returning the execution profile.
    pub fn run_profiled(mut self) -> Result<(Trace, MachineState, Profile), SemanticsError> {
        let bound = step_bound(self.prog, &self.state);
        let mut events = Vec::new();
        loop {
            if self.steps > bound {
                return Err(SemanticsError::StepBudgetExceeded(bound));
            }
            match self.step()? {
                Step::Continue(Some(e)) => events.push(e),
                Step::Continue(None) => {}
                Step::Halt => break,
            }
        }
        Ok((Trace::new(events), self.state, self.profile))
    }
}

/// Static upper bound on the number of steps any run of `prog` can take.
/// Loops have literal bounds and the call graph is acyclic, so this is
/// finite.
pub fn step_bound(prog: &WholeProgram, state: &MachineState) -> u64 {
    fn block(prog: &WholeProgram, state: &MachineState, f: &Function, b: &[Instr]) -> u64 {
        b.iter().map(|i| instr(prog, state, f, i)).fold(0u64, u64::saturating_add)
    }
    fn instr(prog: &WholeProgram, state: &MachineState, f: &Function, i: &Instr) -> u64 {
        match i {
            Instr::Load { .. } | Instr::Store { .. } => 2,
            Instr::If { then_block, else_block, .. } => {
                1 + block(prog, state, f, then_block).max(block(prog, state, f, else_block))
            }
            Instr::Loop { bound, body, .. } => {
                bound.saturating_mul(block(prog, state, f, body)).saturating_add(1)
            }
            Instr::Call { callee, .. } => match prog.function(callee) {
                Some(g) => function(prog, state, g).saturating_add(2),
                None => 1,
            },
            Instr::MemZero(name) => {
                let len = f
                    .buffer_len(name)
                    .or_else(|| state.secrets.get(name).map(|(_, l)| *l))
                    .unwrap_or(0) as u64;
                2 * len + 1
            }
            Instr::Stack(StackOp::CopyArgs) => f.params.len() as u64 + 1,
            _ => 1,
        }
    }
    fn function(prog: &WholeProgram, state: &MachineState, f: &Function) -> u64 {
        block(prog, state, f, &f.body).saturating_add(2)
    }
    match prog.function(&prog.entry) {
        Some(f) => function(prog, state, f).saturating_add(1),
        None => 1,
    }
}
