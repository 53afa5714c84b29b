use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{buffer_params, is_attacker, mandatory_probes, AttackerError, AttackerModel};
use crate::ir::{
    ApiContext, BinOp, BufferDecl, BufferRef, Function, Instr, Label, Operand, Program, Region,
    SecretContext, ValueKind, ENTRY,
};
use crate::semantics::{MemoryLayout, SCRATCH_REGISTERS};

/// Grammar weights and limits for attacker generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub max_actions: usize,
    pub max_branches: usize,
    pub call_weight: u32,
    pub buffer_read_weight: u32,
    pub raw_read_weight: u32,
    pub register_read_weight: u32,
    pub raw_write_weight: u32,
    pub gadget_weight: u32,
    /// Cells above the application frame that targeted raw reads sweep.
    pub frame_window: u64,
    /// Largest scalar argument passed to API functions.
    pub max_scalar_arg: u64,
    /// Give up after this many rejected or duplicate candidates per
    /// requested program.
    pub attempts_per_program: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            max_actions: 5,
            max_branches: 3,
            call_weight: 4,
            buffer_read_weight: 1,
            raw_read_weight: 3,
            register_read_weight: 2,
            raw_write_weight: 2,
            gadget_weight: 2,
            frame_window: 48,
            max_scalar_arg: 12,
            attempts_per_program: 50,
        }
    }
}

const OUT: &str = "out";
const OUT_LEN: usize = 8;
const DATA: &str = "data";
const DATA_LEN: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Action {
    Call,
    BufferRead,
    RawRead,
    RawWrite,
    Gadget,
}

struct Builder<'a> {
    rng: &'a mut ChaCha8Rng,
    cfg: &'a GeneratorConfig,
    model: &'a AttackerModel,
    api: &'a ApiContext,
    /// (function, param) -> app buffer passed for it.
    arg_buffers: BTreeMap<(String, String), String>,
    frame_size: u64,
    locals: Vec<String>,
    body: Vec<Instr>,
    branches: usize,
}

impl Builder<'_> {
    fn fresh(&mut self) -> String {
        let n = format!("v{}", self.locals.len());
        self.locals.push(n.clone());
        n
    }

    /// Make `value` observable: its low bits select the written cell of
    /// `out`, and occasionally a branch tests it for zero.
    fn sink(&mut self, value: &str) {
        let idx = self.fresh();
        self.body.push(Instr::BinOp {
            dst: idx.clone(),
            op: BinOp::And,
            lhs: Operand::var(value),
            rhs: Operand::Lit(OUT_LEN as u64 - 1),
        });
        self.body.push(Instr::Store {
            buf: BufferRef::Named(OUT.into()),
            index: Operand::Var(idx),
            src: Operand::Lit(1),
        });
        if self.branches < self.cfg.max_branches && self.rng.gen_bool(0.25) {
            self.branches += 1;
            let z = self.fresh();
            self.body.push(Instr::BinOp {
                dst: z.clone(),
                op: BinOp::Eq,
                lhs: Operand::var(value),
                rhs: Operand::Lit(0),
            });
            self.body.push(Instr::If {
                cond: Operand::Var(z),
                then_block: vec![Instr::Store {
                    buf: BufferRef::Named(OUT.into()),
                    index: Operand::Lit(0),
                    src: Operand::Lit(2),
                }],
                else_block: vec![],
                site: 0,
            });
        }
    }

    fn raw_target(&mut self) -> u64 {
        let layout = MemoryLayout::default();
        match self.rng.gen_range(0..8) {
            0 => self.rng.gen_range(0..layout.unprotected as u64),
            1 => layout.protected_base() + self.rng.gen_range(0..64),
            _ => self.frame_size + self.rng.gen_range(0..self.cfg.frame_window),
        }
    }

    fn call(&mut self) {
        let names: Vec<&String> = self.api.keys().collect();
        let name = (*names.choose(self.rng).expect("nonempty api")).clone();
        let sig = &self.api[&name];
        let mut args = Vec::new();
        for p in &sig.params {
            match p.kind {
                ValueKind::Val => {
                    args.push(Operand::Lit(self.rng.gen_range(0..=self.cfg.max_scalar_arg)))
                }
                ValueKind::Buf(_) => {
                    let b = self.arg_buffers[&(name.clone(), p.name.clone())].clone();
                    args.push(Operand::Var(b));
                }
            }
        }
        let ret = self.fresh();
        self.body.push(Instr::Call { dst: Some(ret.clone()), callee: name.clone(), args });
        // Register residue must be read before anything else clobbers it.
        let mut residue = Vec::new();
        if self.model.reads_raw() && self.rng.gen_range(0..4) < self.cfg.register_read_weight {
            let mut regs: Vec<u8> = (0..SCRATCH_REGISTERS as u8).collect();
            regs.shuffle(self.rng);
            for r in regs.into_iter().take(self.rng.gen_range(1..=3)) {
                let v = self.fresh();
                self.body.push(Instr::Assign { dst: v.clone(), src: Operand::Reg(r) });
                residue.push(v);
            }
        }
        self.sink(&ret);
        for v in residue {
            self.sink(&v);
        }
        if self.model.writes_raw() && self.branches < self.cfg.max_branches && self.rng.gen_bool(0.2)
        {
            // Corrupt memory only when the call returned zero.
            self.branches += 1;
            let z = self.fresh();
            self.body.push(Instr::BinOp {
                dst: z.clone(),
                op: BinOp::Eq,
                lhs: Operand::Var(ret),
                rhs: Operand::Lit(0),
            });
            let target = self.raw_target().min(MemoryLayout::default().protected_base() - 1);
            self.body.push(Instr::If {
                cond: Operand::Var(z),
                then_block: vec![Instr::Store {
                    buf: BufferRef::Raw(Operand::Lit(target)),
                    index: Operand::Lit(0),
                    src: Operand::Lit(self.rng.gen_range(0..256)),
                }],
                else_block: vec![],
                site: 0,
            });
        }
    }

    fn buffer_read(&mut self) {
        let mut buffers: Vec<(String, usize)> = vec![(DATA.into(), DATA_LEN)];
        for ((f, p), b) in &self.arg_buffers {
            if let Some(ValueKind::Buf(n)) =
                self.api[f].params.iter().find(|q| &q.name == p).map(|q| q.kind)
            {
                buffers.push((b.clone(), n));
            }
        }
        let (b, len) = buffers.choose(self.rng).unwrap().clone();
        let v = self.fresh();
        let idx = self.rng.gen_range(0..len as u64);
        self.body.push(Instr::Load {
            dst: v.clone(),
            buf: BufferRef::Named(b),
            index: Operand::Lit(idx),
        });
        self.sink(&v);
    }

    fn raw_read(&mut self) {
        let v = self.fresh();
        let target = self.raw_target();
        self.body.push(Instr::Load {
            dst: v.clone(),
            buf: BufferRef::Raw(Operand::Lit(target)),
            index: Operand::Lit(0),
        });
        self.sink(&v);
    }

    fn raw_write(&mut self) {
        let target = self.rng.gen_range(0..MemoryLayout::default().unprotected as u64);
        self.body.push(Instr::Store {
            buf: BufferRef::Raw(Operand::Lit(target)),
            index: Operand::Lit(0),
            src: Operand::Lit(self.rng.gen_range(0..256)),
        });
    }

    /// Bounds-checked load of `data` with an out-of-range index: harmless
    /// sequentially, an out-of-bounds read under misprediction.
    fn gadget(&mut self) {
        if self.branches >= self.cfg.max_branches {
            return self.raw_read();
        }
        self.branches += 1;
        let i = self.fresh();
        let c = self.fresh();
        let v = self.fresh();
        let reach = self.frame_size + self.cfg.frame_window;
        let index = self.rng.gen_range(DATA_LEN as u64..reach.max(DATA_LEN as u64 + 1));
        self.body.push(Instr::Assign { dst: i.clone(), src: Operand::Lit(index) });
        self.body.push(Instr::BinOp {
            dst: c.clone(),
            op: BinOp::Lt,
            lhs: Operand::Var(i.clone()),
            rhs: Operand::Lit(DATA_LEN as u64),
        });
        let saved = std::mem::take(&mut self.body);
        self.body.push(Instr::Load {
            dst: v.clone(),
            buf: BufferRef::Named(DATA.into()),
            index: Operand::Var(i),
        });
        // The sink inside the arm must not add a nested branch.
        let branches = self.branches;
        self.branches = self.cfg.max_branches;
        self.sink(&v);
        self.branches = branches;
        let arm = std::mem::replace(&mut self.body, saved);
        self.body.push(Instr::If { cond: Operand::Var(c), then_block: arm, else_block: vec![], site: 0 });
    }
}

fn pick_action(rng: &mut ChaCha8Rng, cfg: &GeneratorConfig, model: &AttackerModel, has_api: bool) -> Action {
    let mut table = vec![(Action::BufferRead, cfg.buffer_read_weight)];
    if has_api {
        table.push((Action::Call, cfg.call_weight));
    }
    if model.reads_raw() {
        table.push((Action::RawRead, cfg.raw_read_weight));
    }
    if model.writes_raw() {
        table.push((Action::RawWrite, cfg.raw_write_weight));
    }
    if matches!(model, AttackerModel::Speculative(_)) {
        table.push((Action::Gadget, cfg.gadget_weight));
    }
    let total: u32 = table.iter().map(|(_, w)| w).sum();
    let mut roll = rng.gen_range(0..total.max(1));
    for (a, w) in table {
        if roll < w {
            return a;
        }
        roll -= w;
    }
    Action::BufferRead
}

fn generate_one(
    rng: &mut ChaCha8Rng,
    cfg: &GeneratorConfig,
    api: &ApiContext,
    model: &AttackerModel,
) -> Program {
    let mut buffers = vec![
        BufferDecl { name: OUT.into(), len: OUT_LEN, region: Region::Unprotected },
        BufferDecl { name: DATA.into(), len: DATA_LEN, region: Region::Unprotected },
    ];
    let mut arg_buffers = BTreeMap::new();
    for (i, (f, p, n)) in buffer_params(api).into_iter().enumerate() {
        let name = format!("p{i}");
        buffers.push(BufferDecl { name: name.clone(), len: n, region: Region::Unprotected });
        arg_buffers.insert((f, p), name);
    }
    let frame_size = buffers.iter().map(|b| b.len as u64).sum();
    let mut b = Builder {
        rng,
        cfg,
        model,
        api,
        arg_buffers,
        frame_size,
        locals: Vec::new(),
        body: Vec::new(),
        branches: 0,
    };
    // Seed argument buffers with public data.
    let seeded: Vec<(String, usize)> = buffers.iter().skip(2).map(|d| (d.name.clone(), d.len)).collect();
    for (name, len) in seeded {
        for i in 0..len.min(4) {
            let v = b.rng.gen_range(0..256);
            b.body.push(Instr::Store {
                buf: BufferRef::Named(name.clone()),
                index: Operand::Lit(i as u64),
                src: Operand::Lit(v),
            });
        }
    }
    let has_api = !api.is_empty();
    let actions = b.rng.gen_range(1..=cfg.max_actions.max(1));
    let mut called = false;
    for k in 0..actions {
        let mut action = pick_action(b.rng, cfg, model, has_api);
        if has_api && !called && k + 1 == actions {
            action = Action::Call;
        }
        match action {
            Action::Call => {
                called = true;
                b.call();
            }
            Action::BufferRead => b.buffer_read(),
            Action::RawRead => b.raw_read(),
            Action::RawWrite => b.raw_write(),
            Action::Gadget => b.gadget(),
        }
    }
    b.body.push(Instr::Return(None));
    let mut main = Function::new(ENTRY, Label::App);
    main.locals = b.locals;
    main.buffers = buffers;
    main.body = b.body;
    Program {
        functions: BTreeMap::from([(ENTRY.to_string(), main)]),
        entry: ENTRY.into(),
        api: api.clone(),
    }
}

/// Generate `budget` distinct application programs of attacker class
/// `model`, deterministically from `seed`.
pub fn generate_attackers(
    api: &ApiContext,
    secrets: &SecretContext,
    model: &AttackerModel,
    budget: usize,
    seed: u64,
) -> Result<Vec<Program>, AttackerError> {
    generate_attackers_with(api, secrets, model, budget, seed, &GeneratorConfig::default())
}

pub fn generate_attackers_with(
    api: &ApiContext,
    secrets: &SecretContext,
    model: &AttackerModel,
    budget: usize,
    seed: u64,
    cfg: &GeneratorConfig,
) -> Result<Vec<Program>, AttackerError> {
    if budget == 0 {
        return Err(AttackerError::ZeroBudget);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probes = mandatory_probes(api, secrets);
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(budget);
    let max_attempts = budget.saturating_mul(cfg.attempts_per_program);
    let mut attempts = 0;
    while out.len() < budget {
        if attempts >= max_attempts {
            return Err(AttackerError::BudgetExceeded { attempts, accepted: out.len() });
        }
        attempts += 1;
        let p = generate_one(&mut rng, cfg, api, model);
        if !seen.insert(p.to_string()) {
            continue;
        }
        if !is_attacker(&p, model, secrets, &probes, &[0, 1])? {
            continue;
        }
        out.push(p);
    }
    Ok(out)
}
