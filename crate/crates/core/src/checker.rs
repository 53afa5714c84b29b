//! Classical and robust constant-time checking by trace equivalence.
//!
//! Semantics are deterministic per configuration, so trace-set equality is
//! checked as per-configuration trace equality over attackers × secret-seed
//! pairs × speculators. The first counterexample in that fixed order is
//! returned, after greedy minimization of the attacker.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attackers::{
    generate_attackers_with, is_attacker, mandatory_probes, AttackerError, AttackerModel,
    GeneratorConfig,
};
use crate::ir::{
    check_library, link, parse_program, ApiContext, BufferDecl, BufferRef, Function, Instr,
    Label, Library, LinkError, Operand, Program, Region, SecretContext, ValueKind,
    WellFormednessError, WholeProgram, ENTRY,
};
use crate::semantics::{
    initial_states, observable_projection, run, Event, ExecConfig, MachineState, SemanticsError,
    Trace,
};
use crate::speculation::{enumerate_speculators, spec_run, SpeculationError, Speculator};

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum CheckError {
    #[error(transparent)]
    WellFormedness(#[from] WellFormednessError),
    #[error(transparent)]
    Link(#[from] LinkError),
    #[error(transparent)]
    Attacker(#[from] AttackerError),
    #[error(transparent)]
    Speculation(#[from] SpeculationError),
    #[error(transparent)]
    Semantics(#[from] SemanticsError),
    #[error("witness failed to reproduce: {0}")]
    WitnessInvalid(String),
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stats {
    pub attackers: usize,
    pub seed_pairs: usize,
    pub speculators: usize,
    pub runs: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Divergence {
    pub index: usize,
    /// Event at `index` in each trace, or `None` past the end.
    pub lhs: Option<String>,
    pub rhs: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Witness {
    pub attacker_src: String,
    pub seeds: (u64, u64),
    pub speculator: Option<Speculator>,
    pub divergence: Divergence,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "result", rename_all = "snake_case")]
pub enum Verdict {
    Secure { stats: Stats },
    Violation { stats: Stats, witness: Witness },
}

impl Verdict {
    pub fn is_secure(&self) -> bool {
        matches!(self, Verdict::Secure { .. })
    }

    pub fn stats(&self) -> &Stats {
        match self {
            Verdict::Secure { stats } | Verdict::Violation { stats, .. } => stats,
        }
    }

    pub fn witness(&self) -> Option<&Witness> {
        match self {
            Verdict::Violation { witness, .. } => Some(witness),
            Verdict::Secure { .. } => None,
        }
    }

    /// Process exit code: 0 secure, 1 violation.
    pub fn exit_code(&self) -> i32 {
        if self.is_secure() {
            0
        } else {
            1
        }
    }
}

/// First index at which two traces differ, or `None` if they are equal. A
/// strict prefix diverges at the shorter length.
pub fn find_divergence(lhs: &Trace, rhs: &Trace) -> Option<usize> {
    let common = lhs.events.iter().zip(&rhs.events).position(|(a, b)| a != b);
    match common {
        Some(i) => Some(i),
        None if lhs.len() != rhs.len() => Some(lhs.len().min(rhs.len())),
        None => None,
    }
}

fn divergence_at(lhs: &Trace, rhs: &Trace, index: usize) -> Divergence {
    let show = |t: &Trace| t.events.get(index).map(Event::to_string);
    Divergence { index, lhs: show(lhs), rhs: show(rhs) }
}

/// Secret-seed pairs: (0,1) and (0,2), then `random` pairs drawn from
/// `seed`.
pub fn seed_pairs(random: usize, seed: u64) -> Vec<(u64, u64)> {
    let mut out = vec![(0, 1), (0, 2)];
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed);
    while out.len() < 2 + random {
        let a = rng.gen_range(3..u32::MAX as u64);
        let b = rng.gen_range(3..u32::MAX as u64);
        if a != b {
            out.push((a, b));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckConfig {
    pub attacker_budget: usize,
    pub attacker_seed: u64,
    /// Random secret-seed pairs beyond the two fixed ones.
    pub random_seed_pairs: usize,
    pub speculator_cap: usize,
    pub minimize: bool,
    pub mpk_under_speculation: bool,
    pub generator: GeneratorConfig,
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig {
            attacker_budget: 200,
            attacker_seed: 0,
            random_seed_pairs: 1,
            speculator_cap: crate::speculation::DEFAULT_ENUMERATION_CAP,
            minimize: true,
            mpk_under_speculation: true,
            generator: GeneratorConfig::default(),
        }
    }
}

impl CheckConfig {
    pub fn with_budget(budget: usize) -> Self {
        CheckConfig { attacker_budget: budget, ..Self::default() }
    }

    pub fn seed_pairs(&self) -> Vec<(u64, u64)> {
        seed_pairs(self.random_seed_pairs, self.attacker_seed)
    }
}

/// Observable trace of one configuration.
pub fn observe(
    prog: &WholeProgram,
    state: &MachineState,
    model: &AttackerModel,
    speculator: Option<&Speculator>,
    mpk_under_speculation: bool,
) -> Result<Trace, CheckError> {
    let config = ExecConfig {
        parallel_observer: match model {
            AttackerModel::ParallelReadOnly { schedule_budget } => Some(*schedule_budget),
            _ => None,
        },
        mpk_under_speculation,
    };
    let trace = match speculator {
        Some(sp) => spec_run(prog, state, sp, config)?.0,
        None => run(prog, state, config)?.0,
    };
    Ok(observable_projection(&trace))
}

/// A benign driver: calls every API function once, in name order, with
/// in-bounds arguments.
pub fn benign_driver(api: &ApiContext) -> Program {
    driver_from_calls(api, api.keys().map(|n| (n.clone(), 1)).collect())
}

/// `count` benign drivers with varied call orders and scalar arguments in
/// `0..4`.
pub fn benign_drivers(api: &ApiContext, count: usize, seed: u64) -> Vec<Program> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<&String> = api.keys().collect();
    (0..count)
        .map(|_| {
            if names.is_empty() {
                return benign_driver(api);
            }
            let calls = (0..rng.gen_range(1..=4))
                .map(|_| (names[rng.gen_range(0..names.len())].clone(), rng.gen_range(0..4)))
                .collect();
            driver_from_calls(api, calls)
        })
        .collect()
}

fn driver_from_calls(api: &ApiContext, calls: Vec<(String, u64)>) -> Program {
    let mut main = Function::new(ENTRY, Label::App);
    let mut buffers: BTreeMap<(String, String), String> = BTreeMap::new();
    for (f, sig) in api {
        for p in &sig.params {
            if let ValueKind::Buf(n) = p.kind {
                let name = format!("d{}", buffers.len());
                main.buffers.push(BufferDecl { name: name.clone(), len: n, region: Region::Unprotected });
                for i in 0..n {
                    main.body.push(Instr::Store {
                        buf: BufferRef::Named(name.clone()),
                        index: Operand::Lit(i as u64),
                        src: Operand::Lit(i as u64 + 1),
                    });
                }
                buffers.insert((f.clone(), p.name.clone()), name);
            }
        }
    }
    for (k, (f, arg)) in calls.into_iter().enumerate() {
        let args = api[&f]
            .params
            .iter()
            .map(|p| match p.kind {
                ValueKind::Val => Operand::Lit(arg),
                ValueKind::Buf(_) => Operand::Var(buffers[&(f.clone(), p.name.clone())].clone()),
            })
            .collect();
        let dst = format!("r{k}");
        main.locals.push(dst.clone());
        main.body.push(Instr::Call { dst: Some(dst), callee: f, args });
    }
    main.body.push(Instr::Return(None));
    Program {
        functions: BTreeMap::from([(ENTRY.to_string(), main)]),
        entry: ENTRY.into(),
        api: api.clone(),
    }
}

/// Classical constant-time: a fixed benign driver produces the same trace
/// for every secret seed.
pub fn classical_ct_check(
    lib: &Library,
    api: &ApiContext,
    secrets: &SecretContext,
    driver: &Program,
    seeds: &[u64],
) -> Result<Verdict, CheckError> {
    let _ = api;
    let whole = link(lib, driver)?;
    let states = initial_states(secrets, seeds);
    let model = AttackerModel::MemorySafe;
    let mut stats = Stats { attackers: 1, seed_pairs: seeds.len().saturating_sub(1), speculators: 1, runs: 0 };
    let Some(first) = states.first() else {
        return Ok(Verdict::Secure { stats });
    };
    let base = observe(&whole, first, &model, None, true)?;
    stats.runs += 1;
    for (seed, s) in seeds.iter().zip(&states).skip(1) {
        let t = observe(&whole, s, &model, None, true)?;
        stats.runs += 1;
        if let Some(index) = find_divergence(&base, &t) {
            return Ok(Verdict::Violation {
                stats,
                witness: Witness {
                    attacker_src: driver.to_string(),
                    seeds: (seeds[0], *seed),
                    speculator: None,
                    divergence: divergence_at(&base, &t, index),
                },
            });
        }
    }
    Ok(Verdict::Secure { stats })
}

/// Robust constant-time with respect to `model`: every generated attacker,
/// secret-seed pair and (for speculative attackers) enumerated speculator
/// yields equal observable traces.
pub fn robust_ct_check(
    lib: &Library,
    api: &ApiContext,
    secrets: &SecretContext,
    model: &AttackerModel,
    cfg: &CheckConfig,
) -> Result<Verdict, CheckError> {
    check_library(lib, api, secrets)?;
    let attackers = generate_attackers_with(
        api,
        secrets,
        model,
        cfg.attacker_budget,
        cfg.attacker_seed,
        &cfg.generator,
    )?;
    robust_ct_check_against(lib, secrets, model, &attackers, cfg)
}

/// Robust check against an explicit attacker list.
pub fn robust_ct_check_against(
    lib: &Library,
    secrets: &SecretContext,
    model: &AttackerModel,
    attackers: &[Program],
    cfg: &CheckConfig,
) -> Result<Verdict, CheckError> {
    let pairs = cfg.seed_pairs();
    let mut seeds: Vec<u64> = pairs.iter().flat_map(|(a, b)| [*a, *b]).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let states: BTreeMap<u64, MachineState> =
        seeds.iter().copied().zip(initial_states(secrets, &seeds)).collect();
    let mut stats = Stats { attackers: 0, seed_pairs: pairs.len(), speculators: 0, runs: 0 };

    for attacker in attackers {
        stats.attackers += 1;
        let whole = link(lib, attacker)?;
        let speculators: Vec<Option<Speculator>> = match model.speculator_model() {
            Some(sm) => enumerate_speculators(sm, &whole, cfg.speculator_cap)?
                .into_iter()
                .map(Some)
                .collect(),
            None => vec![None],
        };
        stats.speculators += speculators.len();
        for &(a, b) in &pairs {
            for sp in &speculators {
                let lhs = observe(&whole, &states[&a], model, sp.as_ref(), cfg.mpk_under_speculation)?;
                let rhs = observe(&whole, &states[&b], model, sp.as_ref(), cfg.mpk_under_speculation)?;
                stats.runs += 2;
                if find_divergence(&lhs, &rhs).is_some() {
                    let attacker = if cfg.minimize {
                        minimize(lib, secrets, model, attacker, (a, b), sp.as_ref(), cfg)?
                    } else {
                        attacker.clone()
                    };
                    let witness = build_witness(lib, secrets, model, &attacker, (a, b), sp.clone(), cfg)?;
                    return Ok(Verdict::Violation { stats, witness });
                }
            }
        }
    }
    Ok(Verdict::Secure { stats })
}

fn diverges(
    lib: &Library,
    secrets: &SecretContext,
    model: &AttackerModel,
    attacker: &Program,
    seeds: (u64, u64),
    sp: Option<&Speculator>,
    cfg: &CheckConfig,
) -> Result<Option<(Trace, Trace, usize)>, CheckError> {
    let whole = link(lib, attacker)?;
    let states = initial_states(secrets, &[seeds.0, seeds.1]);
    let lhs = observe(&whole, &states[0], model, sp, cfg.mpk_under_speculation)?;
    let rhs = observe(&whole, &states[1], model, sp, cfg.mpk_under_speculation)?;
    Ok(find_divergence(&lhs, &rhs).map(|i| (lhs, rhs, i)))
}

/// Re-run the witness from its printed source and confirm the divergence.
fn build_witness(
    lib: &Library,
    secrets: &SecretContext,
    model: &AttackerModel,
    attacker: &Program,
    seeds: (u64, u64),
    sp: Option<Speculator>,
    cfg: &CheckConfig,
) -> Result<Witness, CheckError> {
    let src = attacker.to_string();
    let reparsed = parse_program(&src).map_err(|e| CheckError::WitnessInvalid(e.to_string()))?;
    let Some((lhs, rhs, index)) = diverges(lib, secrets, model, &reparsed, seeds, sp.as_ref(), cfg)?
    else {
        return Err(CheckError::WitnessInvalid("traces agree on re-run".into()));
    };
    Ok(Witness { attacker_src: src, seeds, speculator: sp, divergence: divergence_at(&lhs, &rhs, index) })
}

/// Paths to every instruction of a block, deepest-last.
fn instruction_paths(block: &[Instr], prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    for (i, instr) in block.iter().enumerate() {
        prefix.push(i);
        out.push(prefix.clone());
        match instr {
            Instr::If { then_block, else_block, .. } => {
                prefix.push(0);
                instruction_paths(then_block, prefix, out);
                prefix.pop();
                prefix.push(1);
                instruction_paths(else_block, prefix, out);
                prefix.pop();
            }
            Instr::Loop { body, .. } => {
                prefix.push(0);
                instruction_paths(body, prefix, out);
                prefix.pop();
            }
            _ => {}
        }
        prefix.pop();
    }
}

fn remove_at(block: &mut Vec<Instr>, path: &[usize]) -> bool {
    match path {
        [] => false,
        [i] => {
            if *i < block.len() {
                block.remove(*i);
                true
            } else {
                false
            }
        }
        [i, arm, rest @ ..] => match block.get_mut(*i) {
            Some(Instr::If { then_block, else_block, .. }) => {
                remove_at(if *arm == 0 { then_block } else { else_block }, rest)
            }
            Some(Instr::Loop { body, .. }) => remove_at(body, rest),
            _ => false,
        },
    }
}

/// Greedy instruction deletion on the attacker's entry function while the
/// divergence persists and the program stays in the attacker class.
fn minimize(
    lib: &Library,
    secrets: &SecretContext,
    model: &AttackerModel,
    attacker: &Program,
    seeds: (u64, u64),
    sp: Option<&Speculator>,
    cfg: &CheckConfig,
) -> Result<Program, CheckError> {
    let probes = mandatory_probes(&attacker.api, secrets);
    let mut current = attacker.clone();
    loop {
        let mut paths = Vec::new();
        instruction_paths(&current.functions[&current.entry].body, &mut Vec::new(), &mut paths);
        let mut improved = false;
        // Deepest and latest first so earlier paths stay valid.
        for path in paths.into_iter().rev() {
            let mut candidate = current.clone();
            let body = &mut candidate.functions.get_mut(&candidate.entry).unwrap().body;
            if !remove_at(body, &path) {
                continue;
            }
            if link(lib, &candidate).is_err() {
                continue;
            }
            if !is_attacker(&candidate, model, secrets, &probes, &[0, 1])? {
                continue;
            }
            if let Ok(Some(_)) = diverges(lib, secrets, model, &candidate, seeds, sp, cfg) {
                current = candidate;
                improved = true;
                break;
            }
        }
        if !improved {
            break;
        }
    }
    // Dropping unused locals shifts register slots, so it is re-checked too.
    let mut pruned = current.clone();
    let main = pruned.functions.get_mut(&pruned.entry).unwrap();
    let used = used_names(&main.body);
    main.locals.retain(|l| used.contains(l.as_str()));
    if pruned != current
        && is_attacker(&pruned, model, secrets, &probes, &[0, 1])?
        && matches!(diverges(lib, secrets, model, &pruned, seeds, sp, cfg), Ok(Some(_)))
    {
        current = pruned;
    }
    Ok(current)
}

fn used_names(block: &[Instr]) -> BTreeSet<&str> {
    fn operand<'a>(o: &'a Operand, out: &mut BTreeSet<&'a str>) {
        if let Operand::Var(n) = o {
            out.insert(n.as_str());
        }
    }
    let mut out = BTreeSet::new();
    let mut instrs = Vec::new();
    crate::ir::walk(block, &mut |i| instrs.push(i));
    for i in instrs {
        match i {
            Instr::Assign { dst, src } => {
                out.insert(dst.as_str());
                operand(src, &mut out);
            }
            Instr::BinOp { dst, lhs, rhs, .. } => {
                out.insert(dst.as_str());
                operand(lhs, &mut out);
                operand(rhs, &mut out);
            }
            Instr::Load { dst, buf, index } => {
                out.insert(dst.as_str());
                if let BufferRef::Raw(o) = buf {
                    operand(o, &mut out);
                }
                operand(index, &mut out);
            }
            Instr::Store { buf, index, src } => {
                if let BufferRef::Raw(o) = buf {
                    operand(o, &mut out);
                }
                operand(index, &mut out);
                operand(src, &mut out);
            }
            Instr::If { cond, .. } => operand(cond, &mut out),
            Instr::Loop { counter, .. } => {
                out.insert(counter.as_str());
            }
            Instr::Call { dst, args, .. } => {
                if let Some(d) = dst {
                    out.insert(d.as_str());
                }
                for a in args {
                    operand(a, &mut out);
                }
            }
            Instr::Return(Some(o)) => operand(o, &mut out),
            _ => {}
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::Region;

    fn read(a: u64) -> Event {
        Event::Read { region: Region::Unprotected, address: a }
    }

    #[test]
    fn divergence_of_equal_traces() {
        let t = Trace::new(vec![read(1), read(2)]);
        assert_eq!(find_divergence(&t, &t.clone()), None);
    }

    #[test]
    fn divergence_at_first_branch() {
        let a = Trace::new(vec![Event::Branch { taken: true }]);
        let b = Trace::new(vec![Event::Branch { taken: false }]);
        assert_eq!(find_divergence(&a, &b), Some(0));
    }

    #[test]
    fn prefix_diverges_at_shorter_length() {
        let a = Trace::new(vec![read(1)]);
        let b = Trace::new(vec![read(1), Event::Write { region: Region::Unprotected, address: 2 }]);
        assert_eq!(find_divergence(&a, &b), Some(1));
        assert_eq!(find_divergence(&b, &a), Some(1));
    }

    #[test]
    fn default_seed_pairs() {
        let p = seed_pairs(3, 9);
        assert_eq!(&p[..2], &[(0, 1), (0, 2)]);
        assert_eq!(p.len(), 5);
        assert_eq!(p, seed_pairs(3, 9));
    }
}
