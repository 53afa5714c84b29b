mod common;

use proptest::prelude::*;
use robustct::ir::{Region, WholeProgram};
use robustct::semantics::{initial_states, run, traces, Event, ExecConfig, MemoryLayout};
use robustct::speculation::{
    enumerate_speculators, spec_run, spec_traces, Rule, ScriptEntry, SpeculationError, Speculator,
    SpeculatorModel, DEFAULT_ENUMERATION_CAP,
};

use common::{app, random_programs};

fn standalone(src: &str) -> WholeProgram {
    WholeProgram::standalone(&app(src)).unwrap()
}

const BOUNDS_CHECK: &str = "fn app main() {\n    var i, ok, x\n    buf b[4]\n    i = 9\n    ok = i < 4\n    if ok {\n        x = load b[i]\n    }\n}\n";

#[test]
fn never_speculating_matches_sequential_execution() {
    for (s, w) in random_programs(2) {
        let st = &initial_states(&s.secrets, &[1])[0];
        assert_eq!(spec_traces(&w, st, &Speculator::never()).unwrap(), traces(&w, st).unwrap());
    }
}

#[test]
fn mispredicted_bounds_check_reads_out_of_bounds() {
    let w = standalone(BOUNDS_CHECK);
    let st = &initial_states(&Default::default(), &[0])[0];
    let sp = Speculator::script(vec![ScriptEntry(0, None, 2)], 1);
    let t = spec_traces(&w, st, &sp).unwrap();
    assert_eq!(
        t.events,
        vec![
            Event::Branch { taken: false },
            Event::SpecStart { id: 0 },
            Event::OobRead { address: 9, value: 0 },
            Event::Rollback { id: 0 },
        ]
    );
}

#[test]
fn fence_ends_the_speculation_window() {
    let w = standalone(
        "fn app main() {\n    var i, ok, x\n    buf b[4]\n    i = 9\n    ok = i < 4\n    if ok {\n        fence\n        x = load b[i]\n    }\n}\n",
    );
    let st = &initial_states(&Default::default(), &[0])[0];
    let sp = Speculator::script(vec![ScriptEntry(0, None, 8)], 1);
    let t = spec_traces(&w, st, &sp).unwrap();
    assert_eq!(
        t.events,
        vec![Event::Branch { taken: false }, Event::SpecStart { id: 0 }, Event::Rollback { id: 0 }]
    );
}

#[test]
fn speculative_application_access_to_protected_memory_is_silent() {
    let base = MemoryLayout::default().protected_base();
    let w = standalone(&format!(
        "fn app main() {{\n    var c, x\n    if c {{\n        x = load @{base}[0]\n    }}\n}}\n"
    ));
    let st = &initial_states(&Default::default(), &[1])[0];
    let sp = Speculator::script(vec![ScriptEntry(0, None, 4)], 1);
    let (t, _) = spec_run(&w, st, &sp, ExecConfig::default()).unwrap();
    assert_eq!(
        t.events,
        vec![Event::Branch { taken: false }, Event::SpecStart { id: 0 }, Event::Rollback { id: 0 }]
    );

    let leaky = ExecConfig { mpk_under_speculation: false, ..ExecConfig::default() };
    let (t, _) = spec_run(&w, st, &sp, leaky).unwrap();
    assert!(t.events.iter().any(|e| matches!(e, Event::OobRead { address, .. } if *address == base)), "{t:?}");
}

#[test]
fn enumeration_sizes() {
    let one_site = standalone(BOUNDS_CHECK);
    let no_sites = standalone("fn app main() {\n    var x\n    x = 1\n}\n");
    let two_sites = standalone(
        "fn app main() {\n    var a, b\n    if a {\n        b = 1\n    }\n    if b {\n        a = 1\n    }\n}\n",
    );
    let cap = DEFAULT_ENUMERATION_CAP;
    assert_eq!(enumerate_speculators(&SpeculatorModel::exhaustive([1, 2], 1), &one_site, cap).unwrap().len(), 3);
    assert_eq!(
        enumerate_speculators(&SpeculatorModel::exhaustive([1, 2], 1), &no_sites, cap).unwrap(),
        vec![Speculator::never()]
    );
    assert_eq!(enumerate_speculators(&SpeculatorModel::exhaustive([4], 1), &two_sites, cap).unwrap().len(), 4);
    let all = enumerate_speculators(&SpeculatorModel::exhaustive([4], 1), &two_sites, cap).unwrap();
    assert!(all.iter().any(|s| s.rule == Rule::Never));
}

#[test]
fn malformed_speculators_are_rejected() {
    let w = standalone(BOUNDS_CHECK);
    let cap = DEFAULT_ENUMERATION_CAP;
    assert!(matches!(
        enumerate_speculators(&SpeculatorModel::exhaustive([1], 9), &w, cap),
        Err(SpeculationError::NestingExceeded(9))
    ));
    assert!(matches!(
        enumerate_speculators(&SpeculatorModel::exhaustive([0], 1), &w, cap),
        Err(SpeculationError::EmptyWindow)
    ));
    assert!(matches!(
        enumerate_speculators(&SpeculatorModel::exhaustive([1, 2], 1), &w, 2),
        Err(SpeculationError::BudgetExceeded { count: 3, cap: 2 })
    ));
    let st = &initial_states(&Default::default(), &[0])[0];
    let bad = Speculator::script(vec![ScriptEntry(0, None, 0)], 1);
    assert!(matches!(spec_traces(&w, st, &bad), Err(SpeculationError::EmptyWindow)));
}

fn small_speculators(w: &WholeProgram) -> Vec<Speculator> {
    enumerate_speculators(&SpeculatorModel::exhaustive([1, 2], 1), w, 64)
        .unwrap_or_else(|_| vec![Speculator { rule: Rule::FirstOccurrence { window: 2 }, max_depth: 1 }])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn rollback_restores_the_architectural_run(seed in 0u64..1000) {
        for (s, w) in random_programs(2) {
            let st = &initial_states(&s.secrets, &[seed])[0];
            let (seq_trace, seq_state) = run(&w, st, ExecConfig::default()).unwrap();
            for sp in small_speculators(&w) {
                let (t, end) = spec_run(&w, st, &sp, ExecConfig::default()).unwrap();
                prop_assert_eq!(&end, &seq_state);
                prop_assert_eq!(t.without_speculation(), seq_trace.clone());
            }
        }
    }

    #[test]
    fn speculative_events_are_bracketed(seed in 0u64..1000) {
        for (s, w) in random_programs(1) {
            let st = &initial_states(&s.secrets, &[seed])[0];
            for sp in small_speculators(&w) {
                let t = spec_traces(&w, st, &sp).unwrap();
                let mut open = Vec::new();
                for e in &t.events {
                    match e {
                        Event::SpecStart { id } => open.push(*id),
                        Event::Rollback { id } => prop_assert_eq!(open.pop(), Some(*id)),
                        _ => {}
                    }
                }
                prop_assert!(open.is_empty());
            }
        }
    }

    #[test]
    fn protection_keys_hold_under_speculation(seed in 0u64..1000) {
        for (s, w) in random_programs(1) {
            let st = &initial_states(&s.secrets, &[seed])[0];
            for sp in small_speculators(&w) {
                let t = spec_traces(&w, st, &sp).unwrap();
                for e in t.app_events() {
                    let bad = matches!(e, Event::Read { region: Region::Protected, .. });
                    prop_assert!(!bad, "{}", e);
                }
            }
        }
    }

    #[test]
    fn fenced_arms_produce_no_speculative_events(n in 1u64..16, w in 1u32..8) {
        let prog = standalone(&format!(
            "fn app main() {{\n    var i, ok, x\n    buf b[4]\n    i = {n}\n    ok = i < 4\n    if ok {{\n        fence\n        x = load b[i]\n    }} else {{\n        fence\n        x = load b[0]\n    }}\n}}\n"
        ));
        let st = &initial_states(&Default::default(), &[0])[0];
        let t = spec_traces(&prog, st, &Speculator::script(vec![ScriptEntry(0, None, w)], 1)).unwrap();
        let start = t.events.iter().position(|e| matches!(e, Event::SpecStart { .. })).unwrap();
        let closed = matches!(t.events[start + 1], Event::Rollback { .. });
        prop_assert!(closed, "{:?}", t.events);
    }
}
