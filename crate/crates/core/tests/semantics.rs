mod common;

use proptest::prelude::*;
use robustct::corpus;
use robustct::ir::{Label, Region, WholeProgram};
use robustct::semantics::{
    initial_states, observable_projection, run, step_bound, traces, Event, ExecConfig, Machine,
    MemoryLayout, Step, Trace,
};

use common::{app, lib, random_programs, whole};

fn solo(src: &str) -> Trace {
    let w = WholeProgram::standalone(&app(src)).unwrap();
    traces(&w, &initial_states(&Default::default(), &[0])[0]).unwrap()
}

#[test]
fn branch_on_zero_takes_the_else_block() {
    let t = solo("fn app main() {\n    var c, x\n    if c {\n        x = 1\n    } else {\n        x = 2\n    }\n}\n");
    assert_eq!(t.events, vec![Event::Branch { taken: false }]);
}

#[test]
fn in_bounds_load_reads_base_plus_index() {
    let t = solo("fn app main() {\n    var x\n    buf a[3]\n    buf b[4]\n    x = load b[2]\n}\n");
    assert_eq!(t.events, vec![Event::Read { region: Region::Unprotected, address: 3 + 2 }]);
}

#[test]
fn app_load_from_protected_memory_faults_and_halts() {
    let base = MemoryLayout::default().protected_base();
    let t = solo(&format!("fn app main() {{\n    var x\n    x = load @{base}[0]\n    x = load @0[0]\n}}\n"));
    assert_eq!(t.events, vec![Event::MemFault { address: base }]);
}

#[test]
fn store_then_load_of_one_cell() {
    let t = solo("fn app main() {\n    var x\n    buf b[1]\n    store b[0] = 9\n    x = load b[0]\n}\n");
    let u = Region::Unprotected;
    assert_eq!(t.events, vec![Event::Write { region: u, address: 0 }, Event::Read { region: u, address: 0 }]);
}

#[test]
fn api_return_value_is_observed_at_the_crossing() {
    let s = lib("api seven()\nfn lib seven() {\n    return 7\n}\n");
    let w = whole(&s, &app("api seven()\nfn app main() {\n    var r\n    r = call seven()\n}\n"));
    let t = traces(&w, &initial_states(&s.secrets, &[0])[0]).unwrap();
    assert_eq!(
        t.events,
        vec![
            Event::Call { from: Label::App, to: Label::Lib, name: "seven".into() },
            Event::Ret { name: "seven".into(), from: Label::Lib, to: Label::App, value: Some(7) },
        ]
    );
}

#[test]
fn kcopy_trace_has_copy_loop_then_core_calls_then_memzero() {
    let s = lib(corpus::KCOPY);
    let w = whole(&s, &app("api stream(c: buf[32]) declassify(c)\nfn app main() {\n    var r\n    buf m[32]\n    r = call stream(m)\n}\n"));
    let t = traces(&w, &initial_states(&s.secrets, &[0])[0]).unwrap();
    let lib_events: Vec<&Event> = t.events[1..t.len() - 1].iter().collect();
    let copy = &lib_events[..64];
    for pair in copy.chunks(2) {
        assert!(matches!(pair[0], Event::Read { region: Region::Protected, .. }));
        assert!(matches!(pair[1], Event::Write { region: Region::Unprotected, .. }));
    }
    let calls = lib_events.iter().filter(|e| matches!(e, Event::Call { name, .. } if name == "core")).count();
    assert_eq!(calls, 4);
    let tail = &lib_events[lib_events.len() - 32..];
    assert!(tail.iter().all(|e| matches!(e, Event::Write { region: Region::Unprotected, .. })));
}

#[test]
fn projection_keeps_every_event() {
    assert_eq!(observable_projection(&Trace::default()), Trace::default());
    let t = Trace::new(vec![Event::OobRead { address: 4, value: 9 }, Event::Branch { taken: true }]);
    assert_eq!(observable_projection(&t), t);
}

#[test]
fn registers_survive_returns_to_the_application() {
    let s = lib(corpus::RESIDUE);
    let w = whole(&s, &app("api blind(x: val)\nfn app main() {\n    var r\n    r = call blind(3)\n}\n"));
    let st = &initial_states(&s.secrets, &[1])[0];
    let (_, end) = run(&w, st, ExecConfig::default()).unwrap();
    assert!(end.registers.contains(&u64::MAX));
}

#[test]
fn privileged_instruction_in_app_domain_is_illegal() {
    use robustct::ir::{Function, Instr, Library, Program};
    let mut main = Function::new("main", Label::App);
    main.body.push(Instr::ClearRegs);
    let p = Program { functions: [("main".to_string(), main)].into(), entry: "main".into(), api: Default::default() };
    // Bypass link-time rejection by building the closed program directly.
    let w = WholeProgram {
        functions: p.functions.clone(),
        entry: "main".into(),
        api: Default::default(),
        branch_sites: 0,
    };
    let _ = Library::default();
    let st = initial_states(&Default::default(), &[0]).remove(0);
    assert!(run(&w, &st, ExecConfig::default()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn runs_are_deterministic_and_within_the_step_bound(seed in 0u64..1000) {
        for (s, w) in random_programs(2) {
            let st = &initial_states(&s.secrets, &[seed])[0];
            let a = run(&w, st, ExecConfig::default()).unwrap();
            let b = run(&w, st, ExecConfig::default()).unwrap();
            prop_assert_eq!(&a, &b);

            let mut m = Machine::new(&w, st.clone()).unwrap();
            while m.step().unwrap() != Step::Halt {}
            prop_assert!(m.steps() <= step_bound(&w, st) + 1);
        }
    }

    #[test]
    fn no_successful_protected_access_from_the_application(seed in 0u64..1000) {
        for (s, w) in random_programs(2) {
            let st = &initial_states(&s.secrets, &[seed])[0];
            let t = traces(&w, st).unwrap();
            for e in t.app_events() {
                let bad = matches!(e, Event::Read { region: Region::Protected, .. } | Event::Write { region: Region::Protected, .. });
                prop_assert!(!bad, "{}", e);
            }
        }
    }

    #[test]
    fn in_bounds_addresses_do_not_depend_on_values(a in any::<u64>(), b in any::<u64>()) {
        let src = |v: u64| format!("fn app main() {{\n    var x, y\n    buf p[4]\n    store p[1] = {v}\n    x = load p[1]\n    y = x + 1\n    store p[2] = y\n}}\n");
        prop_assert_eq!(solo(&src(a)), solo(&src(b)));
    }
}
