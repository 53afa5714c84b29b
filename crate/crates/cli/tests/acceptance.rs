//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::collections::BTreeSet;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use robustct::attackers::{generate_attackers, trace_satisfies, AttackerModel};
use robustct::checker::{benign_drivers, find_divergence, observe, robust_ct_check, CheckConfig, Verdict};
use robustct::compiler::{compile, run_outcome};
use robustct::corpus;
use robustct::costbench::{run_bench, BenchSuite, CostModel};
use robustct::ir::{link, parse_program, Label, LibrarySource, Region};
use robustct::semantics::{initial_states, run, Event, ExecConfig, Trace};
use robustct::speculation::{enumerate_speculators, spec_run, SpeculatorModel};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn check(s: &LibrarySource, model: &AttackerModel, budget: usize) -> Verdict {
    robust_ct_check(&s.library, &s.api, &s.secrets, model, &CheckConfig::with_budget(budget)).unwrap()
}

fn within(start: Instant, limit: Duration) -> Result<(), String> {
    let t = start.elapsed();
    ensure(t <= limit, format!("took {t:?}, limit {limit:?}"))
}

fn motivating_example() -> Outcome {
    let start = Instant::now();
    let leaky = corpus::load(corpus::KCOPY_LEAKY);
    let v = check(&leaky, &AttackerModel::ReadOnly, 500);
    let w = v.witness().ok_or("unmitigated key copy passed")?;
    let (lhs, rhs) = (w.divergence.lhs.clone().unwrap_or_default(), w.divergence.rhs.clone().unwrap_or_default());
    ensure(lhs.starts_with("oob_read") && rhs.starts_with("oob_read") && lhs != rhs, format!("divergence {lhs} vs {rhs}"))?;

    let fixed = check(&corpus::load(corpus::KCOPY), &AttackerModel::ReadOnly, 500);
    ensure(fixed.is_secure(), "memzero version fails")?;
    ensure(fixed.stats().attackers >= 500 && fixed.stats().seed_pairs >= 3, "budget too small")?;
    let compiled = compile(&leaky, &AttackerModel::ReadOnly).map_err(|e| e.to_string())?;
    ensure(check(&compiled.source, &AttackerModel::ReadOnly, 500).is_secure(), "compiled version fails")?;
    within(start, Duration::from_secs(60))?;
    Ok(format!("witness `{lhs}` vs `{rhs}`; fixed and compiled secure at 500 attackers x 3 pairs"))
}

fn compiled_corpus_is_robust() -> Outcome {
    let start = Instant::now();
    let suite = corpus::constant_time_suite();
    let mut non_vacuous = 0;
    for (name, s) in &suite {
        let mut unmitigated_fails = false;
        for m in AttackerModel::all() {
            let c = compile(s, &m).map_err(|e| format!("{name}/{m}: {e}"))?;
            let v = check(&c.source, &m, 200);
            ensure(v.is_secure(), format!("compiled {name} fails under {m}"))?;
            unmitigated_fails |= !check(s, &m, 200).is_secure();
        }
        non_vacuous += unmitigated_fails as usize;
    }
    ensure(non_vacuous >= 3, format!("only {non_vacuous} unmitigated libraries fail"))?;
    within(start, Duration::from_secs(600))?;
    Ok(format!("{} libraries x {} models secure at 200 attackers; {non_vacuous} fail unmitigated", suite.len(), AttackerModel::all().len()))
}

fn speculation_correctness() -> Outcome {
    let model = SpeculatorModel::exhaustive([1, 2], 1);
    let mut programs = Vec::new();
    for (i, (_, s)) in corpus::constant_time_suite().into_iter().enumerate() {
        for a in generate_attackers(&s.api, &s.secrets, &AttackerModel::speculative_default(), 15, i as u64).unwrap() {
            programs.push((s.clone(), link(&s.library, &a).unwrap()));
        }
    }
    programs.truncate(100);
    let mut configs = 0;
    for (k, (s, w)) in programs.iter().enumerate() {
        let st = &initial_states(&s.secrets, &[k as u64])[0];
        let (seq_trace, seq_state) = run(w, st, ExecConfig::default()).map_err(|e| e.to_string())?;
        let sps = enumerate_speculators(&model, w, 1 << 16).map_err(|e| e.to_string())?;
        for sp in &sps {
            let (t, end) = spec_run(w, st, sp, ExecConfig::default()).map_err(|e| e.to_string())?;
            ensure(end == seq_state, format!("program {k}: final state differs"))?;
            ensure(t.without_speculation() == seq_trace, format!("program {k}: projected trace differs"))?;
            configs += 1;
        }
    }
    ensure(programs.len() == 100, "fewer than 100 programs")?;
    Ok(format!("100 programs, {configs} speculator runs, all rolled back exactly"))
}

fn inside_window(t: &Trace, index: usize) -> bool {
    let mut open = 0i32;
    for e in &t.events[..index] {
        match e {
            Event::SpecStart { .. } => open += 1,
            Event::Rollback { .. } => open -= 1,
            _ => {}
        }
    }
    open > 0
}

fn speculative_residue() -> Outcome {
    let model = AttackerModel::Speculative(SpeculatorModel::exhaustive([1, 2, 24], 1));
    let source = corpus::load(corpus::LOOKUP);
    let unfenced = compile(&source, &AttackerModel::ReadOnly).map_err(|e| e.to_string())?;
    let v = check(&unfenced.source, &model, 200);
    let w = v.witness().ok_or("unfenced lookup passes")?;
    let attacker = parse_program(&w.attacker_src).map_err(|e| e.to_string())?;
    let whole = link(&unfenced.source.library, &attacker).map_err(|e| e.to_string())?;
    let st = initial_states(&source.secrets, &[w.seeds.0, w.seeds.1]);
    let a = observe(&whole, &st[0], &model, w.speculator.as_ref(), true).map_err(|e| e.to_string())?;
    let b = observe(&whole, &st[1], &model, w.speculator.as_ref(), true).map_err(|e| e.to_string())?;
    ensure(find_divergence(&a, &b) == Some(w.divergence.index), "witness does not replay")?;
    ensure(inside_window(&a, w.divergence.index), "divergence outside a misprediction window")?;
    let what = w.divergence.lhs.clone().unwrap_or_default();

    let fenced = compile(&source, &model).map_err(|e| e.to_string())?;
    let v = check(&fenced.source, &model, 200);
    ensure(v.is_secure(), "fenced lookup fails")?;
    Ok(format!("unfenced diverges speculatively at `{what}`; fenced secure over {} speculator runs", v.stats().runs))
}

fn random_event(rng: &mut ChaCha8Rng) -> Event {
    let region = if rng.gen_bool(0.5) { Region::Protected } else { Region::Unprotected };
    let address = rng.gen_range(0..4096);
    match rng.gen_range(0..9) {
        0 => Event::Branch { taken: rng.gen() },
        1 => Event::Read { region, address },
        2 => Event::Write { region, address },
        3 => Event::OobRead { address, value: rng.gen() },
        4 => Event::OobWrite { address },
        5 => Event::MemFault { address },
        6 => Event::Snapshot { address, value: rng.gen() },
        7 => Event::SpecStart { id: 0 },
        _ => Event::Rollback { id: 0 },
    }
}

fn random_trace(rng: &mut ChaCha8Rng) -> Trace {
    let mut events = Vec::new();
    for _ in 0..rng.gen_range(0..30) {
        if rng.gen_bool(0.1) {
            events.push(Event::Call { from: Label::App, to: Label::Lib, name: "f".into() });
            for _ in 0..rng.gen_range(0..5) {
                events.push(random_event(rng));
            }
            events.push(Event::Ret { name: "f".into(), from: Label::Lib, to: Label::App, value: Some(rng.gen()) });
        } else if rng.gen_bool(0.9) {
            // Keep forbidden events rare enough that every model is exercised.
            let e = random_event(rng);
            let rare = matches!(e, Event::OobRead { .. } | Event::OobWrite { .. } | Event::MemFault { .. });
            if !rare || rng.gen_bool(0.15) {
                events.push(e);
            }
        }
    }
    Trace::new(events)
}

fn monotonicity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut counts = [0usize; 3];
    for i in 0..1000 {
        let t = random_trace(&mut rng);
        let ms = trace_satisfies(&AttackerModel::MemorySafe, &t);
        let ro = trace_satisfies(&AttackerModel::ReadOnly, &t);
        let mu = trace_satisfies(&AttackerModel::MemoryUnsafe, &t);
        ensure(!ms || ro, format!("trace {i}: memory-safe but not read-only"))?;
        ensure(!ro || mu, format!("trace {i}: read-only but not memory-unsafe"))?;
        counts[0] += ms as usize;
        counts[1] += ro as usize;
        counts[2] += mu as usize;
    }
    Ok(format!("1000 traces, satisfied by memory-safe/read-only/memory-unsafe: {}/{}/{}", counts[0], counts[1], counts[2]))
}

fn functional_preservation() -> Outcome {
    let mut runs = 0;
    for (name, s) in corpus::constant_time_suite() {
        let drivers = benign_drivers(&s.api, 50, 17);
        for m in AttackerModel::all() {
            let c = compile(&s, &m).map_err(|e| e.to_string())?;
            let masked = c.scratch_params();
            for (i, d) in drivers.iter().enumerate() {
                let seed = i as u64;
                let a = run_outcome(&s, d, seed, &masked).map_err(|e| e.to_string())?;
                let b = run_outcome(&c.source, d, seed, &masked).map_err(|e| e.to_string())?;
                ensure(a == b, format!("{name}/{m}: driver {i} differs"))?;
                runs += 1;
            }
        }
    }
    Ok(format!("{runs} driver runs identical"))
}

fn overhead_trend() -> Outcome {
    let sizes = [1, 128, 256, 512, 1024, 2048, 4096];
    let models = [AttackerModel::ReadOnly, AttackerModel::parallel_default()];
    let r = run_bench(&[BenchSuite::stream()], &models, &sizes, &CostModel::default()).map_err(|e| e.to_string())?;
    let ro = &r.summary_for("read-only").unwrap().sizes;
    let par = &r.summary_for("parallel-read-only").unwrap().sizes;
    let pct: Vec<f64> = ro.iter().map(|s| s.median_overhead_pct).collect();
    ensure(pct.windows(2).all(|w| w[1] < w[0]), format!("not strictly decreasing: {pct:?}"))?;
    let mut costs: Vec<f64> = ro.iter().map(|s| s.overhead_cost_median).collect();
    costs.sort_by(f64::total_cmp);
    let median = costs[costs.len() / 2];
    ensure(costs.iter().all(|c| (c - median).abs() <= 0.25 * median), format!("overhead cost spread {costs:?}"))?;
    for (a, b) in ro.iter().zip(par) {
        ensure(b.median_overhead_pct >= a.median_overhead_pct, format!("parallel below read-only at size {}", a.size))?;
    }
    Ok(format!(
        "read-only {:.2}% -> {:.2}%, overhead cost {median}; parallel {:.2}% -> {:.2}%",
        pct[0],
        pct[pct.len() - 1],
        par[0].median_overhead_pct,
        par[par.len() - 1].median_overhead_pct
    ))
}

fn determinism() -> Outcome {
    let corpus_dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/corpus");
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let suite = dir.path().join("suite");
    std::fs::create_dir(&suite).map_err(|e| e.to_string())?;
    std::fs::copy(corpus_dir.join("stream.ir.tmpl"), suite.join("stream.ir")).map_err(|e| e.to_string())?;
    let app = dir.path().join("app.ir");
    std::fs::write(&app, "api lookup(i: val)\nfn app main() {\n    var r\n    r = call lookup(7)\n}\n").map_err(|e| e.to_string())?;

    let p = |f: &str| corpus_dir.join(f).display().to_string();
    let d = |f: &str| dir.path().join(f).display().to_string();
    let commands: Vec<Vec<String>> = vec![
        vec!["check".into(), p("kcopy_leaky.ir"), "--json".into(), "--budget".into(), "50".into()],
        vec!["compile".into(), p("mac.ir"), "--model".into(), "speculative".into(), "-o".into(), d("mac.out.ir")],
        vec!["bench".into(), d("suite"), "--sizes".into(), "1,64".into(), "--json".into()],
        vec!["gen-attackers".into(), p("dh.ir"), "--budget".into(), "5".into(), "--out".into(), d("attackers")],
        vec!["trace".into(), p("lookup.ir"), app.display().to_string(), "--json".into(), "--speculator".into(), "once:24".into()],
    ];
    for args in &commands {
        let run = || Command::new(env!("CARGO_BIN_EXE_robustct")).args(args).output().map_err(|e| e.to_string());
        let (a, b) = (run()?, run()?);
        ensure(a.status.code() == b.status.code(), format!("{}: exit codes differ", args[0]))?;
        ensure(serde_json::from_slice::<serde_json::Value>(&a.stdout).is_ok(), format!("{}: output is not JSON", args[0]))?;
        ensure(a.stdout == b.stdout, format!("{}: output differs between runs", args[0]))?;
    }
    Ok(format!("{} commands byte-identical across reruns", commands.len()))
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("motivating example", motivating_example),
        ("compiled corpus is robust", compiled_corpus_is_robust),
        ("speculation rollback", speculation_correctness),
        ("speculative residue", speculative_residue),
        ("attacker model monotonicity", monotonicity),
        ("functional preservation", functional_preservation),
        ("overhead trend", overhead_trend),
        ("determinism", determinism),
    ];
    let mut failed = BTreeSet::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {}: PASS {name} ({secs:.1}s): {detail}", i + 1),
            Err(why) => {
                println!("criterion {}: FAIL {name} ({secs:.1}s): {why}", i + 1);
                failed.insert(i + 1);
            }
        }
    }
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
