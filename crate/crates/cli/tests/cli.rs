use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn corpus(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/corpus").join(name)
}

fn robustct(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_robustct")).args(args).output().unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn check_exit_codes_follow_the_verdict() {
    let dir = tempfile::tempdir().unwrap();
    let leaky = corpus("kcopy_leaky.ir");
    let o = robustct(&["check", path(&leaky), "--model", "read-only", "--json"]);
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["result"], "violation");
    assert_eq!(v["manifest"]["command"], "check");
    assert_eq!(v["manifest"]["inputs"][0]["sha256"].as_str().unwrap().len(), 64);

    let o = robustct(&["check", path(&corpus("kcopy.ir")), "--model", "read-only"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).starts_with("secure"));

    let fixed = dir.path().join("fixed.ir");
    let o = robustct(&["compile", path(&leaky), "--model", "read-only", "-o", path(&fixed)]);
    assert_eq!(o.status.code(), Some(0));
    let o = robustct(&["check", path(&fixed), "--model", "read-only"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
}

#[test]
fn compile_output_parses_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("mac.ir");
    let report = dir.path().join("report.json");
    let o = robustct(&[
        "compile",
        path(&corpus("mac.ir")),
        "--model",
        "speculative",
        "-o",
        path(&out),
        "--report",
        path(&report),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let text = fs::read_to_string(&out).unwrap();
    assert!(text.contains("fence"));
    let parsed = robustct::ir::parse_library(&text).unwrap();
    assert_eq!(parsed.to_string(), text);
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["report"]["model"], "speculative");
    assert_eq!(r["report"]["wrapped"][0], "mac");

    // Without -o the library goes to stdout.
    let o = robustct(&["compile", path(&corpus("public.ir")), "--model", "memory-safe"]);
    assert!(robustct::ir::parse_library(&stdout(&o)).is_ok());
}

#[test]
fn non_constant_time_library_is_refused() {
    let o = robustct(&["compile", path(&corpus("branchy.ir"))]);
    assert_eq!(o.status.code(), Some(2));
    let w: serde_json::Value = serde_json::from_slice(&o.stderr[..o.stderr.iter().rposition(|b| *b == b'}').unwrap() + 1]).unwrap();
    assert!(w["divergence"]["lhs"].as_str().unwrap().starts_with("branch"));
}

#[test]
fn bench_rejects_an_empty_suite() {
    let dir = tempfile::tempdir().unwrap();
    let o = robustct(&["bench", path(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bench_writes_report_files() {
    let dir = tempfile::tempdir().unwrap();
    let suite = dir.path().join("suite");
    fs::create_dir(&suite).unwrap();
    fs::copy(corpus("stream.ir.tmpl"), suite.join("stream.ir")).unwrap();
    let out = dir.path().join("out");
    let o = robustct(&["bench", path(&suite), "--models", "read-only", "--sizes", "1,128,1024", "--out", path(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let table = fs::read_to_string(out.join("bench.txt")).unwrap();
    assert!(table.contains("model: read-only"));
    let j: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("bench.json")).unwrap()).unwrap();
    let sizes = j["report"]["summary"][0]["sizes"].as_array().unwrap();
    let pct: Vec<f64> = sizes.iter().map(|s| s["median_overhead_pct"].as_f64().unwrap()).collect();
    assert!(pct.windows(2).all(|w| w[1] < w[0]), "{pct:?}");
}

#[test]
fn gen_attackers_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let run = |sub: &str, model: &str| {
        let out = dir.path().join(sub);
        let o = robustct(&["gen-attackers", path(&corpus("multi.ir")), "--model", model, "--budget", "10", "--seed", "4", "--out", path(&out)]);
        assert_eq!(o.status.code(), Some(0));
        let mut files: Vec<(String, String)> = fs::read_dir(&out)
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.extension().is_some_and(|x| x == "ir"))
            .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read_to_string(&p).unwrap()))
            .collect();
        files.sort();
        files
    };
    let a = run("a", "read-only");
    assert_eq!(a.len(), 10);
    assert_eq!(a, run("b", "read-only"));
    for (_, text) in run("c", "memory-safe") {
        assert!(!text.contains('@'), "{text}");
    }
}

#[test]
fn trace_prints_events() {
    let dir = tempfile::tempdir().unwrap();
    let app = dir.path().join("app.ir");
    fs::write(&app, "api lookup(i: val)\nfn app main() {\n    var r\n    r = call lookup(2)\n}\n").unwrap();
    let o = robustct(&["trace", path(&corpus("lookup.ir")), path(&app), "--seed", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.lines().next().unwrap().contains("call app lib lookup"), "{text}");
    let o = robustct(&["trace", path(&corpus("lookup.ir")), path(&app), "--json", "--speculator", "once:4"]);
    let j: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(j["trace"].as_array().unwrap().iter().any(|e| e["kind"] == "spec_start"));
}

#[test]
fn unknown_model_is_an_error() {
    let o = robustct(&["check", path(&corpus("mac.ir")), "--model", "nonsense"]);
    assert_eq!(o.status.code(), Some(2));
    let o = robustct(&["check", path(&corpus("mac.ir")), "--speculator", "once:2"]);
    assert_eq!(o.status.code(), Some(2));
}
