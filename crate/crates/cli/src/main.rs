//! `robustct`: check, compile, benchmark and attacker generation from the
//! command line. JSON goes to stdout, diagnostics to stderr. Exit codes are
//! 0 for secure or success, 1 for a violation, 2 for errors.

mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value as Json};

use robustct::attackers::{generate_attackers, AttackerModel};
use robustct::checker::{robust_ct_check, CheckConfig, Verdict};
use robustct::compiler::{compile, CompileError};
use robustct::costbench::{run_bench, BenchSuite, CostModel};
use robustct::ir::{link, parse_library, parse_program, LibrarySource};
use robustct::semantics::{initial_states, run, ExecConfig};
use robustct::speculation::{enumerate_speculators, spec_run, ScriptEntry, SpeculatorModel};

use manifest::{InputFile, RunManifest};

#[derive(Parser)]
#[command(name = "robustct", version, about = "Robust constant-time checker and mitigation compiler")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a library for robust constant-time against an attacker model.
    Check(CheckArgs),
    /// Compile a library with the mitigations an attacker model requires.
    Compile(CompileArgs),
    /// Measure mitigation overhead over library templates.
    Bench(BenchArgs),
    /// Generate attacker programs for a library's API.
    GenAttackers(GenArgs),
    /// Print the event trace of an application linked with a library.
    Trace(TraceArgs),
}

#[derive(Args)]
struct ModelArgs {
    /// memory-safe, read-only, memory-unsafe, speculative or parallel-read-only.
    #[arg(long, default_value = "read-only")]
    model: String,
    /// never, once:W, exhaustive:W1/W2,D or script:FILE.
    #[arg(long)]
    speculator: Option<String>,
}

#[derive(Args)]
struct CheckArgs {
    library: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 200)]
    budget: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random secret-seed pairs in addition to (0,1) and (0,2).
    #[arg(long, default_value_t = 1)]
    seed_pairs: usize,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct CompileArgs {
    library: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    /// Output file for the compiled library; stdout if absent.
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Also write the mitigation report here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Directory of `*.ir` library templates using `${SIZE}`.
    suite_dir: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "memory-safe,read-only,speculative,parallel-read-only")]
    models: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "1,128,256,512,1024,2048,4096")]
    sizes: Vec<usize>,
    /// Directory for `bench.json` and `bench.txt`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct GenArgs {
    /// Library or API declaration file.
    library: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 10)]
    budget: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TraceArgs {
    library: PathBuf,
    app: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    speculator: Option<String>,
    /// Observe library writes to unprotected memory, up to this many.
    #[arg(long)]
    parallel_observer: Option<usize>,
    #[arg(long)]
    json: bool,
}

type CmdResult = Result<u8, String>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Check(a) => cmd_check(a),
        Command::Compile(a) => cmd_compile(a),
        Command::Bench(a) => cmd_bench(a),
        Command::GenAttackers(a) => cmd_gen_attackers(a),
        Command::Trace(a) => cmd_trace(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn read(path: &Path, inputs: &mut Vec<InputFile>) -> Result<String, String> {
    let bytes = fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    inputs.push(InputFile::new(path, &bytes));
    String::from_utf8(bytes).map_err(|e| format!("{}: {e}", path.display()))
}

fn load_library(path: &Path, inputs: &mut Vec<InputFile>) -> Result<LibrarySource, String> {
    let text = read(path, inputs)?;
    parse_library(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn parse_speculator(spec: &str, inputs: &mut Vec<InputFile>) -> Result<SpeculatorModel, String> {
    let bad = || format!("invalid speculator `{spec}`");
    let (kind, arg) = spec.split_once(':').unwrap_or((spec, ""));
    match kind {
        "never" => Ok(SpeculatorModel::NeverSpeculate),
        "once" => Ok(SpeculatorModel::AlwaysMispredictOnce { window: arg.parse().map_err(|_| bad())? }),
        "exhaustive" => {
            let (windows, depth) = arg.split_once(',').unwrap_or((arg, "1"));
            let windows = windows
                .split('/')
                .map(|w| w.parse::<u32>().map_err(|_| bad()))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(SpeculatorModel::exhaustive(windows, depth.parse().map_err(|_| bad())?))
        }
        "script" => {
            let text = read(Path::new(arg), inputs)?;
            let entries: Vec<ScriptEntry> =
                serde_json::from_str(&text).map_err(|e| format!("{arg}: {e}"))?;
            Ok(SpeculatorModel::Scripted(entries))
        }
        _ => Err(bad()),
    }
}

fn resolve_model(args: &ModelArgs, inputs: &mut Vec<InputFile>) -> Result<AttackerModel, String> {
    let mut model: AttackerModel = args.model.parse().map_err(|e| format!("{e}"))?;
    if let Some(spec) = &args.speculator {
        let sm = parse_speculator(spec, inputs)?;
        match &mut model {
            AttackerModel::Speculative(m) => *m = sm,
            _ => return Err("--speculator requires --model speculative".into()),
        }
    }
    Ok(model)
}

fn to_json<T: serde::Serialize>(v: &T) -> Json {
    serde_json::to_value(v).expect("serializable")
}

fn print_json(v: &Json) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn model_manifest(m: &mut RunManifest, model: &AttackerModel) {
    m.model = Some(model.name().to_string());
    if let Some(sm) = model.speculator_model() {
        m.speculator = Some(to_json(sm));
    }
}

fn cmd_check(a: CheckArgs) -> CmdResult {
    let mut manifest = RunManifest::new("check");
    let source = load_library(&a.library, &mut manifest.inputs)?;
    let model = resolve_model(&a.model, &mut manifest.inputs)?;
    let cfg = CheckConfig {
        attacker_budget: a.budget,
        attacker_seed: a.seed,
        random_seed_pairs: a.seed_pairs,
        ..CheckConfig::default()
    };
    model_manifest(&mut manifest, &model);
    manifest.budget = Some(a.budget);
    manifest.seed = Some(a.seed);
    manifest.seed_pairs = Some(cfg.seed_pairs());

    let verdict = robust_ct_check(&source.library, &source.api, &source.secrets, &model, &cfg)
        .map_err(|e| e.to_string())?;
    if a.json {
        let mut out = to_json(&verdict);
        out["manifest"] = to_json(&manifest);
        print_json(&out);
    } else {
        let s = verdict.stats();
        match &verdict {
            Verdict::Secure { .. } => println!(
                "secure against {} ({} attackers, {} seed pairs, {} runs)",
                model, s.attackers, s.seed_pairs, s.runs
            ),
            Verdict::Violation { witness, .. } => {
                let d = &witness.divergence;
                println!(
                    "violation against {model}: seeds {:?} diverge at event {}: {} vs {}",
                    witness.seeds,
                    d.index,
                    d.lhs.as_deref().unwrap_or("<end>"),
                    d.rhs.as_deref().unwrap_or("<end>")
                );
                print!("{}", witness.attacker_src);
            }
        }
    }
    Ok(verdict.exit_code() as u8)
}

fn cmd_compile(a: CompileArgs) -> CmdResult {
    let mut manifest = RunManifest::new("compile");
    let source = load_library(&a.library, &mut manifest.inputs)?;
    let model = resolve_model(&a.model, &mut manifest.inputs)?;
    model_manifest(&mut manifest, &model);
    let compiled = match compile(&source, &model) {
        Ok(c) => c,
        Err(CompileError::NotClassicallyCT(w)) => {
            eprintln!("{}", serde_json::to_string_pretty(&w).expect("serializable"));
            return Err("library is not classically constant-time".into());
        }
        Err(e) => return Err(e.to_string()),
    };
    let text = compiled.source.to_string();
    let report = json!({ "manifest": manifest, "report": compiled.report() });
    if let Some(path) = &a.report {
        let body = serde_json::to_string_pretty(&report).expect("serializable");
        fs::write(path, body + "\n").map_err(|e| format!("{}: {e}", path.display()))?;
    }
    match &a.out {
        Some(path) => {
            fs::write(path, &text).map_err(|e| format!("{}: {e}", path.display()))?;
            print_json(&report);
        }
        None => print!("{text}"),
    }
    Ok(0)
}

fn cmd_bench(a: BenchArgs) -> CmdResult {
    let mut manifest = RunManifest::new("bench");
    let mut paths: Vec<PathBuf> = fs::read_dir(&a.suite_dir)
        .map_err(|e| format!("{}: {e}", a.suite_dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ir"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(format!("no *.ir templates in {}", a.suite_dir.display()));
    }
    let mut suites = Vec::new();
    for p in &paths {
        let text = read(p, &mut manifest.inputs)?;
        let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        suites.push(BenchSuite::new(name, text));
    }
    let models = a
        .models
        .iter()
        .map(|m| m.parse::<AttackerModel>().map_err(|e| e.to_string()))
        .collect::<Result<Vec<_>, _>>()?;
    let cost = CostModel::default();
    manifest.models = models.iter().map(|m| m.name().to_string()).collect();
    manifest.sizes = a.sizes.clone();
    manifest.cost_model = Some(to_json(&cost));

    let report = run_bench(&suites, &models, &a.sizes, &cost).map_err(|e| e.to_string())?;
    let table = report.table();
    let out = json!({ "manifest": manifest, "report": report });
    let body = serde_json::to_string_pretty(&out).expect("serializable") + "\n";
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
        fs::write(dir.join("bench.json"), &body).map_err(|e| e.to_string())?;
        fs::write(dir.join("bench.txt"), &table).map_err(|e| e.to_string())?;
    }
    if a.json {
        print!("{body}");
    } else {
        print!("{table}");
    }
    Ok(0)
}

fn cmd_gen_attackers(a: GenArgs) -> CmdResult {
    let mut manifest = RunManifest::new("gen-attackers");
    let source = load_library(&a.library, &mut manifest.inputs)?;
    let model = resolve_model(&a.model, &mut manifest.inputs)?;
    model_manifest(&mut manifest, &model);
    manifest.budget = Some(a.budget);
    manifest.seed = Some(a.seed);
    let attackers = generate_attackers(&source.api, &source.secrets, &model, a.budget, a.seed)
        .map_err(|e| e.to_string())?;
    fs::create_dir_all(&a.out).map_err(|e| format!("{}: {e}", a.out.display()))?;
    let mut files = Vec::new();
    for (i, p) in attackers.iter().enumerate() {
        let name = format!("attacker_{i:04}.ir");
        let text = p.to_string();
        fs::write(a.out.join(&name), &text).map_err(|e| e.to_string())?;
        files.push(json!({ "file": name, "sha256": RunManifest::sha256_hex(text.as_bytes()) }));
    }
    let out = json!({ "manifest": manifest, "files": files });
    let body = serde_json::to_string_pretty(&out).expect("serializable") + "\n";
    fs::write(a.out.join("manifest.json"), &body).map_err(|e| e.to_string())?;
    print!("{body}");
    Ok(0)
}

fn cmd_trace(a: TraceArgs) -> CmdResult {
    let mut manifest = RunManifest::new("trace");
    manifest.seed = Some(a.seed);
    let inputs = &mut manifest.inputs;
    let source = load_library(&a.library, inputs)?;
    let app_text = read(&a.app, inputs)?;
    let app = parse_program(&app_text).map_err(|e| format!("{}: {e}", a.app.display()))?;
    let whole = link(&source.library, &app).map_err(|e| e.to_string())?;
    let state = initial_states(&source.secrets, &[a.seed]).remove(0);
    let config = ExecConfig { parallel_observer: a.parallel_observer, ..ExecConfig::default() };
    let trace = match &a.speculator {
        None => run(&whole, &state, config).map_err(|e| e.to_string())?.0,
        Some(spec) => {
            let model = parse_speculator(spec, inputs)?;
            manifest.speculator = Some(to_json(&model));
            let mut sps = enumerate_speculators(&model, &whole, 1 << 16).map_err(|e| e.to_string())?;
            if sps.len() != 1 {
                return Err("trace needs a speculator denoting a single configuration".into());
            }
            spec_run(&whole, &state, &sps.remove(0), config).map_err(|e| e.to_string())?.0
        }
    };
    if a.json {
        print_json(&json!({ "manifest": manifest, "trace": trace }));
    } else {
        print!("{}", trace.dump());
    }
    Ok(0)
}
