//! Symbolic cost model and overhead benchmarks.
//!
//! Costs are step counts weighted per instruction category, not wall-clock
//! time. A benchmark runs each library template at several data sizes,
//! unmitigated and compiled per model, under the same benign driver.

use serde::{Deserialize, Serialize};
use statrs::statistics::{Data, Median, OrderStatistics};
use thiserror::Error;

use crate::attackers::AttackerModel;
use crate::checker::{benign_driver, CheckError};
use crate::compiler::{compile, CompileError};
use crate::corpus::instantiate;
use crate::ir::{link, parse_library, LibrarySource, ParseError, Program, ValueKind};
use crate::semantics::{initial_states_with_layout, Machine, MemoryLayout, Profile};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostModel {
    pub instruction: u64,
    /// Each protection-key toggle.
    pub domain_switch: u64,
    pub memzero_cell: u64,
    pub fence: u64,
    pub copy_cell: u64,
    pub clear_registers: u64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            instruction: 1,
            domain_switch: 50,
            memzero_cell: 1,
            fence: 20,
            copy_cell: 1,
            clear_registers: 1,
        }
    }
}

impl CostModel {
    pub fn cost(&self, p: &Profile) -> u64 {
        let special = p.pkru + p.fences + p.clearregs + p.copy_cells;
        self.instruction * p.instructions.saturating_sub(special)
            + self.domain_switch * p.pkru
            + self.fence * p.fences
            + self.clear_registers * p.clearregs
            + self.memzero_cell * p.memzero_cells
            + self.copy_cell * p.copy_cells
    }
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("benchmark suite is empty")]
    EmptySuite,
    #[error("no data sizes given")]
    NoSizes,
    #[error("suite `{name}` at size {size}: {source}")]
    Parse { name: String, size: usize, source: ParseError },
    #[error("suite `{name}`: {source}")]
    Compile { name: String, source: CompileError },
    #[error(transparent)]
    Check(#[from] CheckError),
}

impl From<crate::ir::LinkError> for BenchError {
    fn from(e: crate::ir::LinkError) -> Self {
        BenchError::Check(e.into())
    }
}

impl From<crate::semantics::SemanticsError> for BenchError {
    fn from(e: crate::semantics::SemanticsError) -> Self {
        BenchError::Check(e.into())
    }
}

/// A library template with `${SIZE}` placeholders.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchSuite {
    pub name: String,
    pub template: String,
}

impl BenchSuite {
    pub fn new(name: impl Into<String>, template: impl Into<String>) -> Self {
        BenchSuite { name: name.into(), template: template.into() }
    }

    pub fn stream() -> Self {
        BenchSuite::new("stream", crate::corpus::STREAM_TEMPLATE)
    }

    pub fn instantiate(&self, size: usize) -> Result<LibrarySource, BenchError> {
        parse_library(&instantiate(&self.template, size)).map_err(|source| BenchError::Parse {
            name: self.name.clone(),
            size,
            source,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub suite: String,
    pub model: String,
    pub size: usize,
    pub baseline: u64,
    pub mitigated: u64,
    pub overhead_cost: i64,
    pub overhead_pct: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeSummary {
    pub size: usize,
    pub median_overhead_pct: f64,
    pub iqr_pct: f64,
    pub baseline_median: f64,
    pub overhead_cost_median: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub model: String,
    pub sizes: Vec<SizeSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub cost_model: CostModel,
    pub rows: Vec<BenchRow>,
    pub summary: Vec<ModelSummary>,
}

/// Memory large enough for the driver's buffers plus the library's frames
/// and copy buffers at this size.
fn layout_for(source: &LibrarySource, driver: &Program) -> MemoryLayout {
    let driver_cells: usize = driver.functions.values().flat_map(|f| &f.buffers).map(|b| b.len).sum();
    let param_cells: usize = source
        .api
        .values()
        .flat_map(|s| &s.params)
        .map(|p| match p.kind {
            ValueKind::Buf(n) => n,
            ValueKind::Val => 0,
        })
        .sum();
    let lib_cells: usize = source.library.functions().flat_map(|f| &f.buffers).map(|b| b.len).sum();
    let default = MemoryLayout::default();
    MemoryLayout {
        unprotected: default.unprotected.max(driver_cells + lib_cells + 1024),
        protected: default
            .protected
            .max(source.secrets.total_cells() + lib_cells + param_cells + 1024),
    }
}

/// Cost of running `driver` against `source` from the all-zero secret
/// state.
pub fn measure(
    source: &LibrarySource,
    driver: &Program,
    layout: MemoryLayout,
    cost: &CostModel,
) -> Result<u64, BenchError> {
    let whole = link(&source.library, driver)?;
    let state = initial_states_with_layout(&source.secrets, &[0], layout).remove(0);
    let (_, _, profile) = Machine::new(&whole, state)?.run_profiled()?;
    Ok(cost.cost(&profile))
}

fn summarize(rows: &[BenchRow], model: &str, size: usize) -> SizeSummary {
    let pick = |f: fn(&BenchRow) -> f64| -> Vec<f64> {
        rows.iter().filter(|r| r.model == model && r.size == size).map(f).collect()
    };
    let pct = Data::new(pick(|r| r.overhead_pct));
    let mut quartiles = pct.clone();
    SizeSummary {
        size,
        median_overhead_pct: pct.median(),
        iqr_pct: quartiles.interquartile_range(),
        baseline_median: Data::new(pick(|r| r.baseline as f64)).median(),
        overhead_cost_median: Data::new(pick(|r| r.overhead_cost as f64)).median(),
    }
}

/// Measure every suite at every size, unmitigated and compiled per model.
pub fn run_bench(
    suites: &[BenchSuite],
    models: &[AttackerModel],
    sizes: &[usize],
    cost: &CostModel,
) -> Result<BenchReport, BenchError> {
    if suites.is_empty() {
        return Err(BenchError::EmptySuite);
    }
    if sizes.is_empty() {
        return Err(BenchError::NoSizes);
    }
    let mut rows = Vec::new();
    for suite in suites {
        for &size in sizes {
            let source = suite.instantiate(size)?;
            let driver = benign_driver(&source.api);
            let layout = layout_for(&source, &driver);
            let baseline = measure(&source, &driver, layout, cost)?;
            for model in models {
                let compiled = compile(&source, model)
                    .map_err(|source| BenchError::Compile { name: suite.name.clone(), source })?;
                let mitigated = measure(&compiled.source, &driver, layout, cost)?;
                let overhead_cost = mitigated as i64 - baseline as i64;
                rows.push(BenchRow {
                    suite: suite.name.clone(),
                    model: model.name().to_string(),
                    size,
                    baseline,
                    mitigated,
                    overhead_cost,
                    overhead_pct: 100.0 * overhead_cost as f64 / baseline.max(1) as f64,
                });
            }
        }
    }
    let summary = models
        .iter()
        .map(|m| ModelSummary {
            model: m.name().to_string(),
            sizes: sizes.iter().map(|&s| summarize(&rows, m.name(), s)).collect(),
        })
        .collect();
    Ok(BenchReport { cost_model: cost.clone(), rows, summary })
}

impl BenchReport {
    pub fn summary_for(&self, model: &str) -> Option<&ModelSummary> {
        self.summary.iter().find(|s| s.model == model)
    }

    /// Aligned text tables, one per model.
    pub fn table(&self) -> String {
        let header = ["Data size", "Median overhead", "IQR", "Baseline median cost", "Median overhead cost"];
        let mut out = String::new();
        for m in &self.summary {
            let body: Vec<[String; 5]> = m
                .sizes
                .iter()
                .map(|s| {
                    [
                        s.size.to_string(),
                        format!("{:.2}%", s.median_overhead_pct),
                        format!("{:.2}%", s.iqr_pct),
                        format!("{:.1}", s.baseline_median),
                        format!("{:.1}", s.overhead_cost_median),
                    ]
                })
                .collect();
            let widths: Vec<usize> = (0..5)
                .map(|c| body.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap_or(0))
                .collect();
            let line = |cells: [&str; 5]| {
                let parts: Vec<String> =
                    cells.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
                parts.join(" | ").trim_end().to_string()
            };
            out.push_str(&format!("model: {}\n", m.model));
            out.push_str(&line(header));
            out.push('\n');
            out.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-|-"));
            out.push('\n');
            for r in &body {
                out.push_str(&line([&r[0], &r[1], &r[2], &r[3], &r[4]]));
                out.push('\n');
            }
            out.push('\n');
        }
        out
    }
}
