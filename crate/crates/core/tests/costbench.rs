use proptest::prelude::*;
use robustct::attackers::AttackerModel;
use robustct::costbench::{run_bench, BenchError, BenchSuite, CostModel};

const SIZES: [usize; 5] = [1, 64, 256, 1024, 4096];

fn medians(model: &AttackerModel, cost: &CostModel) -> Vec<f64> {
    let r = run_bench(&[BenchSuite::stream()], std::slice::from_ref(model), &SIZES, cost).unwrap();
    r.summary_for(model.name()).unwrap().sizes.iter().map(|s| s.median_overhead_pct).collect()
}

#[test]
fn read_only_overhead_shrinks_as_data_grows() {
    let m = medians(&AttackerModel::ReadOnly, &CostModel::default());
    assert!(m.windows(2).all(|w| w[1] < w[0]), "{m:?}");
    assert!(m[0] > 50.0 && *m.last().unwrap() < 5.0, "{m:?}");
}

#[test]
fn read_only_overhead_cost_is_constant() {
    let r = run_bench(&[BenchSuite::stream()], &[AttackerModel::ReadOnly], &SIZES, &CostModel::default()).unwrap();
    let costs: Vec<i64> = r.rows.iter().map(|row| row.overhead_cost).collect();
    assert!(costs.iter().all(|c| *c == costs[0] && *c > 0), "{costs:?}");
}

#[test]
fn parallel_overhead_dominates_read_only() {
    let cost = CostModel::default();
    let ro = medians(&AttackerModel::ReadOnly, &cost);
    let par = medians(&AttackerModel::parallel_default(), &cost);
    assert!(ro.iter().zip(&par).all(|(r, p)| p >= r), "{ro:?} {par:?}");
}

#[test]
fn speculative_overhead_exceeds_read_only() {
    let cost = CostModel::default();
    let ro = medians(&AttackerModel::ReadOnly, &cost);
    let sp = medians(&AttackerModel::speculative_default(), &cost);
    assert!(ro.iter().zip(&sp).all(|(r, s)| s > r), "{ro:?} {sp:?}");
}

#[test]
fn bad_templates_report_the_suite() {
    let bad = BenchSuite::new("broken", "fn lib ${SIZE");
    match run_bench(&[bad], &[AttackerModel::ReadOnly], &[4], &CostModel::default()) {
        Err(BenchError::Parse { name, size: 4, .. }) => assert_eq!(name, "broken"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn report_serializes() {
    let r = run_bench(&[BenchSuite::stream()], &[AttackerModel::ReadOnly], &[1, 2], &CostModel::default()).unwrap();
    let j = serde_json::to_string(&r).unwrap();
    assert_eq!(serde_json::from_str::<robustct::costbench::BenchReport>(&j).unwrap(), r);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn benchmarks_are_deterministic(size in 1usize..512, fence in 1u64..100) {
        let cost = CostModel { fence, ..CostModel::default() };
        let models = AttackerModel::all();
        let a = run_bench(&[BenchSuite::stream()], &models, &[size], &cost).unwrap();
        let b = run_bench(&[BenchSuite::stream()], &models, &[size], &cost).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn mitigations_never_make_runs_cheaper(size in 1usize..512) {
        let r = run_bench(&[BenchSuite::stream()], &AttackerModel::all(), &[size], &CostModel::default()).unwrap();
        prop_assert!(r.rows.iter().all(|row| row.overhead_cost >= 0));
    }
}
