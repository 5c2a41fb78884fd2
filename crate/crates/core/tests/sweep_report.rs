use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use covi::harness::{baseline_costs, roi_ratios, SweepConfig};
use covi::trace::{topk_accuracy, PredictionTrace, TraceManifest};
use covi::{run_sweep, DomainSet, SweepResult, TraceSet};

fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/sweep")
}

/// Ten hand-written samples over 4 classes; partition 1 = {0,1}, 2 = {2,3}.
fn hand_traces() -> TraceSet {
    let labels = vec![0, 1, 2, 3, 0, 2, 1, 3, 2, 0];
    #[rustfmt::skip]
    let edge: Vec<f32> = vec![
        5.0, 0.0, 0.0, 0.0,  // confident, right
        0.0, 1.0, 0.9, 0.0,  // unsure, right, top-2 spans both partitions
        0.0, 0.0, 0.2, 0.0,  // unsure, right
        0.0, 0.0, 4.0, 0.0,  // confident, wrong
        0.3, 0.5, 0.0, 0.0,  // unsure, wrong, top-2 in partition 1
        0.0, 0.0, 1.5, 1.2,  // unsure, right
        0.0, 3.0, 0.0, 0.0,  // confident, right
        1.0, 0.0, 0.0, 1.1,  // unsure, right
        0.0, 0.0, 0.0, 2.2,  // fairly confident, wrong
        0.5, 0.0, 0.0, 0.0,  // unsure, right
    ];
    let oracle = |bias: usize| -> Vec<f32> {
        let mut l = vec![0.0f32; 40];
        for (i, &y) in labels.iter().enumerate() {
            // expert always right except on sample `bias`
            let c = if i == bias { (y as usize + 1) % 4 } else { y as usize };
            l[i * 4 + c] = 6.0;
        }
        l
    };
    let mk = |name: &str, l: Vec<f32>| PredictionTrace::new(name, 4, l, labels.clone()).unwrap();
    let mut experts = BTreeMap::new();
    experts.insert(DomainSet::new(vec![1]).unwrap(), mk("e1", oracle(4)));
    experts.insert(DomainSet::new(vec![2]).unwrap(), mk("e2", oracle(5)));
    experts.insert(DomainSet::new(vec![1, 2]).unwrap(), mk("e12", oracle(99)));
    TraceSet::new(mk("edge", edge), experts, Some(mk("big", oracle(2)))).unwrap()
}

fn prepared(dir: &Path) -> SweepConfig {
    for f in ["partitions.json", "profiles.json", "sweep.json"] {
        fs::copy(fixture_dir().join(f), dir.join(f)).unwrap();
    }
    TraceManifest::write_trace_set(&dir.join("traces"), &hand_traces()).unwrap();
    SweepConfig::load(dir.join("sweep.json")).unwrap()
}

#[test]
fn golden_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = prepared(dir.path());
    let csv = run_sweep(&cfg).unwrap().to_csv();
    let golden = fixture_dir().join("golden.csv");
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        fs::write(&golden, &csv).unwrap();
    }
    assert_eq!(csv, fs::read_to_string(golden).unwrap());
}

#[test]
fn rows_follow_contract() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = prepared(dir.path());
    let res = run_sweep(&cfg).unwrap();
    let taus: Vec<f64> = res.rows.iter().map(|r| r.tau).collect();
    assert_eq!(taus, [0.9, 0.7, 0.5, 0.0]);

    // tau = 0 is the Edge-Only baseline
    let last = res.rows.last().unwrap();
    assert_eq!(last.alpha, 0.0);
    assert_eq!(Some(last.accuracy), res.edge_only.accuracy);
    assert_eq!(last.cost, res.edge_only.cost);
    assert_eq!(res.edge_only.norm_latency, Some(1.0));
    assert_eq!(res.edge_only.norm_energy, Some(1.0));
    assert_eq!(last.acc_to_latency, None);

    let ts = hand_traces();
    assert_eq!(res.edge_only.accuracy, Some(topk_accuracy(&ts.edge, 1).unwrap()));
    assert_eq!(res.near_edge_only.accuracy, Some(0.9));
    // near-edge-only per batch: comm(B) + latency_at(B); batches of 4, 4, 2
    let per_batch = [2.0 + 0.5 * 4.0 + 12.0, 2.0 + 0.5 * 4.0 + 12.0, 2.0 + 0.5 * 2.0 + 6.0];
    let mean = per_batch.iter().sum::<f64>() / 3.0;
    assert!((res.near_edge_only.cost.t_total - mean).abs() < 1e-12);

    for r in &res.rows {
        let sum: usize = r.histogram.values().sum();
        assert_eq!(sum, r.offload_count);
        assert!((0.0..=1.0).contains(&r.alpha) && (0.0..=1.0).contains(&r.accuracy));
        let (lat, en) = roi_ratios(
            r.accuracy,
            res.edge_only.accuracy.unwrap(),
            r.cost.t_total,
            res.edge_only.cost.t_total,
            r.cost.e_total,
            res.edge_only.cost.e_total,
        );
        assert_eq!((lat, en), (r.acc_to_latency, r.acc_to_energy));
    }
    let (e, n) = baseline_costs(&cfg, &cfg.load_inputs().unwrap()).unwrap();
    assert_eq!(e.cost, res.edge_only.cost);
    assert_eq!(n.cost, res.near_edge_only.cost);
}

#[test]
fn json_round_trips_and_runs_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = prepared(dir.path());
    let a = run_sweep(&cfg).unwrap();
    let b = run_sweep(&cfg).unwrap();
    let (ca, ja) = a.emit(&dir.path().join("a/report")).unwrap();
    let (cb, jb) = b.emit(&dir.path().join("b/report")).unwrap();
    assert_eq!(fs::read(ca).unwrap(), fs::read(cb).unwrap());
    assert_eq!(fs::read(&ja).unwrap(), fs::read(jb).unwrap());
    let back = SweepResult::from_json(&fs::read_to_string(ja).unwrap()).unwrap();
    assert_eq!(back, a.rounded());
}

#[test]
fn empty_threshold_list_gives_header_only_csv() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = prepared(dir.path());
    cfg.taus.clear();
    let csv = run_sweep(&cfg).unwrap().to_csv();
    let data: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(data, [covi::harness::CSV_COLUMNS.join(",")]);
}

#[test]
fn roi_examples() {
    assert_eq!(roi_ratios(0.8, 0.8, 20.0, 10.0, 5.0, 1.0), (Some(0.0), Some(0.0)));
    let (lat, _) = roi_ratios(0.82, 0.80, 20.0, 10.0, 5.0, 1.0);
    assert!((lat.unwrap() - 0.002).abs() < 1e-12);
    assert_eq!(roi_ratios(0.9, 0.8, 10.0, 10.0, 5.0, 6.0), (None, None));
}

#[test]
fn cost_profiles_only_change_cost_columns() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = prepared(dir.path());
    let mut other = cfg.clone();
    other.comm.rtt_ms = 40.0;
    other.aggregation_mode = covi::AggregationMode::Serial;
    let (a, b) = (run_sweep(&cfg).unwrap(), run_sweep(&other).unwrap());
    for (x, y) in a.rows.iter().zip(&b.rows) {
        assert_eq!((x.alpha, x.accuracy, &x.histogram), (y.alpha, y.accuracy, &y.histogram));
    }
}

#[test]
fn bad_threshold_is_a_validation_error() {
    let text = fs::read_to_string(fixture_dir().join("sweep.json")).unwrap().replace("0.9", "1.5");
    let err = SweepConfig::from_json(&text, fixture_dir()).unwrap_err();
    assert!(err.is_validation());
}
