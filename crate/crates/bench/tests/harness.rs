use std::process::Command;

use mrbsp_bench::{
    run_experiment, summarize, write_csv, ExperimentKind, ExperimentSpec, Outcome, RunRecord, CSV_COLUMNS,
};
use mrbsp_core::{Backend, Shape};
use proptest::prelude::*;

fn record(backend: Backend, value: usize, wall_s: f64, outcome: Outcome) -> RunRecord {
    RunRecord {
        experiment: ExperimentKind::BspAgentSweep,
        backend,
        shape: "2x4".into(),
        transport: "inproc".into(),
        value,
        rep: 0,
        seed: 0,
        wall_s,
        outcome,
        steps: vec![],
    }
}

fn csv_of(records: &[RunRecord]) -> String {
    let mut buf = Vec::new();
    write_csv(&summarize(records), &mut buf).unwrap();
    String::from_utf8(buf).unwrap()
}

#[test]
fn equal_times_have_zero_deviation() {
    let rs: Vec<_> = (0..10).map(|_| record(Backend::Actor, 500, 1.5, Outcome::Ok)).collect();
    let row = &summarize(&rs)[0];
    assert_eq!(row.mean_s, Some(1.5));
    assert_eq!(row.stddev_s, Some(0.0));
    assert_eq!((row.ok, row.fail), (10, 0));
}

#[test]
fn mean_covers_only_ok_runs() {
    let mut rs = vec![
        record(Backend::SharedMemoryParallel, 8000, 1.0, Outcome::Ok),
        record(Backend::SharedMemoryParallel, 8000, 3.0, Outcome::Ok),
    ];
    rs.extend((0..8).map(|_| record(Backend::SharedMemoryParallel, 8000, 9.0, Outcome::TooManyThreads)));
    let row = &summarize(&rs)[0];
    assert_eq!(row.mean_s, Some(2.0));
    // Sample deviation of {1, 3}.
    assert!((row.stddev_s.unwrap() - 2f64.sqrt()).abs() < 1e-12);
    assert_eq!((row.ok, row.fail, row.too_many_threads), (2, 8, 8));
}

#[test]
fn cell_without_ok_runs_is_na() {
    let rs: Vec<_> = (0..3).map(|_| record(Backend::SharedMemoryParallel, 16000, 0.1, Outcome::TooManyThreads)).collect();
    let text = csv_of(&rs);
    assert_eq!(text.lines().nth(1).unwrap(), "bsp-agent-sweep,smp,2x4,16000,N/A,N/A,0,3");
}

#[test]
fn rows_follow_first_appearance() {
    let rs = vec![
        record(Backend::Actor, 1000, 1.0, Outcome::Ok),
        record(Backend::Actor, 500, 1.0, Outcome::Ok),
        record(Backend::Actor, 1000, 1.0, Outcome::Error("x".into())),
    ];
    let text = csv_of(&rs);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], CSV_COLUMNS.join(","));
    assert!(lines[1].starts_with("bsp-agent-sweep,a,2x4,1000,1.000000,0.000000,1,1"));
    assert!(lines[2].starts_with("bsp-agent-sweep,a,2x4,500,"));
}

#[test]
fn spec_validation() {
    let mut spec = ExperimentSpec::new(ExperimentKind::MrArraySweep);
    assert!(spec.validate().is_ok());
    spec.values = vec![10, 10];
    assert!(spec.validate().is_err());
    spec.values = vec![10];
    spec.reps = 0;
    assert!(spec.validate().is_err());
    spec.reps = 1;
    spec.backends.clear();
    assert!(run_experiment(&spec).is_err());
}

fn small(kind: ExperimentKind, values: Vec<usize>) -> ExperimentSpec {
    let mut spec = ExperimentSpec::new(kind);
    spec.values = values;
    spec.reps = 2;
    spec.shapes = vec!["1x2".parse().unwrap(), "2x2".parse().unwrap()];
    spec.workers_per_node = 2;
    spec
}

#[test]
fn sort_sweep_runs_every_cell() {
    let exp = run_experiment(&small(ExperimentKind::MrArraySweep, vec![100, 1000])).unwrap();
    assert_eq!(exp.records.len(), 3 * 2 * 2 * 2);
    assert_eq!(exp.summary.len(), 3 * 2 * 2);
    assert!(exp.records.iter().all(|r| r.outcome == Outcome::Ok));
    assert!(exp.all_cells_accounted());
    // Seeds are base + rep.
    assert_eq!(exp.records[1].seed, 43);
    for r in &exp.records {
        assert_eq!(r.steps.len(), 6);
        assert!(r.steps_total() <= r.wall_s, "{r:?}");
    }
}

#[test]
fn exploration_sweep_runs_every_cell() {
    let mut spec = small(ExperimentKind::BspClusterSweep, vec![50]);
    spec.shapes = vec![Shape {
        machines: 1,
        nodes_per_machine: 3,
    }];
    let exp = run_experiment(&spec).unwrap();
    assert!(exp.records.iter().all(|r| r.outcome == Outcome::Ok));
    for r in &exp.records {
        assert!(!r.steps.is_empty());
        assert!(r.steps_total() <= r.wall_s, "{r:?}");
    }
}

#[test]
fn same_seed_gives_same_outcomes() {
    let spec = small(ExperimentKind::BspAgentSweep, vec![40]);
    let a = run_experiment(&spec).unwrap();
    let b = run_experiment(&spec).unwrap();
    let key = |e: &mrbsp_bench::Experiment| -> Vec<_> {
        e.records.iter().map(|r| (r.backend, r.seed, r.outcome.clone(), r.steps.len())).collect()
    };
    assert_eq!(key(&a), key(&b));
}

#[test]
fn cli_writes_csv_and_records() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out.csv");
    let records = dir.path().join("runs.jsonl");
    let cfg = dir.path().join("cluster.conf");
    std::fs::write(&cfg, "# test cluster\nworkers_per_node = 2\nbackend = sms\nmax_chunk_bytes = 4096\n").unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_bench"))
        .args(["mr-cluster-sweep", "--shapes", "1x1,1x2", "--values", "300", "--reps", "2", "--seed", "7"])
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .arg("--records")
        .arg(&records)
        .status()
        .unwrap();
    assert!(status.success());
    let text = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "experiment,backend,shape,value,mean_s,stddev_s,ok,fail");
    // The config picks the backend when --backends is absent.
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("mr-cluster-sweep,sms,1x1,300,"));
    assert!(lines[2].starts_with("mr-cluster-sweep,sms,1x2,300,"));
    let runs: Vec<RunRecord> = std::fs::read_to_string(&records)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(runs.len(), 4);
    assert_eq!(runs[3].seed, 8);
}

#[test]
fn cli_rejects_bad_input() {
    let bin = env!("CARGO_BIN_EXE_bench");
    let run = |args: &[&str]| Command::new(bin).args(args).output().unwrap();
    assert!(!run(&["no-such-sweep"]).status.success());
    assert!(!run(&["mr-array-sweep", "--backends", "zz"]).status.success());
    let o = run(&["mr-array-sweep", "--values", "10,5", "--reps", "1"]);
    assert_eq!(o.status.code(), Some(2));
}

proptest! {
    #[test]
    fn summary_counts_every_record(outcomes in prop::collection::vec((0u8..3, 0.0f64..5.0, 0usize..3), 1..40)) {
        let rs: Vec<_> = outcomes
            .iter()
            .map(|&(o, t, v)| {
                let outcome = match o {
                    0 => Outcome::Ok,
                    1 => Outcome::TooManyThreads,
                    _ => Outcome::Error("e".into()),
                };
                record(Backend::Actor, v, t, outcome)
            })
            .collect();
        let rows = summarize(&rs);
        prop_assert_eq!(rows.iter().map(|r| r.ok + r.fail).sum::<usize>(), rs.len());
        for row in &rows {
            prop_assert_eq!(row.mean_s.is_some(), row.ok > 0);
            if let (Some(m), Some(sd)) = (row.mean_s, row.stddev_s) {
                prop_assert!(sd >= 0.0);
                prop_assert!((0.0..5.0).contains(&m));
            }
        }
    }
}
