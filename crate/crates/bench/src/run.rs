use std::sync::Arc;
use std::time::Instant;

use mrbsp_core::bsp::{BspError, BspOptions};
use mrbsp_core::jobs::graph::{bfs_levels, check_tree, expected_phases, MAX_OUT_DEGREE};
use mrbsp_core::jobs::{distributed_sort, explore_graph, GraphSource, JobError, SortInput, SortOutput};
use mrbsp_core::mapreduce::{MrError, MrOptions};
use mrbsp_core::shm::ShmError;
use mrbsp_core::transport::TransportConfig;
use mrbsp_core::{block_range, AgentId, Backend, Cluster, ClusterSpec, Shape};

use crate::{summarize, BenchError, ExperimentSpec, Outcome, RunRecord, Step, SummaryRow};

/// Sort keys are drawn from this symmetric range.
const KEY_BOUND: i64 = 1_000_000_000;

/// One (backend, shape, value) point of the grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Cell {
    pub backend: Backend,
    pub shape: Shape,
    pub value: usize,
}

#[derive(Clone, Debug)]
pub struct Experiment {
    pub records: Vec<RunRecord>,
    pub summary: Vec<SummaryRow>,
}

impl Experiment {
    /// True if every cell has an Ok run or failed only by exhausting the
    /// worker cap.
    pub fn all_cells_accounted(&self) -> bool {
        self.summary.iter().all(|r| r.ok > 0 || r.fail == r.too_many_threads)
    }
}

/// Runs every cell in backend, shape, value order.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<Experiment, BenchError> {
    spec.validate()?;
    let mut records = Vec::new();
    for &backend in &spec.backends {
        for &shape in &spec.shapes {
            for &value in &spec.values {
                records.extend(run_cell(spec, Cell { backend, shape, value }));
            }
        }
    }
    let summary = summarize(&records);
    Ok(Experiment { records, summary })
}

/// One untimed warm-up run, then `spec.reps` recorded runs with seeds
/// `spec.seed + rep`.
pub fn run_cell(spec: &ExperimentSpec, cell: Cell) -> Vec<RunRecord> {
    let warm = run_once(spec, cell, 0);
    log::debug!("warm-up {} {} {}: {:?}", cell.backend, cell.shape, cell.value, warm.outcome);
    (0..spec.reps)
        .map(|rep| {
            let r = run_once(spec, cell, rep);
            log::info!(
                "{} {} {} {} rep {rep}: {:?} {:.4}s",
                spec.kind,
                cell.backend,
                cell.shape,
                cell.value,
                r.outcome,
                r.wall_s
            );
            r
        })
        .collect()
}

pub fn run_once(spec: &ExperimentSpec, cell: Cell, rep: usize) -> RunRecord {
    let seed = spec.seed.wrapping_add(rep as u64);
    let mut record = RunRecord {
        experiment: spec.kind,
        backend: cell.backend,
        shape: cell.shape.to_string(),
        transport: spec.transport.to_string(),
        value: cell.value,
        rep,
        seed,
        wall_s: 0.0,
        outcome: Outcome::Ok,
        steps: Vec::new(),
    };
    let cluster_spec = ClusterSpec::new(cell.shape.machines, cell.shape.nodes_per_machine, cell.backend)
        .with_transport(spec.transport)
        .with_workers(spec.workers_per_node)
        .with_worker_cap(spec.worker_cap);
    let transport = TransportConfig::default().with_max_chunk_bytes(spec.max_chunk_bytes);
    let cluster = match Cluster::start(cluster_spec, transport) {
        Ok(c) => c,
        Err(e) => {
            record.outcome = Outcome::Error(e.to_string());
            return record;
        }
    };
    let result = if spec.kind.is_mapreduce() {
        sort_run(&cluster, cell, seed, &mut record)
    } else {
        explore_run(&cluster, cell, seed, &mut record)
    };
    record.outcome = match result {
        Ok(()) => Outcome::Ok,
        Err(e) if too_many_threads(&e) => Outcome::TooManyThreads,
        Err(e) => Outcome::Error(e.to_string()),
    };
    record
}

enum RunError {
    Job(JobError),
    Oracle(String),
}

impl std::fmt::Display for RunError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunError::Job(e) => write!(f, "{e}"),
            RunError::Oracle(m) => write!(f, "oracle: {m}"),
        }
    }
}

fn too_many_threads(e: &RunError) -> bool {
    matches!(
        e,
        RunError::Job(
            JobError::Bsp(BspError::TooManyThreads { .. })
                | JobError::Bsp(BspError::Shm(ShmError::TooManyThreads { .. }))
                | JobError::Mr(MrError::Shm(ShmError::TooManyThreads { .. }))
                | JobError::Shm(ShmError::TooManyThreads { .. })
        )
    )
}

fn sort_run(cluster: &Cluster, cell: Cell, seed: u64, record: &mut RunRecord) -> Result<(), RunError> {
    let input = SortInput::Random {
        len: cell.value,
        seed,
        lo: -KEY_BOUND,
        hi: KEY_BOUND,
    };
    let values = input.to_vec();
    let input = SortInput::explicit(values.clone());

    let t = Instant::now();
    let out = distributed_sort(&input, cluster, cell.backend, &MrOptions::default()).map_err(RunError::Job);
    record.wall_s = t.elapsed().as_secs_f64();
    let out = out?;

    record.steps = sort_steps(&out);
    check_sort(values, &out).map_err(RunError::Oracle)
}

/// Range computation, then each MR step at its slowest node.
fn sort_steps(out: &SortOutput) -> Vec<Step> {
    let slowest = |f: fn(&mrbsp_core::mapreduce::StepTiming) -> f64| out.mr.timings.iter().map(f).fold(0.0, f64::max);
    vec![
        Step {
            name: "range".into(),
            seconds: out.range_time.as_secs_f64(),
        },
        Step {
            name: "init".into(),
            seconds: slowest(|t| t.init_s),
        },
        Step {
            name: "map".into(),
            seconds: slowest(|t| t.map_s),
        },
        Step {
            name: "shuffle".into(),
            seconds: slowest(|t| t.shuffle_s),
        },
        Step {
            name: "reduce".into(),
            seconds: slowest(|t| t.reduce_s),
        },
        Step {
            name: "sink".into(),
            seconds: slowest(|t| t.sink_s),
        },
    ]
}

/// Sequential sort plus the block sizes every node must end up with.
pub(crate) fn check_sort(mut values: Vec<i64>, out: &SortOutput) -> Result<(), String> {
    let n = out.per_node().len();
    values.sort_unstable();
    if out.values() != values {
        return Err("output differs from the sequential sort".into());
    }
    for (p, part) in out.per_node().iter().enumerate() {
        let want = block_range(values.len(), n, p).len();
        if part.len() != want {
            return Err(format!("node {p} holds {} elements, expected {want}", part.len()));
        }
    }
    Ok(())
}

fn explore_run(cluster: &Cluster, cell: Cell, seed: u64, record: &mut RunRecord) -> Result<(), RunError> {
    let per = cell.value;
    let edges = GraphSource::random(seed, cluster.n_nodes(), per).edge_list();
    let graph = GraphSource::Explicit {
        agents_per_node: per,
        edges: Arc::new(edges),
    };
    let GraphSource::Explicit { edges, .. } = &graph else {
        unreachable!()
    };
    let start = start_vertex(edges, per);

    let t = Instant::now();
    let out = explore_graph(&graph, start, cluster, cell.backend, &BspOptions::default()).map_err(RunError::Job);
    record.wall_s = t.elapsed().as_secs_f64();
    let out = out?;

    record.steps = out
        .reports
        .iter()
        .map(|r| Step {
            name: format!("phase {}", r.phase),
            seconds: r.duration_s,
        })
        .collect();
    let levels = bfs_levels(edges, start, per);
    check_tree(&out.parents, edges, &levels, start, per).map_err(RunError::Oracle)?;
    let want = expected_phases(edges, &levels);
    if out.phases() != want {
        return Err(RunError::Oracle(format!("{} phases, expected {want}", out.phases())));
    }
    Ok(())
}

/// First vertex with the maximum out-degree, so the exploration does not
/// stop right away; vertex 0 if there is none.
pub fn start_vertex(edges: &[Vec<AgentId>], per_node: usize) -> AgentId {
    let g = edges.iter().position(|e| e.len() == MAX_OUT_DEGREE).unwrap_or(0);
    AgentId::new(g / per_node, g % per_node)
}
