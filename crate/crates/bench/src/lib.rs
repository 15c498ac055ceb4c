//! Benchmark harness: sweeps the distributed sort and the graph
//! exploration over backends, cluster shapes and problem sizes, checks
//! every run against a sequential oracle and summarizes timings as CSV.

mod run;
mod summary;

use std::fmt;
use std::str::FromStr;

use clap::ValueEnum;
use mrbsp_core::{Backend, ClusterError, ConfigError, Shape, TransportKind};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use run::{run_cell, run_experiment, run_once, start_vertex, Cell, Experiment};
pub use summary::{summarize, write_csv, SummaryRow, CSV_COLUMNS};

/// What a sweep varies and which job it runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    /// Distributed sort, sweeping the array size.
    MrArraySweep,
    /// Distributed sort, sweeping the cluster shape.
    MrClusterSweep,
    /// Graph exploration, sweeping agents per node.
    BspAgentSweep,
    /// Graph exploration, sweeping the cluster shape.
    BspClusterSweep,
}

impl ExperimentKind {
    pub fn id(self) -> &'static str {
        match self {
            ExperimentKind::MrArraySweep => "mr-array-sweep",
            ExperimentKind::MrClusterSweep => "mr-cluster-sweep",
            ExperimentKind::BspAgentSweep => "bsp-agent-sweep",
            ExperimentKind::BspClusterSweep => "bsp-cluster-sweep",
        }
    }

    pub fn is_mapreduce(self) -> bool {
        matches!(self, ExperimentKind::MrArraySweep | ExperimentKind::MrClusterSweep)
    }

    /// Sweep values used when none are given: array sizes for the sort,
    /// agents per node for the exploration.
    pub fn default_values(self) -> Vec<usize> {
        match self {
            ExperimentKind::MrArraySweep => vec![1_000, 10_000, 100_000, 1_000_000],
            ExperimentKind::MrClusterSweep => vec![100_000],
            ExperimentKind::BspAgentSweep => vec![500, 1_000, 2_000, 4_000, 8_000, 16_000],
            ExperimentKind::BspClusterSweep => vec![2_000],
        }
    }

    pub fn default_shapes(self) -> Vec<Shape> {
        let s = |m, n| Shape {
            machines: m,
            nodes_per_machine: n,
        };
        match self {
            ExperimentKind::MrArraySweep => vec![s(2, 3)],
            ExperimentKind::BspAgentSweep => vec![s(2, 4)],
            ExperimentKind::MrClusterSweep | ExperimentKind::BspClusterSweep => {
                vec![s(1, 1), s(1, 2), s(2, 2), s(2, 4)]
            }
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for ExperimentKind {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        <ExperimentKind as ValueEnum>::from_str(s, true).map_err(|_| BenchError::Spec(format!("unknown experiment {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    pub backends: Vec<Backend>,
    /// Strictly increasing.
    pub values: Vec<usize>,
    pub reps: usize,
    pub seed: u64,
    pub shapes: Vec<Shape>,
    pub transport: TransportKind,
    pub workers_per_node: usize,
    pub worker_cap: usize,
    pub max_chunk_bytes: usize,
}

impl ExperimentSpec {
    /// Every backend, the kind's default values and shapes, 10 reps.
    pub fn new(kind: ExperimentKind) -> Self {
        let defaults = mrbsp_core::ClusterConfig::default();
        ExperimentSpec {
            kind,
            backends: Backend::ALL.to_vec(),
            values: kind.default_values(),
            reps: 10,
            seed: 42,
            shapes: kind.default_shapes(),
            transport: TransportKind::InProcess,
            workers_per_node: defaults.cluster.workers_per_node,
            worker_cap: defaults.cluster.worker_cap,
            max_chunk_bytes: defaults.transport.max_chunk_bytes,
        }
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: &str| Err(BenchError::Spec(m.into()));
        if self.backends.is_empty() {
            return bad("no backends");
        }
        if self.shapes.is_empty() {
            return bad("no cluster shapes");
        }
        if self.values.is_empty() || self.values.contains(&0) {
            return bad("sweep values must be positive and non-empty");
        }
        if self.values.windows(2).any(|w| w[0] >= w[1]) {
            return bad("sweep values must be strictly increasing");
        }
        if self.reps == 0 {
            return bad("reps must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    /// Finished and passed the oracle.
    Ok,
    TooManyThreads,
    Error(String),
}

impl Outcome {
    pub fn is_ok(&self) -> bool {
        matches!(self, Outcome::Ok)
    }
}

/// Named duration inside one run: an MR step (slowest node) or a BSP phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub name: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub experiment: ExperimentKind,
    pub backend: Backend,
    pub shape: String,
    /// `inproc` or `tcp`: how the shape was mapped onto this host.
    pub transport: String,
    pub value: usize,
    pub rep: usize,
    pub seed: u64,
    pub wall_s: f64,
    pub outcome: Outcome,
    pub steps: Vec<Step>,
}

impl RunRecord {
    pub fn steps_total(&self) -> f64 {
        self.steps.iter().map(|s| s.seconds).sum()
    }
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid experiment: {0}")]
    Spec(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
