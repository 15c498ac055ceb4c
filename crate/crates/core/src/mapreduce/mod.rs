//! MapReduce engine: Init → Map → Shuffle → Reduce → Sink.
//!
//! Nodes run each step in parallel with each other; within a node the mapper
//! runs sequentially over the local input and the reducer once per key group
//! (unless [`MrOptions::local_parallel`] is set). Shuffle completion is
//! detected by counts exchange: every node announces how many pairs it will
//! send to each peer, and a node is done when it has received exactly that
//! many from everyone.

mod actor;
mod shm;

use std::collections::BTreeMap;
use std::fmt::Debug;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actor::ActorError;
use crate::cluster::Cluster;
use crate::shm::ShmError;
use crate::types::{Backend, Data, KvPair, NodeId};

/// A user job: the five functions of one MapReduce round.
pub trait MapReduceJob: Send + Sync + 'static {
    type K1: Data;
    type V1: Data;
    type K2: Data + Ord + Debug;
    type V2: Data;
    type K3: Data;
    type V3: Data;
    /// What the sink leaves on each node.
    type Out: Data;

    /// Node-local input.
    fn source(&self, node: NodeId, n_nodes: usize) -> Vec<KvPair<Self::K1, Self::V1>>;

    fn map(&self, pair: KvPair<Self::K1, Self::V1>) -> Vec<KvPair<Self::K2, Self::V2>>;

    fn partition(&self, key: &Self::K2, n_nodes: usize) -> NodeId;

    fn reduce(&self, key: Self::K2, values: Vec<Self::V2>) -> KvPair<Self::K3, Self::V3>;

    /// Consumes the node's reduced pairs, in key order.
    fn sink(&self, node: NodeId, pairs: Vec<KvPair<Self::K3, Self::V3>>) -> Self::Out;

    /// When true, every node's sink output is gathered at node 0, passed
    /// through [`coordinate`](Self::coordinate) and scattered back.
    fn coordinated_sink(&self) -> bool {
        false
    }

    fn coordinate(&self, parts: Vec<Self::Out>) -> Result<Vec<Self::Out>, String> {
        Ok(parts)
    }
}

/// Drops pairs on one shuffle link after they were announced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShuffleFault {
    pub from: NodeId,
    pub to: NodeId,
    pub drop: usize,
}

#[derive(Clone, Debug)]
pub struct MrOptions {
    /// Map and reduce with several threads per node.
    pub local_parallel: bool,
    pub step_timeout: Duration,
    /// Bytes the coordinated sink may gather at node 0.
    pub sink_memory_limit: usize,
    pub fault: Option<ShuffleFault>,
}

impl Default for MrOptions {
    fn default() -> Self {
        MrOptions {
            local_parallel: false,
            step_timeout: Duration::from_secs(60),
            sink_memory_limit: 1 << 30,
            fault: None,
        }
    }
}

/// Pairs announced by and received from one peer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeerDelta {
    pub from: NodeId,
    pub announced: u64,
    pub received: u64,
}

impl PeerDelta {
    pub fn missing(&self) -> i64 {
        self.announced as i64 - self.received as i64
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MrError {
    #[error("partition sent key {key} to {node}, outside a {n_nodes}-node cluster")]
    Partition { key: String, node: NodeId, n_nodes: usize },
    #[error("shuffle barrier failed at {node}: {deltas:?}")]
    ShuffleBarrier { node: NodeId, deltas: Vec<PeerDelta> },
    #[error("sink needs {needed} bytes at the coordinator, limit is {limit}")]
    SinkMemory { needed: usize, limit: usize },
    #[error("job failed: {0}")]
    Job(String),
    #[error(transparent)]
    Actor(#[from] ActorError),
    #[error(transparent)]
    Shm(#[from] ShmError),
    #[error("{0}")]
    Protocol(String),
}

/// Errors a node reports back to the driver.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
enum Failure {
    Partition { key: String, node: NodeId, n_nodes: usize },
    SinkMemory { needed: usize, limit: usize },
    Job(String),
}

impl From<Failure> for MrError {
    fn from(f: Failure) -> Self {
        match f {
            Failure::Partition { key, node, n_nodes } => MrError::Partition { key, node, n_nodes },
            Failure::SinkMemory { needed, limit } => MrError::SinkMemory { needed, limit },
            Failure::Job(s) => MrError::Job(s),
        }
    }
}

/// Per-node step durations, in seconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepTiming {
    pub node: NodeId,
    pub init_s: f64,
    pub map_s: f64,
    pub shuffle_s: f64,
    pub reduce_s: f64,
    pub sink_s: f64,
}

impl StepTiming {
    fn new(node: NodeId) -> Self {
        StepTiming {
            node,
            ..Default::default()
        }
    }

    pub fn total_s(&self) -> f64 {
        self.init_s + self.map_s + self.shuffle_s + self.reduce_s + self.sink_s
    }
}

#[derive(Clone, Debug)]
pub struct MrOutput<O> {
    /// Sink output of each node, in node order.
    pub per_node: Vec<O>,
    pub timings: Vec<StepTiming>,
    /// Stage2 pairs produced by all mappers.
    pub emitted: u64,
    /// Stage2 pairs handed to all reducers.
    pub received: u64,
    pub wall: Duration,
}

impl<O> MrOutput<O> {
    /// One JSON object per node and line.
    pub fn timing_lines(&self) -> String {
        self.timings
            .iter()
            .map(|t| serde_json::to_string(t).expect("timing serializes") + "\n")
            .collect()
    }
}

/// Runs `job` once on `cluster` with the given backend.
pub fn run_mapreduce<J: MapReduceJob>(
    job: J,
    cluster: &Cluster,
    backend: Backend,
    opts: &MrOptions,
) -> Result<MrOutput<J::Out>, MrError> {
    let start = Instant::now();
    let mut out = match backend {
        Backend::Actor => actor::run(job, cluster, opts)?,
        Backend::SharedMemoryParallel | Backend::SharedMemorySequential => shm::run(job, cluster, opts)?,
    };
    out.wall = start.elapsed();
    Ok(out)
}

type Bucket<J> = Vec<KvPair<<J as MapReduceJob>::K2, <J as MapReduceJob>::V2>>;

/// Node-local Init and Map: pairs bucketed by destination node.
struct Mapped<J: MapReduceJob> {
    buckets: Vec<Bucket<J>>,
    emitted: u64,
}

fn init_and_map<J: MapReduceJob>(
    job: &J,
    node: NodeId,
    n: usize,
    parallel: usize,
    timing: &mut StepTiming,
) -> Result<Mapped<J>, Failure> {
    let t = Instant::now();
    let input = job.source(node, n);
    timing.init_s = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let map_chunk = |chunk: Vec<KvPair<J::K1, J::V1>>| -> Result<Vec<Bucket<J>>, Failure> {
        let mut buckets: Vec<Bucket<J>> = (0..n).map(|_| Vec::new()).collect();
        for pair in chunk {
            for kv in job.map(pair) {
                let dst = job.partition(&kv.key, n);
                if dst.index() >= n {
                    return Err(Failure::Partition {
                        key: format!("{:?}", kv.key),
                        node: dst,
                        n_nodes: n,
                    });
                }
                buckets[dst.index()].push(kv);
            }
        }
        Ok(buckets)
    };
    let buckets = if parallel > 1 && input.len() > parallel {
        let per = input.len().div_ceil(parallel);
        let mut chunks = Vec::new();
        let mut rest = input;
        while !rest.is_empty() {
            let tail = rest.split_off(per.min(rest.len()));
            chunks.push(std::mem::replace(&mut rest, tail));
        }
        let parts: Vec<Result<Vec<Bucket<J>>, Failure>> = std::thread::scope(|s| {
            let handles: Vec<_> = chunks
                .into_iter()
                .map(|c| s.spawn(move || map_chunk(c)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Failure::Job("mapper panicked".into()))))
                .collect()
        });
        let mut merged: Vec<Bucket<J>> = (0..n).map(|_| Vec::new()).collect();
        for part in parts {
            for (dst, b) in part?.into_iter().enumerate() {
                merged[dst].extend(b);
            }
        }
        merged
    } else {
        map_chunk(input)?
    };
    timing.map_s = t.elapsed().as_secs_f64();
    let emitted = buckets.iter().map(|b| b.len() as u64).sum();
    Ok(Mapped { buckets, emitted })
}

/// Groups received pairs by key, keeping each sender's order within a
/// group, and reduces every group. `received[p]` came from node `p`.
fn group_and_reduce<J: MapReduceJob>(
    job: &J,
    received: Vec<Bucket<J>>,
    parallel: usize,
) -> Vec<KvPair<J::K3, J::V3>> {
    let mut groups: BTreeMap<J::K2, Vec<J::V2>> = BTreeMap::new();
    for from in received {
        for kv in from {
            groups.entry(kv.key).or_default().push(kv.value);
        }
    }
    if parallel > 1 && groups.len() > parallel {
        let groups: Vec<(J::K2, Vec<J::V2>)> = groups.into_iter().collect();
        let per = groups.len().div_ceil(parallel);
        let mut chunks: Vec<Vec<(J::K2, Vec<J::V2>)>> = Vec::new();
        let mut it = groups.into_iter().peekable();
        while it.peek().is_some() {
            chunks.push(it.by_ref().take(per).collect());
        }
        std::thread::scope(|s| {
            let handles: Vec<_> = chunks
                .into_iter()
                .map(|c| s.spawn(move || c.into_iter().map(|(k, v)| job.reduce(k, v)).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("reducer panicked"))
                .collect()
        })
    } else {
        groups.into_iter().map(|(k, v)| job.reduce(k, v)).collect()
    }
}

/// Serialized size of the parts gathered by a coordinated sink.
fn gathered_bytes<O: Serialize>(parts: &[O]) -> Result<usize, Failure> {
    parts.iter().try_fold(0usize, |acc, p| {
        bincode::serialized_size(p)
            .map(|s| acc + s as usize)
            .map_err(|e| Failure::Job(e.to_string()))
    })
}

fn coordinate<J: MapReduceJob>(job: &J, parts: Vec<J::Out>, limit: usize) -> Result<Vec<J::Out>, Failure> {
    let needed = gathered_bytes(&parts)?;
    if needed > limit {
        return Err(Failure::SinkMemory { needed, limit });
    }
    let n = parts.len();
    let out = job.coordinate(parts).map_err(Failure::Job)?;
    if out.len() != n {
        return Err(Failure::Job(format!("coordinator returned {} parts for {n} nodes", out.len())));
    }
    Ok(out)
}

fn local_threads(cluster: &Cluster, opts: &MrOptions) -> usize {
    if opts.local_parallel {
        cluster.spec().workers_per_node
    } else {
        1
    }
}
