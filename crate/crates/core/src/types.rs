//! Identifiers, cluster shape and the key/value pair shared by both engines.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Values that engines move between nodes.
pub trait Data: Serialize + serde::de::DeserializeOwned + Clone + Send + Sync + 'static {}

impl<T: Serialize + serde::de::DeserializeOwned + Clone + Send + Sync + 'static> Data for T {}

/// Index of a cluster node in `[0, n_nodes)`.
///
/// The derived ordering is the node ordering every engine relies on: a sorted
/// distributed array is sorted across nodes in ascending `NodeId` order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl From<usize> for NodeId {
    fn from(i: usize) -> Self {
        NodeId(i as u32)
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "node{}", self.0)
    }
}

/// Address of a BSP agent: owning node plus index within that node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AgentId {
    pub node: NodeId,
    pub local_index: u32,
}

impl AgentId {
    pub fn new(node: usize, local_index: usize) -> Self {
        AgentId {
            node: NodeId::from(node),
            local_index: local_index as u32,
        }
    }
}

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.node.0, self.local_index)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[error("agent {agent} is outside a cluster of {n_nodes} nodes x {per_node} agents")]
pub struct AddressError {
    pub agent: AgentId,
    pub n_nodes: usize,
    pub per_node: usize,
}

/// Maps an agent to its dense global index `node * per_node + local_index`.
pub fn agent_id_to_global(id: AgentId, per_node: usize) -> Result<u64, AddressError> {
    if per_node == 0 || id.local_index as usize >= per_node {
        return Err(AddressError {
            agent: id,
            n_nodes: id.node.index() + 1,
            per_node,
        });
    }
    Ok(id.node.0 as u64 * per_node as u64 + id.local_index as u64)
}

/// Inverse of [`agent_id_to_global`].
pub fn agent_id_from_global(global: u64, per_node: usize) -> AgentId {
    let per = per_node as u64;
    AgentId {
        node: NodeId((global / per) as u32),
        local_index: (global % per) as u32,
    }
}

/// Checks that `id` lies inside an `n_nodes x per_node` cluster.
pub fn check_agent(id: AgentId, n_nodes: usize, per_node: usize) -> Result<(), AddressError> {
    if id.node.index() >= n_nodes || id.local_index as usize >= per_node {
        return Err(AddressError {
            agent: id,
            n_nodes,
            per_node,
        });
    }
    Ok(())
}

/// Global index range owned by node `p` when `total` elements are spread over
/// `n` nodes in contiguous blocks. The first `total mod n` nodes hold one
/// extra element.
pub fn block_range(total: usize, n: usize, p: usize) -> std::ops::Range<usize> {
    let base = total / n;
    let extra = total % n;
    let start = p * base + p.min(extra);
    let len = base + usize::from(p < extra);
    start..start + len
}

/// Node owning global index `i` under [`block_range`].
pub fn block_owner(total: usize, n: usize, i: usize) -> NodeId {
    let base = total / n;
    let extra = total % n;
    let wide = extra * (base + 1);
    if i < wide {
        NodeId::from(i / (base + 1))
    } else {
        NodeId::from(extra + (i - wide) / base)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Backend {
    /// Message-passing actors.
    Actor,
    /// Shared-memory places, one activity per local agent.
    SharedMemoryParallel,
    /// Shared-memory places, local agents run sequentially.
    SharedMemorySequential,
}

impl Backend {
    pub const ALL: [Backend; 3] = [
        Backend::Actor,
        Backend::SharedMemoryParallel,
        Backend::SharedMemorySequential,
    ];

    pub fn short_name(self) -> &'static str {
        match self {
            Backend::Actor => "a",
            Backend::SharedMemoryParallel => "smp",
            Backend::SharedMemorySequential => "sms",
        }
    }

    pub fn is_shared_memory(self) -> bool {
        !matches!(self, Backend::Actor)
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for Backend {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "a" | "actor" | "akka" => Ok(Backend::Actor),
            "smp" | "shared-memory-parallel" | "x10p" => Ok(Backend::SharedMemoryParallel),
            "sms" | "shared-memory-sequential" | "x10s" => Ok(Backend::SharedMemorySequential),
            other => Err(ConfigError::Invalid {
                key: "backend".into(),
                value: other.into(),
            }),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TransportKind {
    InProcess,
    Tcp,
}

impl fmt::Display for TransportKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TransportKind::InProcess => "inproc",
            TransportKind::Tcp => "tcp",
        })
    }
}

impl FromStr for TransportKind {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "inproc" | "in-process" | "inprocess" => Ok(TransportKind::InProcess),
            "tcp" => Ok(TransportKind::Tcp),
            other => Err(ConfigError::Invalid {
                key: "transport".into(),
                value: other.into(),
            }),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConfigError {
    #[error("{0} must be positive")]
    Zero(&'static str),
    #[error("worker_cap {cap} is below workers_per_node {workers}")]
    CapBelowWorkers { cap: usize, workers: usize },
    #[error("invalid value {value:?} for {key}")]
    Invalid { key: String, value: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("line {line}: expected key=value")]
    Syntax { line: usize },
    #[error("tcp transport needs {expected} endpoints, got {got}")]
    Endpoints { expected: usize, got: usize },
    #[error("cannot read config: {0}")]
    Io(String),
}

pub const DEFAULT_WORKER_CAP: usize = 1000;

/// Cluster shape `A x B` plus per-node execution resources.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterSpec {
    /// A: number of machines.
    pub machines: usize,
    /// B: nodes hosted on each machine.
    pub nodes_per_machine: usize,
    pub workers_per_node: usize,
    pub backend: Backend,
    pub transport: TransportKind,
    /// Upper bound on live worker threads per shared-memory place.
    pub worker_cap: usize,
}

impl ClusterSpec {
    pub fn new(machines: usize, nodes_per_machine: usize, backend: Backend) -> Self {
        ClusterSpec {
            machines,
            nodes_per_machine,
            workers_per_node: 4,
            backend,
            transport: TransportKind::InProcess,
            worker_cap: DEFAULT_WORKER_CAP,
        }
    }

    pub fn with_workers(mut self, workers: usize) -> Self {
        self.workers_per_node = workers;
        self
    }

    pub fn with_worker_cap(mut self, cap: usize) -> Self {
        self.worker_cap = cap;
        self
    }

    pub fn with_transport(mut self, transport: TransportKind) -> Self {
        self.transport = transport;
        self
    }

    pub fn with_backend(mut self, backend: Backend) -> Self {
        self.backend = backend;
        self
    }

    pub fn n_nodes(&self) -> usize {
        self.machines * self.nodes_per_machine
    }

    pub fn shape(&self) -> Shape {
        Shape {
            machines: self.machines,
            nodes_per_machine: self.nodes_per_machine,
        }
    }

    pub fn validate(self) -> Result<Self, ConfigError> {
        if self.machines == 0 {
            return Err(ConfigError::Zero("machines"));
        }
        if self.nodes_per_machine == 0 {
            return Err(ConfigError::Zero("nodes_per_machine"));
        }
        if self.workers_per_node == 0 {
            return Err(ConfigError::Zero("workers_per_node"));
        }
        if self.worker_cap == 0 {
            return Err(ConfigError::Zero("worker_cap"));
        }
        if self.worker_cap < self.workers_per_node {
            return Err(ConfigError::CapBelowWorkers {
                cap: self.worker_cap,
                workers: self.workers_per_node,
            });
        }
        Ok(self)
    }
}

/// Free-standing form of [`ClusterSpec::validate`].
pub fn validate_cluster_spec(spec: ClusterSpec) -> Result<ClusterSpec, ConfigError> {
    spec.validate()
}

/// An `AxB` cluster shape, written `2x4`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Shape {
    pub machines: usize,
    pub nodes_per_machine: usize,
}

impl Shape {
    pub fn n_nodes(&self) -> usize {
        self.machines * self.nodes_per_machine
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.machines, self.nodes_per_machine)
    }
}

impl FromStr for Shape {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ConfigError::Invalid {
            key: "shape".into(),
            value: s.into(),
        };
        let (a, b) = s.trim().split_once(['x', 'X']).ok_or_else(bad)?;
        let machines: usize = a.trim().parse().map_err(|_| bad())?;
        let nodes_per_machine: usize = b.trim().parse().map_err(|_| bad())?;
        if machines == 0 || nodes_per_machine == 0 {
            return Err(bad());
        }
        Ok(Shape {
            machines,
            nodes_per_machine,
        })
    }
}

/// Which `(k, v)` pair of a MapReduce round a [`KvPair`] represents.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    /// Source output, Map input.
    Stage1,
    /// Map output, Reduce input.
    Stage2,
    /// Reduce output, Sink input.
    Stage3,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KvPair<K, V> {
    pub key: K,
    pub value: V,
    pub stage: Stage,
}

impl<K, V> KvPair<K, V> {
    pub fn stage1(key: K, value: V) -> Self {
        KvPair {
            key,
            value,
            stage: Stage::Stage1,
        }
    }

    pub fn stage2(key: K, value: V) -> Self {
        KvPair {
            key,
            value,
            stage: Stage::Stage2,
        }
    }

    pub fn stage3(key: K, value: V) -> Self {
        KvPair {
            key,
            value,
            stage: Stage::Stage3,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn global_index_examples() {
        assert_eq!(agent_id_to_global(AgentId::new(0, 0), 500).unwrap(), 0);
        assert_eq!(agent_id_to_global(AgentId::new(2, 3), 500).unwrap(), 1003);
        assert_eq!(agent_id_to_global(AgentId::new(7, 499), 500).unwrap(), 3999);
    }

    #[test]
    fn global_index_rejects_out_of_range_local() {
        assert!(agent_id_to_global(AgentId::new(1, 500), 500).is_err());
        assert!(agent_id_to_global(AgentId::new(0, 0), 0).is_err());
    }

    #[test]
    fn cluster_spec_examples() {
        let s = ClusterSpec::new(8, 4, Backend::Actor).with_workers(4);
        assert_eq!(s.clone().validate().unwrap(), s);
        assert_eq!(s.n_nodes(), 32);
        let s = ClusterSpec::new(4, 8, Backend::Actor).with_workers(8);
        assert!(s.validate().is_ok());
        assert_eq!(
            ClusterSpec::new(0, 4, Backend::Actor).validate(),
            Err(ConfigError::Zero("machines"))
        );
        assert!(matches!(
            ClusterSpec::new(1, 1, Backend::Actor)
                .with_workers(9)
                .with_worker_cap(8)
                .validate(),
            Err(ConfigError::CapBelowWorkers { cap: 8, workers: 9 })
        ));
        assert_eq!(
            ClusterSpec::new(1, 1, Backend::Actor).with_workers(0).validate(),
            Err(ConfigError::Zero("workers_per_node"))
        );
    }

    #[test]
    fn shape_parses() {
        assert_eq!(
            "2x4".parse::<Shape>().unwrap(),
            Shape {
                machines: 2,
                nodes_per_machine: 4
            }
        );
        assert!("2x0".parse::<Shape>().is_err());
        assert!("24".parse::<Shape>().is_err());
    }

    #[test]
    fn kv_pair_round_trips() {
        let p = KvPair::stage2(String::from("key"), vec![1u8, 2, 3]);
        let bytes = bincode::serialize(&p).unwrap();
        let back: KvPair<String, Vec<u8>> = bincode::deserialize(&bytes).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn block_ranges_follow_the_remainder_rule() {
        assert_eq!(block_range(100, 4, 2), 50..75);
        assert_eq!(block_range(10, 4, 3), 8..10);
        assert_eq!(block_range(10, 4, 0), 0..3);
        assert_eq!(block_range(0, 4, 1), 0..0);
    }

    proptest! {
        #[test]
        fn block_ranges_partition(total in 0usize..5000, n in 1usize..33) {
            let mut next = 0;
            for p in 0..n {
                let r = block_range(total, n, p);
                prop_assert_eq!(r.start, next);
                // Sizes differ by at most one and never grow with p.
                prop_assert!(r.len() == total / n || r.len() == total / n + 1);
                for i in r.clone() {
                    prop_assert_eq!(block_owner(total, n, i), NodeId::from(p));
                }
                next = r.end;
            }
            prop_assert_eq!(next, total);
        }

        #[test]
        fn global_index_is_a_bijection(node in 0u32..64, per in 1usize..5000, local_seed in any::<u32>()) {
            let local = local_seed as usize % per;
            let id = AgentId::new(node as usize, local);
            let g = agent_id_to_global(id, per).unwrap();
            prop_assert_eq!(agent_id_from_global(g, per), id);
        }

        #[test]
        fn kv_pairs_survive_serialization(k in any::<i64>(), v in proptest::collection::vec(any::<u8>(), 0..64)) {
            let p = KvPair::stage1(k, v);
            let back: KvPair<i64, Vec<u8>> = bincode::deserialize(&bincode::serialize(&p).unwrap()).unwrap();
            prop_assert_eq!(back, p);
        }
    }
}
