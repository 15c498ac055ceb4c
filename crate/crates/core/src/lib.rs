//! MapReduce and Bulk Synchronous Parallel engines over two interchangeable
//! concurrency runtimes: an actor runtime with mailboxes and remote
//! references, and a place-based shared-memory runtime with `at`, `async`,
//! `finish` and `atomic`.

pub mod actor;
pub mod bsp;
pub mod cluster;
pub mod config;
pub mod jobs;
pub mod mapreduce;
pub mod shm;
pub mod transport;
pub mod types;

pub use cluster::{Cluster, ClusterError};
pub use config::ClusterConfig;
pub use types::{
    agent_id_from_global, agent_id_to_global, block_owner, block_range, validate_cluster_spec, AddressError, AgentId,
    Backend, ClusterSpec, ConfigError, Data, KvPair, NodeId, Shape, Stage, TransportKind,
};
