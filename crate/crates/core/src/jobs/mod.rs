//! Concrete workloads: distributed sort and word count over MapReduce,
//! graph exploration over BSP.

pub mod graph;
mod sort;
mod wordcount;

pub use sort::{compute_range, distributed_sort, sort_destination, RangeInfo, SortElement, SortInput, SortJob, SortOutput};
pub use graph::{explore_graph, generate_graph, Exploration, GraphSource, Vertex};
pub use wordcount::{stable_hash, WordCount};

use thiserror::Error;

use crate::actor::ActorError;
use crate::bsp::BspError;
use crate::mapreduce::MrError;
use crate::shm::ShmError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum JobError {
    #[error("input array is empty")]
    EmptyInput,
    #[error("value {value} outside [{min}, {max}]")]
    Range { value: i64, min: i64, max: i64 },
    #[error(transparent)]
    Mr(#[from] MrError),
    #[error(transparent)]
    Bsp(#[from] BspError),
    #[error(transparent)]
    Actor(#[from] ActorError),
    #[error(transparent)]
    Shm(#[from] ShmError),
}
