use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::JobError;
use crate::actor::{ActorSystem, Context, DEFAULT_ASK_TIMEOUT};
use crate::cluster::Cluster;
use crate::mapreduce::{run_mapreduce, MapReduceJob, MrOptions, MrOutput};
use crate::shm::{DistArray, ShmRuntime};
use crate::types::{block_range, Backend, KvPair, NodeId};

/// The array to sort. Random inputs are regenerated slice by slice on the
/// node that owns them.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SortInput {
    Explicit(Arc<Vec<i64>>),
    /// `len` values drawn uniformly from `[lo, hi]`.
    Random { len: usize, seed: u64, lo: i64, hi: i64 },
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

impl SortInput {
    pub fn explicit(values: Vec<i64>) -> Self {
        SortInput::Explicit(Arc::new(values))
    }

    pub fn len(&self) -> usize {
        match self {
            SortInput::Explicit(v) => v.len(),
            SortInput::Random { len, .. } => *len,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Element `i` of the array.
    pub fn value(&self, i: usize) -> i64 {
        match self {
            SortInput::Explicit(v) => v[i],
            SortInput::Random { seed, lo, hi, .. } => {
                let x = splitmix64(seed ^ splitmix64(i as u64));
                let span = (*hi as i128 - *lo as i128 + 1) as u128;
                (*lo as i128 + ((x as u128 * span) >> 64) as i128) as i64
            }
        }
    }

    /// `node`'s block as (global index, value) pairs.
    pub fn slice(&self, node: NodeId, n_nodes: usize) -> Vec<(u64, i64)> {
        block_range(self.len(), n_nodes, node.index())
            .map(|i| (i as u64, self.value(i)))
            .collect()
    }

    pub fn to_vec(&self) -> Vec<i64> {
        (0..self.len()).map(|i| self.value(i)).collect()
    }
}

/// Global extrema and the interval width used to route values.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RangeInfo {
    pub min: i64,
    pub max: i64,
    /// `max - min`.
    pub range: u64,
    /// Interval width `I = floor(range / n) + 1`.
    pub interval: u64,
}

impl RangeInfo {
    pub fn new(min: i64, max: i64, n_nodes: usize) -> Self {
        let range = (max as i128 - min as i128) as u64;
        RangeInfo {
            min,
            max,
            range,
            interval: range / n_nodes as u64 + 1,
        }
    }
}

/// Node whose interval `[min + qI, min + (q+1)I - 1]` contains `v`.
pub fn sort_destination(v: i64, r: &RangeInfo, n_nodes: usize) -> Result<NodeId, JobError> {
    if v < r.min || v > r.max {
        return Err(JobError::Range { value: v, min: r.min, max: r.max });
    }
    let q = (v as i128 - r.min as i128) as u64 / r.interval;
    debug_assert!((q as usize) < n_nodes);
    Ok(NodeId::from(q as usize))
}

fn merge(a: Option<(i64, i64)>, b: Option<(i64, i64)>) -> Option<(i64, i64)> {
    match (a, b) {
        (Some((a0, a1)), Some((b0, b1))) => Some((a0.min(b0), a1.max(b1))),
        (x, None) | (None, x) => x,
    }
}

fn extrema(values: impl Iterator<Item = i64>) -> Option<(i64, i64)> {
    values.fold(None, |acc, v| merge(acc, Some((v, v))))
}

#[derive(Clone, Serialize, Deserialize)]
enum RangeMsg {
    Query,
    Extrema(Option<(i64, i64)>),
}

/// Global minimum and maximum of `input`, computed where the data lives.
pub fn compute_range(input: &SortInput, cluster: &Cluster, backend: Backend) -> Result<RangeInfo, JobError> {
    if input.is_empty() {
        return Err(JobError::EmptyInput);
    }
    let n = cluster.n_nodes();
    let found = match backend {
        Backend::Actor => {
            let sys: ActorSystem<RangeMsg> =
                ActorSystem::start(cluster.endpoints(), cluster.spec().workers_per_node);
            let mut refs = Vec::with_capacity(n);
            for p in cluster.nodes() {
                let slice: Vec<i64> = input.slice(p, n).into_iter().map(|(_, v)| v).collect();
                refs.push(sys.spawn(p, "dist-array", move |ctx: &mut Context<'_, RangeMsg>, m| {
                    if let RangeMsg::Query = m {
                        ctx.reply(RangeMsg::Extrema(extrema(slice.iter().copied())));
                    }
                })?);
            }
            let folded = sys.ask_all(
                &refs,
                RangeMsg::Query,
                |a, b| match (a, b) {
                    (RangeMsg::Extrema(a), RangeMsg::Extrema(b)) => RangeMsg::Extrema(merge(a, b)),
                    (a, _) => a,
                },
                DEFAULT_ASK_TIMEOUT,
            )?;
            sys.shutdown();
            match folded {
                RangeMsg::Extrema(e) => e,
                RangeMsg::Query => None,
            }
        }
        Backend::SharedMemoryParallel | Backend::SharedMemorySequential => {
            let rt = ShmRuntime::start(cluster.spec(), cluster.endpoints())?;
            let data = DistArray::new(&rt, input.len(), |i| input.value(i));
            let local = rt.register("sort/extrema", |ctx, d: DistArray<i64>| {
                let slice = d.local(ctx)?;
                match extrema(slice.elements(ctx)?.iter().copied()) {
                    Some(e) => ctx.offer(&e),
                    None => Ok(()),
                }
            })?;
            let e = rt.root(NodeId(0)).finish_reduce(
                |ctx| {
                    for p in ctx.places() {
                        ctx.async_at(p, &local, &data)?;
                    }
                    Ok(())
                },
                |a, b| merge(Some(a), Some(b)).expect("both present"),
            )?;
            rt.shutdown();
            e
        }
    };
    let (min, max) = found.ok_or(JobError::EmptyInput)?;
    Ok(RangeInfo::new(min, max, n))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SortElement {
    pub global_index: u64,
    pub sort_key: i64,
}

/// MapReduce wiring of the distributed sort.
pub struct SortJob {
    input: SortInput,
    range: RangeInfo,
    n_nodes: usize,
}

impl SortJob {
    pub fn new(input: SortInput, range: RangeInfo, n_nodes: usize) -> Self {
        SortJob { input, range, n_nodes }
    }
}

impl MapReduceJob for SortJob {
    type K1 = u64;
    type V1 = i64;
    type K2 = u32;
    type V2 = SortElement;
    type K3 = u32;
    type V3 = Vec<SortElement>;
    type Out = Vec<SortElement>;

    fn source(&self, node: NodeId, n_nodes: usize) -> Vec<KvPair<u64, i64>> {
        self.input
            .slice(node, n_nodes)
            .into_iter()
            .map(|(i, v)| KvPair::stage1(i, v))
            .collect()
    }

    fn map(&self, pair: KvPair<u64, i64>) -> Vec<KvPair<u32, SortElement>> {
        let dst = sort_destination(pair.value, &self.range, self.n_nodes).expect("value inside the global range");
        vec![KvPair::stage2(
            dst.0,
            SortElement {
                global_index: pair.key,
                sort_key: pair.value,
            },
        )]
    }

    fn partition(&self, key: &u32, _n_nodes: usize) -> NodeId {
        NodeId(*key)
    }

    fn reduce(&self, key: u32, mut values: Vec<SortElement>) -> KvPair<u32, Vec<SortElement>> {
        values.sort_unstable_by_key(|e| (e.sort_key, e.global_index));
        KvPair::stage3(key, values)
    }

    fn sink(&self, _node: NodeId, pairs: Vec<KvPair<u32, Vec<SortElement>>>) -> Vec<SortElement> {
        pairs.into_iter().flat_map(|p| p.value).collect()
    }

    fn coordinated_sink(&self) -> bool {
        true
    }

    /// Concatenates the sorted slices in node order and cuts the result
    /// into balanced blocks.
    fn coordinate(&self, parts: Vec<Vec<SortElement>>) -> Result<Vec<Vec<SortElement>>, String> {
        let n = parts.len();
        let all: Vec<SortElement> = parts.into_iter().flatten().collect();
        let total = all.len();
        let mut it = all.into_iter();
        Ok((0..n)
            .map(|p| it.by_ref().take(block_range(total, n, p).len()).collect())
            .collect())
    }
}

#[derive(Clone, Debug)]
pub struct SortOutput {
    pub range: RangeInfo,
    pub range_time: Duration,
    /// Sorted, balanced elements left on each node.
    pub mr: MrOutput<Vec<SortElement>>,
}

impl SortOutput {
    /// Sorted keys in node order.
    pub fn values(&self) -> Vec<i64> {
        self.mr.per_node.iter().flatten().map(|e| e.sort_key).collect()
    }

    pub fn per_node(&self) -> &[Vec<SortElement>] {
        &self.mr.per_node
    }
}

/// Range pre-elaboration followed by the sort round.
pub fn distributed_sort(
    input: &SortInput,
    cluster: &Cluster,
    backend: Backend,
    opts: &MrOptions,
) -> Result<SortOutput, JobError> {
    let t = std::time::Instant::now();
    let range = compute_range(input, cluster, backend)?;
    let range_time = t.elapsed();
    let job = SortJob::new(input.clone(), range, cluster.n_nodes());
    let mr = run_mapreduce(job, cluster, backend, opts)?;
    Ok(SortOutput { range, range_time, mr })
}
