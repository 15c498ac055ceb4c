//! Shared-memory backend: a control loop at place 0 runs one
//! `finish { for p: async_at(p, step) }` per step. Each place keeps its
//! step state in a heap object; shuffle deposits go into slots reserved per
//! sender, so no atomic section is needed.

use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::Mutex;

use super::{
    coordinate, group_and_reduce, init_and_map, local_threads, Bucket, Failure, MapReduceJob, MrError,
    MrOptions, MrOutput, PeerDelta, StepTiming,
};
use crate::cluster::Cluster;
use crate::shm::{Ctx, GlobalRef, RemoteFn, ShmError, ShmRuntime};
use crate::types::{KvPair, NodeId};

struct MrPlace<J: MapReduceJob> {
    buckets: Mutex<Vec<Bucket<J>>>,
    /// One slot per sending place, each written once.
    slots: Vec<Mutex<Option<Bucket<J>>>>,
    reduced: Mutex<Vec<KvPair<J::K3, J::V3>>>,
    timing: Mutex<StepTiming>,
    result: Mutex<Option<J::Out>>,
}

type Refs<J> = Vec<GlobalRef<MrPlace<J>>>;

fn fail(f: Failure) -> ShmError {
    ShmError::Job(serde_json::to_string(&f).expect("failure serializes"))
}

fn unwrap_failure(e: ShmError) -> MrError {
    match &e {
        ShmError::Job(s) => match serde_json::from_str::<Failure>(s) {
            Ok(f) => f.into(),
            Err(_) => e.into(),
        },
        _ => e.into(),
    }
}

fn local<J: MapReduceJob>(ctx: &Ctx, refs: &Refs<J>) -> Result<Arc<MrPlace<J>>, ShmError> {
    ctx.deref(&refs[ctx.place().index()])
}

/// Finish body starting `f` at every place.
fn everywhere<'a, J: MapReduceJob>(
    f: &'a RemoteFn<Refs<J>, ()>,
    refs: &'a Refs<J>,
) -> impl FnOnce(&Ctx) -> Result<(), ShmError> + 'a {
    move |ctx| {
        for p in ctx.places() {
            ctx.async_at(p, f, refs)?;
        }
        Ok(())
    }
}

fn concat<T>(mut a: Vec<T>, b: Vec<T>) -> Vec<T> {
    a.extend(b);
    a
}

pub(super) fn run<J: MapReduceJob>(job: J, cluster: &Cluster, opts: &MrOptions) -> Result<MrOutput<J::Out>, MrError> {
    let n = cluster.n_nodes();
    let rt = ShmRuntime::start(cluster.spec(), cluster.endpoints())?;
    let job = Arc::new(job);
    let parallel = local_threads(cluster, opts);

    let refs: Refs<J> = rt
        .places()
        .map(|p| {
            rt.root(p).alloc(MrPlace::<J> {
                buckets: Mutex::new(Vec::new()),
                slots: (0..n).map(|_| Mutex::new(None)).collect(),
                reduced: Mutex::new(Vec::new()),
                timing: Mutex::new(StepTiming::new(p)),
                result: Mutex::new(None),
            })
        })
        .collect();

    let j = Arc::clone(&job);
    let map = rt.register("mr/map", move |ctx, refs: Refs<J>| {
        let me = local(ctx, &refs)?;
        let mut timing = me.timing.lock();
        let m = init_and_map(&*j, ctx.place(), refs.len(), parallel, &mut timing).map_err(fail)?;
        let counts: Vec<u64> = m.buckets.iter().map(|b| b.len() as u64).collect();
        *me.buckets.lock() = m.buckets;
        ctx.offer(&vec![(ctx.place(), m.emitted, counts)])
    })?;

    let deposit = rt.register(
        "mr/deposit",
        |ctx, (target, from, pairs): (GlobalRef<MrPlace<J>>, NodeId, Bucket<J>)| {
            let place = ctx.deref(&target)?;
            let mut slot = place.slots[from.index()].lock();
            if slot.is_some() {
                return Err(ShmError::Job(format!("second deposit from {from}")));
            }
            *slot = Some(pairs);
            Ok(())
        },
    )?;

    let fault = opts.fault;
    let shuffle = rt.register("mr/shuffle", move |ctx, refs: Refs<J>| {
        let t = Instant::now();
        let me = local(ctx, &refs)?;
        let buckets = std::mem::take(&mut *me.buckets.lock());
        for (q, mut pairs) in buckets.into_iter().enumerate() {
            if let Some(f) = fault {
                if f.from == ctx.place() && f.to.index() == q {
                    pairs.truncate(pairs.len().saturating_sub(f.drop));
                }
            }
            let q = NodeId::from(q);
            ctx.at(q, &deposit, &(refs[q.index()], ctx.place(), pairs))?;
        }
        me.timing.lock().shuffle_s = t.elapsed().as_secs_f64();
        Ok(())
    })?;

    let verify = rt.register("mr/verify", |ctx, (refs, announced): (Refs<J>, Vec<u64>)| {
        let me = local(ctx, &refs)?;
        let deltas: Vec<PeerDelta> = me
            .slots
            .iter()
            .enumerate()
            .map(|(p, s)| PeerDelta {
                from: NodeId::from(p),
                announced: announced[p],
                received: s.lock().as_ref().map_or(0, |b| b.len() as u64),
            })
            .filter(|d| d.missing() != 0)
            .collect();
        if deltas.is_empty() {
            Ok(())
        } else {
            ctx.offer(&vec![(ctx.place(), deltas)])
        }
    })?;

    let j = Arc::clone(&job);
    let reduce = rt.register("mr/reduce", move |ctx, refs: Refs<J>| {
        let t = Instant::now();
        let me = local(ctx, &refs)?;
        let received: Vec<Bucket<J>> = me.slots.iter().map(|s| s.lock().take().unwrap_or_default()).collect();
        let total: u64 = received.iter().map(|b| b.len() as u64).sum();
        *me.reduced.lock() = group_and_reduce(&*j, received, parallel);
        me.timing.lock().reduce_s = t.elapsed().as_secs_f64();
        ctx.offer(&total)
    })?;

    let j = Arc::clone(&job);
    let sink = rt.register("mr/sink", move |ctx, refs: Refs<J>| {
        let t = Instant::now();
        let me = local(ctx, &refs)?;
        let pairs = std::mem::take(&mut *me.reduced.lock());
        let part = j.sink(ctx.place(), pairs);
        let mut timing = me.timing.lock();
        timing.sink_s = t.elapsed().as_secs_f64();
        ctx.offer(&vec![(ctx.place(), part, *timing)])
    })?;

    let assign = rt.register("mr/assign", |ctx, (target, part): (GlobalRef<MrPlace<J>>, J::Out)| {
        *ctx.deref(&target)?.result.lock() = Some(part);
        Ok(())
    })?;

    let driver = rt.root(NodeId(0));
    let all = |f| everywhere(f, &refs);

    let mapped: Vec<(NodeId, u64, Vec<u64>)> = driver
        .finish_reduce(all(&map), concat)
        .map_err(unwrap_failure)?
        .unwrap_or_default();
    let mut matrix = vec![vec![0u64; n]; n];
    let mut emitted = 0;
    for (p, e, counts) in mapped {
        emitted += e;
        matrix[p.index()] = counts;
    }

    driver.finish(all(&shuffle)).map_err(unwrap_failure)?;

    let bad: Option<Vec<(NodeId, Vec<PeerDelta>)>> = driver
        .finish_reduce(
            |ctx| {
                for q in ctx.places() {
                    let column: Vec<u64> = (0..n).map(|p| matrix[p][q.index()]).collect();
                    ctx.async_at(q, &verify, &(refs.clone(), column))?;
                }
                Ok(())
            },
            concat,
        )
        .map_err(unwrap_failure)?;
    if let Some(mut bad) = bad {
        bad.sort_by_key(|(p, _)| *p);
        let (node, deltas) = bad.swap_remove(0);
        return Err(MrError::ShuffleBarrier { node, deltas });
    }

    let received = driver
        .finish_reduce(all(&reduce), |a: u64, b| a + b)
        .map_err(unwrap_failure)?
        .unwrap_or(0);

    let t = Instant::now();
    let mut sunk: Vec<(NodeId, J::Out, StepTiming)> = driver
        .finish_reduce(all(&sink), concat)
        .map_err(unwrap_failure)?
        .unwrap_or_default();
    sunk.sort_by_key(|(p, _, _)| *p);
    let mut timings: Vec<StepTiming> = sunk.iter().map(|(_, _, t)| *t).collect();
    let mut per_node: Vec<J::Out> = sunk.into_iter().map(|(_, part, _)| part).collect();

    if job.coordinated_sink() {
        per_node = coordinate(&*job, per_node, opts.sink_memory_limit).map_err(MrError::from)?;
        driver
            .finish(|ctx| {
                for (p, part) in per_node.iter().enumerate() {
                    ctx.async_at(NodeId::from(p), &assign, &(refs[p], part.clone()))?;
                }
                Ok(())
            })
            .map_err(unwrap_failure)?;
        let sink_s = t.elapsed().as_secs_f64();
        for tm in &mut timings {
            tm.sink_s = sink_s;
        }
    }
    rt.shutdown();
    Ok(MrOutput {
        per_node,
        timings,
        emitted,
        received,
        wall: Duration::ZERO,
    })
}
