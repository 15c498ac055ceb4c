//! Actor backend: one worker actor per node, driven step by step through
//! aggregators. Shuffle data moves worker to worker.

use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{
    coordinate, group_and_reduce, init_and_map, local_threads, Bucket, Failure, MapReduceJob, MrError,
    MrOptions, MrOutput, PeerDelta, ShuffleFault, StepTiming,
};
use crate::actor::{Actor, ActorError, ActorRef, ActorSystem, Context};
use crate::cluster::Cluster;
use crate::types::{KvPair, NodeId};

const WORKER: &str = "mr/worker";
const STATUS_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Clone, Serialize, Deserialize)]
enum Msg<K, V, O> {
    Map,
    MapDone { emitted: u64 },
    Shuffle,
    Counts { from: NodeId, count: u64 },
    Data { from: NodeId, pairs: Vec<KvPair<K, V>> },
    ShuffleDone,
    Status,
    StatusReply { deltas: Vec<PeerDelta> },
    Reduce,
    ReduceDone { received: u64 },
    Sink,
    SinkPart { from: NodeId, part: O },
    SinkAssign { part: O },
    SinkFailed(Failure),
    SinkDone { part: O, timing: StepTiming },
    Failed(Failure),
}

type JobMsg<J> = Msg<<J as MapReduceJob>::K2, <J as MapReduceJob>::V2, <J as MapReduceJob>::Out>;

struct Worker<J: MapReduceJob> {
    job: Arc<J>,
    node: NodeId,
    peers: Vec<ActorRef>,
    parallel: usize,
    fault: Option<ShuffleFault>,
    sink_limit: usize,
    timing: StepTiming,
    buckets: Vec<Bucket<J>>,
    announced: Vec<Option<u64>>,
    inbound: Vec<Option<Bucket<J>>>,
    waiter: Option<ActorRef>,
    step_start: Instant,
    reduced: Vec<KvPair<J::K3, J::V3>>,
    parts: Vec<Option<J::Out>>,
}

impl<J: MapReduceJob> Worker<J> {
    fn new(job: Arc<J>, node: NodeId, peers: Vec<ActorRef>, parallel: usize, opts: &MrOptions) -> Self {
        let n = peers.len();
        Worker {
            job,
            node,
            peers,
            parallel,
            fault: opts.fault,
            sink_limit: opts.sink_memory_limit,
            timing: StepTiming::new(node),
            buckets: Vec::new(),
            announced: vec![None; n],
            inbound: (0..n).map(|_| None).collect(),
            waiter: None,
            step_start: Instant::now(),
            reduced: Vec::new(),
            parts: (0..n).map(|_| None).collect(),
        }
    }

    fn shuffle(&mut self, ctx: &mut Context<'_, JobMsg<J>>) {
        self.step_start = Instant::now();
        self.waiter = ctx.sender().cloned();
        for (q, mut pairs) in std::mem::take(&mut self.buckets).into_iter().enumerate() {
            let count = pairs.len() as u64;
            if let Some(f) = self.fault {
                if f.from == self.node && f.to.index() == q {
                    pairs.truncate(pairs.len().saturating_sub(f.drop));
                }
            }
            ctx.tell(&self.peers[q], Msg::Counts { from: self.node, count });
            ctx.tell(&self.peers[q], Msg::Data { from: self.node, pairs });
        }
        self.check_shuffle(ctx);
    }

    fn deltas(&self) -> Vec<PeerDelta> {
        (0..self.peers.len())
            .map(|p| PeerDelta {
                from: NodeId::from(p),
                announced: self.announced[p].unwrap_or(0),
                received: self.inbound[p].as_ref().map_or(0, |b| b.len() as u64),
            })
            .collect()
    }

    fn check_shuffle(&mut self, ctx: &mut Context<'_, JobMsg<J>>) {
        if self.waiter.is_none() {
            return;
        }
        let complete = self
            .announced
            .iter()
            .zip(&self.inbound)
            .all(|(a, b)| matches!((a, b), (Some(a), Some(b)) if *a == b.len() as u64));
        if complete {
            self.timing.shuffle_s = self.step_start.elapsed().as_secs_f64();
            let w = self.waiter.take().expect("waiter");
            ctx.tell(&w, Msg::ShuffleDone);
        }
    }

    fn sink_part(&mut self, ctx: &mut Context<'_, JobMsg<J>>, from: NodeId, part: J::Out) {
        self.parts[from.index()] = Some(part);
        if self.parts.iter().any(Option::is_none) {
            return;
        }
        let parts = self.parts.iter_mut().map(|p| p.take().expect("part")).collect();
        match coordinate(&*self.job, parts, self.sink_limit) {
            Ok(assigned) => {
                for (peer, part) in self.peers.iter().zip(assigned) {
                    ctx.tell(peer, Msg::SinkAssign { part });
                }
            }
            Err(f) => {
                for peer in &self.peers {
                    ctx.tell(peer, Msg::SinkFailed(f.clone()));
                }
            }
        }
    }

    fn finish_sink(&mut self, ctx: &mut Context<'_, JobMsg<J>>, reply: JobMsg<J>) {
        if let Some(w) = self.waiter.take() {
            ctx.tell(&w, reply);
        }
    }
}

impl<J: MapReduceJob> Actor<JobMsg<J>> for Worker<J> {
    fn receive(&mut self, ctx: &mut Context<'_, JobMsg<J>>, msg: JobMsg<J>) {
        match msg {
            Msg::Map => {
                let n = self.peers.len();
                match init_and_map(&*self.job, self.node, n, self.parallel, &mut self.timing) {
                    Ok(m) => {
                        self.buckets = m.buckets;
                        ctx.reply(Msg::MapDone { emitted: m.emitted });
                    }
                    Err(f) => {
                        ctx.reply(Msg::Failed(f));
                    }
                }
            }
            Msg::Shuffle => self.shuffle(ctx),
            Msg::Counts { from, count } => {
                self.announced[from.index()] = Some(count);
                self.check_shuffle(ctx);
            }
            Msg::Data { from, pairs } => {
                self.inbound[from.index()] = Some(pairs);
                self.check_shuffle(ctx);
            }
            Msg::Status => {
                ctx.reply(Msg::StatusReply { deltas: self.deltas() });
            }
            Msg::Reduce => {
                let t = Instant::now();
                let received: Vec<Bucket<J>> = self.inbound.iter_mut().map(|b| b.take().unwrap_or_default()).collect();
                let total = received.iter().map(|b| b.len() as u64).sum();
                self.reduced = group_and_reduce(&*self.job, received, self.parallel);
                self.timing.reduce_s = t.elapsed().as_secs_f64();
                ctx.reply(Msg::ReduceDone { received: total });
            }
            Msg::Sink => {
                self.step_start = Instant::now();
                let part = self.job.sink(self.node, std::mem::take(&mut self.reduced));
                if self.job.coordinated_sink() {
                    self.waiter = ctx.sender().cloned();
                    ctx.tell(&self.peers[0], Msg::SinkPart { from: self.node, part });
                } else {
                    self.timing.sink_s = self.step_start.elapsed().as_secs_f64();
                    ctx.reply(Msg::SinkDone {
                        part,
                        timing: self.timing,
                    });
                }
            }
            Msg::SinkPart { from, part } => self.sink_part(ctx, from, part),
            Msg::SinkAssign { part } => {
                self.timing.sink_s = self.step_start.elapsed().as_secs_f64();
                let timing = self.timing;
                self.finish_sink(ctx, Msg::SinkDone { part, timing });
            }
            Msg::SinkFailed(f) => self.finish_sink(ctx, Msg::Failed(f)),
            _ => log::warn!("{}: unexpected message", ctx.myself()),
        }
    }
}

/// Replies sorted by node; the first `Failed` reply becomes the error.
fn by_node<M>(replies: Vec<(ActorRef, M)>) -> Vec<M> {
    let mut r = replies;
    r.sort_by_key(|(a, _)| a.node);
    r.into_iter().map(|(_, m)| m).collect()
}

fn failure<K, V, O>(replies: &[Msg<K, V, O>]) -> Option<MrError> {
    replies.iter().find_map(|m| match m {
        Msg::Failed(f) => Some(f.clone().into()),
        _ => None,
    })
}

pub(super) fn run<J: MapReduceJob>(job: J, cluster: &Cluster, opts: &MrOptions) -> Result<MrOutput<J::Out>, MrError> {
    let n = cluster.n_nodes();
    let sys: ActorSystem<JobMsg<J>> = ActorSystem::start(cluster.endpoints(), cluster.spec().workers_per_node);
    let job = Arc::new(job);
    let peers: Vec<ActorRef> = cluster.nodes().map(|p| ActorRef::new(p, WORKER)).collect();
    let parallel = local_threads(cluster, opts);
    for p in cluster.nodes() {
        sys.spawn(p, WORKER, Worker::new(Arc::clone(&job), p, peers.clone(), parallel, opts))?;
    }
    let step = |m: JobMsg<J>| -> Result<Vec<JobMsg<J>>, MrError> {
        let replies = by_node(sys.ask_each(&peers, m, opts.step_timeout)?);
        match failure(&replies) {
            Some(e) => Err(e),
            None => Ok(replies),
        }
    };

    let emitted = step(Msg::Map)?
        .iter()
        .map(|m| match m {
            Msg::MapDone { emitted } => *emitted,
            _ => 0,
        })
        .sum();

    match sys.ask_each(&peers, Msg::Shuffle, opts.step_timeout) {
        Ok(_) => {}
        Err(ActorError::AggregationTimeout { missing }) => {
            let node = missing.first().map(|r| r.node).unwrap_or(NodeId(0));
            let target = ActorRef::new(node, WORKER);
            let deltas = match sys.ask_each(&[target], Msg::Status, STATUS_TIMEOUT) {
                Ok(mut r) => match r.pop() {
                    Some((_, Msg::StatusReply { deltas })) => deltas,
                    _ => Vec::new(),
                },
                Err(_) => Vec::new(),
            };
            return Err(MrError::ShuffleBarrier {
                node,
                deltas: deltas.into_iter().filter(|d| d.missing() != 0).collect(),
            });
        }
        Err(e) => return Err(e.into()),
    }

    let received = step(Msg::Reduce)?
        .iter()
        .map(|m| match m {
            Msg::ReduceDone { received } => *received,
            _ => 0,
        })
        .sum();

    let mut per_node = Vec::with_capacity(n);
    let mut timings = Vec::with_capacity(n);
    for m in step(Msg::Sink)? {
        match m {
            Msg::SinkDone { part, timing } => {
                per_node.push(part);
                timings.push(timing);
            }
            _ => return Err(MrError::Protocol("unexpected sink reply".into())),
        }
    }
    sys.shutdown();
    Ok(MrOutput {
        per_node,
        timings,
        emitted,
        received,
        wall: Duration::ZERO,
    })
}
