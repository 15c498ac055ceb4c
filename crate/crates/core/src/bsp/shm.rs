//! Shared-memory backend. Each phase is one `finish` over an `at async`
//! per place; every message is appended to the recipient's inbox inside
//! the recipient place's atomic section. The parallel variant runs one
//! activity per active agent, the sequential one iterates them in order.

use std::marker::PhantomData;
use std::sync::Arc;

use parking_lot::Mutex;

use super::{BarrierCount, BspError, BspProgram, Engine, Incoming, LocalInboxes, Outbox, PhaseStats};
use crate::cluster::Cluster;
use crate::shm::{Ctx, GlobalRef, Guarded, RemoteFn, ShmError, ShmRuntime};
use crate::types::{AddressError, AgentId, NodeId};

struct BspPlace<P: BspProgram> {
    boxes: Guarded<LocalInboxes<P::Msg>>,
    agents: Vec<Mutex<P::State>>,
}

type Refs<P> = Arc<Vec<GlobalRef<BspPlace<P>>>>;

fn address_failure(e: AddressError) -> ShmError {
    ShmError::Job(serde_json::to_string(&e).expect("address error serializes"))
}

/// Everything an agent activity needs, cheap to clone.
struct AgentRun<P: BspProgram> {
    program: Arc<P>,
    refs: Refs<P>,
    deliver: RemoteFn<(GlobalRef<BspPlace<P>>, u32, Incoming<P::Msg>), ()>,
    n_nodes: usize,
    per_node: usize,
}

impl<P: BspProgram> Clone for AgentRun<P> {
    fn clone(&self) -> Self {
        AgentRun {
            program: Arc::clone(&self.program),
            refs: Arc::clone(&self.refs),
            deliver: self.deliver.clone(),
            n_nodes: self.n_nodes,
            per_node: self.per_node,
        }
    }
}

impl<P: BspProgram> AgentRun<P> {
    fn run(&self, ctx: &Ctx, me: &BspPlace<P>, phase: u64, local: u32) -> Result<PhaseStats, ShmError> {
        let id = AgentId {
            node: ctx.place(),
            local_index: local,
        };
        let inbox = match phase {
            0 => Vec::new(),
            _ => ctx.atomic(|g| me.boxes.get(g).map(|b| b.read(local, phase - 1)))??,
        };
        let mut stats = PhaseStats::default();
        stats.tally(phase, &inbox);
        let mut out = Outbox::new(id, phase, self.n_nodes, self.per_node);
        {
            let mut state = me.agents[local as usize].lock();
            self.program
                .compute(id, &mut state, inbox, &mut out)
                .map_err(address_failure)?;
        }
        if out.stay_active {
            ctx.atomic(|g| me.boxes.get(g).map(|b| b.mark(phase + 1, local)))??;
        }
        for (to, body) in out.sent {
            let msg = Incoming { phase, from: id, body };
            ctx.at(to.node, &self.deliver, &(self.refs[to.node.index()], to.local_index, msg))?;
            stats.sent += 1;
        }
        Ok(stats)
    }
}

pub(super) struct ShmEngine<P: BspProgram> {
    rt: ShmRuntime,
    phase_fn: RemoteFn<(u64, bool), ()>,
    count_fn: RemoteFn<u64, ()>,
    collect_fn: RemoteFn<(), ()>,
    parallel: bool,
    completed: u64,
    _program: PhantomData<fn() -> P>,
}

impl<P: BspProgram> ShmEngine<P> {
    pub(super) fn start(
        program: Arc<P>,
        cluster: &Cluster,
        per_node: usize,
        initial: &[AgentId],
        parallel: bool,
    ) -> Result<Self, BspError> {
        let n = cluster.n_nodes();
        let rt = ShmRuntime::start(cluster.spec(), cluster.endpoints())?;
        let refs: Refs<P> = Arc::new(
            rt.places()
                .map(|p| {
                    let mut boxes = LocalInboxes::new(per_node, 1);
                    for a in initial.iter().filter(|a| a.node == p) {
                        boxes.mark(0, a.local_index);
                    }
                    let agents = (0..per_node)
                        .map(|l| Mutex::new(program.init(AgentId::new(p.index(), l))))
                        .collect();
                    rt.root(p).alloc(BspPlace::<P> {
                        boxes: Guarded::new(p, boxes),
                        agents,
                    })
                })
                .collect(),
        );

        let deliver = rt.register(
            "bsp/deliver",
            |ctx, (target, local, msg): (GlobalRef<BspPlace<P>>, u32, Incoming<P::Msg>)| {
                let place = ctx.deref(&target)?;
                ctx.atomic(|g| place.boxes.get(g).map(|b| b.deliver(local, msg)))?
            },
        )?;

        let run = AgentRun {
            program,
            refs: Arc::clone(&refs),
            deliver,
            n_nodes: n,
            per_node,
        };
        let phase_fn = rt.register("bsp/phase", move |ctx, (phase, parallel): (u64, bool)| {
            let me = ctx.deref(&run.refs[ctx.place().index()])?;
            let active = ctx.atomic(|g| me.boxes.get(g).map(|b| b.take_active(phase, 0)))??;
            if parallel {
                for local in active {
                    let run = run.clone();
                    let me = Arc::clone(&me);
                    ctx.async_local(move |ctx| {
                        let stats = run.run(ctx, &me, phase, local)?;
                        ctx.offer(&stats)
                    })?;
                }
                Ok(())
            } else {
                let mut total = PhaseStats::default();
                for local in active {
                    total = total.add(run.run(ctx, &me, phase, local)?);
                }
                ctx.offer(&total)
            }
        })?;

        let r = Arc::clone(&refs);
        let count_fn = rt.register("bsp/count", move |ctx, phase: u64| {
            let me = ctx.deref(&r[ctx.place().index()])?;
            let count = ctx.atomic(|g| {
                me.boxes.get(g).map(|b| BarrierCount {
                    stored: b.take_stored(phase),
                    activated: b.activated(phase + 1),
                })
            })??;
            ctx.offer(&count)
        })?;

        let r = Arc::clone(&refs);
        let collect_fn = rt.register("bsp/collect", move |ctx, ()| {
            let me = ctx.deref(&r[ctx.place().index()])?;
            let states: Vec<P::State> = me.agents.iter().map(|s| s.lock().clone()).collect();
            ctx.offer(&vec![(ctx.place(), states)])
        })?;

        Ok(ShmEngine {
            rt,
            phase_fn,
            count_fn,
            collect_fn,
            parallel,
            completed: 0,
            _program: PhantomData,
        })
    }

    /// Runs `f` at every place under one finish, folding the offers.
    fn everywhere<E, T>(&self, f: &RemoteFn<E, ()>, env: &E, reduce: impl Fn(T, T) -> T) -> Result<Option<T>, BspError>
    where
        E: serde::Serialize,
        T: serde::de::DeserializeOwned,
    {
        self.rt
            .root(NodeId(0))
            .finish_reduce(
                |ctx| {
                    for p in ctx.places() {
                        ctx.async_at(p, f, env)?;
                    }
                    Ok(())
                },
                reduce,
            )
            .map_err(|e| self.failure(e))
    }

    fn failure(&self, e: ShmError) -> BspError {
        let cap = |e: &ShmError| match e {
            ShmError::TooManyThreads { place, cap } => Some(BspError::TooManyThreads {
                completed_phases: self.completed,
                place: *place,
                cap: *cap,
            }),
            _ => None,
        };
        if let Some(b) = cap(&e).or_else(|| self.rt.aborted().and_then(|a| cap(&a))) {
            return b;
        }
        if let ShmError::Job(s) = &e {
            if let Ok(a) = serde_json::from_str::<AddressError>(s) {
                return BspError::Address(a);
            }
        }
        e.into()
    }
}

impl<P: BspProgram> Engine<P::State> for ShmEngine<P> {
    fn compute(&mut self, phase: u64) -> Result<PhaseStats, BspError> {
        let stats = self.everywhere(&self.phase_fn, &(phase, self.parallel), PhaseStats::add)?;
        Ok(stats.unwrap_or_default())
    }

    fn barrier(&mut self, phase: u64) -> Result<BarrierCount, BspError> {
        let count = self.everywhere(&self.count_fn, &phase, BarrierCount::add)?;
        self.completed = phase + 1;
        Ok(count.unwrap_or_default())
    }

    fn collect(&mut self) -> Result<Vec<Vec<P::State>>, BspError> {
        let mut all: Vec<(NodeId, Vec<P::State>)> = self
            .everywhere(&self.collect_fn, &(), |mut a: Vec<_>, b| {
                a.extend(b);
                a
            })?
            .unwrap_or_default();
        all.sort_by_key(|(p, _)| *p);
        self.rt.shutdown();
        Ok(all.into_iter().map(|(_, s)| s).collect())
    }
}
