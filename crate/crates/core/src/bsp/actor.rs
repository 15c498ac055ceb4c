//! Actor backend: per node one inbox actor plus one host actor per worker.
//! Agents are sharded over hosts by `local_index mod hosts`. Every delivery
//! batch is acknowledged by the recipient's inbox before the sending host
//! reports its compute step done.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{
    AckFault, BarrierCount, BspError, BspOptions, BspProgram, Engine, Incoming, LocalInboxes, Outbox, PhaseStats,
};
use crate::actor::{Actor, ActorError, ActorRef, ActorSystem, Context};
use crate::cluster::Cluster;
use crate::types::{AddressError, AgentId, NodeId};

#[derive(Clone, Serialize, Deserialize)]
enum Msg<S, M> {
    Compute { phase: u64 },
    Take { phase: u64, shard: usize },
    Taken { agents: Vec<(u32, Vec<Incoming<M>>)> },
    Deliver { batch: Vec<(u32, Incoming<M>)> },
    Activate { phase: u64, locals: Vec<u32> },
    Ack,
    Done(PhaseStats),
    Failed(AddressError),
    Count { phase: u64 },
    Counted(BarrierCount),
    Collect,
    States(Vec<(u32, S)>),
}

type ProgMsg<P> = Msg<<P as BspProgram>::State, <P as BspProgram>::Msg>;

struct Inbox<M> {
    node: NodeId,
    boxes: LocalInboxes<M>,
    fault: Option<AckFault>,
}

impl<S: crate::types::Data, M: crate::types::Data> Actor<Msg<S, M>> for Inbox<M> {
    fn receive(&mut self, ctx: &mut Context<'_, Msg<S, M>>, msg: Msg<S, M>) {
        match msg {
            Msg::Take { phase, shard } => {
                let agents = self
                    .boxes
                    .take_active(phase, shard)
                    .into_iter()
                    .map(|l| {
                        let inbox = match phase {
                            0 => Vec::new(),
                            _ => self.boxes.read(l, phase - 1),
                        };
                        (l, inbox)
                    })
                    .collect();
                ctx.reply(Msg::Taken { agents });
            }
            Msg::Deliver { batch } => {
                let phase = batch.first().map(|(_, m)| m.phase);
                for (l, m) in batch {
                    self.boxes.deliver(l, m);
                }
                if let (Some(f), Some(p)) = (self.fault, phase) {
                    if f.node == self.node && f.phase == p {
                        self.fault = None;
                        log::warn!("{}: dropping ack for phase {p}", self.node);
                        return;
                    }
                }
                ctx.reply(Msg::Ack);
            }
            Msg::Activate { phase, locals } => {
                for l in locals {
                    self.boxes.mark(phase + 1, l);
                }
                ctx.reply(Msg::Ack);
            }
            Msg::Count { phase } => {
                ctx.reply(Msg::Counted(BarrierCount {
                    stored: self.boxes.take_stored(phase),
                    activated: self.boxes.activated(phase + 1),
                }));
            }
            _ => log::warn!("{}: unexpected message", ctx.myself()),
        }
    }
}

struct Host<P: BspProgram> {
    program: Arc<P>,
    node: NodeId,
    shard: usize,
    n_nodes: usize,
    per_node: usize,
    inboxes: Vec<ActorRef>,
    states: BTreeMap<u32, P::State>,
    waiter: Option<ActorRef>,
    phase: u64,
    pending: usize,
    stats: PhaseStats,
}

impl<P: BspProgram> Host<P> {
    fn run(&mut self, ctx: &mut Context<'_, ProgMsg<P>>, agents: Vec<(u32, Vec<Incoming<P::Msg>>)>) {
        let mut batches: BTreeMap<NodeId, Vec<(u32, Incoming<P::Msg>)>> = BTreeMap::new();
        let mut keep = Vec::new();
        for (local, inbox) in agents {
            let id = AgentId {
                node: self.node,
                local_index: local,
            };
            self.stats.tally(self.phase, &inbox);
            let mut out = Outbox::new(id, self.phase, self.n_nodes, self.per_node);
            let state = self.states.get_mut(&local).expect("agent owned by this host");
            if let Err(e) = self.program.compute(id, state, inbox, &mut out) {
                if let Some(w) = self.waiter.take() {
                    ctx.tell(&w, Msg::Failed(e));
                }
                return;
            }
            if out.stay_active {
                keep.push(local);
            }
            for (to, body) in out.sent {
                batches.entry(to.node).or_default().push((
                    to.local_index,
                    Incoming {
                        phase: self.phase,
                        from: id,
                        body,
                    },
                ));
            }
        }
        for (node, batch) in batches {
            self.stats.sent += batch.len() as u64;
            self.pending += 1;
            ctx.tell(&self.inboxes[node.index()], Msg::Deliver { batch });
        }
        if !keep.is_empty() {
            self.pending += 1;
            ctx.tell(
                &self.inboxes[self.node.index()],
                Msg::Activate {
                    phase: self.phase,
                    locals: keep,
                },
            );
        }
        self.maybe_done(ctx);
    }

    fn maybe_done(&mut self, ctx: &mut Context<'_, ProgMsg<P>>) {
        if self.pending == 0 {
            if let Some(w) = self.waiter.take() {
                ctx.tell(&w, Msg::Done(self.stats));
            }
        }
    }
}

impl<P: BspProgram> Actor<ProgMsg<P>> for Host<P> {
    fn receive(&mut self, ctx: &mut Context<'_, ProgMsg<P>>, msg: ProgMsg<P>) {
        match msg {
            Msg::Compute { phase } => {
                self.waiter = ctx.sender().cloned();
                self.phase = phase;
                self.pending = 0;
                self.stats = PhaseStats::default();
                ctx.tell(
                    &self.inboxes[self.node.index()],
                    Msg::Take {
                        phase,
                        shard: self.shard,
                    },
                );
            }
            Msg::Taken { agents } => self.run(ctx, agents),
            Msg::Ack => {
                self.pending = self.pending.saturating_sub(1);
                self.maybe_done(ctx);
            }
            Msg::Collect => {
                let states = std::mem::take(&mut self.states).into_iter().collect();
                ctx.reply(Msg::States(states));
            }
            _ => log::warn!("{}: unexpected message", ctx.myself()),
        }
    }
}

pub(super) struct ActorEngine<P: BspProgram> {
    sys: ActorSystem<ProgMsg<P>>,
    hosts: Vec<ActorRef>,
    inboxes: Vec<ActorRef>,
    n_nodes: usize,
    per_node: usize,
    timeout: Duration,
}

impl<P: BspProgram> ActorEngine<P> {
    pub(super) fn start(
        program: Arc<P>,
        cluster: &Cluster,
        per_node: usize,
        initial: &[AgentId],
        opts: &BspOptions,
    ) -> Result<Self, BspError> {
        let n = cluster.n_nodes();
        let shards = cluster.spec().workers_per_node.max(1);
        let sys: ActorSystem<ProgMsg<P>> = ActorSystem::start(cluster.endpoints(), shards);
        let inboxes: Vec<ActorRef> = cluster.nodes().map(|p| ActorRef::new(p, "bsp/inbox")).collect();
        let mut hosts = Vec::new();
        for p in cluster.nodes() {
            let mut boxes = LocalInboxes::new(per_node, shards);
            for a in initial.iter().filter(|a| a.node == p) {
                boxes.mark(0, a.local_index);
            }
            sys.spawn(
                p,
                "bsp/inbox",
                Inbox {
                    node: p,
                    boxes,
                    fault: opts.ack_fault,
                },
            )?;
            for shard in 0..shards {
                let states = (0..per_node as u32)
                    .filter(|l| *l as usize % shards == shard)
                    .map(|l| {
                        let id = AgentId {
                            node: p,
                            local_index: l,
                        };
                        (l, program.init(id))
                    })
                    .collect();
                hosts.push(sys.spawn(
                    p,
                    &format!("bsp/host/{shard}"),
                    Host {
                        program: Arc::clone(&program),
                        node: p,
                        shard,
                        n_nodes: n,
                        per_node,
                        inboxes: inboxes.clone(),
                        states,
                        waiter: None,
                        phase: 0,
                        pending: 0,
                        stats: PhaseStats::default(),
                    },
                )?);
            }
        }
        Ok(ActorEngine {
            sys,
            hosts,
            inboxes,
            n_nodes: n,
            per_node,
            timeout: opts.barrier_timeout,
        })
    }

    fn ask(&self, targets: &[ActorRef], msg: ProgMsg<P>, phase: u64) -> Result<Vec<ProgMsg<P>>, BspError> {
        match self.sys.ask_each(targets, msg, self.timeout) {
            Ok(r) => Ok(r.into_iter().map(|(_, m)| m).collect()),
            Err(ActorError::AggregationTimeout { missing }) => {
                let mut unconfirmed: Vec<NodeId> = missing.iter().map(|r| r.node).collect();
                unconfirmed.dedup();
                Err(BspError::Barrier { phase, unconfirmed })
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl<P: BspProgram> Engine<P::State> for ActorEngine<P> {
    fn compute(&mut self, phase: u64) -> Result<PhaseStats, BspError> {
        let mut total = PhaseStats::default();
        for m in self.ask(&self.hosts, Msg::Compute { phase }, phase)? {
            match m {
                Msg::Done(s) => total = total.add(s),
                Msg::Failed(e) => return Err(e.into()),
                _ => return Err(BspError::Protocol("unexpected compute reply".into())),
            }
        }
        Ok(total)
    }

    fn barrier(&mut self, phase: u64) -> Result<BarrierCount, BspError> {
        let mut total = BarrierCount::default();
        for m in self.ask(&self.inboxes, Msg::Count { phase }, phase)? {
            match m {
                Msg::Counted(c) => total = total.add(c),
                _ => return Err(BspError::Protocol("unexpected barrier reply".into())),
            }
        }
        Ok(total)
    }

    fn collect(&mut self) -> Result<Vec<Vec<P::State>>, BspError> {
        let replies = self.sys.ask_each(&self.hosts, Msg::Collect, self.timeout)?;
        let mut states: Vec<Vec<Option<P::State>>> = (0..self.n_nodes).map(|_| vec![None; self.per_node]).collect();
        for (host, m) in replies {
            if let Msg::States(list) = m {
                for (l, s) in list {
                    states[host.node.index()][l as usize] = Some(s);
                }
            }
        }
        self.sys.shutdown();
        states
            .into_iter()
            .map(|node| node.into_iter().collect::<Option<Vec<_>>>())
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| BspError::Protocol("missing agent state".into()))
    }
}
