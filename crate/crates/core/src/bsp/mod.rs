//! BSP engine: phases of local compute, message exchange and a global
//! barrier, until no agent is active or the stop criterion holds.
//!
//! A message sent in phase `S` is stored in the recipient's inbox buffer
//! `S mod 2`, marks the recipient active for `S + 1`, and is read (and
//! removed) by the recipient's compute in `S + 1`.

mod actor;
mod inbox;
mod shm;

use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actor::ActorError;
use crate::cluster::Cluster;
use crate::shm::ShmError;
use crate::types::{check_agent, AddressError, AgentId, Backend, Data, NodeId};

pub use inbox::{LocalInboxes, PhaseInbox};

/// A message as the recipient reads it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Incoming<M> {
    /// Phase in which the message was sent.
    pub phase: u64,
    pub from: AgentId,
    pub body: M,
}

/// Messages emitted by one compute invocation.
pub struct Outbox<M> {
    from: AgentId,
    phase: u64,
    n_nodes: usize,
    per_node: usize,
    sent: Vec<(AgentId, M)>,
    stay_active: bool,
}

impl<M> Outbox<M> {
    fn new(from: AgentId, phase: u64, n_nodes: usize, per_node: usize) -> Self {
        Outbox {
            from,
            phase,
            n_nodes,
            per_node,
            sent: Vec::new(),
            stay_active: false,
        }
    }

    pub fn phase(&self) -> u64 {
        self.phase
    }

    pub fn sender(&self) -> AgentId {
        self.from
    }

    /// Queues `body` for `to`, readable there in the next phase.
    pub fn send(&mut self, to: AgentId, body: M) -> Result<(), AddressError> {
        check_agent(to, self.n_nodes, self.per_node)?;
        self.sent.push((to, body));
        Ok(())
    }

    /// Keeps the sending agent active for the next phase.
    pub fn stay_active(&mut self) {
        self.stay_active = true;
    }
}

/// Agent behaviour. Agents deactivate after every compute unless they
/// receive a message or call [`Outbox::stay_active`].
pub trait BspProgram: Send + Sync + 'static {
    type State: Data;
    type Msg: Data;

    fn init(&self, id: AgentId) -> Self::State;

    fn compute(
        &self,
        id: AgentId,
        state: &mut Self::State,
        inbox: Vec<Incoming<Self::Msg>>,
        out: &mut Outbox<Self::Msg>,
    ) -> Result<(), AddressError>;
}

/// `(phase, global active count) -> stop`.
pub type StopFn = Arc<dyn Fn(u64, u64) -> bool + Send + Sync>;

pub struct BspJob<P> {
    pub program: P,
    pub agents_per_node: usize,
    pub initially_active: Vec<AgentId>,
    pub stop: Option<StopFn>,
    pub max_phases: Option<u64>,
}

impl<P: BspProgram> BspJob<P> {
    pub fn new(program: P, agents_per_node: usize, initially_active: Vec<AgentId>) -> Self {
        BspJob {
            program,
            agents_per_node,
            initially_active,
            stop: None,
            max_phases: None,
        }
    }

    pub fn with_stop(mut self, stop: impl Fn(u64, u64) -> bool + Send + Sync + 'static) -> Self {
        self.stop = Some(Arc::new(stop));
        self
    }

    pub fn with_max_phases(mut self, max: u64) -> Self {
        self.max_phases = Some(max);
        self
    }
}

/// Drops the acknowledgement of the first delivery batch stored at `node`
/// in `phase`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AckFault {
    pub node: NodeId,
    pub phase: u64,
}

#[derive(Clone, Debug)]
pub struct BspOptions {
    pub barrier_timeout: Duration,
    pub ack_fault: Option<AckFault>,
}

impl Default for BspOptions {
    fn default() -> Self {
        BspOptions {
            barrier_timeout: Duration::from_secs(120),
            ack_fault: None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    pub phase: u64,
    /// Agents that computed in this phase.
    pub active_before: u64,
    pub messages_sent: u64,
    /// Messages stored in inboxes during this phase.
    pub messages_received: u64,
    /// Messages sent in the previous phase and read in this one.
    pub messages_read: u64,
    /// Messages read here that were not sent in the previous phase.
    pub stale_reads: u64,
    /// Agents activated for the next phase.
    pub activated: u64,
    pub duration_s: f64,
}

#[derive(Clone, Debug)]
pub struct BspOutput<S> {
    /// Final agent states, `states[node][local_index]`.
    pub states: Vec<Vec<S>>,
    pub reports: Vec<PhaseReport>,
    pub wall: Duration,
}

impl<S> BspOutput<S> {
    /// Number of phases executed.
    pub fn phases(&self) -> u64 {
        self.reports.len() as u64
    }

    pub fn state(&self, id: AgentId) -> &S {
        &self.states[id.node.index()][id.local_index as usize]
    }

    /// One JSON object per phase and line.
    pub fn report_lines(&self) -> String {
        self.reports
            .iter()
            .map(|r| serde_json::to_string(r).expect("report serializes") + "\n")
            .collect()
    }

    /// Per phase: sent = stored = read in the next phase, and nothing stale.
    pub fn conserved(&self) -> bool {
        self.reports.iter().enumerate().all(|(i, r)| {
            let read_next = self.reports.get(i + 1).map_or(r.messages_sent, |n| n.messages_read);
            r.messages_sent == r.messages_received && r.messages_received == read_next && r.stale_reads == 0
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BspError {
    #[error(transparent)]
    Address(#[from] AddressError),
    #[error("barrier of phase {phase} not confirmed by {unconfirmed:?}")]
    Barrier { phase: u64, unconfirmed: Vec<NodeId> },
    #[error("too many threads at {place} (cap {cap}) after {completed_phases} phases")]
    TooManyThreads { completed_phases: u64, place: NodeId, cap: usize },
    #[error("still active after {max_phases} phases")]
    MaxPhasesExceeded { max_phases: u64 },
    #[error(transparent)]
    Actor(#[from] ActorError),
    #[error(transparent)]
    Shm(#[from] ShmError),
    #[error("{0}")]
    Protocol(String),
}

/// Work done by the compute step on one node or agent.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
struct PhaseStats {
    active: u64,
    sent: u64,
    read: u64,
    stale: u64,
}

impl PhaseStats {
    fn add(self, o: PhaseStats) -> PhaseStats {
        PhaseStats {
            active: self.active + o.active,
            sent: self.sent + o.sent,
            read: self.read + o.read,
            stale: self.stale + o.stale,
        }
    }

    fn tally<M>(&mut self, phase: u64, inbox: &[Incoming<M>]) {
        self.active += 1;
        self.read += inbox.len() as u64;
        self.stale += inbox.iter().filter(|m| m.phase + 1 != phase).count() as u64;
    }
}

/// What the barrier sums over nodes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
struct BarrierCount {
    stored: u64,
    activated: u64,
}

impl BarrierCount {
    fn add(self, o: BarrierCount) -> BarrierCount {
        BarrierCount {
            stored: self.stored + o.stored,
            activated: self.activated + o.activated,
        }
    }
}

/// One backend's realization of the three phase steps.
trait Engine<S> {
    /// Compute on every active agent and deliver what they send.
    fn compute(&mut self, phase: u64) -> Result<PhaseStats, BspError>;
    /// Waits for every node and returns the global counts.
    fn barrier(&mut self, phase: u64) -> Result<BarrierCount, BspError>;
    fn collect(&mut self) -> Result<Vec<Vec<S>>, BspError>;
}

/// Runs `job` on `cluster` until no agent is active, the stop criterion
/// holds, or `max_phases` is exceeded.
pub fn run_bsp<P: BspProgram>(
    job: BspJob<P>,
    cluster: &Cluster,
    backend: Backend,
    opts: &BspOptions,
) -> Result<BspOutput<P::State>, BspError> {
    let n = cluster.n_nodes();
    let per_node = job.agents_per_node;
    let mut initial = job.initially_active.clone();
    for a in &initial {
        check_agent(*a, n, per_node)?;
    }
    initial.sort();
    initial.dedup();

    let start = Instant::now();
    let program = Arc::new(job.program);
    match backend {
        Backend::Actor => {
            let mut e = actor::ActorEngine::start(program, cluster, per_node, &initial, opts)?;
            let reports = drive(&mut e, initial.len() as u64, job.stop.as_ref(), job.max_phases);
            finish(&mut e, reports, start)
        }
        Backend::SharedMemoryParallel | Backend::SharedMemorySequential => {
            let parallel = backend == Backend::SharedMemoryParallel;
            let mut e = shm::ShmEngine::start(program, cluster, per_node, &initial, parallel)?;
            let reports = drive(&mut e, initial.len() as u64, job.stop.as_ref(), job.max_phases);
            finish(&mut e, reports, start)
        }
    }
}

fn finish<S, E: Engine<S>>(
    e: &mut E,
    reports: Result<Vec<PhaseReport>, BspError>,
    start: Instant,
) -> Result<BspOutput<S>, BspError> {
    let reports = reports?;
    let states = e.collect()?;
    Ok(BspOutput {
        states,
        reports,
        wall: start.elapsed(),
    })
}

fn drive<S, E: Engine<S>>(
    e: &mut E,
    mut active: u64,
    stop: Option<&StopFn>,
    max_phases: Option<u64>,
) -> Result<Vec<PhaseReport>, BspError> {
    let mut reports = Vec::new();
    let mut phase = 0;
    loop {
        if active == 0 || stop.is_some_and(|f| f(phase, active)) {
            return Ok(reports);
        }
        if let Some(max) = max_phases.filter(|m| phase >= *m) {
            return Err(BspError::MaxPhasesExceeded { max_phases: max });
        }
        let t = Instant::now();
        let stats = e.compute(phase)?;
        let count = e.barrier(phase)?;
        reports.push(PhaseReport {
            phase,
            active_before: stats.active,
            messages_sent: stats.sent,
            messages_received: count.stored,
            messages_read: stats.read,
            stale_reads: stats.stale,
            activated: count.activated,
            duration_s: t.elapsed().as_secs_f64(),
        });
        log::debug!("phase {phase}: {stats:?} {count:?}");
        active = count.activated;
        phase += 1;
    }
}
