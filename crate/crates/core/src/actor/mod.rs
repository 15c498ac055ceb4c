//! Message-passing runtime.
//!
//! Each node owns a registry of actors and a pool of worker threads. An actor
//! is a private state plus a handler; it is scheduled onto a worker only when
//! its mailbox is non-empty and it is not already running, so a handler never
//! runs concurrently with itself. Messages between actors of one node move by
//! value; messages to another node are serialized and carried by the node's
//! [`Transport`](crate::transport::Transport) on [`channel::ACTOR`].
//!
//! [`channel::ACTOR`]: crate::transport::channel::ACTOR

mod aggregator;
mod node;

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::transport::{Transport, TransportError};
use crate::types::NodeId;

use aggregator::Aggregator;
use node::Node;

pub const DEFAULT_ASK_TIMEOUT: Duration = Duration::from_secs(30);

/// Anything an actor can receive. Remote delivery needs serde.
pub trait ActorMessage: Serialize + DeserializeOwned + Send + 'static {}

impl<T: Serialize + DeserializeOwned + Send + 'static> ActorMessage for T {}

pub trait Actor<M: ActorMessage>: Send + 'static {
    fn receive(&mut self, ctx: &mut Context<'_, M>, msg: M);
}

impl<M, F> Actor<M> for F
where
    M: ActorMessage,
    F: FnMut(&mut Context<'_, M>, M) + Send + 'static,
{
    fn receive(&mut self, ctx: &mut Context<'_, M>, msg: M) {
        self(ctx, msg)
    }
}

/// Cluster-wide actor address: node plus slash-separated path.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ActorRef {
    pub node: NodeId,
    pub path: String,
}

impl ActorRef {
    pub fn new(node: NodeId, path: impl Into<String>) -> Self {
        ActorRef {
            node,
            path: path.into(),
        }
    }
}

impl fmt::Display for ActorRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.node, self.path)
    }
}

impl FromStr for ActorRef {
    type Err = ActorError;

    /// Parses `node<i>/<path>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ActorError::BadPath(s.to_string());
        let (node, path) = s.split_once('/').ok_or_else(bad)?;
        let idx: u32 = node.strip_prefix("node").ok_or_else(bad)?.parse().map_err(|_| bad())?;
        if path.is_empty() {
            return Err(bad());
        }
        Ok(ActorRef::new(NodeId(idx), path))
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ActorError {
    #[error("an actor already lives at {0}")]
    Spawn(ActorRef),
    #[error("no such node {0}")]
    UnknownNode(NodeId),
    #[error("malformed actor path {0:?}")]
    BadPath(String),
    #[error("ask needs at least one target")]
    NoTargets,
    #[error("aggregation timed out waiting for {}", fmt_refs(.missing))]
    AggregationTimeout { missing: Vec<ActorRef> },
    #[error("transport failure: {0}")]
    Transport(#[from] TransportError),
}

fn fmt_refs(refs: &[ActorRef]) -> String {
    refs.iter().map(|r| r.to_string()).collect::<Vec<_>>().join(", ")
}

impl ActorError {
    /// Nodes that did not answer, for aggregation timeouts.
    pub fn missing_nodes(&self) -> Vec<NodeId> {
        match self {
            ActorError::AggregationTimeout { missing } => {
                let mut n: Vec<_> = missing.iter().map(|r| r.node).collect();
                n.sort();
                n.dedup();
                n
            }
            _ => Vec::new(),
        }
    }
}

/// Handle passed to a handler for the duration of one message.
pub struct Context<'a, M: ActorMessage> {
    node: &'a Arc<Node<M>>,
    me: &'a ActorRef,
    sender: Option<ActorRef>,
    stop: bool,
}

impl<M: ActorMessage> Context<'_, M> {
    pub fn myself(&self) -> &ActorRef {
        self.me
    }

    pub fn node(&self) -> NodeId {
        self.node.id
    }

    pub fn sender(&self) -> Option<&ActorRef> {
        self.sender.as_ref()
    }

    /// Sends `msg` with this actor as the sender.
    pub fn tell(&self, target: &ActorRef, msg: M) {
        self.node.route(Some(self.me.clone()), target, msg);
    }

    /// Sends `msg` on behalf of `sender`, so replies go there.
    pub fn forward(&self, sender: Option<ActorRef>, target: &ActorRef, msg: M) {
        self.node.route(sender, target, msg);
    }

    /// Replies to the sender of the current message. Returns `false` (and
    /// counts a dead letter) when there is none.
    pub fn reply(&self, msg: M) -> bool {
        match &self.sender {
            Some(s) => {
                self.node.route(Some(self.me.clone()), s, msg);
                true
            }
            None => {
                self.node.dead_letter(self.me, "reply without sender");
                false
            }
        }
    }

    /// Spawns a child on this actor's node.
    pub fn spawn<A: Actor<M>>(&self, path: &str, actor: A) -> Result<ActorRef, ActorError> {
        self.node.spawn(path, Box::new(actor))
    }

    /// Stops this actor after the current message.
    pub fn stop(&mut self) {
        self.stop = true;
    }
}

/// One actor runtime per node, started over a set of transport endpoints.
pub struct ActorSystem<M: ActorMessage> {
    nodes: Vec<Arc<Node<M>>>,
    threads: Mutex<Vec<JoinHandle<()>>>,
    next_tmp: AtomicU64,
}

impl<M: ActorMessage> ActorSystem<M> {
    pub fn start(endpoints: &[Arc<dyn Transport>], workers_per_node: usize) -> Self {
        let nodes: Vec<Arc<Node<M>>> = endpoints
            .iter()
            .map(|t| Arc::new(Node::new(t.node(), Arc::clone(t))))
            .collect();
        let mut threads = Vec::new();
        for n in &nodes {
            threads.extend(Node::start_threads(n, workers_per_node.max(1)));
        }
        ActorSystem {
            nodes,
            threads: Mutex::new(threads),
            next_tmp: AtomicU64::new(0),
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn node(&self, id: NodeId) -> Result<&Arc<Node<M>>, ActorError> {
        self.nodes.get(id.index()).ok_or(ActorError::UnknownNode(id))
    }

    pub fn spawn<A: Actor<M>>(&self, node: NodeId, path: &str, actor: A) -> Result<ActorRef, ActorError> {
        self.node(node)?.spawn(path, Box::new(actor))
    }

    /// Resolves `node<i>/<path>` to a reference. The actor need not exist
    /// yet; messages to a missing actor become dead letters.
    pub fn resolve(&self, s: &str) -> Result<ActorRef, ActorError> {
        let r: ActorRef = s.parse()?;
        self.node(r.node)?;
        Ok(r)
    }

    /// Fire-and-forget send from outside any actor, issued from node 0.
    pub fn tell(&self, target: &ActorRef, msg: M) {
        self.nodes[0].route(None, target, msg);
    }

    pub fn tell_from(&self, sender: Option<ActorRef>, target: &ActorRef, msg: M) {
        self.nodes[0].route(sender, target, msg);
    }

    pub fn dead_letters(&self) -> u64 {
        self.nodes.iter().map(|n| n.dead_letters.load(Ordering::Relaxed)).sum()
    }

    /// First transport failure observed by any node.
    pub fn fault(&self) -> Option<TransportError> {
        self.nodes.iter().find_map(|n| n.fault())
    }

    /// Sends `msg` to every target through an aggregator actor on node 0 and
    /// returns one reply per target, in arrival order.
    pub fn ask_each(
        &self,
        targets: &[ActorRef],
        msg: M,
        timeout: Duration,
    ) -> Result<Vec<(ActorRef, M)>, ActorError>
    where
        M: Clone,
    {
        if targets.is_empty() {
            return Err(ActorError::NoTargets);
        }
        let id = self.next_tmp.fetch_add(1, Ordering::Relaxed);
        let (agg, done, replied) = Aggregator::new(targets);
        let agg_ref = self.nodes[0].spawn(&format!("$agg/{id}"), Box::new(agg))?;
        for t in targets {
            self.nodes[0].route(Some(agg_ref.clone()), t, msg.clone());
        }

        let deadline = Instant::now() + timeout;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                self.nodes[0].stop_path(&agg_ref.path);
                let replied = replied.lock();
                let missing = targets
                    .iter()
                    .filter(|t| !replied.contains(*t))
                    .cloned()
                    .collect();
                return Err(ActorError::AggregationTimeout { missing });
            }
            match done.recv_timeout(left.min(Duration::from_millis(50))) {
                Ok(replies) => return Ok(replies),
                Err(_) => {
                    if let Some(f) = self.fault() {
                        self.nodes[0].stop_path(&agg_ref.path);
                        return Err(ActorError::Transport(f));
                    }
                }
            }
        }
    }

    /// [`ask_each`](Self::ask_each) followed by a fold over the replies.
    /// `fold` must be associative and commutative.
    pub fn ask_all<F>(
        &self,
        targets: &[ActorRef],
        msg: M,
        fold: F,
        timeout: Duration,
    ) -> Result<M, ActorError>
    where
        M: Clone,
        F: Fn(M, M) -> M,
    {
        let replies = self.ask_each(targets, msg, timeout)?;
        Ok(replies
            .into_iter()
            .map(|(_, m)| m)
            .reduce(fold)
            .expect("at least one reply"))
    }

    pub fn shutdown(&self) {
        for n in &self.nodes {
            n.begin_shutdown();
        }
        for h in self.threads.lock().drain(..) {
            let _ = h.join();
        }
        for n in &self.nodes {
            n.clear();
        }
    }
}

impl<M: ActorMessage> Drop for ActorSystem<M> {
    fn drop(&mut self) {
        self.shutdown();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn actor_ref_parses_and_prints() {
        let r: ActorRef = "node3/dist-array".parse().unwrap();
        assert_eq!(r, ActorRef::new(NodeId(3), "dist-array"));
        assert_eq!(r.to_string(), "node3/dist-array");
        let nested: ActorRef = "node0/mr/worker".parse().unwrap();
        assert_eq!(nested.path, "mr/worker");
        assert!("3/dist-array".parse::<ActorRef>().is_err());
        assert!("node3/".parse::<ActorRef>().is_err());
        assert!("nodeX/a".parse::<ActorRef>().is_err());
    }

    #[test]
    fn timeout_error_names_nodes() {
        let e = ActorError::AggregationTimeout {
            missing: vec![
                ActorRef::new(NodeId(2), "a"),
                ActorRef::new(NodeId(2), "b"),
                ActorRef::new(NodeId(0), "c"),
            ],
        };
        assert_eq!(e.missing_nodes(), vec![NodeId(0), NodeId(2)]);
        assert!(e.to_string().contains("node2/a"));
    }
}
