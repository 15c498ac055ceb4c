use std::collections::{HashMap, VecDeque};
use std::panic::{self, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use crossbeam_deque::{Injector, Steal, Stealer, Worker};
use parking_lot::{Condvar, Mutex, RwLock};

use super::{Actor, ActorError, ActorMessage, ActorRef, Context};
use crate::transport::{channel, Transport, TransportError};
use crate::types::NodeId;

/// Messages handled per scheduling turn before the actor yields its worker.
const THROUGHPUT: usize = 64;
const RECV_POLL: Duration = Duration::from_millis(20);

struct Envelope<M> {
    sender: Option<ActorRef>,
    msg: M,
}

pub(super) struct Cell<M: ActorMessage> {
    me: ActorRef,
    mailbox: Mutex<VecDeque<Envelope<M>>>,
    scheduled: AtomicBool,
    stopped: AtomicBool,
    behavior: Mutex<Box<dyn Actor<M>>>,
}

pub(super) struct Node<M: ActorMessage> {
    pub(super) id: NodeId,
    actors: RwLock<HashMap<String, Arc<Cell<M>>>>,
    injector: Injector<Arc<Cell<M>>>,
    stealers: RwLock<Vec<Stealer<Arc<Cell<M>>>>>,
    sleep: Mutex<()>,
    wake: Condvar,
    transport: Arc<dyn Transport>,
    pub(super) dead_letters: AtomicU64,
    fault: Mutex<Option<TransportError>>,
    shutdown: AtomicBool,
}

impl<M: ActorMessage> Node<M> {
    pub(super) fn new(id: NodeId, transport: Arc<dyn Transport>) -> Self {
        Node {
            id,
            actors: RwLock::new(HashMap::new()),
            injector: Injector::new(),
            stealers: RwLock::new(Vec::new()),
            sleep: Mutex::new(()),
            wake: Condvar::new(),
            transport,
            dead_letters: AtomicU64::new(0),
            fault: Mutex::new(None),
            shutdown: AtomicBool::new(false),
        }
    }

    pub(super) fn start_threads(node: &Arc<Self>, workers: usize) -> Vec<JoinHandle<()>> {
        let locals: Vec<Worker<Arc<Cell<M>>>> = (0..workers).map(|_| Worker::new_fifo()).collect();
        *node.stealers.write() = locals.iter().map(|w| w.stealer()).collect();
        let mut handles: Vec<JoinHandle<()>> = locals
            .into_iter()
            .enumerate()
            .map(|(i, local)| {
                let node = Arc::clone(node);
                thread::Builder::new()
                    .name(format!("actor-{}-w{i}", node.id.0))
                    .spawn(move || node.worker_loop(local))
                    .expect("spawn actor worker")
            })
            .collect();
        let n = Arc::clone(node);
        handles.push(
            thread::Builder::new()
                .name(format!("actor-{}-recv", node.id.0))
                .spawn(move || n.receive_loop())
                .expect("spawn actor receiver"),
        );
        handles
    }

    pub(super) fn fault(&self) -> Option<TransportError> {
        self.fault.lock().clone()
    }

    fn set_fault(&self, e: TransportError) {
        let mut f = self.fault.lock();
        if f.is_none() {
            log::error!("{}: actor transport fault: {e}", self.id);
            *f = Some(e);
        }
    }

    pub(super) fn spawn(&self, path: &str, behavior: Box<dyn Actor<M>>) -> Result<ActorRef, ActorError> {
        let me = ActorRef::new(self.id, path);
        if path.is_empty() {
            return Err(ActorError::BadPath(path.to_string()));
        }
        let mut actors = self.actors.write();
        if actors.contains_key(path) {
            return Err(ActorError::Spawn(me));
        }
        actors.insert(
            path.to_string(),
            Arc::new(Cell {
                me: me.clone(),
                mailbox: Mutex::new(VecDeque::new()),
                scheduled: AtomicBool::new(false),
                stopped: AtomicBool::new(false),
                behavior: Mutex::new(behavior),
            }),
        );
        Ok(me)
    }

    pub(super) fn dead_letter(&self, target: &ActorRef, why: &str) {
        self.dead_letters.fetch_add(1, Ordering::Relaxed);
        log::debug!("{}: dead letter to {target}: {why}", self.id);
    }

    /// Local delivery skips serialization; remote delivery goes through the
    /// transport.
    pub(super) fn route(&self, sender: Option<ActorRef>, target: &ActorRef, msg: M) {
        if target.node == self.id {
            self.deliver_local(&target.path, Envelope { sender, msg });
            return;
        }
        let bytes = match bincode::serialize(&(&sender, &target.path, &msg)) {
            Ok(b) => b,
            Err(e) => {
                self.dead_letter(target, &format!("serialize: {e}"));
                return;
            }
        };
        if let Err(e) = self.transport.send(target.node, channel::ACTOR, None, &bytes) {
            self.dead_letter(target, &e.to_string());
            self.set_fault(e);
        }
    }

    fn deliver_local(&self, path: &str, env: Envelope<M>) {
        let cell = self.actors.read().get(path).cloned();
        let Some(cell) = cell else {
            self.dead_letter(&ActorRef::new(self.id, path), "no such actor");
            return;
        };
        if cell.stopped.load(Ordering::Acquire) {
            self.dead_letter(&cell.me, "actor stopped");
            return;
        }
        cell.mailbox.lock().push_back(env);
        if cell
            .scheduled
            .compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire)
            .is_ok()
        {
            self.schedule(cell);
        }
    }

    fn schedule(&self, cell: Arc<Cell<M>>) {
        self.injector.push(cell);
        let _g = self.sleep.lock();
        self.wake.notify_one();
    }

    pub(super) fn stop_path(&self, path: &str) {
        let cell = self.actors.write().remove(path);
        if let Some(cell) = cell {
            cell.stopped.store(true, Ordering::Release);
            let dropped = cell.mailbox.lock().drain(..).count();
            for _ in 0..dropped {
                self.dead_letter(&cell.me, "actor stopped");
            }
        }
    }

    fn find_task(&self, local: &Worker<Arc<Cell<M>>>) -> Option<Arc<Cell<M>>> {
        if let Some(t) = local.pop() {
            return Some(t);
        }
        loop {
            let mut retry = false;
            match self.injector.steal_batch_and_pop(local) {
                Steal::Success(t) => return Some(t),
                Steal::Retry => retry = true,
                Steal::Empty => {}
            }
            for s in self.stealers.read().iter() {
                match s.steal() {
                    Steal::Success(t) => return Some(t),
                    Steal::Retry => retry = true,
                    Steal::Empty => {}
                }
            }
            if !retry {
                return None;
            }
        }
    }

    fn worker_loop(self: Arc<Self>, local: Worker<Arc<Cell<M>>>) {
        loop {
            if let Some(cell) = self.find_task(&local) {
                self.run_cell(cell);
                continue;
            }
            if self.shutdown.load(Ordering::Acquire) {
                return;
            }
            let mut g = self.sleep.lock();
            if !self.injector.is_empty() || self.shutdown.load(Ordering::Acquire) {
                continue;
            }
            self.wake.wait_for(&mut g, Duration::from_millis(50));
        }
    }

    fn run_cell(self: &Arc<Self>, cell: Arc<Cell<M>>) {
        {
            let mut behavior = cell.behavior.lock();
            for _ in 0..THROUGHPUT {
                if cell.stopped.load(Ordering::Acquire) {
                    break;
                }
                let Some(env) = cell.mailbox.lock().pop_front() else {
                    break;
                };
                let mut ctx = Context {
                    node: self,
                    me: &cell.me,
                    sender: env.sender,
                    stop: false,
                };
                let msg = env.msg;
                let outcome =
                    panic::catch_unwind(AssertUnwindSafe(|| behavior.receive(&mut ctx, msg)));
                let stop = ctx.stop;
                if outcome.is_err() {
                    log::error!("{}: handler panicked, stopping actor", cell.me);
                    self.stop_path(&cell.me.path);
                    break;
                }
                if stop {
                    self.stop_path(&cell.me.path);
                    break;
                }
            }
        }
        cell.scheduled.store(false, Ordering::Release);
        if !cell.stopped.load(Ordering::Acquire)
            && !cell.mailbox.lock().is_empty()
            && cell
                .scheduled
                .compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire)
                .is_ok()
        {
            self.schedule(cell);
        }
    }

    fn receive_loop(self: Arc<Self>) {
        while !self.shutdown.load(Ordering::Acquire) {
            match self.transport.recv(channel::ACTOR, RECV_POLL) {
                Ok(m) => {
                    match bincode::deserialize::<(Option<ActorRef>, String, M)>(&m.payload) {
                        Ok((sender, path, msg)) => self.deliver_local(&path, Envelope { sender, msg }),
                        Err(e) => {
                            self.dead_letters.fetch_add(1, Ordering::Relaxed);
                            log::warn!("{}: undecodable actor message from {}: {e}", self.id, m.src);
                        }
                    }
                }
                Err(TransportError::Timeout) => {}
                Err(TransportError::Closed) => return,
                Err(e) => {
                    self.set_fault(e);
                    return;
                }
            }
        }
    }

    pub(super) fn begin_shutdown(&self) {
        self.shutdown.store(true, Ordering::Release);
        let _g = self.sleep.lock();
        self.wake.notify_all();
    }

    pub(super) fn clear(&self) {
        self.actors.write().clear();
    }
}
