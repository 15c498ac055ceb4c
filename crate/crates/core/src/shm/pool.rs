use std::cell::RefCell;
use std::collections::VecDeque;
use std::sync::Arc;
use std::thread::{self, JoinHandle};

use parking_lot::{Condvar, Mutex};

use super::{Abort, ShmError};
use crate::types::NodeId;

pub(crate) type Job = Box<dyn FnOnce() + Send>;

thread_local! {
    static CURRENT: RefCell<Option<Arc<Pool>>> = const { RefCell::new(None) };
}

/// Pool the calling thread works for, if it is a pool worker.
pub(crate) fn current() -> Option<Arc<Pool>> {
    CURRENT.with(|c| c.borrow().clone())
}

struct State {
    queue: VecDeque<Job>,
    /// Running plus parked worker threads.
    live: usize,
    parked: usize,
    max_live: usize,
    spawned: usize,
    shutdown: bool,
}

/// Per-place worker pool with block-and-replace parking.
///
/// A worker that must block inside an atomic section parks: the pool spawns
/// a replacement first so the place keeps `workers` running threads. Live
/// threads (running and parked) never exceed `cap`; a park that would need
/// one more aborts the run with [`ShmError::TooManyThreads`]. Surplus
/// workers retire once their parked peers resume.
pub(crate) struct Pool {
    place: NodeId,
    workers: usize,
    cap: usize,
    state: Mutex<State>,
    work: Condvar,
    abort: Arc<Abort>,
    threads: Mutex<Vec<JoinHandle<()>>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PoolStats {
    pub live: usize,
    pub parked: usize,
    pub max_live: usize,
    pub spawned: usize,
    pub queued: usize,
}

impl Pool {
    pub(crate) fn start(place: NodeId, workers: usize, cap: usize, abort: Arc<Abort>) -> Arc<Self> {
        let pool = Arc::new(Pool {
            place,
            workers,
            cap,
            state: Mutex::new(State {
                queue: VecDeque::new(),
                live: 0,
                parked: 0,
                max_live: 0,
                spawned: 0,
                shutdown: false,
            }),
            work: Condvar::new(),
            abort,
            threads: Mutex::new(Vec::new()),
        });
        {
            let mut s = pool.state.lock();
            for _ in 0..workers {
                pool.spawn_worker(&mut s)
                    .expect("initial pool workers");
            }
        }
        pool
    }

    fn spawn_worker(self: &Arc<Self>, s: &mut State) -> std::io::Result<()> {
        let me = Arc::clone(self);
        let h = thread::Builder::new()
            .name(format!("place{}-w{}", self.place.0, s.spawned))
            .spawn(move || me.worker_loop())?;
        s.live += 1;
        s.spawned += 1;
        s.max_live = s.max_live.max(s.live);
        self.threads.lock().push(h);
        Ok(())
    }

    pub(crate) fn submit(&self, job: Job) {
        self.state.lock().queue.push_back(job);
        self.work.notify_one();
    }

    pub(crate) fn try_pop(&self) -> Option<Job> {
        self.state.lock().queue.pop_front()
    }

    fn worker_loop(self: Arc<Self>) {
        CURRENT.with(|c| *c.borrow_mut() = Some(Arc::clone(&self)));
        let mut s = self.state.lock();
        loop {
            if s.shutdown || s.live - s.parked > self.workers {
                s.live -= 1;
                break;
            }
            if let Some(job) = s.queue.pop_front() {
                drop(s);
                job();
                s = self.state.lock();
                continue;
            }
            self.work.wait(&mut s);
        }
        drop(s);
        CURRENT.with(|c| *c.borrow_mut() = None);
    }

    /// Called by a worker about to block. Spawns its replacement or aborts
    /// the run when the cap is reached.
    pub(crate) fn park(self: &Arc<Self>) -> Result<(), ShmError> {
        let mut s = self.state.lock();
        let exhausted = ShmError::TooManyThreads {
            place: self.place,
            cap: self.cap,
        };
        if s.live >= self.cap {
            drop(s);
            log::warn!("{}: too many threads (cap {})", self.place, self.cap);
            self.abort.raise(exhausted.clone());
            return Err(exhausted);
        }
        if self.spawn_worker(&mut s).is_err() {
            drop(s);
            self.abort.raise(exhausted.clone());
            return Err(exhausted);
        }
        s.parked += 1;
        Ok(())
    }

    pub(crate) fn unpark(&self) {
        self.state.lock().parked -= 1;
    }

    pub(crate) fn stats(&self) -> PoolStats {
        let s = self.state.lock();
        PoolStats {
            live: s.live,
            parked: s.parked,
            max_live: s.max_live,
            spawned: s.spawned,
            queued: s.queue.len(),
        }
    }

    pub(crate) fn shutdown(&self) {
        {
            let mut s = self.state.lock();
            s.shutdown = true;
            s.queue.clear();
        }
        self.work.notify_all();
        let me = thread::current().id();
        let handles: Vec<_> = self.threads.lock().drain(..).collect();
        for h in handles {
            if h.thread().id() != me {
                let _ = h.join();
            }
        }
    }
}
