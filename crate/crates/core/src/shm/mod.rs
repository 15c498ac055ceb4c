//! Place-based shared-memory runtime.
//!
//! The cluster is a set of places, each with its own heap, a place-wide
//! atomic lock and a bounded worker pool. Code moves between places with
//! `at` (synchronous) and `async_at` (fire an activity at another place);
//! `finish` waits for every activity spawned inside it, wherever it ran.
//! Objects are reached through [`GlobalRef`]s, which only dereference at
//! their home place.
//!
//! Code that runs at another place must be registered up front as a
//! [`RemoteFn`]; only its captured environment travels, always serialized.
//! With [`TransportKind::InProcess`] the closure then runs inline on the
//! caller's thread with the place switched. With [`TransportKind::Tcp`] the
//! request travels over [`channel::REMOTE_EXEC`] to the target place, whose
//! pool runs it.

mod dist;
mod finish;
mod pool;

use std::any::Any;
use std::cell::{Cell, UnsafeCell};
use std::collections::HashMap;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::marker::PhantomData;
use std::panic::{self, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Weak};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use crossbeam_channel::{Receiver, RecvTimeoutError, Sender};
use parking_lot::{Mutex, MutexGuard, RwLock};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::transport::{channel, Transport, TransportError};
use crate::types::{ClusterSpec, NodeId, TransportKind};

pub use dist::{DistArray, DistSlice};
pub use pool::PoolStats;

use finish::FinishState;
use pool::Pool;

const POLL: Duration = Duration::from_millis(20);
const REPLY_SLICE: Duration = Duration::from_millis(2);

#[derive(Debug, Error, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum PlaceError {
    #[error("object homed at {home} accessed from {current}")]
    Remote { home: NodeId, current: NodeId },
    #[error("index {index} is outside {owner}'s slice [{start}, {end})")]
    OutOfSlice {
        index: usize,
        owner: NodeId,
        start: usize,
        end: usize,
    },
}

#[derive(Debug, Error, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShmError {
    #[error(transparent)]
    Place(#[from] PlaceError),
    #[error("too many threads at {place}: worker cap {cap} reached")]
    TooManyThreads { place: NodeId, cap: usize },
    #[error("usage error: {0}")]
    Usage(String),
    #[error("captured environment is not serializable: {0}")]
    Capture(String),
    #[error("remote execution at {place} failed: {message}")]
    RemoteExecution { place: NodeId, message: String },
    #[error("closure {0:?} is not registered")]
    NotRegistered(String),
    #[error("no such place {0}")]
    UnknownPlace(NodeId),
    #[error("dangling reference {handle} at {home}")]
    Dangling { home: NodeId, handle: u64 },
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("{0}")]
    Job(String),
}

impl From<TransportError> for ShmError {
    fn from(e: TransportError) -> Self {
        ShmError::Transport(e.to_string())
    }
}

fn capture(e: bincode::Error) -> ShmError {
    ShmError::Capture(e.to_string())
}

fn panic_message(p: Box<dyn Any + Send>) -> String {
    if let Some(s) = p.downcast_ref::<&str>() {
        s.to_string()
    } else if let Some(s) = p.downcast_ref::<String>() {
        s.clone()
    } else {
        "panic".to_string()
    }
}

/// Run-wide abort flag, raised by pool exhaustion or a broken link.
#[derive(Default)]
pub(crate) struct Abort {
    raised: AtomicBool,
    error: Mutex<Option<ShmError>>,
}

impl Abort {
    pub(crate) fn raise(&self, e: ShmError) {
        self.error.lock().get_or_insert(e);
        self.raised.store(true, Ordering::Release);
    }

    pub(crate) fn get(&self) -> Option<ShmError> {
        if !self.raised.load(Ordering::Acquire) {
            return None;
        }
        self.error.lock().clone()
    }

    pub(crate) fn check(&self) -> Result<(), ShmError> {
        self.get().map_or(Ok(()), Err)
    }
}

/// Handle to an object in some place's heap.
#[derive(Serialize, Deserialize)]
#[serde(bound = "")]
pub struct GlobalRef<T> {
    home: NodeId,
    handle: u64,
    #[serde(skip)]
    _t: PhantomData<fn() -> T>,
}

impl<T> GlobalRef<T> {
    pub fn home(&self) -> NodeId {
        self.home
    }
}

impl<T> Clone for GlobalRef<T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T> Copy for GlobalRef<T> {}

impl<T> PartialEq for GlobalRef<T> {
    fn eq(&self, o: &Self) -> bool {
        self.home == o.home && self.handle == o.handle
    }
}

impl<T> Eq for GlobalRef<T> {}

impl<T> Hash for GlobalRef<T> {
    fn hash<H: Hasher>(&self, h: &mut H) {
        self.home.hash(h);
        self.handle.hash(h);
    }
}

impl<T> fmt::Debug for GlobalRef<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "GlobalRef({}#{})", self.home, self.handle)
    }
}

/// Proof that the calling activity holds its place's atomic section.
pub struct AtomicGuard<'a> {
    place: NodeId,
    _lock: MutexGuard<'a, ()>,
}

impl AtomicGuard<'_> {
    pub fn place(&self) -> NodeId {
        self.place
    }
}

/// Place-local data mutable only inside that place's atomic section.
pub struct Guarded<T> {
    place: NodeId,
    cell: UnsafeCell<T>,
}

// SAFETY: the contents are reached only through `get`, which requires the
// owning place's `AtomicGuard` borrowed mutably. At most one guard per place
// exists at a time, so at most one `&mut T` is live.
unsafe impl<T: Send> Sync for Guarded<T> {}

impl<T> Guarded<T> {
    pub fn new(place: NodeId, value: T) -> Self {
        Guarded {
            place,
            cell: UnsafeCell::new(value),
        }
    }

    pub fn get<'a>(&'a self, guard: &'a mut AtomicGuard<'_>) -> Result<&'a mut T, ShmError> {
        if guard.place != self.place {
            return Err(PlaceError::Remote {
                home: self.place,
                current: guard.place,
            }
            .into());
        }
        // SAFETY: see the `Sync` impl above.
        Ok(unsafe { &mut *self.cell.get() })
    }

    pub fn into_inner(self) -> T {
        self.cell.into_inner()
    }
}

type Erased = dyn Fn(&Ctx, &[u8]) -> Result<Vec<u8>, ShmError> + Send + Sync;

/// Typed handle to a registered closure taking `E` and returning `R`.
pub struct RemoteFn<E, R> {
    id: Arc<str>,
    _t: PhantomData<fn(E) -> R>,
}

impl<E, R> RemoteFn<E, R> {
    /// Handle for an identifier that may or may not be registered.
    pub fn named(id: &str) -> Self {
        RemoteFn {
            id: Arc::from(id),
            _t: PhantomData,
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }
}

impl<E, R> Clone for RemoteFn<E, R> {
    fn clone(&self) -> Self {
        RemoteFn {
            id: Arc::clone(&self.id),
            _t: PhantomData,
        }
    }
}

#[derive(Serialize, Deserialize)]
enum Wire {
    Exec {
        req: u64,
        from: NodeId,
        func: String,
        env: Vec<u8>,
        finish: Option<u64>,
        reply: bool,
    },
    Reply {
        req: u64,
        result: Result<Vec<u8>, ShmError>,
    },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AtomicStats {
    pub entries: u64,
    pub max_occupancy: usize,
}

struct Place {
    id: NodeId,
    heap: Mutex<HashMap<u64, Arc<dyn Any + Send + Sync>>>,
    next_handle: AtomicU64,
    lock: Mutex<()>,
    occupancy: AtomicUsize,
    max_occupancy: AtomicUsize,
    entries: AtomicU64,
    pool: Arc<Pool>,
}

pub(crate) struct Inner {
    kind: TransportKind,
    places: Vec<Place>,
    registry: RwLock<HashMap<String, Arc<Erased>>>,
    abort: Arc<Abort>,
    endpoints: Vec<Arc<dyn Transport>>,
    next_id: AtomicU64,
    finishes: Mutex<HashMap<u64, Weak<FinishState>>>,
    replies: Mutex<HashMap<u64, Sender<Result<Vec<u8>, ShmError>>>>,
    stop: AtomicBool,
}

impl Inner {
    fn place(&self, p: NodeId) -> Result<&Place, ShmError> {
        self.places.get(p.index()).ok_or(ShmError::UnknownPlace(p))
    }

    fn lookup(&self, id: &str) -> Result<Arc<Erased>, ShmError> {
        self.registry
            .read()
            .get(id)
            .cloned()
            .ok_or_else(|| ShmError::NotRegistered(id.to_string()))
    }

    fn fresh_id(&self) -> u64 {
        self.next_id.fetch_add(1, Ordering::Relaxed)
    }

    fn is_remote(&self, from: NodeId, to: NodeId) -> bool {
        self.kind == TransportKind::Tcp && from != to
    }

    /// Runs a registered closure at `place`, turning panics into errors.
    fn invoke(
        self: &Arc<Self>,
        place: NodeId,
        finish: Option<Arc<FinishState>>,
        func: &str,
        env: &[u8],
    ) -> Result<Vec<u8>, ShmError> {
        self.abort.check()?;
        let f = self.lookup(func)?;
        let ctx = Ctx::new(Arc::clone(self), place, finish);
        panic::catch_unwind(AssertUnwindSafe(|| f(&ctx, env))).unwrap_or_else(|p| {
            Err(ShmError::RemoteExecution {
                place,
                message: panic_message(p),
            })
        })
    }

    fn share_finish(&self, f: &Arc<FinishState>) -> u64 {
        self.finishes.lock().insert(f.id, Arc::downgrade(f));
        f.id
    }

    fn send(&self, from: NodeId, to: NodeId, msg: &Wire) -> Result<(), ShmError> {
        let bytes = bincode::serialize(msg).map_err(capture)?;
        self.endpoints[from.index()].send(to, channel::REMOTE_EXEC, None, &bytes)?;
        Ok(())
    }

    fn dispatch(self: &Arc<Self>, place: NodeId) {
        let ep = Arc::clone(&self.endpoints[place.index()]);
        while !self.stop.load(Ordering::Acquire) {
            let m = match ep.recv(channel::REMOTE_EXEC, POLL) {
                Ok(m) => m,
                Err(TransportError::Timeout) => continue,
                Err(TransportError::Closed) => return,
                Err(e) => {
                    self.abort.raise(e.into());
                    return;
                }
            };
            let wire: Wire = match bincode::deserialize(&m.payload) {
                Ok(w) => w,
                Err(e) => {
                    self.abort.raise(ShmError::Transport(format!("bad request from {}: {e}", m.src)));
                    return;
                }
            };
            match wire {
                Wire::Exec {
                    req,
                    from,
                    func,
                    env,
                    finish,
                    reply,
                } => {
                    let fin = finish.and_then(|id| self.finishes.lock().get(&id).and_then(Weak::upgrade));
                    let rt = Arc::clone(self);
                    self.places[place.index()].pool.submit(Box::new(move || {
                        let result = rt.invoke(place, fin.clone(), &func, &env);
                        if reply {
                            if let Err(e) = rt.send(place, from, &Wire::Reply { req, result }) {
                                rt.abort.raise(e);
                            }
                        } else if let Some(fin) = fin {
                            fin.end(result.map(drop));
                        }
                    }));
                }
                Wire::Reply { req, result } => {
                    if let Some(tx) = self.replies.lock().remove(&req) {
                        let _ = tx.send(result);
                    }
                }
            }
        }
    }

    /// Waits for a remote reply, running local activities meanwhile.
    fn await_reply(&self, place: NodeId, rx: Receiver<Result<Vec<u8>, ShmError>>) -> Result<Vec<u8>, ShmError> {
        let helper = pool::current();
        loop {
            if let Ok(r) = rx.try_recv() {
                return r;
            }
            self.abort.check()?;
            if let Some(e) = self.endpoints[place.index()].failure() {
                return Err(e.into());
            }
            if let Some(job) = helper.as_ref().and_then(|p| p.try_pop()) {
                job();
                continue;
            }
            match rx.recv_timeout(REPLY_SLICE) {
                Ok(r) => return r,
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(ShmError::Transport("reply channel closed".into()))
                }
            }
        }
    }
}

/// The places of one run.
pub struct ShmRuntime {
    inner: Arc<Inner>,
    dispatchers: Mutex<Vec<JoinHandle<()>>>,
}

impl ShmRuntime {
    /// Starts one place per node. `endpoints` carry remote execution in
    /// Tcp mode and are unused in-process.
    pub fn start(spec: &ClusterSpec, endpoints: &[Arc<dyn Transport>]) -> Result<Self, ShmError> {
        let n = spec.n_nodes();
        if spec.transport == TransportKind::Tcp && endpoints.len() != n {
            return Err(ShmError::Usage(format!(
                "{} endpoints for {n} places",
                endpoints.len()
            )));
        }
        let abort = Arc::new(Abort::default());
        let places = (0..n)
            .map(|i| {
                let id = NodeId::from(i);
                Place {
                    id,
                    heap: Mutex::new(HashMap::new()),
                    next_handle: AtomicU64::new(0),
                    lock: Mutex::new(()),
                    occupancy: AtomicUsize::new(0),
                    max_occupancy: AtomicUsize::new(0),
                    entries: AtomicU64::new(0),
                    pool: Pool::start(id, spec.workers_per_node, spec.worker_cap, Arc::clone(&abort)),
                }
            })
            .collect();
        let inner = Arc::new(Inner {
            kind: spec.transport,
            places,
            registry: RwLock::new(HashMap::new()),
            abort,
            endpoints: if spec.transport == TransportKind::Tcp {
                endpoints.to_vec()
            } else {
                Vec::new()
            },
            next_id: AtomicU64::new(1),
            finishes: Mutex::new(HashMap::new()),
            replies: Mutex::new(HashMap::new()),
            stop: AtomicBool::new(false),
        });
        let mut dispatchers = Vec::new();
        if spec.transport == TransportKind::Tcp {
            for i in 0..n {
                let rt = Arc::clone(&inner);
                dispatchers.push(
                    thread::Builder::new()
                        .name(format!("place{i}-remote"))
                        .spawn(move || rt.dispatch(NodeId::from(i)))
                        .map_err(|e| ShmError::Usage(e.to_string()))?,
                );
            }
        }
        Ok(ShmRuntime {
            inner,
            dispatchers: Mutex::new(dispatchers),
        })
    }

    pub fn n_places(&self) -> usize {
        self.inner.places.len()
    }

    pub fn places(&self) -> impl Iterator<Item = NodeId> {
        (0..self.n_places()).map(NodeId::from)
    }

    pub fn kind(&self) -> TransportKind {
        self.inner.kind
    }

    /// Registers `f` under `id` at every place.
    pub fn register<E, R, F>(&self, id: &str, f: F) -> Result<RemoteFn<E, R>, ShmError>
    where
        E: Serialize + DeserializeOwned + 'static,
        R: Serialize + DeserializeOwned + 'static,
        F: Fn(&Ctx, E) -> Result<R, ShmError> + Send + Sync + 'static,
    {
        let erased: Arc<Erased> = Arc::new(move |ctx: &Ctx, bytes: &[u8]| {
            let env: E = bincode::deserialize(bytes).map_err(capture)?;
            let out = f(ctx, env)?;
            bincode::serialize(&out).map_err(capture)
        });
        let mut reg = self.inner.registry.write();
        if reg.contains_key(id) {
            return Err(ShmError::Usage(format!("closure {id:?} registered twice")));
        }
        reg.insert(id.to_string(), erased);
        Ok(RemoteFn::named(id))
    }

    /// Context for the calling thread at place `p`, outside any finish.
    /// Used by drivers and to set up place-local state before a run.
    pub fn root(&self, p: NodeId) -> Ctx {
        assert!(p.index() < self.n_places(), "no such place {p}");
        Ctx::new(Arc::clone(&self.inner), p, None)
    }

    pub fn pool_stats(&self, p: NodeId) -> PoolStats {
        self.inner.places[p.index()].pool.stats()
    }

    pub fn atomic_stats(&self, p: NodeId) -> AtomicStats {
        let pl = &self.inner.places[p.index()];
        AtomicStats {
            entries: pl.entries.load(Ordering::Relaxed),
            max_occupancy: pl.max_occupancy.load(Ordering::Relaxed),
        }
    }

    /// Error that aborted the run, if any.
    pub fn aborted(&self) -> Option<ShmError> {
        self.inner.abort.get()
    }

    pub fn shutdown(&self) {
        self.inner.stop.store(true, Ordering::Release);
        for h in self.dispatchers.lock().drain(..) {
            let _ = h.join();
        }
        for p in &self.inner.places {
            p.pool.shutdown();
        }
        self.inner.registry.write().clear();
        for p in &self.inner.places {
            p.heap.lock().clear();
        }
    }
}

impl Drop for ShmRuntime {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// What an activity sees: its current place and innermost finish.
pub struct Ctx {
    rt: Arc<Inner>,
    place: NodeId,
    finish: Option<Arc<FinishState>>,
    in_atomic: Cell<bool>,
}

impl Ctx {
    fn new(rt: Arc<Inner>, place: NodeId, finish: Option<Arc<FinishState>>) -> Self {
        Ctx {
            rt,
            place,
            finish,
            in_atomic: Cell::new(false),
        }
    }

    pub fn place(&self) -> NodeId {
        self.place
    }

    pub fn n_places(&self) -> usize {
        self.rt.places.len()
    }

    pub fn places(&self) -> impl Iterator<Item = NodeId> {
        (0..self.n_places()).map(NodeId::from)
    }

    fn usable(&self, what: &str) -> Result<(), ShmError> {
        if self.in_atomic.get() {
            return Err(ShmError::Usage(format!("{what} inside an atomic section")));
        }
        self.rt.abort.check()
    }

    fn here(&self) -> &Place {
        &self.rt.places[self.place.index()]
    }

    /// Stores `value` in the current place's heap.
    pub fn alloc<T: Send + Sync + 'static>(&self, value: T) -> GlobalRef<T> {
        let here = self.here();
        let handle = here.next_handle.fetch_add(1, Ordering::Relaxed);
        here.heap.lock().insert(handle, Arc::new(value));
        GlobalRef {
            home: here.id,
            handle,
            _t: PhantomData,
        }
    }

    /// The object behind `r`; only legal at `r`'s home place.
    pub fn deref<T: Send + Sync + 'static>(&self, r: &GlobalRef<T>) -> Result<Arc<T>, ShmError> {
        if r.home != self.place {
            return Err(PlaceError::Remote {
                home: r.home,
                current: self.place,
            }
            .into());
        }
        let any = self
            .here()
            .heap
            .lock()
            .get(&r.handle)
            .cloned()
            .ok_or(ShmError::Dangling {
                home: r.home,
                handle: r.handle,
            })?;
        any.downcast::<T>()
            .map_err(|_| ShmError::Usage(format!("{r:?} has a different type")))
    }

    /// Removes `r` from its home heap.
    pub fn free<T>(&self, r: &GlobalRef<T>) -> Result<(), ShmError> {
        if r.home != self.place {
            return Err(PlaceError::Remote {
                home: r.home,
                current: self.place,
            }
            .into());
        }
        self.here().heap.lock().remove(&r.handle);
        Ok(())
    }

    /// Runs `section` holding the current place's atomic lock. A pool
    /// worker that finds the lock taken parks and is replaced.
    pub fn atomic<R>(&self, section: impl FnOnce(&mut AtomicGuard<'_>) -> R) -> Result<R, ShmError> {
        self.usable("atomic")?;
        let here = self.here();
        let lock = match here.lock.try_lock() {
            Some(g) => g,
            None => match pool::current() {
                Some(pool) => {
                    pool.park()?;
                    let g = here.lock.lock();
                    pool.unpark();
                    g
                }
                None => here.lock.lock(),
            },
        };
        self.rt.abort.check()?;
        let mut guard = AtomicGuard {
            place: self.place,
            _lock: lock,
        };
        here.entries.fetch_add(1, Ordering::Relaxed);
        let occ = here.occupancy.fetch_add(1, Ordering::AcqRel) + 1;
        here.max_occupancy.fetch_max(occ, Ordering::AcqRel);
        self.in_atomic.set(true);
        let out = panic::catch_unwind(AssertUnwindSafe(|| section(&mut guard)));
        self.in_atomic.set(false);
        here.occupancy.fetch_sub(1, Ordering::AcqRel);
        drop(guard);
        match out {
            Ok(r) => Ok(r),
            Err(p) => panic::resume_unwind(p),
        }
    }

    /// Runs `f` at place `p` and returns its result.
    pub fn at<E, R>(&self, p: NodeId, f: &RemoteFn<E, R>, env: &E) -> Result<R, ShmError>
    where
        E: Serialize,
        R: DeserializeOwned,
    {
        self.usable("at")?;
        self.rt.place(p)?;
        let bytes = bincode::serialize(env).map_err(capture)?;
        let out = if self.rt.is_remote(self.place, p) {
            let req = self.rt.fresh_id();
            let finish = self.finish.as_ref().map(|f| self.rt.share_finish(f));
            let (tx, rx) = crossbeam_channel::bounded(1);
            self.rt.replies.lock().insert(req, tx);
            let sent = self.rt.send(
                self.place,
                p,
                &Wire::Exec {
                    req,
                    from: self.place,
                    func: f.id.to_string(),
                    env: bytes,
                    finish,
                    reply: true,
                },
            );
            if let Err(e) = sent {
                self.rt.replies.lock().remove(&req);
                return Err(e);
            }
            self.rt.await_reply(self.place, rx)?
        } else {
            self.rt.invoke(p, self.finish.clone(), &f.id, &bytes)?
        };
        bincode::deserialize(&out).map_err(capture)
    }

    fn current_finish(&self, what: &str) -> Result<&Arc<FinishState>, ShmError> {
        self.finish
            .as_ref()
            .ok_or_else(|| ShmError::Usage(format!("{what} outside any finish")))
    }

    /// Spawns an activity at the current place.
    pub fn async_local<F>(&self, f: F) -> Result<(), ShmError>
    where
        F: FnOnce(&Ctx) -> Result<(), ShmError> + Send + 'static,
    {
        self.usable("async")?;
        let fin = Arc::clone(self.current_finish("async")?);
        let rt = Arc::clone(&self.rt);
        let place = self.place;
        fin.begin();
        self.here().pool.submit(Box::new(move || {
            let result = match rt.abort.get() {
                Some(e) => Err(e),
                None => {
                    let ctx = Ctx::new(Arc::clone(&rt), place, Some(Arc::clone(&fin)));
                    panic::catch_unwind(AssertUnwindSafe(|| f(&ctx))).unwrap_or_else(|p| {
                        Err(ShmError::RemoteExecution {
                            place,
                            message: panic_message(p),
                        })
                    })
                }
            };
            fin.end(result);
        }));
        Ok(())
    }

    /// Spawns an activity running `f` at place `p` under the current finish.
    pub fn async_at<E: Serialize>(&self, p: NodeId, f: &RemoteFn<E, ()>, env: &E) -> Result<(), ShmError> {
        self.usable("async")?;
        let target = self.rt.place(p)?;
        let fin = Arc::clone(self.current_finish("async")?);
        self.rt.lookup(&f.id)?;
        let bytes = bincode::serialize(env).map_err(capture)?;
        fin.begin();
        if self.rt.is_remote(self.place, p) {
            let finish = Some(self.rt.share_finish(&fin));
            let sent = self.rt.send(
                self.place,
                p,
                &Wire::Exec {
                    req: self.rt.fresh_id(),
                    from: self.place,
                    func: f.id.to_string(),
                    env: bytes,
                    finish,
                    reply: false,
                },
            );
            if let Err(e) = sent {
                fin.end(Err(e.clone()));
                return Err(e);
            }
            return Ok(());
        }
        let rt = Arc::clone(&self.rt);
        let id = Arc::clone(&f.id);
        target.pool.submit(Box::new(move || {
            let result = rt.invoke(p, Some(Arc::clone(&fin)), &id, &bytes);
            fin.end(result.map(drop));
        }));
        Ok(())
    }

    fn scope<F>(&self, collecting: bool, body: F) -> Result<Arc<FinishState>, ShmError>
    where
        F: FnOnce(&Ctx) -> Result<(), ShmError>,
    {
        self.usable("finish")?;
        let fin = FinishState::new(self.rt.fresh_id(), self.finish.clone(), collecting);
        let inner = Ctx::new(Arc::clone(&self.rt), self.place, Some(Arc::clone(&fin)));
        if let Err(e) = body(&inner) {
            fin.fail(e);
        }
        let waited = fin.wait(&self.rt.abort);
        self.rt.finishes.lock().remove(&fin.id);
        waited.map(|_| fin)
    }

    /// Runs `body` and waits for every activity it spawned, transitively.
    /// Returns the first error any of them raised.
    pub fn finish<F>(&self, body: F) -> Result<(), ShmError>
    where
        F: FnOnce(&Ctx) -> Result<(), ShmError>,
    {
        self.scope(false, body).map(drop)
    }

    /// Like [`finish`](Self::finish), folding every value offered inside
    /// the scope with `reduce`. `None` when nothing was offered.
    pub fn finish_reduce<T, F, R>(&self, body: F, reduce: R) -> Result<Option<T>, ShmError>
    where
        T: DeserializeOwned,
        F: FnOnce(&Ctx) -> Result<(), ShmError>,
        R: Fn(T, T) -> T,
    {
        let fin = self.scope(true, body)?;
        let mut acc = None;
        for bytes in fin.take_offers() {
            let v: T = bincode::deserialize(&bytes).map_err(capture)?;
            acc = Some(match acc {
                Some(a) => reduce(a, v),
                None => v,
            });
        }
        Ok(acc)
    }

    /// Contributes `v` to the nearest enclosing [`finish_reduce`](Self::finish_reduce).
    pub fn offer<T: Serialize>(&self, v: &T) -> Result<(), ShmError> {
        let fin = self
            .finish
            .as_ref()
            .and_then(|f| f.collector())
            .ok_or_else(|| ShmError::Usage("offer outside a collecting finish".into()))?;
        fin.offer(bincode::serialize(v).map_err(capture)?);
        Ok(())
    }

    /// Activities of the innermost finish that have not ended yet.
    pub fn pending_in_scope(&self) -> usize {
        self.finish.as_ref().map_or(0, |f| f.pending())
    }
}
