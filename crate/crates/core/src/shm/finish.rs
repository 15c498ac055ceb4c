use std::sync::Arc;
use std::time::Duration;

use parking_lot::{Condvar, Mutex};

use super::{pool, Abort, ShmError};

const WAIT_SLICE: Duration = Duration::from_millis(2);

#[derive(Default)]
struct Inner {
    pending: usize,
    error: Option<ShmError>,
    offers: Vec<Vec<u8>>,
}

/// Termination scope of one `finish` block.
pub(crate) struct FinishState {
    pub(crate) id: u64,
    parent: Option<Arc<FinishState>>,
    collecting: bool,
    inner: Mutex<Inner>,
    done: Condvar,
}

impl FinishState {
    pub(crate) fn new(id: u64, parent: Option<Arc<FinishState>>, collecting: bool) -> Arc<Self> {
        Arc::new(FinishState {
            id,
            parent,
            collecting,
            inner: Mutex::new(Inner::default()),
            done: Condvar::new(),
        })
    }

    pub(crate) fn begin(&self) {
        self.inner.lock().pending += 1;
    }

    pub(crate) fn end(&self, outcome: Result<(), ShmError>) {
        let mut g = self.inner.lock();
        g.pending -= 1;
        if let Err(e) = outcome {
            g.error.get_or_insert(e);
        }
        if g.pending == 0 {
            self.done.notify_all();
        }
    }

    pub(crate) fn fail(&self, e: ShmError) {
        self.inner.lock().error.get_or_insert(e);
    }

    pub(crate) fn pending(&self) -> usize {
        self.inner.lock().pending
    }

    /// Nearest enclosing scope that accepts offers.
    pub(crate) fn collector(self: &Arc<Self>) -> Option<Arc<FinishState>> {
        let mut cur = Some(Arc::clone(self));
        while let Some(f) = cur {
            if f.collecting {
                return Some(f);
            }
            cur = f.parent.clone();
        }
        None
    }

    pub(crate) fn offer(&self, bytes: Vec<u8>) {
        self.inner.lock().offers.push(bytes);
    }

    pub(crate) fn take_offers(&self) -> Vec<Vec<u8>> {
        std::mem::take(&mut self.inner.lock().offers)
    }

    /// Blocks until every activity of the scope has ended. A pool worker
    /// runs queued activities of its own place while it waits.
    pub(crate) fn wait(&self, abort: &Abort) -> Result<(), ShmError> {
        let helper = pool::current();
        loop {
            {
                let mut g = self.inner.lock();
                if g.pending == 0 {
                    return match g.error.take() {
                        Some(e) => Err(e),
                        None => abort.check(),
                    };
                }
                if let Some(e) = abort.get() {
                    return Err(e);
                }
                if helper.is_none() {
                    self.done.wait_for(&mut g, WAIT_SLICE);
                    continue;
                }
            }
            let job = helper.as_ref().and_then(|p| p.try_pop());
            match job {
                Some(job) => job(),
                None => {
                    let mut g = self.inner.lock();
                    if g.pending > 0 {
                        self.done.wait_for(&mut g, WAIT_SLICE);
                    }
                }
            }
        }
    }
}
