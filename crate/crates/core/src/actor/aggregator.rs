use std::collections::HashSet;
use std::sync::Arc;

use crossbeam_channel::{Receiver, Sender};
use parking_lot::Mutex;

use super::{Actor, ActorMessage, ActorRef, Context};

/// Collects exactly one reply from each expected sender, then hands the
/// replies to the waiting caller and stops itself. Anything arriving after
/// that is a dead letter.
pub(super) struct Aggregator<M> {
    expected: HashSet<ActorRef>,
    replied: Arc<Mutex<HashSet<ActorRef>>>,
    received: Vec<(ActorRef, M)>,
    done: Option<Sender<Vec<(ActorRef, M)>>>,
}

type Parts<M> = (
    Aggregator<M>,
    Receiver<Vec<(ActorRef, M)>>,
    Arc<Mutex<HashSet<ActorRef>>>,
);

impl<M: ActorMessage> Aggregator<M> {
    pub(super) fn new(targets: &[ActorRef]) -> Parts<M> {
        let (tx, rx) = crossbeam_channel::bounded(1);
        let replied = Arc::new(Mutex::new(HashSet::new()));
        let agg = Aggregator {
            expected: targets.iter().cloned().collect(),
            replied: Arc::clone(&replied),
            received: Vec::with_capacity(targets.len()),
            done: Some(tx),
        };
        (agg, rx, replied)
    }
}

impl<M: ActorMessage> Actor<M> for Aggregator<M> {
    fn receive(&mut self, ctx: &mut Context<'_, M>, msg: M) {
        let Some(sender) = ctx.sender().cloned() else {
            log::error!("{}: anonymous reply ignored", ctx.myself());
            return;
        };
        if !self.expected.contains(&sender) {
            log::error!("{}: unexpected reply from {sender}", ctx.myself());
            return;
        }
        if !self.replied.lock().insert(sender.clone()) {
            log::error!("{}: duplicate reply from {sender}", ctx.myself());
            return;
        }
        self.received.push((sender, msg));
        if self.received.len() == self.expected.len() {
            if let Some(done) = self.done.take() {
                let _ = done.send(std::mem::take(&mut self.received));
            }
            ctx.stop();
        }
    }
}
