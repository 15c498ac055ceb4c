use super::Incoming;

/// One agent's double-buffered inbox: messages sent in phase `S` live in
/// `buffers[S % 2]` until read in `S + 1`.
#[derive(Clone, Debug)]
pub struct PhaseInbox<M> {
    buffers: [Vec<Incoming<M>>; 2],
}

impl<M> Default for PhaseInbox<M> {
    fn default() -> Self {
        PhaseInbox {
            buffers: [Vec::new(), Vec::new()],
        }
    }
}

impl<M> PhaseInbox<M> {
    pub fn buffer_index(phase: u64) -> usize {
        (phase % 2) as usize
    }

    pub fn deliver(&mut self, msg: Incoming<M>) {
        self.buffers[Self::buffer_index(msg.phase)].push(msg);
    }

    /// Takes every message sent in `phase`, leaving the buffer empty.
    pub fn read(&mut self, phase: u64) -> Vec<Incoming<M>> {
        std::mem::take(&mut self.buffers[Self::buffer_index(phase)])
    }

    pub fn len(&self, phase: u64) -> usize {
        self.buffers[Self::buffer_index(phase)].len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffers.iter().all(Vec::is_empty)
    }
}

/// Inboxes and activation marks of all agents on one node. Marks are kept
/// per shard so several hosts can each take their own agents.
#[derive(Clone, Debug)]
pub struct LocalInboxes<M> {
    inboxes: Vec<PhaseInbox<M>>,
    marked: [Vec<bool>; 2],
    shards: [Vec<Vec<u32>>; 2],
    stored: [u64; 2],
}

impl<M> LocalInboxes<M> {
    pub fn new(agents: usize, shards: usize) -> Self {
        let shards = shards.max(1);
        LocalInboxes {
            inboxes: (0..agents).map(|_| PhaseInbox::default()).collect(),
            marked: [vec![false; agents], vec![false; agents]],
            shards: [vec![Vec::new(); shards], vec![Vec::new(); shards]],
            stored: [0, 0],
        }
    }

    pub fn n_shards(&self) -> usize {
        self.shards[0].len()
    }

    /// Marks `local` active for `phase`. Idempotent.
    pub fn mark(&mut self, phase: u64, local: u32) {
        let b = PhaseInbox::<M>::buffer_index(phase);
        let flag = &mut self.marked[b][local as usize];
        if !*flag {
            *flag = true;
            let n = self.shards[b].len();
            self.shards[b][local as usize % n].push(local);
        }
    }

    /// Stores `msg` for `local` and activates it for the phase after the
    /// one the message was sent in.
    pub fn deliver(&mut self, local: u32, msg: Incoming<M>) {
        let phase = msg.phase;
        self.inboxes[local as usize].deliver(msg);
        self.stored[PhaseInbox::<M>::buffer_index(phase)] += 1;
        self.mark(phase + 1, local);
    }

    /// Agents of `shard` active in `phase`, ascending. Clears their marks.
    pub fn take_active(&mut self, phase: u64, shard: usize) -> Vec<u32> {
        let b = PhaseInbox::<M>::buffer_index(phase);
        let mut list = std::mem::take(&mut self.shards[b][shard]);
        for &l in &list {
            self.marked[b][l as usize] = false;
        }
        list.sort_unstable();
        list
    }

    /// Messages `local` received that were sent in `phase`.
    pub fn read(&mut self, local: u32, phase: u64) -> Vec<Incoming<M>> {
        self.inboxes[local as usize].read(phase)
    }

    /// Agents currently marked for `phase`.
    pub fn activated(&self, phase: u64) -> u64 {
        self.shards[PhaseInbox::<M>::buffer_index(phase)]
            .iter()
            .map(|s| s.len() as u64)
            .sum()
    }

    /// Messages stored for `phase` since the last call.
    pub fn take_stored(&mut self, phase: u64) -> u64 {
        std::mem::take(&mut self.stored[PhaseInbox::<M>::buffer_index(phase)])
    }

    pub fn inbox(&self, local: u32) -> &PhaseInbox<M> {
        &self.inboxes[local as usize]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::AgentId;

    fn msg(phase: u64, body: u32) -> Incoming<u32> {
        Incoming {
            phase,
            from: AgentId::new(0, 0),
            body,
        }
    }

    #[test]
    fn phase_three_lands_in_buffer_one() {
        let mut ib = PhaseInbox::default();
        ib.deliver(msg(3, 7));
        assert_eq!(PhaseInbox::<u32>::buffer_index(3), 1);
        assert_eq!(ib.len(3), 1);
        assert_eq!(ib.len(2), 0);
    }

    #[test]
    fn read_empties_the_buffer() {
        let mut ib = PhaseInbox::default();
        assert!(ib.read(0).is_empty());
        ib.deliver(msg(0, 1));
        ib.deliver(msg(0, 2));
        assert_eq!(ib.read(0).len(), 2);
        assert!(ib.read(0).is_empty());
    }

    #[test]
    fn reads_see_only_their_phase() {
        let mut ib = PhaseInbox::default();
        ib.deliver(msg(4, 1));
        ib.deliver(msg(5, 2));
        ib.deliver(msg(4, 3));
        let read = ib.read(4);
        assert!(read.iter().all(|m| m.phase == 4));
        assert_eq!(read.len(), 2);
        assert_eq!(ib.read(5)[0].body, 2);
    }

    #[test]
    fn activation_is_idempotent() {
        let mut li = LocalInboxes::new(4, 2);
        li.deliver(1, msg(0, 1));
        li.deliver(1, msg(0, 2));
        li.deliver(2, msg(0, 3));
        assert_eq!(li.activated(1), 2);
        assert_eq!(li.take_stored(0), 3);
        assert_eq!(li.take_active(1, 1), vec![1]);
        assert_eq!(li.take_active(1, 0), vec![2]);
        assert_eq!(li.activated(1), 0);
        assert_eq!(li.read(1, 0).len(), 2);
    }
}
