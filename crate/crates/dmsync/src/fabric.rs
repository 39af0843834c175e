//! Compute-side fabric: client identity, client-local lock nodes that peers
//! can write into (modeling cross-node writes over reliable connections),
//! and message accounting.
//!
//! Lock nodes live on the owning client's compute node; peers update them
//! with messages rather than pool verbs, so cross-node traffic is counted
//! separately from memory-pool I/O. Delivery is exactly-once and FIFO per
//! (sender, target) pair.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU16, AtomicU32, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use serde::Serialize;
use thiserror::Error;

use crate::runtime::SimShared;

/// Globally unique nonzero client identity; zero is the queue-empty
/// sentinel in lock words and the "no coordinator" sentinel in lock nodes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ClientId(pub u16);

#[derive(Debug, Error)]
pub enum FabricError {
    #[error("client id space exhausted")]
    IdSpaceExhausted,
    #[error("client (node {0}, thread {1}) already registered")]
    DuplicateClient(u16, u16),
    #[error("unknown target client {0:?}")]
    UnknownClient(ClientId),
}

/// Fields of a client-local lock node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LockField {
    Next,
    Coordinator,
    Result,
    Locked,
    /// Running member count carried by the combined-result wave.
    Batch,
}

/// Single-field peer write, the unit the wire-format is specified in. One
/// network message may carry several of these applied in order.
#[derive(Clone, Copy, Debug)]
pub struct PeerWrite {
    pub target: ClientId,
    pub lock: u64,
    pub field: LockField,
    pub value: u64,
}

/// Message classes, counted separately so protocol overheads are assertable.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MsgClass {
    /// Queue linkage: a new waiter points its predecessor at itself.
    EnqueueLink,
    /// Ownership handover on release.
    Handover,
    /// Coordinator -> executor: lock transfer plus coordinator identity.
    WcNotify,
    /// Executor -> coordinator: combined result handback.
    WcHandback,
    /// Combined-result propagation along the wait queue.
    WcWave,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct MsgCounters {
    pub enqueue_link: u64,
    pub handover: u64,
    pub wc_notify: u64,
    pub wc_handback: u64,
    pub wc_wave: u64,
}

impl MsgCounters {
    pub fn total(&self) -> u64 {
        self.enqueue_link + self.handover + self.wc_notify + self.wc_handback + self.wc_wave
    }

    pub fn since(&self, earlier: &MsgCounters) -> MsgCounters {
        MsgCounters {
            enqueue_link: self.enqueue_link - earlier.enqueue_link,
            handover: self.handover - earlier.handover,
            wc_notify: self.wc_notify - earlier.wc_notify,
            wc_handback: self.wc_handback - earlier.wc_handback,
            wc_wave: self.wc_wave - earlier.wc_wave,
        }
    }
}

/// Client-local record for one lock: queue linkage and handover state.
/// All fields are written by peers at field granularity and polled locally.
pub struct LockNode {
    pub next: AtomicU64,
    pub coordinator: AtomicU16,
    pub result: AtomicU16,
    pub locked: AtomicU32,
    pub batch: AtomicU16,
}

impl LockNode {
    fn new() -> Self {
        Self {
            next: AtomicU64::new(0),
            coordinator: AtomicU16::new(0),
            result: AtomicU16::new(0),
            locked: AtomicU32::new(0),
            batch: AtomicU16::new(0),
        }
    }

    /// Clears all fields at the start of an acquisition episode.
    pub fn reset(&self) {
        self.next.store(0, Ordering::SeqCst);
        self.coordinator.store(0, Ordering::SeqCst);
        self.result.store(0, Ordering::SeqCst);
        self.batch.store(0, Ordering::SeqCst);
        self.locked.store(0, Ordering::SeqCst);
    }

    pub fn field(&self, f: LockField) -> u64 {
        match f {
            LockField::Next => self.next.load(Ordering::SeqCst),
            LockField::Coordinator => self.coordinator.load(Ordering::SeqCst) as u64,
            LockField::Result => self.result.load(Ordering::SeqCst) as u64,
            LockField::Locked => self.locked.load(Ordering::SeqCst) as u64,
            LockField::Batch => self.batch.load(Ordering::SeqCst) as u64,
        }
    }

    fn store(&self, f: LockField, v: u64) {
        match f {
            LockField::Next => self.next.store(v, Ordering::SeqCst),
            LockField::Coordinator => self.coordinator.store(v as u16, Ordering::SeqCst),
            LockField::Result => self.result.store(v as u16, Ordering::SeqCst),
            LockField::Locked => self.locked.store(v as u32, Ordering::SeqCst),
            LockField::Batch => self.batch.store(v as u16, Ordering::SeqCst),
        }
    }
}

struct ClientSlot {
    node: u16,
    // lazily allocated per-lock nodes, keyed by packed lock address
    locks: Mutex<HashMap<u64, Arc<LockNode>>>,
}

#[derive(Default)]
struct MsgAtomic {
    enqueue_link: AtomicU64,
    handover: AtomicU64,
    wc_notify: AtomicU64,
    wc_handback: AtomicU64,
    wc_wave: AtomicU64,
}

pub struct Fabric {
    registry: Mutex<HashMap<(u16, u16), ClientId>>,
    clients: RwLock<Vec<Arc<ClientSlot>>>,
    msgs: MsgAtomic,
    sim: Mutex<Option<Arc<SimShared>>>,
}

impl Default for Fabric {
    fn default() -> Self {
        Self::new()
    }
}

impl Fabric {
    pub fn new() -> Self {
        Self {
            registry: Mutex::new(HashMap::new()),
            clients: RwLock::new(Vec::new()),
            msgs: MsgAtomic::default(),
            sim: Mutex::new(None),
        }
    }

    // a later scheduler (e.g. the next drill round) replaces the previous
    pub(crate) fn attach_sim(&self, shared: Arc<SimShared>) {
        *self.sim.lock().unwrap() = Some(shared);
    }

    /// Registers a (node, thread) pair and returns its fresh nonzero id.
    pub fn register_client(&self, node: u16, thread: u16) -> Result<ClientId, FabricError> {
        let mut reg = self.registry.lock().unwrap();
        if reg.contains_key(&(node, thread)) {
            return Err(FabricError::DuplicateClient(node, thread));
        }
        let mut clients = self.clients.write().unwrap();
        if clients.len() >= u16::MAX as usize - 1 {
            return Err(FabricError::IdSpaceExhausted);
        }
        let id = ClientId(clients.len() as u16 + 1);
        clients.push(Arc::new(ClientSlot {
            node,
            locks: Mutex::new(HashMap::new()),
        }));
        reg.insert((node, thread), id);
        Ok(id)
    }

    pub fn client_count(&self) -> usize {
        self.clients.read().unwrap().len()
    }

    pub fn node_of(&self, client: ClientId) -> u16 {
        self.clients.read().unwrap()[(client.0 - 1) as usize].node
    }

    fn slot(&self, client: ClientId) -> Result<Arc<ClientSlot>, FabricError> {
        self.clients
            .read()
            .unwrap()
            .get((client.0.wrapping_sub(1)) as usize)
            .cloned()
            .ok_or(FabricError::UnknownClient(client))
    }

    /// The lock node a client owns for `lock`, created on first touch.
    pub fn node_for(&self, client: ClientId, lock: u64) -> Arc<LockNode> {
        let slot = self.slot(client).expect("client not registered");
        let mut locks = slot.locks.lock().unwrap();
        locks
            .entry(lock)
            .or_insert_with(|| Arc::new(LockNode::new()))
            .clone()
    }

    /// Applies one message carrying `updates` to the target's lock node, in
    /// order, and counts one cross-node message of the given class. Wakes
    /// the target if it is parked under a deterministic scheduler.
    pub fn write_peer(
        &self,
        target: ClientId,
        lock: u64,
        updates: &[(LockField, u64)],
        class: MsgClass,
    ) -> Result<(), FabricError> {
        let slot = self.slot(target)?;
        let node = {
            let mut locks = slot.locks.lock().unwrap();
            locks
                .entry(lock)
                .or_insert_with(|| Arc::new(LockNode::new()))
                .clone()
        };
        for &(f, v) in updates {
            node.store(f, v);
        }
        match class {
            MsgClass::EnqueueLink => &self.msgs.enqueue_link,
            MsgClass::Handover => &self.msgs.handover,
            MsgClass::WcNotify => &self.msgs.wc_notify,
            MsgClass::WcHandback => &self.msgs.wc_handback,
            MsgClass::WcWave => &self.msgs.wc_wave,
        }
        .fetch_add(1, Ordering::Relaxed);
        if let Some(sim) = self.sim.lock().unwrap().as_ref() {
            sim.wake(target);
        }
        Ok(())
    }

    /// Single-field peer write.
    pub fn write_peer_field(&self, w: PeerWrite) -> Result<(), FabricError> {
        // a lone Locked update still forms a whole message
        self.write_peer(w.target, w.lock, &[(w.field, w.value)], MsgClass::Handover)
    }

    /// Local poll of the caller's own lock node field.
    pub fn poll_field(&self, client: ClientId, lock: u64, field: LockField) -> u64 {
        self.node_for(client, lock).field(field)
    }

    pub fn msg_stats(&self) -> MsgCounters {
        MsgCounters {
            enqueue_link: self.msgs.enqueue_link.load(Ordering::SeqCst),
            handover: self.msgs.handover.load(Ordering::SeqCst),
            wc_notify: self.msgs.wc_notify.load(Ordering::SeqCst),
            wc_handback: self.msgs.wc_handback.load(Ordering::SeqCst),
            wc_wave: self.msgs.wc_wave.load(Ordering::SeqCst),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_registration_gets_id_one() {
        let f = Fabric::new();
        assert_eq!(f.register_client(0, 0).unwrap(), ClientId(1));
    }

    #[test]
    fn duplicate_pair_rejected() {
        let f = Fabric::new();
        f.register_client(0, 0).unwrap();
        assert!(matches!(
            f.register_client(0, 0),
            Err(FabricError::DuplicateClient(0, 0))
        ));
    }

    #[test]
    fn many_registrations_distinct() {
        let f = Fabric::new();
        let mut seen = std::collections::HashSet::new();
        for n in 0..128u16 {
            for t in 0..4u16 {
                let id = f.register_client(n, t).unwrap();
                assert!(seen.insert(id));
            }
        }
        assert_eq!(seen.len(), 512);
    }

    #[test]
    fn peer_write_visible_and_in_order() {
        let f = Fabric::new();
        let a = f.register_client(0, 0).unwrap();
        let b = f.register_client(0, 1).unwrap();
        assert_eq!(f.poll_field(b, 7, LockField::Next), 0);
        f.write_peer(b, 7, &[(LockField::Next, a.0 as u64)], MsgClass::EnqueueLink)
            .unwrap();
        f.write_peer(
            b,
            7,
            &[(LockField::Result, 5), (LockField::Locked, 1)],
            MsgClass::Handover,
        )
        .unwrap();
        // locked was stored after result within the message
        assert_eq!(f.poll_field(b, 7, LockField::Locked), 1);
        assert_eq!(f.poll_field(b, 7, LockField::Result), 5);
        assert_eq!(f.poll_field(b, 7, LockField::Next), a.0 as u64);
        let m = f.msg_stats();
        assert_eq!(m.enqueue_link, 1);
        assert_eq!(m.handover, 1);
        assert_eq!(m.total(), 2);
    }

    #[test]
    fn unknown_target_faults() {
        let f = Fabric::new();
        assert!(matches!(
            f.write_peer(ClientId(9), 0, &[(LockField::Locked, 1)], MsgClass::Handover),
            Err(FabricError::UnknownClient(ClientId(9)))
        ));
    }

    #[test]
    fn writes_from_two_senders_to_different_fields_both_land() {
        let f = Arc::new(Fabric::new());
        let t = f.register_client(0, 0).unwrap();
        f.register_client(0, 1).unwrap();
        f.register_client(0, 2).unwrap();
        let handles: Vec<_> = [(LockField::Result, 11u64), (LockField::Batch, 22u64)]
            .into_iter()
            .map(|(field, v)| {
                let f = f.clone();
                std::thread::spawn(move || {
                    f.write_peer(t, 3, &[(field, v)], MsgClass::WcWave).unwrap();
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert_eq!(f.poll_field(t, 3, LockField::Result), 11);
        assert_eq!(f.poll_field(t, 3, LockField::Batch), 22);
    }
}
