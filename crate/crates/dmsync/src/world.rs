//! Shared state of one simulated deployment: the memory pool, the fabric,
//! and per-compute-node synchronization state.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::casync::{CreditLedger, LocalWc, SyncParams};
use crate::fabric::{ClientId, Fabric};
use crate::mcslock::LockConfig;
use crate::mempool::MemPool;
use crate::runtime::SimShared;

/// Protocol-level events, recorded when enabled so tests can check queue
/// order, combining windows, and recovery without instrumenting callers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Event {
    Enqueued { lock: u64, client: u16 },
    Granted { lock: u64, client: u16, role: &'static str },
    Coordinated { lock: u64, coordinator: u16, executor: u16 },
    CombinedReturn { lock: u64, client: u16, result: u16 },
    BatchCommitted { lock: u64, executor: u16, size: u16, value: u64, result: u16 },
    StallReported { lock: u64, client: u16, step: u64 },
    Repaired { lock: u64, client: u16, step: u64 },
    Abandoned { lock: u64, client: u16 },
    CsEnter { lock: u64, client: u16, step: u64 },
    CsExit { lock: u64, client: u16, step: u64 },
    WaitVerbs { lock: u64, client: u16, verbs: u64 },
}

#[derive(Clone, Debug)]
pub struct WorldConfig {
    pub pool_capacity: u64,
    pub nodes: u16,
    pub sync: SyncParams,
    pub lock: LockConfig,
    pub record_events: bool,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            pool_capacity: crate::mempool::DEFAULT_POOL_CAPACITY,
            nodes: 1,
            sync: SyncParams::default(),
            lock: LockConfig::default(),
            record_events: false,
        }
    }
}

pub struct World {
    pub pool: Arc<MemPool>,
    pub fabric: Fabric,
    pub lock_cfg: LockConfig,
    pub sync: SyncParams,
    ledgers: Vec<CreditLedger>,
    local_wcs: Vec<LocalWc>,
    events: Option<Mutex<Vec<Event>>>,
    shadow: Option<Mutex<HashMap<u64, u16>>>,
    sim: Mutex<Option<Arc<SimShared>>>,
    ticks: AtomicU64,
}

impl World {
    pub fn new(cfg: WorldConfig) -> Arc<World> {
        let ledgers = (0..cfg.nodes)
            .map(|_| CreditLedger::new(cfg.sync))
            .collect();
        let local_wcs = (0..cfg.nodes).map(|_| LocalWc::new()).collect();
        Arc::new(World {
            pool: Arc::new(MemPool::new(cfg.pool_capacity)),
            fabric: Fabric::new(),
            lock_cfg: cfg.lock,
            sync: cfg.sync,
            ledgers,
            local_wcs,
            events: cfg.record_events.then(|| Mutex::new(Vec::new())),
            shadow: cfg.record_events.then(|| Mutex::new(HashMap::new())),
            sim: Mutex::new(None),
            ticks: AtomicU64::new(0),
        })
    }

    pub(crate) fn attach_sim(&self, shared: Arc<SimShared>) {
        self.fabric.attach_sim(shared.clone());
        *self.sim.lock().unwrap() = Some(shared);
    }

    /// Wakes a parked client under a deterministic scheduler; no-op in
    /// free-running mode.
    pub fn wake(&self, client: ClientId) {
        if let Some(sim) = self.sim.lock().unwrap().as_ref() {
            sim.wake(client);
        }
    }

    pub fn ledger(&self, node: u16) -> &CreditLedger {
        &self.ledgers[node as usize]
    }

    pub fn local_wc(&self, node: u16) -> &LocalWc {
        &self.local_wcs[node as usize]
    }

    /// Globally ordered tick source for free-running timestamps.
    pub fn next_tick(&self) -> u64 {
        self.ticks.fetch_add(1, Ordering::SeqCst)
    }

    pub fn emit(&self, ev: Event) {
        if let Some(log) = &self.events {
            log.lock().unwrap().push(ev);
        }
    }

    pub fn events_enabled(&self) -> bool {
        self.events.is_some()
    }

    pub fn events_snapshot(&self) -> Vec<Event> {
        self.events
            .as_ref()
            .map(|l| l.lock().unwrap().clone())
            .unwrap_or_default()
    }

    /// Shadow owner register: asserts mutual exclusion when event recording
    /// is on. Called from inside critical sections.
    pub fn shadow_enter(&self, lock: u64, client: u16) {
        if let Some(shadow) = &self.shadow {
            let prev = shadow.lock().unwrap().insert(lock, client);
            assert!(
                prev.is_none(),
                "mutual exclusion violated on lock {lock:#x}: {client} entered while {prev:?} held"
            );
        }
    }

    pub fn shadow_exit(&self, lock: u64, client: u16) {
        if let Some(shadow) = &self.shadow {
            let prev = shadow.lock().unwrap().remove(&lock);
            assert_eq!(
                prev,
                Some(client),
                "critical section exit by {client} did not match owner {prev:?}"
            );
        }
    }

    /// Lock repair revokes whatever owner the shadow register still holds
    /// (the repaired holder is presumed dead and will never exit).
    pub fn shadow_revoke(&self, lock: u64) {
        if let Some(shadow) = &self.shadow {
            shadow.lock().unwrap().remove(&lock);
        }
    }
}
