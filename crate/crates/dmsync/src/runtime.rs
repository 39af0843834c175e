//! Cooperative runtime for logical clients.
//!
//! Clients are futures that yield at every verb and message boundary. In
//! deterministic mode a single-threaded executor advances one client per
//! step, chosen by a seeded policy, so identical seeds replay identical
//! histories. In free-running mode the same futures are driven by a busy
//! `block_on` on independent OS threads.

use std::collections::{BTreeSet, BinaryHeap};
use std::future::Future;
use std::pin::Pin;
use std::sync::atomic::{AtomicU64, AtomicU8, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::task::{Context, Poll};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::fabric::{ClientId, LockField, MsgClass};
use crate::mempool::Address;
use crate::world::World;

/// What a verb was issued for; per-client class counts make protocol
/// overheads assertable without wiring metrics through every call site.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VerbUse {
    PtrRead,
    KvRead,
    KvWrite,
    PtrCas,
    EntryEnqueue,
    EntryRead,
    EntryRelease,
    EpochRead,
    EpochBump,
    Other,
}

pub const VERB_USE_COUNT: usize = 10;

impl VerbUse {
    pub fn index(self) -> usize {
        match self {
            VerbUse::PtrRead => 0,
            VerbUse::KvRead => 1,
            VerbUse::KvWrite => 2,
            VerbUse::PtrCas => 3,
            VerbUse::EntryEnqueue => 4,
            VerbUse::EntryRead => 5,
            VerbUse::EntryRelease => 6,
            VerbUse::EpochRead => 7,
            VerbUse::EpochBump => 8,
            VerbUse::Other => 9,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SimMode {
    Deterministic,
    FreeRunning,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SchedPolicy {
    RoundRobin,
    Random,
}

/// Run plan for the deterministic executor.
#[derive(Clone, Debug)]
pub struct Schedule {
    pub seed: u64,
    pub mode: SimMode,
    pub policy: SchedPolicy,
}

impl Schedule {
    pub fn deterministic(seed: u64, policy: SchedPolicy) -> Self {
        Self {
            seed,
            mode: SimMode::Deterministic,
            policy,
        }
    }
}

const PARK_REQUEUE: u8 = 0;
const PARK_EVENT: u8 = 1;
const PARK_EVENT_DEADLINE: u8 = 2;

/// Side channel between a pending client future and the executor: why the
/// future suspended and what should wake it.
pub struct ParkCell {
    kind: AtomicU8,
    deadline: AtomicU64,
    label: Mutex<&'static str>,
}

impl ParkCell {
    fn new() -> Self {
        Self {
            kind: AtomicU8::new(PARK_REQUEUE),
            deadline: AtomicU64::new(0),
            label: Mutex::new(""),
        }
    }

    fn set(&self, kind: u8, deadline: u64, label: &'static str) {
        self.kind.store(kind, Ordering::SeqCst);
        self.deadline.store(deadline, Ordering::SeqCst);
        *self.label.lock().unwrap() = label;
    }

    pub fn label(&self) -> &'static str {
        *self.label.lock().unwrap()
    }
}

/// State shared between the executor, client contexts, and the fabric (which
/// wakes parked clients when a peer write lands).
pub struct SimShared {
    step: AtomicU64,
    wakes: Mutex<Vec<ClientId>>,
}

impl SimShared {
    pub fn now(&self) -> u64 {
        self.step.load(Ordering::SeqCst)
    }

    pub fn wake(&self, client: ClientId) {
        self.wakes.lock().unwrap().push(client);
    }
}

enum ExecMode {
    Deterministic {
        shared: Arc<SimShared>,
        park: Arc<ParkCell>,
    },
    FreeRunning,
}

/// Per-client handle to the simulated world. Owned by the client's future;
/// all protocol operations go through it.
pub struct Ctx {
    pub id: ClientId,
    pub node: u16,
    world: Arc<World>,
    mode: ExecMode,
    verbs: AtomicU64,
    verb_classes: [AtomicU64; VERB_USE_COUNT],
}

struct YieldPoint<'a> {
    ctx: &'a Ctx,
    kind: u8,
    deadline: u64,
    label: &'static str,
    polled: bool,
}

impl Future for YieldPoint<'_> {
    type Output = ();

    fn poll(mut self: Pin<&mut Self>, _cx: &mut Context<'_>) -> Poll<()> {
        if self.polled {
            return Poll::Ready(());
        }
        self.polled = true;
        match &self.ctx.mode {
            ExecMode::Deterministic { park, .. } => {
                park.set(self.kind, self.deadline, self.label);
                Poll::Pending
            }
            ExecMode::FreeRunning => {
                std::thread::yield_now();
                Poll::Ready(())
            }
        }
    }
}

impl Ctx {
    pub fn world(&self) -> &Arc<World> {
        &self.world
    }

    /// Current scheduler step (deterministic mode). Free-running clients get
    /// a globally ordered tick instead.
    pub fn now(&self) -> u64 {
        match &self.mode {
            ExecMode::Deterministic { shared, .. } => shared.now(),
            ExecMode::FreeRunning => self.world.next_tick(),
        }
    }

    pub fn is_deterministic(&self) -> bool {
        matches!(self.mode, ExecMode::Deterministic { .. })
    }

    /// Verbs this client has issued so far.
    pub fn verbs_issued(&self) -> u64 {
        self.verbs.load(Ordering::Relaxed)
    }

    /// Per-class verb counts for this client.
    pub fn verb_class_counts(&self) -> [u64; VERB_USE_COUNT] {
        std::array::from_fn(|i| self.verb_classes[i].load(Ordering::Relaxed))
    }

    fn count_verb(&self, verb_use: VerbUse) {
        self.verbs.fetch_add(1, Ordering::Relaxed);
        self.verb_classes[verb_use.index()].fetch_add(1, Ordering::Relaxed);
    }

    // --- one-sided verbs (yield, count, execute) --------------------------

    pub async fn read_word(&self, addr: Address, verb_use: VerbUse, label: &'static str) -> u64 {
        self.step_point(label).await;
        self.count_verb(verb_use);
        self.world.pool.read_word(addr).expect("pool read_word")
    }

    pub async fn read_bytes(
        &self,
        addr: Address,
        len: u64,
        verb_use: VerbUse,
        label: &'static str,
    ) -> Vec<u8> {
        self.step_point(label).await;
        self.count_verb(verb_use);
        self.world.pool.read(addr, len).expect("pool read")
    }

    pub async fn write_bytes(
        &self,
        addr: Address,
        data: &[u8],
        verb_use: VerbUse,
        label: &'static str,
    ) {
        self.step_point(label).await;
        self.count_verb(verb_use);
        self.world.pool.write(addr, data).expect("pool write");
    }

    pub async fn cas(
        &self,
        addr: Address,
        expect: u64,
        swap: u64,
        verb_use: VerbUse,
        label: &'static str,
    ) -> u64 {
        self.step_point(label).await;
        self.count_verb(verb_use);
        self.world.pool.cas(addr, expect, swap).expect("pool cas")
    }

    pub async fn masked_cas(
        &self,
        addr: Address,
        compare: u64,
        compare_mask: u64,
        swap: u64,
        swap_mask: u64,
        verb_use: VerbUse,
        label: &'static str,
    ) -> u64 {
        self.step_point(label).await;
        self.count_verb(verb_use);
        self.world
            .pool
            .masked_cas(addr, compare, compare_mask, swap, swap_mask)
            .expect("pool masked_cas")
    }

    pub async fn faa(
        &self,
        addr: Address,
        delta: i64,
        verb_use: VerbUse,
        label: &'static str,
    ) -> u64 {
        self.step_point(label).await;
        self.count_verb(verb_use);
        self.world.pool.faa(addr, delta).expect("pool faa")
    }

    /// Sends one cross-node message carrying the given field updates,
    /// applied in order on the target's lock node.
    pub async fn send_peer(
        &self,
        target: ClientId,
        lock: u64,
        updates: &[(LockField, u64)],
        class: MsgClass,
        label: &'static str,
    ) {
        self.step_point(label).await;
        self.world
            .fabric
            .write_peer(target, lock, updates, class)
            .expect("peer write");
    }

    /// One scheduler step; the client stays runnable.
    pub async fn step_point(&self, label: &'static str) {
        YieldPoint {
            ctx: self,
            kind: PARK_REQUEUE,
            deadline: 0,
            label,
            polled: false,
        }
        .await
    }

    /// Parks until a peer write, publish, or explicit wake targets this
    /// client, or until the absolute step `deadline` passes. Spurious
    /// wakeups are allowed; callers re-check their condition in a loop.
    pub async fn wait_event(&self, label: &'static str, deadline: Option<u64>) {
        let (kind, d) = match deadline {
            Some(d) => (PARK_EVENT_DEADLINE, d),
            None => (PARK_EVENT, 0),
        };
        YieldPoint {
            ctx: self,
            kind,
            deadline: d,
            label,
            polled: false,
        }
        .await
    }

    /// Parks for `steps` scheduler steps (deterministic) or yields once
    /// (free-running; callers measure wall time themselves).
    pub async fn sleep_steps(&self, steps: u64, label: &'static str) {
        match &self.mode {
            ExecMode::Deterministic { shared, .. } => {
                let deadline = shared.now() + steps;
                while shared.now() < deadline {
                    self.wait_event(label, Some(deadline)).await;
                }
            }
            ExecMode::FreeRunning => self.step_point(label).await,
        }
    }
}

type TaskFut = Pin<Box<dyn Future<Output = ()> + Send>>;

struct Slot {
    fut: Option<TaskFut>,
    park: Arc<ParkCell>,
    id: ClientId,
    parked: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunEnd {
    AllDone,
    /// Every live client is parked with no pending timer: nothing can make
    /// progress without outside intervention.
    DeadlockSuspect,
    StepLimit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DriveEnd {
    ReachedLabel,
    Parked,
    Done,
    StepLimit,
}

/// Deterministic single-threaded executor.
pub struct Sim {
    world: Arc<World>,
    shared: Arc<SimShared>,
    slots: Vec<Slot>,
    // client ids are global across sequential sims on one world
    index: std::collections::HashMap<u16, usize>,
    ready: BTreeSet<usize>,
    timers: BinaryHeap<std::cmp::Reverse<(u64, usize)>>,
    policy: SchedPolicy,
    rng: ChaCha8Rng,
    rr_cursor: usize,
    live: usize,
    log: Option<Vec<(u16, &'static str)>>,
}

impl Sim {
    pub fn new(world: Arc<World>, schedule: &Schedule) -> Self {
        assert_eq!(schedule.mode, SimMode::Deterministic);
        let shared = Arc::new(SimShared {
            step: AtomicU64::new(0),
            wakes: Mutex::new(Vec::new()),
        });
        world.attach_sim(shared.clone());
        Self {
            world,
            shared,
            slots: Vec::new(),
            index: std::collections::HashMap::new(),
            ready: BTreeSet::new(),
            timers: BinaryHeap::new(),
            policy: schedule.policy.clone(),
            rng: ChaCha8Rng::seed_from_u64(schedule.seed),
            rr_cursor: usize::MAX,
            live: 0,
            log: None,
        }
    }

    pub fn shared(&self) -> Arc<SimShared> {
        self.shared.clone()
    }

    pub fn enable_step_log(&mut self) {
        self.log = Some(Vec::new());
    }

    pub fn take_step_log(&mut self) -> Vec<(u16, &'static str)> {
        self.log.take().unwrap_or_default()
    }

    pub fn now(&self) -> u64 {
        self.shared.now()
    }

    /// Fast-forwards the step clock, so a follow-up scheduler on the same
    /// world continues the previous one's timeline.
    pub fn advance_to(&mut self, step: u64) {
        let cur = self.shared.now();
        if step > cur {
            self.shared.step.store(step, Ordering::SeqCst);
        }
    }

    /// Registers a client with the fabric and prepares its slot. The
    /// returned context must be moved into the future passed to [`spawn`].
    ///
    /// [`spawn`]: Sim::spawn
    pub fn register(&mut self, node: u16, thread: u16) -> Ctx {
        let id = self
            .world
            .fabric
            .register_client(node, thread)
            .expect("client registration failed");
        let park = Arc::new(ParkCell::new());
        self.index.insert(id.0, self.slots.len());
        self.slots.push(Slot {
            fut: None,
            park: park.clone(),
            id,
            parked: false,
        });
        Ctx {
            id,
            node,
            world: self.world.clone(),
            mode: ExecMode::Deterministic {
                shared: self.shared.clone(),
                park,
            },
            verbs: AtomicU64::new(0),
            verb_classes: std::array::from_fn(|_| AtomicU64::new(0)),
        }
    }

    fn slot_of(&self, id: ClientId) -> usize {
        *self.index.get(&id.0).expect("client not in this scheduler")
    }

    pub fn spawn<F>(&mut self, id: ClientId, fut: F)
    where
        F: Future<Output = ()> + Send + 'static,
    {
        let idx = self.slot_of(id);
        assert!(self.slots[idx].fut.is_none());
        self.slots[idx].fut = Some(Box::pin(fut));
        self.ready.insert(idx);
        self.live += 1;
    }

    /// Permanently removes a client, modeling a crash. The client never
    /// runs again; whatever it held stays held.
    pub fn kill(&mut self, id: ClientId) {
        let idx = self.slot_of(id);
        if self.slots[idx].fut.take().is_some() {
            self.live -= 1;
        }
        self.ready.remove(&idx);
        self.slots[idx].parked = false;
    }

    fn drain_wakes(&mut self) {
        let woken: Vec<ClientId> = {
            let mut q = self.shared.wakes.lock().unwrap();
            std::mem::take(&mut *q)
        };
        for id in woken {
            // wakes may target clients of an earlier scheduler; drop those
            let Some(&idx) = self.index.get(&id.0) else {
                continue;
            };
            if self.slots[idx].parked && self.slots[idx].fut.is_some() {
                self.slots[idx].parked = false;
                self.ready.insert(idx);
            }
        }
    }

    fn poll_slot(&mut self, idx: usize) {
        let waker = std::task::Waker::noop();
        let mut cx = Context::from_waker(waker);
        self.slots[idx].park.set(PARK_REQUEUE, 0, "");
        let done = {
            let fut = self.slots[idx].fut.as_mut().unwrap();
            fut.as_mut().poll(&mut cx).is_ready()
        };
        let client = self.slots[idx].id.0;
        if done {
            self.slots[idx].fut = None;
            self.live -= 1;
        } else {
            match self.slots[idx].park.kind.load(Ordering::SeqCst) {
                PARK_REQUEUE => {
                    self.ready.insert(idx);
                }
                PARK_EVENT => {
                    self.slots[idx].parked = true;
                }
                PARK_EVENT_DEADLINE => {
                    self.slots[idx].parked = true;
                    let d = self.slots[idx].park.deadline.load(Ordering::SeqCst);
                    self.timers.push(std::cmp::Reverse((d, idx)));
                }
                _ => unreachable!(),
            }
        }
        self.drain_wakes();
        if let Some(log) = &mut self.log {
            log.push((client, self.slots[idx].park.label()));
        }
        self.shared.step.fetch_add(1, Ordering::SeqCst);
    }

    fn fire_due_timers(&mut self) {
        // with an empty ready set, jump virtual time to the next deadline
        while self.ready.is_empty() {
            match self.timers.pop() {
                Some(std::cmp::Reverse((d, idx))) => {
                    if self.slots[idx].parked && self.slots[idx].fut.is_some() {
                        if d > self.shared.now() {
                            self.shared.step.store(d, Ordering::SeqCst);
                        }
                        self.slots[idx].parked = false;
                        self.ready.insert(idx);
                    }
                }
                None => return,
            }
        }
    }

    fn pick(&mut self) -> usize {
        match self.policy {
            SchedPolicy::RoundRobin => {
                let next = self
                    .ready
                    .range(self.rr_cursor.wrapping_add(1)..)
                    .next()
                    .copied()
                    .or_else(|| self.ready.iter().next().copied())
                    .unwrap();
                self.rr_cursor = next;
                next
            }
            SchedPolicy::Random => {
                let n = self.rng.gen_range(0..self.ready.len());
                *self.ready.iter().nth(n).unwrap()
            }
        }
    }

    /// Advances one client by one step. Returns who ran, or why nothing can.
    pub fn step_once(&mut self) -> Result<ClientId, RunEnd> {
        if self.live == 0 {
            return Err(RunEnd::AllDone);
        }
        if self.ready.is_empty() {
            self.fire_due_timers();
            if self.ready.is_empty() {
                return Err(RunEnd::DeadlockSuspect);
            }
        }
        let idx = self.pick();
        self.ready.remove(&idx);
        let id = self.slots[idx].id;
        self.poll_slot(idx);
        Ok(id)
    }

    pub fn run(&mut self, max_steps: u64) -> RunEnd {
        for _ in 0..max_steps {
            match self.step_once() {
                Ok(_) => {}
                Err(end) => return end,
            }
        }
        RunEnd::StepLimit
    }

    /// Steps only the named client until its next yield is labeled `label`
    /// (the client is then paused just before that action), or until it
    /// parks or finishes. Used by interleaving tests.
    pub fn drive_until(&mut self, id: ClientId, label: &'static str, max_steps: u64) -> DriveEnd {
        let idx = self.slot_of(id);
        for _ in 0..max_steps {
            if self.slots[idx].fut.is_none() {
                return DriveEnd::Done;
            }
            if self.slots[idx].parked {
                return DriveEnd::Parked;
            }
            self.ready.remove(&idx);
            self.poll_slot(idx);
            if self.slots[idx].fut.is_none() {
                return DriveEnd::Done;
            }
            if self.slots[idx].park.label() == label && !self.slots[idx].parked {
                return DriveEnd::ReachedLabel;
            }
            if self.slots[idx].parked {
                return DriveEnd::Parked;
            }
        }
        DriveEnd::StepLimit
    }
}

/// Registers free-running clients backed by OS threads.
pub struct FreeRunner {
    world: Arc<World>,
}

impl FreeRunner {
    pub fn new(world: Arc<World>) -> Self {
        Self { world }
    }

    pub fn register(&self, node: u16, thread: u16) -> Ctx {
        let id = self
            .world
            .fabric
            .register_client(node, thread)
            .expect("client registration failed");
        Ctx {
            id,
            node,
            world: self.world.clone(),
            mode: ExecMode::FreeRunning,
            verbs: AtomicU64::new(0),
            verb_classes: std::array::from_fn(|_| AtomicU64::new(0)),
        }
    }
}

/// Drives a future to completion by polling in a spin loop. Suitable only
/// for the self-advancing client futures in this crate.
pub fn block_on<F: Future>(fut: F) -> F::Output {
    let mut fut = std::pin::pin!(fut);
    let waker = std::task::Waker::noop();
    let mut cx = Context::from_waker(waker);
    loop {
        match fut.as_mut().poll(&mut cx) {
            Poll::Ready(v) => return v,
            Poll::Pending => std::hint::spin_loop(),
        }
    }
}

/// Reusable barrier for lockstep drills. Deterministic clients park while
/// waiting; free-running clients spin.
pub struct SimBarrier {
    n: usize,
    arrived: AtomicUsize,
    generation: AtomicU64,
    waiters: Mutex<Vec<ClientId>>,
}

impl SimBarrier {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            arrived: AtomicUsize::new(0),
            generation: AtomicU64::new(0),
            waiters: Mutex::new(Vec::new()),
        }
    }

    pub async fn wait(&self, ctx: &Ctx) {
        let gen = self.generation.load(Ordering::SeqCst);
        let arrived = self.arrived.fetch_add(1, Ordering::SeqCst) + 1;
        if arrived == self.n {
            self.arrived.store(0, Ordering::SeqCst);
            self.generation.fetch_add(1, Ordering::SeqCst);
            let waiters: Vec<ClientId> = std::mem::take(&mut *self.waiters.lock().unwrap());
            for w in waiters {
                ctx.world().wake(w);
            }
        } else {
            self.waiters.lock().unwrap().push(ctx.id);
            while self.generation.load(Ordering::SeqCst) == gen {
                ctx.wait_event("barrier", None).await;
            }
        }
        // align the resumption step across members
        ctx.step_point("barrier-release").await;
    }
}
