//! Deterministic verification suites: scripted interleavings, protocol
//! drills, and oracle sweeps. Shared by the CLI `verify`/`microtest`
//! commands and the acceptance test suite.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::casync::SyncParams;
use crate::fabric::{ClientId, MsgCounters};
use crate::kvstore::{ClientMetrics, KvSession, Mode, ModeKind, OpResult, PointerArray};
use crate::lincheck::{check_linearizable, OpKind, OpRecord, Outcome, RecResult};
use crate::mcslock::{FaultInjection, LockConfig};
use crate::mempool::VerbCounters;
use crate::runtime::{DriveEnd, RunEnd, SchedPolicy, Schedule, Sim, VerbUse, VERB_USE_COUNT};
use crate::world::{Event, World, WorldConfig};

#[derive(Clone, Copy, Debug)]
pub enum OneOp {
    Search(u64),
    Insert(u64, u64),
    Update(u64, u64),
    Delete(u64),
}

#[derive(Clone, Debug)]
pub struct HarnessCfg {
    pub keys: u64,
    pub prefill: f64,
    pub nodes: u16,
    pub seed: u64,
    pub policy: SchedPolicy,
    pub record_events: bool,
    pub inject: FaultInjection,
    pub sync: SyncParams,
    pub lock: LockConfig,
}

impl Default for HarnessCfg {
    fn default() -> Self {
        Self {
            keys: 1,
            prefill: 1.0,
            nodes: 1,
            seed: 0,
            policy: SchedPolicy::RoundRobin,
            record_events: false,
            inject: FaultInjection::None,
            sync: SyncParams::default(),
            lock: LockConfig::default(),
        }
    }
}

type MetricsSink = Arc<Mutex<Vec<(u16, ClientMetrics)>>>;

/// Scripted-run harness: spawns per-client operation lists on one world and
/// exposes step-level control for interleaving tests.
pub struct Harness {
    pub world: Arc<World>,
    pub array: Arc<PointerArray>,
    sim: Sim,
    seed: u64,
    policy: SchedPolicy,
    history: Arc<Mutex<Vec<OpRecord>>>,
    metrics: MetricsSink,
    next_thread: u16,
    prefilled: u64,
}

async fn ops_client(
    ctx: crate::runtime::Ctx,
    array: Arc<PointerArray>,
    mode: Mode,
    ops: Vec<OneOp>,
    history: Arc<Mutex<Vec<OpRecord>>>,
    metrics: MetricsSink,
) {
    let mut session = KvSession::new(&ctx, array, mode);
    for op in ops {
        let invoke = ctx.now();
        let (kind, key, value, res) = match op {
            OneOp::Search(k) => (OpKind::Search, k, None, session.search(k).await),
            OneOp::Insert(k, v) => (OpKind::Insert, k, Some(v), session.insert(k, v).await),
            OneOp::Update(k, v) => (OpKind::Update, k, Some(v), session.update(k, v).await),
            OneOp::Delete(k) => (OpKind::Delete, k, None, session.delete(k).await),
        };
        let response = ctx.now();
        let result = match res {
            OpResult::Ok(Some(v)) => RecResult::OkValue(v),
            OpResult::Ok(None) => RecResult::Ok,
            OpResult::Invalid | OpResult::Fenced => RecResult::Invalid,
        };
        history.lock().unwrap().push(OpRecord {
            client: ctx.id.0,
            kind,
            key,
            value,
            invoke,
            response,
            result,
        });
    }
    let mut m = session.metrics.clone();
    m.verb_classes = ctx.verb_class_counts();
    metrics.lock().unwrap().push((ctx.id.0, m));
}

impl Harness {
    pub fn new(cfg: &HarnessCfg) -> Harness {
        let world = World::new(WorldConfig {
            pool_capacity: crate::mempool::DEFAULT_POOL_CAPACITY,
            nodes: cfg.nodes,
            sync: cfg.sync,
            lock: LockConfig {
                inject: cfg.inject,
                ..cfg.lock
            },
            record_events: cfg.record_events,
        });
        let array = Arc::new(
            PointerArray::build(&world.pool, cfg.keys, cfg.prefill).expect("array build"),
        );
        let prefilled = (cfg.keys as f64 * cfg.prefill).round() as u64;
        let sim = Sim::new(
            world.clone(),
            &Schedule::deterministic(cfg.seed, cfg.policy.clone()),
        );
        Harness {
            world,
            array,
            sim,
            seed: cfg.seed,
            policy: cfg.policy.clone(),
            history: Arc::new(Mutex::new(Vec::new())),
            metrics: Arc::new(Mutex::new(Vec::new())),
            next_thread: 0,
            prefilled,
        }
    }

    /// Store contents right after the build, for the sequential oracle.
    pub fn initial_store(&self) -> BTreeMap<u64, u64> {
        (0..self.prefilled.min(self.array.count))
            .map(|k| (k, k))
            .collect()
    }

    pub fn seed_credit(&self, node: u16, key: u64, amount: u32) {
        self.world
            .ledger(node)
            .seed_credit(self.array.slot_addr(key).packed(), amount);
    }

    pub fn spawn_ops(&mut self, node: u16, mode: Mode, ops: Vec<OneOp>) -> ClientId {
        let thread = self.next_thread;
        self.next_thread += 1;
        let ctx = self.sim.register(node, thread);
        let id = ctx.id;
        let fut = ops_client(
            ctx,
            self.array.clone(),
            mode,
            ops,
            self.history.clone(),
            self.metrics.clone(),
        );
        self.sim.spawn(id, fut);
        id
    }

    pub fn drive(&mut self, id: ClientId, label: &'static str) -> DriveEnd {
        self.sim.drive_until(id, label, 1 << 20)
    }

    /// Drives a client until it parks or finishes.
    pub fn drive_to_park(&mut self, id: ClientId) -> DriveEnd {
        self.sim.drive_until(id, "\0never", 1 << 20)
    }

    pub fn kill(&mut self, id: ClientId) {
        self.sim.kill(id);
    }

    pub fn run_all(&mut self) -> RunEnd {
        self.sim.run(1 << 32)
    }

    pub fn now(&self) -> u64 {
        self.sim.now()
    }

    /// Starts a fresh scheduler phase over the same world, for follow-up
    /// operations after the main schedule completed. The step clock keeps
    /// counting so history timestamps stay globally ordered.
    pub fn fresh_phase(&mut self) {
        let now = self.sim.now();
        let mut sim = Sim::new(
            self.world.clone(),
            &Schedule::deterministic(self.seed, self.policy.clone()),
        );
        sim.advance_to(now + 1);
        self.sim = sim;
    }

    pub fn history(&self) -> Vec<OpRecord> {
        let mut h = self.history.lock().unwrap().clone();
        h.sort_by_key(|r| (r.invoke, r.client));
        h
    }

    pub fn client_metrics(&self) -> Vec<(u16, ClientMetrics)> {
        let mut m = self.metrics.lock().unwrap().clone();
        m.sort_by_key(|(id, _)| *id);
        m
    }

    pub fn check_history(&self) -> Outcome {
        check_linearizable(&self.history(), &self.initial_store(), 16)
    }

    /// Result of the single op issued by `client` (scripted suites issue
    /// one op per client).
    pub fn result_of(&self, client: ClientId) -> Option<RecResult> {
        self.history
            .lock()
            .unwrap()
            .iter()
            .find(|r| r.client == client.0)
            .map(|r| r.result)
    }

    /// Direct (verb-free) peek at a key's committed value.
    pub fn peek_value(&self, key: u64) -> Option<u64> {
        let word = self
            .world
            .pool
            .mn_peek(self.array.slot_addr(key))
            .expect("peek");
        let block = crate::kvstore::ptr_block(word);
        if block == 0 {
            return None;
        }
        let bytes = self
            .world
            .pool
            .read(crate::kvstore::block_addr(block), 16)
            .expect("peek block");
        let mut v = [0u8; 8];
        v.copy_from_slice(&bytes[8..16]);
        Some(u64::from_le_bytes(v))
    }
}

fn plain(mode: ModeKind) -> Mode {
    Mode::with_local_wc(mode, false)
}

// ---------------------------------------------------------------------------
// Lockstep microtest (worst-case retry law; contention-aware recovery)
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Default)]
pub struct RoundStats {
    pub ptr_cas_failures: u64,
    pub committed: u64,
    pub pessimistic_decisions: u64,
    pub combined: u64,
}

#[derive(Clone, Debug)]
pub struct MicrotestReport {
    pub n: u16,
    pub expected_worst_case: u64,
    pub osync_rounds: Vec<RoundStats>,
    pub cider_rounds: Vec<RoundStats>,
    pub osync_verbs_per_committed: f64,
    pub cider_verbs_per_committed: f64,
}

fn lockstep_rounds(mode: Mode, n: u16, rounds: u32) -> (Vec<RoundStats>, f64) {
    let world = World::new(WorldConfig::default());
    let array = Arc::new(PointerArray::build(&world.pool, 1, 1.0).expect("build"));
    let base = world.pool.stats();
    let metrics: MetricsSink = Arc::new(Mutex::new(Vec::new()));
    let history = Arc::new(Mutex::new(Vec::new()));
    let mut stats = Vec::new();
    let mut committed_total = 0u64;
    for round in 0..rounds {
        let taken = metrics.lock().unwrap().len();
        let mut sim = Sim::new(
            world.clone(),
            &Schedule::deterministic(round as u64, SchedPolicy::RoundRobin),
        );
        for i in 0..n {
            let ctx = sim.register(0, round as u16 * n + i);
            let id = ctx.id;
            let value = ((round as u64) << 32) | i as u64;
            let fut = ops_client(
                ctx,
                array.clone(),
                mode,
                vec![OneOp::Update(0, value)],
                history.clone(),
                metrics.clone(),
            );
            sim.spawn(id, fut);
        }
        assert_eq!(sim.run(1 << 30), RunEnd::AllDone);
        let m = metrics.lock().unwrap();
        let mut rs = RoundStats::default();
        for (_, cm) in m[taken..].iter() {
            rs.ptr_cas_failures += cm.ptr_cas_failures;
            rs.committed += cm.committed;
            rs.pessimistic_decisions += cm.pessimistic_decisions;
            rs.combined += cm.combined_global + cm.combined_local;
        }
        committed_total += rs.committed;
        stats.push(rs);
    }
    let verbs = world.pool.stats().since(&base);
    let vpc = if committed_total == 0 {
        0.0
    } else {
        verbs.total_verbs() as f64 / committed_total as f64
    };
    (stats, vpc)
}

/// Lockstep single-key drill: `n` clients update the same key each round
/// under round-robin scheduling, in optimistic mode and in contention-aware
/// mode, both without local combining.
pub fn microtest(n: u16, rounds: u32) -> MicrotestReport {
    assert!(n >= 2);
    let (osync_rounds, osync_vpc) = lockstep_rounds(plain(ModeKind::Osync), n, rounds);
    let (cider_rounds, cider_vpc) = lockstep_rounds(plain(ModeKind::Cider), n, rounds);
    MicrotestReport {
        n,
        expected_worst_case: n as u64 * (n as u64 - 1) / 2,
        osync_rounds,
        cider_rounds,
        osync_verbs_per_committed: osync_vpc,
        cider_verbs_per_committed: cider_vpc,
    }
}

// ---------------------------------------------------------------------------
// Global write combining drills
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct BatchDrillStats {
    pub k: u16,
    pub kv_writes: u64,
    pub ptr_cas: u64,
    pub entry_reads: u64,
    pub epoch_reads: u64,
    pub release_cas: u64,
    pub epoch_bumps: u64,
    pub msgs: MsgCounters,
    pub pool: VerbCounters,
    pub batch_size_recorded: u16,
    pub final_value: Option<u64>,
    pub last_member_value: u64,
    pub results: Vec<u16>,
    pub member_results_unanimous: bool,
}

/// Forms one combined batch of exactly `k` members on a single key and
/// returns its verb and message accounting.
pub fn batch_drill(k: u16) -> BatchDrillStats {
    assert!(k >= 2);
    let cfg = HarnessCfg {
        record_events: true,
        ..Default::default()
    };
    let mut h = Harness::new(&cfg);
    h.seed_credit(0, 0, k as u32);
    let mode = plain(ModeKind::Cider);
    let ids: Vec<ClientId> = (0..k)
        .map(|i| h.spawn_ops(0, mode, vec![OneOp::Update(0, 1000 + i as u64)]))
        .collect();
    let base_verbs = h.world.pool.stats();
    let base_msgs = h.world.fabric.msg_stats();
    // first client acquires and pauses just before its successor check
    assert_eq!(h.drive(ids[0], "wc:check-next"), DriveEnd::ReachedLabel);
    // remaining members enqueue in order and park
    for id in &ids[1..] {
        assert_eq!(h.drive_to_park(*id), DriveEnd::Parked);
    }
    assert_eq!(h.run_all(), RunEnd::AllDone);

    let msgs = h.world.fabric.msg_stats().since(&base_msgs);
    let pool = h.world.pool.stats().since(&base_verbs);
    let mut classes = [0u64; VERB_USE_COUNT];
    for (_, m) in h.client_metrics() {
        for (i, c) in m.verb_classes.iter().enumerate() {
            classes[i] += c;
        }
    }
    let events = h.world.events_snapshot();
    let batch_size_recorded = events
        .iter()
        .find_map(|e| match e {
            Event::BatchCommitted { size, .. } => Some(*size),
            _ => None,
        })
        .unwrap_or(0);
    let batch_result = events.iter().find_map(|e| match e {
        Event::BatchCommitted { result, .. } => Some(*result),
        _ => None,
    });
    let member_results: Vec<u16> = events
        .iter()
        .filter_map(|e| match e {
            Event::CombinedReturn { result, .. } => Some(*result),
            _ => None,
        })
        .collect();
    let unanimous = batch_result
        .map(|r| member_results.iter().all(|m| *m == r))
        .unwrap_or(false);
    BatchDrillStats {
        k,
        kv_writes: classes[VerbUse::KvWrite.index()],
        ptr_cas: classes[VerbUse::PtrCas.index()],
        entry_reads: classes[VerbUse::EntryRead.index()],
        epoch_reads: classes[VerbUse::EpochRead.index()],
        release_cas: classes[VerbUse::EntryRelease.index()],
        epoch_bumps: classes[VerbUse::EpochBump.index()],
        msgs,
        pool,
        batch_size_recorded,
        final_value: h.peek_value(0),
        last_member_value: 1000 + k as u64 - 1,
        results: member_results,
        member_results_unanimous: unanimous,
    }
}

/// Exact single-writer-batch checks over k in {2, 3, 5, 8} plus the
/// last-writer-wins sweep. Every batch must cost one KV write, one pointer
/// swap, and one entry read on the pool, two coordinator/executor messages,
/// and k-1 result handovers.
pub fn gwc_suite(lww_seeds: u64) -> Result<String, String> {
    let mut failures = Vec::new();
    for k in [2u16, 3, 5, 8] {
        let s = batch_drill(k);
        let checks: [(&str, bool); 11] = [
            ("one KV write per batch", s.kv_writes == 1),
            ("one pointer swap per batch", s.ptr_cas == 1),
            ("one entry read per batch", s.entry_reads == 1),
            ("one executor notification", s.msgs.wc_notify == 1),
            ("one result handback", s.msgs.wc_handback == 1),
            ("k-1 wave handovers", s.msgs.wc_wave == k as u64 - 1),
            ("k-1 queue links", s.msgs.enqueue_link == k as u64 - 1),
            ("no plain handovers inside a batch", s.msgs.handover == 0),
            ("one epoch bump per batch", s.epoch_bumps == 1),
            ("recorded batch size", s.batch_size_recorded == k),
            (
                "last writer wins",
                s.final_value == Some(s.last_member_value),
            ),
        ];
        for (what, ok) in checks {
            if !ok {
                failures.push(format!("k={k}: {what} violated: {s:?}"));
            }
        }
        if !s.member_results_unanimous {
            failures.push(format!("k={k}: member results not unanimous: {:?}", s.results));
        }
    }
    match lww_sweep(0..lww_seeds) {
        Ok(lww) => {
            if failures.is_empty() {
                return Ok(format!(
                    "batches of 2/3/5/8 exact; {} seeded schedules, {} batches, {} combined members",
                    lww.schedules, lww.batches, lww.combined_members
                ));
            }
        }
        Err(e) => failures.push(e),
    }
    Err(failures.join("\n"))
}

/// Holder-failure drill with pinned expectations.
pub fn epoch_suite() -> Result<String, String> {
    let s = epoch_drill();
    let checks: [(&str, bool); 6] = [
        ("a waiter reported the stall", s.stall_reports >= 1),
        ("exactly one repair", s.repairs == 1),
        (
            "stall detected within one watch window",
            s.first_report_within_window,
        ),
        ("all four waiters completed exactly once", s.waiter_commits == 4),
        ("the dead holder's op never committed", !s.dead_op_committed),
        ("recovered history linearizable", s.linearizable),
    ];
    let failures: Vec<String> = checks
        .iter()
        .filter(|(_, ok)| !ok)
        .map(|(what, _)| format!("{what}: {s:?}"))
        .collect();
    if failures.is_empty() {
        Ok(format!(
            "stall detected and repaired; {} reports, {} repair",
            s.stall_reports, s.repairs
        ))
    } else {
        Err(failures.join("\n"))
    }
}

/// A combining batch reconstructed from the event log.
#[derive(Clone, Debug)]
pub struct BatchView {
    pub coordinator: u16,
    pub executor: u16,
    pub members: Vec<u16>,
    pub size: u16,
    pub result: u16,
    pub value: u64,
}

/// Rebuilds each batch's membership from enqueue order and the
/// coordinator/executor and commit events.
pub fn reconstruct_batches(events: &[Event], lock: u64) -> Result<Vec<BatchView>, String> {
    let mut batches = Vec::new();
    for (i, ev) in events.iter().enumerate() {
        let Event::Coordinated {
            lock: l,
            coordinator,
            executor,
        } = ev
        else {
            continue;
        };
        if *l != lock {
            continue;
        }
        let enq_pos = |client: u16, before: usize| -> Option<usize> {
            events[..before]
                .iter()
                .enumerate()
                .rev()
                .find_map(|(j, e)| match e {
                    Event::Enqueued { lock: el, client: c } if *el == lock && *c == client => {
                        Some(j)
                    }
                    _ => None,
                })
        };
        let c_pos = enq_pos(*coordinator, i)
            .ok_or_else(|| format!("coordinator {coordinator} has no enqueue before batch"))?;
        let e_pos = enq_pos(*executor, i)
            .ok_or_else(|| format!("executor {executor} has no enqueue before batch"))?;
        if e_pos <= c_pos {
            return Err("executor enqueued before its coordinator".into());
        }
        let members: Vec<u16> = events[c_pos..=e_pos]
            .iter()
            .filter_map(|e| match e {
                Event::Enqueued { lock: el, client } if *el == lock => Some(*client),
                _ => None,
            })
            .collect();
        let commit = events[i..].iter().find_map(|e| match e {
            Event::BatchCommitted {
                lock: el,
                executor: ex,
                size,
                value,
                result,
            } if *el == lock && *ex == *executor => Some((*size, *value, *result)),
            _ => None,
        });
        let Some((size, value, result)) = commit else {
            return Err(format!("batch led by {coordinator} never committed"));
        };
        batches.push(BatchView {
            coordinator: *coordinator,
            executor: *executor,
            members,
            size,
            result,
            value,
        });
    }
    Ok(batches)
}

#[derive(Clone, Debug, Default)]
pub struct LwwStats {
    pub schedules: u64,
    pub batches: u64,
    pub combined_members: u64,
}

/// Last-writer-wins sweep: seeded random schedules of pessimistic updates
/// on one key; every reconstructed batch must have its executor last in
/// queue order, unanimous member results, and a linearizable history.
pub fn lww_sweep(seeds: std::ops::Range<u64>) -> Result<LwwStats, String> {
    let mut stats = LwwStats::default();
    for seed in seeds {
        let cfg = HarnessCfg {
            seed,
            policy: SchedPolicy::Random,
            record_events: true,
            ..Default::default()
        };
        let mut h = Harness::new(&cfg);
        h.seed_credit(0, 0, 1000);
        let mode = plain(ModeKind::Cider);
        // 15 ops plus the probe stay within the oracle's cap
        let clients = 5u16;
        let ops = 3u64;
        for c in 0..clients {
            let list: Vec<OneOp> = (0..ops)
                .map(|i| OneOp::Update(0, ((c as u64 + 1) << 8) | i))
                .collect();
            h.spawn_ops(0, mode, list);
        }
        if h.run_all() != RunEnd::AllDone {
            return Err(format!("seed {seed}: run stalled"));
        }
        // trailing observation for the oracle
        h.fresh_phase();
        h.spawn_ops(0, plain(ModeKind::Osync), vec![OneOp::Search(0)]);
        if h.run_all() != RunEnd::AllDone {
            return Err(format!("seed {seed}: probe stalled"));
        }
        let events = h.world.events_snapshot();
        let lock = h.array.lock_ref(0).key();
        let batches = reconstruct_batches(&events, lock)?;
        for b in &batches {
            if b.members.last() != Some(&b.executor) {
                return Err(format!(
                    "seed {seed}: executor {} is not queue-last in {:?}",
                    b.executor, b.members
                ));
            }
            if b.size as usize != b.members.len() {
                return Err(format!(
                    "seed {seed}: recorded batch size {} != member count {}",
                    b.size,
                    b.members.len()
                ));
            }
            stats.batches += 1;
            stats.combined_members += b.members.len() as u64 - 1;
        }
        // unanimity: every combined return carries its batch's result
        for (i, ev) in events.iter().enumerate() {
            if let Event::CombinedReturn {
                lock: l,
                result,
                client,
            } = ev
            {
                if *l != lock {
                    continue;
                }
                let batch_result = events[i..].iter().find_map(|e| match e {
                    Event::BatchCommitted {
                        lock: bl,
                        result: r,
                        ..
                    } if bl == l => Some(*r),
                    _ => None,
                });
                if batch_result != Some(*result) {
                    return Err(format!(
                        "seed {seed}: member {client} returned {result}, batch committed {batch_result:?}"
                    ));
                }
            }
        }
        match h.check_history() {
            Outcome::Pass => {}
            Outcome::Fail(w) => {
                return Err(format!("seed {seed}: non-linearizable, witness {w:?}"))
            }
            Outcome::TooLarge(n) => return Err(format!("seed {seed}: history too large ({n})")),
        }
        stats.schedules += 1;
    }
    Ok(stats)
}

// ---------------------------------------------------------------------------
// Linearizability sweep
// ---------------------------------------------------------------------------

/// One seeded small run: up to 4 clients, 3 keys, 12 operations drawn
/// uniformly over all four op kinds, checked against the brute-force
/// sequential oracle.
pub fn small_run(seed: u64, mode: Mode) -> (Vec<OpRecord>, BTreeMap<u64, u64>, Outcome) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD15C_0C0A);
    let clients = rng.gen_range(2..=4u16);
    let keys = rng.gen_range(1..=3u64);
    let per_client = 12 / clients as u64;
    let cfg = HarnessCfg {
        keys,
        prefill: 0.5,
        seed,
        policy: SchedPolicy::Random,
        ..Default::default()
    };
    let mut h = Harness::new(&cfg);
    if mode.kind == ModeKind::Cider {
        for k in 0..keys {
            if rng.gen_bool(0.5) {
                h.seed_credit(0, k, rng.gen_range(1..=4));
            }
        }
    }
    for c in 0..clients {
        let ops: Vec<OneOp> = (0..per_client)
            .map(|i| {
                let key = rng.gen_range(0..keys);
                let value = ((c as u64 + 1) << 32) | i;
                match rng.gen_range(0..4) {
                    0 => OneOp::Search(key),
                    1 => OneOp::Insert(key, value),
                    2 => OneOp::Update(key, value),
                    _ => OneOp::Delete(key),
                }
            })
            .collect();
        h.spawn_ops(0, mode, ops);
    }
    let end = h.run_all();
    assert_eq!(end, RunEnd::AllDone, "seed {seed}: run stalled");
    let outcome = h.check_history();
    (h.history(), h.initial_store(), outcome)
}

/// Runs seeded small runs in the given mode; all must linearize.
pub fn linearizability_suite(mode: Mode, seeds: u64) -> Result<u64, String> {
    for seed in 0..seeds {
        let (history, _, outcome) = small_run(seed, mode);
        match outcome {
            Outcome::Pass => {}
            Outcome::Fail(witness) => {
                return Err(format!(
                    "mode {}: seed {seed} not linearizable\nhistory: {history:#?}\nwitness: {witness:#?}",
                    mode.kind.name()
                ));
            }
            Outcome::TooLarge(n) => return Err(format!("seed {seed}: history too large ({n})")),
        }
    }
    Ok(seeds)
}

// ---------------------------------------------------------------------------
// Version fencing scripts
// ---------------------------------------------------------------------------

fn expect(cond: bool, msg: &str, log: &mut Vec<String>) {
    if !cond {
        log.push(msg.to_string());
    }
}

/// Scripted delete-vs-update interleavings plus the combining-window delete
/// scenario. With `FaultInjection::SkipDeleteVersionBump` the suite must
/// fail: a stale update joins the queue behind the delete and the delete's
/// effect is silently combined away.
pub fn fencing_suite(inject: FaultInjection) -> Result<String, String> {
    let mut failures = Vec::new();

    // update completes before the delete starts: Ok then deleted
    {
        let cfg = HarnessCfg {
            inject,
            record_events: true,
            ..Default::default()
        };
        let mut h = Harness::new(&cfg);
        let u = h.spawn_ops(0, plain(ModeKind::Mcs), vec![OneOp::Update(0, 42)]);
        let d = h.spawn_ops(0, plain(ModeKind::Mcs), vec![OneOp::Delete(0)]);
        let s = h.spawn_ops(0, plain(ModeKind::Mcs), vec![OneOp::Search(0)]);
        assert_eq!(h.drive_to_park(u), DriveEnd::Done);
        assert_eq!(h.drive_to_park(d), DriveEnd::Done);
        assert_eq!(h.drive_to_park(s), DriveEnd::Done);
        expect(
            h.result_of(u) == Some(RecResult::Ok),
            "ordered update should commit",
            &mut failures,
        );
        expect(
            h.result_of(d) == Some(RecResult::Ok),
            "ordered delete should commit",
            &mut failures,
        );
        expect(
            h.result_of(s) == Some(RecResult::Invalid),
            "search after delete should miss",
            &mut failures,
        );
        expect(
            h.check_history().passed(),
            "ordered script not linearizable",
            &mut failures,
        );
    }

    // update initiated after the delete acquired: rejected from the queue
    {
        let cfg = HarnessCfg {
            inject,
            record_events: true,
            ..Default::default()
        };
        let mut h = Harness::new(&cfg);
        let d = h.spawn_ops(0, plain(ModeKind::Mcs), vec![OneOp::Delete(0)]);
        let u = h.spawn_ops(0, plain(ModeKind::Mcs), vec![OneOp::Update(0, 42)]);
        // pause the delete inside its critical section, version already bumped
        assert_eq!(h.drive(d, "verb:ptr-cas"), DriveEnd::ReachedLabel);
        // the update is rejected from the queue and waits out the fence
        let u_end = h.drive_to_park(u);
        expect(
            u_end == DriveEnd::Parked,
            "fenced update should wait for the delete to land",
            &mut failures,
        );
        assert_eq!(h.run_all(), RunEnd::AllDone);
        if inject == FaultInjection::None {
            expect(
                h.result_of(u) == Some(RecResult::Invalid),
                "update overlapping a delete must surface invalid",
                &mut failures,
            );
        }
        expect(
            h.result_of(d) == Some(RecResult::Ok),
            "delete should commit",
            &mut failures,
        );
        expect(
            h.peek_value(0).is_none(),
            "key should be gone after the delete",
            &mut failures,
        );
        expect(
            h.check_history().passed(),
            "fencing script not linearizable",
            &mut failures,
        );
    }

    // combining window crossing a delete: coordinator + delete + late update
    {
        let cfg = HarnessCfg {
            inject,
            record_events: true,
            ..Default::default()
        };
        let mut h = Harness::new(&cfg);
        h.seed_credit(0, 0, 2);
        let mode = plain(ModeKind::Cider);
        let c = h.spawn_ops(0, mode, vec![OneOp::Update(0, 101)]);
        let d = h.spawn_ops(0, mode, vec![OneOp::Delete(0)]);
        let u2 = h.spawn_ops(0, mode, vec![OneOp::Update(0, 202)]);
        assert_eq!(h.drive(c, "wc:check-next"), DriveEnd::ReachedLabel);
        let d_end = h.drive_to_park(d);
        expect(
            d_end == DriveEnd::Parked,
            "delete should queue behind the coordinator",
            &mut failures,
        );
        // the stale update tries to join while the delete is in flight
        let _ = h.drive_to_park(u2);
        assert_eq!(h.run_all(), RunEnd::AllDone);
        h.fresh_phase();
        h.spawn_ops(0, plain(ModeKind::Osync), vec![OneOp::Search(0)]);
        assert_eq!(h.run_all(), RunEnd::AllDone);
        match h.check_history() {
            Outcome::Pass => {}
            Outcome::Fail(witness) => {
                failures.push(format!(
                    "combining-delete script not linearizable; witness: {witness:#?}"
                ));
            }
            Outcome::TooLarge(n) => failures.push(format!("history too large ({n})")),
        }
    }

    if failures.is_empty() {
        Ok("fencing scripts passed".to_string())
    } else {
        Err(failures.join("\n"))
    }
}

// ---------------------------------------------------------------------------
// Epoch recovery drill
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct EpochDrillStats {
    pub stall_reports: u64,
    pub repairs: u64,
    pub first_report_within_window: bool,
    pub waiter_commits: u64,
    pub dead_op_committed: bool,
    pub linearizable: bool,
}

/// Kills the lock holder mid-critical-section with four waiters queued;
/// the stall must be detected within one watch window, the memory node
/// repairs the lock, and every waiter completes exactly once.
pub fn epoch_drill() -> EpochDrillStats {
    let window = 1000;
    let cfg = HarnessCfg {
        record_events: true,
        lock: LockConfig {
            max_duration_steps: window,
            ..Default::default()
        },
        ..Default::default()
    };
    let mut h = Harness::new(&cfg);
    let mode = plain(ModeKind::Mcs);
    let holder = h.spawn_ops(0, mode, vec![OneOp::Update(0, 666)]);
    let waiters: Vec<ClientId> = (0..4)
        .map(|i| h.spawn_ops(0, mode, vec![OneOp::Update(0, 700 + i)]))
        .collect();
    // holder acquires and stops inside its critical section
    assert_eq!(h.drive(holder, "verb:ptr-cas"), DriveEnd::ReachedLabel);
    for w in &waiters {
        assert_eq!(h.drive_to_park(*w), DriveEnd::Parked);
    }
    let parked_at = h.now();
    h.kill(holder);
    assert_eq!(h.run_all(), RunEnd::AllDone);

    let events = h.world.events_snapshot();
    let stall_reports = events
        .iter()
        .filter(|e| matches!(e, Event::StallReported { .. }))
        .count() as u64;
    let first_report = events.iter().find_map(|e| match e {
        Event::StallReported { step, .. } => Some(*step),
        _ => None,
    });
    let repairs = h.world.pool.repairs();
    let history = h.history();
    let waiter_commits = history
        .iter()
        .filter(|r| waiters.iter().any(|w| w.0 == r.client) && r.result == RecResult::Ok)
        .count() as u64;
    let dead_op_committed = history.iter().any(|r| r.client == holder.0);

    h.fresh_phase();
    h.spawn_ops(0, plain(ModeKind::Osync), vec![OneOp::Search(0)]);
    assert_eq!(h.run_all(), RunEnd::AllDone);
    let linearizable = h.check_history().passed();

    EpochDrillStats {
        stall_reports,
        repairs,
        first_report_within_window: first_report
            .map(|s| s <= parked_at + window + 8)
            .unwrap_or(false),
        waiter_commits,
        dead_op_committed,
        linearizable,
    }
}
