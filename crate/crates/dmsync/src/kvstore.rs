//! Pointer-array KV application: one 64-bit data pointer per key, swung by
//! compare-and-swap to commit out-of-place updates, with a lock entry
//! alongside each pointer for the pessimistic modes.
//!
//! A pointer word packs a 60-bit block reference (0 = key absent) with a
//! 4-bit version in the low bits. The version advances exactly when a
//! delete completes, fencing updates that were initiated against the
//! deleted generation out of the wait queue.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::casync::{LwcEnter, SyncMode};
use crate::fabric::ClientId;
use crate::gwc::{batch_final_release, executor_handback, try_lock_and_wc, WcOutcome};
use crate::mcslock::{
    acquire, acquire_delete, bump_epoch, release, AcquireOutcome, LockRef, LOCK_ENTRY_BYTES,
};
use crate::mempool::{Address, KvArena, MemPool, PoolError, VerbCounters, DEFAULT_KV_CHUNK};
use crate::runtime::{Ctx, VerbUse};
use crate::world::Event;

pub const PTR_VERSION_MASK: u64 = 0xF;
pub const KV_BLOCK_BYTES: u64 = 16;

pub fn pack_ptr(block_ref: u64, version: u8) -> u64 {
    debug_assert!(block_ref < (1 << 60));
    (block_ref << 4) | (version as u64 & PTR_VERSION_MASK)
}

pub fn ptr_block(word: u64) -> u64 {
    word >> 4
}

pub fn ptr_version(word: u64) -> u8 {
    (word & PTR_VERSION_MASK) as u8
}

pub fn block_addr(block_ref: u64) -> Address {
    Address::from_packed(block_ref)
}

/// Synchronization mode of a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModeKind {
    /// Lock-free optimistic: retry the pointer swap until it lands.
    Osync,
    /// Optimistic with truncated exponential backoff between retries.
    CasBackoff,
    /// Every update goes through the MCS lock.
    Mcs,
    /// Contention-aware arbitration with global write combining.
    Cider,
}

impl ModeKind {
    pub fn name(&self) -> &'static str {
        match self {
            ModeKind::Osync => "osync",
            ModeKind::CasBackoff => "cas_backoff",
            ModeKind::Mcs => "mcs",
            ModeKind::Cider => "cider",
        }
    }

    pub fn parse(s: &str) -> Option<ModeKind> {
        match s {
            "osync" => Some(ModeKind::Osync),
            "cas_backoff" => Some(ModeKind::CasBackoff),
            "mcs" => Some(ModeKind::Mcs),
            "cider" => Some(ModeKind::Cider),
            _ => None,
        }
    }

    /// Whether the paper-style baseline setup runs this mode with local
    /// write combining.
    pub fn default_local_wc(&self) -> bool {
        !matches!(self, ModeKind::Cider)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mode {
    pub kind: ModeKind,
    pub local_wc: bool,
}

impl Mode {
    pub fn new(kind: ModeKind) -> Self {
        Self {
            kind,
            local_wc: kind.default_local_wc(),
        }
    }

    pub fn with_local_wc(kind: ModeKind, local_wc: bool) -> Self {
        Self { kind, local_wc }
    }
}

enum FenceEnd {
    /// The fencing delete committed; the key is now absent.
    Deleted,
    /// The key was deleted and re-inserted; carries the fresh pointer word.
    Recreated(u64),
}

/// Operation outcome. `Fenced` is an `Invalid` whose cause was a version
/// fence; callers treat it as invalid, metrics keep it distinct.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpResult {
    Ok(Option<u64>),
    Invalid,
    Fenced,
}

pub const RESULT_OK: u16 = 0;
pub const RESULT_INVALID: u16 = 1;
pub const RESULT_FENCED: u16 = 2;

impl OpResult {
    pub fn is_ok(&self) -> bool {
        matches!(self, OpResult::Ok(_))
    }

    pub fn code(&self) -> u16 {
        match self {
            OpResult::Ok(_) => RESULT_OK,
            OpResult::Invalid => RESULT_INVALID,
            OpResult::Fenced => RESULT_FENCED,
        }
    }

    pub fn from_code(code: u16) -> OpResult {
        match code {
            RESULT_OK => OpResult::Ok(None),
            RESULT_FENCED => OpResult::Fenced,
            _ => OpResult::Invalid,
        }
    }
}

/// The pointer array plus its adjacent lock-entry table.
pub struct PointerArray {
    pub slots: Address,
    pub locks: Address,
    pub count: u64,
}

impl PointerArray {
    /// Allocates the array and inserts the first `prefill * count` keys
    /// with value = key. Population I/O is ordinary verb traffic; callers
    /// snapshot the counters afterwards.
    pub fn build(pool: &MemPool, count: u64, prefill: f64) -> Result<PointerArray, PoolError> {
        assert!(count >= 1);
        let slots = pool.alloc_region(count * 8)?;
        let locks = pool.alloc_region(count * LOCK_ENTRY_BYTES)?;
        let array = PointerArray {
            slots,
            locks,
            count,
        };
        let n_prefill = (count as f64 * prefill).round() as u64;
        let mut arena = KvArena::new(DEFAULT_KV_CHUNK);
        for key in 0..n_prefill.min(count) {
            let block = arena.alloc(pool, KV_BLOCK_BYTES)?;
            let mut bytes = [0u8; 16];
            bytes[..8].copy_from_slice(&key.to_le_bytes());
            bytes[8..].copy_from_slice(&key.to_le_bytes());
            pool.write(block, &bytes)?;
            let word = pack_ptr(block.packed(), 0);
            pool.write(array.slot_addr(key), &word.to_le_bytes())?;
        }
        Ok(array)
    }

    pub fn slot_addr(&self, key: u64) -> Address {
        debug_assert!(key < self.count);
        self.slots.add(key * 8)
    }

    pub fn lock_ref(&self, key: u64) -> LockRef {
        debug_assert!(key < self.count);
        LockRef::new(self.locks.add(key * LOCK_ENTRY_BYTES))
    }
}

/// Per-client operation tallies, merged into the run report.
#[derive(Clone, Debug, Default)]
pub struct ClientMetrics {
    pub issued: u64,
    pub committed: u64,
    pub invalid: u64,
    pub fenced: u64,
    pub searches: u64,
    pub inserts: u64,
    pub updates: u64,
    pub deletes: u64,
    pub optimistic_decisions: u64,
    pub pessimistic_decisions: u64,
    pub upd_committed_optimistic: u64,
    pub upd_committed_pessimistic: u64,
    pub solo_batches: u64,
    pub executor_batches: u64,
    pub combined_global: u64,
    pub combined_local: u64,
    pub ptr_cas_attempts: u64,
    pub ptr_cas_failures: u64,
    pub retry_histogram: BTreeMap<u32, u64>,
    pub batch_sizes: BTreeMap<u16, u64>,
    pub per_key_pessimistic: BTreeMap<u64, u64>,
    pub latencies: Vec<u64>,
    pub verb_classes: [u64; crate::runtime::VERB_USE_COUNT],
}

impl ClientMetrics {
    fn tally(&mut self, res: &OpResult) {
        self.issued += 1;
        match res {
            OpResult::Ok(_) => self.committed += 1,
            OpResult::Invalid => self.invalid += 1,
            OpResult::Fenced => self.fenced += 1,
        }
    }

    pub fn merge(&mut self, other: &ClientMetrics) {
        self.issued += other.issued;
        self.committed += other.committed;
        self.invalid += other.invalid;
        self.fenced += other.fenced;
        self.searches += other.searches;
        self.inserts += other.inserts;
        self.updates += other.updates;
        self.deletes += other.deletes;
        self.optimistic_decisions += other.optimistic_decisions;
        self.pessimistic_decisions += other.pessimistic_decisions;
        self.upd_committed_optimistic += other.upd_committed_optimistic;
        self.upd_committed_pessimistic += other.upd_committed_pessimistic;
        self.solo_batches += other.solo_batches;
        self.executor_batches += other.executor_batches;
        self.combined_global += other.combined_global;
        self.combined_local += other.combined_local;
        self.ptr_cas_attempts += other.ptr_cas_attempts;
        self.ptr_cas_failures += other.ptr_cas_failures;
        for (k, v) in &other.retry_histogram {
            *self.retry_histogram.entry(*k).or_default() += v;
        }
        for (k, v) in &other.batch_sizes {
            *self.batch_sizes.entry(*k).or_default() += v;
        }
        for (k, v) in &other.per_key_pessimistic {
            *self.per_key_pessimistic.entry(*k).or_default() += v;
        }
        self.latencies.extend_from_slice(&other.latencies);
        for i in 0..self.verb_classes.len() {
            self.verb_classes[i] += other.verb_classes[i];
        }
    }
}

/// Pool verbs spent per committed operation: the hardware-free throughput
/// proxy used for mode comparisons.
pub fn verbs_per_committed_op(stats: &VerbCounters, committed: u64) -> f64 {
    assert!(committed > 0);
    stats.total_verbs() as f64 / committed as f64
}

/// One logical client's handle on the store.
pub struct KvSession<'a> {
    pub ctx: &'a Ctx,
    pub array: Arc<PointerArray>,
    pub mode: Mode,
    pub metrics: ClientMetrics,
    arena: KvArena,
    backoff_rng: ChaCha8Rng,
    backoff_cap: u32,
    rewrite_on_retry: bool,
}

impl<'a> KvSession<'a> {
    pub fn new(ctx: &'a Ctx, array: Arc<PointerArray>, mode: Mode) -> Self {
        let seed = 0x5e55_1000 ^ ctx.id.0 as u64;
        Self {
            ctx,
            array,
            mode,
            metrics: ClientMetrics::default(),
            arena: KvArena::new(DEFAULT_KV_CHUNK),
            backoff_rng: ChaCha8Rng::seed_from_u64(seed),
            backoff_cap: 64,
            rewrite_on_retry: false,
        }
    }

    /// Re-writes the KV block on every swap retry instead of reusing the
    /// first block; for sensitivity runs.
    pub fn set_rewrite_on_retry(&mut self, on: bool) {
        self.rewrite_on_retry = on;
    }

    pub async fn search(&mut self, key: u64) -> OpResult {
        self.metrics.searches += 1;
        let word = self
            .ctx
            .read_word(self.array.slot_addr(key), VerbUse::PtrRead, "verb:ptr-read")
            .await;
        let res = if ptr_block(word) == 0 {
            OpResult::Invalid
        } else {
            let bytes = self
                .ctx
                .read_bytes(
                    block_addr(ptr_block(word)),
                    KV_BLOCK_BYTES,
                    VerbUse::KvRead,
                    "verb:kv-read",
                )
                .await;
            let mut k = [0u8; 8];
            let mut v = [0u8; 8];
            k.copy_from_slice(&bytes[..8]);
            v.copy_from_slice(&bytes[8..16]);
            debug_assert_eq!(u64::from_le_bytes(k), key, "block key mismatch");
            OpResult::Ok(Some(u64::from_le_bytes(v)))
        };
        self.metrics.tally(&res);
        res
    }

    pub async fn insert(&mut self, key: u64, value: u64) -> OpResult {
        let old = self
            .ctx
            .read_word(self.array.slot_addr(key), VerbUse::PtrRead, "verb:ptr-read")
            .await;
        self.insert_from(key, old, value).await
    }

    pub async fn update(&mut self, key: u64, value: u64) -> OpResult {
        let old = self
            .ctx
            .read_word(self.array.slot_addr(key), VerbUse::PtrRead, "verb:ptr-read")
            .await;
        self.update_from(key, old, value).await
    }

    /// Workload "write": update the key if present, insert it otherwise,
    /// off a single pointer read.
    pub async fn write_upsert(&mut self, key: u64, value: u64) -> OpResult {
        self.write_upsert_kinded(key, value).await.1
    }

    /// Like [`write_upsert`], also reporting which operation actually ran.
    ///
    /// [`write_upsert`]: KvSession::write_upsert
    pub async fn write_upsert_kinded(
        &mut self,
        key: u64,
        value: u64,
    ) -> (crate::lincheck::OpKind, OpResult) {
        let old = self
            .ctx
            .read_word(self.array.slot_addr(key), VerbUse::PtrRead, "verb:ptr-read")
            .await;
        if ptr_block(old) == 0 {
            (
                crate::lincheck::OpKind::Insert,
                self.insert_from(key, old, value).await,
            )
        } else {
            (
                crate::lincheck::OpKind::Update,
                self.update_from(key, old, value).await,
            )
        }
    }

    pub async fn delete(&mut self, key: u64) -> OpResult {
        self.metrics.deletes += 1;
        let slot = self.array.slot_addr(key);
        let lock = self.array.lock_ref(key);
        loop {
            let old = self
                .ctx
                .read_word(slot, VerbUse::PtrRead, "verb:ptr-read")
                .await;
            if ptr_block(old) == 0 {
                let res = OpResult::Invalid;
                self.metrics.tally(&res);
                return res;
            }
            let ver = ptr_version(old);
            match acquire_delete(self.ctx, lock, ver).await {
                AcquireOutcome::VersionMismatch => {
                    // another delete is in flight on this generation; let it
                    // finish and re-read the pointer
                    self.ctx.sleep_steps(8, "delete:retry").await;
                    continue;
                }
                AcquireOutcome::Owner => {
                    self.cs_enter(lock);
                    let res = self.delete_swing(slot, old).await;
                    self.cs_exit(lock);
                    release(self.ctx, lock).await;
                    bump_epoch(self.ctx, lock).await;
                    self.metrics.tally(&res);
                    return res;
                }
                AcquireOutcome::Executor { coordinator } => {
                    // tail delete absorbing a batch of earlier updates
                    self.cs_enter(lock);
                    let res = self.delete_swing(slot, old).await;
                    self.cs_exit(lock);
                    executor_handback(self.ctx, lock, coordinator, res.code()).await;
                    let size = batch_final_release(self.ctx, lock).await;
                    self.note_batch(key, size, 0, res.code());
                    self.metrics.executor_batches += 1;
                    self.metrics.tally(&res);
                    return res;
                }
                AcquireOutcome::Combined { result, .. } => {
                    // only reachable when version fencing is disabled by
                    // fault injection; surface the propagated result
                    let res = OpResult::from_code(result);
                    self.metrics.tally(&res);
                    return res;
                }
            }
        }
    }

    // --- internals --------------------------------------------------------

    async fn write_block(&mut self, key: u64, value: u64) -> Address {
        let block = self
            .arena
            .alloc(&self.ctx.world().pool, KV_BLOCK_BYTES)
            .expect("kv arena exhausted");
        let mut bytes = [0u8; 16];
        bytes[..8].copy_from_slice(&key.to_le_bytes());
        bytes[8..].copy_from_slice(&value.to_le_bytes());
        self.ctx
            .write_bytes(block, &bytes, VerbUse::KvWrite, "verb:kv-write")
            .await;
        block
    }

    async fn insert_from(&mut self, key: u64, old: u64, value: u64) -> OpResult {
        self.metrics.inserts += 1;
        let res = if ptr_block(old) != 0 {
            OpResult::Invalid
        } else {
            let block = self.write_block(key, value).await;
            let newp = pack_ptr(block.packed(), ptr_version(old));
            let prior = self
                .ctx
                .cas(
                    self.array.slot_addr(key),
                    old,
                    newp,
                    VerbUse::PtrCas,
                    "verb:ptr-cas",
                )
                .await;
            self.metrics.ptr_cas_attempts += 1;
            if prior == old {
                OpResult::Ok(None)
            } else {
                // lost the empty slot; never retried under a new expectation
                self.metrics.ptr_cas_failures += 1;
                OpResult::Invalid
            }
        };
        self.metrics.tally(&res);
        res
    }

    async fn update_from(&mut self, key: u64, old: u64, value: u64) -> OpResult {
        self.metrics.updates += 1;
        let res = if ptr_block(old) == 0 {
            OpResult::Invalid
        } else if self.mode.local_wc {
            self.update_local_wc(key, old, value).await
        } else {
            self.update_dispatch(key, old, value).await
        };
        self.metrics.tally(&res);
        res
    }

    /// A lock acquisition was rejected because a delete owns this pointer
    /// generation. The rejection may not surface before the delete's effect
    /// is observable, so poll the pointer until it either empties (the
    /// delete landed) or moves to a new generation (a re-insert landed).
    async fn fence_wait(&mut self, key: u64, ver: u8) -> FenceEnd {
        let slot = self.array.slot_addr(key);
        loop {
            let cur = self
                .ctx
                .read_word(slot, VerbUse::PtrRead, "verb:ptr-read")
                .await;
            if ptr_block(cur) == 0 {
                return FenceEnd::Deleted;
            }
            if ptr_version(cur) != ver {
                return FenceEnd::Recreated(cur);
            }
            self.ctx.sleep_steps(8, "fence:wait").await;
        }
    }

    /// Local write combining wrapper: first same-node writer per pointer
    /// becomes the combiner and commits the last buffered value; merged
    /// writers block and adopt its result.
    async fn update_local_wc(&mut self, key: u64, old: u64, value: u64) -> OpResult {
        let world = self.ctx.world().clone();
        let table = world.local_wc(self.ctx.node);
        let ptr_key = self.array.slot_addr(key).packed();
        loop {
            match table.enter(self.ctx.id, ptr_key, value) {
                LwcEnter::Combiner => {
                    // leave the window open for one step so same-node
                    // writers in flight can merge
                    self.ctx.step_point("lwc:window").await;
                    let (merged_value, _merged) = table.close_window(ptr_key);
                    let res = self.update_dispatch(key, old, merged_value).await;
                    for client in table.exit(ptr_key, res.code()) {
                        world.wake(client);
                    }
                    return res;
                }
                LwcEnter::Waiter(ticket) => {
                    while !ticket.is_done() {
                        self.ctx.wait_event("lwc:wait", None).await;
                    }
                    self.metrics.combined_local += 1;
                    return OpResult::from_code(ticket.result());
                }
                LwcEnter::Busy => {
                    self.ctx.wait_event("lwc:busy", None).await;
                }
            }
        }
    }

    async fn update_dispatch(&mut self, key: u64, old: u64, value: u64) -> OpResult {
        match self.mode.kind {
            ModeKind::Osync => {
                let (res, _retries) = self.update_optimistic(key, old, value, false).await;
                res
            }
            ModeKind::CasBackoff => {
                let (res, _retries) = self.update_optimistic(key, old, value, true).await;
                res
            }
            ModeKind::Mcs => self.update_locked(key, old, value).await,
            ModeKind::Cider => self.update_cider(key, old, value).await,
        }
    }

    /// Out-of-place write then pointer swap, retried until it lands or the
    /// key's generation moves away underneath.
    async fn update_optimistic(
        &mut self,
        key: u64,
        mut old: u64,
        value: u64,
        backoff: bool,
    ) -> (OpResult, u32) {
        let slot = self.array.slot_addr(key);
        let ver = ptr_version(old);
        let mut block = self.write_block(key, value).await;
        let mut fails: u32 = 0;
        loop {
            let newp = pack_ptr(block.packed(), ver);
            let prior = self
                .ctx
                .cas(slot, old, newp, VerbUse::PtrCas, "verb:ptr-cas")
                .await;
            self.metrics.ptr_cas_attempts += 1;
            if prior == old {
                return (OpResult::Ok(None), fails);
            }
            fails += 1;
            self.metrics.ptr_cas_failures += 1;
            if ptr_block(prior) == 0 {
                return (OpResult::Invalid, fails);
            }
            if ptr_version(prior) != ver {
                return (OpResult::Fenced, fails);
            }
            old = prior;
            if backoff {
                let cap = self.backoff_cap.min(1u32 << fails.min(16)) as u64;
                let steps = self.backoff_rng.gen_range(1..=cap.max(1));
                self.ctx.sleep_steps(steps, "backoff").await;
            }
            if self.rewrite_on_retry {
                block = self.write_block(key, value).await;
            }
        }
    }

    /// Pointer swap under the lock: the version cannot move while we hold
    /// it, so the swap only ever retries against optimistic racers. The
    /// moved-version and emptied-block exits are reachable only when the
    /// version fence is disabled by fault injection.
    async fn swing_locked(&mut self, key: u64, mut old: u64, block_ref: u64) -> OpResult {
        let slot = self.array.slot_addr(key);
        let ver = ptr_version(old);
        loop {
            let newp = pack_ptr(block_ref, ver);
            let prior = self
                .ctx
                .cas(slot, old, newp, VerbUse::PtrCas, "verb:ptr-cas")
                .await;
            self.metrics.ptr_cas_attempts += 1;
            if prior == old {
                return OpResult::Ok(None);
            }
            self.metrics.ptr_cas_failures += 1;
            if ptr_block(prior) == 0 {
                return OpResult::Invalid;
            }
            if ptr_version(prior) != ver {
                return OpResult::Fenced;
            }
            old = prior;
        }
    }

    async fn delete_swing(&mut self, slot: Address, mut old: u64) -> OpResult {
        let ver = ptr_version(old);
        loop {
            let newp = pack_ptr(0, ver.wrapping_add(1) & 0xF);
            let prior = self
                .ctx
                .cas(slot, old, newp, VerbUse::PtrCas, "verb:ptr-cas")
                .await;
            self.metrics.ptr_cas_attempts += 1;
            if prior == old {
                return OpResult::Ok(None);
            }
            self.metrics.ptr_cas_failures += 1;
            old = prior;
        }
    }

    async fn update_locked(&mut self, key: u64, mut old: u64, value: u64) -> OpResult {
        let lock = self.array.lock_ref(key);
        loop {
            match acquire(self.ctx, lock, ptr_version(old)).await {
                AcquireOutcome::VersionMismatch => match self.fence_wait(key, ptr_version(old)).await
                {
                    FenceEnd::Deleted => return OpResult::Fenced,
                    FenceEnd::Recreated(cur) => old = cur,
                },
                AcquireOutcome::Owner => {
                    self.cs_enter(lock);
                    let block = self.write_block(key, value).await;
                    let res = self.swing_locked(key, old, block.packed()).await;
                    self.cs_exit(lock);
                    release(self.ctx, lock).await;
                    bump_epoch(self.ctx, lock).await;
                    return res;
                }
                AcquireOutcome::Executor { .. } | AcquireOutcome::Combined { .. } => {
                    unreachable!("no write combining without a coordinator in this mode")
                }
            }
        }
    }

    async fn update_cider(&mut self, key: u64, old: u64, value: u64) -> OpResult {
        let world = self.ctx.world().clone();
        let ledger = world.ledger(self.ctx.node);
        let ptr_key = self.array.slot_addr(key).packed();
        match ledger.decide_mode(ptr_key) {
            SyncMode::Optimistic => {
                self.metrics.optimistic_decisions += 1;
                let (res, retries) = self.update_optimistic(key, old, value, false).await;
                if res.is_ok() {
                    ledger.after_optimistic(ptr_key, retries);
                    *self.metrics.retry_histogram.entry(retries).or_default() += 1;
                    self.metrics.upd_committed_optimistic += 1;
                }
                res
            }
            SyncMode::Pessimistic => {
                self.metrics.pessimistic_decisions += 1;
                *self.metrics.per_key_pessimistic.entry(key).or_default() += 1;
                let lock = self.array.lock_ref(key);
                let mut old = old;
                loop {
                    match try_lock_and_wc(self.ctx, lock, ptr_version(old)).await {
                        WcOutcome::VersionMismatch => {
                            match self.fence_wait(key, ptr_version(old)).await {
                                FenceEnd::Deleted => return OpResult::Fenced,
                                FenceEnd::Recreated(cur) => old = cur,
                            }
                        }
                        other => return self.finish_pessimistic(key, old, value, other).await,
                    }
                }
            }
        }
    }

    async fn finish_pessimistic(
        &mut self,
        key: u64,
        old: u64,
        value: u64,
        outcome: WcOutcome,
    ) -> OpResult {
        let world = self.ctx.world().clone();
        let ledger = world.ledger(self.ctx.node);
        let ptr_key = self.array.slot_addr(key).packed();
        let lock = self.array.lock_ref(key);
        match outcome {
            WcOutcome::VersionMismatch => unreachable!("handled by the caller"),
            WcOutcome::ExecutorGo { coordinator: None } => {
                self.cs_enter(lock);
                let block = self.write_block(key, value).await;
                let res = self.swing_locked(key, old, block.packed()).await;
                self.cs_exit(lock);
                release(self.ctx, lock).await;
                bump_epoch(self.ctx, lock).await;
                ledger.after_pessimistic(ptr_key, 1);
                self.metrics.solo_batches += 1;
                *self.metrics.batch_sizes.entry(1).or_default() += 1;
                if res.is_ok() {
                    self.metrics.upd_committed_pessimistic += 1;
                }
                res
            }
            WcOutcome::ExecutorGo {
                coordinator: Some(coordinator),
            } => {
                self.cs_enter(lock);
                let block = self.write_block(key, value).await;
                let res = self.swing_locked(key, old, block.packed()).await;
                self.cs_exit(lock);
                executor_handback(self.ctx, lock, coordinator, res.code()).await;
                let size = batch_final_release(self.ctx, lock).await;
                self.note_batch(key, size, value, res.code());
                ledger.after_pessimistic(ptr_key, size as u32);
                self.metrics.executor_batches += 1;
                *self.metrics.batch_sizes.entry(size).or_default() += 1;
                if res.is_ok() {
                    self.metrics.upd_committed_pessimistic += 1;
                }
                res
            }
            WcOutcome::Combined { result, batch } => {
                ledger.after_pessimistic(ptr_key, batch as u32);
                self.metrics.combined_global += 1;
                let res = OpResult::from_code(result);
                if res.is_ok() {
                    self.metrics.upd_committed_pessimistic += 1;
                }
                res
            }
        }
    }

    fn cs_enter(&self, lock: LockRef) {
        let world = self.ctx.world();
        world.shadow_enter(lock.key(), self.ctx.id.0);
        world.emit(Event::CsEnter {
            lock: lock.key(),
            client: self.ctx.id.0,
            step: self.ctx.now(),
        });
    }

    fn cs_exit(&self, lock: LockRef) {
        let world = self.ctx.world();
        world.emit(Event::CsExit {
            lock: lock.key(),
            client: self.ctx.id.0,
            step: self.ctx.now(),
        });
        world.shadow_exit(lock.key(), self.ctx.id.0);
    }

    fn note_batch(&self, key: u64, size: u16, value: u64, result: u16) {
        let world = self.ctx.world();
        world.emit(Event::BatchCommitted {
            lock: self.array.lock_ref(key).key(),
            executor: self.ctx.id.0,
            size,
            value,
            result,
        });
    }
}

/// Identity of a session's owner, for tests that drive sessions directly.
pub fn session_client(s: &KvSession<'_>) -> ClientId {
    s.ctx.id
}
