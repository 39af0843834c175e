//! Distributed MCS lock over the memory pool.
//!
//! A lock occupies 16 bytes of pool memory: one word packing the queue tail
//! (bits 63..4) with a 4-bit version counter (bits 3..0), and one epoch word
//! used for fault detection. Acquisition is a single masked compare-and-swap
//! that checks the version bits while unconditionally swapping the tail, so
//! a stale-version caller is rejected without ever entering the queue.
//! Waiters spin on their own client-local lock node; between enqueue and
//! handover a healthy waiter issues no pool verbs at all.
//!
//! The epoch word counts releases in its low 48 bits and repair generations
//! in its high 16. A waiter that sees the whole word frozen across a full
//! watch window reports the lock to the memory node, which resets the tail
//! and advances the generation; waiters observing a generation change
//! abandon their queue episode and re-acquire from scratch.

use crate::fabric::{ClientId, LockField, MsgClass};
use crate::mempool::{epoch_generation, Address};
use crate::runtime::{Ctx, VerbUse};
use crate::world::Event;

pub const VERSION_MASK: u64 = 0xF;
pub const TAIL_MASK: u64 = !0xFu64;
pub const TAIL_SHIFT: u32 = 4;
pub const LOCK_ENTRY_BYTES: u64 = 16;

pub const LOCKED_WAIT: u32 = 0;
pub const LOCKED_OWNER: u32 = 1;
/// Handover value telling a waiter its update was combined by an executor.
pub const LOCKED_COMBINED: u32 = 0x3;

pub fn pack_entry(tail: u16, version: u8) -> u64 {
    ((tail as u64) << TAIL_SHIFT) | (version as u64 & VERSION_MASK)
}

pub fn entry_tail(word: u64) -> u16 {
    (word >> TAIL_SHIFT) as u16
}

pub fn entry_version(word: u64) -> u8 {
    (word & VERSION_MASK) as u8
}

/// Handle to one lock's pool-resident entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LockRef {
    pub entry: Address,
}

impl LockRef {
    pub fn new(entry: Address) -> Self {
        Self { entry }
    }

    pub fn epoch_addr(&self) -> Address {
        self.entry.add(8)
    }

    /// Stable key for lock-node tables and events.
    pub fn key(&self) -> u64 {
        self.entry.packed()
    }
}

/// Test hooks that disable individual protocol steps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FaultInjection {
    #[default]
    None,
    /// Deletes enqueue without advancing the lock-entry version, so stale
    /// updates are no longer fenced out of the wait queue.
    SkipDeleteVersionBump,
}

#[derive(Clone, Copy, Debug)]
pub struct LockConfig {
    /// Watch window in scheduler steps (deterministic mode).
    pub max_duration_steps: u64,
    /// Watch window in wall-clock milliseconds (free-running mode).
    pub max_duration_millis: u64,
    pub fault_detection: bool,
    pub inject: FaultInjection,
}

impl Default for LockConfig {
    fn default() -> Self {
        Self {
            max_duration_steps: 1000,
            max_duration_millis: 50,
            fault_detection: true,
            inject: FaultInjection::None,
        }
    }
}

/// Outcome of a lock acquisition.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AcquireOutcome {
    Owner,
    /// The entry's version disagreed with the caller's expectation; the
    /// caller was not enqueued.
    VersionMismatch,
    /// The caller's operation was absorbed by a combining executor; carries
    /// the propagated result and this member's position in the batch.
    Combined { result: u16, batch: u16 },
    /// The caller was picked as the executor of a combined batch and now
    /// holds the lock on the coordinator's behalf.
    Executor { coordinator: ClientId },
}

pub(crate) enum Wait {
    Grant(Grant),
    /// The queue was reset by lock repair; the episode must be abandoned.
    Repaired,
}

pub(crate) enum Grant {
    Owner,
    Executor { coordinator: ClientId },
    Combined { result: u16, batch: u16 },
}

/// Enqueue via one masked compare-and-swap: compare the version bits,
/// get-and-set the tail. Returns the previous tail, or `None` on a version
/// mismatch (nothing was stored). On success with a nonzero predecessor,
/// the linkage message to the predecessor is issued immediately.
pub(crate) async fn enqueue(
    ctx: &Ctx,
    lock: LockRef,
    expected_version: u8,
    delete: bool,
) -> Option<u16> {
    let world = ctx.world().clone();
    let node = world.fabric.node_for(ctx.id, lock.key());
    node.reset();
    let me = ctx.id.0;
    let bump = delete && world.lock_cfg.inject != FaultInjection::SkipDeleteVersionBump;
    let (swap, swap_mask) = if bump {
        (
            pack_entry(me, expected_version.wrapping_add(1) & 0xF),
            TAIL_MASK | VERSION_MASK,
        )
    } else {
        (pack_entry(me, 0), TAIL_MASK)
    };
    let label = if delete {
        "verb:enqueue-delete"
    } else {
        "verb:enqueue"
    };
    let prior = ctx
        .masked_cas(
            lock.entry,
            expected_version as u64,
            VERSION_MASK,
            swap,
            swap_mask,
            VerbUse::EntryEnqueue,
            label,
        )
        .await;
    if entry_version(prior) != expected_version {
        return None;
    }
    world.emit(Event::Enqueued {
        lock: lock.key(),
        client: me,
    });
    let prev_tail = entry_tail(prior);
    if prev_tail != 0 {
        world
            .fabric
            .write_peer(
                ClientId(prev_tail),
                lock.key(),
                &[(LockField::Next, me as u64)],
                MsgClass::EnqueueLink,
            )
            .expect("link write");
    }
    Some(prev_tail)
}

/// Spins on the local lock node until ownership arrives, the combined
/// result wave passes through, or the epoch watcher declares the queue
/// dead. Issues no pool verbs except the windowed epoch samples.
pub(crate) async fn wait_grant(ctx: &Ctx, lock: LockRef) -> Wait {
    let world = ctx.world().clone();
    let node = world.fabric.node_for(ctx.id, lock.key());
    let cfg = world.lock_cfg;
    let det = ctx.is_deterministic();
    let mut last_epoch: Option<u64> = None;
    let mut next_check: u64 = 0;
    if cfg.fault_detection && det {
        // sample at enqueue so a frozen epoch is detectable one window later
        let e0 = ctx
            .read_word(lock.epoch_addr(), VerbUse::EpochRead, "verb:epoch-read")
            .await;
        last_epoch = Some(e0);
        next_check = ctx.now() + cfg.max_duration_steps;
    }
    let mut wall = std::time::Instant::now();
    let verbs_at_wait = ctx.verbs_issued();
    loop {
        let locked = node.locked.load(std::sync::atomic::Ordering::SeqCst);
        if locked == LOCKED_OWNER {
            if world.events_enabled() {
                world.emit(Event::WaitVerbs {
                    lock: lock.key(),
                    client: ctx.id.0,
                    verbs: ctx.verbs_issued() - verbs_at_wait,
                });
            }
            let coordinator = node.coordinator.load(std::sync::atomic::Ordering::SeqCst);
            if coordinator != 0 {
                return Wait::Grant(Grant::Executor {
                    coordinator: ClientId(coordinator),
                });
            }
            return Wait::Grant(Grant::Owner);
        }
        if locked == LOCKED_COMBINED {
            return Wait::Grant(Grant::Combined {
                result: node.result.load(std::sync::atomic::Ordering::SeqCst),
                batch: node.batch.load(std::sync::atomic::Ordering::SeqCst),
            });
        }
        if !cfg.fault_detection {
            ctx.wait_event("wait:grant", None).await;
            continue;
        }
        if det {
            if ctx.now() >= next_check {
                let e = ctx
                    .read_word(lock.epoch_addr(), VerbUse::EpochRead, "verb:epoch-read")
                    .await;
                match check_epoch(ctx, lock, last_epoch, e).await {
                    EpochCheck::Dead => return Wait::Repaired,
                    EpochCheck::Live => {}
                }
                last_epoch = Some(e);
                next_check = ctx.now() + cfg.max_duration_steps;
            }
            ctx.wait_event("wait:grant", Some(next_check)).await;
        } else {
            if wall.elapsed().as_millis() as u64 >= cfg.max_duration_millis {
                let e = ctx
                    .read_word(lock.epoch_addr(), VerbUse::EpochRead, "verb:epoch-read")
                    .await;
                match check_epoch(ctx, lock, last_epoch, e).await {
                    EpochCheck::Dead => return Wait::Repaired,
                    EpochCheck::Live => {}
                }
                last_epoch = Some(e);
                wall = std::time::Instant::now();
            }
            ctx.wait_event("wait:grant", None).await;
        }
    }
}

enum EpochCheck {
    Live,
    Dead,
}

async fn check_epoch(ctx: &Ctx, lock: LockRef, prev: Option<u64>, current: u64) -> EpochCheck {
    let world = ctx.world().clone();
    let Some(prev) = prev else {
        return EpochCheck::Live;
    };
    if epoch_generation(current) != epoch_generation(prev) {
        // someone already repaired this lock; our queue is gone
        world.emit(Event::Abandoned {
            lock: lock.key(),
            client: ctx.id.0,
        });
        return EpochCheck::Dead;
    }
    if current == prev {
        // no release for a full window: report and let the MN reset it
        world.emit(Event::StallReported {
            lock: lock.key(),
            client: ctx.id.0,
            step: ctx.now(),
        });
        let repaired = world
            .pool
            .repair_lock(lock.entry, current)
            .expect("repair_lock");
        if repaired {
            world.shadow_revoke(lock.key());
            world.emit(Event::Repaired {
                lock: lock.key(),
                client: ctx.id.0,
                step: ctx.now(),
            });
        }
        world.emit(Event::Abandoned {
            lock: lock.key(),
            client: ctx.id.0,
        });
        return EpochCheck::Dead;
    }
    EpochCheck::Live
}

/// Forwards the combined-result wave to this client's queue successor,
/// incrementing the member count as it travels.
pub(crate) async fn forward_wave(ctx: &Ctx, lock: LockRef, result: u16, prefix: u16) {
    let world = ctx.world().clone();
    let node = world.fabric.node_for(ctx.id, lock.key());
    // a non-executor member always has a successor; its link may still be
    // in flight
    let succ = loop {
        let n = node.next.load(std::sync::atomic::Ordering::SeqCst);
        if n != 0 {
            break n as u16;
        }
        ctx.wait_event("wait:wave-next", None).await;
    };
    ctx.send_peer(
        ClientId(succ),
        lock.key(),
        &[
            (LockField::Batch, prefix as u64 + 1),
            (LockField::Result, result as u64),
            (LockField::Locked, LOCKED_COMBINED as u64),
        ],
        MsgClass::WcWave,
        "msg:wave",
    )
    .await;
}

/// Plain MCS acquisition, fenced by the entry version. Internally retries
/// after a lock repair; a version mismatch is surfaced to the caller.
pub async fn acquire(ctx: &Ctx, lock: LockRef, expected_version: u8) -> AcquireOutcome {
    acquire_inner(ctx, lock, expected_version, false).await
}

/// Delete acquisition: enqueue and advance the entry version in the same
/// masked compare-and-swap, so later updates carrying the old version are
/// rejected while the delete is in flight.
pub async fn acquire_delete(ctx: &Ctx, lock: LockRef, expected_version: u8) -> AcquireOutcome {
    acquire_inner(ctx, lock, expected_version, true).await
}

async fn acquire_inner(
    ctx: &Ctx,
    lock: LockRef,
    expected_version: u8,
    delete: bool,
) -> AcquireOutcome {
    let world = ctx.world().clone();
    loop {
        let Some(prev_tail) = enqueue(ctx, lock, expected_version, delete).await else {
            return AcquireOutcome::VersionMismatch;
        };
        if prev_tail == 0 {
            world.emit(Event::Granted {
                lock: lock.key(),
                client: ctx.id.0,
                role: "owner",
            });
            return AcquireOutcome::Owner;
        }
        match wait_grant(ctx, lock).await {
            Wait::Grant(Grant::Owner) => {
                world.emit(Event::Granted {
                    lock: lock.key(),
                    client: ctx.id.0,
                    role: "owner",
                });
                return AcquireOutcome::Owner;
            }
            Wait::Grant(Grant::Executor { coordinator }) => {
                world.emit(Event::Granted {
                    lock: lock.key(),
                    client: ctx.id.0,
                    role: "executor",
                });
                return AcquireOutcome::Executor { coordinator };
            }
            Wait::Grant(Grant::Combined { result, batch }) => {
                forward_wave(ctx, lock, result, batch).await;
                world.emit(Event::CombinedReturn {
                    lock: lock.key(),
                    client: ctx.id.0,
                    result,
                });
                return AcquireOutcome::Combined { result, batch };
            }
            Wait::Repaired => continue,
        }
    }
}

/// Releases the lock: clear the tail if nobody queued behind us, otherwise
/// hand ownership to the successor with one cross-node message.
pub async fn release(ctx: &Ctx, lock: LockRef) {
    let world = ctx.world().clone();
    let node = world.fabric.node_for(ctx.id, lock.key());
    let me = ctx.id.0;
    if node.next.load(std::sync::atomic::Ordering::SeqCst) == 0 {
        let prior = ctx
            .masked_cas(
                lock.entry,
                pack_entry(me, 0),
                TAIL_MASK,
                0,
                TAIL_MASK,
                VerbUse::EntryRelease,
                "verb:release-cas",
            )
            .await;
        if entry_tail(prior) == me {
            return;
        }
        // a successor swapped the tail before our clear; wait for its link
        let cfg = world.lock_cfg;
        let det = ctx.is_deterministic();
        let mut last_epoch: Option<u64> = None;
        let mut next_check = ctx.now() + cfg.max_duration_steps;
        let mut wall = std::time::Instant::now();
        while node.next.load(std::sync::atomic::Ordering::SeqCst) == 0 {
            if cfg.fault_detection && det && ctx.now() >= next_check {
                let e = ctx
                    .read_word(lock.epoch_addr(), VerbUse::EpochRead, "verb:epoch-read")
                    .await;
                if let EpochCheck::Dead = check_epoch(ctx, lock, last_epoch, e).await {
                    // queue reset under us; nothing left to hand over
                    return;
                }
                last_epoch = Some(e);
                next_check = ctx.now() + cfg.max_duration_steps;
            } else if cfg.fault_detection
                && !det
                && wall.elapsed().as_millis() as u64 >= cfg.max_duration_millis
            {
                let e = ctx
                    .read_word(lock.epoch_addr(), VerbUse::EpochRead, "verb:epoch-read")
                    .await;
                if let EpochCheck::Dead = check_epoch(ctx, lock, last_epoch, e).await {
                    return;
                }
                last_epoch = Some(e);
                wall = std::time::Instant::now();
            }
            let deadline = (cfg.fault_detection && det).then_some(next_check);
            ctx.wait_event("wait:successor", deadline).await;
        }
    }
    let succ = node.next.load(std::sync::atomic::Ordering::SeqCst) as u16;
    ctx.send_peer(
        ClientId(succ),
        lock.key(),
        &[(LockField::Locked, LOCKED_OWNER as u64)],
        MsgClass::Handover,
        "msg:handover",
    )
    .await;
}

/// Advances the release counter in the epoch word.
pub async fn bump_epoch(ctx: &Ctx, lock: LockRef) {
    ctx.faa(lock.epoch_addr(), 1, VerbUse::EpochBump, "verb:epoch-bump")
        .await;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WatchOutcome {
    Progress,
    Stalled,
}

/// Samples the epoch now and again after a full window; `Stalled` means no
/// release and no repair happened in between.
pub async fn watch_epoch(ctx: &Ctx, lock: LockRef, window_steps: u64) -> WatchOutcome {
    let e0 = ctx
        .read_word(lock.epoch_addr(), VerbUse::EpochRead, "verb:epoch-read")
        .await;
    ctx.sleep_steps(window_steps, "watch:epoch").await;
    let e1 = ctx
        .read_word(lock.epoch_addr(), VerbUse::EpochRead, "verb:epoch-read")
        .await;
    if e1 == e0 {
        WatchOutcome::Stalled
    } else {
        WatchOutcome::Progress
    }
}

/// Memory-node repair entry point for tests and tools: observes the current
/// epoch and resets the lock under that generation.
pub fn repair(world: &crate::world::World, lock: LockRef) -> bool {
    let e = world.pool.mn_peek(lock.epoch_addr()).expect("epoch peek");
    world.pool.repair_lock(lock.entry, e).expect("repair")
}
