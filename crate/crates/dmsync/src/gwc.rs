//! Global write combining over the MCS wait queue.
//!
//! The first lock holder that finds a successor becomes the coordinator of
//! a batch: it identifies the current queue tail by reading the lock entry
//! (one extra pool read), transfers ownership to that tail — the executor —
//! in one message, and waits for the result handback. The executor performs
//! the single real update for the whole batch; the coordinator then floods
//! the result down the queue with the `0x3` handover value, each member
//! forwarding it to its successor until the wave reaches the executor
//! again, which performs the batch-final release. A batch of k members
//! costs exactly one entry read plus two coordinator/executor messages plus
//! k-1 wave handovers, independent of k.

use crate::fabric::{ClientId, LockField, MsgClass};
use crate::mcslock::{
    enqueue, forward_wave, wait_grant, Grant, LockRef, Wait, LOCKED_OWNER, LOCKED_WAIT,
};
use crate::runtime::{Ctx, VerbUse};
use crate::world::Event;

/// Role a client played in one pessimistic episode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WcRole {
    Solo,
    Coordinator,
    Executor,
    Participant,
}

/// Outcome of a pessimistic update's lock-and-combine attempt.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WcOutcome {
    /// The caller must execute the update itself: either alone in the
    /// queue, or as the executor acting for `coordinator`'s batch.
    ExecutorGo { coordinator: Option<ClientId> },
    /// The caller's update was combined; `batch` is the batch size as known
    /// to this member (its wave prefix, always >= 2).
    Combined { result: u16, batch: u16 },
    VersionMismatch,
}

/// Lock acquisition with combining, for pessimistic updates.
pub async fn try_lock_and_wc(ctx: &Ctx, lock: LockRef, expected_version: u8) -> WcOutcome {
    let world = ctx.world().clone();
    loop {
        let Some(prev_tail) = enqueue(ctx, lock, expected_version, false).await else {
            return WcOutcome::VersionMismatch;
        };
        let grant = if prev_tail == 0 {
            Grant::Owner
        } else {
            match wait_grant(ctx, lock).await {
                Wait::Grant(g) => g,
                Wait::Repaired => continue,
            }
        };
        match grant {
            Grant::Owner => match coordinate_or_solo(ctx, lock).await {
                Some(outcome) => return outcome,
                None => continue, // repaired while waiting for the handback
            },
            Grant::Executor { coordinator } => {
                world.emit(Event::Granted {
                    lock: lock.key(),
                    client: ctx.id.0,
                    role: "executor",
                });
                return WcOutcome::ExecutorGo {
                    coordinator: Some(coordinator),
                };
            }
            Grant::Combined { result, batch } => {
                forward_wave(ctx, lock, result, batch).await;
                world.emit(Event::CombinedReturn {
                    lock: lock.key(),
                    client: ctx.id.0,
                    result,
                });
                return WcOutcome::Combined { result, batch };
            }
        }
    }
}

/// Holding the lock: run solo if the queue is empty behind us, otherwise
/// coordinate a batch. Returns `None` if the lock was repaired while
/// waiting for the executor's handback.
async fn coordinate_or_solo(ctx: &Ctx, lock: LockRef) -> Option<WcOutcome> {
    let world = ctx.world().clone();
    let node = world.fabric.node_for(ctx.id, lock.key());
    // one extra step so in-flight queue links can land before we look
    ctx.step_point("wc:check-next").await;
    if node.next.load(std::sync::atomic::Ordering::SeqCst) == 0 {
        world.emit(Event::Granted {
            lock: lock.key(),
            client: ctx.id.0,
            role: "solo",
        });
        return Some(WcOutcome::ExecutorGo { coordinator: None });
    }
    // coordinator: the tail at this read is the batch's executor
    let entry = ctx
        .read_word(lock.entry, VerbUse::EntryRead, "verb:entry-read")
        .await;
    let executor = crate::mcslock::entry_tail(entry);
    debug_assert_ne!(executor, ctx.id.0, "coordinator with successor cannot be tail");
    world.emit(Event::Coordinated {
        lock: lock.key(),
        coordinator: ctx.id.0,
        executor,
    });
    // hand the lock to the executor and wait for the result to come back
    node.locked
        .store(LOCKED_WAIT, std::sync::atomic::Ordering::SeqCst);
    ctx.send_peer(
        ClientId(executor),
        lock.key(),
        &[
            (LockField::Coordinator, ctx.id.0 as u64),
            (LockField::Locked, LOCKED_OWNER as u64),
        ],
        MsgClass::WcNotify,
        "msg:wc-notify",
    )
    .await;
    let result = match wait_grant(ctx, lock).await {
        Wait::Grant(Grant::Owner) => node.result.load(std::sync::atomic::Ordering::SeqCst),
        Wait::Grant(_) => unreachable!("coordinator receives only the handback"),
        Wait::Repaired => return None,
    };
    // start the result wave down our own successor chain
    let succ = node.next.load(std::sync::atomic::Ordering::SeqCst) as u16;
    ctx.send_peer(
        ClientId(succ),
        lock.key(),
        &[
            (LockField::Batch, 2),
            (LockField::Result, result as u64),
            (LockField::Locked, crate::mcslock::LOCKED_COMBINED as u64),
        ],
        MsgClass::WcWave,
        "msg:wave",
    )
    .await;
    world.emit(Event::CombinedReturn {
        lock: lock.key(),
        client: ctx.id.0,
        result,
    });
    // the batch holds at least this coordinator and its executor
    Some(WcOutcome::Combined { result, batch: 2 })
}

/// Executor -> coordinator: return the committed result and the lock.
pub async fn executor_handback(ctx: &Ctx, lock: LockRef, coordinator: ClientId, result: u16) {
    ctx.send_peer(
        coordinator,
        lock.key(),
        &[
            (LockField::Result, result as u64),
            (LockField::Locked, LOCKED_OWNER as u64),
        ],
        MsgClass::WcHandback,
        "msg:handback",
    )
    .await;
}

/// After the wave returns to the executor, close the batch with a normal
/// release and a single epoch bump. Returns the batch member count.
pub async fn batch_final_release(ctx: &Ctx, lock: LockRef) -> u16 {
    let world = ctx.world().clone();
    let node = world.fabric.node_for(ctx.id, lock.key());
    while node.locked.load(std::sync::atomic::Ordering::SeqCst) != crate::mcslock::LOCKED_COMBINED
    {
        ctx.wait_event("wait:wave", None).await;
    }
    let size = node.batch.load(std::sync::atomic::Ordering::SeqCst);
    crate::mcslock::release(ctx, lock).await;
    crate::mcslock::bump_epoch(ctx, lock).await;
    size
}
