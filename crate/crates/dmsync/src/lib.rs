//! Desk-scale simulator for synchronization protocols on disaggregated
//! memory: a one-sided-verb memory pool, a distributed MCS lock with
//! version fencing and epoch-based repair, global write combining over the
//! wait queue, contention-aware mode arbitration, and a pointer-array KV
//! store with a benchmark harness and linearizability oracle on top.

pub mod bench;
pub mod casync;
pub mod cli;
pub mod fabric;
pub mod gwc;
pub mod kvstore;
pub mod lincheck;
pub mod mcslock;
pub mod mempool;
pub mod runtime;
pub mod verify;
pub mod world;

pub use fabric::ClientId;
pub use kvstore::{Mode, ModeKind, OpResult};
pub use mempool::{Address, MemPool, VerbCounters};
pub use runtime::{Ctx, SchedPolicy, Schedule, Sim, SimMode};
pub use world::{World, WorldConfig};
