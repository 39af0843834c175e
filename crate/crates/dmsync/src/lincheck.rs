//! Brute-force linearizability oracle for small KV histories.
//!
//! Searches for a total order of the recorded operations that respects
//! real-time precedence and replays correctly against the sequential KV
//! specification: INSERT fails on a present key; UPDATE, DELETE, and SEARCH
//! fail on an absent one. Exponential in the worst case, with memoization
//! on (linearized-set, store-state); intended for histories of at most a
//! dozen operations.

use std::collections::{BTreeMap, HashSet};

use serde::Serialize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum OpKind {
    Search,
    Insert,
    Update,
    Delete,
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Search => "search",
            OpKind::Insert => "insert",
            OpKind::Update => "update",
            OpKind::Delete => "delete",
        }
    }
}

/// Result as recorded in a history. Fenced outcomes are recorded as
/// `Invalid`; a search response carries the value it returned.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum RecResult {
    Ok,
    OkValue(u64),
    Invalid,
}

/// One completed operation: invocation and response indices come from the
/// scheduler (deterministic mode) or a global tick (free-running).
#[derive(Clone, Copy, Debug, Serialize)]
pub struct OpRecord {
    pub client: u16,
    pub kind: OpKind,
    pub key: u64,
    pub value: Option<u64>,
    pub invoke: u64,
    pub response: u64,
    pub result: RecResult,
}

#[derive(Debug)]
pub enum Outcome {
    Pass,
    /// No legal order exists; carries the operations that could not be
    /// linearized at the deepest point reached.
    Fail(Vec<OpRecord>),
    /// History exceeds the oracle's size cap.
    TooLarge(usize),
}

impl Outcome {
    pub fn passed(&self) -> bool {
        matches!(self, Outcome::Pass)
    }
}

pub const DEFAULT_MAX_OPS: usize = 16;

type Store = BTreeMap<u64, u64>;

fn apply(op: &OpRecord, store: &Store) -> Option<Store> {
    let present = store.get(&op.key).copied();
    match (op.kind, op.result) {
        (OpKind::Search, RecResult::OkValue(v)) => {
            (present == Some(v)).then(|| store.clone())
        }
        (OpKind::Search, RecResult::Invalid) => present.is_none().then(|| store.clone()),
        (OpKind::Insert, RecResult::Ok) => {
            if present.is_none() {
                let mut s = store.clone();
                s.insert(op.key, op.value.expect("insert records its value"));
                Some(s)
            } else {
                None
            }
        }
        (OpKind::Insert, RecResult::Invalid) => present.is_some().then(|| store.clone()),
        (OpKind::Update, RecResult::Ok) => {
            if present.is_some() {
                let mut s = store.clone();
                s.insert(op.key, op.value.expect("update records its value"));
                Some(s)
            } else {
                None
            }
        }
        (OpKind::Update, RecResult::Invalid) => present.is_none().then(|| store.clone()),
        (OpKind::Delete, RecResult::Ok) => {
            if present.is_some() {
                let mut s = store.clone();
                s.remove(&op.key);
                Some(s)
            } else {
                None
            }
        }
        (OpKind::Delete, RecResult::Invalid) => present.is_none().then(|| store.clone()),
        // mismatched kind/result combinations are unreplayable
        _ => None,
    }
}

/// Checks a history against the sequential KV specification, optionally
/// seeded with pre-populated keys.
pub fn check_linearizable(history: &[OpRecord], initial: &Store, max_ops: usize) -> Outcome {
    if history.len() > max_ops {
        return Outcome::TooLarge(history.len());
    }
    let n = history.len();
    if n == 0 {
        return Outcome::Pass;
    }
    debug_assert!(n <= 32);
    let all: u32 = if n == 32 { !0 } else { (1u32 << n) - 1 };
    let mut seen: HashSet<(u32, Vec<(u64, u64)>)> = HashSet::new();
    // frames: (taken mask, store); depth-first over minimal candidates
    let mut best_mask: u32 = 0;
    let mut stack: Vec<(u32, Store)> = vec![(0, initial.clone())];
    while let Some((mask, store)) = stack.pop() {
        if mask == all {
            return Outcome::Pass;
        }
        if mask.count_ones() > best_mask.count_ones() {
            best_mask = mask;
        }
        // an op can linearize next only if no other untaken op finished
        // before it was invoked
        let min_response = history
            .iter()
            .enumerate()
            .filter(|(i, _)| mask & (1 << i) == 0)
            .map(|(_, op)| op.response)
            .min()
            .unwrap();
        for (i, op) in history.iter().enumerate() {
            if mask & (1 << i) != 0 || op.invoke > min_response {
                continue;
            }
            if let Some(next_store) = apply(op, &store) {
                let next_mask = mask | (1 << i);
                let key: Vec<(u64, u64)> = next_store.iter().map(|(k, v)| (*k, *v)).collect();
                if seen.insert((next_mask, key)) {
                    stack.push((next_mask, next_store));
                }
            }
        }
    }
    // witness: the ops left over at the deepest prefix the search reached
    let witness: Vec<OpRecord> = history
        .iter()
        .enumerate()
        .filter(|(i, _)| best_mask & (1 << i) == 0)
        .map(|(_, op)| *op)
        .collect();
    Outcome::Fail(witness)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn op(
        client: u16,
        kind: OpKind,
        key: u64,
        value: Option<u64>,
        invoke: u64,
        response: u64,
        result: RecResult,
    ) -> OpRecord {
        OpRecord {
            client,
            kind,
            key,
            value,
            invoke,
            response,
            result,
        }
    }

    #[test]
    fn sequential_history_passes() {
        let h = vec![
            op(1, OpKind::Insert, 0, Some(7), 0, 1, RecResult::Ok),
            op(1, OpKind::Search, 0, None, 2, 3, RecResult::OkValue(7)),
            op(1, OpKind::Delete, 0, None, 4, 5, RecResult::Ok),
            op(1, OpKind::Search, 0, None, 6, 7, RecResult::Invalid),
        ];
        assert!(check_linearizable(&h, &Store::new(), DEFAULT_MAX_OPS).passed());
    }

    #[test]
    fn lost_update_fails() {
        // two sequential committed updates, then a search observing the
        // first value: the second update's effect was lost
        let init: Store = [(0u64, 1u64)].into_iter().collect();
        let h = vec![
            op(1, OpKind::Update, 0, Some(2), 0, 1, RecResult::Ok),
            op(2, OpKind::Update, 0, Some(3), 2, 3, RecResult::Ok),
            op(1, OpKind::Search, 0, None, 4, 5, RecResult::OkValue(2)),
        ];
        assert!(!check_linearizable(&h, &init, DEFAULT_MAX_OPS).passed());
    }

    #[test]
    fn concurrent_updates_may_commit_in_either_order() {
        let init: Store = [(0u64, 1u64)].into_iter().collect();
        let h = vec![
            op(1, OpKind::Update, 0, Some(2), 0, 10, RecResult::Ok),
            op(2, OpKind::Update, 0, Some(3), 0, 10, RecResult::Ok),
            op(3, OpKind::Search, 0, None, 11, 12, RecResult::OkValue(2)),
        ];
        assert!(check_linearizable(&h, &init, DEFAULT_MAX_OPS).passed());
    }

    #[test]
    fn insert_on_present_key_must_fail() {
        let init: Store = [(0u64, 1u64)].into_iter().collect();
        let h = vec![op(1, OpKind::Insert, 0, Some(9), 0, 1, RecResult::Ok)];
        assert!(!check_linearizable(&h, &init, DEFAULT_MAX_OPS).passed());
    }

    #[test]
    fn resurrection_after_delete_fails() {
        let init: Store = [(0u64, 1u64)].into_iter().collect();
        // delete commits, then a later search still sees a value with no
        // insert in between
        let h = vec![
            op(1, OpKind::Delete, 0, None, 0, 1, RecResult::Ok),
            op(2, OpKind::Search, 0, None, 2, 3, RecResult::OkValue(1)),
        ];
        assert!(!check_linearizable(&h, &init, DEFAULT_MAX_OPS).passed());
    }

    #[test]
    fn too_large_history_refused() {
        let h: Vec<OpRecord> = (0..20)
            .map(|i| op(1, OpKind::Search, 0, None, i * 2, i * 2 + 1, RecResult::Invalid))
            .collect();
        assert!(matches!(
            check_linearizable(&h, &Store::new(), DEFAULT_MAX_OPS),
            Outcome::TooLarge(20)
        ));
    }
}
