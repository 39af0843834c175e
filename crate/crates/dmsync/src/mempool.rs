//! Simulated memory node: byte-addressable regions behind one-sided verbs.
//!
//! Every 8-byte aligned word is an independent atomic cell. Reads and writes
//! that span multiple words are not snapshots; only word-granularity
//! atomicity is guaranteed, matching one-sided verb semantics. All verbs are
//! counted per class, which replaces hardware IOPS limits as the performance
//! currency of the simulator.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use serde::Serialize;
use thiserror::Error;

/// Location of a byte range inside the pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Address {
    pub region: u32,
    pub offset: u64,
}

impl Address {
    pub fn new(region: u32, offset: u64) -> Self {
        Self { region, offset }
    }

    pub fn add(self, delta: u64) -> Self {
        Self {
            region: self.region,
            offset: self.offset + delta,
        }
    }

    /// Packs the address into a single word: region in the high 20 bits,
    /// offset in the low 40. Offsets must stay below 2^40.
    pub fn packed(self) -> u64 {
        debug_assert!(self.offset < (1 << 40));
        ((self.region as u64) << 40) | self.offset
    }

    pub fn from_packed(word: u64) -> Self {
        Self {
            region: (word >> 40) as u32,
            offset: word & ((1 << 40) - 1),
        }
    }
}

#[derive(Debug, Error)]
pub enum PoolError {
    #[error("zero-length allocation")]
    ZeroAlloc,
    #[error("allocation of {requested} bytes exceeds remaining pool capacity ({remaining} left)")]
    CapacityExhausted { requested: u64, remaining: u64 },
    #[error("unknown region {0}")]
    UnknownRegion(u32),
    #[error("access out of bounds: offset {offset} + len {len} > region size {size}")]
    OutOfBounds { offset: u64, len: u64, size: u64 },
    #[error("atomic verb requires 8-byte alignment, got offset {0}")]
    Misaligned(u64),
}

/// Snapshot of the per-class verb counters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct VerbCounters {
    pub reads: u64,
    pub writes: u64,
    pub cas: u64,
    pub masked_cas: u64,
    pub faa: u64,
    pub bytes_read: u64,
    pub bytes_written: u64,
}

impl VerbCounters {
    pub fn total_verbs(&self) -> u64 {
        self.reads + self.writes + self.cas + self.masked_cas + self.faa
    }

    /// Counter movement since an earlier snapshot.
    pub fn since(&self, earlier: &VerbCounters) -> VerbCounters {
        VerbCounters {
            reads: self.reads - earlier.reads,
            writes: self.writes - earlier.writes,
            cas: self.cas - earlier.cas,
            masked_cas: self.masked_cas - earlier.masked_cas,
            faa: self.faa - earlier.faa,
            bytes_read: self.bytes_read - earlier.bytes_read,
            bytes_written: self.bytes_written - earlier.bytes_written,
        }
    }
}

#[derive(Default)]
struct Counters {
    reads: AtomicU64,
    writes: AtomicU64,
    cas: AtomicU64,
    masked_cas: AtomicU64,
    faa: AtomicU64,
    bytes_read: AtomicU64,
    bytes_written: AtomicU64,
}

struct Region {
    words: Box<[AtomicU64]>,
    size: u64,
}

impl Region {
    fn new(size: u64) -> Self {
        let n_words = (size as usize).div_ceil(8);
        let mut v = Vec::with_capacity(n_words);
        v.resize_with(n_words, || AtomicU64::new(0));
        Self {
            words: v.into_boxed_slice(),
            size,
        }
    }

    fn check_range(&self, offset: u64, len: u64) -> Result<(), PoolError> {
        if offset + len > self.size {
            return Err(PoolError::OutOfBounds {
                offset,
                len,
                size: self.size,
            });
        }
        Ok(())
    }

    fn word(&self, offset: u64) -> &AtomicU64 {
        &self.words[(offset / 8) as usize]
    }
}

/// The memory pool: region store, verb counters, and the memory-node-local
/// control handlers used for lock repair.
pub struct MemPool {
    regions: RwLock<Vec<Arc<Region>>>,
    counters: Counters,
    capacity: u64,
    used: AtomicU64,
    repairs: AtomicU64,
    // serializes control-channel handlers; never held across verbs
    control: Mutex<()>,
}

pub const DEFAULT_POOL_CAPACITY: u64 = 2 << 30;

impl MemPool {
    pub fn new(capacity: u64) -> Self {
        Self {
            regions: RwLock::new(Vec::new()),
            counters: Counters::default(),
            capacity,
            used: AtomicU64::new(0),
            repairs: AtomicU64::new(0),
            control: Mutex::new(()),
        }
    }

    fn resolve(&self, region: u32) -> Result<Arc<Region>, PoolError> {
        self.regions
            .read()
            .unwrap()
            .get(region as usize)
            .cloned()
            .ok_or(PoolError::UnknownRegion(region))
    }

    /// Allocates a fresh zero-initialized region and returns its base address.
    pub fn alloc_region(&self, size: u64) -> Result<Address, PoolError> {
        if size == 0 {
            return Err(PoolError::ZeroAlloc);
        }
        let used = self.used.fetch_add(size, Ordering::SeqCst);
        if used + size > self.capacity {
            self.used.fetch_sub(size, Ordering::SeqCst);
            return Err(PoolError::CapacityExhausted {
                requested: size,
                remaining: self.capacity.saturating_sub(used),
            });
        }
        let mut regions = self.regions.write().unwrap();
        let id = regions.len() as u32;
        regions.push(Arc::new(Region::new(size)));
        Ok(Address::new(id, 0))
    }

    pub fn read(&self, addr: Address, len: u64) -> Result<Vec<u8>, PoolError> {
        let region = self.resolve(addr.region)?;
        region.check_range(addr.offset, len)?;
        self.counters.reads.fetch_add(1, Ordering::Relaxed);
        self.counters.bytes_read.fetch_add(len, Ordering::Relaxed);
        let mut out = vec![0u8; len as usize];
        let mut off = addr.offset;
        let mut filled = 0usize;
        while filled < len as usize {
            let word = region.word(off).load(Ordering::SeqCst).to_le_bytes();
            let in_word = (off % 8) as usize;
            let take = (8 - in_word).min(len as usize - filled);
            out[filled..filled + take].copy_from_slice(&word[in_word..in_word + take]);
            filled += take;
            off += take as u64;
        }
        Ok(out)
    }

    pub fn write(&self, addr: Address, data: &[u8]) -> Result<(), PoolError> {
        let region = self.resolve(addr.region)?;
        let len = data.len() as u64;
        region.check_range(addr.offset, len)?;
        self.counters.writes.fetch_add(1, Ordering::Relaxed);
        self.counters
            .bytes_written
            .fetch_add(len, Ordering::Relaxed);
        let mut off = addr.offset;
        let mut consumed = 0usize;
        while consumed < data.len() {
            let in_word = (off % 8) as usize;
            let take = (8 - in_word).min(data.len() - consumed);
            let cell = region.word(off);
            if take == 8 {
                let mut w = [0u8; 8];
                w.copy_from_slice(&data[consumed..consumed + 8]);
                cell.store(u64::from_le_bytes(w), Ordering::SeqCst);
            } else {
                // partial word: merge bytes without disturbing neighbors
                let src = &data[consumed..consumed + take];
                cell.fetch_update(Ordering::SeqCst, Ordering::SeqCst, |cur| {
                    let mut w = cur.to_le_bytes();
                    w[in_word..in_word + take].copy_from_slice(src);
                    Some(u64::from_le_bytes(w))
                })
                .unwrap();
            }
            consumed += take;
            off += take as u64;
        }
        Ok(())
    }

    /// Single-word read; counted as one read verb of 8 bytes.
    pub fn read_word(&self, addr: Address) -> Result<u64, PoolError> {
        let region = self.resolve(addr.region)?;
        region.check_range(addr.offset, 8)?;
        if addr.offset % 8 != 0 {
            return Err(PoolError::Misaligned(addr.offset));
        }
        self.counters.reads.fetch_add(1, Ordering::Relaxed);
        self.counters.bytes_read.fetch_add(8, Ordering::Relaxed);
        Ok(region.word(addr.offset).load(Ordering::SeqCst))
    }

    /// Compare-and-swap; returns the prior word. Stores `swap` iff the prior
    /// word equals `expect`. Linearizable against all verbs on the word.
    pub fn cas(&self, addr: Address, expect: u64, swap: u64) -> Result<u64, PoolError> {
        let region = self.resolve(addr.region)?;
        region.check_range(addr.offset, 8)?;
        if addr.offset % 8 != 0 {
            return Err(PoolError::Misaligned(addr.offset));
        }
        self.counters.cas.fetch_add(1, Ordering::Relaxed);
        let cell = region.word(addr.offset);
        match cell.compare_exchange(expect, swap, Ordering::SeqCst, Ordering::SeqCst) {
            Ok(prior) => Ok(prior),
            Err(prior) => Ok(prior),
        }
    }

    /// Masked compare-and-swap. Returns the prior word `P`; iff
    /// `(P & compare_mask) == (compare & compare_mask)`, stores
    /// `(P & !swap_mask) | (swap & swap_mask)`. A zero compare mask yields an
    /// unconditional get-and-set of the masked bits.
    pub fn masked_cas(
        &self,
        addr: Address,
        compare: u64,
        compare_mask: u64,
        swap: u64,
        swap_mask: u64,
    ) -> Result<u64, PoolError> {
        let region = self.resolve(addr.region)?;
        region.check_range(addr.offset, 8)?;
        if addr.offset % 8 != 0 {
            return Err(PoolError::Misaligned(addr.offset));
        }
        self.counters.masked_cas.fetch_add(1, Ordering::Relaxed);
        let cell = region.word(addr.offset);
        let mut cur = cell.load(Ordering::SeqCst);
        loop {
            if (cur & compare_mask) != (compare & compare_mask) {
                return Ok(cur);
            }
            let new = (cur & !swap_mask) | (swap & swap_mask);
            match cell.compare_exchange(cur, new, Ordering::SeqCst, Ordering::SeqCst) {
                Ok(prior) => return Ok(prior),
                Err(now) => cur = now,
            }
        }
    }

    /// Fetch-and-add; returns the prior word. Wrapping arithmetic.
    pub fn faa(&self, addr: Address, delta: i64) -> Result<u64, PoolError> {
        let region = self.resolve(addr.region)?;
        region.check_range(addr.offset, 8)?;
        if addr.offset % 8 != 0 {
            return Err(PoolError::Misaligned(addr.offset));
        }
        self.counters.faa.fetch_add(1, Ordering::Relaxed);
        Ok(region
            .word(addr.offset)
            .fetch_add(delta as u64, Ordering::SeqCst))
    }

    pub fn stats(&self) -> VerbCounters {
        VerbCounters {
            reads: self.counters.reads.load(Ordering::SeqCst),
            writes: self.counters.writes.load(Ordering::SeqCst),
            cas: self.counters.cas.load(Ordering::SeqCst),
            masked_cas: self.counters.masked_cas.load(Ordering::SeqCst),
            faa: self.counters.faa.load(Ordering::SeqCst),
            bytes_read: self.counters.bytes_read.load(Ordering::SeqCst),
            bytes_written: self.counters.bytes_written.load(Ordering::SeqCst),
        }
    }

    pub fn repairs(&self) -> u64 {
        self.repairs.load(Ordering::SeqCst)
    }

    // --- memory-node-local control channel -------------------------------
    //
    // The handlers below model computation on the memory node itself. They
    // bypass the verb counters: a repair is not client I/O.

    /// Reads a word on behalf of the memory node (no verb accounting).
    pub fn mn_peek(&self, addr: Address) -> Result<u64, PoolError> {
        let region = self.resolve(addr.region)?;
        region.check_range(addr.offset, 8)?;
        Ok(region.word(addr.offset).load(Ordering::SeqCst))
    }

    /// Lock repair handler. `entry` addresses the lock word; the epoch word
    /// is adjacent at +8. Resets the tail and advances the repair generation
    /// (high 16 bits of the epoch word), but only if the reporter's observed
    /// epoch still belongs to the current generation, so duplicate reports
    /// repair at most once.
    pub fn repair_lock(&self, entry: Address, observed_epoch: u64) -> Result<bool, PoolError> {
        let _guard = self.control.lock().unwrap();
        let epoch_addr = entry.add(8);
        let cur_epoch = self.mn_peek(epoch_addr)?;
        if cur_epoch >> 48 != observed_epoch >> 48 {
            return Ok(false);
        }
        let region = self.resolve(entry.region)?;
        region.check_range(entry.offset, 16)?;
        // clear the tail bits, preserving the version
        region
            .word(entry.offset)
            .fetch_and(0xF, Ordering::SeqCst);
        region
            .word(epoch_addr.offset)
            .fetch_add(EPOCH_REPAIR_LEAP, Ordering::SeqCst);
        self.repairs.fetch_add(1, Ordering::SeqCst);
        Ok(true)
    }
}

/// Added to the epoch word on repair; waiters detect a repaired queue by the
/// generation change in the high bits.
pub const EPOCH_REPAIR_LEAP: u64 = 1 << 48;

/// Repair generation encoded in an epoch word.
pub fn epoch_generation(epoch: u64) -> u64 {
    epoch >> 48
}

/// Per-client bump allocator for out-of-place KV blocks. Draws fixed-size
/// chunks from the pool and never reuses an address, which keeps written
/// blocks immutable for the lifetime of a run.
pub struct KvArena {
    chunk_size: u64,
    region: u32,
    cursor: u64,
    end: u64,
    have_chunk: bool,
    last_offset: Option<u64>,
}

pub const DEFAULT_KV_CHUNK: u64 = 1 << 20;

impl KvArena {
    pub fn new(chunk_size: u64) -> Self {
        Self {
            chunk_size,
            region: 0,
            cursor: 0,
            end: 0,
            have_chunk: false,
            last_offset: None,
        }
    }

    /// Returns a fresh, never-reused 8-byte aligned range.
    pub fn alloc(&mut self, pool: &MemPool, len: u64) -> Result<Address, PoolError> {
        if len == 0 {
            return Err(PoolError::ZeroAlloc);
        }
        let len = len.div_ceil(8) * 8;
        if !self.have_chunk || self.cursor + len > self.end {
            let size = self.chunk_size.max(len);
            let base = pool.alloc_region(size)?;
            self.region = base.region;
            self.cursor = base.offset;
            self.end = base.offset + size;
            self.have_chunk = true;
            self.last_offset = None;
        }
        let addr = Address::new(self.region, self.cursor);
        self.cursor += len;
        self.last_offset = Some(addr.offset);
        Ok(addr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::thread;

    #[test]
    fn alloc_region_zero_initialized() {
        let pool = MemPool::new(DEFAULT_POOL_CAPACITY);
        let base = pool.alloc_region(8_000_000).unwrap();
        assert_eq!(pool.read_word(base.add(4096)).unwrap(), 0);
        assert_eq!(pool.read_word(base.add(7_999_992)).unwrap(), 0);
    }

    #[test]
    fn alloc_region_zero_len_errors() {
        let pool = MemPool::new(DEFAULT_POOL_CAPACITY);
        assert!(matches!(pool.alloc_region(0), Err(PoolError::ZeroAlloc)));
    }

    #[test]
    fn alloc_regions_disjoint() {
        let pool = MemPool::new(DEFAULT_POOL_CAPACITY);
        let a = pool.alloc_region(64).unwrap();
        let b = pool.alloc_region(64).unwrap();
        assert_ne!(a.region, b.region);
        pool.write(a, &[1u8; 8]).unwrap();
        assert_eq!(pool.read(b, 8).unwrap(), vec![0u8; 8]);
    }

    #[test]
    fn capacity_exhaustion() {
        let pool = MemPool::new(128);
        pool.alloc_region(64).unwrap();
        assert!(matches!(
            pool.alloc_region(128),
            Err(PoolError::CapacityExhausted { .. })
        ));
    }

    #[test]
    fn read_your_write() {
        let pool = MemPool::new(DEFAULT_POOL_CAPACITY);
        let base = pool.alloc_region(1024).unwrap();
        let data = b"hello, remote word!";
        pool.write(base.add(16), data).unwrap();
        assert_eq!(pool.read(base.add(16), data.len() as u64).unwrap(), data);
        // never-written word reads zero
        assert_eq!(pool.read_word(base.add(512)).unwrap(), 0);
    }

    #[test]
    fn out_of_bounds_faults() {
        let pool = MemPool::new(DEFAULT_POOL_CAPACITY);
        let base = pool.alloc_region(64).unwrap();
        assert!(matches!(
            pool.read(base.add(60), 8),
            Err(PoolError::OutOfBounds { .. })
        ));
        assert!(matches!(
            pool.write(base.add(64), &[0u8]),
            Err(PoolError::OutOfBounds { .. })
        ));
    }

    #[test]
    fn cas_basic() {
        let pool = MemPool::new(DEFAULT_POOL_CAPACITY);
        let base = pool.alloc_region(8).unwrap();
        pool.write(base, &5u64.to_le_bytes()).unwrap();
        assert_eq!(pool.cas(base, 5, 9).unwrap(), 5);
        assert_eq!(pool.read_word(base).unwrap(), 9);
        // failed cas leaves the word untouched
        pool.write(base, &5u64.to_le_bytes()).unwrap();
        assert_eq!(pool.cas(base, 7, 9).unwrap(), 5);
        assert_eq!(pool.read_word(base).unwrap(), 5);
    }

    #[test]
    fn cas_misaligned_faults() {
        let pool = MemPool::new(DEFAULT_POOL_CAPACITY);
        let base = pool.alloc_region(64).unwrap();
        assert!(matches!(
            pool.cas(base.add(4), 0, 1),
            Err(PoolError::Misaligned(4))
        ));
    }

    #[test]
    fn masked_cas_bit_formula() {
        let pool = MemPool::new(DEFAULT_POOL_CAPACITY);
        let base = pool.alloc_region(8).unwrap();
        pool.write(base, &0x35u64.to_le_bytes()).unwrap();
        let prior = pool.masked_cas(base, 0x05, 0x0F, 0x20, 0xF0).unwrap();
        assert_eq!(prior, 0x35);
        assert_eq!(pool.read_word(base).unwrap(), 0x25);
    }

    #[test]
    fn masked_cas_zero_compare_mask_is_get_and_set() {
        let pool = MemPool::new(DEFAULT_POOL_CAPACITY);
        let base = pool.alloc_region(8).unwrap();
        pool.write(base, &0xDEAD_BEEFu64.to_le_bytes()).unwrap();
        let prior = pool
            .masked_cas(base, 0, 0, 0xAAAA_0000, 0xFFFF_0000)
            .unwrap();
        assert_eq!(prior, 0xDEAD_BEEF);
        assert_eq!(pool.read_word(base).unwrap(), 0xAAAA_BEEF);
    }

    #[test]
    fn masked_cas_all_ones_reduces_to_cas() {
        let pool = MemPool::new(DEFAULT_POOL_CAPACITY);
        let base = pool.alloc_region(8).unwrap();
        pool.write(base, &42u64.to_le_bytes()).unwrap();
        assert_eq!(pool.masked_cas(base, 42, !0, 99, !0).unwrap(), 42);
        assert_eq!(pool.read_word(base).unwrap(), 99);
        assert_eq!(pool.masked_cas(base, 42, !0, 7, !0).unwrap(), 99);
        assert_eq!(pool.read_word(base).unwrap(), 99);
    }

    #[test]
    fn faa_basic() {
        let pool = MemPool::new(DEFAULT_POOL_CAPACITY);
        let base = pool.alloc_region(8).unwrap();
        assert_eq!(pool.faa(base, 1).unwrap(), 0);
        assert_eq!(pool.read_word(base).unwrap(), 1);
        pool.write(base, &10u64.to_le_bytes()).unwrap();
        assert_eq!(pool.faa(base, -3).unwrap(), 10);
        assert_eq!(pool.read_word(base).unwrap(), 7);
    }

    #[test]
    fn faa_concurrent_counting() {
        let pool = Arc::new(MemPool::new(DEFAULT_POOL_CAPACITY));
        let base = pool.alloc_region(8).unwrap();
        let threads: Vec<_> = (0..8)
            .map(|_| {
                let pool = pool.clone();
                thread::spawn(move || {
                    for _ in 0..1000 {
                        pool.faa(base, 1).unwrap();
                    }
                })
            })
            .collect();
        for t in threads {
            t.join().unwrap();
        }
        assert_eq!(pool.read_word(base).unwrap(), 8000);
        assert_eq!(pool.stats().faa, 8000);
    }

    #[test]
    fn concurrent_word_writes_never_torn() {
        let pool = Arc::new(MemPool::new(DEFAULT_POOL_CAPACITY));
        let base = pool.alloc_region(64).unwrap();
        let x: u64 = 0x1111_1111_1111_1111;
        let y: u64 = 0x2222_2222_2222_2222;
        let writer = {
            let pool = pool.clone();
            thread::spawn(move || {
                for i in 0..20_000u64 {
                    let v = if i % 2 == 0 { x } else { y };
                    let bytes: Vec<u8> = (0..4).flat_map(|_| v.to_le_bytes()).collect();
                    pool.write(base, &bytes).unwrap();
                }
            })
        };
        let reader = {
            let pool = pool.clone();
            thread::spawn(move || {
                for _ in 0..20_000 {
                    let bytes = pool.read(base, 32).unwrap();
                    for w in bytes.chunks(8) {
                        let mut arr = [0u8; 8];
                        arr.copy_from_slice(w);
                        let v = u64::from_le_bytes(arr);
                        assert!(v == 0 || v == x || v == y, "torn word {v:#x}");
                    }
                }
            })
        };
        writer.join().unwrap();
        reader.join().unwrap();
    }

    #[test]
    fn verb_counters_count_every_call() {
        let pool = MemPool::new(DEFAULT_POOL_CAPACITY);
        let base = pool.alloc_region(64).unwrap();
        assert_eq!(pool.stats(), VerbCounters::default());
        pool.write(base, &[0u8; 16]).unwrap();
        assert_eq!(pool.stats().writes, 1);
        assert_eq!(pool.stats().bytes_written, 16);
        pool.read(base, 8).unwrap();
        pool.cas(base, 0, 1).unwrap();
        pool.masked_cas(base, 0, 0, 0, 0).unwrap();
        pool.faa(base, 1).unwrap();
        let s = pool.stats();
        assert_eq!(
            (s.reads, s.writes, s.cas, s.masked_cas, s.faa),
            (1, 1, 1, 1, 1)
        );
        assert_eq!(s.total_verbs(), 5);
    }

    #[test]
    fn kv_arena_strictly_increasing_and_disjoint() {
        let pool = MemPool::new(DEFAULT_POOL_CAPACITY);
        let mut a = KvArena::new(1024);
        let mut b = KvArena::new(1024);
        let mut last = None;
        for _ in 0..10 {
            let addr = a.alloc(&pool, 16).unwrap();
            if let Some(prev) = last {
                assert!(addr.offset > prev);
            }
            last = Some(addr.offset);
        }
        let other = b.alloc(&pool, 16).unwrap();
        assert_ne!(other.region, a.region);
    }

    #[test]
    fn kv_arena_exhaustion() {
        let pool = MemPool::new(256);
        let mut a = KvArena::new(256);
        a.alloc(&pool, 256).unwrap();
        assert!(a.alloc(&pool, 16).is_err());
    }

    mod prop {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            // masked compare-and-swap against a direct evaluation of the
            // bit formula, plus its two reductions
            #[test]
            fn masked_cas_matches_model(
                word in any::<u64>(),
                compare in any::<u64>(),
                compare_mask in any::<u64>(),
                swap in any::<u64>(),
                swap_mask in any::<u64>(),
            ) {
                let pool = MemPool::new(1 << 16);
                let base = pool.alloc_region(8).unwrap();
                pool.write(base, &word.to_le_bytes()).unwrap();
                let prior = pool
                    .masked_cas(base, compare, compare_mask, swap, swap_mask)
                    .unwrap();
                prop_assert_eq!(prior, word);
                let expected = if (word & compare_mask) == (compare & compare_mask) {
                    (word & !swap_mask) | (swap & swap_mask)
                } else {
                    word
                };
                prop_assert_eq!(pool.read_word(base).unwrap(), expected);
            }

            #[test]
            fn masked_cas_full_masks_equal_cas(
                word in any::<u64>(),
                compare in any::<u64>(),
                swap in any::<u64>(),
            ) {
                let pool = MemPool::new(1 << 16);
                let a = pool.alloc_region(8).unwrap();
                let b = pool.alloc_region(8).unwrap();
                pool.write(a, &word.to_le_bytes()).unwrap();
                pool.write(b, &word.to_le_bytes()).unwrap();
                let via_masked = pool.masked_cas(a, compare, !0, swap, !0).unwrap();
                let via_cas = pool.cas(b, compare, swap).unwrap();
                prop_assert_eq!(via_masked, via_cas);
                prop_assert_eq!(
                    pool.read_word(a).unwrap(),
                    pool.read_word(b).unwrap()
                );
            }

            #[test]
            fn kv_alloc_ranges_never_overlap(sizes in proptest::collection::vec(1u64..128, 1..40)) {
                let pool = MemPool::new(1 << 20);
                let mut arena = KvArena::new(512);
                let mut taken: Vec<(u32, u64, u64)> = Vec::new();
                for len in sizes {
                    let addr = arena.alloc(&pool, len).unwrap();
                    for (r, lo, hi) in &taken {
                        if *r == addr.region {
                            prop_assert!(addr.offset >= *hi || addr.offset + len <= *lo);
                        }
                    }
                    taken.push((addr.region, addr.offset, addr.offset + len));
                }
            }
        }
    }

    #[test]
    fn repair_resets_tail_and_bumps_generation() {
        let pool = MemPool::new(DEFAULT_POOL_CAPACITY);
        let entry = pool.alloc_region(16).unwrap();
        // tail = 7, version = 3
        pool.write(entry, &((7u64 << 4) | 3).to_le_bytes()).unwrap();
        let e0 = pool.mn_peek(entry.add(8)).unwrap();
        assert!(pool.repair_lock(entry, e0).unwrap());
        assert_eq!(pool.read_word(entry).unwrap(), 3);
        let e1 = pool.mn_peek(entry.add(8)).unwrap();
        assert_eq!(epoch_generation(e1), epoch_generation(e0) + 1);
        // a stale report from the old generation does nothing
        assert!(!pool.repair_lock(entry, e0).unwrap());
        assert_eq!(pool.repairs(), 1);
    }
}
