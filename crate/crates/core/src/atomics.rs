//! Shared-word primitives the lock protocols are written against.
//!
//! Every lock in this crate is expressed as a step machine that touches
//! shared memory only through [`SharedWords`]. The real locks drive the
//! machines over [`AtomicWords`]; the interleaving explorer drives the same
//! machines over a plain `[u64; WORDS]` snapshot so every state can be
//! hashed and replayed.

use std::sync::atomic::{AtomicU64, Ordering};

/// Number of shared words available to a protocol. Eight `u64`s fill one
/// cache line.
pub const WORDS: usize = 8;

/// The atomic operations a lock protocol may perform on its shared words.
///
/// Each call is one indivisible memory transaction. Index `idx` must be
/// `< WORDS`.
pub trait SharedWords {
    fn load(&mut self, idx: usize) -> u64;
    fn store(&mut self, idx: usize, value: u64);
    /// Returns `true` iff the word held `old` and now holds `new`.
    fn compare_and_swap(&mut self, idx: usize, old: u64, new: u64) -> bool;
    /// Wrapping add; returns the prior value.
    fn fetch_add(&mut self, idx: usize, addend: u64) -> u64;
    /// Wrapping subtract; returns the prior value.
    fn fetch_sub(&mut self, idx: usize, subtrahend: u64) -> u64;
    fn fetch_or(&mut self, idx: usize, bits: u64) -> u64;
    fn fetch_and(&mut self, idx: usize, bits: u64) -> u64;

    /// Test-and-set of bit 0. Returns the prior bit.
    fn test_and_set(&mut self, idx: usize) -> bool {
        self.fetch_or(idx, 1) & 1 == 1
    }

    fn set_bit(&mut self, idx: usize, bit: u32) {
        self.fetch_or(idx, 1u64 << bit);
    }

    fn reset_bit(&mut self, idx: usize, bit: u32) {
        self.fetch_and(idx, !(1u64 << bit));
    }
}

/// One cache line of atomic words.
///
/// All read-modify-writes and stores are sequentially consistent. Loads
/// are `SeqCst` too: the settling handshakes are store-then-load patterns
/// across different words, which acquire loads alone do not order. On
/// x86 a `SeqCst` load compiles to a plain `mov`.
#[repr(align(64))]
#[derive(Debug, Default)]
pub struct AtomicWords([AtomicU64; WORDS]);

impl AtomicWords {
    pub fn new(initial: [u64; WORDS]) -> Self {
        Self(initial.map(AtomicU64::new))
    }

    pub fn snapshot(&self) -> [u64; WORDS] {
        std::array::from_fn(|i| self.0[i].load(Ordering::SeqCst))
    }
}

impl SharedWords for &AtomicWords {
    #[inline(always)]
    fn load(&mut self, idx: usize) -> u64 {
        self.0[idx].load(Ordering::SeqCst)
    }

    #[inline(always)]
    fn store(&mut self, idx: usize, value: u64) {
        self.0[idx].store(value, Ordering::SeqCst)
    }

    #[inline(always)]
    fn compare_and_swap(&mut self, idx: usize, old: u64, new: u64) -> bool {
        self.0[idx]
            .compare_exchange(old, new, Ordering::SeqCst, Ordering::SeqCst)
            .is_ok()
    }

    #[inline(always)]
    fn fetch_add(&mut self, idx: usize, addend: u64) -> u64 {
        self.0[idx].fetch_add(addend, Ordering::SeqCst)
    }

    #[inline(always)]
    fn fetch_sub(&mut self, idx: usize, subtrahend: u64) -> u64 {
        self.0[idx].fetch_sub(subtrahend, Ordering::SeqCst)
    }

    #[inline(always)]
    fn fetch_or(&mut self, idx: usize, bits: u64) -> u64 {
        self.0[idx].fetch_or(bits, Ordering::SeqCst)
    }

    #[inline(always)]
    fn fetch_and(&mut self, idx: usize, bits: u64) -> u64 {
        self.0[idx].fetch_and(bits, Ordering::SeqCst)
    }
}

/// Sequential shadow memory used by the interleaving explorer and unit tests.
impl SharedWords for [u64; WORDS] {
    fn load(&mut self, idx: usize) -> u64 {
        self[idx]
    }

    fn store(&mut self, idx: usize, value: u64) {
        self[idx] = value;
    }

    fn compare_and_swap(&mut self, idx: usize, old: u64, new: u64) -> bool {
        if self[idx] == old {
            self[idx] = new;
            true
        } else {
            false
        }
    }

    fn fetch_add(&mut self, idx: usize, addend: u64) -> u64 {
        let prev = self[idx];
        self[idx] = prev.wrapping_add(addend);
        prev
    }

    fn fetch_sub(&mut self, idx: usize, subtrahend: u64) -> u64 {
        let prev = self[idx];
        self[idx] = prev.wrapping_sub(subtrahend);
        prev
    }

    fn fetch_or(&mut self, idx: usize, bits: u64) -> u64 {
        let prev = self[idx];
        self[idx] = prev | bits;
        prev
    }

    fn fetch_and(&mut self, idx: usize, bits: u64) -> u64 {
        let prev = self[idx];
        self[idx] = prev & bits;
        prev
    }
}

/// What a waiter does on each unsuccessful spin iteration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SpinPolicy {
    /// Architecture pause hint only. The intended mode: one pinned
    /// contender per core.
    #[default]
    Pause,
    /// Pause hint, plus a `sched_yield` every `spins` iterations. Needed
    /// when contenders outnumber cores, otherwise a descheduled holder
    /// stalls every waiter for a full time slice.
    PauseThenYield { spins: u32 },
}

impl SpinPolicy {
    /// `Pause` when every contender can have its own core, otherwise
    /// `PauseThenYield`.
    pub fn for_contenders(contenders: usize) -> Self {
        let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
        if contenders <= cores {
            SpinPolicy::Pause
        } else {
            SpinPolicy::PauseThenYield { spins: 64 }
        }
    }
}

/// Per-wait spin state.
#[derive(Debug)]
pub struct Spinner {
    policy: SpinPolicy,
    count: u32,
}

impl Spinner {
    pub fn new(policy: SpinPolicy) -> Self {
        Self { policy, count: 0 }
    }

    #[inline(always)]
    pub fn spin(&mut self) {
        std::hint::spin_loop();
        if let SpinPolicy::PauseThenYield { spins } = self.policy {
            self.count += 1;
            if self.count >= spins {
                self.count = 0;
                std::thread::yield_now();
            }
        }
    }
}
