//! Batched priority lock.
//!
//! Waiters are grouped into batches by the critical section during which
//! they arrived. The earliest batch goes first; inside a batch the most
//! urgent priority (numerically smallest) goes first. Acquisition runs
//! through a fast path and three stages:
//!
//! * fast path: no waiters, so reset the batch counter and try the status bit;
//! * stage 0: agree on the smallest live batch ID through `batch_barrier`;
//! * stage 1: within that batch, agree on the smallest priority through
//!   `priority_barrier`;
//! * final stage: re-validate both barriers, then test-and-set the status bit.
//!
//! A stage ends only once every waiter has cleared its bit in that stage's
//! settling vector, i.e. has compared itself against the barrier. The new
//! holder resets both barriers, which makes all remaining waiters re-sort
//! themselves. Release touches no barrier: it only closes the current batch
//! and clears the status bit.

use crate::atomics::{SharedWords, WORDS};

use super::{check_capacity, Contender, Discipline, LockError, Order, Protocol, Step};

/// Word layout of the lock object.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(usize)]
pub enum BplWord {
    /// Bit 0: 1 while held.
    Status = 0,
    /// Contenders past the fast path.
    NumWaiters = 1,
    /// High bits: open batch ID. Low `k` bits: members of the open batch.
    CurrBatch = 2,
    /// Smallest batch ID among stage-0 contenders, or `BARRIER_UNSET`.
    BatchBarrier = 3,
    /// Smallest priority among stage-1 contenders, or `BARRIER_UNSET`.
    PriorityBarrier = 4,
    /// Bit `i` set while the waiter on core `i` is unsettled in stage 0.
    Settling0 = 5,
    /// Same, for stage 1.
    Settling1 = 6,
}

const STATUS: usize = BplWord::Status as usize;
const NUM_WAITERS: usize = BplWord::NumWaiters as usize;
const CURR_BATCH: usize = BplWord::CurrBatch as usize;
const BATCH_BARRIER: usize = BplWord::BatchBarrier as usize;
const PRIORITY_BARRIER: usize = BplWord::PriorityBarrier as usize;
const SETTLING_0: usize = BplWord::Settling0 as usize;
const SETTLING_1: usize = BplWord::Settling1 as usize;

/// Barrier value meaning "nobody has claimed it" (all ones).
pub const BARRIER_UNSET: u64 = u64::MAX;

/// Unsigned words the batch counter can live in.
pub trait BatchWord: Copy {
    /// Clears the low `k` bits and adds `2^k` (wrapping).
    fn close_batch(self, k: u32) -> Self;
}

macro_rules! batch_word {
    ($($t:ty),*) => {$(
        impl BatchWord for $t {
            #[inline(always)]
            fn close_batch(self, k: u32) -> Self {
                let unit: $t = 1 << k;
                (self & !(unit - 1)).wrapping_add(unit)
            }
        }
    )*};
}

batch_word!(u8, u16, u32, u64);

/// The value a releasing holder stores into `curr_batch`: batch ID + 1,
/// member count 0.
#[inline(always)]
pub fn close_batch<W: BatchWord>(curr_batch: W, k: u32) -> W {
    curr_batch.close_batch(k)
}

/// Static parameters of one BPL instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Bpl {
    contenders: usize,
    count_bits: u32,
}

impl Bpl {
    pub fn new(contenders: usize) -> Result<Self, LockError> {
        check_capacity(contenders)?;
        // ceil(log2(m)); 0 for m == 1
        let count_bits = contenders.next_power_of_two().trailing_zeros();
        Ok(Self {
            contenders,
            count_bits,
        })
    }

    /// Width `k` of the member-count field of `curr_batch`.
    pub fn count_bits(&self) -> u32 {
        self.count_bits
    }

    /// Largest possible number of members in one batch.
    pub fn max_batch_size(&self) -> u64 {
        let field_max = (1u64 << self.count_bits) - 1;
        field_max.min(self.contenders as u64 - 1)
    }

    pub fn batch_id(&self, curr_batch: u64) -> u64 {
        curr_batch >> self.count_bits
    }

    pub fn batch_members(&self, curr_batch: u64) -> u64 {
        curr_batch & ((1u64 << self.count_bits) - 1)
    }
}

/// Program points of the acquire function.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BplPc {
    ReadCurrBatch,
    ReadNumWaiters,
    ClearCurrBatch,
    FastTas,
    IncWaiters,
    FetchBatch,
    Stage0,
    ReadBatchBarrier,
    CasBatchBarrier,
    Stage0Settled,
    Stage0Later,
    WaitSettle0,
    RecheckBatchBarrier,
    Stage1,
    ReadPriorityBarrier,
    Stage1BatchCheck,
    Stage1Retreat,
    Stage1RetreatSettle,
    CasPriorityBarrier,
    Stage1Settled,
    Stage1Lower,
    WaitSettle1,
    FinalCheckPriority,
    FinalCheckBatch,
    FinalRetreat,
    FinalTas,
    DecWaiters,
    ResetPriorityBarrier,
    ResetBatchBarrier,
    Done,
}

/// Local (register) state of one acquiring waiter.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BplAcquire {
    pc: BplPc,
    core: u32,
    priority: u64,
    batch: u64,
    // last value read from the word the current stage CASes on; zeroed
    // when dead so equal states hash equal
    prev: u64,
}

impl BplAcquire {
    pub fn pc(&self) -> BplPc {
        self.pc
    }

    pub fn batch(&self) -> u64 {
        self.batch
    }
}

/// Local state of a releasing holder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BplRelease {
    ReadCurrBatch,
    StoreCurrBatch(u64),
    ResetStatus,
    Done,
}

impl Protocol for Bpl {
    type Acquire = BplAcquire;
    type Release = BplRelease;

    fn discipline(&self) -> Discipline {
        Discipline::Bpl
    }

    fn capacity(&self) -> usize {
        self.contenders
    }

    fn initial_words(&self) -> [u64; WORDS] {
        let mut words = [0; WORDS];
        words[BATCH_BARRIER] = BARRIER_UNSET;
        words[PRIORITY_BARRIER] = BARRIER_UNSET;
        words
    }

    fn begin_acquire(&self, who: Contender) -> BplAcquire {
        BplAcquire {
            pc: BplPc::ReadCurrBatch,
            core: who.core as u32,
            priority: who.priority as u64,
            batch: 0,
            prev: 0,
        }
    }

    #[inline(always)]
    fn step_acquire<W: SharedWords>(&self, w: &mut W, s: &mut BplAcquire) -> Step {
        use BplPc::*;

        match s.pc {
            // Fast path. curr_batch is read before num_waiters, the opposite
            // of the order in which waiters update them (INC num_waiters,
            // then FAA curr_batch). Any waiter that slips in between
            // therefore either shows up in num_waiters or makes the CAS fail,
            // so the batch counter is never cleared under a live waiter.
            ReadCurrBatch => {
                s.prev = w.load(CURR_BATCH);
                s.pc = ReadNumWaiters;
            }
            ReadNumWaiters => {
                if w.load(NUM_WAITERS) == 0 {
                    s.pc = ClearCurrBatch;
                } else {
                    s.prev = 0;
                    s.pc = IncWaiters;
                }
            }
            ClearCurrBatch => {
                // success or failure, go on to try the lock
                w.compare_and_swap(CURR_BATCH, s.prev, 0);
                s.prev = 0;
                s.pc = FastTas;
            }
            FastTas => {
                if !w.test_and_set(STATUS) {
                    s.pc = ResetPriorityBarrier;
                    return Step::Joined(Order::FastPath);
                }
                s.pc = IncWaiters;
            }
            IncWaiters => {
                w.fetch_add(NUM_WAITERS, 1);
                s.pc = FetchBatch;
            }
            FetchBatch => {
                let v = w.fetch_add(CURR_BATCH, 1);
                s.batch = self.batch_id(v);
                s.pc = Stage0;
                return Step::Joined(Order::Batch {
                    id: s.batch,
                    slot: self.batch_members(v),
                });
            }

            // Stage 0: settle on the earliest batch. Both "earlier than" and
            // "equal to" the barrier attempt the CAS.
            Stage0 => {
                w.set_bit(SETTLING_0, s.core);
                s.pc = ReadBatchBarrier;
            }
            ReadBatchBarrier => {
                s.prev = w.load(BATCH_BARRIER);
                if s.batch <= s.prev {
                    s.pc = CasBatchBarrier;
                } else {
                    s.prev = 0;
                    s.pc = Stage0Later;
                }
            }
            CasBatchBarrier => {
                if w.compare_and_swap(BATCH_BARRIER, s.prev, s.batch) {
                    s.pc = Stage0Settled;
                } else {
                    s.pc = ReadBatchBarrier;
                }
                s.prev = 0;
            }
            Stage0Settled => {
                w.reset_bit(SETTLING_0, s.core);
                s.pc = WaitSettle0;
            }
            Stage0Later => {
                // a later batch: mark settled and keep watching the barrier
                w.reset_bit(SETTLING_0, s.core);
                s.pc = ReadBatchBarrier;
                return Step::Spin;
            }
            WaitSettle0 => {
                if w.load(SETTLING_0) != 0 {
                    return Step::Spin;
                }
                s.pc = RecheckBatchBarrier;
            }
            RecheckBatchBarrier => {
                s.pc = if w.load(BATCH_BARRIER) != s.batch { Stage0 } else { Stage1 };
            }

            // Stage 1: settle on the most urgent priority within the batch.
            Stage1 => {
                w.set_bit(SETTLING_1, s.core);
                s.pc = ReadPriorityBarrier;
            }
            ReadPriorityBarrier => {
                s.prev = w.load(PRIORITY_BARRIER);
                s.pc = Stage1BatchCheck;
            }
            Stage1BatchCheck => {
                if w.load(BATCH_BARRIER) != s.batch {
                    // no longer the earliest batch (or barriers were reset)
                    s.prev = 0;
                    s.pc = Stage1Retreat;
                } else if s.priority <= s.prev {
                    s.pc = CasPriorityBarrier;
                } else {
                    s.prev = 0;
                    s.pc = Stage1Lower;
                }
            }
            Stage1Retreat => {
                w.store(PRIORITY_BARRIER, BARRIER_UNSET);
                s.pc = Stage1RetreatSettle;
            }
            Stage1RetreatSettle => {
                w.reset_bit(SETTLING_1, s.core);
                s.pc = Stage0;
            }
            CasPriorityBarrier => {
                if w.compare_and_swap(PRIORITY_BARRIER, s.prev, s.priority) {
                    s.pc = Stage1Settled;
                } else {
                    s.pc = ReadPriorityBarrier;
                }
                s.prev = 0;
            }
            Stage1Settled => {
                w.reset_bit(SETTLING_1, s.core);
                s.pc = WaitSettle1;
            }
            Stage1Lower => {
                w.reset_bit(SETTLING_1, s.core);
                s.pc = ReadPriorityBarrier;
                return Step::Spin;
            }
            WaitSettle1 => {
                if w.load(SETTLING_1) != 0 {
                    return Step::Spin;
                }
                s.pc = FinalCheckPriority;
            }

            // Final stage: spinlock among the survivors.
            FinalCheckPriority => {
                s.pc = if w.load(PRIORITY_BARRIER) != s.priority {
                    Stage1
                } else {
                    FinalCheckBatch
                };
            }
            FinalCheckBatch => {
                s.pc = if w.load(BATCH_BARRIER) != s.batch {
                    FinalRetreat
                } else {
                    FinalTas
                };
            }
            FinalRetreat => {
                w.store(PRIORITY_BARRIER, BARRIER_UNSET);
                s.pc = Stage0;
            }
            FinalTas => {
                if w.test_and_set(STATUS) {
                    s.pc = FinalCheckPriority;
                    return Step::Spin;
                }
                s.pc = DecWaiters;
            }
            DecWaiters => {
                w.fetch_sub(NUM_WAITERS, 1);
                s.pc = ResetPriorityBarrier;
            }

            // Acquired: force every remaining waiter to re-sort.
            ResetPriorityBarrier => {
                w.store(PRIORITY_BARRIER, BARRIER_UNSET);
                s.pc = ResetBatchBarrier;
            }
            ResetBatchBarrier => {
                w.store(BATCH_BARRIER, BARRIER_UNSET);
                s.pc = Done;
                return Step::Acquired;
            }
            Done => return Step::Acquired,
        }
        Step::Continue
    }

    fn begin_release(&self) -> BplRelease {
        BplRelease::ReadCurrBatch
    }

    #[inline(always)]
    fn step_release<W: SharedWords>(&self, w: &mut W, s: &mut BplRelease) -> bool {
        match *s {
            BplRelease::ReadCurrBatch => {
                // Plain store below, not a CAS: nobody else writes
                // curr_batch's batch field while the lock is held, and the
                // member count is discarded anyway.
                let v = w.load(CURR_BATCH);
                *s = BplRelease::StoreCurrBatch(close_batch(v, self.count_bits));
                false
            }
            BplRelease::StoreCurrBatch(v) => {
                w.store(CURR_BATCH, v);
                *s = BplRelease::ResetStatus;
                false
            }
            BplRelease::ResetStatus => {
                let prev = w.fetch_and(STATUS, !1);
                debug_assert!(prev & 1 == 1, "BPL released while not held");
                *s = BplRelease::Done;
                true
            }
            BplRelease::Done => true,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bpl(m: usize) -> Bpl {
        Bpl::new(m).unwrap()
    }

    /// Steps one waiter until it acquires or has spun `spins` times. Run
    /// alone, a waiter only ever spins with its own settling bits clear, so
    /// a few spins means it has reached a steady loop.
    fn run(lock: &Bpl, w: &mut [u64; WORDS], s: &mut BplAcquire, spins: usize) -> (Option<Order>, bool) {
        let mut joined = None;
        let mut idle = 0;
        for _ in 0..10_000 {
            match lock.step_acquire(w, s) {
                Step::Acquired => return (joined, true),
                Step::Joined(o) => joined = Some(o),
                Step::Spin => {
                    idle += 1;
                    if idle >= spins {
                        return (joined, false);
                    }
                }
                Step::Continue => {}
            }
        }
        panic!("waiter neither acquired nor settled into a spin");
    }

    fn release(lock: &Bpl, w: &mut [u64; WORDS]) {
        let mut r = lock.begin_release();
        while !lock.step_release(w, &mut r) {}
    }

    fn acquirer(lock: &Bpl, core: usize, prio: u32) -> BplAcquire {
        lock.begin_acquire(Contender::new(core, prio))
    }

    #[test]
    fn count_bits_is_ceil_log2() {
        let cases = [(1, 0), (2, 1), (3, 2), (4, 2), (5, 3), (8, 3), (9, 4), (63, 6), (64, 6)];
        for (m, k) in cases {
            assert_eq!(bpl(m).count_bits(), k, "m = {m}");
        }
        assert_eq!(bpl(8).max_batch_size(), 7);
        assert_eq!(bpl(5).max_batch_size(), 4);
    }

    #[test]
    fn close_batch_examples() {
        assert_eq!(close_batch(0b101011u64, 3), 0b110000);
        assert_eq!(close_batch(0u64, 3), 0b1000);
        // 64-bit word, k = 6: 2^58 - 1 batch IDs before wrapping
        let last = ((1u64 << 58) - 1) << 6;
        assert_eq!(bpl(64).batch_id(last), (1 << 58) - 1);
        assert_eq!(close_batch(last | 5, 6), 0);
    }

    #[test]
    fn fast_path_on_free_lock() {
        let lock = bpl(4);
        let mut w = lock.initial_words();
        w[CURR_BATCH] = 7 << 2; // stale batch counter, no waiters
        let mut s = acquirer(&lock, 0, 5);
        let (order, acquired) = run(&lock, &mut w, &mut s, 1);
        assert!(acquired);
        assert_eq!(order, Some(Order::FastPath));
        assert_eq!(w[STATUS], 1);
        assert_eq!(w[NUM_WAITERS], 0);
        assert_eq!(w[CURR_BATCH], 0, "fast path clears the batch counter");
        assert_eq!(w[BATCH_BARRIER], BARRIER_UNSET);
        assert_eq!(w[PRIORITY_BARRIER], BARRIER_UNSET);
    }

    #[test]
    fn slow_path_waiter_settles_in_final_stage() {
        let lock = bpl(4);
        let mut w = lock.initial_words();
        let mut a = acquirer(&lock, 0, 5);
        assert!(run(&lock, &mut w, &mut a, 1).1);

        let mut b = acquirer(&lock, 1, 2);
        let (order, acquired) = run(&lock, &mut w, &mut b, 3);
        assert!(!acquired);
        assert_eq!(order, Some(Order::Batch { id: 0, slot: 0 }));
        assert_eq!(w[NUM_WAITERS], 1);
        assert_eq!(lock.batch_members(w[CURR_BATCH]), 1);
        assert_eq!(w[BATCH_BARRIER], 0);
        assert_eq!(w[PRIORITY_BARRIER], 2);
        assert_eq!((w[SETTLING_0], w[SETTLING_1]), (0, 0));
        assert!(matches!(b.pc(), BplPc::FinalCheckPriority | BplPc::FinalCheckBatch | BplPc::FinalTas));
    }

    #[test]
    fn higher_priority_in_same_batch_displaces_final_stage_waiter() {
        let lock = bpl(4);
        let mut w = lock.initial_words();
        let mut a = acquirer(&lock, 0, 9);
        assert!(run(&lock, &mut w, &mut a, 1).1);
        let mut b = acquirer(&lock, 1, 2);
        run(&lock, &mut w, &mut b, 3);
        let mut c = acquirer(&lock, 2, 1);
        let (order, acquired) = run(&lock, &mut w, &mut c, 3);
        assert!(!acquired);
        assert_eq!(order, Some(Order::Batch { id: 0, slot: 1 }));
        assert_eq!(w[PRIORITY_BARRIER], 1);

        // b notices the barrier no longer holds its priority and falls back
        run(&lock, &mut w, &mut b, 3);
        assert!(matches!(b.pc(), BplPc::ReadPriorityBarrier | BplPc::Stage1BatchCheck | BplPc::Stage1Lower));

        release(&lock, &mut w);
        // b keeps spinning in stage 1 while c takes the lock
        assert!(!run(&lock, &mut w, &mut b, 3).1);
        assert!(run(&lock, &mut w, &mut c, 3).1);
        assert_eq!(w[NUM_WAITERS], 1);
    }

    #[test]
    fn earlier_batch_passes_later_batch() {
        let lock = bpl(4);
        let mut w = lock.initial_words();
        // a holds via fast path; b (low priority) and c (high) join batch 0
        let mut a = acquirer(&lock, 0, 3);
        assert!(run(&lock, &mut w, &mut a, 1).1);
        let mut b = acquirer(&lock, 1, 7);
        let mut c = acquirer(&lock, 2, 1);
        run(&lock, &mut w, &mut b, 3);
        run(&lock, &mut w, &mut c, 3);
        run(&lock, &mut w, &mut b, 3);

        // a releases, c wins and resets the barriers
        release(&lock, &mut w);
        assert!(run(&lock, &mut w, &mut c, 3).1);
        assert_eq!(w[BATCH_BARRIER], BARRIER_UNSET);

        // d arrives during c's critical section: batch 1
        let mut d = acquirer(&lock, 3, 0);
        let (order, _) = run(&lock, &mut w, &mut d, 3);
        assert_eq!(order, Some(Order::Batch { id: 1, slot: 0 }));
        // d got first pick of the reset barrier; b re-sorts and reclaims it
        run(&lock, &mut w, &mut b, 3);
        run(&lock, &mut w, &mut d, 3);
        run(&lock, &mut w, &mut b, 3);
        assert_eq!(w[BATCH_BARRIER], 0);
        assert_eq!(w[PRIORITY_BARRIER], 7);

        release(&lock, &mut w);
        assert!(!run(&lock, &mut w, &mut d, 3).1, "later batch must not overtake");
        assert!(run(&lock, &mut w, &mut b, 3).1);
        release(&lock, &mut w);
        assert!(run(&lock, &mut w, &mut d, 3).1);
        assert_eq!(w[NUM_WAITERS], 0);
    }

    #[test]
    fn release_closes_the_batch() {
        let lock = bpl(8);
        let mut w = lock.initial_words();
        w[STATUS] = 1;
        w[CURR_BATCH] = 0b101011;
        release(&lock, &mut w);
        assert_eq!(w[CURR_BATCH], 0b110000);
        assert_eq!(w[STATUS], 0);
        assert_eq!(w[BATCH_BARRIER], BARRIER_UNSET);
    }
}
