//! Spinlock disciplines: the batched priority lock, a FIFO ticket lock and
//! an unordered test-and-set lock.
//!
//! Each discipline is a [`Protocol`]: a step machine in which every step
//! performs at most one shared-memory transaction. [`Lock`] drives a
//! protocol over real atomics; [`crate::explore`] drives the very same
//! step functions over shadow memory to enumerate interleavings.

mod bpl;
mod tas;
mod ticket;

use std::fmt;
use std::hash::Hash;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::atomics::{AtomicWords, SharedWords, SpinPolicy, Spinner, WORDS};

pub use bpl::{close_batch, BatchWord, Bpl, BplAcquire, BplRelease, BplWord};
pub use tas::{Tas, TasAcquire, TasRelease};
pub use ticket::{Ticket as TicketProtocol, TicketAcquire, TicketRelease, TicketWord};

/// Largest contender count any lock accepts: one settling bit per core in
/// a single 64-bit word.
pub const MAX_CONTENDERS: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LockError {
    #[error("contender capacity must be at least 1")]
    ZeroCapacity,
    #[error("contender capacity {0} exceeds the settling-vector width of {MAX_CONTENDERS}")]
    CapacityTooLarge(usize),
}

/// The lock being exercised, by its short name.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Discipline {
    /// Unordered test-and-set spinlock.
    #[serde(rename = "SL")]
    Sl,
    /// FIFO ticket lock.
    #[serde(rename = "FL")]
    Fl,
    /// Batched priority lock.
    #[serde(rename = "BPL")]
    Bpl,
}

impl Discipline {
    pub const ALL: [Discipline; 3] = [Discipline::Sl, Discipline::Fl, Discipline::Bpl];

    pub fn as_str(self) -> &'static str {
        match self {
            Discipline::Sl => "SL",
            Discipline::Fl => "FL",
            Discipline::Bpl => "BPL",
        }
    }
}

impl fmt::Display for Discipline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Discipline {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "SL" | "TAS" => Ok(Discipline::Sl),
            "FL" | "TICKET" => Ok(Discipline::Fl),
            "BPL" => Ok(Discipline::Bpl),
            other => Err(format!("unknown lock discipline `{other}` (expected SL, FL or BPL)")),
        }
    }
}

/// Who is asking: the core the contender runs on and its priority
/// (numerically lower is more urgent).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Contender {
    pub core: usize,
    pub priority: u32,
}

impl Contender {
    pub fn new(core: usize, priority: u32) -> Self {
        Self { core, priority }
    }
}

/// How an acquisition was ordered relative to the other contenders.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Order {
    /// BPL uncontended acquisition; never took a batch ID.
    FastPath,
    /// BPL slow path. `slot` is the number of earlier members of the same
    /// batch, i.e. the low field of `curr_batch` at fetch time.
    Batch { id: u64, slot: u64 },
    /// Ticket-lock ticket.
    Ticket(u64),
    /// Test-and-set lock; no ordering information.
    Unordered,
}

impl Order {
    pub fn batch_id(&self) -> Option<u64> {
        match *self {
            Order::Batch { id, .. } => Some(id),
            _ => None,
        }
    }
}

/// Proof of a completed acquisition; handed back on release.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Ticket {
    pub contender: Contender,
    pub order: Order,
}

/// Outcome of a single protocol step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Step {
    /// Made progress; call again.
    Continue,
    /// Re-checked a condition that did not hold; call again after a spin hint.
    Spin,
    /// The request is now registered with the lock under this order.
    Joined(Order),
    /// The caller holds the lock.
    Acquired,
}

/// A lock algorithm expressed as a step machine over [`SharedWords`].
pub trait Protocol: Send + Sync {
    type Acquire: Clone + Eq + Hash + fmt::Debug;
    type Release: Clone + Eq + Hash + fmt::Debug;

    fn discipline(&self) -> Discipline;

    /// Maximum number of simultaneous contenders.
    fn capacity(&self) -> usize;

    fn initial_words(&self) -> [u64; WORDS];

    fn begin_acquire(&self, who: Contender) -> Self::Acquire;

    fn step_acquire<W: SharedWords>(&self, words: &mut W, state: &mut Self::Acquire) -> Step;

    fn begin_release(&self) -> Self::Release;

    /// Returns `true` once the lock has been released.
    fn step_release<W: SharedWords>(&self, words: &mut W, state: &mut Self::Release) -> bool;
}

/// Uniform acquire/release interface over every discipline.
pub trait LockDiscipline: Send + Sync {
    fn discipline(&self) -> Discipline;

    fn capacity(&self) -> usize;

    /// Spins until the lock is held. `on_request` runs exactly once, at
    /// the moment the request is registered with the lock (ticket drawn,
    /// batch joined, or fast path won).
    fn acquire_with<F: FnOnce(&Order)>(&self, who: Contender, on_request: F) -> Ticket;

    fn acquire(&self, who: Contender) -> Ticket {
        self.acquire_with(who, |_| {})
    }

    fn release(&self, ticket: Ticket);
}

/// A protocol running on real atomics.
#[derive(Debug)]
pub struct Lock<P: Protocol> {
    words: AtomicWords,
    protocol: P,
    spin: SpinPolicy,
}

/// The batched priority lock.
pub type BatchedPriorityLock = Lock<Bpl>;
/// FIFO ticket lock.
pub type TicketLock = Lock<TicketProtocol>;
/// Unordered test-and-set spinlock.
pub type TasLock = Lock<Tas>;

impl<P: Protocol> Lock<P> {
    pub fn from_protocol(protocol: P) -> Self {
        Self {
            words: AtomicWords::new(protocol.initial_words()),
            protocol,
            spin: SpinPolicy::default(),
        }
    }

    pub fn with_spin_policy(mut self, spin: SpinPolicy) -> Self {
        self.spin = spin;
        self
    }

    pub fn protocol(&self) -> &P {
        &self.protocol
    }

    /// Racy copy of the shared words, for diagnostics and tests.
    pub fn snapshot(&self) -> [u64; WORDS] {
        self.words.snapshot()
    }
}

impl BatchedPriorityLock {
    pub fn new(contenders: usize) -> Result<Self, LockError> {
        Ok(Self::from_protocol(Bpl::new(contenders)?))
    }
}

impl TicketLock {
    pub fn new(contenders: usize) -> Result<Self, LockError> {
        Ok(Self::from_protocol(TicketProtocol::new(contenders)?))
    }
}

impl TasLock {
    pub fn new(contenders: usize) -> Result<Self, LockError> {
        Ok(Self::from_protocol(Tas::new(contenders)?))
    }
}

impl<P: Protocol> LockDiscipline for Lock<P> {
    fn discipline(&self) -> Discipline {
        self.protocol.discipline()
    }

    fn capacity(&self) -> usize {
        self.protocol.capacity()
    }

    #[inline]
    fn acquire_with<F: FnOnce(&Order)>(&self, who: Contender, on_request: F) -> Ticket {
        assert!(who.core < self.protocol.capacity(), "core index {} out of range", who.core);
        let mut words = &self.words;
        let mut state = self.protocol.begin_acquire(who);
        let mut spinner = Spinner::new(self.spin);
        let mut on_request = Some(on_request);
        let mut order = None;
        loop {
            match self.protocol.step_acquire(&mut words, &mut state) {
                Step::Continue => {}
                Step::Spin => spinner.spin(),
                Step::Joined(o) => {
                    if let Some(hook) = on_request.take() {
                        hook(&o);
                    }
                    order = Some(o);
                }
                Step::Acquired => break,
            }
        }
        Ticket {
            contender: who,
            order: order.expect("protocol acquired without registering the request"),
        }
    }

    #[inline]
    fn release(&self, _ticket: Ticket) {
        let mut words = &self.words;
        let mut state = self.protocol.begin_release();
        while !self.protocol.step_release(&mut words, &mut state) {}
    }
}

pub(crate) fn check_capacity(contenders: usize) -> Result<(), LockError> {
    match contenders {
        0 => Err(LockError::ZeroCapacity),
        n if n > MAX_CONTENDERS => Err(LockError::CapacityTooLarge(n)),
        _ => Ok(()),
    }
}

/// Runtime-selected lock, for drivers that pick the discipline from config.
#[derive(Debug)]
pub enum AnyLock {
    Sl(TasLock),
    Fl(TicketLock),
    Bpl(BatchedPriorityLock),
}

impl AnyLock {
    pub fn new(discipline: Discipline, contenders: usize, spin: SpinPolicy) -> Result<Self, LockError> {
        Ok(match discipline {
            Discipline::Sl => AnyLock::Sl(TasLock::new(contenders)?.with_spin_policy(spin)),
            Discipline::Fl => AnyLock::Fl(TicketLock::new(contenders)?.with_spin_policy(spin)),
            Discipline::Bpl => AnyLock::Bpl(BatchedPriorityLock::new(contenders)?.with_spin_policy(spin)),
        })
    }
}

impl LockDiscipline for AnyLock {
    fn discipline(&self) -> Discipline {
        match self {
            AnyLock::Sl(l) => l.discipline(),
            AnyLock::Fl(l) => l.discipline(),
            AnyLock::Bpl(l) => l.discipline(),
        }
    }

    fn capacity(&self) -> usize {
        match self {
            AnyLock::Sl(l) => l.capacity(),
            AnyLock::Fl(l) => l.capacity(),
            AnyLock::Bpl(l) => l.capacity(),
        }
    }

    fn acquire_with<F: FnOnce(&Order)>(&self, who: Contender, on_request: F) -> Ticket {
        match self {
            AnyLock::Sl(l) => l.acquire_with(who, on_request),
            AnyLock::Fl(l) => l.acquire_with(who, on_request),
            AnyLock::Bpl(l) => l.acquire_with(who, on_request),
        }
    }

    fn release(&self, ticket: Ticket) {
        match self {
            AnyLock::Sl(l) => l.release(ticket),
            AnyLock::Fl(l) => l.release(ticket),
            AnyLock::Bpl(l) => l.release(ticket),
        }
    }
}
