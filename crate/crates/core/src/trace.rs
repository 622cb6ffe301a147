//! Acquisition traces and the checks run over them.
//!
//! Contenders record into their own bounded [`TraceBuffer`]; nothing is
//! shared between them except the [`SequenceCounter`] that totally orders
//! events. Acquire and release events are stamped from inside the
//! critical section, so on a correct lock the stamps of consecutive
//! holders never interleave.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::locks::Order;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EventKind {
    /// The request was registered with the lock.
    Request,
    Acquire,
    Release,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TraceEvent {
    pub kind: EventKind,
    pub seq: u64,
    pub timestamp_ns: u64,
    pub core: u32,
    pub priority: u32,
    pub order: Order,
}

/// Global event sequencer.
#[derive(Debug, Default)]
pub struct SequenceCounter(AtomicU64);

impl SequenceCounter {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn next(&self) -> u64 {
        self.0.fetch_add(1, Ordering::SeqCst)
    }
}

/// Fixed-capacity per-contender event buffer. Never reallocates; events
/// past capacity are dropped and counted.
#[derive(Debug, Clone)]
pub struct TraceBuffer {
    events: Vec<TraceEvent>,
    capacity: usize,
    dropped: u64,
}

impl TraceBuffer {
    pub fn with_capacity(capacity: usize) -> Self {
        Self {
            events: Vec::with_capacity(capacity),
            capacity,
            dropped: 0,
        }
    }

    #[inline]
    pub fn record(&mut self, event: TraceEvent) {
        if self.events.len() < self.capacity {
            self.events.push(event);
        } else {
            self.dropped += 1;
        }
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    pub fn events(&self) -> &[TraceEvent] {
        &self.events
    }
}

/// One critical section, reassembled from its three events.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Acquisition {
    pub core: u32,
    pub priority: u32,
    pub order: Order,
    pub request_seq: u64,
    pub acquire_seq: u64,
    pub release_seq: u64,
    pub request_ns: u64,
    pub acquire_ns: u64,
    pub release_ns: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TraceError {
    #[error("{0} trace events were dropped on full buffers")]
    Dropped(u64),
    #[error("core {core}: event {seq} ({kind:?}) out of request/acquire/release order")]
    Malformed { core: u32, seq: u64, kind: EventKind },
    #[error("core {core}: trace ends inside an acquisition")]
    Truncated { core: u32 },
}

/// Merged, globally ordered trace.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    pub events: Vec<TraceEvent>,
}

impl Trace {
    /// Merges per-contender buffers by sequence number. Fails if any
    /// buffer overflowed.
    pub fn merge<I: IntoIterator<Item = TraceBuffer>>(buffers: I) -> Result<Self, TraceError> {
        let mut events = Vec::new();
        let mut dropped = 0;
        for b in buffers {
            dropped += b.dropped;
            events.extend(b.events);
        }
        if dropped > 0 {
            return Err(TraceError::Dropped(dropped));
        }
        events.sort_unstable_by_key(|e| e.seq);
        Ok(Self { events })
    }

    /// Pairs up request/acquire/release per core. Result is sorted by
    /// acquire sequence number.
    pub fn acquisitions(&self) -> Result<Vec<Acquisition>, TraceError> {
        let cores = self.events.iter().map(|e| e.core as usize + 1).max().unwrap_or(0);
        let mut open: Vec<Option<Acquisition>> = vec![None; cores];
        let mut stage = vec![EventKind::Release; cores];
        let mut out = Vec::with_capacity(self.events.len() / 3);
        for e in &self.events {
            let c = e.core as usize;
            let bad = TraceError::Malformed {
                core: e.core,
                seq: e.seq,
                kind: e.kind,
            };
            match (stage[c], e.kind) {
                (EventKind::Release, EventKind::Request) => {
                    open[c] = Some(Acquisition {
                        core: e.core,
                        priority: e.priority,
                        order: e.order,
                        request_seq: e.seq,
                        acquire_seq: 0,
                        release_seq: 0,
                        request_ns: e.timestamp_ns,
                        acquire_ns: 0,
                        release_ns: 0,
                    });
                }
                (EventKind::Request, EventKind::Acquire) => {
                    let a = open[c].as_mut().ok_or(bad)?;
                    a.acquire_seq = e.seq;
                    a.acquire_ns = e.timestamp_ns;
                }
                (EventKind::Acquire, EventKind::Release) => {
                    let mut a = open[c].take().ok_or(bad)?;
                    a.release_seq = e.seq;
                    a.release_ns = e.timestamp_ns;
                    out.push(a);
                }
                _ => return Err(bad),
            }
            stage[c] = e.kind;
        }
        if let Some(c) = stage.iter().position(|k| *k != EventKind::Release) {
            return Err(TraceError::Truncated { core: c as u32 });
        }
        out.sort_unstable_by_key(|a| a.acquire_seq);
        Ok(out)
    }
}

/// A failed trace check, with the offending event window.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum Violation {
    #[error("critical sections overlap: core {first_core} [{first_acquire}, {first_release}] and core {second_core} acquired at {second_acquire}")]
    Overlap {
        first_core: u32,
        first_acquire: u64,
        first_release: u64,
        second_core: u32,
        second_acquire: u64,
    },
    #[error("core {core} was bypassed {bypassed} times between seq {request_seq} and {acquire_seq} (bound {bound})")]
    Bypass {
        core: u32,
        bypassed: usize,
        bound: usize,
        request_seq: u64,
        acquire_seq: u64,
    },
    #[error("ticket {got} granted where ticket {expected} was due (acquire seq {acquire_seq})")]
    TicketOrder { expected: u64, got: u64, acquire_seq: u64 },
    #[error("batch {batch} has at least {members} members (bound {bound})")]
    BatchTooLarge { batch: u64, members: u64, bound: u64 },
}

/// No two `[acquire, release]` windows overlap. Expects acquisitions
/// sorted by acquire sequence.
pub fn check_mutual_exclusion(acqs: &[Acquisition]) -> Result<(), Violation> {
    for pair in acqs.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        if a.release_seq > b.acquire_seq {
            return Err(Violation::Overlap {
                first_core: a.core,
                first_acquire: a.acquire_seq,
                first_release: a.release_seq,
                second_core: b.core,
                second_acquire: b.acquire_seq,
            });
        }
    }
    Ok(())
}

/// Number of acquisitions by other contenders that landed between each
/// acquisition's request and its own acquire. Same order as `acqs`
/// (which must be sorted by acquire sequence).
pub fn bypass_counts(acqs: &[Acquisition]) -> Vec<usize> {
    acqs.iter()
        .enumerate()
        .map(|(i, a)| {
            // acquisitions [lo, i) were acquired after a's request
            let lo = acqs[..i].partition_point(|b| b.acquire_seq < a.request_seq);
            acqs[lo..i].iter().filter(|b| b.core != a.core).count()
        })
        .collect()
}

/// Number of acquisitions that were overtaken: some grant before them
/// came from a request registered after theirs.
pub fn overtaken(acqs: &[Acquisition]) -> usize {
    let mut latest_request = None;
    let mut n = 0;
    for a in acqs {
        if latest_request.is_some_and(|r| r > a.request_seq) {
            n += 1;
        }
        latest_request = latest_request.max(Some(a.request_seq));
    }
    n
}

/// Every request is overtaken by at most `bound` foreign acquisitions.
pub fn check_bounded_bypass(acqs: &[Acquisition], bound: usize) -> Result<usize, Violation> {
    let mut worst = 0;
    for (a, n) in acqs.iter().zip(bypass_counts(acqs)) {
        if n > bound {
            return Err(Violation::Bypass {
                core: a.core,
                bypassed: n,
                bound,
                request_seq: a.request_seq,
                acquire_seq: a.acquire_seq,
            });
        }
        worst = worst.max(n);
    }
    Ok(worst)
}

/// Ticket lock: grants follow consecutive ticket numbers.
pub fn check_ticket_order(acqs: &[Acquisition]) -> Result<(), Violation> {
    let mut expected = None;
    for a in acqs {
        if let Order::Ticket(t) = a.order {
            if let Some(e) = expected {
                if t != e {
                    return Err(Violation::TicketOrder {
                        expected: e,
                        got: t,
                        acquire_seq: a.acquire_seq,
                    });
                }
            }
            expected = Some(t + 1);
        }
    }
    Ok(())
}

/// BPL: no batch grows past `bound` members. Members of one batch take
/// distinct slots `0..n`, so checking every slot is below `bound` is
/// exact even when the batch counter is reset between batches.
pub fn check_batch_cardinality(acqs: &[Acquisition], bound: u64) -> Result<u64, Violation> {
    let mut largest = 0;
    for a in acqs {
        if let Order::Batch { id, slot } = a.order {
            if slot >= bound {
                return Err(Violation::BatchTooLarge {
                    batch: id,
                    members: slot + 1,
                    bound,
                });
            }
            largest = largest.max(slot + 1);
        }
    }
    Ok(largest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(kind: EventKind, seq: u64, core: u32, order: Order) -> TraceEvent {
        TraceEvent {
            kind,
            seq,
            timestamp_ns: seq * 10,
            core,
            priority: core,
            order,
        }
    }

    fn acq(core: u32, req: u64, acq: u64, rel: u64, order: Order) -> Vec<TraceEvent> {
        vec![
            ev(EventKind::Request, req, core, order),
            ev(EventKind::Acquire, acq, core, order),
            ev(EventKind::Release, rel, core, order),
        ]
    }

    fn buffer(events: Vec<TraceEvent>) -> TraceBuffer {
        let mut b = TraceBuffer::with_capacity(events.len());
        events.into_iter().for_each(|e| b.record(e));
        b
    }

    #[test]
    fn merge_and_pair() {
        let a = acq(0, 0, 1, 2, Order::Ticket(0));
        let mut b = acq(1, 3, 4, 5, Order::Ticket(1));
        b.extend(acq(1, 6, 7, 8, Order::Ticket(2)));
        let trace = Trace::merge([buffer(b), buffer(a)]).unwrap();
        let acqs = trace.acquisitions().unwrap();
        assert_eq!(acqs.len(), 3);
        assert_eq!(acqs[0].core, 0);
        assert!(check_mutual_exclusion(&acqs).is_ok());
        assert!(check_ticket_order(&acqs).is_ok());
    }

    #[test]
    fn full_buffer_fails_merge() {
        let mut b = TraceBuffer::with_capacity(2);
        for e in acq(0, 0, 1, 2, Order::Unordered) {
            b.record(e);
        }
        assert_eq!(b.dropped(), 1);
        assert_eq!(Trace::merge([b]).unwrap_err(), TraceError::Dropped(1));
    }

    #[test]
    fn malformed_and_truncated() {
        let mut events = acq(0, 0, 1, 2, Order::Unordered);
        events.swap(0, 1);
        for (i, e) in events.iter_mut().enumerate() {
            e.seq = i as u64;
        }
        let trace = Trace { events };
        assert!(matches!(trace.acquisitions(), Err(TraceError::Malformed { .. })));

        let trace = Trace {
            events: vec![ev(EventKind::Request, 0, 2, Order::Unordered)],
        };
        assert_eq!(trace.acquisitions().unwrap_err(), TraceError::Truncated { core: 2 });
    }

    #[test]
    fn overlap_detected() {
        let mut events = acq(0, 0, 1, 4, Order::Unordered);
        events.extend(acq(1, 2, 3, 5, Order::Unordered));
        let acqs = Trace::merge([buffer(events)]).unwrap().acquisitions().unwrap();
        assert!(matches!(check_mutual_exclusion(&acqs), Err(Violation::Overlap { second_core: 1, .. })));
    }

    #[test]
    fn bypass_counting() {
        // core 2 requests at 1 and is overtaken by cores 1 and 3
        let mut events = acq(0, 0, 0, 2, Order::Unordered);
        events.extend(acq(2, 1, 9, 10, Order::Unordered));
        events.extend(acq(1, 3, 4, 5, Order::Unordered));
        events.extend(acq(3, 6, 7, 8, Order::Unordered));
        for (i, e) in events.iter_mut().enumerate() {
            e.seq = [0, 1, 2, 3, 9, 10, 4, 5, 6, 7, 8, 11][i];
        }
        let acqs = Trace::merge([buffer(events)]).unwrap().acquisitions().unwrap();
        let counts = bypass_counts(&acqs);
        let core2 = acqs.iter().position(|a| a.core == 2).unwrap();
        assert_eq!(counts[core2], 2);
        assert_eq!(check_bounded_bypass(&acqs, 2), Ok(2));
        assert!(matches!(check_bounded_bypass(&acqs, 1), Err(Violation::Bypass { core: 2, bypassed: 2, .. })));
    }

    #[test]
    fn overtaking() {
        // core 1 requests after core 0 but acquires first
        let mut events = acq(1, 1, 2, 3, Order::Unordered);
        events.extend(acq(0, 0, 4, 5, Order::Unordered));
        let acqs = Trace::merge([buffer(events)]).unwrap().acquisitions().unwrap();
        assert_eq!(overtaken(&acqs), 1);
        let mut events = acq(0, 0, 1, 2, Order::Unordered);
        events.extend(acq(1, 3, 4, 5, Order::Unordered));
        let acqs = Trace::merge([buffer(events)]).unwrap().acquisitions().unwrap();
        assert_eq!(overtaken(&acqs), 0);
    }

    #[test]
    fn ticket_order_violation() {
        let mut events = acq(0, 0, 2, 3, Order::Ticket(1));
        events.extend(acq(1, 1, 4, 5, Order::Ticket(0)));
        let acqs = Trace::merge([buffer(events)]).unwrap().acquisitions().unwrap();
        assert!(matches!(check_ticket_order(&acqs), Err(Violation::TicketOrder { expected: 2, got: 0, .. })));
    }

    #[test]
    fn batch_slots() {
        let mut events = acq(0, 0, 1, 2, Order::Batch { id: 4, slot: 0 });
        events.extend(acq(1, 3, 4, 5, Order::Batch { id: 4, slot: 2 }));
        let acqs = Trace::merge([buffer(events)]).unwrap().acquisitions().unwrap();
        assert_eq!(check_batch_cardinality(&acqs, 3), Ok(3));
        assert!(check_batch_cardinality(&acqs, 2).is_err());
    }
}
