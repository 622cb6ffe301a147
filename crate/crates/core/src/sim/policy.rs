use std::collections::BTreeMap;

use super::Policy;

/// A request waiting for the server.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Waiting {
    pub source: u32,
    pub priority: u32,
    pub t_request: f64,
    pub batch: Option<u64>,
    /// Global arrival order; breaks every remaining tie.
    pub arrival: u64,
}

/// Waiting requests ordered by the policy's grant key.
///
/// * FL: arrival order.
/// * PL: priority, then arrival.
/// * BPL: batch tag, then priority, then arrival. The tag is the batch
///   open at arrival; [`PendingSet::close_batch`] opens the next one.
#[derive(Debug, Clone)]
pub struct PendingSet {
    policy: Policy,
    queue: BTreeMap<(u64, u64, u64), Waiting>,
    current_batch: u64,
    arrivals: u64,
}

impl PendingSet {
    pub fn new(policy: Policy) -> Self {
        Self {
            policy,
            queue: BTreeMap::new(),
            current_batch: 0,
            arrivals: 0,
        }
    }

    pub fn policy(&self) -> Policy {
        self.policy
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn current_batch(&self) -> u64 {
        self.current_batch
    }

    pub fn arrive(&mut self, source: u32, priority: u32, now: f64) {
        let arrival = self.arrivals;
        self.arrivals += 1;
        let batch = (self.policy == Policy::Bpl).then_some(self.current_batch);
        let key = match self.policy {
            Policy::Fl => (arrival, 0, 0),
            Policy::Pl => (priority as u64, arrival, 0),
            Policy::Bpl => (self.current_batch, priority as u64, arrival),
        };
        self.queue.insert(
            key,
            Waiting {
                source,
                priority,
                t_request: now,
                batch,
                arrival,
            },
        );
    }

    /// Holder released the lock with waiters present.
    pub fn close_batch(&mut self) {
        self.current_batch += 1;
    }

    pub fn next_grant(&mut self) -> Option<Waiting> {
        self.queue.pop_first().map(|(_, w)| w)
    }

    /// Remaining waiters, in grant order.
    pub fn drain(&mut self) -> impl Iterator<Item = Waiting> {
        std::mem::take(&mut self.queue).into_values()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grant_order(p: Policy, arrivals: &[(u32, f64)], close_after: usize) -> Vec<u32> {
        let mut set = PendingSet::new(p);
        for (i, &(prio, t)) in arrivals.iter().enumerate() {
            if i == close_after {
                set.close_batch();
            }
            set.arrive(prio - 1, prio, t);
        }
        std::iter::from_fn(|| set.next_grant()).map(|w| w.priority).collect()
    }

    #[test]
    fn fifo() {
        assert_eq!(grant_order(Policy::Fl, &[(4, 10.0), (2, 12.0)], usize::MAX), [4, 2]);
    }

    #[test]
    fn strict_priority() {
        assert_eq!(grant_order(Policy::Pl, &[(5, 10.0), (1, 12.0)], usize::MAX), [1, 5]);
    }

    #[test]
    fn batched_priority_within_batch() {
        // both arrive during one service: same batch, urgent one first
        assert_eq!(grant_order(Policy::Bpl, &[(7, 1.0), (2, 2.0)], usize::MAX), [2, 7]);
    }

    #[test]
    fn batched_priority_across_batches() {
        assert_eq!(grant_order(Policy::Bpl, &[(2, 1.0), (1, 2.0)], 1), [2, 1]);
    }

    #[test]
    fn batch_tags() {
        let mut set = PendingSet::new(Policy::Bpl);
        set.arrive(0, 1, 0.0);
        set.close_batch();
        set.arrive(1, 2, 1.0);
        let tags: Vec<_> = set.drain().map(|w| w.batch).collect();
        assert_eq!(tags, [Some(0), Some(1)]);
        let mut fl = PendingSet::new(Policy::Fl);
        fl.arrive(0, 1, 0.0);
        assert_eq!(fl.next_grant().unwrap().batch, None);
    }
}
