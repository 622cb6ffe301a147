//! Exhaustive interleaving exploration of a lock protocol.
//!
//! A small number of simulated threads each perform a fixed number of
//! acquire/release cycles. Every protocol step is one shared-memory
//! transaction, so enumerating all step orders enumerates all executions
//! under sequential consistency. The explorer builds the full reachable
//! state graph and checks:
//!
//! * mutual exclusion in every reachable state;
//! * that all-threads-finished is reachable;
//! * that no strongly connected component lets every unfinished thread
//!   keep stepping forever without anyone finishing a cycle. Such a
//!   component is an execution that is fair to every thread yet never
//!   terminates: a livelock or a deadlock (spinning threads self-loop).

use std::hash::Hash;

use indexmap::IndexSet;

use crate::atomics::WORDS;
use crate::locks::{Contender, Protocol, Step};

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
enum Phase<A, R> {
    Idle,
    Acquiring(A),
    Holding,
    Releasing(R),
    Finished,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
struct ThreadState<A, R> {
    phase: Phase<A, R>,
    cycles_done: u8,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
struct State<A, R> {
    words: [u64; WORDS],
    threads: Vec<ThreadState<A, R>>,
}

impl<A, R> State<A, R> {
    fn unfinished_mask(&self) -> u64 {
        self.threads
            .iter()
            .enumerate()
            .filter(|(_, t)| !matches!(t.phase, Phase::Finished))
            .fold(0, |m, (i, _)| m | 1 << i)
    }

    fn holders(&self) -> usize {
        self.threads
            .iter()
            .filter(|t| matches!(t.phase, Phase::Holding | Phase::Releasing(_)))
            .count()
    }
}

/// What to explore.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExploreConfig {
    /// Priority of each simulated thread; thread `i` runs on core `i`.
    pub priorities: Vec<u32>,
    /// Acquire/release cycles per thread.
    pub cycles: u8,
    /// Give up once this many distinct states have been seen.
    pub max_states: usize,
}

impl ExploreConfig {
    /// `threads` threads with distinct priorities `1..=threads`.
    pub fn new(threads: usize, cycles: u8) -> Self {
        Self {
            priorities: (1..=threads as u32).collect(),
            cycles,
            max_states: 50_000_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct ExploreReport {
    pub threads: usize,
    pub cycles: u8,
    pub states: usize,
    pub transitions: usize,
    pub terminal_states: usize,
    /// Reachable states in which two threads hold the lock.
    pub exclusion_violations: usize,
    /// Strongly connected components that admit a fair non-terminating run.
    pub fair_cycles: usize,
}

impl ExploreReport {
    pub fn passed(&self) -> bool {
        self.terminal_states > 0 && self.exclusion_violations == 0 && self.fair_cycles == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ExploreError {
    #[error("state space exceeds {0} states")]
    StateLimit(usize),
    #[error("{threads} threads exceed the protocol capacity of {capacity}")]
    TooManyThreads { threads: usize, capacity: usize },
}

fn successor<P: Protocol>(
    p: &P,
    priorities: &[u32],
    cycles: u8,
    s: &State<P::Acquire, P::Release>,
    t: usize,
) -> State<P::Acquire, P::Release> {
    let mut next = s.clone();
    let phase = std::mem::replace(&mut next.threads[t].phase, Phase::Finished);
    let new_phase = match phase {
        Phase::Idle | Phase::Acquiring(_) => {
            let mut st = match phase {
                Phase::Acquiring(st) => st,
                _ => p.begin_acquire(Contender::new(t, priorities[t])),
            };
            match p.step_acquire(&mut next.words, &mut st) {
                Step::Acquired => Phase::Holding,
                _ => Phase::Acquiring(st),
            }
        }
        Phase::Holding | Phase::Releasing(_) => {
            let mut st = match phase {
                Phase::Releasing(st) => st,
                _ => p.begin_release(),
            };
            if p.step_release(&mut next.words, &mut st) {
                next.threads[t].cycles_done += 1;
                if next.threads[t].cycles_done == cycles {
                    Phase::Finished
                } else {
                    Phase::Idle
                }
            } else {
                Phase::Releasing(st)
            }
        }
        Phase::Finished => unreachable!("finished threads take no steps"),
    };
    next.threads[t].phase = new_phase;
    next
}

/// Explores every interleaving of `config.priorities.len()` threads
/// running `config.cycles` acquire/release cycles each.
pub fn explore<P: Protocol>(protocol: &P, config: &ExploreConfig) -> Result<ExploreReport, ExploreError>
where
    P::Acquire: Hash + Eq,
    P::Release: Hash + Eq,
{
    let n = config.priorities.len();
    if n > protocol.capacity() || n > 64 {
        return Err(ExploreError::TooManyThreads {
            threads: n,
            capacity: protocol.capacity(),
        });
    }
    let initial = State {
        words: protocol.initial_words(),
        threads: vec![
            ThreadState {
                phase: if config.cycles == 0 { Phase::Finished } else { Phase::Idle },
                cycles_done: 0,
            };
            n
        ],
    };

    let mut report = ExploreReport {
        threads: n,
        cycles: config.cycles,
        ..Default::default()
    };
    let mut states = IndexSet::new();
    states.insert(initial);
    // compressed adjacency: edges of state i are offsets[i]..offsets[i+1]
    let mut offsets = vec![0u32];
    let mut targets: Vec<u32> = Vec::new();
    let mut labels: Vec<u8> = Vec::new();

    let mut i = 0;
    while i < states.len() {
        let s = states.get_index(i).expect("index in range").clone();
        if s.holders() > 1 {
            report.exclusion_violations += 1;
        }
        let unfinished = s.unfinished_mask();
        if unfinished == 0 {
            report.terminal_states += 1;
        }
        for t in 0..n {
            if unfinished & (1 << t) == 0 {
                continue;
            }
            let succ = successor(protocol, &config.priorities, config.cycles, &s, t);
            let (idx, _) = states.insert_full(succ);
            if states.len() > config.max_states {
                return Err(ExploreError::StateLimit(config.max_states));
            }
            targets.push(idx as u32);
            labels.push(t as u8);
        }
        offsets.push(targets.len() as u32);
        i += 1;
    }
    report.states = states.len();
    report.transitions = targets.len();

    let comp = strongly_connected(&offsets, &targets);
    let comps = comp.iter().copied().max().map_or(0, |c| c as usize + 1);
    // threads with at least one edge inside their component
    let mut stepping = vec![0u64; comps];
    for u in 0..states.len() {
        for e in offsets[u] as usize..offsets[u + 1] as usize {
            let v = targets[e] as usize;
            if comp[u] == comp[v] {
                stepping[comp[u] as usize] |= 1 << labels[e];
            }
        }
    }
    let mut unfinished = vec![0u64; comps];
    for (u, s) in states.iter().enumerate() {
        unfinished[comp[u] as usize] = s.unfinished_mask();
    }
    report.fair_cycles = (0..comps)
        .filter(|&c| unfinished[c] != 0 && stepping[c] & unfinished[c] == unfinished[c])
        .count();
    Ok(report)
}

/// Iterative Tarjan. Returns the component index of every vertex.
fn strongly_connected(offsets: &[u32], targets: &[u32]) -> Vec<u32> {
    const UNSEEN: u32 = u32::MAX;
    let n = offsets.len() - 1;
    let mut index = vec![UNSEEN; n];
    let mut low = vec![0u32; n];
    let mut on_stack = vec![false; n];
    let mut comp = vec![UNSEEN; n];
    let mut stack = Vec::new();
    let mut call: Vec<(u32, u32)> = Vec::new();
    let mut next_index = 0u32;
    let mut next_comp = 0u32;

    for root in 0..n {
        if index[root] != UNSEEN {
            continue;
        }
        call.push((root as u32, offsets[root]));
        index[root] = next_index;
        low[root] = next_index;
        next_index += 1;
        stack.push(root as u32);
        on_stack[root] = true;

        while let Some(&mut (v, ref mut edge)) = call.last_mut() {
            let v = v as usize;
            if *edge < offsets[v + 1] {
                let w = targets[*edge as usize] as usize;
                *edge += 1;
                if index[w] == UNSEEN {
                    index[w] = next_index;
                    low[w] = next_index;
                    next_index += 1;
                    stack.push(w as u32);
                    on_stack[w] = true;
                    call.push((w as u32, offsets[w]));
                } else if on_stack[w] {
                    low[v] = low[v].min(index[w]);
                }
                continue;
            }
            call.pop();
            if let Some(&(parent, _)) = call.last() {
                let parent = parent as usize;
                low[parent] = low[parent].min(low[v]);
            }
            if low[v] == index[v] {
                loop {
                    let w = stack.pop().expect("tarjan stack underflow") as usize;
                    on_stack[w] = false;
                    comp[w] = next_comp;
                    if w == v {
                        break;
                    }
                }
                next_comp += 1;
            }
        }
    }
    comp
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::atomics::SharedWords;
    use crate::locks::{Bpl, Discipline, Order, Tas, TicketProtocol};

    #[test]
    fn tarjan_on_small_graph() {
        // 0 -> 1 -> 2 -> 0, 2 -> 3, 3 -> 3
        let offsets = [0, 1, 2, 4, 5];
        let targets = [1, 2, 0, 3, 3];
        let comp = strongly_connected(&offsets, &targets);
        assert_eq!(comp[0], comp[1]);
        assert_eq!(comp[1], comp[2]);
        assert_ne!(comp[2], comp[3]);
    }

    #[test]
    fn two_thread_locks_pass() {
        let cfg = ExploreConfig::new(2, 2);
        let tas = explore(&Tas::new(2).unwrap(), &cfg).unwrap();
        let ticket = explore(&TicketProtocol::new(2).unwrap(), &cfg).unwrap();
        let bpl = explore(&Bpl::new(2).unwrap(), &cfg).unwrap();
        for r in [&tas, &ticket, &bpl] {
            assert!(r.passed(), "{r:?}");
        }
    }

    /// A lock that never lets anyone in: every thread spins forever.
    struct Closed;

    impl Protocol for Closed {
        type Acquire = ();
        type Release = ();

        fn discipline(&self) -> Discipline {
            Discipline::Sl
        }
        fn capacity(&self) -> usize {
            4
        }
        fn initial_words(&self) -> [u64; WORDS] {
            [1, 0, 0, 0, 0, 0, 0, 0]
        }
        fn begin_acquire(&self, _: Contender) {}
        fn step_acquire<W: SharedWords>(&self, w: &mut W, _: &mut ()) -> Step {
            if w.test_and_set(0) {
                Step::Spin
            } else {
                Step::Acquired
            }
        }
        fn begin_release(&self) {}
        fn step_release<W: SharedWords>(&self, w: &mut W, _: &mut ()) -> bool {
            w.reset_bit(0, 0);
            true
        }
    }

    #[test]
    fn deadlock_is_a_fair_cycle() {
        let r = explore(&Closed, &ExploreConfig::new(2, 1)).unwrap();
        assert_eq!(r.terminal_states, 0);
        assert_eq!(r.fair_cycles, 1);
        assert!(!r.passed());
    }

    /// Test-and-set lock with the release forgotten: exclusion breaks.
    struct Leaky;

    impl Protocol for Leaky {
        type Acquire = bool;
        type Release = ();

        fn discipline(&self) -> Discipline {
            Discipline::Sl
        }
        fn capacity(&self) -> usize {
            4
        }
        fn initial_words(&self) -> [u64; WORDS] {
            [0; WORDS]
        }
        fn begin_acquire(&self, _: Contender) -> bool {
            false
        }
        fn step_acquire<W: SharedWords>(&self, w: &mut W, joined: &mut bool) -> Step {
            if !*joined {
                *joined = true;
                return Step::Joined(Order::Unordered);
            }
            // reads, then enters without claiming
            if w.load(0) == 0 {
                Step::Acquired
            } else {
                Step::Spin
            }
        }
        fn begin_release(&self) {}
        fn step_release<W: SharedWords>(&self, _: &mut W, _: &mut ()) -> bool {
            true
        }
    }

    #[test]
    fn overlap_is_reported() {
        let r = explore(&Leaky, &ExploreConfig::new(2, 1)).unwrap();
        assert!(r.exclusion_violations > 0);
        assert!(!r.passed());
    }

    #[test]
    fn state_limit() {
        let cfg = ExploreConfig {
            max_states: 10,
            ..ExploreConfig::new(3, 1)
        };
        assert_eq!(explore(&Bpl::new(3).unwrap(), &cfg), Err(ExploreError::StateLimit(10)));
    }
}
