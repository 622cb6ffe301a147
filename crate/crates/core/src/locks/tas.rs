//! Unordered test-and-set spinlock.

use crate::atomics::{SharedWords, WORDS};

use super::{check_capacity, Contender, Discipline, LockError, Order, Protocol, Step};

const STATUS: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tas {
    contenders: usize,
}

impl Tas {
    pub fn new(contenders: usize) -> Result<Self, LockError> {
        check_capacity(contenders)?;
        Ok(Self { contenders })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TasAcquire {
    Arrive,
    Spin,
    Done,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TasRelease {
    Clear,
    Done,
}

impl Protocol for Tas {
    type Acquire = TasAcquire;
    type Release = TasRelease;

    fn discipline(&self) -> Discipline {
        Discipline::Sl
    }

    fn capacity(&self) -> usize {
        self.contenders
    }

    fn initial_words(&self) -> [u64; WORDS] {
        [0; WORDS]
    }

    fn begin_acquire(&self, _who: Contender) -> TasAcquire {
        TasAcquire::Arrive
    }

    #[inline(always)]
    fn step_acquire<W: SharedWords>(&self, w: &mut W, s: &mut TasAcquire) -> Step {
        match *s {
            TasAcquire::Arrive => {
                *s = TasAcquire::Spin;
                Step::Joined(Order::Unordered)
            }
            TasAcquire::Spin => {
                if w.test_and_set(STATUS) {
                    Step::Spin
                } else {
                    *s = TasAcquire::Done;
                    Step::Acquired
                }
            }
            TasAcquire::Done => Step::Acquired,
        }
    }

    fn begin_release(&self) -> TasRelease {
        TasRelease::Clear
    }

    #[inline(always)]
    fn step_release<W: SharedWords>(&self, w: &mut W, s: &mut TasRelease) -> bool {
        if *s == TasRelease::Clear {
            let prev = w.fetch_and(STATUS, !1);
            debug_assert!(prev & 1 == 1, "TAS lock released while not held");
            *s = TasRelease::Done;
        }
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn free_then_held() {
        let lock = Tas::new(2).unwrap();
        let mut w = [0; WORDS];
        let mut a = lock.begin_acquire(Contender::new(0, 1));
        assert_eq!(lock.step_acquire(&mut w, &mut a), Step::Joined(Order::Unordered));
        assert_eq!(lock.step_acquire(&mut w, &mut a), Step::Acquired);

        let mut b = lock.begin_acquire(Contender::new(1, 0));
        lock.step_acquire(&mut w, &mut b);
        assert_eq!(lock.step_acquire(&mut w, &mut b), Step::Spin);
        assert_eq!(lock.step_acquire(&mut w, &mut b), Step::Spin);

        let mut r = lock.begin_release();
        assert!(lock.step_release(&mut w, &mut r));
        assert_eq!(lock.step_acquire(&mut w, &mut b), Step::Acquired);
    }
}
