//! FIFO ticket lock: a request counter drawn with fetch-and-add and a
//! release counter bumped by the holder.

use crate::atomics::{SharedWords, WORDS};

use super::{check_capacity, Contender, Discipline, LockError, Order, Protocol, Step};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(usize)]
pub enum TicketWord {
    Request = 0,
    Release = 1,
}

const REQUEST: usize = TicketWord::Request as usize;
const RELEASE: usize = TicketWord::Release as usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ticket {
    contenders: usize,
}

impl Ticket {
    pub fn new(contenders: usize) -> Result<Self, LockError> {
        check_capacity(contenders)?;
        Ok(Self { contenders })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TicketAcquire {
    Draw,
    Wait(u64),
    Done,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TicketRelease {
    Bump,
    Done,
}

impl Protocol for Ticket {
    type Acquire = TicketAcquire;
    type Release = TicketRelease;

    fn discipline(&self) -> Discipline {
        Discipline::Fl
    }

    fn capacity(&self) -> usize {
        self.contenders
    }

    fn initial_words(&self) -> [u64; WORDS] {
        [0; WORDS]
    }

    fn begin_acquire(&self, _who: Contender) -> TicketAcquire {
        TicketAcquire::Draw
    }

    #[inline(always)]
    fn step_acquire<W: SharedWords>(&self, w: &mut W, s: &mut TicketAcquire) -> Step {
        match *s {
            TicketAcquire::Draw => {
                let ticket = w.fetch_add(REQUEST, 1);
                *s = TicketAcquire::Wait(ticket);
                Step::Joined(Order::Ticket(ticket))
            }
            TicketAcquire::Wait(ticket) => {
                if w.load(RELEASE) == ticket {
                    *s = TicketAcquire::Done;
                    Step::Acquired
                } else {
                    Step::Spin
                }
            }
            TicketAcquire::Done => Step::Acquired,
        }
    }

    fn begin_release(&self) -> TicketRelease {
        TicketRelease::Bump
    }

    #[inline(always)]
    fn step_release<W: SharedWords>(&self, w: &mut W, s: &mut TicketRelease) -> bool {
        if *s == TicketRelease::Bump {
            let prev = w.fetch_add(RELEASE, 1);
            debug_assert!(prev < w.load(REQUEST), "ticket lock released while not held");
            *s = TicketRelease::Done;
        }
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step_until_spin(lock: &Ticket, w: &mut [u64; WORDS], s: &mut TicketAcquire) -> (Option<Order>, bool) {
        let mut order = None;
        loop {
            match lock.step_acquire(w, s) {
                Step::Joined(o) => order = Some(o),
                Step::Acquired => return (order, true),
                Step::Spin => return (order, false),
                Step::Continue => {}
            }
        }
    }

    #[test]
    fn equal_counters_mean_free() {
        let lock = Ticket::new(4).unwrap();
        let mut w = [0; WORDS];
        w[REQUEST] = 3;
        w[RELEASE] = 3;
        let mut s = lock.begin_acquire(Contender::new(0, 0));
        assert_eq!(step_until_spin(&lock, &mut w, &mut s), (Some(Order::Ticket(3)), true));
        assert_eq!(w[REQUEST], 4);
    }

    #[test]
    fn waits_through_two_releases() {
        let lock = Ticket::new(4).unwrap();
        let mut w = [0; WORDS];
        w[REQUEST] = 5;
        w[RELEASE] = 3;
        let mut s = lock.begin_acquire(Contender::new(0, 0));
        assert_eq!(step_until_spin(&lock, &mut w, &mut s), (Some(Order::Ticket(5)), false));
        for expect_acquired in [false, true] {
            let mut r = lock.begin_release();
            assert!(lock.step_release(&mut w, &mut r));
            assert_eq!(step_until_spin(&lock, &mut w, &mut s).1, expect_acquired);
        }
    }
}
