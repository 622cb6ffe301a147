//! Native benchmark and stress harness.
//!
//! Contenders are pinned threads that only ever spin, standing in for
//! non-preemptible kernel code. Three kinds of run:
//!
//! * [`measure_uncontested`]: cycles per acquire/release pair, one thread;
//! * [`run_contended`]: Poisson arrivals, fixed-length busy critical
//!   sections, a global request budget;
//! * [`stress`]: back-to-back acquisitions with tracing, for invariant
//!   checks.

pub mod timer;

use std::cell::UnsafeCell;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Barrier;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::atomics::SpinPolicy;
use crate::locks::{AnyLock, Contender, Discipline, LockDiscipline, LockError, Order};
use crate::metrics::{count_inversions, DelayTable, Grant, InversionOptions, MetricsError, MetricsRow};
use crate::trace::{
    check_batch_cardinality, check_bounded_bypass, check_mutual_exclusion, check_ticket_order,
    overtaken, EventKind, SequenceCounter, Trace, TraceBuffer, TraceError, TraceEvent, Violation,
};
use timer::{cycles, ns_since, ClockError, CycleClock};

/// Environment variable overriding the thread-to-core map, e.g. `2,3,4,5`.
pub const PIN_ENV: &str = "BPL_PIN_CORES";

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error(transparent)]
    Clock(#[from] ClockError),
    #[error(transparent)]
    Lock(#[from] LockError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("could not pin thread {thread} to core {core}")]
    Pinning { thread: usize, core: usize },
    #[error("invalid benchmark config: {}", .0.join("; "))]
    Config(Vec<String>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverheadReport {
    pub discipline: Discipline,
    pub min: u64,
    pub median: u64,
    pub p999: u64,
    pub max: u64,
    pub samples: usize,
    /// The first, cold-cache sample. Included in `max`.
    pub cold: u64,
    /// Subtracted from every sample.
    pub timer_overhead: u64,
}

fn percentile(sorted: &[u64], q: f64) -> u64 {
    let idx = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1;
    sorted[idx]
}

/// Cycles per uncontended acquire + release, timer overhead removed.
pub fn measure_uncontested(
    discipline: Discipline,
    capacity: usize,
    samples: usize,
    clock: &CycleClock,
) -> Result<OverheadReport, BenchError> {
    let lock = AnyLock::new(discipline, capacity, SpinPolicy::Pause)?;
    let who = Contender::new(0, 1);
    let mut spans = Vec::with_capacity(samples.max(1));
    for _ in 0..samples.max(1) {
        let start = cycles();
        let t = lock.acquire(who);
        lock.release(t);
        let end = cycles();
        spans.push(clock.span(start, end));
    }
    let cold = spans[0];
    spans.sort_unstable();
    Ok(OverheadReport {
        discipline,
        min: spans[0],
        median: percentile(&spans, 0.5),
        p999: percentile(&spans, 0.999),
        max: spans[spans.len() - 1],
        samples: spans.len(),
        cold,
        timer_overhead: clock.overhead,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArrivalScheme {
    /// Every thread requests at `lambda_agg / m`.
    Equal,
    /// Thread of priority rank `r` (1 = most urgent) requests at
    /// `r * lambda_agg / (1 + 2 + ... + m)`.
    Skewed,
}

impl ArrivalScheme {
    pub fn as_str(self) -> &'static str {
        match self {
            ArrivalScheme::Equal => "equal",
            ArrivalScheme::Skewed => "skewed",
        }
    }

    /// Per-thread shares of the aggregate rate; they sum to 1.
    pub fn shares(self, threads: usize) -> Vec<f64> {
        match self {
            ArrivalScheme::Equal => vec![1.0 / threads as f64; threads],
            ArrivalScheme::Skewed => {
                let total = (threads * (threads + 1) / 2) as f64;
                (1..=threads).map(|r| r as f64 / total).collect()
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub threads: usize,
    pub discipline: Discipline,
    pub scheme: ArrivalScheme,
    /// Aggregate arrival rate as a fraction of the critical-section service
    /// rate (1 / `cs_ns`).
    pub load: f64,
    pub cs_ns: u64,
    pub budget: usize,
    pub seed: u64,
    /// Core for each thread. Falls back to `BPL_PIN_CORES`, then to
    /// thread `i` on core `i mod cores`.
    pub pin: Option<Vec<usize>>,
    pub trace: bool,
}

impl BenchConfig {
    /// Defaults: 70 us critical sections, 80,000 requests.
    pub fn new(threads: usize, discipline: Discipline, scheme: ArrivalScheme, load: f64, seed: u64) -> Self {
        Self {
            threads,
            discipline,
            scheme,
            load,
            cs_ns: 70_000,
            budget: 80_000,
            seed,
            pin: None,
            trace: false,
        }
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let mut errs = Vec::new();
        if self.threads == 0 || self.threads > crate::locks::MAX_CONTENDERS {
            errs.push(format!("threads = {} must be in 1..=64", self.threads));
        }
        if !(self.load > 0.0 && self.load <= 1.0) {
            errs.push(format!("load = {} must be in (0, 1]", self.load));
        }
        if self.cs_ns == 0 {
            errs.push("cs_ns must be positive".into());
        }
        if self.budget == 0 {
            errs.push("budget must be positive".into());
        }
        if let Some(pin) = &self.pin {
            if pin.len() != self.threads {
                errs.push(format!("pin lists {} cores for {} threads", pin.len(), self.threads));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(BenchError::Config(errs))
        }
    }

    /// Arrival rate of each thread, per nanosecond.
    pub fn rates_per_ns(&self) -> Vec<f64> {
        let aggregate = self.load / self.cs_ns as f64;
        self.scheme
            .shares(self.threads)
            .into_iter()
            .map(|s| s * aggregate)
            .collect()
    }
}

/// One request of a contended run. Times are nanoseconds since the run
/// started.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSample {
    pub thread: u32,
    pub priority: u32,
    pub request_ns: u64,
    pub acquire_ns: u64,
    pub release_ns: u64,
}

#[derive(Debug, Clone)]
pub struct BenchRun {
    pub config: BenchConfig,
    /// Sorted by acquire time.
    pub samples: Vec<BenchSample>,
    pub trace: Option<Trace>,
    pub involuntary_switches: u64,
    pub warnings: Vec<String>,
    pub elapsed: Duration,
}

fn resolve_pins(requested: Option<&[usize]>, threads: usize, warnings: &mut Vec<String>) -> Option<Vec<usize>> {
    let cores = core_affinity::get_core_ids()?;
    let from_env = std::env::var(PIN_ENV).ok().and_then(|v| {
        let parsed: Result<Vec<usize>, _> = v.split(',').map(|s| s.trim().parse()).collect();
        match parsed {
            Ok(p) if p.len() >= threads => Some(p),
            _ => {
                warnings.push(format!("ignoring {PIN_ENV}={v}: need {threads} comma-separated core ids"));
                None
            }
        }
    });
    let map = requested
        .map(<[usize]>::to_vec)
        .or(from_env)
        .unwrap_or_else(|| (0..threads).map(|i| cores[i % cores.len()].id).collect());
    if threads > cores.len() {
        warnings.push(format!(
            "{threads} contenders on {} cores: waiters yield periodically and delays include scheduler effects",
            cores.len()
        ));
    }
    Some(map)
}

fn pin_current(core: usize) -> bool {
    core_affinity::set_for_current(core_affinity::CoreId { id: core })
}

/// Moves the calling thread to `SCHED_FIFO`. With more contenders than
/// cores this turns the kernel's arbitrary preemption into cooperative
/// switching at yield points, which only occur while waiting. A waiter
/// can then never be descheduled between two steps of the lock protocol,
/// as with the non-preemptible contenders the lock is designed for.
fn enter_fifo_scheduling() -> Result<(), String> {
    #[cfg(target_os = "linux")]
    unsafe {
        let param = libc::sched_param { sched_priority: 1 };
        if libc::sched_setscheduler(0, libc::SCHED_FIFO, &param) == 0 {
            return Ok(());
        }
        Err(std::io::Error::last_os_error().to_string())
    }
    #[cfg(not(target_os = "linux"))]
    Err("unsupported platform".into())
}

fn warn_fifo(failures: usize, warnings: &mut Vec<String>) {
    if failures > 0 {
        warnings.push(format!(
            "{failures} workers could not switch to SCHED_FIFO; they may be preempted mid-protocol"
        ));
    }
}

/// Involuntary context switches of the calling thread so far.
fn involuntary_switches() -> u64 {
    #[cfg(target_os = "linux")]
    unsafe {
        let mut usage: libc::rusage = std::mem::zeroed();
        if libc::getrusage(libc::RUSAGE_THREAD, &mut usage) == 0 {
            return usage.ru_nivcsw as u64;
        }
    }
    0
}

/// Records trace events for one contender.
struct Recorder<'a> {
    seq: &'a SequenceCounter,
    epoch: Instant,
    buffer: Option<TraceBuffer>,
    core: u32,
    priority: u32,
}

impl Recorder<'_> {
    #[inline]
    fn record(&mut self, kind: EventKind, order: Order) {
        if let Some(buf) = self.buffer.as_mut() {
            buf.record(TraceEvent {
                kind,
                seq: self.seq.next(),
                timestamp_ns: ns_since(self.epoch),
                core: self.core,
                priority: self.priority,
                order,
            });
        }
    }
}

/// Waits until `deadline`, staying runnable.
fn wait_until(epoch: Instant, deadline_ns: u64, yield_while_waiting: bool) {
    while ns_since(epoch) < deadline_ns {
        if yield_while_waiting {
            std::thread::yield_now();
        } else {
            std::hint::spin_loop();
        }
    }
}

/// Samples and trace of one worker.
type WorkerOutput = (Vec<BenchSample>, Option<TraceBuffer>);

/// Runs the contended workload until `budget` requests have been served.
pub fn run_contended(cfg: &BenchConfig) -> Result<BenchRun, BenchError> {
    cfg.validate()?;
    let clock = CycleClock::calibrate(10_000)?;
    let mut warnings = Vec::new();
    let pins = resolve_pins(cfg.pin.as_deref(), cfg.threads, &mut warnings);
    if pins.is_none() {
        warnings.push("core pinning unavailable on this platform".into());
    }
    let spin = SpinPolicy::for_contenders(cfg.threads);
    let oversubscribed = spin != SpinPolicy::Pause;
    let lock = AnyLock::new(cfg.discipline, cfg.threads, spin)?;
    let cs_cycles = clock.ns_to_cycles(cfg.cs_ns as f64);
    let rates = cfg.rates_per_ns();
    let claimed = AtomicUsize::new(0);
    let switches = AtomicU64::new(0);
    let fifo_failures = AtomicUsize::new(0);
    let seq = SequenceCounter::new();
    let start = Barrier::new(cfg.threads);
    let epoch = Instant::now();

    let results: Vec<Result<WorkerOutput, BenchError>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..cfg.threads)
            .map(|i| {
                let (lock, claimed, switches, seq, start, rates) = (&lock, &claimed, &switches, &seq, &start, &rates);
                let fifo_failures = &fifo_failures;
                let pin = pins.as_ref().map(|p| p[i]);
                s.spawn(move || {
                    let pinned = pin.is_none_or(pin_current);
                    if oversubscribed && enter_fifo_scheduling().is_err() {
                        fifo_failures.fetch_add(1, Ordering::Relaxed);
                    }
                    start.wait();
                    if !pinned {
                        return Err(BenchError::Pinning {
                            thread: i,
                            core: pin.unwrap_or(0),
                        });
                    }
                    let who = Contender::new(i, i as u32 + 1);
                    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                    rng.set_stream(i as u64);
                    let gap = Exp::new(rates[i]).expect("positive rate");
                    let mut rec = Recorder {
                        seq,
                        epoch,
                        buffer: cfg.trace.then(|| TraceBuffer::with_capacity(3 * cfg.budget)),
                        core: i as u32,
                        priority: who.priority,
                    };
                    let mut samples = Vec::new();
                    let switches_before = involuntary_switches();
                    let mut next_arrival = ns_since(epoch) as f64;
                    while claimed.fetch_add(1, Ordering::Relaxed) < cfg.budget {
                        next_arrival += gap.sample(&mut rng);
                        wait_until(epoch, next_arrival as u64, oversubscribed);
                        let request_ns = ns_since(epoch);
                        let ticket = lock.acquire_with(who, |o| rec.record(EventKind::Request, *o));
                        let acquire_ns = ns_since(epoch);
                        rec.record(EventKind::Acquire, ticket.order);
                        clock.spin_for(cs_cycles, oversubscribed);
                        rec.record(EventKind::Release, ticket.order);
                        let release_ns = ns_since(epoch);
                        lock.release(ticket);
                        samples.push(BenchSample {
                            thread: i as u32,
                            priority: who.priority,
                            request_ns,
                            acquire_ns,
                            release_ns,
                        });
                        // a thread that fell behind its arrival schedule
                        // issues its next request right away
                        next_arrival = next_arrival.max(release_ns as f64);
                    }
                    switches.fetch_add(involuntary_switches() - switches_before, Ordering::Relaxed);
                    Ok((samples, rec.buffer))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let elapsed = epoch.elapsed();

    let mut samples = Vec::with_capacity(cfg.budget);
    let mut buffers = Vec::new();
    for r in results {
        let (s, b) = r?;
        samples.extend(s);
        buffers.extend(b);
    }
    samples.sort_by_key(|s| s.acquire_ns);
    let trace = if cfg.trace { Some(Trace::merge(buffers)?) } else { None };
    warn_fifo(fifo_failures.into_inner(), &mut warnings);
    let involuntary = switches.into_inner();
    // under SCHED_FIFO every yield counts as involuntary
    if involuntary > 0 && !oversubscribed {
        warnings.push(format!("{involuntary} involuntary context switches during the run"));
    }
    Ok(BenchRun {
        config: cfg.clone(),
        samples,
        trace,
        involuntary_switches: involuntary,
        warnings,
        elapsed,
    })
}

/// Delay and inversion metrics of a contended run, in microseconds.
pub fn bench_row(run: &BenchRun) -> Result<MetricsRow, MetricsError> {
    let cfg = &run.config;
    let us = |ns: u64| ns as f64 / 1000.0;
    let grants: Vec<Grant> = run
        .samples
        .iter()
        .map(|s| Grant {
            source: s.thread,
            priority: s.priority,
            t_request: us(s.request_ns),
            t_start: us(s.acquire_ns),
            t_complete: us(s.release_ns),
        })
        .collect();
    let inv = count_inversions(&grants, cfg.threads, InversionOptions::default())?;
    let delays = DelayTable::from_waits(cfg.threads, grants.iter().map(|g| (g.source, g.t_start - g.t_request)))?;
    Ok(MetricsRow {
        m: cfg.threads,
        mbs: 0,
        lambda_ratio: cfg.load,
        policy: cfg.discipline.to_string(),
        seed: cfg.seed,
        inversion_pct: inv.affected_pct(),
        inversion_instances: inv.instances,
        d_w: delays.weighted_mean_delay()?,
        d_w_normalized: None,
        d_highest_priority: delays.highest_priority_delay()?,
        d_max: delays.max_delay(),
        workload: format!("bench-{}", cfg.scheme.as_str()),
    })
}

/// Outcome of checking one trace against a discipline's guarantees.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verdict {
    pub discipline: Discipline,
    pub contenders: usize,
    pub acquisitions: usize,
    pub mutual_exclusion: Result<(), Violation>,
    /// BPL: worst bypass seen, or the first request over `m - 1`.
    pub bypass: Option<Result<usize, Violation>>,
    /// BPL: largest batch seen, or the first batch over `m - 1`.
    pub batch_cardinality: Option<Result<u64, Violation>>,
    /// FL: grants in ticket order.
    pub ticket_order: Option<Result<(), Violation>>,
    /// Requests granted after some request that registered later.
    pub overtaken: usize,
}

impl Verdict {
    pub fn passed(&self) -> bool {
        self.mutual_exclusion.is_ok()
            && !matches!(self.bypass, Some(Err(_)))
            && !matches!(self.batch_cardinality, Some(Err(_)))
            && !matches!(self.ticket_order, Some(Err(_)))
    }

    pub fn violations(&self) -> Vec<&Violation> {
        let mut v = Vec::new();
        if let Err(e) = &self.mutual_exclusion {
            v.push(e);
        }
        if let Some(Err(e)) = &self.bypass {
            v.push(e);
        }
        if let Some(Err(e)) = &self.batch_cardinality {
            v.push(e);
        }
        if let Some(Err(e)) = &self.ticket_order {
            v.push(e);
        }
        v
    }
}

/// Checks a merged trace: mutual exclusion always, plus bounded bypass
/// and batch cardinality for BPL and ticket order for FL.
pub fn verify_trace(discipline: Discipline, contenders: usize, trace: &Trace) -> Result<Verdict, TraceError> {
    let acqs = trace.acquisitions()?;
    let bound = contenders.saturating_sub(1);
    let bpl = discipline == Discipline::Bpl;
    Ok(Verdict {
        discipline,
        contenders,
        acquisitions: acqs.len(),
        mutual_exclusion: check_mutual_exclusion(&acqs),
        bypass: bpl.then(|| check_bounded_bypass(&acqs, bound)),
        batch_cardinality: bpl.then(|| check_batch_cardinality(&acqs, bound as u64)),
        ticket_order: (discipline == Discipline::Fl).then(|| check_ticket_order(&acqs)),
        overtaken: overtaken(&acqs),
    })
}

/// Result of a stress run.
#[derive(Debug, Clone)]
pub struct StressReport {
    pub verdict: Verdict,
    /// Final value of a counter incremented non-atomically inside every
    /// critical section. Equals the acquisition count iff no update was lost.
    pub counter: u64,
    pub elapsed: Duration,
    pub warnings: Vec<String>,
}

struct Unsynchronized(UnsafeCell<u64>);

// Only touched inside critical sections of the lock under test.
unsafe impl Sync for Unsynchronized {}

/// `threads` contenders each acquire `per_thread` times back to back with
/// tracing on, then the trace is verified.
pub fn stress(discipline: Discipline, threads: usize, per_thread: usize) -> Result<StressReport, BenchError> {
    let spin = SpinPolicy::for_contenders(threads);
    let oversubscribed = spin != SpinPolicy::Pause;
    let lock = AnyLock::new(discipline, threads, spin)?;
    let fifo_failures = AtomicUsize::new(0);
    let counter = Unsynchronized(UnsafeCell::new(0));
    let seq = SequenceCounter::new();
    let start = Barrier::new(threads);
    let epoch = Instant::now();
    let buffers: Vec<TraceBuffer> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|i| {
                let (lock, counter, seq, start, fifo_failures) = (&lock, &counter, &seq, &start, &fifo_failures);
                s.spawn(move || {
                    if oversubscribed && enter_fifo_scheduling().is_err() {
                        fifo_failures.fetch_add(1, Ordering::Relaxed);
                    }
                    let who = Contender::new(i, i as u32 + 1);
                    let mut rec = Recorder {
                        seq,
                        epoch,
                        buffer: Some(TraceBuffer::with_capacity(3 * per_thread)),
                        core: i as u32,
                        priority: who.priority,
                    };
                    start.wait();
                    for _ in 0..per_thread {
                        let ticket = lock.acquire_with(who, |o| rec.record(EventKind::Request, *o));
                        rec.record(EventKind::Acquire, ticket.order);
                        // SAFETY: only written while holding the lock; a
                        // broken lock shows up as lost increments
                        unsafe {
                            let p = counter.0.get();
                            let v = p.read_volatile();
                            if oversubscribed {
                                // let the others queue up behind us
                                std::thread::yield_now();
                            }
                            p.write_volatile(v + 1);
                        }
                        rec.record(EventKind::Release, ticket.order);
                        lock.release(ticket);
                    }
                    rec.buffer.take().expect("buffer present")
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let elapsed = epoch.elapsed();
    let trace = Trace::merge(buffers)?;
    let mut warnings = Vec::new();
    warn_fifo(fifo_failures.into_inner(), &mut warnings);
    Ok(StressReport {
        verdict: verify_trace(discipline, threads, &trace)?,
        counter: counter.0.into_inner(),
        elapsed,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn skewed_shares_sum_to_one() {
        let s = ArrivalScheme::Skewed.shares(8);
        assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((s[0] - 1.0 / 36.0).abs() < 1e-12);
        assert!((s[7] - 8.0 / 36.0).abs() < 1e-12);
        let cfg = BenchConfig::new(8, Discipline::Fl, ArrivalScheme::Equal, 1.0, 0);
        let rates = cfg.rates_per_ns();
        assert!(rates.iter().all(|&r| (r - 1.0 / 70_000.0 / 8.0).abs() < 1e-18));
    }

    #[test]
    fn percentiles() {
        let v: Vec<u64> = (1..=1000).collect();
        assert_eq!(percentile(&v, 0.5), 500);
        assert_eq!(percentile(&v, 0.999), 999);
        assert_eq!(percentile(&[7], 0.999), 7);
    }

    #[test]
    fn uncontested_report_is_ordered() {
        let clock = CycleClock::calibrate(1000).unwrap();
        for d in Discipline::ALL {
            let r = measure_uncontested(d, 8, 2000, &clock).unwrap();
            assert!(r.min <= r.median && r.median <= r.p999 && r.p999 <= r.max, "{r:?}");
            assert!(r.cold <= r.max);
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = BenchConfig::new(0, Discipline::Bpl, ArrivalScheme::Skewed, 1.5, 0);
        cfg.pin = Some(vec![0]);
        match cfg.validate() {
            Err(BenchError::Config(errs)) => assert_eq!(errs.len(), 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn short_contended_run() {
        let cfg = BenchConfig {
            cs_ns: 2_000,
            budget: 400,
            trace: true,
            ..BenchConfig::new(3, Discipline::Bpl, ArrivalScheme::Skewed, 0.8, 5)
        };
        let run = run_contended(&cfg).unwrap();
        assert_eq!(run.samples.len(), 400);
        for s in &run.samples {
            assert!(s.request_ns <= s.acquire_ns && s.acquire_ns <= s.release_ns);
        }
        let verdict = verify_trace(Discipline::Bpl, 3, run.trace.as_ref().unwrap()).unwrap();
        assert_eq!(verdict.acquisitions, 400);
        assert!(verdict.mutual_exclusion.is_ok());
        let row = bench_row(&run).unwrap();
        assert_eq!(row.workload, "bench-skewed");
    }

    #[test]
    fn small_stress_runs_clean() {
        for d in Discipline::ALL {
            let r = stress(d, 3, 2000).unwrap();
            assert_eq!(r.counter, 6000);
            assert!(r.verdict.mutual_exclusion.is_ok(), "{:?}", r.verdict);
            assert_eq!(r.verdict.acquisitions, 6000);
        }
    }
}
