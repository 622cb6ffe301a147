//! Discrete-event simulation of the machine-repairman model.
//!
//! `m` sources share one server (the lock). A burst generator fires at
//! exponentially distributed intervals and makes a random subset of the
//! idle sources request service at that instant. A source has at most one
//! outstanding request. The server picks the next request according to
//! the [`Policy`]; service times are exponential.
//!
//! Source `i` has priority `i + 1`, so source 0 is the most urgent.

mod policy;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

pub use policy::{PendingSet, Waiting};

/// Request ordering used by the simulated server.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Policy {
    /// FIFO.
    #[serde(rename = "FL")]
    Fl,
    /// Strict priority.
    #[serde(rename = "PL")]
    Pl,
    /// Batched priority, without the fast path.
    #[serde(rename = "BPL")]
    Bpl,
}

impl Policy {
    pub const ALL: [Policy; 3] = [Policy::Fl, Policy::Pl, Policy::Bpl];

    pub fn as_str(self) -> &'static str {
        match self {
            Policy::Fl => "FL",
            Policy::Pl => "PL",
            Policy::Bpl => "BPL",
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Policy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "FL" => Ok(Policy::Fl),
            "PL" => Ok(Policy::Pl),
            "BPL" => Ok(Policy::Bpl),
            other => Err(format!("unknown policy `{other}` (expected FL, PL or BPL)")),
        }
    }
}

pub const DEFAULT_SERVICE_RATE: f64 = 0.01;
pub const DEFAULT_REQUESTS_PER_SOURCE: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Number of sources `m`.
    pub sources: usize,
    pub mean_burst_size: usize,
    /// Service rate `mu`.
    pub service_rate: f64,
    /// Burst rate as a fraction of the service rate.
    pub burst_ratio: f64,
    pub policy: Policy,
    pub seed: u64,
    /// Completed requests after which the run stops.
    pub request_budget: usize,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("invalid simulation config: {}", .0.join("; "))]
pub struct SimConfigError(pub Vec<String>);

impl SimConfig {
    /// Defaults: `mu = 0.01`, `m * 10000` requests.
    pub fn new(sources: usize, mean_burst_size: usize, burst_ratio: f64, policy: Policy, seed: u64) -> Self {
        Self {
            sources,
            mean_burst_size,
            service_rate: DEFAULT_SERVICE_RATE,
            burst_ratio,
            policy,
            seed,
            request_budget: sources * DEFAULT_REQUESTS_PER_SOURCE,
        }
    }

    pub fn burst_rate(&self) -> f64 {
        self.burst_ratio * self.service_rate
    }

    /// Checks every field and reports all offenders at once.
    pub fn validate(&self) -> Result<(), SimConfigError> {
        let mut errs = Vec::new();
        if self.sources == 0 || self.sources > u32::MAX as usize {
            errs.push(format!("sources = {} must be positive", self.sources));
        }
        if self.mean_burst_size == 0 || self.mean_burst_size * 2 > self.sources {
            errs.push(format!(
                "mean_burst_size = {} must be in 1..={}",
                self.mean_burst_size,
                self.sources / 2
            ));
        }
        if !(self.service_rate.is_finite() && self.service_rate > 0.0) {
            errs.push(format!("service_rate = {} must be positive", self.service_rate));
        }
        if !(self.burst_ratio > 0.0 && self.burst_ratio <= 1.0) {
            errs.push(format!("burst_ratio = {} must be in (0, 1]", self.burst_ratio));
        }
        if self.request_budget == 0 {
            errs.push("request_budget must be positive".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(SimConfigError(errs))
        }
    }
}

/// One served request.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimRequest {
    pub source: u32,
    pub priority: u32,
    pub t_request: f64,
    pub t_start: f64,
    pub t_complete: f64,
    /// BPL only: batch open when the request arrived.
    pub batch: Option<u64>,
}

impl SimRequest {
    pub fn wait(&self) -> f64 {
        self.t_start - self.t_request
    }
}

/// A request still outstanding when the run stopped.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Unserved {
    pub source: u32,
    pub priority: u32,
    pub t_request: f64,
    /// Set if the request was in service at the end.
    pub t_start: Option<f64>,
    pub batch: Option<u64>,
}

impl Unserved {
    /// Waiting time so far: exact if service began, otherwise a lower
    /// bound measured to the end of the run.
    pub fn wait(&self, end_time: f64) -> f64 {
        self.t_start.unwrap_or(end_time) - self.t_request
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimOutput {
    pub config: SimConfig,
    /// Completed requests in service order.
    pub completed: Vec<SimRequest>,
    pub unserved: Vec<Unserved>,
    pub end_time: f64,
}

impl SimOutput {
    /// Waiting time of every request issued during the run, served or
    /// not, as `(source, wait)`.
    pub fn waits(&self) -> impl Iterator<Item = (u32, f64)> + '_ {
        self.completed
            .iter()
            .map(|r| (r.source, r.wait()))
            .chain(self.unserved.iter().map(|u| (u.source, u.wait(self.end_time))))
    }
}

/// Independent random streams, one per purpose, so that changing how one
/// is consumed never perturbs the others.
#[derive(Debug, Clone, Copy)]
#[repr(u64)]
enum Stream {
    Interarrival = 0,
    BurstSize = 1,
    SourceChoice = 2,
    Service = 3,
}

fn stream(seed: u64, s: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(s as u64);
    rng
}

/// Burst generator state.
#[derive(Debug, Clone)]
pub struct BurstGenerator {
    max_size: usize,
    size_rng: ChaCha8Rng,
    choice_rng: ChaCha8Rng,
}

impl BurstGenerator {
    pub fn new(mean_burst_size: usize, seed: u64) -> Self {
        Self {
            max_size: 2 * mean_burst_size,
            size_rng: stream(seed, Stream::BurstSize),
            choice_rng: stream(seed, Stream::SourceChoice),
        }
    }

    /// Draws a burst size uniformly from `0..=2 * mean_burst_size` and
    /// picks that many idle sources at random, or all of them if there
    /// are fewer. Picked sources are removed from `idle` and returned in
    /// draw order.
    pub fn draw_burst(&mut self, idle: &mut Vec<u32>) -> Vec<u32> {
        let size = self.size_rng.random_range(0..=self.max_size);
        self.pick(size, idle)
    }

    fn pick(&mut self, size: usize, idle: &mut Vec<u32>) -> Vec<u32> {
        let n = size.min(idle.len());
        let (picked, _) = idle.partial_shuffle(&mut self.choice_rng, n);
        let picked = picked.to_vec();
        idle.retain(|s| !picked.contains(s));
        picked
    }
}

/// Runs one simulation to `request_budget` completions.
pub fn run_sim(config: &SimConfig) -> Result<SimOutput, SimConfigError> {
    config.validate()?;
    let m = config.sources;
    let interarrival = Exp::new(config.burst_rate()).expect("validated rate");
    let service = Exp::new(config.service_rate).expect("validated rate");
    let mut arrival_rng = stream(config.seed, Stream::Interarrival);
    let mut service_rng = stream(config.seed, Stream::Service);
    let mut bursts = BurstGenerator::new(config.mean_burst_size, config.seed);

    let mut idle: Vec<u32> = (0..m as u32).collect();
    let mut pending = PendingSet::new(config.policy);
    let mut in_service: Option<SimRequest> = None;
    let mut completed = Vec::with_capacity(config.request_budget);
    let mut next_burst = interarrival.sample(&mut arrival_rng);
    let mut now = 0.0;

    while completed.len() < config.request_budget {
        let completion = in_service.map(|r| r.t_complete);
        // completion wins ties with the burst generator
        if let Some(t) = completion.filter(|&t| t <= next_burst) {
            now = t;
            let done = in_service.take().expect("completion without service");
            completed.push(done);
            idle.push(done.source);
            if !pending.is_empty() {
                pending.close_batch();
            }
        } else {
            now = next_burst;
            for source in bursts.draw_burst(&mut idle) {
                pending.arrive(source, source + 1, now);
            }
            next_burst = now + interarrival.sample(&mut arrival_rng);
        }
        if in_service.is_none() {
            if let Some(w) = pending.next_grant() {
                in_service = Some(SimRequest {
                    source: w.source,
                    priority: w.priority,
                    t_request: w.t_request,
                    t_start: now,
                    t_complete: now + service.sample(&mut service_rng),
                    batch: w.batch,
                });
            }
        }
    }

    let mut unserved: Vec<Unserved> = pending
        .drain()
        .map(|w| Unserved {
            source: w.source,
            priority: w.priority,
            t_request: w.t_request,
            t_start: None,
            batch: w.batch,
        })
        .collect();
    if let Some(r) = in_service {
        unserved.push(Unserved {
            source: r.source,
            priority: r.priority,
            t_request: r.t_request,
            t_start: Some(r.t_start),
            batch: r.batch,
        });
    }
    unserved.sort_by_key(|u| u.source);
    Ok(SimOutput {
        config: config.clone(),
        completed,
        unserved,
        end_time: now,
    })
}

/// For every completed request, how many other requests were granted
/// between its arrival and its own grant. `completed` must be in service
/// order.
pub fn grants_during_wait(completed: &[SimRequest]) -> Vec<usize> {
    completed
        .iter()
        .enumerate()
        .map(|(i, r)| i - completed[..i].partition_point(|g| g.t_start < r.t_request))
        .collect()
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimViolation {
    #[error("request {index} has inconsistent times {t_request} / {t_start} / {t_complete}")]
    Times { index: usize, t_request: f64, t_start: f64, t_complete: f64 },
    #[error("service {index} starts at {start} before the previous one ends at {prev_end}")]
    Overlap { index: usize, start: f64, prev_end: f64 },
    #[error("source {source_id} had two requests outstanding at time {at}")]
    TwoOutstanding { source_id: u32, at: f64 },
    #[error("request {index} saw {grants} grants while waiting (bound {bound})")]
    Bypass { index: usize, grants: usize, bound: usize },
}

/// Checks the model's invariants on a finished run: consistent times,
/// one request in service at a time, at most one outstanding request
/// per source, and for FL and BPL at most `m - 1` grants during any wait.
pub fn check_trace(out: &SimOutput) -> Result<(), SimViolation> {
    let done = &out.completed;
    for (i, r) in done.iter().enumerate() {
        if !(r.t_request <= r.t_start && r.t_start <= r.t_complete) {
            return Err(SimViolation::Times {
                index: i,
                t_request: r.t_request,
                t_start: r.t_start,
                t_complete: r.t_complete,
            });
        }
        if i > 0 && r.t_start < done[i - 1].t_complete {
            return Err(SimViolation::Overlap {
                index: i,
                start: r.t_start,
                prev_end: done[i - 1].t_complete,
            });
        }
    }
    let mut last_complete = vec![f64::NEG_INFINITY; out.config.sources];
    for r in done {
        let prev = &mut last_complete[r.source as usize];
        // a source may re-request at the very instant it completes
        if r.t_request < *prev {
            return Err(SimViolation::TwoOutstanding {
                source_id: r.source,
                at: r.t_request,
            });
        }
        *prev = r.t_complete;
    }
    let mut seen = vec![false; out.config.sources];
    for u in &out.unserved {
        let s = u.source as usize;
        if seen[s] || u.t_request < last_complete[s] {
            return Err(SimViolation::TwoOutstanding {
                source_id: u.source,
                at: u.t_request,
            });
        }
        seen[s] = true;
    }
    if out.config.policy != Policy::Pl {
        let bound = out.config.sources - 1;
        if let Some((i, &g)) = grants_during_wait(done).iter().enumerate().find(|(_, &g)| g > bound) {
            return Err(SimViolation::Bypass {
                index: i,
                grants: g,
                bound,
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(policy: Policy) -> SimConfig {
        SimConfig {
            request_budget: 2000,
            ..SimConfig::new(8, 4, 0.5, policy, 7)
        }
    }

    #[test]
    fn budget_is_met_exactly() {
        let out = run_sim(&cfg(Policy::Bpl)).unwrap();
        assert_eq!(out.completed.len(), 2000);
        let mut per_source = [0usize; 8];
        out.completed.iter().for_each(|r| per_source[r.source as usize] += 1);
        assert_eq!(per_source.iter().sum::<usize>(), 2000);
    }

    #[test]
    fn deterministic_per_seed() {
        let a = run_sim(&cfg(Policy::Fl)).unwrap();
        let b = run_sim(&cfg(Policy::Fl)).unwrap();
        assert_eq!(a, b);
        let c = run_sim(&SimConfig { seed: 8, ..cfg(Policy::Fl) }).unwrap();
        assert_ne!(a.completed, c.completed);
    }

    #[test]
    fn policies_see_the_same_first_burst() {
        // streams are per purpose, so arrivals do not depend on the policy
        let t0: Vec<f64> = Policy::ALL
            .iter()
            .map(|&p| run_sim(&cfg(p)).unwrap().completed[0].t_request)
            .collect();
        assert!(t0.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn validation_lists_every_bad_field() {
        let bad = SimConfig {
            mean_burst_size: 16,
            burst_ratio: 1.5,
            request_budget: 0,
            ..SimConfig::new(8, 4, 0.5, Policy::Pl, 1)
        };
        let err = bad.validate().unwrap_err();
        assert_eq!(err.0.len(), 3, "{err}");
        assert!(run_sim(&bad).is_err());
    }

    #[test]
    fn burst_takes_all_idle_when_short() {
        let mut g = BurstGenerator::new(8, 3);
        let mut idle = vec![2, 5, 7];
        let mut taken = g.pick(10, &mut idle);
        taken.sort();
        assert_eq!(taken, [2, 5, 7]);
        assert!(idle.is_empty());
        assert!(g.draw_burst(&mut idle).is_empty());

        let mut idle: Vec<u32> = (0..10).collect();
        let taken = g.pick(4, &mut idle);
        assert_eq!(taken.len(), 4);
        assert_eq!(idle.len(), 6);
        assert!(taken.iter().all(|s| !idle.contains(s)));
    }

    #[test]
    fn burst_size_mean() {
        let mut g = BurstGenerator::new(8, 11);
        let n = 20_000;
        let total: usize = (0..n)
            .map(|_| {
                let mut idle: Vec<u32> = (0..64).collect();
                g.draw_burst(&mut idle).len()
            })
            .sum();
        let mean = total as f64 / n as f64;
        assert!((mean - 8.0).abs() < 0.15, "mean burst {mean}");
    }

    #[test]
    fn invariants_hold_and_are_checked() {
        for p in Policy::ALL {
            let out = run_sim(&cfg(p)).unwrap();
            check_trace(&out).unwrap();
        }
        let mut out = run_sim(&cfg(Policy::Fl)).unwrap();
        out.completed[5].t_start = out.completed[4].t_start;
        assert!(check_trace(&out).is_err());
    }

    #[test]
    fn service_intervals_never_overlap() {
        for p in Policy::ALL {
            let out = run_sim(&cfg(p)).unwrap();
            for w in out.completed.windows(2) {
                assert!(w[0].t_complete <= w[1].t_start);
            }
            for r in &out.completed {
                assert!(r.t_request <= r.t_start && r.t_start <= r.t_complete);
            }
        }
    }
}
