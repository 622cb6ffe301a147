//! Experiment definitions.
//!
//! A config file is TOML with one table per mode. Every grid axis is an
//! explicit list; a run covers the cross product of all lists and the
//! seed list. Omitted keys take the defaults below.
//!
//! ```toml
//! seeds = [1, 2, 3]
//!
//! [sim]
//! sources = [64]
//! mean_burst_sizes = [8, 32]
//! burst_ratios = [0.01, 0.1, 1.0]
//! policies = ["FL", "PL", "BPL"]
//!
//! [bench]
//! threads = [8]
//! disciplines = ["SL", "FL", "BPL"]
//! schemes = ["skewed"]
//! loads = [1.0]
//!
//! [verify]
//! threads = [4]
//! acquisitions = 1000000
//! ```

use std::collections::HashSet;
use std::path::Path;

use batchlock::harness::ArrivalScheme;
use batchlock::locks::{Discipline, MAX_CONTENDERS};
use batchlock::sim::{Policy, DEFAULT_REQUESTS_PER_SOURCE, DEFAULT_SERVICE_RATE};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSpec {
    pub sources: Vec<usize>,
    pub mean_burst_sizes: Vec<usize>,
    /// Burst arrival rate over service rate.
    pub burst_ratios: Vec<f64>,
    pub policies: Vec<Policy>,
    pub service_rate: f64,
    pub requests_per_source: usize,
    /// Count the request in service at arrival as an inversion too.
    pub include_blocker: bool,
    /// Also write every served request of every run.
    pub traces: bool,
}

impl Default for SimSpec {
    fn default() -> Self {
        Self {
            sources: vec![64],
            mean_burst_sizes: vec![8, 32],
            burst_ratios: vec![0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0],
            policies: Policy::ALL.to_vec(),
            service_rate: DEFAULT_SERVICE_RATE,
            requests_per_source: DEFAULT_REQUESTS_PER_SOURCE,
            include_blocker: false,
            traces: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSpec {
    pub threads: Vec<usize>,
    pub disciplines: Vec<Discipline>,
    pub schemes: Vec<ArrivalScheme>,
    /// Aggregate arrival rate over critical-section service rate.
    pub loads: Vec<f64>,
    pub cs_ns: u64,
    pub requests: usize,
    /// Uncontended acquire/release pairs timed per discipline; 0 skips.
    pub overhead_samples: usize,
    /// Core per thread; overrides `BPL_PIN_CORES`.
    pub pin: Option<Vec<usize>>,
    /// Trace contended runs and check them.
    pub verify: bool,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self {
            threads: vec![8],
            disciplines: Discipline::ALL.to_vec(),
            schemes: vec![ArrivalScheme::Skewed],
            loads: vec![1.0],
            cs_ns: 70_000,
            requests: 80_000,
            overhead_samples: 100_000,
            pin: None,
            verify: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySpec {
    pub disciplines: Vec<Discipline>,
    /// Stress-test thread counts.
    pub threads: Vec<usize>,
    /// Acquisitions per stress run, over all threads.
    pub acquisitions: usize,
    /// Exhaustive interleaving runs as `[threads, cycles]`.
    pub explore: Vec<(usize, u8)>,
}

impl Default for VerifySpec {
    fn default() -> Self {
        Self {
            disciplines: Discipline::ALL.to_vec(),
            threads: vec![4],
            acquisitions: 1_000_000,
            explore: vec![(2, 3), (3, 2), (4, 1)],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSpec {
    pub seeds: Vec<u64>,
    pub sim: SimSpec,
    pub bench: BenchSpec,
    pub verify: VerifySpec,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            seeds: vec![1],
            sim: SimSpec::default(),
            bench: BenchSpec::default(),
            verify: VerifySpec::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Sim,
    Bench,
    Verify,
}

fn nonempty<T>(errs: &mut Vec<String>, name: &str, v: &[T]) {
    if v.is_empty() {
        errs.push(format!("{name} must not be empty"));
    }
}

impl ExperimentSpec {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(vec![format!("{}: {e}", path.display())]))?;
        toml::from_str(&text).map_err(|e| CliError::Config(vec![format!("{}: {e}", path.display())]))
    }

    /// Checks the parts of the spec `mode` uses and lists every problem.
    pub fn validate(&self, mode: Mode) -> Result<(), CliError> {
        let mut errs = Vec::new();
        nonempty(&mut errs, "seeds", &self.seeds);
        if self.seeds.iter().collect::<HashSet<_>>().len() != self.seeds.len() {
            errs.push("seeds must be distinct".into());
        }
        match mode {
            Mode::Sim => {
                let s = &self.sim;
                nonempty(&mut errs, "sim.sources", &s.sources);
                nonempty(&mut errs, "sim.mean_burst_sizes", &s.mean_burst_sizes);
                nonempty(&mut errs, "sim.burst_ratios", &s.burst_ratios);
                nonempty(&mut errs, "sim.policies", &s.policies);
                for &m in &s.sources {
                    for &mbs in &s.mean_burst_sizes {
                        if m == 0 || mbs == 0 || 2 * mbs > m {
                            errs.push(format!("sim: mean_burst_size {mbs} must be in 1..={} for {m} sources", m / 2));
                        }
                    }
                }
                for &r in &s.burst_ratios {
                    if !(r > 0.0 && r <= 1.0) {
                        errs.push(format!("sim.burst_ratios: {r} must be in (0, 1]"));
                    }
                }
                if !(s.service_rate.is_finite() && s.service_rate > 0.0) {
                    errs.push(format!("sim.service_rate: {} must be positive", s.service_rate));
                }
                if s.requests_per_source == 0 {
                    errs.push("sim.requests_per_source must be positive".into());
                }
            }
            Mode::Bench => {
                let b = &self.bench;
                nonempty(&mut errs, "bench.threads", &b.threads);
                nonempty(&mut errs, "bench.disciplines", &b.disciplines);
                nonempty(&mut errs, "bench.schemes", &b.schemes);
                nonempty(&mut errs, "bench.loads", &b.loads);
                for &t in &b.threads {
                    if t == 0 || t > MAX_CONTENDERS {
                        errs.push(format!("bench.threads: {t} must be in 1..={MAX_CONTENDERS}"));
                    }
                    if let Some(pin) = &b.pin {
                        if pin.len() != t {
                            errs.push(format!("bench.pin lists {} cores for {t} threads", pin.len()));
                        }
                    }
                }
                for &l in &b.loads {
                    if !(l > 0.0 && l <= 1.0) {
                        errs.push(format!("bench.loads: {l} must be in (0, 1]"));
                    }
                }
                if b.cs_ns == 0 {
                    errs.push("bench.cs_ns must be positive".into());
                }
                if b.requests == 0 {
                    errs.push("bench.requests must be positive".into());
                }
            }
            Mode::Verify => {
                let v = &self.verify;
                nonempty(&mut errs, "verify.disciplines", &v.disciplines);
                for &t in &v.threads {
                    if !(2..=MAX_CONTENDERS).contains(&t) {
                        errs.push(format!("verify.threads: {t} must be in 2..={MAX_CONTENDERS}"));
                    }
                }
                if !v.threads.is_empty() && v.acquisitions == 0 {
                    errs.push("verify.acquisitions must be positive".into());
                }
                for &(t, c) in &v.explore {
                    if t == 0 || t > 6 || c == 0 {
                        errs.push(format!("verify.explore: [{t}, {c}] needs 1..=6 threads and at least one cycle"));
                    }
                }
                if v.threads.is_empty() && v.explore.is_empty() {
                    errs.push("verify: nothing to run".into());
                }
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(errs))
        }
    }
}

/// Parses `1,2,3`.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>, String> {
    s.split(',')
        .map(|p| p.trim().parse::<u64>().map_err(|e| format!("seed `{}`: {e}", p.trim())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let spec = ExperimentSpec::default();
        for mode in [Mode::Sim, Mode::Bench, Mode::Verify] {
            spec.validate(mode).unwrap();
        }
    }

    #[test]
    fn errors_name_every_field() {
        let spec: ExperimentSpec = toml::from_str(
            "seeds = [1, 1]\n[sim]\nsources = [8]\nmean_burst_sizes = [5]\nburst_ratios = [0.0]\n",
        )
        .unwrap();
        let Err(CliError::Config(errs)) = spec.validate(Mode::Sim) else {
            panic!("expected config error")
        };
        assert_eq!(errs.len(), 3, "{errs:?}");
        assert!(errs.iter().any(|e| e.contains("distinct")));
        assert!(errs.iter().any(|e| e.contains("mean_burst_size 5")));
        assert!(errs.iter().any(|e| e.contains("burst_ratios")));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<ExperimentSpec>("[sim]\nsorces = [8]\n").is_err());
    }

    #[test]
    fn seed_list() {
        assert_eq!(parse_seeds("3, 1,2").unwrap(), [3, 1, 2]);
        assert!(parse_seeds("1,x").is_err());
    }
}
