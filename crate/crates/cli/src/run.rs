use std::fs;
use std::path::Path;

use batchlock::explore::{explore, ExploreConfig};
use batchlock::harness::timer::CycleClock;
use batchlock::harness::{bench_row, measure_uncontested, run_contended, stress, verify_trace, BenchConfig, OverheadReport};
use batchlock::locks::{Bpl, Discipline, Protocol, Tas, TicketProtocol};
use batchlock::metrics::{normalize, sim_row, InversionOptions, MetricsRow};
use batchlock::sim::{check_trace, run_sim, SimConfig, SimOutput};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::output::{
    write_table, Format, Machine, Manifest, METRICS_SCHEMA, OVERHEAD_SCHEMA, TRACE_SCHEMA, VERIFY_SCHEMA,
};
use crate::spec::ExperimentSpec;
use crate::CliError;

/// Ends a run: writes the manifest and, if anything failed, the marker.
fn finish(
    spec: &ExperimentSpec,
    mode: &'static str,
    out: &Path,
    outputs: Vec<String>,
    failures: &[String],
    warnings: &[String],
    machine: Option<&Machine>,
) -> Result<(), CliError> {
    Manifest {
        tool: "batchlock",
        version: env!("CARGO_PKG_VERSION"),
        mode,
        status: if failures.is_empty() { "ok" } else { "failed" },
        failures,
        warnings,
        outputs,
        machine,
        config: spec,
    }
    .write(out)?;
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Violation(failures.to_vec()))
    }
}

#[derive(Serialize)]
struct TraceRow {
    source: u32,
    priority: u32,
    t_request: f64,
    t_start: f64,
    t_complete: f64,
    batch_tag: Option<u64>,
    policy: String,
    seed: u64,
}

fn trace_rows(out: &SimOutput) -> Vec<TraceRow> {
    out.completed
        .iter()
        .map(|r| TraceRow {
            source: r.source,
            priority: r.priority,
            t_request: r.t_request,
            t_start: r.t_start,
            t_complete: r.t_complete,
            batch_tag: r.batch,
            policy: out.config.policy.to_string(),
            seed: out.config.seed,
        })
        .collect()
}

pub fn sim(spec: &ExperimentSpec, out: &Path, format: Format, threads: Option<usize>) -> Result<(), CliError> {
    let s = &spec.sim;
    let mut cells = Vec::new();
    for &m in &s.sources {
        for &mbs in &s.mean_burst_sizes {
            for &ratio in &s.burst_ratios {
                for &seed in &spec.seeds {
                    for &policy in &s.policies {
                        let mut cfg = SimConfig::new(m, mbs, ratio, policy, seed);
                        cfg.service_rate = s.service_rate;
                        cfg.request_budget = m * s.requests_per_source;
                        cells.push(cfg);
                    }
                }
            }
        }
    }
    let opts = InversionOptions {
        include_blocker: s.include_blocker,
    };
    let trace_dir = out.join("traces");
    if s.traces {
        fs::create_dir_all(&trace_dir).map_err(|e| CliError::Io(format!("{}: {e}", trace_dir.display())))?;
    }
    let run_cell = |cfg: &SimConfig| -> Result<(MetricsRow, Option<String>), String> {
        let tag = format!(
            "m={} mbs={} lambda_ratio={} {} seed={}",
            cfg.sources, cfg.mean_burst_size, cfg.burst_ratio, cfg.policy, cfg.seed
        );
        let sim = run_sim(cfg).map_err(|e| format!("{tag}: {e}"))?;
        let violation = check_trace(&sim).err().map(|v| format!("{tag}: {v}"));
        if s.traces {
            let stem = format!(
                "sim-m{}-mbs{}-l{}-{}-s{}",
                cfg.sources, cfg.mean_burst_size, cfg.burst_ratio, cfg.policy, cfg.seed
            );
            write_table(&trace_dir, &stem, format, TRACE_SCHEMA, &[], &trace_rows(&sim)).map_err(|e| e.to_string())?;
        }
        let row = sim_row(&sim, opts).map_err(|e| format!("{tag}: {e}"))?;
        Ok((row, violation))
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Config(vec![format!("--threads: {e}")]))?;
    let results: Vec<_> = pool.install(|| cells.par_iter().map(run_cell).collect());

    let mut rows = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok((row, violation)) => {
                rows.push(row);
                failures.extend(violation);
            }
            Err(e) => failures.push(e),
        }
    }
    let mut warnings = Vec::new();
    if s.policies.contains(&batchlock::sim::Policy::Fl) {
        if let Err(e) = normalize(&mut rows) {
            warnings.push(e.to_string());
        }
    } else {
        warnings.push("no FL policy in the grid; d_w_normalized left empty".into());
    }
    let path = write_table(out, "sim", format, METRICS_SCHEMA, &[], &rows)?;
    let mut outputs = vec![path.display().to_string()];
    if s.traces {
        outputs.push(trace_dir.display().to_string());
    }
    finish(spec, "sim", out, outputs, &failures, &warnings, None)
}

#[derive(Debug, Serialize, Deserialize)]
struct OverheadRow {
    discipline: Discipline,
    min: u64,
    median: u64,
    p999: u64,
    max: u64,
    samples: usize,
    cold: u64,
    timer_overhead: u64,
}

impl From<OverheadReport> for OverheadRow {
    fn from(r: OverheadReport) -> Self {
        Self {
            discipline: r.discipline,
            min: r.min,
            median: r.median,
            p999: r.p999,
            max: r.max,
            samples: r.samples,
            cold: r.cold,
            timer_overhead: r.timer_overhead,
        }
    }
}

/// Benchmarks run one at a time and never alongside other work.
pub fn bench(spec: &ExperimentSpec, out: &Path, format: Format) -> Result<(), CliError> {
    let b = &spec.bench;
    let clock = CycleClock::calibrate(100_000).map_err(|e| CliError::Violation(vec![e.to_string()]))?;
    let machine = Machine::probe(clock.cycles_per_ns);
    let meta = machine.meta();
    let mut outputs = Vec::new();
    let mut failures = Vec::new();
    let mut warnings = Vec::new();

    if b.overhead_samples > 0 {
        let capacity = b.threads.iter().copied().max().unwrap_or(1);
        let mut rows = Vec::new();
        for &d in &b.disciplines {
            match measure_uncontested(d, capacity, b.overhead_samples, &clock) {
                Ok(r) => rows.push(OverheadRow::from(r)),
                Err(e) => failures.push(format!("overhead {d}: {e}")),
            }
        }
        outputs.push(write_table(out, "overhead", format, OVERHEAD_SCHEMA, &meta, &rows)?.display().to_string());
    }

    let mut rows = Vec::new();
    for &threads in &b.threads {
        for &scheme in &b.schemes {
            for &load in &b.loads {
                for &seed in &spec.seeds {
                    for &d in &b.disciplines {
                        let mut cfg = BenchConfig::new(threads, d, scheme, load, seed);
                        cfg.cs_ns = b.cs_ns;
                        cfg.budget = b.requests;
                        cfg.pin = b.pin.clone();
                        cfg.trace = b.verify;
                        let tag = format!("{d} threads={threads} {} load={load} seed={seed}", scheme.as_str());
                        let run = match run_contended(&cfg) {
                            Ok(r) => r,
                            Err(e) => {
                                failures.push(format!("{tag}: {e}"));
                                continue;
                            }
                        };
                        for w in &run.warnings {
                            if !warnings.contains(w) {
                                warnings.push(w.clone());
                            }
                        }
                        if let Some(trace) = &run.trace {
                            match verify_trace(d, threads, trace) {
                                Ok(v) => failures.extend(v.violations().into_iter().map(|x| format!("{tag}: {x}"))),
                                Err(e) => failures.push(format!("{tag}: {e}")),
                            }
                        }
                        match bench_row(&run) {
                            Ok(r) => rows.push(r),
                            Err(e) => failures.push(format!("{tag}: {e}")),
                        }
                    }
                }
            }
        }
    }
    if b.disciplines.contains(&Discipline::Fl) {
        if let Err(e) = normalize(&mut rows) {
            warnings.push(e.to_string());
        }
    }
    outputs.push(write_table(out, "bench", format, METRICS_SCHEMA, &meta, &rows)?.display().to_string());
    finish(spec, "bench", out, outputs, &failures, &warnings, Some(&machine))
}

#[derive(Debug, Serialize, Deserialize)]
struct VerifyRow {
    suite: String,
    discipline: Discipline,
    threads: usize,
    /// Acquisitions for stress runs, cycles per thread for exploration.
    size: u64,
    passed: bool,
    detail: String,
}

fn explore_row<P: Protocol>(p: &P, threads: usize, cycles: u8) -> VerifyRow {
    let (passed, detail) = match explore(p, &ExploreConfig::new(threads, cycles)) {
        Ok(r) => (
            r.passed(),
            format!(
                "{} states, {} overlapping holders, {} fair cycles",
                r.states, r.exclusion_violations, r.fair_cycles
            ),
        ),
        Err(e) => (false, e.to_string()),
    };
    VerifyRow {
        suite: "explore".into(),
        discipline: p.discipline(),
        threads,
        size: cycles as u64,
        passed,
        detail,
    }
}

pub fn verify(spec: &ExperimentSpec, out: &Path, format: Format) -> Result<(), CliError> {
    let v = &spec.verify;
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    for &threads in &v.threads {
        let per_thread = v.acquisitions.div_ceil(threads);
        for &d in &v.disciplines {
            let row = match stress(d, threads, per_thread) {
                Ok(r) => {
                    for w in r.warnings {
                        if !warnings.contains(&w) {
                            warnings.push(w);
                        }
                    }
                    let expected = (threads * per_thread) as u64;
                    let lost = expected - r.counter.min(expected);
                    let mut detail = format!(
                        "{} acquisitions in {:.1}s, {lost} lost updates, {} overtaken",
                        r.verdict.acquisitions,
                        r.elapsed.as_secs_f64(),
                        r.verdict.overtaken
                    );
                    if let Some(Ok(b)) = r.verdict.bypass {
                        detail += &format!(", worst bypass {b}");
                    }
                    if let Some(Ok(b)) = r.verdict.batch_cardinality {
                        detail += &format!(", largest batch {b}");
                    }
                    for x in r.verdict.violations() {
                        detail += &format!(", {x}");
                    }
                    VerifyRow {
                        suite: "stress".into(),
                        discipline: d,
                        threads,
                        size: expected,
                        passed: r.verdict.passed() && lost == 0,
                        detail,
                    }
                }
                Err(e) => VerifyRow {
                    suite: "stress".into(),
                    discipline: d,
                    threads,
                    size: 0,
                    passed: false,
                    detail: e.to_string(),
                },
            };
            rows.push(row);
        }
    }
    for &(threads, cycles) in &v.explore {
        for &d in &v.disciplines {
            rows.push(match d {
                Discipline::Sl => explore_row(&Tas::new(threads).expect("validated"), threads, cycles),
                Discipline::Fl => explore_row(&TicketProtocol::new(threads).expect("validated"), threads, cycles),
                Discipline::Bpl => explore_row(&Bpl::new(threads).expect("validated"), threads, cycles),
            });
        }
    }
    for r in &rows {
        let tag = if r.passed { "ok  " } else { "FAIL" };
        println!("{tag} {} {} threads={} size={}: {}", r.suite, r.discipline, r.threads, r.size, r.detail);
    }
    let failures: Vec<String> = rows
        .iter()
        .filter(|r| !r.passed)
        .map(|r| format!("{} {} threads={}: {}", r.suite, r.discipline, r.threads, r.detail))
        .collect();
    let path = write_table(out, "verify", format, VERIFY_SCHEMA, &[], &rows)?;
    finish(spec, "verify", out, vec![path.display().to_string()], &failures, &warnings, None)
}
