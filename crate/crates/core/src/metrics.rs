//! Delay and priority-inversion metrics over served-request traces.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::sim::{SimOutput, SimRequest};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("no delay samples for source {0}")]
    MissingSource(u32),
    #[error("source {id} outside 0..{sources}")]
    UnknownSource { id: u32, sources: usize },
    #[error("grant {index} starts at {start} before the previous service ends at {prev_end}")]
    OverlappingService { index: usize, start: f64, prev_end: f64 },
    #[error("no FL baseline for {0}")]
    MissingBaseline(String),
}

/// Per-source waiting statistics. Source `i` has weight `m - i`: the most
/// urgent source weighs `m`, the least urgent 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceDelay {
    pub source: u32,
    pub weight: u32,
    pub requests: usize,
    pub mean_delay: f64,
    pub max_delay: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DelayTable {
    pub sources: Vec<SourceDelay>,
}

impl DelayTable {
    /// Builds the table from `(source, delay)` samples.
    pub fn from_waits<I: IntoIterator<Item = (u32, f64)>>(m: usize, waits: I) -> Result<Self, MetricsError> {
        let mut sum = vec![0.0; m];
        let mut sources: Vec<SourceDelay> = (0..m)
            .map(|i| SourceDelay {
                source: i as u32,
                weight: (m - i) as u32,
                requests: 0,
                mean_delay: 0.0,
                max_delay: 0.0,
            })
            .collect();
        for (src, d) in waits {
            let s = sources
                .get_mut(src as usize)
                .ok_or(MetricsError::UnknownSource { id: src, sources: m })?;
            s.requests += 1;
            s.max_delay = s.max_delay.max(d);
            sum[src as usize] += d;
        }
        for (s, total) in sources.iter_mut().zip(sum) {
            if s.requests > 0 {
                s.mean_delay = total / s.requests as f64;
            }
        }
        Ok(Self { sources })
    }

    fn check_complete(&self) -> Result<(), MetricsError> {
        match self.sources.iter().find(|s| s.requests == 0) {
            Some(s) => Err(MetricsError::MissingSource(s.source)),
            None => Ok(()),
        }
    }

    /// Weighted mean delay: sum of `w_i * d_i` over sum of `w_i`.
    pub fn weighted_mean_delay(&self) -> Result<f64, MetricsError> {
        self.check_complete()?;
        let (num, den) = self.sources.iter().fold((0.0, 0.0), |(n, d), s| {
            (n + s.weight as f64 * s.mean_delay, d + s.weight as f64)
        });
        Ok(num / den)
    }

    /// Mean delay of the most urgent source.
    pub fn highest_priority_delay(&self) -> Result<f64, MetricsError> {
        self.check_complete()?;
        Ok(self.sources[0].mean_delay)
    }

    pub fn max_delay(&self) -> f64 {
        self.sources.iter().map(|s| s.max_delay).fold(0.0, f64::max)
    }
}

/// One served request, as seen by the inversion counter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grant {
    pub source: u32,
    pub priority: u32,
    pub t_request: f64,
    pub t_start: f64,
    pub t_complete: f64,
}

impl From<&SimRequest> for Grant {
    fn from(r: &SimRequest) -> Self {
        Self {
            source: r.source,
            priority: r.priority,
            t_request: r.t_request,
            t_start: r.t_start,
            t_complete: r.t_complete,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct InversionOptions {
    /// Also count the lower-priority request already in service when a
    /// request arrives.
    pub include_blocker: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SourceInversions {
    pub requests: usize,
    pub affected: usize,
    pub instances: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InversionReport {
    /// Instances per grant, in grant order.
    pub per_request: Vec<u32>,
    pub instances: u64,
    /// Requests with at least one instance.
    pub affected: usize,
    pub requests: usize,
    pub per_source: Vec<SourceInversions>,
}

impl InversionReport {
    /// Share of requests that saw at least one inversion, in percent.
    pub fn affected_pct(&self) -> f64 {
        if self.requests == 0 {
            0.0
        } else {
            100.0 * self.affected as f64 / self.requests as f64
        }
    }
}

/// Fenwick tree of counts.
struct Fenwick(Vec<u32>);

impl Fenwick {
    fn new(n: usize) -> Self {
        Self(vec![0; n + 1])
    }

    fn add(&mut self, i: usize) {
        let mut i = i + 1;
        while i < self.0.len() {
            self.0[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    /// Count over positions `0..i`.
    fn prefix(&self, mut i: usize) -> u32 {
        let mut s = 0;
        while i > 0 {
            s += self.0[i];
            i &= i - 1;
        }
        s
    }
}

/// Counts priority inversions over `grants`, which must be in service
/// order with non-overlapping services.
///
/// For a request `R`, every grant `G` with a numerically larger priority
/// whose whole service fell inside `R`'s wait (`R.t_request <= G.t_start`,
/// `G.t_complete <= R.t_start`) is one instance. The request already in
/// service when `R` arrived does not count unless
/// [`InversionOptions::include_blocker`] is set.
pub fn count_inversions(grants: &[Grant], sources: usize, opts: InversionOptions) -> Result<InversionReport, MetricsError> {
    for (i, w) in grants.windows(2).enumerate() {
        if w[1].t_start < w[0].t_complete {
            return Err(MetricsError::OverlappingService {
                index: i + 1,
                start: w[1].t_start,
                prev_end: w[0].t_complete,
            });
        }
    }
    let n = grants.len();
    // grants[lo[i]..i] are the grants served during request i's wait
    let lo: Vec<usize> = grants
        .iter()
        .enumerate()
        .map(|(i, r)| {
            if opts.include_blocker {
                grants[..i].partition_point(|g| g.t_complete <= r.t_request)
            } else {
                grants[..i].partition_point(|g| g.t_start < r.t_request)
            }
        })
        .collect();

    // sweep priorities from least to most urgent; when request i is
    // queried the tree holds exactly the grants less urgent than it
    let mut by_priority: Vec<usize> = (0..n).collect();
    by_priority.sort_by_key(|&i| std::cmp::Reverse(grants[i].priority));
    let mut tree = Fenwick::new(n);
    let mut per_request = vec![0u32; n];
    let mut start = 0;
    while start < n {
        let p = grants[by_priority[start]].priority;
        let end = start + by_priority[start..].partition_point(|&i| grants[i].priority == p);
        for &i in &by_priority[start..end] {
            per_request[i] = tree.prefix(i) - tree.prefix(lo[i]);
        }
        for &i in &by_priority[start..end] {
            tree.add(i);
        }
        start = end;
    }

    let mut per_source = vec![SourceInversions::default(); sources];
    for (g, &c) in grants.iter().zip(&per_request) {
        let s = per_source.get_mut(g.source as usize).ok_or(MetricsError::UnknownSource {
            id: g.source,
            sources,
        })?;
        s.requests += 1;
        s.instances += c as u64;
        s.affected += (c > 0) as usize;
    }
    Ok(InversionReport {
        instances: per_request.iter().map(|&c| c as u64).sum(),
        affected: per_request.iter().filter(|&&c| c > 0).count(),
        requests: n,
        per_request,
        per_source,
    })
}

/// One result row. Shared by simulator sweeps and native benchmarks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub m: usize,
    /// Mean burst size; 0 for native benchmark rows.
    pub mbs: usize,
    pub lambda_ratio: f64,
    pub policy: String,
    pub seed: u64,
    pub inversion_pct: f64,
    pub inversion_instances: u64,
    pub d_w: f64,
    /// `d_w` over the FL row of the same cell and seed.
    pub d_w_normalized: Option<f64>,
    pub d_highest_priority: f64,
    pub d_max: f64,
    /// `sim`, `bench-equal` or `bench-skewed`.
    pub workload: String,
}

impl MetricsRow {
    /// Cell identity without the policy.
    pub fn cell(&self) -> String {
        format!(
            "{} m={} mbs={} lambda_ratio={} seed={}",
            self.workload, self.m, self.mbs, self.lambda_ratio, self.seed
        )
    }
}

/// Metrics of one simulation run. Delays include the censored waits of
/// requests still outstanding at the end, so starved sources count.
pub fn sim_row(out: &SimOutput, opts: InversionOptions) -> Result<MetricsRow, MetricsError> {
    let cfg = &out.config;
    let grants: Vec<Grant> = out.completed.iter().map(Grant::from).collect();
    let inv = count_inversions(&grants, cfg.sources, opts)?;
    let delays = DelayTable::from_waits(cfg.sources, out.waits())?;
    Ok(MetricsRow {
        m: cfg.sources,
        mbs: cfg.mean_burst_size,
        lambda_ratio: cfg.burst_ratio,
        policy: cfg.policy.to_string(),
        seed: cfg.seed,
        inversion_pct: inv.affected_pct(),
        inversion_instances: inv.instances,
        d_w: delays.weighted_mean_delay()?,
        d_w_normalized: None,
        d_highest_priority: delays.highest_priority_delay()?,
        d_max: delays.max_delay(),
        workload: "sim".to_string(),
    })
}

/// Fills `d_w_normalized` of every row from the FL row of its cell.
pub fn normalize(rows: &mut [MetricsRow]) -> Result<(), MetricsError> {
    let baseline: HashMap<String, f64> = rows
        .iter()
        .filter(|r| r.policy == "FL")
        .map(|r| (r.cell(), r.d_w))
        .collect();
    for r in rows.iter_mut() {
        let base = baseline
            .get(&r.cell())
            .ok_or_else(|| MetricsError::MissingBaseline(r.cell()))?;
        r.d_w_normalized = Some(r.d_w / base);
    }
    Ok(())
}
