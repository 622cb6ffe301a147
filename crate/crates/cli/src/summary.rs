//! Per-cell aggregation of result rows over seeds.

use std::collections::BTreeMap;
use std::fmt::Write;

use batchlock::metrics::{normalize, MetricsRow};
use serde::Serialize;

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Spread {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Spread {
    fn of(values: impl Iterator<Item = f64>) -> Self {
        let (mut n, mut sum, mut min, mut max) = (0usize, 0.0, f64::INFINITY, f64::NEG_INFINITY);
        for v in values {
            n += 1;
            sum += v;
            min = min.min(v);
            max = max.max(v);
        }
        Self {
            mean: sum / n as f64,
            min,
            max,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellSummary {
    pub workload: String,
    pub m: usize,
    pub mbs: usize,
    pub lambda_ratio: f64,
    pub policy: String,
    pub seeds: usize,
    pub inversion_pct: Spread,
    pub d_w_normalized: Spread,
    pub d_highest_priority: Spread,
}

/// Normalizes `rows` against their FL baselines and aggregates each
/// (workload, m, mbs, lambda, policy) cell over seeds. Fails if any row
/// lacks a baseline.
pub fn summarize(mut rows: Vec<MetricsRow>) -> Result<Vec<CellSummary>, CliError> {
    if rows.is_empty() {
        return Err(CliError::Input("no result rows".into()));
    }
    normalize(&mut rows).map_err(|e| CliError::Input(e.to_string()))?;
    let mut cells: BTreeMap<_, Vec<&MetricsRow>> = BTreeMap::new();
    for r in &rows {
        // f64 keys: order by the bit pattern of a non-negative value
        let key = (r.workload.clone(), r.m, r.mbs, r.lambda_ratio.to_bits(), policy_rank(&r.policy), r.policy.clone());
        cells.entry(key).or_default().push(r);
    }
    Ok(cells
        .into_values()
        .map(|rs| CellSummary {
            workload: rs[0].workload.clone(),
            m: rs[0].m,
            mbs: rs[0].mbs,
            lambda_ratio: rs[0].lambda_ratio,
            policy: rs[0].policy.clone(),
            seeds: rs.len(),
            inversion_pct: Spread::of(rs.iter().map(|r| r.inversion_pct)),
            d_w_normalized: Spread::of(rs.iter().map(|r| r.d_w_normalized.expect("normalized above"))),
            d_highest_priority: Spread::of(rs.iter().map(|r| r.d_highest_priority)),
        })
        .collect())
}

fn policy_rank(p: &str) -> u8 {
    match p {
        "FL" => 0,
        "SL" => 1,
        "PL" => 2,
        "BPL" => 3,
        _ => 4,
    }
}

pub fn render(cells: &[CellSummary]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<14} {:>3} {:>4} {:>7} {:<4} {:>5}  {:>24}  {:>27}  {:>12}",
        "workload", "m", "mbs", "lambda", "lock", "seeds", "inversion % mean [min,max]", "d_w/d_w(FL) mean [min,max]", "d_hp mean"
    );
    for c in cells {
        let _ = writeln!(
            out,
            "{:<14} {:>3} {:>4} {:>7} {:<4} {:>5}  {:>8.2} [{:>6.2},{:>6.2}]  {:>9.3} [{:>7.3},{:>7.3}]  {:>12.2}",
            c.workload,
            c.m,
            c.mbs,
            c.lambda_ratio,
            c.policy,
            c.seeds,
            c.inversion_pct.mean,
            c.inversion_pct.min,
            c.inversion_pct.max,
            c.d_w_normalized.mean,
            c.d_w_normalized.min,
            c.d_w_normalized.max,
            c.d_highest_priority.mean,
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(policy: &str, seed: u64, d_w: f64, inv: f64) -> MetricsRow {
        MetricsRow {
            m: 8,
            mbs: 4,
            lambda_ratio: 0.5,
            policy: policy.into(),
            seed,
            inversion_pct: inv,
            inversion_instances: 0,
            d_w,
            d_w_normalized: None,
            d_highest_priority: d_w / 2.0,
            d_max: d_w * 3.0,
            workload: "sim".into(),
        }
    }

    #[test]
    fn two_policies_get_ratios() {
        let cells = summarize(vec![row("FL", 1, 200.0, 30.0), row("BPL", 1, 150.0, 10.0)]).unwrap();
        assert_eq!(cells.len(), 2);
        assert_eq!(cells[0].policy, "FL");
        assert_eq!(cells[0].d_w_normalized.mean, 1.0);
        assert_eq!(cells[1].d_w_normalized.mean, 0.75);
    }

    #[test]
    fn seeds_aggregate_to_mean_min_max() {
        let cells = summarize(vec![
            row("FL", 1, 100.0, 20.0),
            row("FL", 2, 100.0, 40.0),
            row("BPL", 1, 50.0, 0.0),
            row("BPL", 2, 90.0, 6.0),
        ])
        .unwrap();
        let bpl = &cells[1];
        assert_eq!(bpl.seeds, 2);
        assert_eq!(bpl.d_w_normalized, Spread { mean: 0.7, min: 0.5, max: 0.9 });
        assert_eq!(bpl.inversion_pct, Spread { mean: 3.0, min: 0.0, max: 6.0 });
        assert_eq!(cells[0].inversion_pct.mean, 30.0);
    }

    #[test]
    fn missing_baseline_is_an_error() {
        let err = summarize(vec![row("BPL", 1, 1.0, 0.0)]).unwrap_err();
        assert!(err.to_string().contains("no FL baseline"), "{err}");
    }
}
