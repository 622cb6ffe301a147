use batchlock::locks::close_batch;
use batchlock::metrics::{count_inversions, DelayTable, Grant, InversionOptions};
use batchlock::sim::{check_trace, grants_during_wait, run_sim, PendingSet, Policy, SimConfig};
use proptest::prelude::*;

/// Instances for request `r` straight from the definition: a less urgent
/// request whose service began while `r` was waiting.
fn brute_inversions(grants: &[Grant], include_blocker: bool) -> Vec<u32> {
    grants
        .iter()
        .map(|r| {
            grants
                .iter()
                .filter(|g| g.priority > r.priority && g.t_start < r.t_start)
                .filter(|g| {
                    if include_blocker {
                        g.t_complete > r.t_request
                    } else {
                        g.t_start >= r.t_request
                    }
                })
                .count() as u32
        })
        .collect()
}

/// Serialized services with positive length; each request arrives some
/// time before its start (possibly before earlier services).
fn grants(m: u32) -> impl Strategy<Value = Vec<Grant>> {
    prop::collection::vec((0..m, 0u32..50, 1u32..20, 0u32..200), 1..120).prop_map(|raw| {
        let mut t = 0.0;
        raw.into_iter()
            .map(|(src, gap, len, back)| {
                let start = t + gap as f64;
                t = start + len as f64;
                Grant {
                    source: src,
                    priority: src + 1,
                    t_request: (start - back as f64).max(0.0),
                    t_start: start,
                    t_complete: t,
                }
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn inversion_count_matches_definition(g in grants(6), blocker in any::<bool>()) {
        let opts = InversionOptions { include_blocker: blocker };
        let fast = count_inversions(&g, 6, opts).unwrap();
        prop_assert_eq!(fast.per_request, brute_inversions(&g, blocker));
    }

    #[test]
    fn weighted_delay_lies_between_source_means(
        waits in prop::collection::vec((0u32..5, 0.0f64..1e6), 0..200),
    ) {
        // every source needs at least one sample
        let all = waits.into_iter().chain((0..5).map(|s| (s, 1.0)));
        let table = DelayTable::from_waits(5, all).unwrap();
        let means: Vec<f64> = table.sources.iter().map(|s| s.mean_delay).collect();
        let lo = means.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = means.iter().cloned().fold(0.0, f64::max);
        let dw = table.weighted_mean_delay().unwrap();
        prop_assert!(lo - 1e-9 <= dw && dw <= hi + 1e-9);
    }

    #[test]
    fn batch_close_clears_count_and_bumps_id(v in any::<u64>(), k in 0u32..7) {
        let next = close_batch(v, k);
        let mask = (1u64 << k) - 1;
        prop_assert_eq!(next & mask, 0);
        prop_assert_eq!(next >> k, (v >> k).wrapping_add(1) & (u64::MAX >> k));
    }

    #[test]
    fn distinct_batches_degenerate_to_fifo(prios in prop::collection::vec(1u32..9, 1..40)) {
        let mut bpl = PendingSet::new(Policy::Bpl);
        let mut fl = PendingSet::new(Policy::Fl);
        for (i, &p) in prios.iter().enumerate() {
            bpl.close_batch();
            bpl.arrive(i as u32, p, i as f64);
            fl.arrive(i as u32, p, i as f64);
        }
        let a: Vec<u32> = bpl.drain().map(|w| w.source).collect();
        let b: Vec<u32> = fl.drain().map(|w| w.source).collect();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn one_batch_degenerates_to_priority(prios in prop::collection::vec(1u32..9, 1..40)) {
        let mut bpl = PendingSet::new(Policy::Bpl);
        let mut pl = PendingSet::new(Policy::Pl);
        for (i, &p) in prios.iter().enumerate() {
            bpl.arrive(i as u32, p, i as f64);
            pl.arrive(i as u32, p, i as f64);
        }
        let a: Vec<u32> = bpl.drain().map(|w| w.source).collect();
        let b: Vec<u32> = pl.drain().map(|w| w.source).collect();
        prop_assert_eq!(a, b);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn simulated_runs_keep_model_invariants(
        m in 2usize..24,
        mbs_frac in 0.0f64..1.0,
        ratio in prop::sample::select(vec![0.01, 0.05, 0.2, 1.0]),
        seed in any::<u64>(),
    ) {
        let mbs = 1 + (mbs_frac * (m / 2 - 1) as f64) as usize;
        for policy in Policy::ALL {
            let mut cfg = SimConfig::new(m, mbs, ratio, policy, seed);
            cfg.request_budget = 2_000;
            let out = run_sim(&cfg).unwrap();
            prop_assert_eq!(out.completed.len(), 2_000);
            check_trace(&out).unwrap();
            if policy == Policy::Bpl {
                let worst = grants_during_wait(&out.completed).into_iter().max().unwrap();
                prop_assert!(worst < m);
            }
            if policy == Policy::Pl {
                let g: Vec<Grant> = out.completed.iter().map(Grant::from).collect();
                let inv = count_inversions(&g, m, InversionOptions::default()).unwrap();
                prop_assert_eq!(inv.instances, 0);
            }
        }
    }
}
