mod common;

use std::collections::{HashSet, VecDeque};

use common::*;
use expertq::baseline::BaselineScheduler;
use expertq::metrics::percentile;
use expertq::sched::{QllmPolicy, QllmScheduler, QueueKind, QueueSet};
use expertq::sim::simulate;
use expertq::types::Phase;
use expertq::workload::{parse_trace, save_trace};
use proptest::prelude::*;

const KINDS: [QueueKind; 4] = [QueueKind::LsPrefill, QueueKind::BePrefill, QueueKind::LsDecode, QueueKind::BeDecode];

#[derive(Debug, Clone)]
enum Op {
    Push(usize),
    Pop(usize),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![3 => (0..4usize).prop_map(Op::Push), 1 => (1..6usize).prop_map(Op::Pop)]
}

/// Plain FCFS queues and the selection rules over them.
#[derive(Default)]
struct Model {
    q: [VecDeque<u64>; 4],
}

impl Model {
    fn take(&mut self, k: usize, n: usize) -> Vec<u64> {
        let n = n.min(self.q[k].len());
        self.q[k].drain(..n).collect()
    }

    fn select(&mut self, max: usize) -> Option<(Phase, Vec<u64>)> {
        let (lp, bp, ld, bd) = (0, 1, 2, 3);
        if self.q[ld].len() >= max {
            Some((Phase::Decode, self.take(ld, max)))
        } else if !self.q[lp].is_empty() {
            let mut v = self.take(lp, max);
            v.extend(self.take(bp, max - v.len()));
            Some((Phase::Prefill, v))
        } else if !self.q[ld].is_empty() {
            let mut v = self.take(ld, max);
            v.extend(self.take(bd, max - v.len()));
            Some((Phase::Decode, v))
        } else if !self.q[bd].is_empty() {
            Some((Phase::Decode, self.take(bd, max)))
        } else if !self.q[bp].is_empty() {
            Some((Phase::Prefill, self.take(bp, max)))
        } else {
            None
        }
    }
}

proptest! {
    #[test]
    fn queues_conserve_jobs_in_fcfs_order(ops in prop::collection::vec(op(), 1..200)) {
        let mut qs = QueueSet::new();
        let mut model = Model::default();
        let mut next = 0u64;
        let mut seen = HashSet::new();
        for o in ops {
            match o {
                Op::Push(k) => {
                    qs.push_back(KINDS[k], next).unwrap();
                    model.q[k].push_back(next);
                    next += 1;
                }
                Op::Pop(max) => {
                    let ls: HashSet<u64> = model.q[0].iter().chain(&model.q[2]).copied().collect();
                    let got = qs.get_next_batch(max);
                    let want = model.select(max);
                    prop_assert_eq!(got.as_ref().map(|s| (s.phase, s.members.clone())), want.clone());
                    if let Some(sel) = got {
                        prop_assert!(!sel.members.is_empty() && sel.members.len() <= max);
                        prop_assert_eq!(sel.resume, None);
                        // an LS job waiting always heads the next batch
                        if !ls.is_empty() {
                            prop_assert!(ls.contains(&sel.members[0]));
                        }
                        for id in sel.members {
                            prop_assert!(seen.insert(id), "job {} dispatched twice", id);
                        }
                    }
                }
            }
            prop_assert_eq!(qs.total(), model.q.iter().map(|q| q.len()).sum::<usize>());
        }
        while let Some(sel) = qs.get_next_batch(4) {
            for id in sel.members {
                prop_assert!(seen.insert(id));
            }
        }
        prop_assert_eq!(seen.len() as u64, next);
    }

    #[test]
    fn percentile_is_a_member_and_monotone(mut v in prop::collection::vec(-1e6f64..1e6, 1..50), p in 0.0f64..1.0) {
        v.sort_by(f64::total_cmp);
        let x = percentile(&v, p);
        prop_assert!(v.contains(&x));
        prop_assert!(x <= percentile(&v, (p + 0.1).min(1.0)));
        prop_assert_eq!(percentile(&v, 1.0), *v.last().unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn ledger_matches_recount_and_all_jobs_finish(seed in 0u64..1000, rate in 2.0f64..12.0, sched in 0usize..2) {
        let cfg = small_sim(seed, 4);
        let trace = small_trace(seed, rate, 2.0);
        let out = if sched == 0 {
            simulate(&cfg, &trace, &mut BaselineScheduler::new()).unwrap()
        } else {
            simulate(&cfg, &trace, &mut QllmScheduler::new(Box::new(QllmPolicy))).unwrap()
        };
        prop_assert!(out.cache_consistent());
        prop_assert_eq!(out.cache_samples.len(), expertq::sim::CACHE_SAMPLES);
        prop_assert_eq!(out.records.len(), trace.len());
        prop_assert_eq!(out.unfinished, 0);
        prop_assert!((out.clock_charged + out.clock_idle - out.duration_ms).abs() < 1e-6 * out.duration_ms.max(1.0));
        for r in &out.records {
            prop_assert!(r.arrival <= r.first_token && r.first_token <= r.finish);
            prop_assert!(r.output_len >= 1 && r.output_len <= trace[r.id as usize].output_len);
        }
    }

    #[test]
    fn random_preemption_is_transparent(seed in 0u64..10_000, p in 0.05f64..0.6) {
        let cfg = small_sim(seed, 4);
        let trace = small_trace(seed, 6.0, 1.5);
        let oracle = solo_oracle(&cfg, &trace);
        let out = run_random(&cfg, &trace, seed, p);
        prop_assert_eq!(&out.outputs, &oracle.outputs);
        prop_assert_eq!(out.stats.gating_violations, 0);
        prop_assert!(out.stats.preemptions > 0);
        // groups preempted at the same cursor may resume together
        prop_assert!(out.stats.restores <= out.stats.preemptions && out.stats.restores > 0);
        prop_assert!(out.cache_consistent());
    }

    #[test]
    fn traces_round_trip(seed in 0u64..1000) {
        let trace = small_trace(seed, 5.0, 3.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        save_trace(&trace, &path).unwrap();
        let back = parse_trace(std::io::BufReader::new(std::fs::File::open(&path).unwrap())).unwrap();
        prop_assert_eq!(back, trace);
    }
}
