use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use abtree::lincheck::{check_batch, elim_history, mutate, record, step, LockedModel, Op, StressConfig};
use abtree::pmem::{explore_crashes, random_script, CrashPlan, Simulated};
use abtree::reclaim::Disposal;
use abtree::tree::{AbTree, Durability, ElimPolicy, NoElim, Phase, Publishing};
use abtree::workload::{mean_ops_per_us, run_trial, run_trials, TrialResult, Variant, WorkloadConfig};
use abtree::{ElimTree, ExecMode, OccTree, Params};
use acceptance::{Outcome, Report};
use rand::rngs::SmallRng;
use rand::{Rng, SeedableRng};

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

fn oracle_replay<D: Durability, E: ElimPolicy>(tree: &AbTree<D, E>, seed: u64) -> Result<(), String> {
    let mut rng = SmallRng::seed_from_u64(seed);
    let mut oracle = BTreeMap::new();
    for i in 0..100_000u64 {
        let k = rng.gen_range(1..=1000);
        let op = match rng.gen_range(0..3) {
            0 => Op::Insert(k, i),
            1 => Op::Delete(k),
            _ => Op::Find(k),
        };
        let (got, want) = (op.apply(tree), step(&mut oracle, op));
        if got != want {
            return Err(format!("op {i} {op:?}: got {got:?}, expected {want:?}"));
        }
    }
    let r = tree.validate_structure();
    if !r.is_clean() {
        return Err(r.to_string());
    }
    Ok(())
}

fn c1() -> Outcome {
    let results = [
        ("occ", oracle_replay(&OccTree::new(), 1)),
        ("elim", oracle_replay(&ElimTree::new(), 2)),
        (
            "p-occ",
            oracle_replay(
                &AbTree::<Simulated, NoElim>::with_config(Simulated::disabled(), Params::DEFAULT, Disposal::Free),
                3,
            ),
        ),
        (
            "p-elim",
            oracle_replay(
                &AbTree::<Simulated, Publishing>::with_config(Simulated::disabled(), Params::DEFAULT, Disposal::Free),
                4,
            ),
        ),
    ];
    let bad: Vec<String> = results
        .iter()
        .filter_map(|(n, r)| r.as_ref().err().map(|e| format!("{n}: {e}")))
        .collect();
    if bad.is_empty() {
        Outcome::new(true, "4 variants x 100000 ops identical to a sorted map")
    } else {
        Outcome::new(false, bad.join("; "))
    }
}

/// Criterion 2's trial matrix; its results also feed criterion 9.
fn matrix() -> Vec<(WorkloadConfig, TrialResult)> {
    let mut out = Vec::new();
    for variant in [Variant::Occ, Variant::Elim] {
        for threads in [1, 2, 4, 8] {
            for update_pct in [5.0, 50.0, 100.0] {
                for zipf in [0.0, 1.0] {
                    for keys in [1_000, 100_000] {
                        let cfg = WorkloadConfig {
                            variant,
                            keys,
                            update_pct,
                            zipf,
                            threads,
                            duration: secs(1),
                            seed: out.len() as u64 + 1,
                            ..WorkloadConfig::default()
                        };
                        let r = run_trial(&cfg).expect("valid workload");
                        out.push((cfg, r));
                    }
                }
            }
        }
    }
    out
}

fn c2(trials: &[(WorkloadConfig, TrialResult)]) -> Outcome {
    let bad: Vec<String> = trials
        .iter()
        .filter(|(_, r)| !r.passed())
        .map(|(c, r)| format!("{}: {}", r.csv_row(c), r.verdict()))
        .collect();
    let ops: u64 = trials.iter().map(|(_, r)| r.total_ops).sum();
    if bad.is_empty() {
        Outcome::new(true, format!("{} trials, {ops} operations, every key sum exact", trials.len()))
    } else {
        Outcome::new(false, format!("{} of {} trials failed: {}", bad.len(), trials.len(), bad.join(" | ")))
    }
}

fn c9(trials: &[(WorkloadConfig, TrialResult)]) -> Outcome {
    let finds: u64 = trials.iter().map(|(_, r)| r.counters.finds).sum();
    let descents: u64 = trials.iter().map(|(_, r)| r.counters.find_descents).sum();
    let bad = trials
        .iter()
        .filter(|(_, r)| r.counters.finds != r.counters.find_descents)
        .count();
    Outcome::new(
        bad == 0 && finds > 0,
        format!("{finds} finds, {descents} descents, {bad} trials with restarts"),
    )
}

fn stop_the_world<D: Durability, E: ElimPolicy>(tree: &AbTree<D, E>, keys: u64, checkpoints: usize) -> Result<(), String> {
    const THREADS: usize = 8;
    const PER_CHECKPOINT: usize = 100_000;
    let mut expected = tree.key_sum() as i128;
    for cp in 0..checkpoints {
        expected += std::thread::scope(|s| {
            let hs: Vec<_> = (0..THREADS)
                .map(|tid| {
                    s.spawn(move || {
                        let mut rng = SmallRng::seed_from_u64((cp * THREADS + tid) as u64);
                        let mut d = 0i128;
                        for _ in 0..PER_CHECKPOINT / THREADS {
                            let k = rng.gen_range(1..=keys);
                            match rng.gen_range(0..4) {
                                0 | 1 => {
                                    if tree.insert(k, k).is_none() {
                                        d += k as i128;
                                    }
                                }
                                2 => {
                                    if tree.delete(k).is_some() {
                                        d -= k as i128;
                                    }
                                }
                                _ => {
                                    tree.find(k);
                                }
                            }
                        }
                        d
                    })
                })
                .collect();
            hs.into_iter().map(|h| h.join().unwrap()).sum::<i128>()
        });
        let r = tree.validate_structure();
        if !r.is_clean() {
            return Err(format!("checkpoint {cp}: {r}"));
        }
        if r.key_sum as i128 != expected {
            return Err(format!("checkpoint {cp}: key sum {} expected {expected}", r.key_sum));
        }
    }
    Ok(())
}

fn c3() -> Outcome {
    let small = Params::new(2, 4).unwrap();
    let runs = [
        ("occ a=2 b=4", stop_the_world(&OccTree::with_params(small), 2_000, 10)),
        ("elim a=2 b=4", stop_the_world(&ElimTree::with_params(small), 2_000, 10)),
        ("occ", stop_the_world(&OccTree::new(), 20_000, 10)),
        ("elim", stop_the_world(&ElimTree::new(), 20_000, 10)),
    ];
    let bad: Vec<String> = runs
        .iter()
        .filter_map(|(n, r)| r.as_ref().err().map(|e| format!("{n}: {e}")))
        .collect();
    Outcome::new(
        bad.is_empty(),
        if bad.is_empty() {
            "4 trees x 10 checkpoints of 100000 ops, all clean".to_string()
        } else {
            bad.join("; ")
        },
    )
}

fn c4() -> Outcome {
    let mut rng = SmallRng::seed_from_u64(4);
    let mut histories = Vec::new();
    let mut eliminated = 0;
    for seed in 0..500 {
        let cfg = StressConfig {
            threads: rng.gen_range(2..=4),
            ops_per_thread: rng.gen_range(6..=12),
            keys: rng.gen_range(1..=3),
            hot_key: rng.gen_range(0.5..0.95),
            find_ratio: rng.gen_range(0.0..0.3),
            seed,
        };
        let (h, c) = elim_history(&cfg);
        eliminated += c.eliminated();
        histories.push(h);
    }
    let passed = check_batch(&histories, ExecMode::Parallel).iter().filter(|v| v.is_pass()).count();

    let locked: Vec<_> = (0..100)
        .map(|seed| record(&LockedModel::new(), &StressConfig { seed, ..StressConfig::default() }).0)
        .collect();
    let locked_ok = check_batch(&locked, ExecMode::Parallel).iter().all(|v| v.is_pass());
    let mutants: Vec<_> = (0..1000).map(|i| mutate(&locked[i % 100], &mut rng).unwrap()).collect();
    let rejected = check_batch(&mutants, ExecMode::Parallel).iter().filter(|v| !v.is_pass()).count();
    Outcome::new(
        passed == 500 && eliminated > 0 && locked_ok && rejected * 100 > 99 * 1000,
        format!(
            "{passed}/500 elimination histories linearizable ({eliminated} eliminated ops); \
             global-lock histories pass: {locked_ok}; mutants rejected {rejected}/1000"
        ),
    )
}

fn c5() -> Outcome {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let base = WorkloadConfig {
        keys: 10_000,
        update_pct: 100.0,
        zipf: 1.0,
        threads,
        duration: secs(1),
        ..WorkloadConfig::default()
    };
    let occ = run_trials(&WorkloadConfig { variant: Variant::Occ, ..base.clone() }, 3).unwrap();
    let elim = run_trials(&WorkloadConfig { variant: Variant::Elim, ..base }, 3).unwrap();
    let valid = occ.iter().chain(&elim).all(|r| r.passed());
    let (o, e) = (mean_ops_per_us(&occ), mean_ops_per_us(&elim));
    let eliminated: u64 = elim.iter().map(|r| r.counters.eliminated()).sum();
    let ratio = e / o;
    Outcome::new(
        valid && ratio >= 1.1,
        format!(
            "{threads} hardware threads: elim {e:.3} ops/us vs occ {o:.3} ops/us, ratio {ratio:.3} \
             (gate 1.1), {eliminated} eliminated ops"
        ),
    )
}

fn c6() -> Outcome {
    let mut rng = SmallRng::seed_from_u64(6);
    let mut verdicts = 0;
    let mut failures = Vec::new();
    for i in 0..100 {
        let n = rng.gen_range(0..=24u64);
        let mut keys: Vec<u64> = (1..=30).collect();
        rand::seq::SliceRandom::shuffle(&mut keys[..], &mut rng);
        let prefill: Vec<(u64, u64)> = keys[..n as usize].iter().map(|&k| (k, k)).collect();
        let script = random_script(&mut rng, 5, 30);
        let r = explore_crashes(&script, &CrashPlan { prefill, seed: i, ..CrashPlan::default() });
        verdicts += r.verdicts.len();
        if let Some(f) = r.failures().next() {
            failures.push(format!("script {i} {script:?}: {} {}", f.crash_point, f.detail));
        };
    }

    // Crash after the value is durable but before the key is written.
    let plan = CrashPlan {
        prefill: vec![(1, 10), (2, 20)],
        ..CrashPlan::default()
    };
    let r = explore_crashes(&[Op::Insert(3, 30)], &plan);
    let val_points: Vec<_> = r.verdicts.iter().filter(|v| v.phase == Some(Phase::InsertVal)).collect();
    let scenario_val = r.passed() && !val_points.is_empty() && val_points.iter().all(|v| !v.contains(3));
    // Crash before the link to the split leaves is flushed.
    let plan = CrashPlan {
        prefill: vec![(10, 1), (20, 2), (30, 3), (40, 4)],
        ..CrashPlan::default()
    };
    let r = explore_crashes(&[Op::Insert(25, 5)], &plan);
    let pre_link: Vec<_> = r.verdicts.iter().filter(|v| v.phase == Some(Phase::SplitNodes)).collect();
    let scenario_split = r.passed() && !pre_link.is_empty() && pre_link.iter().all(|v| !v.contains(25));

    Outcome::new(
        failures.is_empty() && scenario_val && scenario_split,
        format!(
            "100 scripts, {verdicts} crash verdicts, {} failing; value-before-key scenario {}; \
             split-before-link scenario {}{}",
            failures.len(),
            if scenario_val { "excludes the key" } else { "FAILED" },
            if scenario_split { "excludes the key" } else { "FAILED" },
            failures.first().map_or(String::new(), |f| format!("; first failure {f}"))
        ),
    )
}

fn c7() -> Outcome {
    let cfg = WorkloadConfig {
        variant: Variant::PElim,
        keys: 10_000,
        update_pct: 100.0,
        zipf: 1.0,
        threads: 4,
        duration: secs(1),
        seed: 7,
        ..WorkloadConfig::default()
    };
    let r = run_trial(&cfg).unwrap();
    let detail = match &r.recovered {
        Some(Ok(s)) => format!("live {}; recovered {s} after {} ops", r.sum, r.total_ops),
        Some(Err(e)) => format!("recovery failed: {e}"),
        None => "no crash taken".into(),
    };
    Outcome::new(r.passed() && matches!(r.recovered, Some(Ok(_))), detail)
}

fn c8() -> Outcome {
    let base = WorkloadConfig {
        keys: 1_000_000,
        update_pct: 100.0,
        zipf: 0.0,
        threads: 8,
        duration: secs(1),
        ..WorkloadConfig::default()
    };
    let occ = run_trials(&WorkloadConfig { variant: Variant::Occ, ..base.clone() }, 3).unwrap();
    let pocc = run_trials(&WorkloadConfig { variant: Variant::POcc, ..base }, 3).unwrap();
    let valid = occ.iter().chain(&pocc).all(|r| r.passed());
    let (o, p) = (mean_ops_per_us(&occ), mean_ops_per_us(&pocc));
    let slowdown = 1.0 - p / o;
    Outcome::new(
        valid && slowdown <= 0.40,
        format!("occ {o:.3} ops/us, p-occ {p:.3} ops/us, slowdown {:.1}% (gate 40%)", slowdown * 100.0),
    )
}

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| a.parse::<u32>().is_ok()).collect();
    let mut report = Report::new(filter);

    report.gate(1, "sequential oracle equivalence", secs(10), c1);
    let mut trials = None;
    if report.wants(2) || report.wants(9) {
        let start = Instant::now();
        let m = matrix();
        let took = start.elapsed();
        if report.wants(2) {
            report.record(2, "sum-of-keys validation matrix", c2(&m), took, secs(120));
        }
        trials = Some(m);
    }
    report.gate(3, "structure invariants at stop-the-world checkpoints", secs(60), c3);
    report.gate(4, "linearizability of elimination histories", secs(300), c4);
    report.gate(5, "elimination effectiveness", secs(120), c5);
    report.gate(6, "durable atomicity over crash points", secs(300), c6);
    report.gate(7, "recovery after a durable trial", secs(60), c7);
    report.gate(8, "persistence overhead", secs(120), c8);
    if let Some(m) = trials.as_deref() {
        report.gate(9, "single descent per find", secs(120), || c9(m));
    }
    println!("{}", report.summary());
    if !report.failed().is_empty() {
        std::process::exit(1);
    }
}
