use rand::rngs::SmallRng;
use rand::{Rng, SeedableRng};

use super::history::{History, Op, Recorder};
use crate::stats::{self, OpCounters};
use crate::tree::{Dictionary, ElimTree};

/// Shape of a small recorded stress run.
#[derive(Clone, Copy, Debug)]
pub struct StressConfig {
    pub threads: usize,
    pub ops_per_thread: usize,
    /// Keys are drawn from `1..=keys`.
    pub keys: u64,
    /// Probability that an operation targets key 1 regardless of `keys`.
    pub hot_key: f64,
    /// Fraction of finds; the rest splits evenly into inserts and deletes.
    pub find_ratio: f64,
    pub seed: u64,
}

impl Default for StressConfig {
    fn default() -> Self {
        Self {
            threads: 4,
            ops_per_thread: 12,
            keys: 3,
            hot_key: 0.6,
            find_ratio: 0.2,
            seed: 0,
        }
    }
}

/// Draws the operation stream of one thread. Insert values are unique per
/// history so that every returned value names the insert it came from.
pub fn thread_ops(cfg: &StressConfig, tid: usize) -> Vec<Op> {
    let mut rng = SmallRng::seed_from_u64(cfg.seed.wrapping_mul(0x9E37_79B9).wrapping_add(tid as u64));
    (0..cfg.ops_per_thread)
        .map(|i| {
            let key = if rng.gen_bool(cfg.hot_key) { 1 } else { rng.gen_range(1..=cfg.keys) };
            let x: f64 = rng.gen();
            if x < cfg.find_ratio {
                Op::Find(key)
            } else if x < cfg.find_ratio + (1.0 - cfg.find_ratio) / 2.0 {
                Op::Insert(key, ((tid as u64 + 1) << 32) | (i as u64 + 1))
            } else {
                Op::Delete(key)
            }
        })
        .collect()
}

/// Runs the configured streams concurrently on `dict` and returns the
/// recorded history with the summed per-thread counters.
pub fn record<D: Dictionary>(dict: &D, cfg: &StressConfig) -> (History, OpCounters) {
    let rec = Recorder::new();
    let mut total = OpCounters::default();
    let barrier = std::sync::Barrier::new(cfg.threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..cfg.threads)
            .map(|tid| {
                let (rec, barrier) = (&rec, &barrier);
                let ops = thread_ops(cfg, tid);
                s.spawn(move || {
                    let mut log = rec.thread(tid);
                    stats::take();
                    barrier.wait();
                    for op in ops {
                        log.run(dict, op);
                    }
                    stats::take()
                })
            })
            .collect();
        for h in handles {
            total.merge(&h.join().expect("stress thread panicked"));
        }
    });
    (rec.into_history(), total)
}

/// Records one history on a fresh elimination tree with yield injection, so
/// that same-key updates interleave inside their critical sections.
pub fn elim_history(cfg: &StressConfig) -> (History, OpCounters) {
    let tree = ElimTree::new();
    tree.set_yield_injection(true);
    record(&tree, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lincheck::checker::{check, LockedModel};

    #[test]
    fn streams_are_deterministic_and_values_unique() {
        let cfg = StressConfig { seed: 9, ..Default::default() };
        assert_eq!(thread_ops(&cfg, 2), thread_ops(&cfg, 2));
        let mut vals: Vec<u64> = (0..cfg.threads)
            .flat_map(|t| thread_ops(&cfg, t))
            .filter(|o| matches!(o, Op::Insert(..)))
            .map(|o| o.arg())
            .collect();
        let n = vals.len();
        vals.sort_unstable();
        vals.dedup();
        assert_eq!(vals.len(), n);
    }

    #[test]
    fn locked_model_histories_pass() {
        for seed in 0..50 {
            let cfg = StressConfig { seed, ..Default::default() };
            let (h, _) = record(&LockedModel::new(), &cfg);
            assert_eq!(h.len(), 48);
            assert!(check(&h).is_pass(), "seed {seed}:\n{}", h.dump());
        }
    }

    #[test]
    fn elimination_histories_pass() {
        let mut eliminated = 0;
        for seed in 0..40 {
            let cfg = StressConfig { seed, ..Default::default() };
            let (h, c) = elim_history(&cfg);
            eliminated += c.eliminated();
            assert!(check(&h).is_pass(), "seed {seed}:\n{}", h.dump());
        }
        assert!(eliminated > 0, "no operation was eliminated");
    }
}
