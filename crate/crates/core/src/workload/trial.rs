use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Barrier;
use std::time::{Duration, Instant};

use rand::rngs::SmallRng;
use rand::{Rng, SeedableRng};

use super::zipf::{KeyDist, ZipfError};
use crate::pmem::{recover, PElimTree, POccTree, Simulated};
use crate::stats::{self, OpCounters};
use crate::tree::{AbTree, Dictionary, Durability, ElimPolicy, ElimTree, OccTree};

pub const CSV_HEADER: &str = "ds,keys,update_pct,zipf,threads,seconds,seed,total_ops,ops_per_us,validation";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Occ,
    Elim,
    POcc,
    PElim,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Occ, Variant::Elim, Variant::POcc, Variant::PElim];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Occ => "occ",
            Variant::Elim => "elim",
            Variant::POcc => "p-occ",
            Variant::PElim => "p-elim",
        }
    }

    pub fn is_persistent(self) -> bool {
        matches!(self, Variant::POcc | Variant::PElim)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, thiserror::Error)]
#[error("unknown data structure {0:?}; expected occ, elim, p-occ or p-elim")]
pub struct UnknownVariant(String);

impl FromStr for Variant {
    type Err = UnknownVariant;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| UnknownVariant(s.to_string()))
    }
}

/// Thread placement policy.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Pinning {
    #[default]
    None,
    /// Worker i runs on CPU i, wrapping around the available CPUs.
    FillSocket,
}

impl FromStr for Pinning {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Pinning::None),
            "fill-socket" => Ok(Pinning::FillSocket),
            _ => Err(format!("unknown pinning policy {s:?}; expected none or fill-socket")),
        }
    }
}

#[derive(Clone, Debug)]
pub struct WorkloadConfig {
    pub variant: Variant,
    /// Keys are drawn from `1..=keys`.
    pub keys: u64,
    /// Percentage of operations that are updates, split evenly between
    /// inserts and deletes.
    pub update_pct: f64,
    pub zipf: f64,
    pub threads: usize,
    pub duration: Duration,
    pub seed: u64,
    pub pinning: Pinning,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Occ,
            keys: 10_000,
            update_pct: 100.0,
            zipf: 0.0,
            threads: 1,
            duration: Duration::from_secs(10),
            seed: 1,
            pinning: Pinning::None,
        }
    }
}

/// Sum-of-keys comparison: prefill sum plus every thread's
/// inserted-minus-deleted key sum against the keys present in the tree.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SumCheck {
    pub expected: i128,
    pub actual: u128,
}

impl SumCheck {
    pub fn passed(&self) -> bool {
        self.expected >= 0 && self.expected as u128 == self.actual
    }
}

impl fmt::Display for SumCheck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.passed() {
            write!(f, "PASS")
        } else {
            write!(f, "FAIL(expected {} found {})", self.expected, self.actual)
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrialResult {
    pub variant: Variant,
    pub total_ops: u64,
    pub elapsed: Duration,
    pub ops_per_us: f64,
    pub prefill_sum: u128,
    pub ledgers: Vec<i128>,
    pub sum: SumCheck,
    /// Problems reported by the strict structure check after the trial.
    pub structure: Option<String>,
    pub counters: OpCounters,
    /// For durable variants: the same checks on the tree recovered from a
    /// crash taken after all workers stopped.
    pub recovered: Option<Result<SumCheck, String>>,
}

impl TrialResult {
    pub fn passed(&self) -> bool {
        self.sum.passed()
            && self.structure.is_none()
            && match &self.recovered {
                None => true,
                Some(Ok(s)) => s.passed(),
                Some(Err(_)) => false,
            }
    }

    pub fn verdict(&self) -> String {
        if self.passed() {
            return "PASS".into();
        }
        let mut why = vec![];
        if !self.sum.passed() {
            why.push(format!("sum {}", self.sum));
        }
        if let Some(s) = &self.structure {
            why.push(format!("structure {s}"));
        }
        match &self.recovered {
            Some(Ok(s)) if !s.passed() => why.push(format!("recovered sum {s}")),
            Some(Err(e)) => why.push(format!("recovery {e}")),
            _ => {}
        }
        format!("FAIL: {}", why.join("; "))
    }

    pub fn csv_row(&self, cfg: &WorkloadConfig) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{:.4},{}",
            self.variant,
            cfg.keys,
            cfg.update_pct,
            cfg.zipf,
            cfg.threads,
            cfg.duration.as_secs_f64(),
            cfg.seed,
            self.total_ops,
            self.ops_per_us,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

/// Inserts uniformly random keys until exactly half the key range is
/// present. Returns the sum of the inserted keys.
pub fn prefill<D: Dictionary + ?Sized>(tree: &D, keys: u64, seed: u64) -> u128 {
    let mut rng = SmallRng::seed_from_u64(seed);
    let mut sum = 0u128;
    let mut left = keys / 2;
    while left > 0 {
        let k = rng.gen_range(1..=keys);
        if tree.insert(k, k).is_none() {
            sum += k as u128;
            left -= 1;
        }
    }
    sum
}

pub fn validate_sum(tree_sum: u128, prefill_sum: u128, ledgers: &[i128]) -> SumCheck {
    SumCheck {
        expected: prefill_sum as i128 + ledgers.iter().sum::<i128>(),
        actual: tree_sum,
    }
}

fn thread_seed(seed: u64, tid: usize) -> u64 {
    seed ^ (tid as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

#[cfg(target_os = "linux")]
fn pin_current(cpu: usize) {
    let cpus = std::thread::available_parallelism().map_or(1, |n| n.get());
    // SAFETY: the set is a plain bitmask owned by this frame.
    unsafe {
        let mut set: libc::cpu_set_t = std::mem::zeroed();
        libc::CPU_SET(cpu % cpus, &mut set);
        libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &set);
    }
}

#[cfg(not(target_os = "linux"))]
fn pin_current(_cpu: usize) {}

/// Runs the timed phase on an already prefilled tree.
fn drive<D: Durability, E: ElimPolicy>(
    tree: &AbTree<D, E>,
    cfg: &WorkloadConfig,
    dist: &KeyDist,
) -> (Vec<u64>, Vec<i128>, OpCounters, Duration) {
    let stop = AtomicBool::new(false);
    let barrier = Barrier::new(cfg.threads + 1);
    let update = (cfg.update_pct / 100.0).clamp(0.0, 1.0);
    std::thread::scope(|s| {
        let workers: Vec<_> = (0..cfg.threads)
            .map(|tid| {
                let (stop, barrier) = (&stop, &barrier);
                s.spawn(move || {
                    if cfg.pinning == Pinning::FillSocket {
                        pin_current(tid);
                    }
                    let mut rng = SmallRng::seed_from_u64(thread_seed(cfg.seed, tid));
                    let mut ops = 0u64;
                    let mut ledger = 0i128;
                    barrier.wait();
                    stats::take();
                    while !stop.load(Ordering::Relaxed) {
                        let key = dist.sample(&mut rng);
                        let x: f64 = rng.gen();
                        if x < update / 2.0 {
                            if tree.insert(key, key).is_none() {
                                ledger += key as i128;
                            }
                        } else if x < update {
                            if tree.delete(key).is_some() {
                                ledger -= key as i128;
                            }
                        } else {
                            std::hint::black_box(tree.find(key));
                        }
                        ops += 1;
                    }
                    (ops, ledger, stats::take())
                })
            })
            .collect();
        barrier.wait();
        let start = Instant::now();
        std::thread::sleep(cfg.duration);
        stop.store(true, Ordering::Relaxed);
        let mut ops = Vec::new();
        let mut ledgers = Vec::new();
        let mut counters = OpCounters::default();
        for w in workers {
            let (o, l, c) = w.join().expect("worker panicked");
            ops.push(o);
            ledgers.push(l);
            counters.merge(&c);
        }
        (ops, ledgers, counters, start.elapsed())
    })
}

fn trial_on<D: Durability, E: ElimPolicy>(tree: &AbTree<D, E>, cfg: &WorkloadConfig) -> Result<TrialResult, ZipfError> {
    let dist = KeyDist::new(cfg.keys, cfg.zipf)?;
    let prefill_sum = prefill(tree, cfg.keys, cfg.seed);
    let (ops, ledgers, counters, elapsed) = drive(tree, cfg, &dist);
    let total_ops: u64 = ops.iter().sum();
    let report = tree.validate_structure();
    Ok(TrialResult {
        variant: cfg.variant,
        total_ops,
        elapsed,
        ops_per_us: total_ops as f64 / (elapsed.as_secs_f64() * 1e6),
        prefill_sum,
        sum: validate_sum(tree.key_sum(), prefill_sum, &ledgers),
        ledgers,
        structure: (!report.is_clean()).then(|| report.to_string()),
        counters,
        recovered: None,
    })
}

/// Crashes a quiescent durable tree and checks the recovered one.
fn crash_check<E: ElimPolicy>(tree: &AbTree<Simulated, E>, r: &TrialResult) -> Result<SumCheck, String> {
    let image = tree.durability().shadow().crash_image();
    let rec = recover::<E>(&image.persisted, tree.params()).map_err(|e| e.to_string())?;
    let report = rec.validate_structure();
    if !report.is_clean() {
        return Err(format!("recovered structure {report}"));
    }
    Ok(validate_sum(rec.key_sum(), r.prefill_sum, &r.ledgers))
}

/// One trial on a fresh tree: prefill, run for the configured duration,
/// then validate. Durable variants are also crashed and recovered.
pub fn run_trial(cfg: &WorkloadConfig) -> Result<TrialResult, ZipfError> {
    match cfg.variant {
        Variant::Occ => trial_on(&OccTree::new(), cfg),
        Variant::Elim => trial_on(&ElimTree::new(), cfg),
        Variant::POcc => {
            let tree = POccTree::new();
            let mut r = trial_on(&tree, cfg)?;
            r.recovered = Some(crash_check(&tree, &r));
            Ok(r)
        }
        Variant::PElim => {
            let tree = PElimTree::new();
            let mut r = trial_on(&tree, cfg)?;
            r.recovered = Some(crash_check(&tree, &r));
            Ok(r)
        }
    }
}

/// `runs` independent trials; run i uses seed `cfg.seed + i`.
pub fn run_trials(cfg: &WorkloadConfig, runs: usize) -> Result<Vec<TrialResult>, ZipfError> {
    (0..runs as u64)
        .map(|i| {
            run_trial(&WorkloadConfig {
                seed: cfg.seed.wrapping_add(i),
                ..cfg.clone()
            })
        })
        .collect()
}

pub fn mean_ops_per_us(results: &[TrialResult]) -> f64 {
    results.iter().map(|r| r.ops_per_us).sum::<f64>() / results.len().max(1) as f64
}
