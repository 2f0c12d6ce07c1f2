use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use abtree::lincheck::{check, check_batch, elim_history, History, StressConfig, Verdict};
use abtree::pmem::{explore_crashes, explore_two_threads, random_script, CrashPlan, VerdictReport};
use abtree::workload::{mean_ops_per_us, run_trials, Pinning, Variant, WorkloadConfig, CSV_HEADER};
use abtree::{ExecMode, Params};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::rngs::SmallRng;
use rand::{Rng, SeedableRng};

#[derive(Parser)]
#[command(name = "abtree", version, about = "Benchmark and check concurrent (a,b)-trees")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Timed mixed workload with sum-of-keys validation.
    Bench(BenchArgs),
    /// Crash every flush and fence of random scripts on the durable tree.
    Explore(ExploreArgs),
    /// Record small elimination histories and check them, or check a
    /// history file.
    Lincheck(LincheckArgs),
}

#[derive(Args)]
struct BenchArgs {
    /// occ, elim, p-occ or p-elim.
    #[arg(long, default_value = "occ")]
    ds: Variant,
    #[arg(long, default_value_t = 10_000)]
    keys: u64,
    #[arg(long, default_value_t = 100.0)]
    update_pct: f64,
    #[arg(long, default_value_t = 0.0)]
    zipf: f64,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[arg(long, default_value_t = 10.0)]
    seconds: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    runs: usize,
    /// none or fill-socket.
    #[arg(long, default_value = "none")]
    pin: Pinning,
    /// Append result rows here, writing the header if the file is new.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct ExploreArgs {
    #[arg(long, default_value_t = 100)]
    scripts: usize,
    /// Operations per script and thread.
    #[arg(long, default_value_t = 5)]
    ops: usize,
    #[arg(long, default_value_t = 30)]
    keys: u64,
    /// 1 for single-threaded scripts, 2 for scheduled pairs.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
    threads: u8,
    #[arg(long, default_value_t = 2)]
    min: usize,
    #[arg(long, default_value_t = 4)]
    max: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Recover crash images one at a time.
    #[arg(long)]
    sequential: bool,
    /// Write every verdict here.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct LincheckArgs {
    /// Check this history file instead of recording new histories.
    #[arg(long)]
    file: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    histories: u64,
    #[arg(long, default_value_t = 4)]
    threads: usize,
    #[arg(long, default_value_t = 12)]
    ops: usize,
    #[arg(long, default_value_t = 3)]
    keys: u64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

fn bench(a: BenchArgs) -> Result<bool> {
    if a.seconds.is_nan() || a.seconds <= 0.0 {
        bail!("--seconds must be positive");
    }
    if a.threads == 0 || a.runs == 0 {
        bail!("--threads and --runs must be at least 1");
    }
    let cfg = WorkloadConfig {
        variant: a.ds,
        keys: a.keys,
        update_pct: a.update_pct,
        zipf: a.zipf,
        threads: a.threads,
        duration: Duration::from_secs_f64(a.seconds),
        seed: a.seed,
        pinning: a.pin,
    };
    let results = run_trials(&cfg, a.runs)?;
    let rows: Vec<String> = results
        .iter()
        .enumerate()
        .map(|(i, r)| {
            r.csv_row(&WorkloadConfig {
                seed: cfg.seed.wrapping_add(i as u64),
                ..cfg.clone()
            })
        })
        .collect();
    println!("{CSV_HEADER}");
    for row in &rows {
        println!("{row}");
    }
    if let Some(path) = &a.csv {
        let fresh = fs::metadata(path).map_or(true, |m| m.len() == 0);
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .with_context(|| format!("opening {}", path.display()))?;
        if fresh {
            writeln!(f, "{CSV_HEADER}")?;
        }
        for row in &rows {
            writeln!(f, "{row}")?;
        }
    }
    eprintln!("mean {:.4} ops/us over {} runs", mean_ops_per_us(&results), results.len());
    let mut ok = true;
    for r in results.iter().filter(|r| !r.passed()) {
        eprintln!("validation failed: {}", r.verdict());
        ok = false;
    }
    Ok(ok)
}

fn explore(a: ExploreArgs) -> Result<bool> {
    let params = Params::new(a.min, a.max)?;
    let mut rng = SmallRng::seed_from_u64(a.seed);
    let mut report = VerdictReport::default();
    for i in 0..a.scripts {
        let prefill: Vec<(u64, u64)> = (1..=a.keys).filter(|_| rng.gen_bool(0.5)).map(|k| (k, k)).collect();
        let plan = CrashPlan {
            params,
            prefill,
            seed: a.seed.wrapping_add(i as u64),
            mode: if a.sequential { ExecMode::Sequential } else { ExecMode::Parallel },
            ..CrashPlan::default()
        };
        let r = if a.threads == 1 {
            explore_crashes(&random_script(&mut rng, a.ops, a.keys), &plan)
        } else {
            let x = random_script(&mut rng, a.ops, a.keys);
            let y = random_script(&mut rng, a.ops, a.keys);
            explore_two_threads([&x, &y], &plan, rng.gen())
        };
        for f in r.failures() {
            eprintln!("script {i}: {} {}", f.crash_point, f.detail);
        }
        report.merge(r);
    }
    if let Some(path) = &a.csv {
        fs::write(path, report.to_csv()).with_context(|| format!("writing {}", path.display()))?;
    }
    let failed = report.failures().count();
    println!(
        "{} scripts, {} crash verdicts, {} distinct images, {failed} failing",
        a.scripts,
        report.verdicts.len(),
        report.images
    );
    Ok(failed == 0)
}

fn lincheck(a: LincheckArgs) -> Result<bool> {
    if let Some(path) = &a.file {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let h: History = text.parse()?;
        return Ok(match check(&h) {
            Verdict::Pass => {
                println!("PASS ({} events)", h.len());
                true
            }
            Verdict::Fail { minimal } => {
                println!("FAIL; no linearization explains:\n{}", minimal.dump());
                false
            }
        });
    }
    let mut eliminated = 0;
    let histories: Vec<History> = (0..a.histories)
        .map(|i| {
            let cfg = StressConfig {
                threads: a.threads,
                ops_per_thread: a.ops,
                keys: a.keys,
                seed: a.seed.wrapping_add(i),
                ..StressConfig::default()
            };
            let (h, c) = elim_history(&cfg);
            eliminated += c.eliminated();
            h
        })
        .collect();
    let verdicts = check_batch(&histories, ExecMode::Parallel);
    let mut ok = true;
    for (h, v) in histories.iter().zip(&verdicts) {
        if let Verdict::Fail { minimal } = v {
            println!("FAIL:\n{}minimal:\n{}", h.dump(), minimal.dump());
            ok = false;
        }
    }
    println!(
        "{} of {} histories linearizable, {eliminated} eliminated operations",
        verdicts.iter().filter(|v| v.is_pass()).count(),
        histories.len()
    );
    Ok(ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.cmd {
        Cmd::Bench(a) => bench(a),
        Cmd::Explore(a) => explore(a),
        Cmd::Lincheck(a) => lincheck(a),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
