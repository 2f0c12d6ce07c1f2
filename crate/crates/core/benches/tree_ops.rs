use abtree::pmem::{PElimTree, POccTree};
use abtree::{Dictionary, ElimTree, OccTree};
use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::rngs::SmallRng;
use rand::{Rng, SeedableRng};

const KEYS: u64 = 100_000;

fn filled<D: Dictionary>(d: D) -> D {
    for k in (1..=KEYS).step_by(2) {
        d.insert(k, k);
    }
    d
}

fn mixed<D: Dictionary>(c: &mut Criterion, name: &str, d: D) {
    let d = filled(d);
    let mut rng = SmallRng::seed_from_u64(9);
    c.bench_function(name, |b| {
        b.iter_batched(
            || (rng.gen_range(1..=KEYS), rng.gen_range(0..3u8)),
            |(k, op)| match op {
                0 => d.insert(k, k),
                1 => d.delete(k),
                _ => d.find(k),
            },
            BatchSize::SmallInput,
        )
    });
}

fn single_thread_ops(c: &mut Criterion) {
    mixed(c, "occ", OccTree::new());
    mixed(c, "elim", ElimTree::new());
    mixed(c, "p-occ", POccTree::new());
    mixed(c, "p-elim", PElimTree::new());
}

criterion_group!(benches, single_thread_ops);
criterion_main!(benches);
