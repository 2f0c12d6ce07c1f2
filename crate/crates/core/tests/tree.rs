use std::collections::BTreeMap;

use abtree::lincheck::{step, Op};
use abtree::pmem::{PElimTree, POccTree, Simulated};
use abtree::reclaim::Disposal;
use abtree::tree::{AbTree, Durability, ElimPolicy, Layout, NoElim, Publishing, ViolationKind, Volatile};
use abtree::{ElimTree, OccTree, Params};
use proptest::prelude::*;
use rand::rngs::SmallRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

const A: u64 = 0xA;
const B: u64 = 0xB;
const C: u64 = 0xC;
const D: u64 = 0xD;
const E: u64 = 0xE;
const F: u64 = 0xF;

fn small() -> Params {
    Params::new(2, 4).unwrap()
}

fn leaf(entries: &[(u64, u64)]) -> Layout {
    Layout::Leaf(entries.to_vec())
}

#[test]
fn five_step_walkthrough() {
    let start = Layout::internal(
        vec![5, 8],
        vec![
            leaf(&[(1, A), (2, B), (4, D)]),
            leaf(&[(6, C), (7, E)]),
            leaf(&[(10, A), (12, B)]),
        ],
    );
    let t = OccTree::from_layout(Volatile, small(), Disposal::Free, &start);
    assert!(t.validate_structure().is_clean());

    // (1) + (2): the delete underflows the middle leaf, which merges with
    // its left sibling; the root keeps two children.
    assert_eq!(t.delete(6), Some(C));
    let after_merge = Layout::internal(
        vec![8],
        vec![leaf(&[(1, A), (2, B), (4, D), (7, E)]), leaf(&[(10, A), (12, B)])],
    );
    assert_eq!(t.layout().normalized(), after_merge.normalized());
    assert!(t.validate_structure().is_clean());

    // (3): simple insert into a free slot.
    assert_eq!(t.insert(9, E), None);
    assert_eq!(t.find(9), Some(E));
    assert_eq!(t.layout().height(), after_merge.height());

    // (4) + (5): the full leaf splits under a tagged node, which is then
    // absorbed into a new root.
    assert_eq!(t.insert(5, F), None);
    let end = Layout::internal(
        vec![4, 8],
        vec![
            leaf(&[(1, A), (2, B)]),
            leaf(&[(4, D), (5, F), (7, E)]),
            leaf(&[(9, E), (10, A), (12, B)]),
        ],
    );
    assert_eq!(t.layout().normalized(), end.normalized());
    let report = t.validate_structure();
    assert!(report.is_clean(), "{report}");
    assert_eq!(report.tagged, 0);
}

#[test]
fn empty_tree() {
    let t = OccTree::new();
    assert!(t.validate_structure().is_clean());
    assert_eq!(t.find(42), None);
    assert_eq!(t.delete(1), None);
    assert!(t.is_empty());
}

#[test]
fn duplicate_insert_returns_existing_value() {
    let t = ElimTree::new();
    assert_eq!(t.insert(7, 70), None);
    assert_eq!(t.insert(7, 71), Some(70));
    assert_eq!(t.len(), 1);
    assert_eq!(t.find(7), Some(70));
}

#[test]
fn deleting_absent_key_changes_nothing() {
    let mut rng = SmallRng::seed_from_u64(5);
    let t = OccTree::with_params(small());
    for _ in 0..1000 {
        let k = rng.gen_range(1..100_000u64) * 2;
        t.insert(k, k);
    }
    let before = t.layout();
    assert_eq!(t.delete(7), None);
    assert_eq!(t.layout(), before);
    assert!(t.validate_structure().is_clean());
}

#[test]
fn every_key_lives_in_exactly_one_leaf() {
    let mut rng = SmallRng::seed_from_u64(6);
    let t = OccTree::with_params(small());
    let mut oracle = BTreeMap::new();
    for _ in 0..1000 {
        let k = rng.gen_range(1..5000u64);
        t.insert(k, k + 1);
        oracle.entry(k).or_insert(k + 1);
    }
    let mut keys = t.layout().keys();
    keys.sort_unstable();
    assert_eq!(keys, oracle.keys().copied().collect::<Vec<_>>());
    for (&k, &v) in &oracle {
        assert_eq!(t.find(k), Some(v));
    }
}

#[test]
fn ascending_inserts_leave_no_tagged_nodes() {
    let t = OccTree::with_params(small());
    for k in 1..=500 {
        t.insert(k, k);
        let r = t.validate_structure();
        assert!(r.is_clean(), "after {k}: {r}");
        assert_eq!(r.tagged, 0);
    }
    assert!(t.layout().height() >= 4);
}

#[test]
fn drain_ends_in_one_leaf() {
    let mut rng = SmallRng::seed_from_u64(7);
    let t = OccTree::with_params(small());
    let mut keys: Vec<u64> = (1..=1000).collect();
    keys.shuffle(&mut rng);
    for &k in &keys {
        t.insert(k, k);
    }
    keys.shuffle(&mut rng);
    for (i, &k) in keys.iter().enumerate() {
        assert_eq!(t.delete(k), Some(k));
        if i % 50 == 0 {
            let r = t.validate_structure();
            assert!(r.is_clean(), "after {i} deletes: {r}");
        }
    }
    assert!(matches!(t.layout(), Layout::Leaf(ref e) if e.is_empty()));
    assert!(t.validate_structure().is_clean());
}

#[test]
fn corrupted_routing_key_is_flagged() {
    // 9 sits left of the routing key 8.
    let bad = Layout::internal(
        vec![5, 8],
        vec![leaf(&[(1, 1), (2, 2)]), leaf(&[(6, 6), (9, 9)]), leaf(&[(10, 10), (12, 12)])],
    );
    let t = OccTree::from_layout(Volatile, small(), Disposal::Free, &bad);
    let r = t.validate_structure();
    assert!(r.has(|v| matches!(v, ViolationKind::KeyOutOfRange { key: 9, .. })), "{r}");

    let unsorted = Layout::internal(vec![8, 5], vec![leaf(&[(1, 1)]), leaf(&[(6, 6)]), leaf(&[(10, 10)])]);
    let t = OccTree::from_layout(Volatile, small(), Disposal::Free, &unsorted);
    assert!(t.validate_structure().has(|v| matches!(v, ViolationKind::RoutingKeysUnsorted)));
}

fn replay<Dur: Durability, El: ElimPolicy>(t: &AbTree<Dur, El>, ops: &[(u8, u64)]) -> Result<(), TestCaseError> {
    let mut oracle = BTreeMap::new();
    for &(kind, key) in ops {
        let op = match kind {
            0 => Op::Insert(key, key * 7 + 1),
            1 => Op::Delete(key),
            _ => Op::Find(key),
        };
        prop_assert_eq!(op.apply(t), step(&mut oracle, op), "{:?}", op);
    }
    prop_assert_eq!(t.entries(), oracle.into_iter().collect::<Vec<_>>());
    let r = t.validate_structure();
    prop_assert!(r.is_clean(), "{}", r);
    Ok(())
}

fn ops_strategy() -> impl Strategy<Value = Vec<(u8, u64)>> {
    prop::collection::vec((0u8..3, 1u64..=64), 0..1500)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn occ_matches_sorted_map(ops in ops_strategy()) {
        replay(&OccTree::with_params(small()), &ops)?;
        replay(&OccTree::new(), &ops)?;
    }

    #[test]
    fn elim_matches_sorted_map(ops in ops_strategy()) {
        replay(&ElimTree::with_params(small()), &ops)?;
    }

    #[test]
    fn durable_variants_match_sorted_map(ops in ops_strategy()) {
        replay(&POccTree::with_params(small()), &ops)?;
        replay(&PElimTree::with_params(small()), &ops)?;
        let off = AbTree::<Simulated, Publishing>::with_config(Simulated::disabled(), small(), Disposal::Free);
        replay(&off, &ops)?;
    }
}

fn concurrent_rounds<Dur: Durability, El: ElimPolicy>(t: &AbTree<Dur, El>, threads: usize, keys: u64, rounds: usize) {
    let mut expected: i128 = t.key_sum() as i128;
    for round in 0..rounds {
        let delta: i128 = std::thread::scope(|s| {
            let hs: Vec<_> = (0..threads)
                .map(|tid| {
                    s.spawn(move || {
                        let mut rng = SmallRng::seed_from_u64((round * 64 + tid) as u64);
                        let mut d = 0i128;
                        for _ in 0..3000 {
                            let k = rng.gen_range(1..=keys);
                            match rng.gen_range(0..3) {
                                0 => {
                                    if t.insert(k, k).is_none() {
                                        d += k as i128
                                    }
                                }
                                1 => {
                                    if t.delete(k).is_some() {
                                        d -= k as i128
                                    }
                                }
                                _ => {
                                    if let Some(v) = t.find(k) {
                                        assert_eq!(v, k);
                                    }
                                }
                            }
                        }
                        d
                    })
                })
                .collect();
            hs.into_iter().map(|h| h.join().unwrap()).sum()
        });
        expected += delta;
        let r = t.validate_structure();
        assert!(r.is_clean(), "round {round}: {r}");
        assert_eq!(r.key_sum as i128, expected);
    }
}

#[test]
fn concurrent_updates_keep_structure_occ() {
    concurrent_rounds(&OccTree::with_params(small()), 8, 300, 6);
}

#[test]
fn concurrent_updates_keep_structure_elim() {
    let t = ElimTree::with_params(small());
    t.set_yield_injection(true);
    concurrent_rounds(&t, 8, 40, 4);
}

#[test]
fn concurrent_updates_keep_structure_durable() {
    concurrent_rounds(&PElimTree::with_params(small()), 4, 200, 3);
}

#[test]
fn reclaimed_nodes_are_never_read() {
    // Poisoned instead of freed: a search reaching a reclaimed node trips
    // the poison assertions in the traversal.
    let t = AbTree::<Volatile, NoElim>::with_config(Volatile, small(), Disposal::Poison);
    concurrent_rounds(&t, 8, 64, 4);
    assert!(t.epoch().stats().reclaimed > 0);
}

#[test]
fn finds_see_only_values_paired_with_their_key() {
    let t = OccTree::with_params(small());
    for k in 10..20 {
        t.insert(k, k);
    }
    let stop = std::sync::atomic::AtomicBool::new(false);
    std::thread::scope(|s| {
        for _ in 0..3 {
            s.spawn(|| {
                while !stop.load(std::sync::atomic::Ordering::Relaxed) {
                    assert!(matches!(t.find(1), None | Some(100)));
                    assert!(matches!(t.find(2), None | Some(200)));
                }
            });
        }
        for _ in 0..20_000 {
            t.insert(1, 100);
            t.delete(1);
            t.insert(2, 200);
            t.delete(2);
        }
        stop.store(true, std::sync::atomic::Ordering::Relaxed);
    });
}
