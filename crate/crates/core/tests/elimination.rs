use abtree::lincheck::{check, elim_history, StressConfig};
use abtree::ElimTree;

#[test]
fn racing_inserts_of_one_key_modify_once() {
    for round in 0..200u64 {
        let t = ElimTree::new();
        t.set_yield_injection(true);
        let (a, b) = std::thread::scope(|s| {
            let a = s.spawn(|| t.insert(7, 100 + round));
            let b = s.spawn(|| t.insert(7, 200 + round));
            (a.join().unwrap(), b.join().unwrap())
        });
        let stored = t.find(7).expect("key lost");
        assert_eq!(t.len(), 1);
        match (a, b) {
            (None, Some(v)) => assert_eq!((v, stored), (100 + round, 100 + round)),
            (Some(v), None) => assert_eq!((v, stored), (200 + round, 200 + round)),
            other => panic!("round {round}: {other:?}"),
        }
    }
}

#[test]
fn hot_key_histories_are_linearizable() {
    let mut eliminated = 0;
    for seed in 100..160 {
        let cfg = StressConfig {
            seed,
            keys: 1,
            find_ratio: 0.1,
            ..StressConfig::default()
        };
        let (h, c) = elim_history(&cfg);
        eliminated += c.eliminated();
        assert!(check(&h).is_pass(), "seed {seed}:\n{}", h.dump());
    }
    assert!(eliminated > 0);
}

#[test]
fn eliminated_deletes_return_nothing() {
    // One hot key: an eliminated delete that reported a value would count a
    // removal that never happened and break this balance.
    let t = ElimTree::new();
    t.set_yield_injection(true);
    let (ins, del, counters) = std::thread::scope(|s| {
        let hs: Vec<_> = (0..4u64)
            .map(|tid| {
                let t = &t;
                s.spawn(move || {
                    abtree::stats::take();
                    let (mut ins, mut del) = (0i64, 0i64);
                    for i in 0..2000u64 {
                        if (i + tid) % 2 == 0 {
                            ins += t.insert(1, tid * 10_000 + i).is_none() as i64;
                        } else {
                            del += t.delete(1).is_some() as i64;
                        }
                    }
                    (ins, del, abtree::stats::take())
                })
            })
            .collect();
        hs.into_iter().map(|h| h.join().unwrap()).fold((0, 0, Default::default()), |(a, b, mut c), (x, y, z)| {
            abtree::stats::OpCounters::merge(&mut c, &z);
            (a + x, b + y, c)
        })
    });
    assert_eq!(ins - del, t.len() as i64);
    let c: abtree::stats::OpCounters = counters;
    assert!(c.eliminated() > 0, "{c:?}");
}
