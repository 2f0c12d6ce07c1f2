//! Exhaustive linearizability search over small histories.
//!
//! Each era (the span between two crashes) is searched separately: every
//! order of its operations consistent with real-time precedence is tried on
//! a sequential dictionary, memoizing (completed set, dictionary state)
//! pairs. Operations interrupted by a crash may be linearized before it or
//! dropped, unless marked as kept. The states an era can end in seed the
//! next era.

use std::collections::{BTreeMap, HashSet};

use parking_lot::Mutex;
use rand::Rng;

use super::history::{History, HistoryEvent, Op, Response};
use crate::par::{self, ExecMode};
use crate::tree::Dictionary;

/// Sequential dictionary state.
pub type Model = BTreeMap<u64, u64>;

/// Applies `op` to the sequential dictionary.
pub fn step(model: &mut Model, op: Op) -> Option<u64> {
    match op {
        Op::Insert(k, v) => match model.get(&k) {
            Some(&x) => Some(x),
            None => {
                model.insert(k, v);
                None
            }
        },
        Op::Delete(k) => model.remove(&k),
        Op::Find(k) => model.get(&k).copied(),
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    /// `minimal` is a subset of the history that still admits no valid
    /// linearization and loses that property if any event is removed.
    Fail { minimal: History },
}

impl Verdict {
    pub fn is_pass(&self) -> bool {
        matches!(self, Verdict::Pass)
    }
}

pub const MAX_ERA_OPS: usize = 64;

pub fn check(history: &History) -> Verdict {
    check_from(&Model::new(), history)
}

/// Checks `history` against a dictionary that starts out as `initial`.
pub fn check_from(initial: &Model, history: &History) -> Verdict {
    if explains(initial, &history.events) {
        Verdict::Pass
    } else {
        Verdict::Fail {
            minimal: minimize(initial, history),
        }
    }
}

/// Checks many histories, in parallel when enabled.
pub fn check_batch(histories: &[History], mode: ExecMode) -> Vec<Verdict> {
    par::map(mode, histories, check)
}

fn explains(initial: &Model, events: &[HistoryEvent]) -> bool {
    let eras = events.iter().map(|e| e.era).max().map_or(1, |m| m + 1);
    let mut states: HashSet<Model> = HashSet::from([initial.clone()]);
    for era in 0..eras {
        let ops: Vec<&HistoryEvent> = events.iter().filter(|e| e.era == era).collect();
        assert!(ops.len() <= MAX_ERA_OPS, "era with {} operations is too large to check", ops.len());
        let last = era + 1 == eras;
        let mut next = HashSet::new();
        for s in &states {
            let mut search = EraSearch::new(&ops, last);
            search.run(s.clone(), &mut next);
            if last && !next.is_empty() {
                return true;
            }
        }
        if next.is_empty() {
            return false;
        }
        states = next;
    }
    true
}

struct EraSearch<'a> {
    ops: &'a [&'a HistoryEvent],
    preds: Vec<u64>,
    required: u64,
    stop_at_first: bool,
    seen: HashSet<(u64, Model)>,
}

impl<'a> EraSearch<'a> {
    fn new(ops: &'a [&'a HistoryEvent], stop_at_first: bool) -> Self {
        let preds = ops
            .iter()
            .map(|o| {
                ops.iter().enumerate().fold(0u64, |m, (j, p)| match p.resp_ts {
                    Some(r) if r < o.inv_ts => m | 1 << j,
                    _ => m,
                })
            })
            .collect();
        let required = ops.iter().enumerate().fold(0u64, |m, (j, o)| match o.resp {
            Response::Returned(_) | Response::Pending { keep: true } => m | 1 << j,
            Response::Pending { keep: false } => m,
        });
        Self {
            ops,
            preds,
            required,
            stop_at_first,
            seen: HashSet::new(),
        }
    }

    fn run(&mut self, start: Model, out: &mut HashSet<Model>) {
        self.dfs(0, start, out);
    }

    /// Returns true once the search may stop.
    fn dfs(&mut self, done: u64, model: Model, out: &mut HashSet<Model>) -> bool {
        if !self.seen.insert((done, model.clone())) {
            return false;
        }
        if done & self.required == self.required {
            out.insert(model.clone());
            if self.stop_at_first {
                return true;
            }
        }
        for i in 0..self.ops.len() {
            let bit = 1u64 << i;
            if done & bit != 0 || self.preds[i] & !done != 0 {
                continue;
            }
            let ev = self.ops[i];
            let mut m = model.clone();
            let r = step(&mut m, ev.op);
            if let Response::Returned(expected) = ev.resp {
                if r != expected {
                    continue;
                }
            }
            if self.dfs(done | bit, m, out) {
                return true;
            }
        }
        false
    }
}

/// Greedily drops events while the remainder still has no linearization.
fn minimize(initial: &Model, history: &History) -> History {
    let mut events = history.events.clone();
    let mut i = events.len();
    while i > 0 {
        i -= 1;
        let mut trial = events.clone();
        trial.remove(i);
        if !explains(initial, &trial) {
            events = trial;
        }
    }
    History::new(events)
}

/// Replaces the response of one randomly chosen completed operation by a
/// different plausible value: absent, a value some insert in the history
/// carries, or a value no insert carries.
pub fn mutate<R: Rng>(history: &History, rng: &mut R) -> Option<History> {
    let done: Vec<usize> = (0..history.len()).filter(|&i| history.events[i].completed()).collect();
    if done.is_empty() {
        return None;
    }
    let at = done[rng.gen_range(0..done.len())];
    let Response::Returned(orig) = history.events[at].resp else {
        unreachable!()
    };
    let args: Vec<u64> = history
        .events
        .iter()
        .filter(|&e| matches!(e.op, Op::Insert(..))).map(|e| e.op.arg())
        .collect();
    let fresh = args.iter().max().copied().unwrap_or(0) + 1 + rng.gen_range(0..1000);
    let mut candidates: Vec<Option<u64>> = vec![None, Some(fresh)];
    candidates.extend(args.iter().map(|&a| Some(a)));
    candidates.retain(|&c| c != orig);
    candidates.sort_unstable();
    candidates.dedup();
    let new = candidates[rng.gen_range(0..candidates.len())];
    let mut out = history.clone();
    out.events[at].resp = Response::Returned(new);
    Some(out)
}

/// The sequential dictionary behind one global lock; trivially
/// linearizable. Used to validate the checker.
#[derive(Debug, Default)]
pub struct LockedModel {
    inner: Mutex<Model>,
}

impl LockedModel {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Dictionary for LockedModel {
    fn insert(&self, key: u64, val: u64) -> Option<u64> {
        step(&mut self.inner.lock(), Op::Insert(key, val))
    }

    fn delete(&self, key: u64) -> Option<u64> {
        step(&mut self.inner.lock(), Op::Delete(key))
    }

    fn find(&self, key: u64) -> Option<u64> {
        step(&mut self.inner.lock(), Op::Find(key))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn h(text: &str) -> History {
        text.parse().unwrap()
    }

    #[test]
    fn sequential_history_passes() {
        let hist = h("0 insert 1 10 1 2 -\n0 find 1 0 3 4 10\n0 delete 1 0 5 6 10\n0 find 1 0 7 8 -\n");
        assert!(check(&hist).is_pass());
    }

    #[test]
    fn value_never_inserted_fails() {
        let hist = h("0 insert 1 10 1 2 -\n1 find 1 0 3 4 99\n");
        let Verdict::Fail { minimal } = check(&hist) else {
            panic!("accepted an impossible find")
        };
        assert_eq!(minimal.len(), 1);
        assert_eq!(minimal.events[0].op, Op::Find(1));
    }

    #[test]
    fn overlapping_ops_may_reorder() {
        // The find overlaps the insert, so either order is allowed.
        assert!(check(&h("0 insert 1 10 1 4 -\n1 find 1 0 2 3 -\n")).is_pass());
        assert!(check(&h("0 insert 1 10 1 4 -\n1 find 1 0 2 3 10\n")).is_pass());
        // Without overlap the find must see the insert.
        assert!(!check(&h("0 insert 1 10 1 2 -\n1 find 1 0 3 4 -\n")).is_pass());
    }

    #[test]
    fn eliminated_delete_returning_a_value_fails() {
        // A delete overlapping an insert may linearize before it and return
        // nothing, but it cannot return the value being inserted while a
        // later find still sees the key.
        let ok = h("0 insert 1 10 1 4 -\n1 delete 1 0 2 3 -\n0 find 1 0 5 6 10\n");
        assert!(check(&ok).is_pass());
        let bad = h("0 insert 1 10 1 4 -\n1 delete 1 0 2 3 10\n0 find 1 0 5 6 10\n");
        assert!(!check(&bad).is_pass());
    }

    #[test]
    fn insert_returns_present_value() {
        assert!(check(&h("0 insert 1 10 1 2 -\n0 insert 1 20 3 4 10\n")).is_pass());
        assert!(!check(&h("0 insert 1 10 1 2 -\n0 insert 1 20 3 4 -\n")).is_pass());
    }

    #[test]
    fn interrupted_ops_may_be_dropped_or_kept() {
        let dropped = h("0 insert 1 10 1 - drop\ncrash\n1 find 1 0 5 6 -\n");
        let kept = h("0 insert 1 10 1 - drop\ncrash\n1 find 1 0 5 6 10\n");
        assert!(check(&dropped).is_pass());
        assert!(check(&kept).is_pass());
    }

    #[test]
    fn durable_interrupted_op_must_be_kept() {
        let lost = h("0 insert 1 10 1 - keep\ncrash\n1 find 1 0 5 6 -\n");
        assert!(!check(&lost).is_pass());
        let kept = h("0 insert 1 10 1 - keep\ncrash\n1 find 1 0 5 6 10\n");
        assert!(check(&kept).is_pass());
    }

    #[test]
    fn completed_ops_survive_crashes() {
        let lost = h("0 insert 1 10 1 2 -\ncrash\n0 find 1 0 5 6 -\n");
        assert!(!check(&lost).is_pass());
    }

    #[test]
    fn initial_state_is_respected() {
        let hist = h("0 find 7 0 1 2 70\n");
        assert!(!check(&hist).is_pass());
        assert!(check_from(&Model::from([(7, 70)]), &hist).is_pass());
    }

    #[test]
    fn mutation_changes_exactly_one_response() {
        use rand::SeedableRng;
        let hist = h("0 insert 1 10 1 2 -\n0 find 1 0 3 4 10\n");
        let mut rng = rand::rngs::SmallRng::seed_from_u64(3);
        for _ in 0..50 {
            let m = mutate(&hist, &mut rng).unwrap();
            let diffs = m.events.iter().zip(&hist.events).filter(|(a, b)| a != b).count();
            assert_eq!(diffs, 1);
        }
    }
}
