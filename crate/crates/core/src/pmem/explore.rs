//! Crash-point enumeration for the durable tree.
//!
//! A script runs on a fresh durable tree while every flush and fence takes a
//! snapshot of the simulated memory. Each snapshot is a crash point; for
//! each, every choice of pending (flushed, unfenced) lines to persist is
//! recovered and checked against the dictionary states the crash may
//! legally expose.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use parking_lot::{Condvar, Mutex};
use rand::rngs::SmallRng;
use rand::{Rng, SeedableRng};

use super::durable::POccTree;
use super::recover::recover;
use super::shadow::{CrashImage, PersistEvent, PersistentImage, LINE_WORDS};
use crate::lincheck::{check_from, History, HistoryEvent, Model, Op, Response};
use crate::par::{self, ExecMode};
use crate::tree::{NoElim, Params, Phase};

#[derive(Clone, Debug)]
pub struct CrashPlan {
    pub params: Params,
    /// Inserted and made durable before the script starts.
    pub prefill: Vec<(u64, u64)>,
    /// Crash points with at most this many pending lines get every subset.
    pub exhaustive_pending: usize,
    /// Random subsets tried at crash points with more pending lines, in
    /// addition to none and all.
    pub sampled_subsets: usize,
    pub seed: u64,
    pub mode: ExecMode,
}

impl Default for CrashPlan {
    fn default() -> Self {
        Self {
            params: Params::new(2, 4).expect("valid"),
            prefill: Vec::new(),
            exhaustive_pending: 3,
            sampled_subsets: 16,
            seed: 0,
            mode: ExecMode::Parallel,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CrashVerdict {
    pub crash_point: String,
    /// Script operation in flight, if any.
    pub op: Option<usize>,
    pub phase: Option<Phase>,
    /// Lines in the recovered image.
    pub persisted_lines: usize,
    pub recovered: Option<Vec<(u64, u64)>>,
    pub pass: bool,
    pub detail: String,
}

impl CrashVerdict {
    pub fn recovered_sum(&self) -> Option<u128> {
        self.recovered.as_ref().map(|r| r.iter().map(|&(k, _)| k as u128).sum())
    }

    pub fn contains(&self, key: u64) -> bool {
        self.recovered.as_ref().is_some_and(|r| r.iter().any(|&(k, _)| k == key))
    }
}

#[derive(Clone, Debug, Default)]
pub struct VerdictReport {
    pub verdicts: Vec<CrashVerdict>,
    /// Distinct images recovered.
    pub images: usize,
}

impl VerdictReport {
    pub fn passed(&self) -> bool {
        self.verdicts.iter().all(|v| v.pass)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CrashVerdict> {
        self.verdicts.iter().filter(|v| !v.pass)
    }

    /// `crash_point,persisted_lines,recovered_sum,verdict` lines.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("crash_point,persisted_lines,recovered_sum,verdict\n");
        for v in &self.verdicts {
            let sum = v.recovered_sum().map_or("-".to_string(), |s| s.to_string());
            let verdict = if v.pass { "PASS" } else { "FAIL" };
            let _ = writeln!(out, "{},{},{},{}", v.crash_point, v.persisted_lines, sum, verdict);
        }
        out
    }

    pub fn merge(&mut self, other: VerdictReport) {
        self.verdicts.extend(other.verdicts);
        self.images += other.images;
    }
}

struct Capture {
    tid: usize,
    op: Option<usize>,
    /// Logical time of the capture, for two-thread histories.
    clock: u64,
    event: Option<PersistEvent>,
    phase: Option<Phase>,
    image: CrashImage,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Commit {
    Before,
    Flushed(u64),
    Fenced,
}

#[derive(Clone, Debug)]
struct Recovered {
    entries: Vec<(u64, u64)>,
    lines: usize,
    structure: Result<(), String>,
}

fn point_name(c: &Capture) -> String {
    match (c.op, c.event) {
        (Some(op), Some(ev)) => {
            let phase = c.phase.map_or("none", Phase::label);
            let ev = match ev {
                PersistEvent::Flush { .. } => "flush",
                PersistEvent::Fence => "fence",
            };
            if c.tid == usize::MAX {
                format!("op{op}:{phase}:{ev}")
            } else {
                format!("t{}.op{op}:{phase}:{ev}", c.tid)
            }
        }
        _ => "start".to_string(),
    }
}

fn subsets(pending: usize, plan: &CrashPlan, salt: u64) -> Vec<u64> {
    if pending <= plan.exhaustive_pending {
        return (0..1u64 << pending).collect();
    }
    let all = if pending >= 64 { u64::MAX } else { (1u64 << pending) - 1 };
    let mut rng = SmallRng::seed_from_u64(plan.seed ^ salt.wrapping_mul(0x2545_F491_4F6C_DD1D));
    let mut out = vec![0, all];
    for _ in 0..plan.sampled_subsets {
        out.push(rng.gen::<u64>() & all);
    }
    out.sort_unstable();
    out.dedup();
    out
}

fn chosen(pending: &[(u64, [u64; LINE_WORDS])], mask: u64) -> Vec<(u64, [u64; LINE_WORDS])> {
    pending
        .iter()
        .enumerate()
        .filter(|&(i, _)| mask >> i & 1 == 1)
        .map(|(_, l)| *l)
        .collect()
}

fn recover_all(images: &[PersistentImage], params: Params, mode: ExecMode) -> Vec<Result<Recovered, String>> {
    par::map(mode, images, |img| {
        let tree = recover::<NoElim>(img, params).map_err(|e| e.to_string())?;
        let report = tree.validate_structure();
        Ok(Recovered {
            entries: tree.entries(),
            lines: img.lines.len(),
            structure: if report.is_clean() { Ok(()) } else { Err(report.to_string()) },
        })
    })
}

/// Interns images so that each distinct one is recovered once.
#[derive(Default)]
struct ImageSet {
    index: HashMap<PersistentImage, usize>,
    list: Vec<PersistentImage>,
}

impl ImageSet {
    fn intern(&mut self, img: PersistentImage) -> usize {
        if let Some(&i) = self.index.get(&img) {
            return i;
        }
        let i = self.list.len();
        self.index.insert(img.clone(), i);
        self.list.push(img);
        i
    }
}

fn fresh_tree(plan: &CrashPlan) -> POccTree {
    let tree = POccTree::with_params(plan.params);
    for &(k, v) in &plan.prefill {
        tree.insert(k, v);
    }
    tree
}

/// A random script of `len` operations over keys `1..=keys`: inserts and
/// deletes two in five each, finds one in five. Insert values are distinct.
pub fn random_script<R: Rng + ?Sized>(rng: &mut R, len: usize, keys: u64) -> Vec<Op> {
    (0..len)
        .map(|i| {
            let k = rng.gen_range(1..=keys);
            match rng.gen_range(0..5) {
                0 | 1 => Op::Insert(k, 100 + i as u64),
                2 | 3 => Op::Delete(k),
                _ => Op::Find(k),
            }
        })
        .collect()
}

/// Runs `script` single-threaded and checks every crash point. The
/// recovered dictionary must equal the state before the in-flight
/// operation until its commit store is flushed, the state after it once
/// that flush is fenced, and in between whichever one the persisted commit
/// line implies. Finds that return a value must see it after recovery.
pub fn explore_crashes(script: &[Op], plan: &CrashPlan) -> VerdictReport {
    let tree = fresh_tree(plan);
    let shadow = Arc::clone(tree.durability().shadow());
    let captures: Arc<Mutex<Vec<Capture>>> = Arc::new(Mutex::new(vec![Capture {
        tid: usize::MAX,
        op: None,
        clock: 0,
        event: None,
        phase: None,
        image: shadow.crash_image(),
    }]));
    let current = Arc::new(AtomicUsize::new(0));
    {
        let (captures, current) = (Arc::clone(&captures), Arc::clone(&current));
        shadow.set_observer(Some(Arc::new(move |mem, event, phase| {
            let image = mem.crash_image();
            captures.lock().push(Capture {
                tid: usize::MAX,
                op: Some(current.load(Ordering::Relaxed)),
                clock: 0,
                event: Some(event),
                phase,
                image,
            });
        })));
    }

    let mut model: Model = plan.prefill.iter().copied().collect();
    let mut states = vec![model.clone()];
    let mut report = VerdictReport::default();
    let mut find_checks = Vec::new();
    for (i, &op) in script.iter().enumerate() {
        current.store(i, Ordering::Relaxed);
        shadow.clear_phase();
        let got = op.apply(&tree);
        let want = crate::lincheck::step(&mut model, op);
        if got != want {
            report.verdicts.push(CrashVerdict {
                crash_point: format!("op{i}:response"),
                op: Some(i),
                phase: None,
                persisted_lines: 0,
                recovered: None,
                pass: false,
                detail: format!("{op:?} returned {got:?}, expected {want:?}"),
            });
        }
        if let (Op::Find(k), Some(v)) = (op, got) {
            find_checks.push((i, k, v, shadow.crash_image()));
        }
        states.push(model.clone());
    }
    shadow.set_observer(None);
    let captures = std::mem::take(&mut *captures.lock());

    let mut images = ImageSet::default();
    // (capture, mask, image index, acceptable states)
    let mut jobs: Vec<(usize, u64, usize, Vec<usize>)> = Vec::new();
    let mut commit = Commit::Before;
    let mut last_op = None;
    for (ci, c) in captures.iter().enumerate() {
        if c.op != last_op {
            commit = Commit::Before;
            last_op = c.op;
        }
        match (c.event, c.phase) {
            (Some(PersistEvent::Flush { line }), Some(p)) if p.is_commit() && commit == Commit::Before => {
                commit = Commit::Flushed(line)
            }
            (Some(PersistEvent::Fence), _) if matches!(commit, Commit::Flushed(_)) => commit = Commit::Fenced,
            _ => {}
        }
        let op = c.op.unwrap_or(0);
        let (before, after) = (op, op + 1);
        for mask in subsets(c.image.pending.len(), plan, ci as u64) {
            let lines = chosen(&c.image.pending, mask);
            let ok: Vec<usize> = match (c.op, commit) {
                (None, _) | (_, Commit::Before) => vec![before],
                (_, Commit::Fenced) => vec![after],
                (_, Commit::Flushed(line)) => {
                    if !c.image.pending.iter().any(|&(a, _)| a == line) {
                        vec![before, after]
                    } else if lines.iter().any(|&(a, _)| a == line) {
                        vec![after]
                    } else {
                        vec![before]
                    }
                }
            };
            let img = images.intern(c.image.persisted.overlay(&lines));
            jobs.push((ci, mask, img, ok));
        }
    }
    let find_imgs: Vec<usize> = find_checks
        .iter()
        .map(|(_, _, _, img)| images.intern(img.persisted.clone()))
        .collect();

    let recovered = recover_all(&images.list, plan.params, plan.mode);
    report.images = images.list.len();
    for (ci, mask, img, ok) in jobs {
        let c = &captures[ci];
        let mut name = point_name(c);
        if !c.image.pending.is_empty() {
            let _ = write!(name, "[{mask:0w$b}]", w = c.image.pending.len());
        }
        report.verdicts.push(judge(name, c.op, c.phase, &recovered[img], |entries| {
            ok.iter().any(|&s| states[s].iter().map(|(&k, &v)| (k, v)).eq(entries.iter().copied()))
        }));
    }
    for ((i, k, v, _), img) in find_checks.into_iter().zip(find_imgs) {
        report.verdicts.push(judge(format!("op{i}:find"), Some(i), None, &recovered[img], |entries| {
            entries.contains(&(k, v))
        }));
    }
    report
}

fn judge(
    name: String,
    op: Option<usize>,
    phase: Option<Phase>,
    rec: &Result<Recovered, String>,
    accept: impl Fn(&[(u64, u64)]) -> bool,
) -> CrashVerdict {
    match rec {
        Err(e) => CrashVerdict {
            crash_point: name,
            op,
            phase,
            persisted_lines: 0,
            recovered: None,
            pass: false,
            detail: format!("recovery failed: {e}"),
        },
        Ok(r) => {
            let (pass, detail) = match &r.structure {
                Err(s) => (false, format!("recovered structure: {s}")),
                Ok(()) if accept(&r.entries) => (true, String::new()),
                Ok(()) => (false, format!("unexpected contents {:?}", r.entries)),
            };
            CrashVerdict {
                crash_point: name,
                op,
                phase,
                persisted_lines: r.lines,
                recovered: Some(r.entries.clone()),
                pass,
                detail,
            }
        }
    }
}

/// Turn-taking between two threads. Only the holder runs; it hands over at
/// persistence events and operation boundaries (by a seeded coin) and
/// whenever it would wait for the other thread.
struct Baton {
    state: Mutex<BatonState>,
    cv: Condvar,
}

struct BatonState {
    turn: usize,
    done: [bool; 2],
    rng: SmallRng,
    clock: u64,
}

thread_local! {
    static BATON: RefCell<Option<(Arc<Baton>, usize)>> = const { RefCell::new(None) };
}

impl Baton {
    fn wait_turn(&self, me: usize) {
        let mut st = self.state.lock();
        while st.turn != me {
            self.cv.wait(&mut st);
        }
    }

    fn pass(&self, me: usize, coin: bool) {
        let mut st = self.state.lock();
        if st.done[1 - me] || (coin && !st.rng.gen_bool(0.5)) {
            return;
        }
        st.turn = 1 - me;
        self.cv.notify_all();
        while st.turn != me {
            self.cv.wait(&mut st);
        }
    }

    fn finish(&self, me: usize) {
        let mut st = self.state.lock();
        st.done[me] = true;
        st.turn = 1 - me;
        self.cv.notify_all();
    }

    fn tick(&self) -> u64 {
        let mut st = self.state.lock();
        st.clock += 1;
        st.clock
    }

    fn now(&self) -> u64 {
        self.state.lock().clock
    }
}

fn baton_wait_hook() {
    let b = BATON.with(|b| b.borrow().clone());
    if let Some((b, me)) = b {
        b.pass(me, false);
    }
}

struct Recorded {
    op: Op,
    inv: u64,
    resp: u64,
    ret: Option<u64>,
}

/// Runs two scripts on two threads under a deterministic interleaving
/// chosen by `schedule_seed`, then checks every crash point for strict
/// linearizability: completed operations must survive, interrupted ones may
/// be kept or dropped, and an interrupted update whose commit store is
/// known to be durable must be kept.
pub fn explore_two_threads(scripts: [&[Op]; 2], plan: &CrashPlan, schedule_seed: u64) -> VerdictReport {
    let tree = fresh_tree(plan);
    let shadow = Arc::clone(tree.durability().shadow());
    let baton = Arc::new(Baton {
        state: Mutex::new(BatonState {
            turn: 0,
            done: [false; 2],
            rng: SmallRng::seed_from_u64(schedule_seed),
            clock: 0,
        }),
        cv: Condvar::new(),
    });
    let current = Arc::new([AtomicUsize::new(0), AtomicUsize::new(0)]);
    let captures: Arc<Mutex<Vec<Capture>>> = Arc::new(Mutex::new(vec![Capture {
        tid: 0,
        op: None,
        clock: 0,
        event: None,
        phase: None,
        image: shadow.crash_image(),
    }]));
    {
        let (captures, current, baton) = (Arc::clone(&captures), Arc::clone(&current), Arc::clone(&baton));
        shadow.set_observer(Some(Arc::new(move |mem, event, phase| {
            let Some(tid) = BATON.with(|b| b.borrow().as_ref().map(|(_, t)| *t)) else {
                return;
            };
            let image = mem.crash_image();
            captures.lock().push(Capture {
                tid,
                op: Some(current[tid].load(Ordering::Relaxed)),
                clock: baton.now(),
                event: Some(event),
                phase,
                image,
            });
            baton.pass(tid, true);
        })));
    }

    let logs: Vec<Vec<Recorded>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..2)
            .map(|tid| {
                let (tree, baton, current) = (&tree, Arc::clone(&baton), Arc::clone(&current));
                let script = scripts[tid];
                s.spawn(move || {
                    BATON.with(|b| *b.borrow_mut() = Some((Arc::clone(&baton), tid)));
                    crate::sync::set_wait_hook(Some(baton_wait_hook));
                    baton.wait_turn(tid);
                    let mut log = Vec::new();
                    for (i, &op) in script.iter().enumerate() {
                        current[tid].store(i, Ordering::Relaxed);
                        baton.pass(tid, true);
                        let inv = baton.tick();
                        let ret = op.apply(tree);
                        let resp = baton.tick();
                        log.push(Recorded { op, inv, resp, ret });
                    }
                    crate::sync::set_wait_hook(None);
                    BATON.with(|b| *b.borrow_mut() = None);
                    baton.finish(tid);
                    log
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("scheduled thread panicked")).collect()
    });
    shadow.set_observer(None);
    let captures = std::mem::take(&mut *captures.lock());

    let initial: Model = plan.prefill.iter().copied().collect();
    let mut universe: Vec<u64> = initial.keys().copied().collect();
    universe.extend(scripts.iter().flat_map(|s| s.iter().map(|o| o.key())));
    universe.sort_unstable();
    universe.dedup();

    let mut images = ImageSet::default();
    let mut jobs = Vec::new();
    let mut commit: BTreeMap<(usize, usize), Commit> = BTreeMap::new();
    for (ci, c) in captures.iter().enumerate() {
        if let (Some(op), Some(ev)) = (c.op, c.event) {
            let st = commit.entry((c.tid, op)).or_insert(Commit::Before);
            match (ev, c.phase) {
                (PersistEvent::Flush { line }, Some(p)) if p.is_commit() && *st == Commit::Before => {
                    *st = Commit::Flushed(line)
                }
                (PersistEvent::Fence, _) if matches!(*st, Commit::Flushed(_)) => *st = Commit::Fenced,
                _ => {}
            }
        }
        for mask in subsets(c.image.pending.len(), plan, ci as u64) {
            let lines = chosen(&c.image.pending, mask);
            // Per thread: in-flight op index and whether it must be kept.
            let mut inflight: Vec<(usize, usize, bool)> = Vec::new();
            for (tid, log) in logs.iter().enumerate() {
                if let Some((i, _)) = log.iter().enumerate().find(|(_, r)| r.inv <= c.clock && c.clock < r.resp) {
                    let keep = match commit.get(&(tid, i)) {
                        Some(Commit::Fenced) => true,
                        Some(Commit::Flushed(line)) => lines.iter().any(|&(a, _)| a == *line),
                        _ => false,
                    };
                    inflight.push((tid, i, keep));
                }
            }
            let img = images.intern(c.image.persisted.overlay(&lines));
            jobs.push((ci, mask, img, inflight));
        }
    }
    let recovered = recover_all(&images.list, plan.params, plan.mode);

    let mut report = VerdictReport {
        verdicts: Vec::new(),
        images: images.list.len(),
    };
    let verdicts = par::map(plan.mode, &jobs, |(ci, mask, img, inflight)| {
        let c = &captures[*ci];
        let mut name = point_name(c);
        if !c.image.pending.is_empty() {
            let _ = write!(name, "[{mask:0w$b}]", w = c.image.pending.len());
        }
        judge(name, c.op, c.phase, &recovered[*img], |entries| {
            let history = crash_history(&logs, c.clock, inflight, &universe, entries);
            check_from(&initial, &history).is_pass()
        })
    });
    report.verdicts = verdicts;
    // Responses must also be linearizable without any crash.
    let full = crash_history(&logs, u64::MAX, &[], &[], &[]);
    if !check_from(&initial, &full).is_pass() {
        report.verdicts.push(CrashVerdict {
            crash_point: "responses".into(),
            op: None,
            phase: None,
            persisted_lines: 0,
            recovered: None,
            pass: false,
            detail: full.dump(),
        });
    }
    report
}

/// History of everything invoked before `clock`, followed after a crash by
/// one find per key returning the recovered value.
fn crash_history(
    logs: &[Vec<Recorded>],
    clock: u64,
    inflight: &[(usize, usize, bool)],
    universe: &[u64],
    recovered: &[(u64, u64)],
) -> History {
    let mut events = Vec::new();
    let mut end = 0;
    for (tid, log) in logs.iter().enumerate() {
        for (i, r) in log.iter().enumerate() {
            if r.resp <= clock {
                events.push(HistoryEvent {
                    tid,
                    op: r.op,
                    inv_ts: r.inv,
                    resp_ts: Some(r.resp),
                    resp: Response::Returned(r.ret),
                    era: 0,
                });
                end = end.max(r.resp);
            } else if let Some(&(_, _, keep)) = inflight.iter().find(|&&(t, j, _)| t == tid && j == i) {
                events.push(HistoryEvent {
                    tid,
                    op: r.op,
                    inv_ts: r.inv,
                    resp_ts: None,
                    resp: Response::Pending { keep },
                    era: 0,
                });
                end = end.max(r.inv);
            }
        }
    }
    if clock != u64::MAX {
        for (j, &k) in universe.iter().enumerate() {
            let v = recovered.iter().find(|&&(rk, _)| rk == k).map(|&(_, v)| v);
            let t = end + 1 + 2 * j as u64;
            events.push(HistoryEvent {
                tid: 0,
                op: Op::Find(k),
                inv_ts: t,
                resp_ts: Some(t + 1),
                resp: Response::Returned(v),
                era: 1,
            });
        }
    }
    History::new(events)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plan_with(prefill: &[(u64, u64)]) -> CrashPlan {
        CrashPlan {
            prefill: prefill.to_vec(),
            ..CrashPlan::default()
        }
    }

    #[test]
    fn empty_script_recovers_prefill() {
        let plan = plan_with(&[(5, 50), (9, 90)]);
        let r = explore_crashes(&[], &plan);
        assert!(r.passed());
        assert_eq!(r.verdicts.len(), 1);
        assert_eq!(r.verdicts[0].recovered, Some(vec![(5, 50), (9, 90)]));
    }

    #[test]
    fn every_point_of_a_simple_insert_passes() {
        let r = explore_crashes(&[Op::Insert(3, 30)], &plan_with(&[(1, 10)]));
        assert!(r.passed(), "{}", r.to_csv());
        assert!(r.verdicts.iter().any(|v| v.contains(3)));
        assert!(r.verdicts.iter().any(|v| v.crash_point.starts_with("op0:insert.val") && !v.contains(3)));
    }

    #[test]
    fn csv_has_header_and_one_line_per_verdict() {
        let r = explore_crashes(&[Op::Insert(3, 30), Op::Delete(3)], &plan_with(&[]));
        let csv = r.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("crash_point,persisted_lines,recovered_sum,verdict"));
        assert_eq!(lines.count(), r.verdicts.len());
    }

    #[test]
    fn two_thread_schedules_pass() {
        let a = [Op::Insert(1, 11), Op::Insert(2, 12), Op::Delete(1), Op::Insert(3, 13)];
        let b = [Op::Insert(1, 21), Op::Delete(2), Op::Insert(4, 24), Op::Find(1)];
        let plan = plan_with(&[(5, 5), (6, 6), (7, 7)]);
        for seed in 0..6 {
            let r = explore_two_threads([&a, &b], &plan, seed);
            assert!(r.passed(), "seed {seed}: {:?}", r.failures().next());
            assert!(r.verdicts.len() > 10);
        }
    }
}
