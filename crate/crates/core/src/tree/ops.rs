use std::ptr;
use std::sync::atomic::Ordering;

use crate::reclaim::EpochGuard;
use crate::stats;
use crate::sync::Backoff;

use super::lockorder::{NodeGuard, Rank};
use super::node::{Node, NodeKind, ElimSnapshot, EMPTY, LINK_MARK, POISON};
use super::{AbTree, Durability, ElimPolicy, Phase};

/// Where a search ended and how it got there.
#[derive(Clone, Copy, Debug)]
pub(crate) struct PathInfo {
    pub gp: *mut Node,
    pub p: *mut Node,
    /// Index of `p` in `gp`.
    pub p_idx: usize,
    pub n: *mut Node,
    /// Index of `n` in `p`.
    pub n_idx: usize,
    /// Depth of `n`; the entry node has depth 0.
    pub depth: usize,
}

pub(crate) enum LockOrElim<'a> {
    Acquired(NodeGuard<'a>),
    Eliminated(ElimSnapshot),
}

enum Attempt {
    Done(Option<u64>),
    Retry,
}

impl<D: Durability, E: ElimPolicy> AbTree<D, E> {
    /// Follows a child link, waiting while it is marked as not yet durable.
    #[inline]
    pub(crate) fn read_child(&self, node: &Node, i: usize) -> *mut Node {
        let mut bits = node.child_raw(i);
        if bits & LINK_MARK != 0 {
            let mut backoff = Backoff::new();
            while bits & LINK_MARK != 0 {
                backoff.snooze();
                bits = node.child_raw(i);
            }
        }
        if self.poison_checks {
            assert_ne!(bits, POISON, "search followed a link out of a reclaimed node");
        }
        bits as *mut Node
    }

    /// Descends from the entry node towards `key`, stopping at a leaf or at
    /// `target`. Takes no locks.
    pub(crate) fn search(&self, key: u64, target: *const Node) -> PathInfo {
        stats::descent();
        let mut path = PathInfo {
            gp: ptr::null_mut(),
            p: ptr::null_mut(),
            p_idx: 0,
            n: self.entry,
            n_idx: 0,
            depth: 0,
        };
        loop {
            // SAFETY: the caller is pinned; every node on the path was
            // reachable when its link was read.
            let node = unsafe { &*path.n };
            if node.is_leaf() || ptr::eq(path.n, target) {
                return path;
            }
            let size = node.size();
            if self.poison_checks {
                assert_ne!(size, usize::MAX, "search entered a reclaimed node");
            }
            let mut i = 0;
            while i + 1 < size && key >= node.key(i) {
                i += 1;
            }
            path.gp = path.p;
            path.p = path.n;
            path.p_idx = path.n_idx;
            path.n_idx = i;
            path.n = self.read_child(node, i);
            path.depth += 1;
        }
    }

    /// Optimistic lookup in a leaf, retried until a scan sees one stable
    /// version.
    pub(crate) fn search_leaf(&self, leaf: &Node, key: u64) -> Option<u64> {
        let mut backoff = Backoff::new();
        loop {
            let v = leaf.ver.load();
            if v & 1 == 1 {
                backoff.snooze();
                continue;
            }
            let found = self.scan(leaf, key);
            if leaf.ver.validate(v) {
                return found;
            }
        }
    }

    #[inline]
    fn scan(&self, leaf: &Node, key: u64) -> Option<u64> {
        for i in 0..self.params.max {
            let k = leaf.key(i);
            if self.poison_checks {
                assert_ne!(k, POISON, "leaf scan read a reclaimed leaf");
            }
            if k == key {
                return Some(leaf.val(i));
            }
        }
        None
    }

    pub fn find(&self, key: u64) -> Option<u64> {
        assert_ne!(key, EMPTY, "key 0 is reserved");
        let _g = self.epoch.pin();
        let d0 = stats::descents();
        let path = self.search(key, ptr::null());
        // SAFETY: pinned; `n` is a leaf.
        let r = self.search_leaf(unsafe { &*path.n }, key);
        stats::find(stats::descents() - d0);
        r
    }

    pub fn insert(&self, key: u64, val: u64) -> Option<u64> {
        assert_ne!(key, EMPTY, "key 0 is reserved");
        let g = self.epoch.pin();
        loop {
            let path = self.search(key, ptr::null());
            // SAFETY: pinned; `n` is a leaf.
            let leaf = unsafe { &*path.n };
            let lock = if E::ENABLED {
                let pre = leaf.ver.load();
                let found = self.scan(leaf, key);
                if pre & 1 == 0 && leaf.ver.validate(pre) {
                    if let Some(v) = found {
                        return Some(v);
                    }
                }
                match self.lock_or_elim(leaf, &path, key, pre) {
                    LockOrElim::Acquired(l) => l,
                    LockOrElim::Eliminated(rec) => {
                        stats::eliminated(true);
                        return Some(rec.val);
                    }
                }
            } else {
                if let Some(v) = self.search_leaf(leaf, key) {
                    return Some(v);
                }
                NodeGuard::acquire(leaf, Rank::new(path.depth, path.n_idx))
            };
            match self.insert_locked(&g, &path, lock, key, val) {
                Attempt::Done(r) => return r,
                Attempt::Retry => stats::retry(),
            }
        }
    }

    fn insert_locked(
        &self,
        g: &EpochGuard<'_>,
        path: &PathInfo,
        lock: NodeGuard<'_>,
        key: u64,
        val: u64,
    ) -> Attempt {
        // SAFETY: pinned and locked.
        let leaf = unsafe { &*path.n };
        if leaf.is_marked() {
            return Attempt::Retry;
        }
        let max = self.params.max;
        if let Some(i) = leaf.find_slot(key, max) {
            return Attempt::Done(Some(leaf.val(i)));
        }
        self.chaos();
        if leaf.size() < max {
            let slot = leaf.find_slot(EMPTY, max).expect("non-full leaf has an empty slot");
            let v = leaf.ver.begin_write();
            if E::ENABLED {
                leaf.rec.publish(key, val, v);
            }
            self.chaos();
            leaf.slots[slot].store(val, Ordering::Relaxed);
            self.dur.store_val(leaf, slot, val);
            self.dur.phase(Phase::InsertVal);
            self.dur.flush_slot(leaf, slot);
            self.dur.fence();
            leaf.keys[slot].store(key, Ordering::Relaxed);
            self.dur.store_key(leaf, slot, key);
            self.dur.phase(Phase::InsertKey);
            self.dur.flush_key(leaf, slot);
            self.dur.fence();
            leaf.size.fetch_add(1, Ordering::Relaxed);
            leaf.ver.end_write();
            drop(lock);
            return Attempt::Done(None);
        }

        // Full leaf: replace it by a tagged node over two half leaves.
        // SAFETY: a leaf below the entry node always has a parent.
        let parent = unsafe { &*path.p };
        let plock = NodeGuard::acquire(parent, Rank::new(path.depth - 1, path.p_idx));
        if parent.is_marked() {
            drop(plock);
            drop(lock);
            return Attempt::Retry;
        }
        debug_assert_eq!(parent.child_locked(path.n_idx), path.n);
        let mut all = leaf.entries(max);
        all.push((key, val));
        all.sort_unstable();
        let half = all.len() / 2;
        let sep = all[half].0;
        let left = self.alloc_leaf(leaf.search_key, &all[..half]);
        let right = self.alloc_leaf(sep, &all[half..]);
        let kind = if ptr::eq(path.p, self.entry) {
            NodeKind::Internal
        } else {
            NodeKind::Tagged
        };
        let top = self.alloc_internal(kind, leaf.search_key, &[sep], &[left, right]);
        self.persist_new(&[left, right, top], Phase::SplitNodes);
        self.install_link(parent, path.n_idx, top, Phase::SplitLink);
        leaf.mark();
        drop(plock);
        drop(lock);
        // SAFETY: the old leaf is marked and unlinked; only this thread
        // replaced it.
        unsafe { self.retire(g, path.n) };
        if kind == NodeKind::Tagged {
            self.fix_tagged(g, top);
        }
        Attempt::Done(None)
    }

    pub fn delete(&self, key: u64) -> Option<u64> {
        assert_ne!(key, EMPTY, "key 0 is reserved");
        let g = self.epoch.pin();
        loop {
            let path = self.search(key, ptr::null());
            // SAFETY: pinned; `n` is a leaf.
            let leaf = unsafe { &*path.n };
            let lock = if E::ENABLED {
                let pre = leaf.ver.load();
                let found = self.scan(leaf, key);
                if pre & 1 == 0 && leaf.ver.validate(pre) && found.is_none() {
                    return None;
                }
                match self.lock_or_elim(leaf, &path, key, pre) {
                    LockOrElim::Acquired(l) => l,
                    LockOrElim::Eliminated(_) => {
                        stats::eliminated(false);
                        return None;
                    }
                }
            } else {
                self.search_leaf(leaf, key)?;
                NodeGuard::acquire(leaf, Rank::new(path.depth, path.n_idx))
            };
            if leaf.is_marked() {
                drop(lock);
                stats::retry();
                continue;
            }
            let slot = leaf.find_slot(key, self.params.max)?;
            self.chaos();
            let old = leaf.val(slot);
            let v = leaf.ver.begin_write();
            if E::ENABLED {
                leaf.rec.publish(key, old, v);
            }
            self.chaos();
            leaf.keys[slot].store(EMPTY, Ordering::Relaxed);
            self.dur.store_key(leaf, slot, EMPTY);
            self.dur.phase(Phase::DeleteKey);
            self.dur.flush_key(leaf, slot);
            self.dur.fence();
            let size = leaf.size.fetch_sub(1, Ordering::Relaxed) - 1;
            leaf.ver.end_write();
            drop(lock);
            if size < self.params.min {
                self.fix_underfull(&g, path.n);
            }
            return Some(old);
        }
    }

    /// Either eliminates the caller against the leaf's published record or
    /// acquires the leaf lock. `pre_scan` is the version the caller read
    /// before its optimistic scan.
    pub(crate) fn lock_or_elim<'a>(
        &self,
        leaf: &'a Node,
        path: &PathInfo,
        key: u64,
        pre_scan: u64,
    ) -> LockOrElim<'a> {
        let start = leaf.ver.load();
        debug_assert!(pre_scan <= start);
        let mut backoff = Backoff::new();
        loop {
            let (rec, seen) = loop {
                let v = leaf.ver.load();
                if v & 1 == 1 {
                    backoff.snooze();
                    continue;
                }
                let rec = leaf.rec.read();
                if leaf.ver.validate(v) {
                    break (rec, v);
                }
            };
            if start <= rec.ver && rec.key == key {
                debug_assert!(rec.ver & 1 == 1 && seen > rec.ver);
                return LockOrElim::Eliminated(rec);
            }
            self.chaos();
            if let Some(l) = NodeGuard::try_acquire(leaf, Rank::new(path.depth, path.n_idx)) {
                return LockOrElim::Acquired(l);
            }
            backoff.snooze();
        }
    }
}
