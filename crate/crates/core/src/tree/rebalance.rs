use std::ptr;

use crate::reclaim::EpochGuard;
use crate::stats;
use crate::sync::Backoff;

use super::lockorder::{NodeGuard, Rank};
use super::node::{Node, NodeKind};
use super::{AbTree, Durability, ElimPolicy, Phase};

impl<D: Durability, E: ElimPolicy> AbTree<D, E> {
    /// Removes a tagged node, either by absorbing it into a copy of its
    /// parent or, if that copy would overflow, by splitting the parent.
    pub(crate) fn fix_tagged(&self, g: &EpochGuard<'_>, node_ptr: *mut Node) {
        // SAFETY: pinned; the node was linked by this thread.
        let node = unsafe { &*node_ptr };
        debug_assert_eq!(node.kind, NodeKind::Tagged);
        let mut backoff = Backoff::new();
        loop {
            if node.is_marked() {
                return;
            }
            let path = self.search(node.search_key, node_ptr);
            if path.n != node_ptr {
                return;
            }
            debug_assert!(!path.gp.is_null(), "tagged nodes are never the root");
            // SAFETY: tagged nodes are never the root, so both exist.
            let (parent, gparent) = unsafe { (&*path.p, &*path.gp) };
            let ln = NodeGuard::acquire(node, Rank::new(path.depth, path.n_idx));
            let lp = NodeGuard::acquire(parent, Rank::new(path.depth - 1, path.p_idx));
            let lg = NodeGuard::acquire(gparent, Rank::new(path.depth - 2, 0));
            if node.is_marked() || parent.is_marked() || gparent.is_marked() || parent.kind == NodeKind::Tagged {
                drop((lg, lp, ln));
                stats::retry();
                backoff.snooze();
                continue;
            }
            debug_assert_eq!(parent.child_locked(path.n_idx), node_ptr);
            let psize = parent.size();
            let pkeys = parent.routing_keys();
            let pkids = parent.children();
            let i = path.n_idx;
            let mut keys = Vec::with_capacity(psize);
            keys.extend_from_slice(&pkeys[..i]);
            keys.push(node.key(0));
            keys.extend_from_slice(&pkeys[i..]);
            let mut kids = Vec::with_capacity(psize + 1);
            kids.extend_from_slice(&pkids[..i]);
            kids.push(node.child_locked(0));
            kids.push(node.child_locked(1));
            kids.extend_from_slice(&pkids[i + 1..]);

            let mut new_tagged = None;
            let replacement = if psize < self.params.max {
                let merged = self.alloc_internal(NodeKind::Internal, parent.search_key, &keys, &kids);
                self.persist_new(&[merged], Phase::TaggedNodes);
                merged
            } else {
                let lc = kids.len() / 2;
                let sep = keys[lc - 1];
                let left = self.alloc_internal(NodeKind::Internal, parent.search_key, &keys[..lc - 1], &kids[..lc]);
                let right = self.alloc_internal(NodeKind::Internal, sep, &keys[lc..], &kids[lc..]);
                let kind = if ptr::eq(path.gp, self.entry) {
                    NodeKind::Internal
                } else {
                    NodeKind::Tagged
                };
                let top = self.alloc_internal(kind, parent.search_key, &[sep], &[left, right]);
                self.persist_new(&[left, right, top], Phase::TaggedNodes);
                if kind == NodeKind::Tagged {
                    new_tagged = Some(top);
                }
                top
            };
            self.install_link(gparent, path.p_idx, replacement, Phase::TaggedLink);
            node.mark();
            parent.mark();
            drop((lg, lp, ln));
            // SAFETY: both are marked and unlinked by this thread alone.
            unsafe {
                self.retire(g, node_ptr);
                self.retire(g, path.p);
            }
            if let Some(t) = new_tagged {
                self.fix_tagged(g, t);
            }
            return;
        }
    }

    /// Repairs a non-root node with fewer than `min` entries by merging it
    /// with a sibling or redistributing entries between the two.
    pub(crate) fn fix_underfull(&self, g: &EpochGuard<'_>, node_ptr: *mut Node) {
        if ptr::eq(node_ptr, self.entry) {
            return;
        }
        // SAFETY: pinned.
        let node = unsafe { &*node_ptr };
        let mut backoff = Backoff::new();
        loop {
            if node.is_marked() || ptr::eq(self.read_child(self.entry(), 0), node_ptr) {
                return;
            }
            let path = self.search(node.search_key, node_ptr);
            if path.n != node_ptr || path.gp.is_null() {
                return;
            }
            // SAFETY: a non-root node has a parent and a grandparent.
            let (parent, gparent) = unsafe { (&*path.p, &*path.gp) };
            if parent.size() < 2 {
                // The parent is itself underfull with one child; its own
                // repair must happen first.
                stats::retry();
                backoff.snooze();
                continue;
            }
            let s_idx = if path.n_idx == 0 { 1 } else { path.n_idx - 1 };
            let sib_ptr = self.read_child(parent, s_idx);
            // SAFETY: pinned.
            let sib = unsafe { &*sib_ptr };
            let (left_idx, left, right) = if s_idx < path.n_idx {
                (s_idx, sib, node)
            } else {
                (path.n_idx, node, sib)
            };
            let ll = NodeGuard::acquire(left, Rank::new(path.depth, left_idx));
            let lr = NodeGuard::acquire(right, Rank::new(path.depth, left_idx + 1));
            let lp = NodeGuard::acquire(parent, Rank::new(path.depth - 1, path.p_idx));
            let lg = NodeGuard::acquire(gparent, Rank::new(path.depth - 2, 0));
            if node.size() >= self.params.min {
                return;
            }
            let parent_is_root = ptr::eq(path.gp, self.entry);
            if (parent.size() < self.params.min && !parent_is_root)
                || node.is_marked()
                || sib.is_marked()
                || parent.is_marked()
                || gparent.is_marked()
                || node.kind == NodeKind::Tagged
                || sib.kind == NodeKind::Tagged
                || parent.kind == NodeKind::Tagged
            {
                drop((lg, lp, lr, ll));
                stats::retry();
                backoff.snooze();
                continue;
            }
            debug_assert_eq!(parent.child_locked(s_idx), sib_ptr);
            debug_assert_eq!(parent.child_locked(path.n_idx), node_ptr);
            debug_assert_eq!(node.is_leaf(), sib.is_leaf());

            let psize = parent.size();
            let pkeys = parent.routing_keys();
            let pkids = parent.children();
            let total = left.size() + right.size();
            let max = self.params.max;

            if total <= max {
                let merged = if left.is_leaf() {
                    let mut all = left.entries(max);
                    all.extend(right.entries(max));
                    all.sort_unstable();
                    self.alloc_leaf(left.search_key, &all)
                } else {
                    let mut keys = left.routing_keys();
                    keys.push(pkeys[left_idx]);
                    keys.extend(right.routing_keys());
                    let mut kids = left.children();
                    kids.extend(right.children());
                    self.alloc_internal(NodeKind::Internal, left.search_key, &keys, &kids)
                };
                if parent_is_root && psize == 2 {
                    self.persist_new(&[merged], Phase::RebalanceNodes);
                    self.install_link(gparent, 0, merged, Phase::RebalanceLink);
                    left.mark();
                    right.mark();
                    parent.mark();
                    drop((lg, lp, lr, ll));
                    // SAFETY: marked and unlinked by this thread alone.
                    unsafe {
                        self.retire(g, left as *const Node as *mut Node);
                        self.retire(g, right as *const Node as *mut Node);
                        self.retire(g, path.p);
                    }
                    return;
                }
                let mut keys = pkeys.clone();
                keys.remove(left_idx);
                let mut kids = pkids.clone();
                kids[left_idx] = merged;
                kids.remove(left_idx + 1);
                let new_parent = self.alloc_internal(NodeKind::Internal, parent.search_key, &keys, &kids);
                self.persist_new(&[merged, new_parent], Phase::RebalanceNodes);
                self.install_link(gparent, path.p_idx, new_parent, Phase::RebalanceLink);
                left.mark();
                right.mark();
                parent.mark();
                drop((lg, lp, lr, ll));
                // SAFETY: marked and unlinked by this thread alone.
                unsafe {
                    self.retire(g, left as *const Node as *mut Node);
                    self.retire(g, right as *const Node as *mut Node);
                    self.retire(g, path.p);
                }
                // The parent first: while it has a single child, repairs
                // below it wait.
                self.fix_underfull(g, new_parent);
                self.fix_underfull(g, merged);
                return;
            }

            let (new_left, new_right, sep) = if left.is_leaf() {
                let mut all = left.entries(max);
                all.extend(right.entries(max));
                all.sort_unstable();
                let half = all.len() / 2;
                let sep = all[half].0;
                (
                    self.alloc_leaf(left.search_key, &all[..half]),
                    self.alloc_leaf(sep, &all[half..]),
                    sep,
                )
            } else {
                let mut keys = left.routing_keys();
                keys.push(pkeys[left_idx]);
                keys.extend(right.routing_keys());
                let mut kids = left.children();
                kids.extend(right.children());
                let lc = kids.len() / 2;
                let sep = keys[lc - 1];
                (
                    self.alloc_internal(NodeKind::Internal, left.search_key, &keys[..lc - 1], &kids[..lc]),
                    self.alloc_internal(NodeKind::Internal, sep, &keys[lc..], &kids[lc..]),
                    sep,
                )
            };
            let mut keys = pkeys;
            keys[left_idx] = sep;
            let mut kids = pkids;
            kids[left_idx] = new_left;
            kids[left_idx + 1] = new_right;
            let new_parent = self.alloc_internal(NodeKind::Internal, parent.search_key, &keys, &kids);
            self.persist_new(&[new_left, new_right, new_parent], Phase::RebalanceNodes);
            self.install_link(gparent, path.p_idx, new_parent, Phase::RebalanceLink);
            left.mark();
            right.mark();
            parent.mark();
            drop((lg, lp, lr, ll));
            // SAFETY: marked and unlinked by this thread alone.
            unsafe {
                self.retire(g, left as *const Node as *mut Node);
                self.retire(g, right as *const Node as *mut Node);
                self.retire(g, path.p);
            }
            return;
        }
    }

    /// Runs repairs until no tagged or underfull non-root node remains.
    /// Single-threaded use (recovery and tests).
    pub(crate) fn repair_all(&self) {
        let g = self.epoch.pin();
        loop {
            let mut tagged = Vec::new();
            let mut underfull = Vec::new();
            let root = self.entry().child_locked(0);
            let mut stack = vec![root];
            while let Some(n) = stack.pop() {
                // SAFETY: quiescent traversal.
                let node = unsafe { &*n };
                if node.kind == NodeKind::Tagged {
                    tagged.push(n);
                } else if !ptr::eq(n, root) && node.size() < self.params.min {
                    underfull.push(n);
                }
                if !node.is_leaf() {
                    stack.extend(node.children());
                }
            }
            if let Some(&t) = tagged.first() {
                self.fix_tagged(&g, t);
            } else if let Some(&u) = underfull.first() {
                self.fix_underfull(&g, u);
            } else {
                return;
            }
        }
    }
}
