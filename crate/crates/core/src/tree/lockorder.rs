//! Debug-build check that node locks are taken bottom-to-top and, within a
//! level, left-to-right. Ranks are `(depth, position)` with the entry node at
//! depth 0.

use crate::sync::LockGuard;

use super::node::Node;

#[cfg(debug_assertions)]
thread_local! {
    static HELD: std::cell::RefCell<Vec<(usize, usize)>> = const { std::cell::RefCell::new(Vec::new()) };
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Rank {
    pub depth: usize,
    pub pos: usize,
}

impl Rank {
    pub fn new(depth: usize, pos: usize) -> Self {
        Self { depth, pos }
    }
}

/// A held node lock registered with the order checker.
pub(crate) struct NodeGuard<'a> {
    _guard: LockGuard<'a>,
    #[cfg(debug_assertions)]
    rank: Rank,
}

#[cfg(debug_assertions)]
fn admit(rank: Rank) {
    HELD.with(|h| {
        let mut h = h.borrow_mut();
        for &(d, p) in h.iter() {
            let ok = rank.depth < d || (rank.depth == d && rank.pos > p);
            assert!(
                ok,
                "lock order violation: taking ({}, {}) while holding ({d}, {p})",
                rank.depth, rank.pos
            );
        }
        h.push((rank.depth, rank.pos));
    });
}

impl<'a> NodeGuard<'a> {
    pub fn acquire(node: &'a Node, rank: Rank) -> Self {
        #[cfg(debug_assertions)]
        admit(rank);
        #[cfg(not(debug_assertions))]
        let _ = rank;
        Self {
            _guard: node.lock.acquire(),
            #[cfg(debug_assertions)]
            rank,
        }
    }

    pub fn try_acquire(node: &'a Node, rank: Rank) -> Option<Self> {
        let guard = node.lock.try_acquire()?;
        #[cfg(debug_assertions)]
        admit(rank);
        #[cfg(not(debug_assertions))]
        let _ = rank;
        Some(Self {
            _guard: guard,
            #[cfg(debug_assertions)]
            rank,
        })
    }
}

#[cfg(debug_assertions)]
impl Drop for NodeGuard<'_> {
    fn drop(&mut self) {
        HELD.with(|h| {
            let mut h = h.borrow_mut();
            let at = h
                .iter()
                .rposition(|&(d, p)| d == self.rank.depth && p == self.rank.pos)
                .expect("released lock was registered");
            h.swap_remove(at);
        });
    }
}
