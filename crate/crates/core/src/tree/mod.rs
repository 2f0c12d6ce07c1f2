//! Concurrent relaxed (a,b)-tree.
//!
//! Searches are lock-free and validate leaf reads with per-leaf version
//! numbers; updates lock at most four nodes. Internal nodes are immutable
//! once linked: structural changes build replacement nodes, swing one parent
//! link and mark the replaced nodes. Rebalancing runs after the update that
//! caused the violation, as separate atomic steps.
//!
//! The same implementation serves four variants, chosen by two type
//! parameters: a [`Durability`] backend (volatile or simulated persistent
//! memory) and an [`ElimPolicy`] (plain locking or publishing elimination).

mod durability;
mod layout;
mod lockorder;
pub(crate) mod node;
mod ops;
mod rebalance;
mod validate;

use std::marker::PhantomData;
use std::sync::atomic::{AtomicBool, Ordering};

use crate::reclaim::{Disposal, EpochGuard, EpochManager};

pub use durability::{Durability, Phase, Volatile};
pub use layout::Layout;
pub use node::{NodeKind, CAPACITY, EMPTY};
pub use validate::{StructureReport, Violation, ViolationKind};

use node::Node;

/// Size bounds of non-root nodes: leaves hold `min..=max` keys, internal
/// nodes `min..=max` children.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Params {
    pub min: usize,
    pub max: usize,
}

impl Params {
    pub const DEFAULT: Params = Params { min: 2, max: CAPACITY };

    pub fn new(min: usize, max: usize) -> Result<Self, ParamsError> {
        if min < 2 {
            return Err(ParamsError::MinTooSmall(min));
        }
        if max > CAPACITY {
            return Err(ParamsError::MaxTooLarge(max));
        }
        if 2 * min > max {
            return Err(ParamsError::Unbalanced { min, max });
        }
        Ok(Self { min, max })
    }
}

impl Default for Params {
    fn default() -> Self {
        Self::DEFAULT
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ParamsError {
    #[error("minimum node size {0} is below 2")]
    MinTooSmall(usize),
    #[error("maximum node size {0} exceeds capacity {CAPACITY}")]
    MaxTooLarge(usize),
    #[error("minimum {min} must be at most half of maximum {max}")]
    Unbalanced { min: usize, max: usize },
}

/// Whether updates publish records that let concurrent same-key updates
/// complete without locking.
pub trait ElimPolicy: Send + Sync + 'static {
    const ENABLED: bool;
}

/// Plain optimistic locking.
#[derive(Debug)]
pub struct NoElim;

/// Publishing elimination on leaves.
#[derive(Debug)]
pub struct Publishing;

impl ElimPolicy for NoElim {
    const ENABLED: bool = false;
}

impl ElimPolicy for Publishing {
    const ENABLED: bool = true;
}

/// Ordered map from `u64` keys (>= 1) to `u64` values.
pub trait Dictionary: Send + Sync {
    /// Inserts if absent. Returns the present value otherwise, leaving it.
    fn insert(&self, key: u64, val: u64) -> Option<u64>;
    /// Removes and returns the value, if present.
    fn delete(&self, key: u64) -> Option<u64>;
    fn find(&self, key: u64) -> Option<u64>;
}

pub struct AbTree<D: Durability = Volatile, E: ElimPolicy = NoElim> {
    entry: *mut Node,
    params: Params,
    epoch: EpochManager,
    dur: D,
    poison_checks: bool,
    yield_injection: AtomicBool,
    _elim: PhantomData<E>,
}

// SAFETY: nodes are shared through atomics and protected by locks, versions
// and the epoch manager.
unsafe impl<D: Durability, E: ElimPolicy> Send for AbTree<D, E> {}
unsafe impl<D: Durability, E: ElimPolicy> Sync for AbTree<D, E> {}

pub type OccTree = AbTree<Volatile, NoElim>;
pub type ElimTree = AbTree<Volatile, Publishing>;

impl<D: Durability + Default, E: ElimPolicy> AbTree<D, E> {
    pub fn new() -> Self {
        Self::with_config(D::default(), Params::DEFAULT, Disposal::Free)
    }

    pub fn with_params(params: Params) -> Self {
        Self::with_config(D::default(), params, Disposal::Free)
    }
}

impl<D: Durability + Default, E: ElimPolicy> Default for AbTree<D, E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<D: Durability, E: ElimPolicy> AbTree<D, E> {
    /// An empty tree: the entry node pointing at one empty leaf.
    pub fn with_config(dur: D, params: Params, disposal: Disposal) -> Self {
        Self::from_layout(dur, params, disposal, &Layout::Leaf(Vec::new()))
    }

    pub fn params(&self) -> Params {
        self.params
    }

    pub fn durability(&self) -> &D {
        &self.dur
    }

    pub fn epoch(&self) -> &EpochManager {
        &self.epoch
    }

    /// Makes every operation yield at its internal decision points. Used by
    /// stress tests so interleavings happen even on a single core.
    pub fn set_yield_injection(&self, on: bool) {
        self.yield_injection.store(on, Ordering::Relaxed);
    }

    #[inline]
    pub(crate) fn chaos(&self) {
        if self.yield_injection.load(Ordering::Relaxed) {
            std::thread::yield_now();
        }
    }

    #[inline]
    pub(crate) fn entry(&self) -> &Node {
        // SAFETY: the entry node lives as long as the tree.
        unsafe { &*self.entry }
    }

    /// Boxes a node and hands it to the durability backend.
    pub(crate) fn alloc(&self, mut node: Node) -> *mut Node {
        self.dur.on_new_node(&mut node);
        Box::into_raw(Box::new(node))
    }

    pub(crate) fn alloc_leaf(&self, search_key: u64, entries: &[(u64, u64)]) -> *mut Node {
        self.alloc(Node::new_leaf(search_key, entries))
    }

    pub(crate) fn alloc_internal(
        &self,
        kind: NodeKind,
        search_key: u64,
        keys: &[u64],
        children: &[*mut Node],
    ) -> *mut Node {
        self.alloc(Node::new_internal(kind, search_key, keys, children))
    }

    /// Makes freshly built nodes durable before anything links to them.
    pub(crate) fn persist_new(&self, nodes: &[*mut Node], phase: Phase) {
        if !self.dur.link_and_persist() {
            return;
        }
        self.dur.phase(phase);
        for &n in nodes {
            // SAFETY: freshly allocated and not yet shared.
            self.dur.flush_node(unsafe { &*n });
        }
        self.dur.fence();
    }

    /// Swings `parent.slots[idx]` to `child`. With persistence the link is
    /// first published marked, flushed and fenced, then unmarked.
    pub(crate) fn install_link(&self, parent: &Node, idx: usize, child: *mut Node, phase: Phase) {
        // SAFETY: `child` is a live node owned by the tree.
        let c = unsafe { &*child };
        if self.dur.link_and_persist() {
            self.dur.phase(phase);
            parent.slots[idx].store(child as u64 | node::LINK_MARK, Ordering::Release);
            self.dur.store_link(parent, idx, c, true);
            self.dur.flush_slot(parent, idx);
            self.dur.fence();
            parent.slots[idx].store(child as u64, Ordering::Release);
            self.dur.store_link(parent, idx, c, false);
        } else {
            parent.slots[idx].store(child as u64, Ordering::Release);
        }
    }

    /// # Safety
    /// `node` must be marked, unlinked, and retired by exactly one caller.
    pub(crate) unsafe fn retire(&self, guard: &EpochGuard<'_>, node: *mut Node) {
        unsafe { guard.retire(node as *mut (), std::mem::size_of::<Node>(), Node::reclaim) };
    }

    /// Current contents in key order. Quiescent use only.
    pub fn entries(&self) -> Vec<(u64, u64)> {
        let mut out = Vec::new();
        let _g = self.epoch.pin();
        self.for_each_leaf(|leaf| out.extend(leaf.entries(self.params.max)));
        out.sort_unstable();
        out
    }

    /// Number of keys. Quiescent use only.
    pub fn len(&self) -> usize {
        let mut n = 0;
        let _g = self.epoch.pin();
        self.for_each_leaf(|leaf| n += leaf.size());
        n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sum of all keys. Quiescent use only.
    pub fn key_sum(&self) -> u128 {
        let mut s = 0u128;
        let _g = self.epoch.pin();
        self.for_each_leaf(|leaf| {
            s += leaf
                .entries(self.params.max)
                .iter()
                .map(|&(k, _)| k as u128)
                .sum::<u128>()
        });
        s
    }

    fn for_each_leaf(&self, mut f: impl FnMut(&Node)) {
        let mut stack = vec![self.entry().child_locked(0)];
        while let Some(n) = stack.pop() {
            // SAFETY: quiescent traversal of reachable nodes.
            let n = unsafe { &*n };
            if n.is_leaf() {
                f(n);
            } else {
                stack.extend(n.children());
            }
        }
    }
}

impl<D: Durability, E: ElimPolicy> Dictionary for AbTree<D, E> {
    fn insert(&self, key: u64, val: u64) -> Option<u64> {
        AbTree::insert(self, key, val)
    }

    fn delete(&self, key: u64) -> Option<u64> {
        AbTree::delete(self, key)
    }

    fn find(&self, key: u64) -> Option<u64> {
        AbTree::find(self, key)
    }
}

impl<D: Durability, E: ElimPolicy> Drop for AbTree<D, E> {
    fn drop(&mut self) {
        // Reachable nodes are owned by the tree; retired ones by the epoch
        // manager, drained below.
        let mut stack = vec![self.entry];
        while let Some(n) = stack.pop() {
            // SAFETY: `&mut self` means no concurrent access; each reachable
            // node appears exactly once.
            let node = unsafe { &*n };
            if !node.is_leaf() {
                stack.extend(node.children());
            }
            unsafe { Node::reclaim(n as *mut (), Disposal::Free) };
        }
        self.epoch.reclaim_all();
    }
}

impl<D: Durability, E: ElimPolicy> std::fmt::Debug for AbTree<D, E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AbTree")
            .field("params", &self.params)
            .field("elimination", &E::ENABLED)
            .field("persistent", &self.dur.link_and_persist())
            .finish_non_exhaustive()
    }
}
