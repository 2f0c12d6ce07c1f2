use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};

use crate::pmem::ShadowMemory;
use crate::reclaim::Disposal;
use crate::sync::{QueueLock, SeqVersion};

/// Physical slot count of every node. The configured maximum size may be
/// smaller but never larger.
pub const CAPACITY: usize = 11;

/// Empty key slot marker. User keys are >= 1.
pub const EMPTY: u64 = 0;

/// Low bit of a child link: set while the link is not yet persisted.
pub(crate) const LINK_MARK: u64 = 1;

/// Pattern written over reclaimed nodes in poison mode.
pub(crate) const POISON: u64 = 0xDEAD_BEEF_DEAD_BEEF;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum NodeKind {
    Leaf = 1,
    Internal = 2,
    Tagged = 3,
    /// The sentinel entry node.
    Entry = 4,
}

impl NodeKind {
    pub fn from_tag(tag: u64) -> Option<Self> {
        match tag {
            1 => Some(Self::Leaf),
            2 => Some(Self::Internal),
            3 => Some(Self::Tagged),
            4 => Some(Self::Entry),
            _ => None,
        }
    }

    pub fn is_leaf(self) -> bool {
        self == Self::Leaf
    }
}

/// Summary of the last simple insert or successful delete on a leaf.
#[derive(Debug, Default)]
pub struct ElimRecord {
    key: AtomicU64,
    val: AtomicU64,
    ver: AtomicU64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ElimSnapshot {
    pub key: u64,
    pub val: u64,
    pub ver: u64,
}

impl ElimRecord {
    /// Written by the lock holder between `begin_write` and the slot write.
    pub(crate) fn publish(&self, key: u64, val: u64, ver: u64) {
        debug_assert!(ver % 2 == 1, "records carry odd versions");
        self.key.store(key, Ordering::Relaxed);
        self.val.store(val, Ordering::Relaxed);
        self.ver.store(ver, Ordering::Relaxed);
    }

    /// Raw read; only meaningful inside a version double-collect.
    pub(crate) fn read(&self) -> ElimSnapshot {
        ElimSnapshot {
            key: self.key.load(Ordering::Relaxed),
            val: self.val.load(Ordering::Relaxed),
            ver: self.ver.load(Ordering::Relaxed),
        }
    }
}

/// A tree node. Leaves use `slots` for values; internal nodes use it for
/// child links (`*mut Node` bits, possibly carrying [`LINK_MARK`]).
#[repr(align(64))]
pub struct Node {
    pub(crate) kind: NodeKind,
    /// Lower bound of the node's key range; always inside the range, so a
    /// search for it re-locates the node.
    pub(crate) search_key: u64,
    /// Simulated persistent region, 0 for volatile nodes.
    pub(crate) region: u64,
    pub(crate) shadow: *const ShadowMemory,
    pub(crate) size: AtomicUsize,
    pub(crate) marked: AtomicBool,
    pub(crate) lock: QueueLock,
    pub(crate) ver: SeqVersion,
    pub(crate) rec: ElimRecord,
    pub(crate) keys: [AtomicU64; CAPACITY],
    pub(crate) slots: [AtomicU64; CAPACITY],
}

impl Node {
    fn blank(kind: NodeKind, search_key: u64, size: usize) -> Self {
        Self {
            kind,
            search_key,
            region: 0,
            shadow: std::ptr::null(),
            size: AtomicUsize::new(size),
            marked: AtomicBool::new(false),
            lock: QueueLock::new(),
            ver: SeqVersion::new(),
            rec: ElimRecord::default(),
            keys: Default::default(),
            slots: Default::default(),
        }
    }

    pub(crate) fn new_leaf(search_key: u64, entries: &[(u64, u64)]) -> Self {
        assert!(entries.len() <= CAPACITY);
        let node = Self::blank(NodeKind::Leaf, search_key, entries.len());
        for (i, &(k, v)) in entries.iter().enumerate() {
            debug_assert_ne!(k, EMPTY);
            node.keys[i].store(k, Ordering::Relaxed);
            node.slots[i].store(v, Ordering::Relaxed);
        }
        node
    }

    pub(crate) fn new_internal(
        kind: NodeKind,
        search_key: u64,
        keys: &[u64],
        children: &[*mut Node],
    ) -> Self {
        assert!(!kind.is_leaf());
        assert!(!children.is_empty() && children.len() <= CAPACITY);
        assert_eq!(keys.len() + 1, children.len());
        debug_assert!(kind != NodeKind::Tagged || children.len() == 2);
        let node = Self::blank(kind, search_key, children.len());
        for (i, &k) in keys.iter().enumerate() {
            node.keys[i].store(k, Ordering::Relaxed);
        }
        for (i, &c) in children.iter().enumerate() {
            node.slots[i].store(c as u64, Ordering::Relaxed);
        }
        node
    }

    #[inline]
    pub fn kind(&self) -> NodeKind {
        self.kind
    }

    #[inline]
    pub(crate) fn is_leaf(&self) -> bool {
        self.kind == NodeKind::Leaf
    }

    #[inline]
    pub(crate) fn size(&self) -> usize {
        self.size.load(Ordering::Relaxed)
    }

    #[inline]
    pub(crate) fn is_marked(&self) -> bool {
        self.marked.load(Ordering::Acquire)
    }

    #[inline]
    pub(crate) fn mark(&self) {
        self.marked.store(true, Ordering::Release);
    }

    #[inline]
    pub(crate) fn key(&self, i: usize) -> u64 {
        self.keys[i].load(Ordering::Relaxed)
    }

    #[inline]
    pub(crate) fn val(&self, i: usize) -> u64 {
        self.slots[i].load(Ordering::Relaxed)
    }

    /// Child link bits without waiting on the persistence mark. Callers that
    /// hold the node's lock never see a marked link.
    #[inline]
    pub(crate) fn child_raw(&self, i: usize) -> u64 {
        self.slots[i].load(Ordering::Acquire)
    }

    #[inline]
    pub(crate) fn child_locked(&self, i: usize) -> *mut Node {
        let bits = self.child_raw(i);
        debug_assert_eq!(bits & LINK_MARK, 0, "unpersisted link seen under lock");
        (bits & !LINK_MARK) as *mut Node
    }

    /// Leaf contents; exact only while the leaf is locked or quiescent.
    pub(crate) fn entries(&self, max: usize) -> Vec<(u64, u64)> {
        (0..max)
            .filter_map(|i| {
                let k = self.key(i);
                (k != EMPTY).then(|| (k, self.val(i)))
            })
            .collect()
    }

    pub(crate) fn routing_keys(&self) -> Vec<u64> {
        (0..self.size().saturating_sub(1)).map(|i| self.key(i)).collect()
    }

    pub(crate) fn children(&self) -> Vec<*mut Node> {
        (0..self.size()).map(|i| self.child_locked(i)).collect()
    }

    /// Slot index of `key` in a locked leaf.
    pub(crate) fn find_slot(&self, key: u64, max: usize) -> Option<usize> {
        (0..max).find(|&i| self.key(i) == key)
    }

    /// Frees or poisons a retired node, releasing its persistent region.
    ///
    /// # Safety
    /// `ptr` must be a node allocated by `Box` that no thread can reach.
    pub(crate) unsafe fn reclaim(ptr: *mut (), mode: Disposal) {
        let node = ptr as *mut Node;
        let (region, shadow) = unsafe { ((*node).region, (*node).shadow) };
        if region != 0 && !shadow.is_null() {
            unsafe { (*shadow).free_region(region) };
        }
        match mode {
            Disposal::Free => drop(unsafe { Box::from_raw(node) }),
            Disposal::Poison => {
                let n = unsafe { &*node };
                for i in 0..CAPACITY {
                    n.keys[i].store(POISON, Ordering::Relaxed);
                    n.slots[i].store(POISON, Ordering::Relaxed);
                }
                n.size.store(usize::MAX, Ordering::Relaxed);
            }
        }
    }
}
