use std::sync::atomic::AtomicBool;
use std::marker::PhantomData;

use crate::reclaim::{Disposal, EpochManager};

use super::node::{Node, NodeKind};
use super::{AbTree, Durability, ElimPolicy, Params, Phase};

/// Explicit tree shape below the entry node, used to build trees directly
/// and to compare trees structurally.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Layout {
    Leaf(Vec<(u64, u64)>),
    Internal {
        tagged: bool,
        keys: Vec<u64>,
        children: Vec<Layout>,
    },
}

impl Layout {
    pub fn internal(keys: Vec<u64>, children: Vec<Layout>) -> Self {
        Layout::Internal {
            tagged: false,
            keys,
            children,
        }
    }

    /// Keys in this subtree, in traversal order.
    pub fn keys(&self) -> Vec<u64> {
        let mut out = Vec::new();
        self.collect_keys(&mut out);
        out
    }

    fn collect_keys(&self, out: &mut Vec<u64>) {
        match self {
            Layout::Leaf(e) => out.extend(e.iter().map(|&(k, _)| k)),
            Layout::Internal { children, .. } => children.iter().for_each(|c| c.collect_keys(out)),
        }
    }

    pub fn height(&self) -> usize {
        match self {
            Layout::Leaf(_) => 0,
            Layout::Internal { children, .. } => 1 + children.iter().map(Layout::height).max().unwrap_or(0),
        }
    }

    /// Same shape with each leaf's entries sorted, so that leaves differing
    /// only in slot order compare equal.
    pub fn normalized(&self) -> Layout {
        match self {
            Layout::Leaf(e) => {
                let mut e = e.clone();
                e.sort_unstable();
                Layout::Leaf(e)
            }
            Layout::Internal {
                tagged,
                keys,
                children,
            } => Layout::Internal {
                tagged: *tagged,
                keys: keys.clone(),
                children: children.iter().map(Layout::normalized).collect(),
            },
        }
    }
}

impl<D: Durability, E: ElimPolicy> AbTree<D, E> {
    /// Builds a tree with exactly the given shape. Panics on a shape that
    /// does not fit node capacity; balance is not required.
    pub fn from_layout(dur: D, params: Params, disposal: Disposal, layout: &Layout) -> Self {
        let poison_checks = disposal == Disposal::Poison;
        let mut tree = Self {
            entry: std::ptr::null_mut(),
            params,
            epoch: EpochManager::with_disposal(disposal),
            dur,
            poison_checks,
            yield_injection: AtomicBool::new(false),
            _elim: PhantomData,
        };
        tree.entry = tree.alloc(Node::new_internal(NodeKind::Entry, 0, &[], &[std::ptr::null_mut()]));
        let mut built = vec![tree.entry];
        let root = tree.build(layout, 0, &mut built);
        tree.persist_new(&built, Phase::SplitNodes);
        let entry = tree.entry();
        tree.install_link(entry, 0, root, Phase::SplitLink);
        tree
    }

    fn build(&self, layout: &Layout, lo: u64, built: &mut Vec<*mut Node>) -> *mut Node {
        let n = match layout {
            Layout::Leaf(entries) => {
                assert!(entries.len() <= self.params.max, "leaf over capacity");
                self.alloc_leaf(lo, entries)
            }
            Layout::Internal {
                tagged,
                keys,
                children,
            } => {
                assert_eq!(keys.len() + 1, children.len(), "internal node arity");
                let kids: Vec<_> = children
                    .iter()
                    .enumerate()
                    .map(|(i, c)| self.build(c, if i == 0 { lo } else { keys[i - 1] }, built))
                    .collect();
                let kind = if *tagged { NodeKind::Tagged } else { NodeKind::Internal };
                self.alloc_internal(kind, lo, keys, &kids)
            }
        };
        built.push(n);
        n
    }

    /// Current shape. Quiescent use only.
    pub fn layout(&self) -> Layout {
        let _g = self.epoch.pin();
        fn walk(n: &Node, max: usize) -> Layout {
            if n.is_leaf() {
                Layout::Leaf(n.entries(max))
            } else {
                Layout::Internal {
                    tagged: n.kind == NodeKind::Tagged,
                    keys: n.routing_keys(),
                    // SAFETY: quiescent traversal of reachable nodes.
                    children: n.children().into_iter().map(|c| walk(unsafe { &*c }, max)).collect(),
                }
            }
        }
        // SAFETY: the root is reachable.
        walk(unsafe { &*self.entry().child_locked(0) }, self.params.max)
    }
}
