use std::collections::HashSet;
use std::fmt;

use super::node::{Node, NodeKind, EMPTY, LINK_MARK};
use super::{AbTree, Durability, ElimPolicy};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ViolationKind {
    /// The entry node must have one child and no keys.
    EntryShape,
    TaggedArity(usize),
    /// Tagged nodes are transient and must be gone once updates quiesce.
    TaggedAtQuiescence,
    SizeOutOfBounds { size: usize, min: usize, max: usize },
    RoutingKeysUnsorted,
    KeyOutOfRange { key: u64, lo: u64, hi: Option<u64> },
    DuplicateKey(u64),
    SizeMismatch { recorded: usize, actual: usize },
    MarkedReachable,
    MarkedLink,
    UnevenLeafDepth { depth: usize, expected: usize },
    SearchKeyOutOfRange { search_key: u64 },
    EmptyRoutingKey,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    /// Address of the offending node.
    pub node: usize,
    pub depth: usize,
    pub kind: ViolationKind,
}

#[derive(Clone, Debug, Default)]
pub struct StructureReport {
    pub violations: Vec<Violation>,
    pub keys: usize,
    pub key_sum: u128,
    /// Leaf depth below the entry node.
    pub height: usize,
    pub leaves: usize,
    pub internals: usize,
    pub tagged: usize,
}

impl StructureReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has(&self, pred: impl Fn(&ViolationKind) -> bool) -> bool {
        self.violations.iter().any(|v| pred(&v.kind))
    }
}

impl fmt::Display for StructureReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} keys, height {}, {} leaves, {} internal, {} tagged",
            self.keys, self.height, self.leaves, self.internals, self.tagged
        )?;
        if self.violations.is_empty() {
            return write!(f, ": clean");
        }
        write!(f, ": {} violations", self.violations.len())?;
        for v in self.violations.iter().take(16) {
            write!(f, "\n  node {:#x} at depth {}: {:?}", v.node, v.depth, v.kind)?;
        }
        Ok(())
    }
}

struct Walker {
    min: usize,
    max: usize,
    allow_transient: bool,
    report: StructureReport,
    seen: HashSet<u64>,
    leaf_depth: Option<usize>,
}

impl Walker {
    fn flag(&mut self, n: &Node, depth: usize, kind: ViolationKind) {
        self.report.violations.push(Violation {
            node: n as *const Node as usize,
            depth,
            kind,
        });
    }

    fn visit(&mut self, n: &Node, lo: u64, hi: Option<u64>, depth: usize, is_root: bool) {
        let in_range = |k: u64| k >= lo && hi.is_none_or(|h| k < h);
        if n.is_marked() {
            self.flag(n, depth, ViolationKind::MarkedReachable);
        }
        if !in_range(n.search_key) {
            self.flag(n, depth, ViolationKind::SearchKeyOutOfRange { search_key: n.search_key });
        }
        if n.is_leaf() {
            self.report.leaves += 1;
            let entries = n.entries(self.max);
            // Slots past the configured maximum must stay empty.
            let stray = (self.max..super::CAPACITY).filter(|&i| n.key(i) != EMPTY).count();
            let actual = entries.len() + stray;
            if n.size() != actual {
                self.flag(n, depth, ViolationKind::SizeMismatch { recorded: n.size(), actual });
            }
            if !is_root && !self.allow_transient && actual < self.min {
                self.flag(n, depth, ViolationKind::SizeOutOfBounds { size: actual, min: self.min, max: self.max });
            }
            for (k, _) in entries {
                if !in_range(k) {
                    self.flag(n, depth, ViolationKind::KeyOutOfRange { key: k, lo, hi });
                }
                if !self.seen.insert(k) {
                    self.flag(n, depth, ViolationKind::DuplicateKey(k));
                }
                self.report.keys += 1;
                self.report.key_sum += k as u128;
            }
            match self.leaf_depth {
                None => self.leaf_depth = Some(depth),
                Some(d) if d != depth && !self.allow_transient => {
                    self.flag(n, depth, ViolationKind::UnevenLeafDepth { depth, expected: d })
                }
                Some(_) => {}
            }
            return;
        }

        let size = n.size();
        if size == 0 || size > super::CAPACITY {
            self.flag(n, depth, ViolationKind::SizeOutOfBounds { size, min: self.min, max: self.max });
            return;
        }
        match n.kind {
            NodeKind::Tagged => {
                self.report.tagged += 1;
                if size != 2 {
                    self.flag(n, depth, ViolationKind::TaggedArity(size));
                }
                if !self.allow_transient {
                    self.flag(n, depth, ViolationKind::TaggedAtQuiescence);
                }
            }
            NodeKind::Entry => self.flag(n, depth, ViolationKind::EntryShape),
            _ => {
                self.report.internals += 1;
                let too_small = !is_root && !self.allow_transient && size < self.min;
                if too_small || size > self.max {
                    self.flag(n, depth, ViolationKind::SizeOutOfBounds { size, min: self.min, max: self.max });
                }
            }
        }
        let keys = n.routing_keys();
        if keys.contains(&EMPTY) {
            self.flag(n, depth, ViolationKind::EmptyRoutingKey);
        }
        if keys.windows(2).any(|w| w[0] >= w[1]) {
            self.flag(n, depth, ViolationKind::RoutingKeysUnsorted);
        }
        for &k in &keys {
            if !in_range(k) {
                self.flag(n, depth, ViolationKind::KeyOutOfRange { key: k, lo, hi });
            }
        }
        for i in 0..size {
            let bits = n.child_raw(i);
            if bits & LINK_MARK != 0 {
                self.flag(n, depth, ViolationKind::MarkedLink);
            }
            let child = (bits & !LINK_MARK) as *const Node;
            if child.is_null() {
                self.flag(n, depth, ViolationKind::SizeMismatch { recorded: size, actual: i });
                return;
            }
            let clo = if i == 0 { lo } else { keys[i - 1].max(lo) };
            let chi = if i + 1 < size { Some(hi.map_or(keys[i], |h| h.min(keys[i]))) } else { hi };
            // Tagged nodes add a level without adding height.
            let cdepth = if n.kind == NodeKind::Tagged { depth } else { depth + 1 };
            // SAFETY: quiescent traversal of reachable nodes.
            self.visit(unsafe { &*child }, clo, chi, cdepth, false);
        }
    }
}

impl<D: Durability, E: ElimPolicy> AbTree<D, E> {
    /// Checks the relaxed (a,b)-tree invariants over all reachable nodes.
    /// The tree must be quiescent, and all rebalancing must have finished:
    /// tagged nodes and underfull nodes are reported.
    pub fn validate_structure(&self) -> StructureReport {
        self.validate_with(false)
    }

    /// Like [`validate_structure`](Self::validate_structure) but accepts the
    /// transient shapes that rebalancing has not yet repaired.
    pub fn validate_relaxed(&self) -> StructureReport {
        self.validate_with(true)
    }

    fn validate_with(&self, allow_transient: bool) -> StructureReport {
        let _g = self.epoch.pin();
        let mut w = Walker {
            min: self.params.min,
            max: self.params.max,
            allow_transient,
            report: StructureReport::default(),
            seen: HashSet::new(),
            leaf_depth: None,
        };
        let entry = self.entry();
        if entry.kind != NodeKind::Entry || entry.size() != 1 || entry.is_marked() {
            w.flag(entry, 0, ViolationKind::EntryShape);
        }
        let bits = entry.child_raw(0);
        if bits & LINK_MARK != 0 {
            w.flag(entry, 0, ViolationKind::MarkedLink);
        }
        let root = (bits & !LINK_MARK) as *const Node;
        if root.is_null() {
            w.flag(entry, 0, ViolationKind::EntryShape);
        } else {
            // SAFETY: quiescent traversal.
            w.visit(unsafe { &*root }, 0, None, 1, true);
        }
        w.report.height = w.leaf_depth.unwrap_or(0);
        w.report
    }
}
