use super::node::Node;

/// Named persistence steps, used to label simulated crash points.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Phase {
    InsertVal,
    InsertKey,
    DeleteKey,
    SplitNodes,
    SplitLink,
    TaggedNodes,
    TaggedLink,
    RebalanceNodes,
    RebalanceLink,
}

impl Phase {
    pub fn label(self) -> &'static str {
        match self {
            Phase::InsertVal => "insert.val",
            Phase::InsertKey => "insert.key",
            Phase::DeleteKey => "delete.key",
            Phase::SplitNodes => "split.nodes",
            Phase::SplitLink => "split.link",
            Phase::TaggedNodes => "tagged.nodes",
            Phase::TaggedLink => "tagged.link",
            Phase::RebalanceNodes => "rebalance.nodes",
            Phase::RebalanceLink => "rebalance.link",
        }
    }

    /// The step whose persistence makes an update durable.
    pub fn is_commit(self) -> bool {
        matches!(self, Phase::InsertKey | Phase::DeleteKey | Phase::SplitLink)
    }
}

/// Mirrors the persistent fields of nodes (keys, values, links) into a
/// backing store. Every method is a no-op for volatile trees.
///
/// Stores must be issued after the matching volatile store so that a flush
/// always captures a value some reader could have seen.
pub trait Durability: Send + Sync + 'static {
    /// Whether new links are installed marked and made durable before use.
    fn link_and_persist(&self) -> bool;
    /// Assigns backing storage to a freshly built node and mirrors all of
    /// its persistent words. Nothing is flushed.
    fn on_new_node(&self, node: &mut Node);
    /// Flushes every line of a node built by `on_new_node`.
    fn flush_node(&self, node: &Node);
    fn store_key(&self, node: &Node, i: usize, key: u64);
    fn store_val(&self, node: &Node, i: usize, val: u64);
    fn store_link(&self, node: &Node, i: usize, child: &Node, marked: bool);
    fn flush_key(&self, node: &Node, i: usize);
    fn flush_slot(&self, node: &Node, i: usize);
    fn fence(&self);
    fn phase(&self, _phase: Phase) {}
}

/// No backing store.
#[derive(Clone, Copy, Debug, Default)]
pub struct Volatile;

impl Durability for Volatile {
    #[inline]
    fn link_and_persist(&self) -> bool {
        false
    }
    #[inline]
    fn on_new_node(&self, _: &mut Node) {}
    #[inline]
    fn flush_node(&self, _: &Node) {}
    #[inline]
    fn store_key(&self, _: &Node, _: usize, _: u64) {}
    #[inline]
    fn store_val(&self, _: &Node, _: usize, _: u64) {}
    #[inline]
    fn store_link(&self, _: &Node, _: usize, _: &Node, _: bool) {}
    #[inline]
    fn flush_key(&self, _: &Node, _: usize) {}
    #[inline]
    fn flush_slot(&self, _: &Node, _: usize) {}
    #[inline]
    fn fence(&self) {}
}
