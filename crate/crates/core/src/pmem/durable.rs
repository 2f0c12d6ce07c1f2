use std::sync::Arc;

use crate::tree::node::{Node, CAPACITY};
use crate::tree::{AbTree, Durability, NoElim, Phase, Publishing};

use super::shadow::{ShadowMemory, REGION_WORDS, WORD_KEYS, WORD_KIND, WORD_SEARCH_KEY, WORD_SLOTS};

/// Mirrors keys, values and links into a [`ShadowMemory`] and issues the
/// flushes and fences that make updates durable. Sizes, versions, locks and
/// marks stay volatile.
#[derive(Clone, Debug)]
pub struct Simulated {
    shadow: Arc<ShadowMemory>,
    enabled: bool,
}

impl Simulated {
    pub fn new() -> Self {
        Self {
            shadow: Arc::new(ShadowMemory::new()),
            enabled: true,
        }
    }

    /// Flushes and fences become no-ops; the tree behaves like a volatile
    /// one.
    pub fn disabled() -> Self {
        Self {
            shadow: Arc::new(ShadowMemory::new()),
            enabled: false,
        }
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    pub fn shadow(&self) -> &Arc<ShadowMemory> {
        &self.shadow
    }
}

impl Default for Simulated {
    fn default() -> Self {
        Self::new()
    }
}

fn word_addr(node: &Node, word: usize) -> u64 {
    node.region + 8 * word as u64
}

impl Durability for Simulated {
    fn link_and_persist(&self) -> bool {
        self.enabled
    }

    fn on_new_node(&self, node: &mut Node) {
        if !self.enabled {
            return;
        }
        node.region = self.shadow.alloc_region();
        node.shadow = Arc::as_ptr(&self.shadow);
        let mut words = [0u64; REGION_WORDS];
        words[WORD_KIND] = node.kind as u64;
        words[WORD_SEARCH_KEY] = node.search_key;
        let leaf = node.is_leaf();
        for i in 0..CAPACITY {
            words[WORD_KEYS + i] = node.key(i);
            let bits = node.child_raw(i);
            words[WORD_SLOTS + i] = if leaf || bits == 0 {
                bits
            } else {
                // SAFETY: children of a node under construction are live.
                unsafe { (*(bits as *const Node)).region }
            };
        }
        self.shadow.init_region(node.region, &words);
    }

    fn flush_node(&self, node: &Node) {
        if !self.enabled {
            return;
        }
        for line in 0..super::shadow::REGION_LINES as u64 {
            self.shadow.flush_line(node.region + line * super::shadow::LINE_BYTES);
        }
    }

    fn store_key(&self, node: &Node, i: usize, key: u64) {
        if self.enabled {
            self.shadow.durable_store(word_addr(node, WORD_KEYS + i), key);
        }
    }

    fn store_val(&self, node: &Node, i: usize, val: u64) {
        if self.enabled {
            self.shadow.durable_store(word_addr(node, WORD_SLOTS + i), val);
        }
    }

    fn store_link(&self, node: &Node, i: usize, child: &Node, marked: bool) {
        if self.enabled {
            let bits = child.region | marked as u64;
            self.shadow.durable_store(word_addr(node, WORD_SLOTS + i), bits);
        }
    }

    fn flush_key(&self, node: &Node, i: usize) {
        if self.enabled {
            self.shadow.flush_line(word_addr(node, WORD_KEYS + i));
        }
    }

    fn flush_slot(&self, node: &Node, i: usize) {
        if self.enabled {
            self.shadow.flush_line(word_addr(node, WORD_SLOTS + i));
        }
    }

    fn fence(&self) {
        if self.enabled {
            self.shadow.fence();
        }
    }

    fn phase(&self, phase: Phase) {
        if self.enabled {
            self.shadow.set_phase(phase);
        }
    }
}

pub type POccTree = AbTree<Simulated, NoElim>;
pub type PElimTree = AbTree<Simulated, Publishing>;
