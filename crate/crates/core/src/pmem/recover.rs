use std::collections::HashSet;

use crate::reclaim::Disposal;
use crate::tree::node::{NodeKind, CAPACITY, EMPTY, LINK_MARK};
use crate::tree::{AbTree, ElimPolicy, Layout, Params};

use super::durable::Simulated;
use super::shadow::{PersistentImage, ENTRY_REGION, REGION_BYTES, WORD_KEYS, WORD_KIND, WORD_SLOTS};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum RecoveryError {
    #[error("region {region:#x} has unknown node kind {tag}")]
    BadKind { region: u64, tag: u64 },
    #[error("entry region holds a {0:?} node")]
    BadEntry(NodeKind),
    #[error("link {link:#x} in region {region:#x} is not region aligned")]
    BadLink { region: u64, link: u64 },
    #[error("internal node at {region:#x} has a gap in its child links")]
    LinkGap { region: u64 },
    #[error("leaf at {region:#x} holds {count} keys, more than {max}")]
    Overfull { region: u64, count: usize, max: usize },
    #[error("region {0:#x} is reachable twice")]
    Shared(u64),
    #[error("tree deeper than {0} levels")]
    TooDeep(usize),
}

const MAX_DEPTH: usize = 64;

/// Reads the tree reachable from the entry node in a persisted image.
/// Link marks are ignored: a marked link that reached persistent memory was
/// already flushed by its writer.
pub fn decode_image(image: &PersistentImage, params: Params) -> Result<Layout, RecoveryError> {
    let tag = image.region_word(ENTRY_REGION, WORD_KIND);
    match NodeKind::from_tag(tag) {
        Some(NodeKind::Entry) => {}
        Some(k) => return Err(RecoveryError::BadEntry(k)),
        None => return Err(RecoveryError::BadKind { region: ENTRY_REGION, tag }),
    }
    let root = link(image, ENTRY_REGION, 0)?;
    if root == 0 {
        return Err(RecoveryError::LinkGap { region: ENTRY_REGION });
    }
    let mut seen = HashSet::new();
    decode(image, root, params, 1, &mut seen)
}

fn link(image: &PersistentImage, region: u64, i: usize) -> Result<u64, RecoveryError> {
    let bits = image.region_word(region, WORD_SLOTS + i) & !LINK_MARK;
    if !bits.is_multiple_of(REGION_BYTES) {
        return Err(RecoveryError::BadLink { region, link: bits });
    }
    Ok(bits)
}

fn decode(
    image: &PersistentImage,
    region: u64,
    params: Params,
    depth: usize,
    seen: &mut HashSet<u64>,
) -> Result<Layout, RecoveryError> {
    if depth > MAX_DEPTH {
        return Err(RecoveryError::TooDeep(MAX_DEPTH));
    }
    if !seen.insert(region) {
        return Err(RecoveryError::Shared(region));
    }
    let tag = image.region_word(region, WORD_KIND);
    let kind = NodeKind::from_tag(tag).ok_or(RecoveryError::BadKind { region, tag })?;
    match kind {
        NodeKind::Leaf => {
            let entries: Vec<_> = (0..CAPACITY)
                .filter_map(|i| {
                    let k = image.region_word(region, WORD_KEYS + i);
                    (k != EMPTY).then(|| (k, image.region_word(region, WORD_SLOTS + i)))
                })
                .collect();
            if entries.len() > params.max {
                return Err(RecoveryError::Overfull {
                    region,
                    count: entries.len(),
                    max: params.max,
                });
            }
            Ok(Layout::Leaf(entries))
        }
        NodeKind::Internal | NodeKind::Tagged => {
            let mut links = Vec::new();
            for i in 0..CAPACITY {
                links.push(link(image, region, i)?);
            }
            let count = links.iter().take_while(|&&l| l != 0).count();
            if count == 0 || links[count..].iter().any(|&l| l != 0) {
                return Err(RecoveryError::LinkGap { region });
            }
            let keys = (0..count - 1).map(|i| image.region_word(region, WORD_KEYS + i)).collect();
            let children = links[..count]
                .iter()
                .map(|&l| decode(image, l, params, depth + 1, seen))
                .collect::<Result<_, _>>()?;
            Ok(Layout::Internal {
                tagged: kind == NodeKind::Tagged,
                keys,
                children,
            })
        }
        NodeKind::Entry => Err(RecoveryError::BadKind { region, tag }),
    }
}

/// Rebuilds a tree from a persisted image: decodes every node reachable from
/// the entry node, then builds fresh nodes with unlocked locks, zero
/// versions and clear marks, recomputing sizes from slot contents. Pending
/// rebalancing (tagged or underfull nodes) is completed before returning.
pub fn recover<E: ElimPolicy>(image: &PersistentImage, params: Params) -> Result<AbTree<Simulated, E>, RecoveryError> {
    let layout = decode_image(image, params)?;
    let tree = AbTree::from_layout(Simulated::new(), params, Disposal::Free, &layout);
    tree.repair_all();
    Ok(tree)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pmem::POccTree;
    use crate::tree::Dictionary;

    fn small() -> Params {
        Params::new(2, 4).unwrap()
    }

    #[test]
    fn quiescent_crash_recovers_same_keys() {
        let t = POccTree::with_params(small());
        for k in 1..=40 {
            t.insert(k * 3, k);
        }
        for k in 1..=10 {
            t.delete(k * 6);
        }
        let img = t.durability().shadow().crash_image();
        assert!(img.pending.is_empty());
        let r = recover::<crate::tree::NoElim>(&img.persisted, small()).unwrap();
        assert_eq!(r.entries(), t.entries());
        assert!(r.validate_structure().is_clean());
    }

    #[test]
    fn recovery_is_idempotent() {
        let t = POccTree::with_params(small());
        for k in 1..=30 {
            t.insert(k, k + 100);
        }
        let img = t.durability().shadow().crash_image().persisted;
        let a = recover::<crate::tree::NoElim>(&img, small()).unwrap();
        let b = recover::<crate::tree::NoElim>(&img, small()).unwrap();
        assert_eq!(a.layout().normalized(), b.layout().normalized());
        let again = a.durability().shadow().crash_image().persisted;
        let c = recover::<crate::tree::NoElim>(&again, small()).unwrap();
        assert_eq!(c.layout().normalized(), a.layout().normalized());
        assert_eq!(Dictionary::find(&c, 7), Some(107));
    }

    #[test]
    fn empty_image_is_rejected() {
        let err = recover::<crate::tree::NoElim>(&PersistentImage::default(), small()).unwrap_err();
        assert!(matches!(err, RecoveryError::BadKind { .. }));
    }
}
