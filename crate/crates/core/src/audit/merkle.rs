//! Binary Merkle tree over audit record hashes.
//!
//! Leaves are `SHA-256(0x00 || record_hash)`, inner nodes are
//! `SHA-256(0x01 || left || right)`. When a level has an odd number of nodes
//! the last node is paired with itself.

use crate::platform::{hash, Digest};

fn leaf(d: &Digest) -> Digest {
    let mut buf = [0u8; 33];
    buf[1..].copy_from_slice(d.as_bytes());
    hash(&buf)
}

fn node(l: &Digest, r: &Digest) -> Digest {
    let mut buf = [0u8; 65];
    buf[0] = 1;
    buf[1..33].copy_from_slice(l.as_bytes());
    buf[33..].copy_from_slice(r.as_bytes());
    hash(&buf)
}

/// Root over `leaves` in order, or `None` for an empty range.
pub fn merkle_root(leaves: &[Digest]) -> Option<Digest> {
    let mut level: Vec<Digest> = leaves.iter().map(leaf).collect();
    if level.is_empty() {
        return None;
    }
    while level.len() > 1 {
        level = level
            .chunks(2)
            .map(|pair| node(&pair[0], pair.get(1).unwrap_or(&pair[0])))
            .collect();
    }
    level.pop()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_leaf_root_is_leaf_hash() {
        let d = hash(b"r1");
        assert_eq!(merkle_root(&[d]), Some(leaf(&d)));
        assert_eq!(merkle_root(&[]), None);
    }

    #[test]
    fn odd_level_duplicates_last() {
        let [a, b, c] = [hash(b"a"), hash(b"b"), hash(b"c")];
        let want = node(&node(&leaf(&a), &leaf(&b)), &node(&leaf(&c), &leaf(&c)));
        assert_eq!(merkle_root(&[a, b, c]), Some(want));
    }
}
