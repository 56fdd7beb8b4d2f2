//! Root-seed fan-out. Every source of randomness in the crate draws its
//! seed from a named substream of one root seed, so adding a run or a
//! parameter never perturbs the streams of existing ones.

use sha2::{Digest, Sha256};

/// Seed for the substream identified by `parts` under `root`.
pub fn substream_seed(root: u64, parts: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    for part in parts {
        hasher.update([0xff]);
        hasher.update(part.as_bytes());
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distinct_parts_distinct_seeds() {
        let a = substream_seed(1, &["run", "pretrain"]);
        let b = substream_seed(1, &["run", "finetune"]);
        let c = substream_seed(2, &["run", "pretrain"]);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, substream_seed(1, &["run", "pretrain"]));
    }

    #[test]
    fn concatenation_does_not_collide() {
        assert_ne!(
            substream_seed(1, &["ab", "c"]),
            substream_seed(1, &["a", "bc"])
        );
    }
}
