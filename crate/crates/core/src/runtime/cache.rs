use std::collections::HashMap;

use crate::lsys2::{LatentFeature, LatentTap};

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CacheKey {
    pub instruction_hash: u64,
    pub image_hash: u64,
    pub tap: LatentTap,
    pub checkpoint_hash: String,
}

/// Latents already produced in this session, with lookup counters.
#[derive(Clone, Debug, Default)]
pub struct LatentCache {
    entries: HashMap<CacheKey, LatentFeature>,
    hits: u64,
    misses: u64,
}

impl LatentCache {
    pub fn lookup(&mut self, key: &CacheKey) -> Option<&LatentFeature> {
        match self.entries.get(key) {
            Some(f) => {
                debug_assert!(f.instruction_hash == key.instruction_hash && f.image_hash == key.image_hash);
                self.hits += 1;
                Some(f)
            }
            None => {
                self.misses += 1;
                None
            }
        }
    }

    pub fn insert(&mut self, key: CacheKey, feature: LatentFeature) {
        self.entries.insert(key, feature);
    }

    pub fn hits(&self) -> u64 {
        self.hits
    }

    pub fn misses(&self) -> u64 {
        self.misses
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(i: u64) -> CacheKey {
        CacheKey {
            instruction_hash: i,
            image_hash: 9,
            tap: LatentTap::EndOfText,
            checkpoint_hash: "h".into(),
        }
    }

    #[test]
    fn counts_every_lookup() {
        let mut c = LatentCache::default();
        assert!(c.lookup(&key(1)).is_none());
        let f = LatentFeature {
            instruction_hash: 1,
            image_hash: 9,
            ..LatentFeature::zeros(4, LatentTap::EndOfText)
        };
        c.insert(key(1), f.clone());
        assert_eq!(c.lookup(&key(1)), Some(&f));
        assert!(c.lookup(&key(2)).is_none());
        let other_tap = CacheKey {
            tap: LatentTap::MeanOfText,
            ..key(1)
        };
        assert!(c.lookup(&other_tap).is_none());
        assert_eq!((c.hits(), c.misses()), (1, 3));
    }
}
