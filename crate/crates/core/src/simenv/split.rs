//! Seen/unseen partition of layouts and object shapes.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::catalog::{Catalog, TaskDef, TaskSpec, Variant, NUM_OBJECTS};
use super::world::variant_salt;
use super::SimError;
use crate::tensor::Rng;

pub const LAYOUTS_PER_TASK: usize = 40;
pub const UNSEEN_LAYOUT_FRACTION: f64 = 0.25;

/// One concrete layout/object combination for a task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Variation {
    pub layout_seed: u64,
    pub object_id: usize,
}

/// Split for one scene variant. Tasks sharing a variant (open/close of the
/// same fixture) share the split, so an unseen kitchen is unseen for both.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSplit {
    pub variant: Variant,
    pub seen_layouts: Vec<u64>,
    pub unseen_layouts: Vec<u64>,
    pub held_out_object: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSplit {
    pub seed: u64,
    pub variants: Vec<VariantSplit>,
}

pub fn split_eval_variants(catalog: &Catalog, seed: u64) -> Result<EvalSplit, SimError> {
    split_with(catalog, seed, LAYOUTS_PER_TASK, NUM_OBJECTS)
}

pub fn split_with(
    catalog: &Catalog,
    seed: u64,
    layouts: usize,
    objects: usize,
) -> Result<EvalSplit, SimError> {
    if objects < 4 || layouts < 8 || objects > NUM_OBJECTS {
        return Err(SimError::Split(format!(
            "need >= 4 objects and >= 8 layouts, got {objects} and {layouts}"
        )));
    }
    let mut seen_variants = Vec::new();
    for t in &catalog.tasks {
        if !seen_variants.contains(&t.variant) {
            seen_variants.push(t.variant);
        }
    }
    let unseen_n = ((layouts as f64) * UNSEEN_LAYOUT_FRACTION).ceil() as usize;
    let variants = seen_variants
        .into_iter()
        .map(|v| {
            let mut rng = Rng::derive(seed, 0x5_0000 + variant_salt(v));
            let mut pool: Vec<u64> = Vec::with_capacity(layouts);
            let mut taken = HashSet::new();
            while pool.len() < layouts {
                let s = rng.next_u64() >> 16;
                if taken.insert(s) {
                    pool.push(s);
                }
            }
            let unseen_layouts = pool.split_off(layouts - unseen_n);
            VariantSplit {
                variant: v,
                seen_layouts: pool,
                unseen_layouts,
                held_out_object: rng.below(objects),
            }
        })
        .collect();
    let split = EvalSplit { seed, variants };
    split.validate()?;
    Ok(split)
}

impl VariantSplit {
    pub fn is_seen(&self, v: &Variation) -> bool {
        v.object_id != self.held_out_object && self.seen_layouts.contains(&v.layout_seed)
    }

    pub fn seen(&self) -> Vec<Variation> {
        let mut out = Vec::new();
        for &layout_seed in &self.seen_layouts {
            for object_id in (0..NUM_OBJECTS).filter(|&o| o != self.held_out_object) {
                out.push(Variation {
                    layout_seed,
                    object_id,
                });
            }
        }
        out
    }

    /// Unseen layout or unseen object (or both).
    pub fn unseen(&self) -> Vec<Variation> {
        let mut out = Vec::new();
        for &layout_seed in self.seen_layouts.iter().chain(&self.unseen_layouts) {
            for object_id in 0..NUM_OBJECTS {
                let v = Variation {
                    layout_seed,
                    object_id,
                };
                if !self.is_seen(&v) {
                    out.push(v);
                }
            }
        }
        out
    }
}

impl EvalSplit {
    pub fn for_variant(&self, v: Variant) -> Result<&VariantSplit, SimError> {
        self.variants
            .iter()
            .find(|s| s.variant == v)
            .ok_or_else(|| SimError::Split(format!("no split for {v:?}")))
    }

    pub fn validate(&self) -> Result<(), SimError> {
        for vs in &self.variants {
            let seen: HashSet<_> = vs.seen().into_iter().collect();
            if vs.unseen().iter().any(|v| seen.contains(v)) {
                return Err(SimError::Split(format!("overlap in {:?}", vs.variant)));
            }
            if vs.seen_layouts.iter().any(|l| vs.unseen_layouts.contains(l)) {
                return Err(SimError::Split(format!("layout overlap in {:?}", vs.variant)));
            }
        }
        Ok(())
    }

    /// `n` evaluation episodes on unseen combinations, cycling through a
    /// seeded shuffle of them.
    pub fn eval_specs(&self, def: &TaskDef, n: usize, seed: u64) -> Result<Vec<TaskSpec>, SimError> {
        self.specs_from(self.for_variant(def.variant)?.unseen(), def, n, seed)
    }

    /// Like [`EvalSplit::eval_specs`] but over the training combinations.
    pub fn seen_specs(&self, def: &TaskDef, n: usize, seed: u64) -> Result<Vec<TaskSpec>, SimError> {
        self.specs_from(self.for_variant(def.variant)?.seen(), def, n, seed)
    }

    fn specs_from(&self, mut pool: Vec<Variation>, def: &TaskDef, n: usize, seed: u64) -> Result<Vec<TaskSpec>, SimError> {
        if pool.is_empty() {
            return Err(SimError::Split(format!("no combinations for {}", def.name)));
        }
        let mut rng = Rng::derive(seed, 0x6_0000 + variant_salt(def.variant));
        rng.shuffle(&mut pool);
        Ok((0..n)
            .map(|i| {
                let v = pool[i % pool.len()];
                def.spec(v.layout_seed, v.object_id)
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seen_and_unseen_disjoint() {
        let c = Catalog::standard();
        let s = split_eval_variants(&c, 3).unwrap();
        for vs in &s.variants {
            let seen: HashSet<_> = vs.seen().into_iter().collect();
            assert!(vs.unseen().iter().all(|v| !seen.contains(v)));
            assert!(vs.unseen_layouts.len() * 4 >= LAYOUTS_PER_TASK);
            assert!(vs.seen().iter().all(|v| v.object_id != vs.held_out_object));
        }
        for t in &c.tasks {
            assert!(s.for_variant(t.variant).is_ok());
        }
    }

    #[test]
    fn split_reproducible() {
        let c = Catalog::standard();
        assert_eq!(split_eval_variants(&c, 9).unwrap(), split_eval_variants(&c, 9).unwrap());
        assert_ne!(split_eval_variants(&c, 9).unwrap(), split_eval_variants(&c, 10).unwrap());
    }

    #[test]
    fn too_few_layouts_rejected() {
        let c = Catalog::standard();
        assert!(split_with(&c, 0, 4, 5).is_err());
        assert!(split_with(&c, 0, 40, 3).is_err());
    }

    #[test]
    fn eval_specs_are_unseen() {
        let c = Catalog::standard();
        let s = split_eval_variants(&c, 1).unwrap();
        let def = &c.tasks[2];
        let vs = s.for_variant(def.variant).unwrap();
        for spec in s.eval_specs(def, 50, 4).unwrap() {
            let v = Variation {
                layout_seed: spec.layout_seed,
                object_id: spec.object_id,
            };
            assert!(!vs.is_seen(&v));
        }
    }
}
