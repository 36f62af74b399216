//! On-disk cache of latent features, computed once per (first frame,
//! instruction) before policy training.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;

use super::Ssys1Error;
use crate::lsys2::{extract_latent, image_hash, instruction_hash, LatentFeature, LatentTap, Lsys2, SourceModel};
use crate::simenv::dataset::Trajectory;
use crate::simenv::View;

const MAGIC: &[u8; 4] = b"DPL1";
const HASH_LEN: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LatentKey {
    pub checkpoint_hash: String,
    pub tap: LatentTap,
    pub instruction_hash: u64,
    pub image_hash: u64,
}

/// Latents from one checkpoint and tap.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentStore {
    pub checkpoint_hash: String,
    pub tap: LatentTap,
    pub source_model: SourceModel,
    pub latent_dim: usize,
    entries: BTreeMap<(u64, u64), Vec<f64>>,
}

impl LatentStore {
    pub fn new(checkpoint_hash: String, tap: LatentTap, source_model: SourceModel, latent_dim: usize) -> Self {
        Self {
            checkpoint_hash,
            tap,
            source_model,
            latent_dim,
            entries: BTreeMap::new(),
        }
    }

    /// Runs the large model on every distinct first frame and instruction.
    pub fn precompute(model: &Lsys2, tap: LatentTap, trajectories: &[Trajectory]) -> Result<Self, Ssys1Error> {
        let mut inputs: BTreeMap<(u64, u64), (&View, &str)> = BTreeMap::new();
        for t in trajectories {
            let first = t
                .steps
                .first()
                .ok_or_else(|| Ssys1Error::Format(format!("empty trajectory for {}", t.task_name)))?;
            let view = &first.observation.views[0];
            inputs
                .entry((instruction_hash(&t.instruction), image_hash(view)))
                .or_insert((view, &t.instruction));
        }
        let source = model.meta.tag;
        let computed = inputs
            .into_par_iter()
            .map(|(key, (view, instruction))| -> Result<_, Ssys1Error> {
                let pre = model.prefill(view, instruction)?;
                let dec = model.decode_actions(&pre)?;
                Ok((key, extract_latent(&pre, &dec, tap, source)?.vector))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut store = Self::new(model.checkpoint_hash(), tap, source, model.config().latent_dim());
        store.entries.extend(computed);
        log::info!("precomputed {} latents for {:?}", store.len(), tap);
        Ok(store)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, feature: &LatentFeature) -> Result<(), Ssys1Error> {
        if feature.tap != self.tap || feature.vector.len() != self.latent_dim {
            return Err(Ssys1Error::Provenance(format!(
                "latent {:?}/{} does not belong in a {:?}/{} store",
                feature.tap,
                feature.vector.len(),
                self.tap,
                self.latent_dim
            )));
        }
        self.entries
            .insert((feature.instruction_hash, feature.image_hash), feature.vector.clone());
        Ok(())
    }

    pub fn get(&self, key: &LatentKey) -> Result<LatentFeature, Ssys1Error> {
        if key.checkpoint_hash != self.checkpoint_hash || key.tap != self.tap {
            return Err(Ssys1Error::Provenance(format!(
                "store holds {:?} latents of {}, asked for {:?} of {}",
                self.tap, self.checkpoint_hash, key.tap, key.checkpoint_hash
            )));
        }
        let vector = self
            .entries
            .get(&(key.instruction_hash, key.image_hash))
            .ok_or_else(|| {
                Ssys1Error::Provenance(format!(
                    "no cached latent for instruction {:016x} image {:016x}",
                    key.instruction_hash, key.image_hash
                ))
            })?;
        Ok(LatentFeature {
            vector: vector.clone(),
            tap: self.tap,
            source_model: self.source_model,
            instruction_hash: key.instruction_hash,
            image_hash: key.image_hash,
        })
    }

    /// Latent for a trajectory's first frame and instruction.
    pub fn for_trajectory(&self, t: &Trajectory) -> Result<LatentFeature, Ssys1Error> {
        let first = t
            .steps
            .first()
            .ok_or_else(|| Ssys1Error::Format(format!("empty trajectory for {}", t.task_name)))?;
        self.get(&LatentKey {
            checkpoint_hash: self.checkpoint_hash.clone(),
            tap: self.tap,
            instruction_hash: instruction_hash(&t.instruction),
            image_hash: image_hash(&first.observation.views[0]),
        })
    }

    pub fn vectors(&self) -> impl Iterator<Item = &[f64]> {
        self.entries.values().map(|v| v.as_slice())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let mut hash = self.checkpoint_hash.as_bytes().to_vec();
        hash.resize(HASH_LEN, b' ');
        out.extend_from_slice(&hash);
        out.push(self.tap.code());
        out.push(match self.source_model {
            SourceModel::Untrained => 0,
            SourceModel::Pretrained => 1,
            SourceModel::Finetuned => 2,
        });
        out.extend_from_slice(&(self.latent_dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for ((ih, vh), v) in &self.entries {
            out.extend_from_slice(&ih.to_le_bytes());
            out.extend_from_slice(&vh.to_le_bytes());
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, Ssys1Error> {
        let bad = |m: &str| Ssys1Error::Format(format!("latent store: {m}"));
        let head = 4 + HASH_LEN + 2 + 4 + 8;
        if bytes.len() < head || &bytes[..4] != MAGIC {
            return Err(bad("bad header"));
        }
        let checkpoint_hash = std::str::from_utf8(&bytes[4..4 + HASH_LEN])
            .map_err(|_| bad("hash is not utf-8"))?
            .trim_end()
            .to_string();
        let mut at = 4 + HASH_LEN;
        let tap = LatentTap::from_code(bytes[at]).ok_or_else(|| bad("unknown tap"))?;
        let source_model = match bytes[at + 1] {
            0 => SourceModel::Untrained,
            1 => SourceModel::Pretrained,
            2 => SourceModel::Finetuned,
            _ => return Err(bad("unknown source model")),
        };
        at += 2;
        let latent_dim = u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize;
        let count = u64::from_le_bytes(bytes[at + 4..at + 12].try_into().expect("8 bytes")) as usize;
        at += 12;
        let record = 16 + 8 * latent_dim;
        if bytes.len() != head + count.checked_mul(record).ok_or_else(|| bad("record count overflows"))? {
            return Err(bad("length does not match record count"));
        }
        let mut store = Self::new(checkpoint_hash, tap, source_model, latent_dim);
        for r in bytes[at..].chunks_exact(record) {
            let ih = u64::from_le_bytes(r[..8].try_into().expect("8 bytes"));
            let vh = u64::from_le_bytes(r[8..16].try_into().expect("8 bytes"));
            let v = r[16..]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            store.entries.insert((ih, vh), v);
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<(), Ssys1Error> {
        Ok(std::fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self, Ssys1Error> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
