//! The fast policy: a small transformer over a latent token and a short
//! history of encoded observations that regresses the continuous action.

pub mod latents;
pub mod model;
pub mod train;

pub use latents::{LatentKey, LatentStore};
pub use model::{bc_loss, EncodedObs, PolicyInput, Ssys1, Ssys1Meta};
pub use train::{all_samples, check_provenance, eval_loss, make_batch, train, Batch, Ssys1TrainConfig, Ssys1TrainReport};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lsys2::Lsys2Error;
use crate::simenv::SimError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Ssys1Error {
    #[error("config error: {0}")]
    Config(String),
    #[error("provenance error: {0}")]
    Provenance(String),
    #[error("non-finite loss at step {step}")]
    Numeric { step: usize },
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Lsys2(#[from] Lsys2Error),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ssys1Config {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    /// Observation history length.
    pub context: usize,
    pub ffn_mult: usize,
    /// Width of the per-patch hidden layer in each view encoder.
    pub patch_hidden: usize,
    pub state_hidden: usize,
    /// Incoming latent width; must match the large model's `d_model`.
    pub latent_dim: usize,
    pub latent_hidden: usize,
}

impl Default for Ssys1Config {
    fn default() -> Self {
        Self {
            d_model: 32,
            layers: 2,
            heads: 4,
            context: 5,
            ffn_mult: 2,
            patch_hidden: 8,
            state_hidden: 32,
            latent_dim: 64,
            latent_hidden: 32,
        }
    }
}

impl Ssys1Config {
    pub const TOKENS_PER_STEP: usize = 4;

    pub fn seq_len(&self) -> usize {
        1 + Self::TOKENS_PER_STEP * self.context
    }

    pub fn validate(&self) -> Result<(), Ssys1Error> {
        if self.context == 0 {
            return Err(Ssys1Error::Config("context must be >= 1".into()));
        }
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Ssys1Error::Config(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.layers == 0
            || self.ffn_mult == 0
            || self.patch_hidden == 0
            || self.state_hidden == 0
            || self.latent_dim == 0
            || self.latent_hidden == 0
        {
            return Err(Ssys1Error::Config("all widths must be >= 1".into()));
        }
        Ok(())
    }
}
