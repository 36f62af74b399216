//! The large model: a small causal transformer over image patches and
//! instruction words that decodes seven action tokens and exposes its hidden
//! states as latent features.

pub mod model;
pub mod tokenizer;
pub mod train;

pub use model::{Decode, Lsys2, Lsys2Meta, Prefill, SeqLayout, DECODE_STEPS, NUM_PATCHES};
pub use tokenizer::{detokenize_instruction, tokenize_instruction, ActionTokenizer};
pub use train::{finetune, pretrain, token_accuracy, Lsys2Example, Lsys2TrainConfig, TrainReport};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::hash64;
use crate::simenv::View;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Lsys2Error {
    #[error("word `{0}` is not in the vocabulary")]
    Vocab(String),
    #[error("sequence of {len} tokens exceeds max_seq {max}")]
    Length { len: usize, max: usize },
    #[error("state error: {0}")]
    State(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("non-finite loss at step {step}")]
    Numeric { step: usize },
    #[error("provenance error: {0}")]
    Provenance(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Lsys2Config {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub max_seq: usize,
    /// Block whose output feeds the latent taps (1-based); `None` is the last.
    pub latent_layer: Option<usize>,
}

impl Default for Lsys2Config {
    fn default() -> Self {
        Self {
            d_model: 64,
            layers: 4,
            heads: 4,
            ffn_mult: 4,
            max_seq: 48,
            latent_layer: None,
        }
    }
}

impl Lsys2Config {
    pub fn latent_dim(&self) -> usize {
        self.d_model
    }

    pub fn vocab(&self) -> usize {
        tokenizer::vocab_size()
    }

    pub fn latent_block(&self) -> usize {
        self.latent_layer.unwrap_or(self.layers)
    }

    pub fn validate(&self) -> Result<(), Lsys2Error> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Lsys2Error::Config(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.layers == 0 || self.ffn_mult == 0 {
            return Err(Lsys2Error::Config("layers and ffn_mult must be >= 1".into()));
        }
        if self.max_seq < NUM_PATCHES + 2 + DECODE_STEPS {
            return Err(Lsys2Error::Config(format!("max_seq {} too small", self.max_seq)));
        }
        if self.latent_block() == 0 || self.latent_block() > self.layers {
            return Err(Lsys2Error::Config(format!(
                "latent_layer {} outside 1..={}",
                self.latent_block(),
                self.layers
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LatentTap {
    MeanOfText,
    EndOfText,
    StartOfAction,
    EndOfAction,
}

impl LatentTap {
    pub const ALL: [LatentTap; 4] = [
        LatentTap::MeanOfText,
        LatentTap::EndOfText,
        LatentTap::StartOfAction,
        LatentTap::EndOfAction,
    ];

    pub fn is_prefill(self) -> bool {
        matches!(self, LatentTap::MeanOfText | LatentTap::EndOfText)
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Self::ALL.get(c as usize).copied()
    }
}

impl std::str::FromStr for LatentTap {
    type Err = Lsys2Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|t| format!("{t:?}").eq_ignore_ascii_case(s))
            .ok_or_else(|| Lsys2Error::Config(format!("unknown tap `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SourceModel {
    /// Randomly initialized, never trained.
    Untrained,
    Pretrained,
    Finetuned,
}

/// One exported hidden state, bound to the inputs that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentFeature {
    pub vector: Vec<f64>,
    pub tap: LatentTap,
    pub source_model: SourceModel,
    pub instruction_hash: u64,
    pub image_hash: u64,
}

impl LatentFeature {
    /// Hash of every bit of the feature, used for immutability checks.
    pub fn fingerprint(&self) -> u64 {
        let mut bytes = Vec::with_capacity(self.vector.len() * 8 + 18);
        for v in &self.vector {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.extend_from_slice(&self.instruction_hash.to_le_bytes());
        bytes.extend_from_slice(&self.image_hash.to_le_bytes());
        bytes.push(self.tap.code());
        hash64(&bytes)
    }

    pub fn zeros(dim: usize, tap: LatentTap) -> Self {
        Self {
            vector: vec![0.0; dim],
            tap,
            source_model: SourceModel::Untrained,
            instruction_hash: 0,
            image_hash: 0,
        }
    }
}

pub fn instruction_hash(instruction: &str) -> u64 {
    hash64(tokenizer::normalize(instruction).as_bytes())
}

pub fn image_hash(view: &View) -> u64 {
    hash64(&view.0)
}

/// Picks the tapped hidden state out of a prefill/decode pair.
pub fn extract_latent(
    prefill: &Prefill,
    decode: &Decode,
    tap: LatentTap,
    source_model: SourceModel,
) -> Result<LatentFeature, Lsys2Error> {
    let d = prefill.hiddens.last_dim();
    let vector = match tap {
        LatentTap::MeanOfText => {
            let pos = prefill.layout.text.clone();
            if pos.is_empty() {
                return Err(Lsys2Error::State("instruction has no words to average".into()));
            }
            let mut acc = vec![0.0; d];
            for p in pos.clone() {
                for (a, h) in acc.iter_mut().zip(prefill.hiddens.row(p)) {
                    *a += h;
                }
            }
            let n = pos.len() as f64;
            acc.iter().map(|a| a / n).collect()
        }
        LatentTap::EndOfText => {
            let pos = prefill.layout.text.clone();
            if pos.is_empty() {
                return Err(Lsys2Error::State("instruction has no words".into()));
            }
            prefill.hiddens.row(pos.end - 1).to_vec()
        }
        LatentTap::StartOfAction => decode.hiddens[0].clone(),
        LatentTap::EndOfAction => decode.hiddens[DECODE_STEPS - 1].clone(),
    };
    if vector.iter().any(|v| !v.is_finite()) {
        return Err(Lsys2Error::Tensor(TensorError::NonFinite { op: "latent" }));
    }
    Ok(LatentFeature {
        vector,
        tap,
        source_model,
        instruction_hash: prefill.instruction_hash,
        image_hash: prefill.image_hash,
    })
}

/// Absolute sequence positions each tap reads from.
pub fn tap_positions(layout: &SeqLayout, tap: LatentTap) -> Vec<usize> {
    match tap {
        LatentTap::MeanOfText => layout.text.clone().collect(),
        LatentTap::EndOfText => layout.text.clone().last().into_iter().collect(),
        LatentTap::StartOfAction => vec![layout.decode_start],
        LatentTap::EndOfAction => vec![layout.decode_start + DECODE_STEPS - 1],
    }
}
