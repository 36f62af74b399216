//! Teacher-forced cross-entropy training on first-step action tokens.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{patchify, Lsys2, DECODE_STEPS, NUM_PATCHES, PATCH_DIM};
use super::tokenizer::{self, ActionTokenizer, ACT};
use super::{Lsys2Config, Lsys2Error, SourceModel};
use crate::simenv::dataset::Trajectory;
use crate::simenv::{TaskFamily, View};
use crate::tensor::{Adam, AdamConfig, Graph, Rng, Tensor, TensorError};

/// One training pair: first frame and instruction in, first action's bins out.
#[derive(Clone, Debug, PartialEq)]
pub struct Lsys2Example {
    pub task_name: String,
    pub family: TaskFamily,
    pub view: View,
    pub instruction: String,
    pub token_ids: Vec<usize>,
    pub target_bins: [usize; DECODE_STEPS],
}

impl Lsys2Example {
    pub fn from_trajectory(t: &Trajectory, tok: &ActionTokenizer) -> Result<Self, Lsys2Error> {
        let first = t
            .steps
            .first()
            .ok_or_else(|| Lsys2Error::State("empty trajectory".into()))?;
        Ok(Self {
            task_name: t.task_name.clone(),
            family: t.task.family,
            view: first.observation.views[0],
            instruction: t.instruction.clone(),
            token_ids: tokenizer::tokenize_instruction(&t.instruction)?,
            target_bins: tok.tokenize(&first.action)?,
        })
    }

    /// Decoder inputs after the patches: instruction, ACT, then the first
    /// six target tokens (teacher forcing).
    fn input_ids(&self) -> Vec<usize> {
        let mut ids = self.token_ids.clone();
        ids.push(ACT);
        ids.extend(
            self.target_bins[..DECODE_STEPS - 1]
                .iter()
                .map(|b| tokenizer::first_action_id() + b),
        );
        ids
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Lsys2TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for Lsys2TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 32,
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
}

impl TrainReport {
    /// Mean of the first and last `window` losses.
    pub fn start_end(&self, window: usize) -> (f64, f64) {
        let w = window.min(self.losses.len()).max(1);
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        (mean(&self.losses[..w]), mean(&self.losses[self.losses.len() - w..]))
    }
}

/// Groups examples by sequence length so each batch is rectangular.
fn buckets(examples: &[Lsys2Example]) -> Vec<Vec<usize>> {
    let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, e) in examples.iter().enumerate() {
        by_len.entry(e.token_ids.len()).or_default().push(i);
    }
    by_len.into_values().collect()
}

fn batch_tensors(examples: &[Lsys2Example], idx: &[usize]) -> Result<(Tensor, Vec<usize>, Vec<usize>), Lsys2Error> {
    let mut patches = Vec::with_capacity(idx.len() * NUM_PATCHES * PATCH_DIM);
    let mut ids = Vec::new();
    let mut targets = Vec::new();
    for &i in idx {
        let e = &examples[i];
        patches.extend(patchify(&e.view.to_f64())?.into_data());
        ids.extend(e.input_ids());
        targets.extend_from_slice(&e.target_bins);
    }
    Ok((Tensor::new(vec![idx.len(), NUM_PATCHES, PATCH_DIM], patches)?, ids, targets))
}

fn batch_loss(model: &Lsys2, examples: &[Lsys2Example], idx: &[usize]) -> Result<f64, Lsys2Error> {
    let (patches, ids, targets) = batch_tensors(examples, idx)?;
    let mut g = Graph::new();
    let bp = model.params.bind(&mut g);
    let (_, last) = model.graph_forward(&mut g, &bp, patches, &ids, idx.len())?;
    let logits = model.graph_action_logits(&mut g, &bp, last, idx.len())?;
    let loss = g.cross_entropy(logits, &targets)?;
    Ok(g.value(loss).data()[0])
}

/// Mean teacher-forced cross-entropy over `examples`.
pub fn mean_loss(model: &Lsys2, examples: &[Lsys2Example]) -> Result<f64, Lsys2Error> {
    if examples.is_empty() {
        return Err(Lsys2Error::State("no examples".into()));
    }
    let mut total = 0.0;
    for b in buckets(examples) {
        for chunk in b.chunks(64) {
            total += batch_loss(model, examples, chunk)? * chunk.len() as f64;
        }
    }
    Ok(total / examples.len() as f64)
}

/// Fraction of greedily decoded action tokens equal to the targets.
pub fn token_accuracy(model: &Lsys2, examples: &[Lsys2Example]) -> Result<f64, Lsys2Error> {
    if examples.is_empty() {
        return Err(Lsys2Error::State("no examples".into()));
    }
    let hits = examples
        .par_iter()
        .map(|e| -> Result<usize, Lsys2Error> {
            let pre = model.prefill(&e.view, &e.instruction)?;
            let dec = model.decode_actions(&pre)?;
            Ok(dec.bins.iter().zip(&e.target_bins).filter(|(a, b)| a == b).count())
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / (examples.len() * DECODE_STEPS) as f64)
}

fn numeric(step: usize) -> impl Fn(Lsys2Error) -> Lsys2Error {
    move |e| match e {
        Lsys2Error::Tensor(TensorError::NonFinite { .. } | TensorError::NanGradient(_)) => {
            Lsys2Error::Numeric { step }
        }
        other => other,
    }
}

fn train_loop(
    model: &mut Lsys2,
    examples: &[Lsys2Example],
    cfg: &Lsys2TrainConfig,
    rng: &mut Rng,
) -> Result<TrainReport, Lsys2Error> {
    if examples.is_empty() {
        return Err(Lsys2Error::State("no training examples".into()));
    }
    let groups = buckets(examples);
    let mut adam = Adam::new(cfg.adam.clone())?;
    let mut report = TrainReport::default();
    for step in 0..cfg.steps {
        // Pick a length bucket proportionally to its size, then sample from it.
        let mut r = rng.below(examples.len());
        let group = groups
            .iter()
            .find(|g| {
                if r < g.len() {
                    true
                } else {
                    r -= g.len();
                    false
                }
            })
            .expect("r < total");
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| group[rng.below(group.len())]).collect();
        let (patches, ids, targets) = batch_tensors(examples, &idx)?;
        let (loss, grads) = {
            let mut g = Graph::new();
            let bp = model.params.bind(&mut g);
            let (_, last) = model
                .graph_forward(&mut g, &bp, patches, &ids, idx.len())
                .map_err(numeric(step))?;
            let logits = model
                .graph_action_logits(&mut g, &bp, last, idx.len())
                .map_err(numeric(step))?;
            let loss = g.cross_entropy(logits, &targets).map_err(|e| numeric(step)(e.into()))?;
            let value = g.value(loss).data()[0];
            let grads = g.backward(loss).map_err(|e| numeric(step)(e.into()))?;
            (value, bp.collect(grads, &model.params))
        };
        if !loss.is_finite() {
            return Err(Lsys2Error::Numeric { step });
        }
        adam.step(&mut model.params, &grads).map_err(|e| numeric(step)(e.into()))?;
        report.losses.push(loss);
        if step % 250 == 0 {
            log::info!("lsys2 step {step} loss {loss:.4}");
        }
    }
    model.meta.train_steps += cfg.steps;
    Ok(report)
}

/// Trains from scratch on every task's first-step actions.
pub fn pretrain(
    examples: &[Lsys2Example],
    config: Lsys2Config,
    action_tokenizer: ActionTokenizer,
    cfg: &Lsys2TrainConfig,
    seed: u64,
) -> Result<(Lsys2, TrainReport), Lsys2Error> {
    let mut model = Lsys2::init(config, action_tokenizer, seed)?;
    let mut rng = Rng::derive(seed, 0x9e_01);
    let report = train_loop(&mut model, examples, cfg, &mut rng)?;
    model.meta.tag = SourceModel::Pretrained;
    model.meta.lineage.push(SourceModel::Pretrained);
    Ok((model, report))
}

/// Continues training a pretrained model on a narrower subset with fresh
/// optimizer state.
pub fn finetune(
    parent: &Lsys2,
    subset: &[Lsys2Example],
    cfg: &Lsys2TrainConfig,
    seed: u64,
) -> Result<(Lsys2, TrainReport), Lsys2Error> {
    if parent.meta.tag != SourceModel::Pretrained {
        return Err(Lsys2Error::State(format!(
            "finetune needs a pretrained checkpoint, got {:?}",
            parent.meta.tag
        )));
    }
    let mut model = Lsys2 {
        params: parent.params.clone(),
        meta: parent.meta.clone(),
    };
    model.meta.parent_hash = Some(parent.checkpoint_hash());
    model.meta.seeds.push(seed);
    let mut rng = Rng::derive(seed, 0x9e_02);
    let report = train_loop(&mut model, subset, cfg, &mut rng)?;
    model.meta.tag = SourceModel::Finetuned;
    model.meta.lineage.push(SourceModel::Finetuned);
    Ok((model, report))
}
