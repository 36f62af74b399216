//! Behavior cloning on every demonstration step.

use serde::{Deserialize, Serialize};

use super::latents::LatentStore;
use super::model::{moments, Ssys1};
use super::{Ssys1Config, Ssys1Error};
use crate::lsys2::model::{patchify, NUM_PATCHES, PATCH_DIM};
use crate::simenv::dataset::Trajectory;
use crate::simenv::{ACTION_DIM, NUM_VIEWS, STATE_DIM};
use crate::tensor::{Adam, AdamConfig, Graph, ParamGrads, ParamSet, Rng, Tensor, TensorError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ssys1TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for Ssys1TrainConfig {
    fn default() -> Self {
        Self {
            steps: 8000,
            batch_size: 128,
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Ssys1TrainReport {
    pub losses: Vec<f64>,
}

impl Ssys1TrainReport {
    /// Mean of the first and last `window` losses.
    pub fn start_end(&self, window: usize) -> (f64, f64) {
        let w = window.min(self.losses.len()).max(1);
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        (mean(&self.losses[..w]), mean(&self.losses[self.losses.len() - w..]))
    }
}

fn numeric(step: usize) -> impl Fn(Ssys1Error) -> Ssys1Error {
    move |e| match e {
        Ssys1Error::Tensor(TensorError::NonFinite { .. } | TensorError::NanGradient(_)) => {
            Ssys1Error::Numeric { step }
        }
        other => other,
    }
}

/// Normalized network inputs and targets for a set of demonstration steps.
#[derive(Clone, Debug)]
pub struct Batch {
    /// Per view, `[B*C, 16, 16]` patches, oldest history entry first.
    pub views: [Tensor; NUM_VIEWS],
    pub states: Tensor,
    pub latents: Tensor,
    pub targets: Tensor,
}

impl Ssys1 {
    /// Behavior-cloning loss and its gradients under `params` (which must
    /// have this model's layout).
    pub fn loss_and_grads(&self, params: &ParamSet, batch: &Batch) -> Result<(f64, ParamGrads), Ssys1Error> {
        let mut g = Graph::new();
        let bp = params.bind(&mut g);
        let pred = self.graph_forward(
            &mut g,
            &bp,
            batch.views.clone(),
            batch.states.clone(),
            batch.latents.clone(),
        )?;
        let loss = g.bc_loss(pred, &batch.targets)?;
        let value = g.value(loss).data()[0];
        Ok((value, bp.collect(g.backward(loss)?, params)))
    }
}

/// Builds a batch from `(trajectory, step)` pairs, pulling each
/// trajectory's latent from `latents` (zeros when `None`).
pub fn make_batch(
    model: &Ssys1,
    trajectories: &[Trajectory],
    latents: Option<&LatentStore>,
    picks: &[(usize, usize)],
) -> Result<Batch, Ssys1Error> {
    let lat = trajectory_latents(model, trajectories, latents)?;
    batch(model, trajectories, &lat, picks)
}

/// History is left-padded with the first frame.
fn batch(
    model: &Ssys1,
    trajectories: &[Trajectory],
    latents: &[Vec<f64>],
    picks: &[(usize, usize)],
) -> Result<Batch, Ssys1Error> {
    let c = model.config().context;
    let b = picks.len();
    let mut views: [Vec<f64>; NUM_VIEWS] = Default::default();
    let mut states = Vec::with_capacity(b * c * STATE_DIM);
    let mut lat = Vec::with_capacity(b * model.config().latent_dim);
    let mut targets = Vec::with_capacity(b * ACTION_DIM);
    for &(ti, si) in picks {
        let steps = &trajectories[ti].steps;
        for k in 0..c {
            let o = &steps[(si + k).saturating_sub(c - 1)].observation;
            for (v, buf) in views.iter_mut().enumerate() {
                buf.extend(patchify(&o.views[v].to_f64())?.into_data());
            }
            states.extend(model.normalized_state(o));
        }
        lat.extend_from_slice(&latents[ti]);
        targets.extend_from_slice(&steps[si].action.0);
    }
    let views = views.map(|v| Tensor::new(vec![b * c, NUM_PATCHES, PATCH_DIM], v));
    let [a, bb, cc] = views;
    Ok(Batch {
        views: [a?, bb?, cc?],
        states: Tensor::new(vec![b * c, STATE_DIM], states)?,
        latents: Tensor::new(vec![b, model.config().latent_dim], lat)?,
        targets: Tensor::new(vec![b, ACTION_DIM], targets)?,
    })
}

/// Mean behavior-cloning loss over the given samples, no gradients.
pub fn eval_loss(
    model: &Ssys1,
    trajectories: &[Trajectory],
    latents: Option<&LatentStore>,
    picks: &[(usize, usize)],
) -> Result<f64, Ssys1Error> {
    let lat = trajectory_latents(model, trajectories, latents)?;
    let mut total = 0.0;
    for chunk in picks.chunks(128) {
        let bt = batch(model, trajectories, &lat, chunk)?;
        let mut g = Graph::new();
        let bp = model.params.bind(&mut g);
        let pred = model.graph_forward(&mut g, &bp, bt.views, bt.states, bt.latents)?;
        let loss = g.bc_loss(pred, &bt.targets)?;
        total += g.value(loss).data()[0] * chunk.len() as f64;
    }
    Ok(total / picks.len().max(1) as f64)
}

/// Normalized latent per trajectory; zeros for the no-latent baseline.
fn trajectory_latents(
    model: &Ssys1,
    trajectories: &[Trajectory],
    latents: Option<&LatentStore>,
) -> Result<Vec<Vec<f64>>, Ssys1Error> {
    trajectories
        .iter()
        .map(|t| match latents {
            Some(store) => model.normalized_latent(&store.for_trajectory(t)?.vector),
            None => Ok(vec![0.0; model.config().latent_dim]),
        })
        .collect()
}

/// Every `(trajectory, step)` pair.
pub fn all_samples(trajectories: &[Trajectory]) -> Vec<(usize, usize)> {
    trajectories
        .iter()
        .enumerate()
        .flat_map(|(ti, t)| (0..t.steps.len()).map(move |si| (ti, si)))
        .collect()
}

/// Trains a policy from scratch. With `latents = None` the policy sees a
/// zero latent everywhere (the unconditioned baseline).
pub fn train(
    trajectories: &[Trajectory],
    latents: Option<&LatentStore>,
    config: Ssys1Config,
    cfg: &Ssys1TrainConfig,
    seed: u64,
) -> Result<(Ssys1, Ssys1TrainReport), Ssys1Error> {
    let samples = all_samples(trajectories);
    if samples.is_empty() {
        return Err(Ssys1Error::Config("no training samples".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Ssys1Error::Config("batch_size must be >= 1".into()));
    }
    if let Some(store) = latents {
        if store.latent_dim != config.latent_dim {
            return Err(Ssys1Error::Config(format!(
                "latent store has {} dims, policy expects {}",
                store.latent_dim, config.latent_dim
            )));
        }
    }
    let mut model = Ssys1::init(config, latents.map(|s| s.tap), seed)?;
    let (sm, ss) = moments(
        trajectories
            .iter()
            .flat_map(|t| t.steps.iter().map(|s| s.observation.state.0.as_slice())),
        STATE_DIM,
    );
    model.meta.state_mean = sm;
    model.meta.state_std = ss;
    if let Some(store) = latents {
        let raw = trajectories
            .iter()
            .map(|t| store.for_trajectory(t).map(|f| f.vector))
            .collect::<Result<Vec<_>, _>>()?;
        let (lm, ls) = moments(raw.iter().map(|v| v.as_slice()), store.latent_dim);
        model.meta.latent_mean = lm;
        model.meta.latent_std = ls;
        model.meta.lsys2_hash = Some(store.checkpoint_hash.clone());
    }
    let lat = trajectory_latents(&model, trajectories, latents)?;

    let mut rng = Rng::derive(seed, 0x55_2);
    let mut adam = Adam::new(cfg.adam)?;
    let mut report = Ssys1TrainReport::default();
    for step in 0..cfg.steps {
        let picks: Vec<(usize, usize)> = (0..cfg.batch_size).map(|_| samples[rng.below(samples.len())]).collect();
        let bt = batch(&model, trajectories, &lat, &picks)?;
        let (loss, grads) = {
            let mut g = Graph::new();
            let bp = model.params.bind(&mut g);
            let pred = model
                .graph_forward(&mut g, &bp, bt.views, bt.states, bt.latents)
                .map_err(numeric(step))?;
            let loss = g.bc_loss(pred, &bt.targets).map_err(|e| numeric(step)(e.into()))?;
            let value = g.value(loss).data()[0];
            let grads = g.backward(loss).map_err(|e| numeric(step)(e.into()))?;
            (value, bp.collect(grads, &model.params))
        };
        if !loss.is_finite() {
            return Err(Ssys1Error::Numeric { step });
        }
        adam.step(&mut model.params, &grads).map_err(|e| numeric(step)(e.into()))?;
        report.losses.push(loss);
        if step % 250 == 0 {
            log::info!("ssys1 step {step} loss {loss:.4}");
        }
    }
    model.meta.train_steps = cfg.steps;
    Ok((model, report))
}

/// Checks that a latent store matches what the policy was trained against.
pub fn check_provenance(model: &Ssys1, store: &LatentStore) -> Result<(), Ssys1Error> {
    if model.meta.tap != Some(store.tap) || model.meta.lsys2_hash.as_deref() != Some(store.checkpoint_hash.as_str()) {
        return Err(Ssys1Error::Provenance(format!(
            "policy expects {:?} latents from {:?}, store has {:?} from {}",
            model.meta.tap, model.meta.lsys2_hash, store.tap, store.checkpoint_hash
        )));
    }
    Ok(())
}
