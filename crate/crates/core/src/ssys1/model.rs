//! Observation encoders, latent projection and the policy transformer.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Ssys1Config, Ssys1Error};
use crate::hashing::sha256_hex;
use crate::lsys2::model::{patchify, NUM_PATCHES, PATCH_DIM};
use crate::lsys2::{LatentFeature, LatentTap};
use crate::simenv::{Action, Observation, ACTION_DIM, NUM_VIEWS, STATE_DIM};
use crate::tensor::{
    gelu, layernorm_forward, linear_forward, multi_head_attention, read_checkpoint, write_checkpoint,
    BoundParams, Graph, ParamSet, Rng, Tensor, Var,
};

const LN_EPS: f64 = 1e-5;
const STD_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ssys1Meta {
    pub config: Ssys1Config,
    /// `None` for the zero-latent baseline.
    pub tap: Option<LatentTap>,
    pub lsys2_hash: Option<String>,
    pub dataset_hash: Option<String>,
    pub seed: u64,
    pub train_steps: usize,
    pub state_mean: Vec<f64>,
    pub state_std: Vec<f64>,
    pub latent_mean: Vec<f64>,
    pub latent_std: Vec<f64>,
}

pub struct Ssys1 {
    pub params: ParamSet,
    pub meta: Ssys1Meta,
}

/// The four tokens (three views, then state) of one observation, `4 * d` floats.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedObs(pub Vec<f64>);

pub struct PolicyInput<'a> {
    /// Oldest first; exactly `context` entries.
    pub obs_history: &'a [Observation],
    pub latent: &'a LatentFeature,
}

/// `mean|p - t| + mean((p - t)^2)`.
pub fn bc_loss(pred: &Action, target: &Action) -> f64 {
    let n = ACTION_DIM as f64;
    let mut l1 = 0.0;
    let mut l2 = 0.0;
    for (p, t) in pred.0.iter().zip(&target.0) {
        l1 += (p - t).abs();
        l2 += (p - t) * (p - t);
    }
    l1 / n + l2 / n
}

fn gelu_tensor(mut t: Tensor) -> Tensor {
    for v in t.data_mut() {
        *v = gelu(*v);
    }
    t
}

fn add_in_place(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

pub(crate) fn normalize(values: &[f64], mean: &[f64], std: &[f64]) -> Vec<f64> {
    values
        .iter()
        .zip(mean.iter().zip(std))
        .map(|(v, (m, s))| (v - m) / s)
        .collect()
}

/// Per-dimension mean and std (floored) of `rows`.
pub(crate) fn moments<'a>(rows: impl Iterator<Item = &'a [f64]>, dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut n = 0usize;
    let mut sum = vec![0.0; dim];
    let mut sq = vec![0.0; dim];
    for r in rows {
        n += 1;
        for j in 0..dim {
            sum[j] += r[j];
            sq[j] += r[j] * r[j];
        }
    }
    if n == 0 {
        return (vec![0.0; dim], vec![1.0; dim]);
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| {
            let var = (q / n as f64 - m * m).max(0.0);
            if var.sqrt() < STD_FLOOR {
                1.0
            } else {
                var.sqrt()
            }
        })
        .collect();
    (mean, std)
}

impl Ssys1 {
    pub fn init(config: Ssys1Config, tap: Option<LatentTap>, seed: u64) -> Result<Self, Ssys1Error> {
        config.validate()?;
        let d = config.d_model;
        let f = d * config.ffn_mult;
        let ph = config.patch_hidden;
        let mut rng = Rng::derive(seed, 0x55_1);
        let mut p = ParamSet::new();
        for v in 0..NUM_VIEWS {
            p.init_weight(&format!("enc{v}.w1"), PATCH_DIM, ph, &mut rng);
            p.init_zeros(&format!("enc{v}.b1"), &[ph]);
            p.init_weight(&format!("enc{v}.w2"), NUM_PATCHES * ph, d, &mut rng);
            p.init_zeros(&format!("enc{v}.b2"), &[d]);
        }
        p.init_weight("state.w1", STATE_DIM, config.state_hidden, &mut rng);
        p.init_zeros("state.b1", &[config.state_hidden]);
        p.init_weight("state.w2", config.state_hidden, d, &mut rng);
        p.init_zeros("state.b2", &[d]);
        p.init_weight("lat.w1", config.latent_dim, config.latent_hidden, &mut rng);
        p.init_zeros("lat.b1", &[config.latent_hidden]);
        p.init_weight("lat.w2", config.latent_hidden, d, &mut rng);
        p.init_zeros("lat.b2", &[d]);
        p.insert("pos", Tensor::randn(&[config.seq_len(), d], 0.1, &mut rng));
        for l in 0..config.layers {
            p.init_ones(&format!("b{l}.ln1.g"), &[d]);
            p.init_zeros(&format!("b{l}.ln1.b"), &[d]);
            for m in ["q", "k", "v", "o"] {
                p.init_weight(&format!("b{l}.attn.w{m}"), d, d, &mut rng);
                p.init_zeros(&format!("b{l}.attn.b{m}"), &[d]);
            }
            p.init_ones(&format!("b{l}.ln2.g"), &[d]);
            p.init_zeros(&format!("b{l}.ln2.b"), &[d]);
            p.init_weight(&format!("b{l}.mlp.w1"), d, f, &mut rng);
            p.init_zeros(&format!("b{l}.mlp.b1"), &[f]);
            p.init_weight(&format!("b{l}.mlp.w2"), f, d, &mut rng);
            p.init_zeros(&format!("b{l}.mlp.b2"), &[d]);
        }
        p.init_ones("lnf.g", &[d]);
        p.init_zeros("lnf.b", &[d]);
        p.init_weight("head.w", d, ACTION_DIM, &mut rng);
        p.init_zeros("head.b", &[ACTION_DIM]);
        let latent_dim = config.latent_dim;
        Ok(Self {
            params: p,
            meta: Ssys1Meta {
                config,
                tap,
                lsys2_hash: None,
                dataset_hash: None,
                seed,
                train_steps: 0,
                state_mean: vec![0.0; STATE_DIM],
                state_std: vec![1.0; STATE_DIM],
                latent_mean: vec![0.0; latent_dim],
                latent_std: vec![1.0; latent_dim],
            },
        })
    }

    pub fn config(&self) -> &Ssys1Config {
        &self.meta.config
    }

    fn p(&self, name: &str) -> Result<&Tensor, Ssys1Error> {
        Ok(self.params.get(name)?)
    }

    pub(crate) fn normalized_state(&self, obs: &Observation) -> Vec<f64> {
        normalize(&obs.state.0, &self.meta.state_mean, &self.meta.state_std)
    }

    pub(crate) fn normalized_latent(&self, latent: &[f64]) -> Result<Vec<f64>, Ssys1Error> {
        if latent.len() != self.config().latent_dim {
            return Err(Ssys1Error::Config(format!(
                "latent has {} dims, policy expects {}",
                latent.len(),
                self.config().latent_dim
            )));
        }
        Ok(normalize(latent, &self.meta.latent_mean, &self.meta.latent_std))
    }

    fn mlp2(&self, x: &Tensor, prefix: &str) -> Result<Tensor, Ssys1Error> {
        let h = gelu_tensor(linear_forward(
            x,
            self.p(&format!("{prefix}.w1"))?,
            Some(self.p(&format!("{prefix}.b1"))?),
        )?);
        Ok(linear_forward(
            &h,
            self.p(&format!("{prefix}.w2"))?,
            Some(self.p(&format!("{prefix}.b2"))?),
        )?)
    }

    /// Three view tokens and one state token, before position embeddings.
    pub fn encode_observation(&self, obs: &Observation) -> Result<EncodedObs, Ssys1Error> {
        let d = self.config().d_model;
        let ph = self.config().patch_hidden;
        let mut out = Vec::with_capacity(Ssys1Config::TOKENS_PER_STEP * d);
        for v in 0..NUM_VIEWS {
            let patches = patchify(&obs.views[v].to_f64())?;
            let h = gelu_tensor(linear_forward(
                &patches,
                self.p(&format!("enc{v}.w1"))?,
                Some(self.p(&format!("enc{v}.b1"))?),
            )?)
            .reshape(&[1, NUM_PATCHES * ph])?;
            let t = linear_forward(&h, self.p(&format!("enc{v}.w2"))?, Some(self.p(&format!("enc{v}.b2"))?))?;
            out.extend_from_slice(t.data());
        }
        let s = Tensor::new(vec![1, STATE_DIM], self.normalized_state(obs))?;
        out.extend_from_slice(self.mlp2(&s, "state")?.data());
        Ok(EncodedObs(out))
    }

    /// Latent token, `d` floats.
    pub fn project_latent(&self, latent: &LatentFeature) -> Result<Vec<f64>, Ssys1Error> {
        let z = Tensor::new(vec![1, self.config().latent_dim], self.normalized_latent(&latent.vector)?)?;
        Ok(self.mlp2(&z, "lat")?.into_data())
    }

    /// Transformer over `[latent token, history tokens]`; only the final
    /// position is carried through the last block.
    pub fn forward_encoded(&self, latent_token: &[f64], history: &[&EncodedObs]) -> Result<Action, Ssys1Error> {
        let cfg = self.config();
        let (d, t) = (cfg.d_model, cfg.seq_len());
        if history.len() != cfg.context {
            return Err(Ssys1Error::Config(format!(
                "history has {} entries, context is {}",
                history.len(),
                cfg.context
            )));
        }
        let mut x = Vec::with_capacity(t * d);
        x.extend_from_slice(latent_token);
        for h in history {
            x.extend_from_slice(&h.0);
        }
        add_in_place(&mut x, self.p("pos")?.data());
        let mut x = Tensor::new(vec![t, d], x)?;
        for l in 0..cfg.layers {
            let last = l + 1 == cfg.layers;
            let w = |s: &str| self.p(&format!("b{l}.{s}"));
            let h = layernorm_forward(&x, w("ln1.g")?, w("ln1.b")?, LN_EPS)?;
            let k = linear_forward(&h, w("attn.wk")?, Some(w("attn.bk")?))?.reshape(&[1, t, d])?;
            let v = linear_forward(&h, w("attn.wv")?, Some(w("attn.bv")?))?.reshape(&[1, t, d])?;
            let (hq, mut xr) = if last {
                (
                    Tensor::new(vec![1, d], h.row(t - 1).to_vec())?,
                    Tensor::new(vec![1, d], x.row(t - 1).to_vec())?,
                )
            } else {
                (h, x)
            };
            let n = hq.rows();
            let q = linear_forward(&hq, w("attn.wq")?, Some(w("attn.bq")?))?.reshape(&[1, n, d])?;
            let (a, _) = multi_head_attention(&q, &k, &v, cfg.heads, false)?;
            let o = linear_forward(&a.reshape(&[n, d])?, w("attn.wo")?, Some(w("attn.bo")?))?;
            add_in_place(xr.data_mut(), o.data());
            let h2 = layernorm_forward(&xr, w("ln2.g")?, w("ln2.b")?, LN_EPS)?;
            let f = gelu_tensor(linear_forward(&h2, w("mlp.w1")?, Some(w("mlp.b1")?))?);
            let f = linear_forward(&f, w("mlp.w2")?, Some(w("mlp.b2")?))?;
            add_in_place(xr.data_mut(), f.data());
            x = xr;
        }
        let last = Tensor::new(vec![1, d], x.row(x.rows() - 1).to_vec())?;
        let h = layernorm_forward(&last, self.p("lnf.g")?, self.p("lnf.b")?, LN_EPS)?;
        let out = linear_forward(&h, self.p("head.w")?, Some(self.p("head.b")?))?;
        let mut a = [0.0; ACTION_DIM];
        for (dst, src) in a.iter_mut().zip(out.data()) {
            *dst = src.tanh();
        }
        Ok(Action(a))
    }

    /// Encodes the whole history and runs the policy.
    pub fn policy_forward(&self, input: &PolicyInput<'_>) -> Result<Action, Ssys1Error> {
        let enc = input
            .obs_history
            .iter()
            .map(|o| self.encode_observation(o))
            .collect::<Result<Vec<_>, _>>()?;
        let refs: Vec<&EncodedObs> = enc.iter().collect();
        let z = self.project_latent(input.latent)?;
        self.forward_encoded(&z, &refs)
    }

    /// Taped batch forward. `views[v]` is `[B*C, 16, 16]` patches,
    /// `states` is `[B*C, 10]` and `latents` is `[B, latent_dim]`, both
    /// normalized. Returns predictions `[B, 7]`.
    pub(crate) fn graph_forward<'p>(
        &self,
        g: &mut Graph<'p>,
        bp: &BoundParams,
        views: [Tensor; NUM_VIEWS],
        states: Tensor,
        latents: Tensor,
    ) -> Result<Var, Ssys1Error> {
        let cfg = self.config();
        let (d, c, t) = (cfg.d_model, cfg.context, cfg.seq_len());
        let b = latents.shape()[0];
        let bc = b * c;
        let mut tokens = Vec::with_capacity(4);
        for (v, patches) in views.into_iter().enumerate() {
            let w = |s: &str| bp.var(&format!("enc{v}.{s}"));
            let x = g.input(patches);
            let h = g.linear(x, w("w1")?, Some(w("b1")?))?;
            let h = g.gelu(h)?;
            let h = g.reshape(h, &[bc, NUM_PATCHES * cfg.patch_hidden])?;
            let e = g.linear(h, w("w2")?, Some(w("b2")?))?;
            tokens.push(g.reshape(e, &[b, c, 1, d])?);
        }
        let s = g.input(states);
        let s = g.linear(s, bp.var("state.w1")?, Some(bp.var("state.b1")?))?;
        let s = g.gelu(s)?;
        let s = g.linear(s, bp.var("state.w2")?, Some(bp.var("state.b2")?))?;
        tokens.push(g.reshape(s, &[b, c, 1, d])?);
        let obs = g.concat(&tokens, 2)?;
        let obs = g.reshape(obs, &[b, Ssys1Config::TOKENS_PER_STEP * c, d])?;
        let z = g.input(latents);
        let z = g.linear(z, bp.var("lat.w1")?, Some(bp.var("lat.b1")?))?;
        let z = g.gelu(z)?;
        let z = g.linear(z, bp.var("lat.w2")?, Some(bp.var("lat.b2")?))?;
        let z = g.reshape(z, &[b, 1, d])?;
        let x = g.concat(&[z, obs], 1)?;
        let mut x = g.add_broadcast(x, bp.var("pos")?)?;
        for l in 0..cfg.layers {
            let last = l + 1 == cfg.layers;
            let w = |s: &str| bp.var(&format!("b{l}.{s}"));
            let h = g.layernorm(x, w("ln1.g")?, w("ln1.b")?, LN_EPS)?;
            let k = g.linear(h, w("attn.wk")?, Some(w("attn.bk")?))?;
            let v = g.linear(h, w("attn.wv")?, Some(w("attn.bv")?))?;
            let (hq, xr) = if last {
                (g.slice(h, 1, t - 1, 1)?, g.slice(x, 1, t - 1, 1)?)
            } else {
                (h, x)
            };
            let q = g.linear(hq, w("attn.wq")?, Some(w("attn.bq")?))?;
            let a = g.attention(q, k, v, cfg.heads, false)?;
            let o = g.linear(a, w("attn.wo")?, Some(w("attn.bo")?))?;
            let xr = g.add(xr, o)?;
            let h2 = g.layernorm(xr, w("ln2.g")?, w("ln2.b")?, LN_EPS)?;
            let f = g.linear(h2, w("mlp.w1")?, Some(w("mlp.b1")?))?;
            let f = g.gelu(f)?;
            let f = g.linear(f, w("mlp.w2")?, Some(w("mlp.b2")?))?;
            x = g.add(xr, f)?;
        }
        let n = g.shape(x)[1];
        let last = g.slice(x, 1, n - 1, 1)?;
        let h = g.layernorm(last, bp.var("lnf.g")?, bp.var("lnf.b")?, LN_EPS)?;
        let out = g.linear(h, bp.var("head.w")?, Some(bp.var("head.b")?))?;
        let out = g.tanh(out)?;
        Ok(g.reshape(out, &[b, ACTION_DIM])?)
    }

    /// Closed-form flops of one control step with cached history encodings:
    /// one observation encode, the latent projection and the transformer.
    pub fn flops(&self) -> u64 {
        let c = self.config();
        let (d, f, t) = (c.d_model as u64, (c.d_model * c.ffn_mult) as u64, c.seq_len() as u64);
        let ph = c.patch_hidden as u64;
        let np = NUM_PATCHES as u64;
        let view = 2 * (np * PATCH_DIM as u64 * ph + np * ph * d);
        let state = 2 * (STATE_DIM as u64 * c.state_hidden as u64 + c.state_hidden as u64 * d);
        let latent = 2 * (c.latent_dim as u64 * c.latent_hidden as u64 + c.latent_hidden as u64 * d);
        let mut total = NUM_VIEWS as u64 * view + state + latent;
        for l in 0..c.layers {
            let n = if l + 1 == c.layers { 1 } else { t };
            // keys and values for every position, queries/out/mlp for `n`.
            total += 2 * 2 * t * d * d + 2 * 2 * n * d * d + 2 * 2 * n * d * f + 4 * n * t * d;
        }
        total + 2 * d * ACTION_DIM as u64
    }

    pub fn checkpoint_hash(&self) -> String {
        let mut bytes = write_checkpoint(&self.params);
        bytes.extend_from_slice(serde_json::to_string(&self.meta).expect("meta serializes").as_bytes());
        sha256_hex(&bytes)
    }

    pub fn save(&self, path: &Path) -> Result<String, Ssys1Error> {
        std::fs::write(path, write_checkpoint(&self.params))?;
        let meta = serde_json::to_string_pretty(&self.meta).map_err(|e| Ssys1Error::Format(e.to_string()))?;
        std::fs::write(path.with_extension("json"), meta)?;
        Ok(self.checkpoint_hash())
    }

    pub fn load(path: &Path) -> Result<Self, Ssys1Error> {
        let params = read_checkpoint(&std::fs::read(path)?)?;
        let meta: Ssys1Meta = serde_json::from_slice(&std::fs::read(path.with_extension("json"))?)
            .map_err(|e| Ssys1Error::Format(e.to_string()))?;
        let reference = Self::init(meta.config.clone(), meta.tap, 0)?;
        if params.len() != reference.params.len() {
            return Err(Ssys1Error::Format("tensor count mismatch".into()));
        }
        for (name, t) in reference.params.iter() {
            let got = params
                .get(name)
                .map_err(|_| Ssys1Error::Format(format!("missing tensor {name}")))?;
            if got.shape() != t.shape() {
                return Err(Ssys1Error::Format(format!("tensor {name} has shape {:?}", got.shape())));
            }
        }
        Ok(Self { params, meta })
    }
}
