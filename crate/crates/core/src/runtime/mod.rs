//! Dual-rate execution: a trigger policy decides when the large model runs,
//! a cache holds its latents, and the small policy runs every step. Every
//! call is metered into a [`ScheduleTrace`].

pub mod cache;
pub mod trace;

pub use cache::{CacheKey, LatentCache};
pub use trace::{amortized_cost, predicted_mean_flops, AmortizedCost, ScheduleTrace, TraceRow, COST_WINDOW, TRACE_SCHEMA};

use std::collections::VecDeque;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lsys2::{self, extract_latent, image_hash, instruction_hash, LatentFeature, LatentTap, Lsys2, Lsys2Error};
use crate::simenv::{Action, Observation, SimError, View};
use crate::ssys1::{EncodedObs, Ssys1, Ssys1Error};

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("sequencing error: {0}")]
    Sequencing(String),
    #[error("provenance error: {0}")]
    Provenance(String),
    #[error("state error: {0}")]
    State(String),
    #[error("large model failed at step {step}: {source}")]
    Lsys2 { step: usize, source: Lsys2Error },
    #[error(transparent)]
    Ssys1(#[from] Ssys1Error),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TriggerPolicy {
    /// Run the large model whenever the (instruction, first frame) key changes.
    OnInstructionChange,
    /// Run it before every control step.
    EveryStep,
    /// Run it for the first instruction only.
    Never,
}

impl TriggerPolicy {
    pub const ALL: [TriggerPolicy; 3] = [
        TriggerPolicy::OnInstructionChange,
        TriggerPolicy::EveryStep,
        TriggerPolicy::Never,
    ];
}

impl std::str::FromStr for TriggerPolicy {
    type Err = RuntimeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|t| format!("{t:?}").eq_ignore_ascii_case(s))
            .ok_or_else(|| RuntimeError::Format(format!("unknown trigger `{s}`")))
    }
}

/// A loaded model pair. Read-only; any number of sessions can share it.
pub struct Models<'m> {
    lsys2: Option<(&'m Lsys2, String)>,
    ssys1: &'m Ssys1,
    tap: LatentTap,
}

impl<'m> Models<'m> {
    /// Pairs a large model with a policy trained on its `tap` latents.
    /// `allow_mismatch` skips the provenance check.
    pub fn dual(lsys2: &'m Lsys2, ssys1: &'m Ssys1, tap: LatentTap, allow_mismatch: bool) -> Result<Self, RuntimeError> {
        let hash = lsys2.checkpoint_hash();
        if !allow_mismatch {
            if ssys1.meta.tap != Some(tap) {
                return Err(RuntimeError::Provenance(format!(
                    "policy was trained on {:?} latents, session asks for {tap:?}",
                    ssys1.meta.tap
                )));
            }
            if ssys1.meta.lsys2_hash.as_deref() != Some(hash.as_str()) {
                return Err(RuntimeError::Provenance(format!(
                    "policy expects large model {:?}, got {hash}",
                    ssys1.meta.lsys2_hash
                )));
            }
        }
        if lsys2.config().latent_dim() != ssys1.config().latent_dim {
            return Err(RuntimeError::Provenance(format!(
                "latent width {} does not match policy input {}",
                lsys2.config().latent_dim(),
                ssys1.config().latent_dim
            )));
        }
        Ok(Self {
            lsys2: Some((lsys2, hash)),
            ssys1,
            tap,
        })
    }

    /// Policy alone, fed an all-zero latent.
    pub fn zero_latent(ssys1: &'m Ssys1) -> Self {
        Self {
            lsys2: None,
            ssys1,
            tap: ssys1.meta.tap.unwrap_or(LatentTap::EndOfText),
        }
    }

    pub fn session(&self, trigger: TriggerPolicy) -> Session<'_> {
        Session {
            models: self,
            trigger,
            cache: LatentCache::default(),
            trace: ScheduleTrace::default(),
            active: None,
            history: VecDeque::new(),
            step: 0,
            pending: Pending::default(),
        }
    }

    pub fn ssys1(&self) -> &Ssys1 {
        self.ssys1
    }

    pub fn lsys2(&self) -> Option<&Lsys2> {
        self.lsys2.as_ref().map(|(m, _)| *m)
    }

    pub fn tap(&self) -> LatentTap {
        self.tap
    }

    /// Flops of one large-model run for an instruction; 0 without one.
    pub fn lsys2_flops(&self, instruction: &str) -> Result<u64, RuntimeError> {
        match &self.lsys2 {
            Some((m, _)) => {
                let ids = lsys2::tokenize_instruction(instruction).map_err(|source| RuntimeError::Lsys2 { step: 0, source })?;
                Ok(m.flops(ids.len() - 2))
            }
            None => Ok(0),
        }
    }

    pub fn ssys1_flops(&self) -> u64 {
        self.ssys1.flops()
    }
}

struct Active {
    instruction: String,
    v0: View,
    key: CacheKey,
    latent: Option<LatentFeature>,
    fingerprint: u64,
}

#[derive(Default)]
struct Pending {
    runs: u32,
    wall_ns: u64,
    flops: u64,
}

/// One episode's worth of scheduling state. Single-threaded.
pub struct Session<'a> {
    models: &'a Models<'a>,
    trigger: TriggerPolicy,
    cache: LatentCache,
    trace: ScheduleTrace,
    active: Option<Active>,
    history: VecDeque<EncodedObs>,
    step: usize,
    pending: Pending,
}

impl Session<'_> {
    pub fn trigger(&self) -> TriggerPolicy {
        self.trigger
    }

    pub fn cache(&self) -> &LatentCache {
        &self.cache
    }

    pub fn trace(&self) -> &ScheduleTrace {
        &self.trace
    }

    pub fn into_trace(self) -> ScheduleTrace {
        self.trace
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Latent the next step will be conditioned on, if already computed.
    pub fn current_latent(&self) -> Option<&LatentFeature> {
        self.active.as_ref().and_then(|a| a.latent.as_ref())
    }

    fn run_lsys2(&mut self, instruction: &str, v0: &View) -> Result<LatentFeature, RuntimeError> {
        let (model, _) = self.models.lsys2.as_ref().expect("dual models");
        let step = self.step;
        let wrap = |source| RuntimeError::Lsys2 { step, source };
        let t0 = Instant::now();
        let pre = model.prefill(v0, instruction).map_err(wrap)?;
        let dec = model.decode_actions(&pre).map_err(wrap)?;
        let latent = extract_latent(&pre, &dec, self.models.tap, model.meta.tag).map_err(wrap)?;
        self.pending.wall_ns += t0.elapsed().as_nanos() as u64;
        self.pending.runs += 1;
        self.pending.flops += model.flops(pre.layout.text.len());
        Ok(latent)
    }

    /// Announces the instruction and the frame it was issued on.
    pub fn on_instruction(&mut self, instruction: &str, v0: &View) -> Result<(), RuntimeError> {
        lsys2::tokenize_instruction(instruction).map_err(|source| RuntimeError::Lsys2 {
            step: self.step,
            source,
        })?;
        let key = CacheKey {
            instruction_hash: instruction_hash(instruction),
            image_hash: image_hash(v0),
            tap: self.models.tap,
            checkpoint_hash: self.models.lsys2.as_ref().map(|(_, h)| h.clone()).unwrap_or_default(),
        };
        if self.models.lsys2.is_none() {
            let latent = LatentFeature {
                instruction_hash: key.instruction_hash,
                image_hash: key.image_hash,
                ..LatentFeature::zeros(self.models.ssys1.config().latent_dim, self.models.tap)
            };
            self.activate(instruction, v0, key, Some(latent));
            return Ok(());
        }
        let latent = match self.trigger {
            TriggerPolicy::EveryStep => None,
            TriggerPolicy::Never if self.active.is_some() => return Ok(()),
            TriggerPolicy::Never | TriggerPolicy::OnInstructionChange => match self.cache.lookup(&key) {
                Some(f) => Some(f.clone()),
                None => {
                    let f = self.run_lsys2(instruction, v0)?;
                    self.cache.insert(key.clone(), f.clone());
                    Some(f)
                }
            },
        };
        self.activate(instruction, v0, key, latent);
        Ok(())
    }

    fn activate(&mut self, instruction: &str, v0: &View, key: CacheKey, latent: Option<LatentFeature>) {
        self.active = Some(Active {
            instruction: instruction.to_string(),
            v0: *v0,
            key,
            fingerprint: latent.as_ref().map_or(0, |l| l.fingerprint()),
            latent,
        });
    }

    /// One control step: (maybe) the large model, then the policy.
    pub fn step(&mut self, obs: &Observation) -> Result<Action, RuntimeError> {
        if self.active.is_none() {
            return Err(RuntimeError::Sequencing("step called before on_instruction".into()));
        }
        if self.trigger == TriggerPolicy::EveryStep && self.models.lsys2.is_some() {
            let (instruction, v0) = {
                let a = self.active.as_ref().expect("checked");
                (a.instruction.clone(), a.v0)
            };
            let f = self.run_lsys2(&instruction, &v0)?;
            let a = self.active.as_mut().expect("checked");
            a.fingerprint = f.fingerprint();
            a.latent = Some(f);
        }
        let a = self.active.as_ref().expect("checked");
        let latent = a
            .latent
            .as_ref()
            .ok_or_else(|| RuntimeError::Sequencing("no latent available".into()))?;
        if latent.fingerprint() != a.fingerprint
            || latent.instruction_hash != a.key.instruction_hash
            || latent.image_hash != a.key.image_hash
        {
            return Err(RuntimeError::State("latent changed during the episode".into()));
        }

        let policy = self.models.ssys1;
        let t0 = Instant::now();
        let enc = policy.encode_observation(obs)?;
        if self.history.is_empty() {
            self.history.extend(std::iter::repeat_n(enc, policy.config().context));
        } else {
            self.history.pop_front();
            self.history.push_back(enc);
        }
        let token = policy.project_latent(latent)?;
        let refs: Vec<&EncodedObs> = self.history.iter().collect();
        let action = policy.forward_encoded(&token, &refs)?;
        let ssys1_wall_ns = t0.elapsed().as_nanos() as u64;

        let p = std::mem::take(&mut self.pending);
        self.trace.rows.push(TraceRow {
            step: self.step,
            ran_lsys2: p.runs > 0,
            lsys2_runs: p.runs,
            ran_ssys1: true,
            lsys2_wall_ns: p.wall_ns,
            ssys1_wall_ns,
            lsys2_flops: p.flops,
            ssys1_flops: policy.flops(),
        });
        self.step += 1;
        Ok(action)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lsys2::{ActionTokenizer, Lsys2Config};
    use crate::simenv::{reset, step, Catalog};
    use crate::ssys1::Ssys1Config;

    fn models() -> (Lsys2, Ssys1) {
        let cfg = Lsys2Config {
            d_model: 16,
            layers: 1,
            heads: 2,
            ffn_mult: 2,
            ..Lsys2Config::default()
        };
        let l = Lsys2::init(cfg, ActionTokenizer::from_bounds(vec![(-1.0, 1.0); 7]).unwrap(), 1).unwrap();
        let mut s = Ssys1::init(
            Ssys1Config {
                latent_dim: 16,
                ..Ssys1Config::default()
            },
            Some(LatentTap::EndOfText),
            2,
        )
        .unwrap();
        s.meta.lsys2_hash = Some(l.checkpoint_hash());
        (l, s)
    }

    fn episode(session: &mut Session<'_>, n: usize, change_at: Option<usize>) -> Vec<Action> {
        let c = Catalog::standard();
        let task = c.by_name("CloseDrawer").unwrap().spec(3, 0);
        let (mut s, mut o, instr) = reset(&c, &task).unwrap();
        let v0 = o.views[0];
        session.on_instruction(&instr, &v0).unwrap();
        let mut out = Vec::new();
        for t in 0..n {
            if Some(t) == change_at {
                session.on_instruction("open the drawer", &v0).unwrap();
            }
            let a = session.step(&o).unwrap();
            let r = step(&c, &s, &a).unwrap();
            s = r.state;
            o = r.observation;
            out.push(a);
        }
        out
    }

    #[test]
    fn provenance_checked_unless_overridden() {
        let (l, s) = models();
        assert!(Models::dual(&l, &s, LatentTap::EndOfText, false).is_ok());
        assert!(matches!(
            Models::dual(&l, &s, LatentTap::MeanOfText, false),
            Err(RuntimeError::Provenance(_))
        ));
        assert!(Models::dual(&l, &s, LatentTap::MeanOfText, true).is_ok());
    }

    #[test]
    fn step_before_instruction_is_sequencing_error() {
        let (l, s) = models();
        let m = Models::dual(&l, &s, LatentTap::EndOfText, false).unwrap();
        let mut sess = m.session(TriggerPolicy::OnInstructionChange);
        assert_eq!((sess.cache().hits(), sess.cache().misses()), (0, 0));
        let c = Catalog::standard();
        let (_, o, _) = reset(&c, &c.by_name("TurnOnStove").unwrap().spec(0, 0)).unwrap();
        assert!(matches!(sess.step(&o), Err(RuntimeError::Sequencing(_))));
    }

    #[test]
    fn repeated_instruction_hits_cache() {
        let (l, s) = models();
        let m = Models::dual(&l, &s, LatentTap::EndOfText, false).unwrap();
        let mut sess = m.session(TriggerPolicy::OnInstructionChange);
        let c = Catalog::standard();
        let (_, o, instr) = reset(&c, &c.by_name("TurnOnStove").unwrap().spec(0, 0)).unwrap();
        sess.on_instruction(&instr, &o.views[0]).unwrap();
        sess.on_instruction(&instr, &o.views[0]).unwrap();
        sess.step(&o).unwrap();
        assert_eq!(sess.trace().lsys2_runs(), 1);
        assert_eq!((sess.cache().hits(), sess.cache().misses()), (1, 1));
    }

    #[test]
    fn trigger_counts() {
        let (l, s) = models();
        let m = Models::dual(&l, &s, LatentTap::EndOfText, false).unwrap();
        let mut a = m.session(TriggerPolicy::OnInstructionChange);
        episode(&mut a, 12, None);
        let rows = &a.trace().rows;
        assert_eq!(rows.len(), 12);
        assert!(rows.iter().all(|r| r.ran_ssys1));
        assert_eq!(rows.iter().filter(|r| r.ran_lsys2).map(|r| r.step).collect::<Vec<_>>(), [0]);

        let mut b = m.session(TriggerPolicy::OnInstructionChange);
        episode(&mut b, 12, Some(5));
        let runs: Vec<_> = b.trace().rows.iter().filter(|r| r.ran_lsys2).map(|r| r.step).collect();
        assert_eq!(runs, [0, 5]);

        let mut n = m.session(TriggerPolicy::Never);
        episode(&mut n, 12, Some(5));
        assert_eq!(n.trace().lsys2_runs(), 1);

        let mut e = m.session(TriggerPolicy::EveryStep);
        episode(&mut e, 12, None);
        assert_eq!(e.trace().lsys2_runs(), 12);
        assert!(e.trace().rows.iter().all(|r| r.lsys2_flops > 0));
    }

    #[test]
    fn caching_does_not_change_actions() {
        let (l, s) = models();
        let m = Models::dual(&l, &s, LatentTap::EndOfText, false).unwrap();
        let mut a = m.session(TriggerPolicy::OnInstructionChange);
        let mut e = m.session(TriggerPolicy::EveryStep);
        let x = episode(&mut a, 15, None);
        let y = episode(&mut e, 15, None);
        assert!(x.iter().zip(&y).all(|(p, q)| p.0.map(f64::to_bits) == q.0.map(f64::to_bits)));
        let ca = amortized_cost(a.trace()).unwrap();
        let ce = amortized_cost(e.trace()).unwrap();
        assert!(ca.mean_flops < ce.mean_flops);
    }

    #[test]
    fn measured_cost_matches_closed_form() {
        let (l, s) = models();
        let m = Models::dual(&l, &s, LatentTap::EndOfText, false).unwrap();
        let c = Catalog::standard();
        let instr = c.instruction(&c.by_name("CloseDrawer").unwrap().spec(3, 0)).unwrap();
        let fl = m.lsys2_flops(&instr).unwrap();
        for n in [1, 5, 50, 60] {
            for trig in TriggerPolicy::ALL {
                let mut sess = m.session(trig);
                episode(&mut sess, n, None);
                let cost = amortized_cost(sess.trace()).unwrap();
                let k = if trig == TriggerPolicy::EveryStep { n.min(50) as u64 } else { 1 };
                assert_eq!(cost.lsys2_runs, k);
                assert_eq!(cost.mean_flops, predicted_mean_flops(m.ssys1_flops(), fl, k, n));
            }
        }
    }

    #[test]
    fn zero_latent_session_never_runs_large_model() {
        let (_, s) = models();
        let m = Models::zero_latent(&s);
        let mut sess = m.session(TriggerPolicy::EveryStep);
        episode(&mut sess, 6, None);
        assert_eq!(sess.trace().lsys2_runs(), 0);
        assert!(sess.current_latent().unwrap().vector.iter().all(|v| *v == 0.0));
    }
}
