//! Success-rate rollouts, the timing benchmark and the two ablations.

pub mod ablation;
pub mod table;
pub mod timing;

pub use ablation::{ablate_pt_ft, ablate_taps, AblationSetup, PtFtAblation, TapAblation, TapRow};
pub use table::{write_report, ResultTable, TaskRow};
pub use timing::{timing_bench, TimingRow, TimingTable};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::sha256_hex;
use crate::lsys2::Lsys2;
use crate::runtime::{Models, RuntimeError, ScheduleTrace, TraceRow, TriggerPolicy};
use crate::simenv::{reset, step, Action, Catalog, EvalSplit, Expert, SimError, TaskDef, TaskSpec, EPISODE_CAP};
use crate::ssys1::Ssys1Error;
use crate::tensor::Rng;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{task} episode {episode}: {source}")]
    Episode {
        task: String,
        episode: usize,
        source: Box<EvalError>,
    },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("provenance error: {0}")]
    Provenance(String),
    #[error("report error: {0}")]
    Report(String),
    #[error("benchmark failure: {0}")]
    Benchmark(String),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Ssys1(#[from] Ssys1Error),
    #[error(transparent)]
    Lsys2(#[from] crate::lsys2::Lsys2Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum VariantSet {
    Seen,
    Unseen,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalProtocol {
    /// Task names; empty means the whole catalog.
    pub tasks: Vec<String>,
    pub seeds_per_task: usize,
    pub variant_set: VariantSet,
    pub max_steps: usize,
    pub seed: u64,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            tasks: Vec::new(),
            seeds_per_task: 50,
            variant_set: VariantSet::Unseen,
            max_steps: EPISODE_CAP,
            seed: 0,
        }
    }
}

impl EvalProtocol {
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("protocol serializes").as_bytes())
    }

    pub fn task_defs<'c>(&self, catalog: &'c Catalog) -> Result<Vec<&'c TaskDef>, EvalError> {
        if self.max_steps == 0 || self.max_steps > EPISODE_CAP {
            return Err(EvalError::Protocol(format!("max_steps {} outside 1..={EPISODE_CAP}", self.max_steps)));
        }
        if self.tasks.is_empty() {
            return Ok(catalog.tasks.iter().collect());
        }
        self.tasks
            .iter()
            .map(|n| catalog.by_name(n).map_err(EvalError::from))
            .collect()
    }

    pub fn specs(&self, split: &EvalSplit, def: &TaskDef) -> Result<Vec<TaskSpec>, EvalError> {
        Ok(match self.variant_set {
            VariantSet::Unseen => split.eval_specs(def, self.seeds_per_task, self.seed)?,
            VariantSet::Seen => split.seen_specs(def, self.seeds_per_task, self.seed)?,
        })
    }
}

/// Something that picks actions in an episode.
#[derive(Clone, Copy)]
pub enum Runner<'a> {
    Expert(Expert),
    Random,
    /// Runtime session; zero-latent policies come in through
    /// [`Models::zero_latent`].
    Session { models: &'a Models<'a>, trigger: TriggerPolicy },
    /// Large model alone, decoding an action from the current frame at
    /// every step.
    Lsys2Only(&'a Lsys2),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeOutcome {
    pub success: bool,
    pub steps: usize,
    pub trace: ScheduleTrace,
}

fn lsys2_only_step(model: &Lsys2, view: &crate::simenv::View, instruction: &str) -> Result<(Action, TraceRow), EvalError> {
    let t0 = std::time::Instant::now();
    let pre = model.prefill(view, instruction)?;
    let dec = model.decode_actions(&pre)?;
    let action = model.meta.action_tokenizer.detokenize(&dec.bins)?;
    let row = TraceRow {
        step: 0,
        ran_lsys2: true,
        lsys2_runs: 1,
        ran_ssys1: false,
        lsys2_wall_ns: t0.elapsed().as_nanos() as u64,
        ssys1_wall_ns: 0,
        lsys2_flops: model.flops(pre.layout.text.len()),
        ssys1_flops: 0,
    };
    Ok((action, row))
}

/// Runs one episode. With `fixed_len` the episode runs exactly that many
/// steps whatever happens (timing runs); otherwise it stops at success or
/// `max_steps`.
pub fn run_episode(
    catalog: &Catalog,
    runner: Runner<'_>,
    spec: &TaskSpec,
    max_steps: usize,
    fixed_len: Option<usize>,
    rng_seed: u64,
) -> Result<EpisodeOutcome, EvalError> {
    let (mut state, mut obs, instruction) = reset(catalog, spec)?;
    let mut rng = Rng::new(rng_seed);
    let mut session = match runner {
        Runner::Session { models, trigger } => {
            let mut s = models.session(trigger);
            s.on_instruction(&instruction, &obs.views[0])?;
            Some(s)
        }
        _ => None,
    };
    let mut trace = ScheduleTrace::default();
    let mut success = false;
    let limit = fixed_len.unwrap_or(max_steps);
    let mut steps = 0;
    while steps < limit {
        let action = match runner {
            Runner::Expert(e) => e.act(catalog, &state, &mut rng)?,
            Runner::Random => {
                let mut a = [0.0; 7];
                for v in &mut a {
                    *v = rng.uniform_range(-1.0, 1.0);
                }
                Action(a)
            }
            Runner::Session { .. } => session.as_mut().expect("session runner").step(&obs)?,
            Runner::Lsys2Only(m) => {
                let (a, mut row) = lsys2_only_step(m, &obs.views[0], &instruction)?;
                row.step = steps;
                trace.rows.push(row);
                a
            }
        };
        let r = step(catalog, &state, &action)?;
        steps += 1;
        success |= r.success;
        state = r.state;
        obs = r.observation;
        if fixed_len.is_none() && r.done {
            break;
        }
    }
    if let Some(s) = session {
        trace = s.into_trace();
    }
    Ok(EpisodeOutcome { success, steps, trace })
}

/// Step and flop totals of one runner on one task.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskCost {
    pub task: String,
    pub episodes: usize,
    pub steps: u64,
    pub lsys2_runs: u64,
    pub flops: u128,
}

/// Per-(task, seed) binary success, aggregated per task.
pub fn run_rollouts(
    catalog: &Catalog,
    split: &EvalSplit,
    runner: Runner<'_>,
    runner_name: &str,
    protocol: &EvalProtocol,
) -> Result<ResultTable, EvalError> {
    Ok(run_rollouts_with_cost(catalog, split, runner, runner_name, protocol)?.0)
}

/// [`run_rollouts`] plus the flops each task's episodes spent.
pub fn run_rollouts_with_cost(
    catalog: &Catalog,
    split: &EvalSplit,
    runner: Runner<'_>,
    runner_name: &str,
    protocol: &EvalProtocol,
) -> Result<(ResultTable, Vec<TaskCost>), EvalError> {
    let defs = protocol.task_defs(catalog)?;
    let mut jobs = Vec::new();
    for (ti, def) in defs.iter().enumerate() {
        for (ei, spec) in protocol.specs(split, def)?.into_iter().enumerate() {
            jobs.push((ti, ei, spec));
        }
    }
    let outcomes = jobs
        .par_iter()
        .map(|(ti, ei, spec)| {
            let seed = Rng::derive(protocol.seed, ((*ti as u64) << 32) | *ei as u64).next_u64();
            run_episode(catalog, runner, spec, protocol.max_steps, None, seed).map_err(|e| EvalError::Episode {
                task: defs[*ti].name.clone(),
                episode: *ei,
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut rows: Vec<TaskRow> = defs
        .iter()
        .map(|d| TaskRow {
            task: d.name.clone(),
            category: d.category.clone(),
            successes: 0,
            trials: 0,
        })
        .collect();
    let mut costs: Vec<TaskCost> = defs
        .iter()
        .map(|d| TaskCost {
            task: d.name.clone(),
            episodes: 0,
            steps: 0,
            lsys2_runs: 0,
            flops: 0,
        })
        .collect();
    for ((ti, _, _), o) in jobs.iter().zip(&outcomes) {
        rows[*ti].trials += 1;
        rows[*ti].successes += o.success as usize;
        let c = &mut costs[*ti];
        c.episodes += 1;
        c.steps += o.steps as u64;
        c.lsys2_runs += o.trace.lsys2_runs();
        c.flops += o.trace.total_flops();
    }
    let mut table = ResultTable {
        runner: runner_name.to_string(),
        variant_set: protocol.variant_set,
        protocol_hash: protocol.hash(),
        metadata: Default::default(),
        rows,
    };
    table.metadata.insert("seeds_per_task".into(), protocol.seeds_per_task.to_string());
    if let Runner::Session { models, trigger } = runner {
        table.metadata.insert("trigger".into(), format!("{trigger:?}"));
        table.metadata.insert("ssys1".into(), models.ssys1().checkpoint_hash());
        if let Some(l) = models.lsys2() {
            table.metadata.insert("lsys2".into(), l.checkpoint_hash());
            table.metadata.insert("tap".into(), format!("{:?}", models.tap()));
        }
    }
    Ok((table, costs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simenv::split_eval_variants;

    fn protocol(n: usize) -> EvalProtocol {
        EvalProtocol {
            seeds_per_task: n,
            ..EvalProtocol::default()
        }
    }

    #[test]
    fn expert_and_random_calibration() {
        let c = Catalog::standard();
        let split = split_eval_variants(&c, 0).unwrap();
        let e = run_rollouts(&c, &split, Runner::Expert(Expert::default()), "expert", &protocol(20)).unwrap();
        assert!(e.rows.iter().all(|r| r.rate() >= 0.95), "{e:?}");
        let r = run_rollouts(&c, &split, Runner::Random, "random", &protocol(20)).unwrap();
        assert!(r.overall() <= 0.05);
    }

    #[test]
    fn rollouts_are_deterministic() {
        let c = Catalog::standard();
        let split = split_eval_variants(&c, 0).unwrap();
        let p = EvalProtocol {
            tasks: vec!["OpenDrawer".into(), "TurnOnStove".into()],
            ..protocol(4)
        };
        let a = run_rollouts(&c, &split, Runner::Random, "random", &p).unwrap();
        let b = run_rollouts(&c, &split, Runner::Random, "random", &p).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rows.len(), 2);
        assert!(a.rows.iter().all(|r| r.trials == 4));
    }

    #[test]
    fn bad_protocol_rejected() {
        let c = Catalog::standard();
        let p = EvalProtocol {
            max_steps: 0,
            ..protocol(1)
        };
        assert!(matches!(p.task_defs(&c), Err(EvalError::Protocol(_))));
        let p = EvalProtocol {
            tasks: vec!["Juggle".into()],
            ..protocol(1)
        };
        assert!(p.task_defs(&c).is_err());
    }

    #[test]
    fn fixed_length_episode_runs_every_step() {
        let c = Catalog::standard();
        let spec = c.by_name("CloseDrawer").unwrap().spec(0, 0);
        let o = run_episode(&c, Runner::Expert(Expert::default()), &spec, 200, Some(60), 1).unwrap();
        assert_eq!(o.steps, 60);
        assert!(o.success);
    }
}
