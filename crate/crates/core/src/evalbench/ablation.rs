use super::{run_rollouts, EvalError, EvalProtocol, ResultTable, Runner};
use crate::lsys2::{LatentTap, Lsys2, SourceModel};
use crate::runtime::{Models, TriggerPolicy};
use crate::simenv::dataset::Trajectory;
use crate::simenv::{Catalog, EvalSplit};
use crate::ssys1::{train, LatentStore, Ssys1, Ssys1Config, Ssys1TrainConfig};

/// Shared inputs of every policy trained for an ablation.
pub struct AblationSetup<'a> {
    pub catalog: &'a Catalog,
    pub split: &'a EvalSplit,
    pub trajectories: &'a [Trajectory],
    pub config: Ssys1Config,
    pub train: Ssys1TrainConfig,
    pub seed: u64,
    pub protocol: EvalProtocol,
    /// Already trained policies that may stand in for a retrain when their
    /// metadata matches exactly.
    pub reuse: Vec<&'a Ssys1>,
}

impl AblationSetup<'_> {
    fn reusable(&self, lsys2_hash: &str, tap: LatentTap) -> Option<&Ssys1> {
        self.reuse.iter().copied().find(|p| {
            p.meta.tap == Some(tap)
                && p.meta.lsys2_hash.as_deref() == Some(lsys2_hash)
                && p.meta.seed == self.seed
                && p.meta.train_steps == self.train.steps
                && p.meta.config == self.config
        })
    }

    /// Trains (or reuses) the `tap` policy on `lsys2` latents and evaluates it.
    pub fn policy_row(&self, lsys2: &Lsys2, tap: LatentTap, name: &str) -> Result<(Option<Ssys1>, ResultTable), EvalError> {
        let hash = lsys2.checkpoint_hash();
        let reused = self.reusable(&hash, tap);
        let owned = match reused {
            Some(_) => None,
            None => {
                let store = LatentStore::precompute(lsys2, tap, self.trajectories)?;
                Some(train(self.trajectories, Some(&store), self.config.clone(), &self.train, self.seed)?.0)
            }
        };
        let policy = reused.or(owned.as_ref()).expect("one of the two is set");
        let models = Models::dual(lsys2, policy, tap, false)?;
        let runner = Runner::Session {
            models: &models,
            trigger: TriggerPolicy::OnInstructionChange,
        };
        let mut table = run_rollouts(self.catalog, self.split, runner, name, &self.protocol)?;
        table.metadata.insert("train_steps".into(), self.train.steps.to_string());
        table.metadata.insert("batch_size".into(), self.train.batch_size.to_string());
        table.metadata.insert("seed".into(), self.seed.to_string());
        Ok((owned, table))
    }
}

pub struct TapRow {
    pub tap: LatentTap,
    pub table: ResultTable,
}

impl TapRow {
    pub fn stage(&self) -> &'static str {
        if self.tap.is_prefill() {
            "prefill"
        } else {
            "decoding"
        }
    }
}

pub struct TapAblation {
    pub rows: Vec<TapRow>,
    /// Newly trained policies, in row order (`None` where one was reused).
    pub policies: Vec<Option<Ssys1>>,
}

impl TapAblation {
    /// Best decoding-stage rate minus best prefill-stage rate.
    pub fn decoding_minus_prefill(&self) -> f64 {
        let best = |prefill: bool| {
            self.rows
                .iter()
                .filter(|r| r.tap.is_prefill() == prefill)
                .map(|r| r.table.overall())
                .fold(f64::NEG_INFINITY, f64::max)
        };
        best(false) - best(true)
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| tap | stage | overall |\n|---|---|---|\n");
        for r in &self.rows {
            s += &format!("| {:?} | {} | {:.3} |\n", r.tap, r.stage(), r.table.overall());
        }
        s
    }
}

/// Four policies that differ only in which hidden state they are fed.
pub fn ablate_taps(setup: &AblationSetup<'_>, lsys2: &Lsys2) -> Result<TapAblation, EvalError> {
    let mut rows = Vec::new();
    let mut policies = Vec::new();
    for tap in LatentTap::ALL {
        let (p, table) = setup.policy_row(lsys2, tap, &format!("dp-{tap:?}"))?;
        rows.push(TapRow { tap, table });
        policies.push(p);
    }
    let budget = |r: &TapRow| {
        let mut m = r.table.metadata.clone();
        for k in ["tap", "ssys1"] {
            m.remove(k);
        }
        m
    };
    if rows.iter().any(|r| budget(r) != budget(&rows[0])) {
        return Err(EvalError::Protocol("tap policies were trained under different budgets".into()));
    }
    Ok(TapAblation { rows, policies })
}

pub struct PtFtAblation {
    pub pretrained: ResultTable,
    pub finetuned: ResultTable,
    pub pretrained_hash: String,
    pub finetuned_hash: String,
    pub policies: Vec<Option<Ssys1>>,
}

impl PtFtAblation {
    pub fn to_markdown(&self, on_subset: impl Fn(&str) -> bool) -> String {
        let mut s = String::from("| latent source | overall | on-subset | off-subset |\n|---|---|---|---|\n");
        for (name, t) in [("pretrained", &self.pretrained), ("finetuned", &self.finetuned)] {
            s += &format!(
                "| {name} | {:.3} | {:.3} | {:.3} |\n",
                t.overall(),
                t.mean_where(&on_subset),
                t.mean_where(|n| !on_subset(n))
            );
        }
        s
    }
}

/// End-of-text policies from a pretrained model and its finetuned child.
pub fn ablate_pt_ft(setup: &AblationSetup<'_>, pretrained: &Lsys2, finetuned: &Lsys2) -> Result<PtFtAblation, EvalError> {
    let pt_hash = pretrained.checkpoint_hash();
    if pretrained.meta.tag != SourceModel::Pretrained
        || finetuned.meta.tag != SourceModel::Finetuned
        || finetuned.meta.parent_hash.as_deref() != Some(pt_hash.as_str())
    {
        return Err(EvalError::Provenance(format!(
            "finetuned model's parent {:?} is not the pretrained model {pt_hash}",
            finetuned.meta.parent_hash
        )));
    }
    let (a, pt) = setup.policy_row(pretrained, LatentTap::EndOfText, "dp-pretrained")?;
    let (b, ft) = setup.policy_row(finetuned, LatentTap::EndOfText, "dp-finetuned")?;
    Ok(PtFtAblation {
        pretrained: pt,
        finetuned: ft,
        pretrained_hash: pt_hash,
        finetuned_hash: finetuned.checkpoint_hash(),
        policies: vec![a, b],
    })
}
