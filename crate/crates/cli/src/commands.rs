use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use dualproc::evalbench::{
    ablate_pt_ft, ablate_taps, run_rollouts_with_cost, timing_bench, write_report, AblationSetup, ResultTable,
    Runner, TaskCost,
};
use dualproc::hashing::sha256_hex;
use dualproc::lsys2::{
    finetune, pretrain, token_accuracy, ActionTokenizer, LatentTap, Lsys2, Lsys2Example, SourceModel,
};
use dualproc::runtime::{Models, TriggerPolicy};
use dualproc::simenv::dataset::{decode_dataset, write_dataset, DATASET_MAGIC};
use dualproc::simenv::{generate_dataset, split_eval_variants, Catalog, DatasetManifest, EvalSplit, Expert, Trajectory};
use dualproc::ssys1::{train, LatentStore, Ssys1};
use dualproc::tensor::{read_checkpoint, CHECKPOINT_MAGIC};
use serde::Serialize;
use serde_json::json;

use crate::config::{ExperimentConfig, RunnerKind, RESOLVED_CONFIG};
use crate::error::{CliError, Result};
use crate::manifest::{check_against_producer, file_sha256, now_unix, RunManifest};

pub const DATASET: &str = "dataset.dpd";
pub const DATASET_MANIFEST: &str = "dataset_manifest.json";
pub const SSYS1: &str = "ssys1.dpt";
pub const SSYS1_ZERO: &str = "ssys1_zero.dpt";
pub const REPRO_DIR: &str = "repro-scratch";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Lsys2Pretrain,
    Lsys2Finetune,
    Ssys1,
    Ssys1Zero,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Lsys2Pretrain => "lsys2-pretrain",
            Phase::Lsys2Finetune => "lsys2-finetune",
            Phase::Ssys1 => "ssys1",
            Phase::Ssys1Zero => "ssys1-zero",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationKind {
    Taps,
    PtFt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Ran,
    UpToDate,
}

/// Everything a command needs: the resolved config and where to write.
pub struct Ctx {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    pub force: bool,
}

pub fn lsys2_file(source: SourceModel) -> &'static str {
    match source {
        SourceModel::Pretrained => "lsys2_pretrained.dpt",
        SourceModel::Finetuned => "lsys2_finetuned.dpt",
        SourceModel::Untrained => "lsys2_untrained.dpt",
    }
}

fn tap_slug(tap: LatentTap) -> &'static str {
    match tap {
        LatentTap::MeanOfText => "mean-of-text",
        LatentTap::EndOfText => "end-of-text",
        LatentTap::StartOfAction => "start-of-action",
        LatentTap::EndOfAction => "end-of-action",
    }
}

fn sidecar(rel: &str) -> String {
    Path::new(rel).with_extension("json").to_string_lossy().into_owned()
}

/// A checkpoint and its metadata sidecar.
fn with_sidecar(rel: &str) -> [String; 2] {
    [rel.to_string(), sidecar(rel)]
}

fn loss_csv(losses: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        writeln!(s, "{i},{l}").expect("string write");
    }
    s
}

impl Ctx {
    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn write(&self, rel: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let p = self.path(rel);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(p, contents)?;
        Ok(())
    }

    fn write_json(&self, rel: &str, value: &impl Serialize) -> Result<()> {
        self.write(rel, serde_json::to_string_pretty(value)?)
    }

    /// Runs `body` unless a manifest shows the same config section and
    /// inputs already produced the same outputs. `body` returns the
    /// output paths it wrote.
    fn stage(
        &self,
        command: &str,
        section: serde_json::Value,
        inputs: &[String],
        body: impl FnOnce() -> Result<Vec<String>>,
    ) -> Result<Outcome> {
        let config_hash = sha256_hex(format!("{command}\n{section}").as_bytes());
        let mut input_hashes = BTreeMap::new();
        for rel in inputs {
            let p = self.path(rel);
            if !p.exists() {
                return Err(CliError::Provenance(format!(
                    "`{command}` needs {rel}, which is missing from {}",
                    self.out.display()
                )));
            }
            let h = file_sha256(&p)?;
            check_against_producer(&self.out, rel, &h)?;
            input_hashes.insert(rel.clone(), h);
        }
        if !self.force {
            if let Some(m) = RunManifest::load(&self.out, command) {
                if m.is_current(&self.out, &config_hash, &input_hashes) {
                    log::info!("{command}: up to date, nothing to do (use --force to rerun)");
                    return Ok(Outcome::UpToDate);
                }
            }
        }
        std::fs::create_dir_all(&self.out)?;
        self.write(RESOLVED_CONFIG, self.cfg.resolved_json())?;
        let started = now_unix();
        let written = body().map_err(|e| e.context(command))?;
        let mut outputs = BTreeMap::new();
        for rel in written {
            let h = file_sha256(&self.path(&rel))?;
            outputs.insert(rel, h);
        }
        RunManifest {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash,
            inputs: input_hashes,
            outputs,
            started_unix: started,
            finished_unix: now_unix(),
        }
        .save(&self.out)?;
        log::info!("{command}: done");
        Ok(Outcome::Ran)
    }

    fn seed(&self, offset: u64) -> u64 {
        self.cfg.seed.wrapping_add(offset)
    }

    fn load_dataset(&self) -> Result<(Catalog, Vec<Trajectory>, String)> {
        let bytes = std::fs::read(self.path(DATASET))?;
        let hash = sha256_hex(&bytes);
        let (catalog, trajs) = decode_dataset(&bytes)?;
        Ok((catalog, trajs, hash))
    }

    fn load_split(&self) -> Result<EvalSplit> {
        let m: DatasetManifest = serde_json::from_str(&std::fs::read_to_string(self.path(DATASET_MANIFEST))?)?;
        Ok(m.split)
    }

    fn load_lsys2(&self, source: SourceModel) -> Result<Lsys2> {
        let rel = lsys2_file(source);
        let m = Lsys2::load(&self.path(rel)).map_err(|e| CliError::from(e).context(rel))?;
        if m.meta.tag != source {
            return Err(CliError::Provenance(format!("{rel} holds a {:?} model", m.meta.tag)));
        }
        Ok(m)
    }

    fn load_ssys1(&self, rel: &str) -> Result<Ssys1> {
        Ssys1::load(&self.path(rel)).map_err(|e| CliError::from(e).context(rel))
    }
}

fn expect_dataset(what: &str, recorded: Option<&str>, dataset_hash: &str) -> Result<()> {
    match recorded {
        Some(h) if h == dataset_hash => Ok(()),
        other => Err(CliError::Provenance(format!(
            "{what} was trained on dataset {other:?}, found {dataset_hash}"
        ))),
    }
}

pub fn gen_data(ctx: &Ctx) -> Result<Outcome> {
    let section = json!({"seed": ctx.cfg.seed, "dataset": ctx.cfg.dataset});
    ctx.stage("gen-data", section, &[], || {
        let catalog = Catalog::standard();
        let split = split_eval_variants(&catalog, ctx.cfg.dataset.split_seed)?;
        let (trajs, manifest) = generate_dataset(&catalog, &split, ctx.cfg.dataset.episodes_per_task, ctx.seed(0))?;
        std::fs::create_dir_all(&ctx.out)?;
        write_dataset(&ctx.path(DATASET), &catalog, &trajs)?;
        ctx.write_json(DATASET_MANIFEST, &manifest)?;
        Ok(vec![DATASET.into(), DATASET_MANIFEST.into()])
    })
}

fn examples(trajs: &[Trajectory], tok: &ActionTokenizer) -> Result<Vec<Lsys2Example>> {
    Ok(trajs
        .iter()
        .map(|t| Lsys2Example::from_trajectory(t, tok))
        .collect::<std::result::Result<_, _>>()?)
}

pub fn train_phase(ctx: &Ctx, phase: Phase) -> Result<Outcome> {
    let cfg = &ctx.cfg;
    let command = format!("train-{}", phase.name());
    match phase {
        Phase::Lsys2Pretrain => {
            let section = json!({"seed": cfg.seed, "lsys2": cfg.lsys2, "train": cfg.lsys2_pretrain});
            ctx.stage(&command, section, &[DATASET.into()], || {
                let (_, trajs, hash) = ctx.load_dataset()?;
                let tok = ActionTokenizer::fit(trajs.iter().flat_map(|t| t.steps.iter().map(|s| &s.action)))?;
                let ex = examples(&trajs, &tok)?;
                let (mut model, report) = pretrain(&ex, cfg.lsys2.clone(), tok, &cfg.lsys2_pretrain, ctx.seed(1))?;
                model.meta.dataset_hash = Some(hash);
                let rel = lsys2_file(SourceModel::Pretrained);
                model.save(&ctx.path(rel))?;
                ctx.write("lsys2_pretrained_loss.csv", loss_csv(&report.losses))?;
                let mut out = with_sidecar(rel).to_vec();
                out.push("lsys2_pretrained_loss.csv".into());
                Ok(out)
            })
        }
        Phase::Lsys2Finetune => {
            let section = json!({"seed": cfg.seed, "train": cfg.lsys2_finetune, "family": cfg.finetune_family});
            let mut inputs = vec![DATASET.to_string()];
            inputs.extend(with_sidecar(lsys2_file(SourceModel::Pretrained)));
            ctx.stage(&command, section, &inputs, || {
                let (catalog, trajs, hash) = ctx.load_dataset()?;
                let parent = ctx.load_lsys2(SourceModel::Pretrained)?;
                expect_dataset("the pretrained model", parent.meta.dataset_hash.as_deref(), &hash)?;
                let subset: Vec<Trajectory> = trajs
                    .into_iter()
                    .filter(|t| catalog.by_name(&t.task_name).is_ok_and(|d| d.family == cfg.finetune_family))
                    .collect();
                if subset.is_empty() {
                    return Err(CliError::Config(format!("no {:?} episodes in the dataset", cfg.finetune_family)));
                }
                let ex = examples(&subset, &parent.meta.action_tokenizer)?;
                let (model, report) = finetune(&parent, &ex, &cfg.lsys2_finetune, ctx.seed(2))?;
                let rel = lsys2_file(SourceModel::Finetuned);
                model.save(&ctx.path(rel))?;
                ctx.write("lsys2_finetuned_loss.csv", loss_csv(&report.losses))?;
                let mut out = with_sidecar(rel).to_vec();
                out.push("lsys2_finetuned_loss.csv".into());
                Ok(out)
            })
        }
        Phase::Ssys1 => {
            let section = json!({
                "seed": cfg.seed, "ssys1": cfg.ssys1, "train": cfg.ssys1_train,
                "tap": cfg.tap, "latent_source": cfg.latent_source,
            });
            let mut inputs = vec![DATASET.to_string()];
            inputs.extend(with_sidecar(lsys2_file(cfg.latent_source)));
            ctx.stage(&command, section, &inputs, || {
                let (_, trajs, hash) = ctx.load_dataset()?;
                let lsys2 = ctx.load_lsys2(cfg.latent_source)?;
                expect_dataset("the large model", lsys2.meta.dataset_hash.as_deref(), &hash)?;
                let store = LatentStore::precompute(&lsys2, cfg.tap, &trajs)?;
                let latents = format!("latents_{:?}_{}.dpl", cfg.latent_source, tap_slug(cfg.tap)).to_lowercase();
                store.save(&ctx.path(&latents))?;
                let (mut policy, report) = train(&trajs, Some(&store), cfg.ssys1.clone(), &cfg.ssys1_train, ctx.seed(3))?;
                policy.meta.dataset_hash = Some(hash);
                policy.save(&ctx.path(SSYS1))?;
                ctx.write("ssys1_loss.csv", loss_csv(&report.losses))?;
                let mut out = with_sidecar(SSYS1).to_vec();
                out.push(latents);
                out.push("ssys1_loss.csv".into());
                Ok(out)
            })
        }
        Phase::Ssys1Zero => {
            let section = json!({"seed": cfg.seed, "ssys1": cfg.ssys1, "train": cfg.ssys1_train});
            ctx.stage(&command, section, &[DATASET.into()], || {
                let (_, trajs, hash) = ctx.load_dataset()?;
                let (mut policy, report) = train(&trajs, None, cfg.ssys1.clone(), &cfg.ssys1_train, ctx.seed(3))?;
                policy.meta.dataset_hash = Some(hash);
                policy.save(&ctx.path(SSYS1_ZERO))?;
                ctx.write("ssys1_zero_loss.csv", loss_csv(&report.losses))?;
                let mut out = with_sidecar(SSYS1_ZERO).to_vec();
                out.push("ssys1_zero_loss.csv".into());
                Ok(out)
            })
        }
    }
}

fn runner_inputs(cfg: &ExperimentConfig, kind: RunnerKind) -> Vec<String> {
    let mut v = Vec::new();
    match kind {
        RunnerKind::Expert | RunnerKind::Random => {}
        RunnerKind::Ssys1Zero => v.extend(with_sidecar(SSYS1_ZERO)),
        RunnerKind::Dp | RunnerKind::DpEveryStep => {
            v.extend(with_sidecar(lsys2_file(cfg.latent_source)));
            v.extend(with_sidecar(SSYS1));
        }
        RunnerKind::Lsys2Only => v.extend(with_sidecar(lsys2_file(cfg.latent_source))),
    }
    v
}

fn dedup(mut v: Vec<String>) -> Vec<String> {
    let mut seen = std::collections::BTreeSet::new();
    v.retain(|x| seen.insert(x.clone()));
    v
}

fn cost_csv(rows: &[(String, Vec<TaskCost>)]) -> String {
    let mut s = String::from("runner,task,episodes,steps,lsys2_runs,flops,mean_flops_per_step\n");
    for (runner, costs) in rows {
        for c in costs {
            let mean = if c.steps == 0 { 0.0 } else { c.flops as f64 / c.steps as f64 };
            writeln!(s, "{runner},{},{},{},{},{},{mean:.1}", c.task, c.episodes, c.steps, c.lsys2_runs, c.flops)
                .expect("string write");
        }
    }
    s
}

fn table_summary(t: &ResultTable, catalog: &Catalog) -> serde_json::Value {
    let disc = |n: &str| catalog.by_name(n).is_ok_and(|d| d.is_discrimination_task());
    json!({
        "runner": t.runner,
        "overall": t.overall(),
        "discrimination": t.mean_where(disc),
        "categories": t.category_rates(),
        "tasks": t.rows.iter().map(|r| (r.task.clone(), r.rate())).collect::<BTreeMap<_, _>>(),
        "metadata": t.metadata,
    })
}

pub fn eval(ctx: &Ctx) -> Result<Outcome> {
    let cfg = &ctx.cfg;
    let section = json!({
        "protocol": cfg.protocol, "trigger": cfg.trigger, "runners": cfg.eval_runners,
        "tap": cfg.tap, "latent_source": cfg.latent_source,
    });
    let mut inputs = vec![DATASET_MANIFEST.to_string()];
    for k in &cfg.eval_runners {
        inputs.extend(runner_inputs(cfg, *k));
    }
    let inputs = dedup(inputs);
    ctx.stage("eval", section, &inputs, || {
        let catalog = Catalog::standard();
        let split = ctx.load_split()?;
        let mut tables = Vec::new();
        let mut costs = Vec::new();
        for &kind in &cfg.eval_runners {
            let (t, c) = with_runner(ctx, kind, |runner| {
                Ok(run_rollouts_with_cost(&catalog, &split, runner, kind.name(), &cfg.protocol)?)
            })
            .map_err(|e| e.context(kind.name()))?;
            log::info!("eval {}: overall {:.3}", kind.name(), t.overall());
            tables.push(t);
            costs.push((kind.name().to_string(), c));
        }
        write_report(&ctx.out, "eval", &tables.iter().collect::<Vec<_>>())?;
        ctx.write("eval_cost.csv", cost_csv(&costs))?;
        let summary = json!({
            "protocol": cfg.protocol,
            "protocol_hash": cfg.protocol.hash(),
            "runners": tables.iter().map(|t| table_summary(t, &catalog)).collect::<Vec<_>>(),
        });
        ctx.write_json("eval_summary.json", &summary)?;
        Ok(vec![
            "eval.csv".into(),
            "eval.md".into(),
            "eval_cost.csv".into(),
            "eval_summary.json".into(),
        ])
    })
}

/// Loads whatever `kind` needs and hands the runner to `f`.
fn with_runner<T>(ctx: &Ctx, kind: RunnerKind, f: impl FnOnce(Runner<'_>) -> Result<T>) -> Result<T> {
    let cfg = &ctx.cfg;
    match kind {
        RunnerKind::Expert => f(Runner::Expert(Expert::default())),
        RunnerKind::Random => f(Runner::Random),
        RunnerKind::Ssys1Zero => {
            let policy = ctx.load_ssys1(SSYS1_ZERO)?;
            let models = Models::zero_latent(&policy);
            f(Runner::Session {
                models: &models,
                trigger: cfg.trigger,
            })
        }
        RunnerKind::Dp | RunnerKind::DpEveryStep => {
            let lsys2 = ctx.load_lsys2(cfg.latent_source)?;
            let policy = ctx.load_ssys1(SSYS1)?;
            let models = Models::dual(&lsys2, &policy, cfg.tap, false)?;
            let trigger = if kind == RunnerKind::Dp {
                cfg.trigger
            } else {
                TriggerPolicy::EveryStep
            };
            f(Runner::Session {
                models: &models,
                trigger,
            })
        }
        RunnerKind::Lsys2Only => {
            let lsys2 = ctx.load_lsys2(cfg.latent_source)?;
            f(Runner::Lsys2Only(&lsys2))
        }
    }
}

pub fn bench(ctx: &Ctx) -> Result<Outcome> {
    let cfg = &ctx.cfg;
    let section = json!({
        "bench": cfg.bench, "trigger": cfg.trigger, "tap": cfg.tap, "latent_source": cfg.latent_source,
    });
    let mut inputs = vec![DATASET_MANIFEST.to_string()];
    inputs.extend(runner_inputs(cfg, RunnerKind::Dp));
    inputs.extend(with_sidecar(SSYS1_ZERO));
    ctx.stage("bench", section, &inputs, || {
        let catalog = Catalog::standard();
        let split = ctx.load_split()?;
        let lsys2 = ctx.load_lsys2(cfg.latent_source)?;
        let policy = ctx.load_ssys1(SSYS1)?;
        let zero = ctx.load_ssys1(SSYS1_ZERO)?;
        let dual = Models::dual(&lsys2, &policy, cfg.tap, false)?;
        let small = Models::zero_latent(&zero);
        let runners = [
            (
                "ssys1-only",
                Runner::Session {
                    models: &small,
                    trigger: cfg.trigger,
                },
            ),
            (
                "dp",
                Runner::Session {
                    models: &dual,
                    trigger: cfg.trigger,
                },
            ),
            (
                "dp-every-step",
                Runner::Session {
                    models: &dual,
                    trigger: TriggerPolicy::EveryStep,
                },
            ),
            ("lsys2-only", Runner::Lsys2Only(&lsys2)),
        ];
        let table = timing_bench(&catalog, &split, &runners, cfg.bench.episodes, cfg.bench.seed)?;
        let gate = table.check_speed_gate(
            "ssys1-only",
            "dp",
            "lsys2-only",
            cfg.bench.max_overhead,
            cfg.bench.min_speedup,
        );
        let words: Vec<usize> = catalog
            .tasks
            .iter()
            .map(|d| d.template.split_whitespace().count())
            .collect();
        let min_words = words.iter().copied().min().unwrap_or(1);
        let flops_ratio = lsys2.flops(min_words) as f64 / policy.flops() as f64;
        let mut md = String::from("## bench\n\n");
        md += &table.to_markdown();
        writeln!(
            md,
            "\nlarge/small flops ratio (shortest instruction): {flops_ratio:.1}\n\ngate: {}",
            match &gate {
                Ok(()) => "pass".to_string(),
                Err(e) => format!("FAIL ({e})"),
            }
        )
        .expect("string write");
        ctx.write("bench.md", md)?;
        ctx.write_json(
            "bench.json",
            &json!({
                "table": table,
                "flops_ratio_min": flops_ratio,
                "gate_passed": gate.is_ok(),
            }),
        )?;
        gate.map_err(CliError::from)?;
        Ok(vec!["bench.md".into(), "bench.json".into()])
    })
}

pub fn ablate(ctx: &Ctx, kind: AblationKind) -> Result<Outcome> {
    let cfg = &ctx.cfg;
    let section = json!({
        "kind": format!("{kind:?}"), "seed": cfg.seed, "ssys1": cfg.ssys1, "train": cfg.ssys1_train,
        "protocol": cfg.protocol, "latent_source": cfg.latent_source,
    });
    let mut inputs = vec![DATASET.to_string(), DATASET_MANIFEST.to_string()];
    inputs.extend(with_sidecar(SSYS1_ZERO));
    match kind {
        AblationKind::Taps => inputs.extend(with_sidecar(lsys2_file(cfg.latent_source))),
        AblationKind::PtFt => {
            inputs.extend(with_sidecar(lsys2_file(SourceModel::Pretrained)));
            inputs.extend(with_sidecar(lsys2_file(SourceModel::Finetuned)));
        }
    }
    let command = match kind {
        AblationKind::Taps => "ablate-taps",
        AblationKind::PtFt => "ablate-pt-ft",
    };
    ctx.stage(command, section, &inputs, || {
        let (catalog, trajs, hash) = ctx.load_dataset()?;
        let split = ctx.load_split()?;
        let existing = if ctx.path(SSYS1).exists() {
            Some(ctx.load_ssys1(SSYS1)?)
        } else {
            None
        };
        let setup = AblationSetup {
            catalog: &catalog,
            split: &split,
            trajectories: &trajs,
            config: cfg.ssys1.clone(),
            train: cfg.ssys1_train.clone(),
            seed: ctx.seed(3),
            protocol: cfg.protocol.clone(),
            reuse: existing.iter().collect(),
        };
        let zero = ctx.load_ssys1(SSYS1_ZERO)?;
        let zero_models = Models::zero_latent(&zero);
        let zero_table = dualproc::evalbench::run_rollouts(
            &catalog,
            &split,
            Runner::Session {
                models: &zero_models,
                trigger: TriggerPolicy::OnInstructionChange,
            },
            "ssys1-zero",
            &cfg.protocol,
        )?;
        let disc = |n: &str| catalog.by_name(n).is_ok_and(|d| d.is_discrimination_task());
        let zero_disc = zero_table.mean_where(disc);
        let mut written = Vec::new();
        match kind {
            AblationKind::Taps => {
                let lsys2 = ctx.load_lsys2(cfg.latent_source)?;
                expect_dataset("the large model", lsys2.meta.dataset_hash.as_deref(), &hash)?;
                let ab = ablate_taps(&setup, &lsys2)?;
                if ab.rows.len() != LatentTap::ALL.len() {
                    return Err(CliError::Gate(format!("expected 4 tap rows, got {}", ab.rows.len())));
                }
                for (row, p) in ab.rows.iter().zip(&ab.policies) {
                    if let Some(p) = p {
                        let rel = format!("ablations/ssys1_{}.dpt", tap_slug(row.tap));
                        ctx.write(&rel, [])?;
                        p.save(&ctx.path(&rel))?;
                        written.extend(with_sidecar(&rel));
                    }
                }
                let mut tables: Vec<&ResultTable> = ab.rows.iter().map(|r| &r.table).collect();
                tables.push(&zero_table);
                written.extend(path_names(&ctx.out, write_report(&ctx.out, command, &tables)?));
                let mut md = ab.to_markdown();
                writeln!(md, "\nzero-latent baseline: overall {:.3}, discrimination {zero_disc:.3}", zero_table.overall())
                    .expect("string write");
                writeln!(md, "best decoding minus best prefill: {:+.3}", ab.decoding_minus_prefill()).expect("string write");
                ctx.write("ablate_taps_summary.md", md)?;
                let rows: Vec<_> = ab
                    .rows
                    .iter()
                    .map(|r| {
                        json!({
                            "tap": r.tap, "stage": r.stage(), "overall": r.table.overall(),
                            "discrimination": r.table.mean_where(disc),
                            "margin_over_zero": r.table.mean_where(disc) - zero_disc,
                            "metadata": r.table.metadata,
                        })
                    })
                    .collect();
                ctx.write_json(
                    "ablate_taps_summary.json",
                    &json!({
                        "rows": rows,
                        "decoding_minus_prefill": ab.decoding_minus_prefill(),
                        "zero": table_summary(&zero_table, &catalog),
                    }),
                )?;
                written.push("ablate_taps_summary.md".into());
                written.push("ablate_taps_summary.json".into());
            }
            AblationKind::PtFt => {
                let pt = ctx.load_lsys2(SourceModel::Pretrained)?;
                let ft = ctx.load_lsys2(SourceModel::Finetuned)?;
                expect_dataset("the pretrained model", pt.meta.dataset_hash.as_deref(), &hash)?;
                let on = |n: &str| catalog.by_name(n).is_ok_and(|d| d.family == cfg.finetune_family);
                let ex = examples(&trajs, &pt.meta.action_tokenizer)?;
                let (on_ex, off_ex): (Vec<_>, Vec<_>) = ex.into_iter().partition(|e| on(&e.task_name));
                let acc = |m: &Lsys2| -> Result<(f64, f64)> { Ok((token_accuracy(m, &on_ex)?, token_accuracy(m, &off_ex)?)) };
                let (pt_on, pt_off) = acc(&pt)?;
                let (ft_on, ft_off) = acc(&ft)?;
                let ab = ablate_pt_ft(&setup, &pt, &ft)?;
                for (name, p) in ["pretrained", "finetuned"].iter().zip(&ab.policies) {
                    if let Some(p) = p {
                        let rel = format!("ablations/ssys1_{name}_end-of-text.dpt");
                        ctx.write(&rel, [])?;
                        p.save(&ctx.path(&rel))?;
                        written.extend(with_sidecar(&rel));
                    }
                }
                written.extend(path_names(
                    &ctx.out,
                    write_report(&ctx.out, command, &[&ab.pretrained, &ab.finetuned, &zero_table])?,
                ));
                let mut md = ab.to_markdown(on);
                writeln!(
                    md,
                    "\n| model | on-subset token accuracy | off-subset token accuracy |\n|---|---|---|\n\
                     | pretrained | {pt_on:.3} | {pt_off:.3} |\n| finetuned | {ft_on:.3} | {ft_off:.3} |"
                )
                .expect("string write");
                ctx.write("ablate_pt_ft_summary.md", md)?;
                let side = |t: &ResultTable| {
                    json!({
                        "overall": t.overall(), "on_subset": t.mean_where(on), "off_subset": t.mean_where(|n| !on(n)),
                        "discrimination": t.mean_where(disc),
                    })
                };
                ctx.write_json(
                    "ablate_pt_ft_summary.json",
                    &json!({
                        "token_accuracy": {
                            "pretrained": {"on_subset": pt_on, "off_subset": pt_off},
                            "finetuned": {"on_subset": ft_on, "off_subset": ft_off},
                        },
                        "success": {"pretrained": side(&ab.pretrained), "finetuned": side(&ab.finetuned)},
                        "pretrained_hash": ab.pretrained_hash,
                        "finetuned_hash": ab.finetuned_hash,
                        "zero": table_summary(&zero_table, &catalog),
                    }),
                )?;
                written.push("ablate_pt_ft_summary.md".into());
                written.push("ablate_pt_ft_summary.json".into());
            }
        }
        Ok(written)
    })
}

fn path_names(out: &Path, paths: Vec<PathBuf>) -> Vec<String> {
    paths
        .into_iter()
        .map(|p| p.strip_prefix(out).unwrap_or(&p).to_string_lossy().into_owned())
        .collect()
}

/// Checks one artifact file on its own and against any manifests next to
/// it. Returns a JSON report.
pub fn verify(path: &Path) -> Result<serde_json::Value> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let hash = sha256_hex(&bytes);
    let dir = path.parent().unwrap_or(Path::new("."));
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    check_against_producer(dir, &name, &hash)?;
    let mut report = json!({"file": path.display().to_string(), "sha256": hash});
    if bytes.starts_with(DATASET_MAGIC) {
        let (catalog, trajs) = decode_dataset(&bytes)?;
        let mut counts: BTreeMap<String, usize> = catalog.tasks.iter().map(|t| (t.name.clone(), 0)).collect();
        for t in &trajs {
            *counts.get_mut(&t.task_name).ok_or_else(|| CliError::Provenance(format!("unknown task {}", t.task_name)))? += 1;
        }
        let total_steps: usize = trajs.iter().map(Trajectory::len).sum();
        if let Some(bad) = trajs.iter().find(|t| !t.success || t.is_empty()) {
            return Err(CliError::Provenance(format!("{} has a failed or empty episode", bad.task_name)));
        }
        let manifest_path = dir.join(DATASET_MANIFEST);
        if manifest_path.exists() {
            let m: DatasetManifest = serde_json::from_str(&std::fs::read_to_string(&manifest_path)?)?;
            if m.counts != counts || m.total_steps != total_steps {
                return Err(CliError::Provenance(format!(
                    "dataset does not match {DATASET_MANIFEST}: expected counts {:?} and {} steps, found {counts:?} and {total_steps}",
                    m.counts, m.total_steps
                )));
            }
        }
        report["kind"] = json!("dataset");
        report["episodes"] = json!(trajs.len());
        report["total_steps"] = json!(total_steps);
        report["counts"] = json!(counts);
    } else if bytes.starts_with(CHECKPOINT_MAGIC) {
        let params = read_checkpoint(&bytes)?;
        report["tensors"] = json!(params.len());
        if let Ok(m) = Lsys2::load(path) {
            report["kind"] = json!("lsys2");
            report["tag"] = json!(m.meta.tag);
            report["checkpoint_hash"] = json!(m.checkpoint_hash());
        } else {
            let m = Ssys1::load(path)?;
            report["kind"] = json!("ssys1");
            report["tap"] = json!(m.meta.tap);
            report["checkpoint_hash"] = json!(m.checkpoint_hash());
        }
    } else if bytes.starts_with(b"DPL1") {
        let store = LatentStore::from_bytes(&bytes)?;
        report["kind"] = json!("latents");
        report["entries"] = json!(store.len());
        report["tap"] = json!(store.tap);
        report["checkpoint_hash"] = json!(store.checkpoint_hash);
    } else {
        return Err(CliError::Usage(format!("{} is not a known artifact", path.display())));
    }
    Ok(report)
}

/// Files the reproducibility check compares byte for byte.
pub fn repro_files(cfg: &ExperimentConfig) -> Vec<String> {
    let mut v = vec![DATASET.to_string(), DATASET_MANIFEST.to_string()];
    for rel in [lsys2_file(SourceModel::Pretrained), lsys2_file(SourceModel::Finetuned), SSYS1, SSYS1_ZERO] {
        v.extend(with_sidecar(rel));
    }
    v.push(format!("latents_{:?}_{}.dpl", cfg.latent_source, tap_slug(cfg.tap)).to_lowercase());
    for f in [
        "lsys2_pretrained_loss.csv",
        "lsys2_finetuned_loss.csv",
        "ssys1_loss.csv",
        "ssys1_zero_loss.csv",
        "eval.csv",
        "eval_cost.csv",
        "eval_summary.json",
    ] {
        v.push(f.into());
    }
    v
}

/// Every stage up to and including evaluation, in order.
pub fn pipeline(ctx: &Ctx) -> Result<()> {
    gen_data(ctx)?;
    for p in [Phase::Lsys2Pretrain, Phase::Lsys2Finetune, Phase::Ssys1Zero, Phase::Ssys1] {
        train_phase(ctx, p)?;
    }
    eval(ctx)?;
    Ok(())
}

/// Re-derives the pipeline in a scratch directory inside the output
/// directory and byte-compares every deterministic artifact.
pub fn repro(ctx: &Ctx) -> Result<serde_json::Value> {
    let files = repro_files(&ctx.cfg);
    if let Some(missing) = files.iter().find(|f| !ctx.path(f).exists()) {
        return Err(CliError::Provenance(format!(
            "{missing} is missing; run the pipeline before `repro`"
        )));
    }
    let scratch = ctx.path(REPRO_DIR);
    if scratch.exists() {
        std::fs::remove_dir_all(&scratch)?;
    }
    let mut cfg = ctx.cfg.clone();
    cfg.output_dir = scratch.clone();
    let again = Ctx {
        cfg,
        out: scratch.clone(),
        force: true,
    };
    pipeline(&again).map_err(|e| e.context("repro"))?;
    let mut rows = Vec::new();
    let mut mismatched = Vec::new();
    for f in &files {
        let a = file_sha256(&ctx.path(f))?;
        let b = file_sha256(&again.path(f))?;
        if a != b {
            mismatched.push(f.clone());
        }
        rows.push(json!({"file": f, "original": a, "rederived": b, "identical": a == b}));
    }
    let report = json!({"files": rows, "identical": mismatched.is_empty()});
    ctx.write_json("repro_report.json", &report)?;
    if !mismatched.is_empty() {
        return Err(CliError::Gate(format!("re-derived files differ: {}", mismatched.join(", "))));
    }
    std::fs::remove_dir_all(&scratch)?;
    Ok(report)
}
