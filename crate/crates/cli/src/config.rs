use std::path::{Path, PathBuf};

use dualproc::evalbench::EvalProtocol;
use dualproc::lsys2::{LatentTap, Lsys2Config, Lsys2TrainConfig, SourceModel};
use dualproc::runtime::TriggerPolicy;
use dualproc::simenv::{Catalog, TaskFamily};
use dualproc::ssys1::{Ssys1Config, Ssys1TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const SCHEMA_VERSION: u32 = 1;
pub const RESOLVED_CONFIG: &str = "config.resolved.json";
pub const OUTPUT_DIR_ENV: &str = "DP_OUTPUT_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetParams {
    pub episodes_per_task: usize,
    #[serde(default)]
    pub split_seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunnerKind {
    Expert,
    Random,
    /// S-Sys1 trained and run with an all-zero latent.
    Ssys1Zero,
    /// The dual system under the configured trigger.
    Dp,
    /// The dual system rerunning the large model at every step.
    DpEveryStep,
    /// The large model alone, decoding an action at every step.
    Lsys2Only,
}

impl RunnerKind {
    pub fn name(self) -> &'static str {
        match self {
            RunnerKind::Expert => "expert",
            RunnerKind::Random => "random",
            RunnerKind::Ssys1Zero => "ssys1-zero",
            RunnerKind::Dp => "dp",
            RunnerKind::DpEveryStep => "dp-every-step",
            RunnerKind::Lsys2Only => "lsys2-only",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchParams {
    pub episodes: usize,
    pub seed: u64,
    /// Dual system median step time may be at most this multiple of the
    /// small policy alone.
    pub max_overhead: f64,
    /// The large model alone must be at least this much slower than the
    /// dual system.
    pub min_speedup: f64,
}

impl Default for BenchParams {
    fn default() -> Self {
        Self {
            episodes: 60,
            seed: 0,
            max_overhead: 1.5,
            min_speedup: 5.0,
        }
    }
}

fn default_finetune() -> Lsys2TrainConfig {
    let base = Lsys2TrainConfig::default();
    Lsys2TrainConfig {
        steps: base.steps / 2,
        ..base
    }
}

fn default_finetune_family() -> TaskFamily {
    TaskFamily::PickPlace
}

fn default_tap() -> LatentTap {
    LatentTap::EndOfText
}

fn default_source() -> SourceModel {
    SourceModel::Finetuned
}

fn default_trigger() -> TriggerPolicy {
    TriggerPolicy::OnInstructionChange
}

fn default_runners() -> Vec<RunnerKind> {
    vec![RunnerKind::Expert, RunnerKind::Random, RunnerKind::Ssys1Zero, RunnerKind::Dp]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetParams,
    #[serde(default)]
    pub lsys2: Lsys2Config,
    #[serde(default)]
    pub lsys2_pretrain: Lsys2TrainConfig,
    #[serde(default = "default_finetune")]
    pub lsys2_finetune: Lsys2TrainConfig,
    /// Task family the large model is finetuned on.
    #[serde(default = "default_finetune_family")]
    pub finetune_family: TaskFamily,
    #[serde(default)]
    pub ssys1: Ssys1Config,
    #[serde(default)]
    pub ssys1_train: Ssys1TrainConfig,
    #[serde(default = "default_tap")]
    pub tap: LatentTap,
    /// Which large-model checkpoint feeds the policy.
    #[serde(default = "default_source")]
    pub latent_source: SourceModel,
    #[serde(default = "default_trigger")]
    pub trigger: TriggerPolicy,
    #[serde(default)]
    pub protocol: EvalProtocol,
    #[serde(default = "default_runners")]
    pub eval_runners: Vec<RunnerKind>,
    #[serde(default)]
    pub bench: BenchParams,
}

impl ExperimentConfig {
    /// Parses and validates; errors name the offending key and position.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| e.context(&path.display().to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.dataset.episodes_per_task == 0 {
            return bad("dataset.episodes_per_task must be >= 1".into());
        }
        self.lsys2.validate().map_err(|e| CliError::Config(format!("lsys2: {e}")))?;
        self.ssys1.validate().map_err(|e| CliError::Config(format!("ssys1: {e}")))?;
        for (key, t) in [
            ("lsys2_pretrain", (self.lsys2_pretrain.steps, self.lsys2_pretrain.batch_size)),
            ("lsys2_finetune", (self.lsys2_finetune.steps, self.lsys2_finetune.batch_size)),
            ("ssys1_train", (self.ssys1_train.steps, self.ssys1_train.batch_size)),
        ] {
            if t.0 == 0 || t.1 == 0 {
                return bad(format!("{key}.steps and {key}.batch_size must be >= 1"));
            }
        }
        if self.ssys1.latent_dim != self.lsys2.latent_dim() {
            return bad(format!(
                "ssys1.latent_dim {} does not match the large model's width {}",
                self.ssys1.latent_dim,
                self.lsys2.latent_dim()
            ));
        }
        if self.latent_source == SourceModel::Untrained {
            return bad("latent_source must be Pretrained or Finetuned".into());
        }
        if self.eval_runners.is_empty() {
            return bad("eval_runners is empty".into());
        }
        self.protocol
            .task_defs(&Catalog::standard())
            .map_err(|e| CliError::Config(format!("protocol: {e}")))?;
        Ok(())
    }

    /// Canonical JSON of the fully resolved config.
    pub fn resolved_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Output directory after the environment override.
    pub fn effective_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_DIR_ENV) {
            Some(d) if !d.is_empty() => PathBuf::from(d),
            _ => self.output_dir.clone(),
        }
    }
}
