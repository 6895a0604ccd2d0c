//! Run configuration: one JSON document covering every command, with
//! command-line overrides layered on top.

use std::path::{Path, PathBuf};

use clap::ValueEnum;
use serde::{Deserialize, Serialize};
use smp_core::baselines::L0Config;
use smp_core::data::SyntheticSpec;
use smp_core::encoder::EncoderConfig;
use smp_core::eval::FinetuneConfig;
use smp_core::metatrain::EpisodeConfig;
use smp_core::pretrain::PretrainConfig;
use smp_core::pruner::ScorerConfig;

use crate::CliError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum PruneMethod {
    #[default]
    Smp,
    Random,
    Hisp,
    L0,
}

impl PruneMethod {
    pub fn name(self) -> &'static str {
        match self {
            PruneMethod::Smp => "smp",
            PruneMethod::Random => "random",
            PruneMethod::Hisp => "hisp",
            PruneMethod::L0 => "l0",
        }
    }
}

/// Output directory of every command; `--out` replaces the one belonging
/// to the command being run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data: PathBuf,
    pub encoder: PathBuf,
    pub scorer: PathBuf,
    pub gates: PathBuf,
    pub finetune: PathBuf,
    pub eval: PathBuf,
    pub bench: PathBuf,
    pub sweep: PathBuf,
    pub viz: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        let run = |p: &str| PathBuf::from("runs").join(p);
        Paths {
            data: run("data"),
            encoder: run("encoder"),
            scorer: run("scorer"),
            gates: run("gates"),
            finetune: run("finetune"),
            eval: run("eval"),
            bench: run("bench"),
            sweep: run("sweep"),
            viz: run("viz"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneConfig {
    pub method: PruneMethod,
    /// Task whose training split drives pruning.
    pub task: String,
    /// Leading training instances used for scoring or importance.
    pub instances: usize,
    /// Epochs of task training before importance-based pruning.
    pub classifier_epochs: usize,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig { method: PruneMethod::Smp, task: "same-topic".into(), instances: 512, classifier_epochs: 2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub classification_tasks: Vec<String>,
    pub similarity_tasks: Vec<String>,
    /// Fine-tuning seeds; empty means the run seed alone.
    pub seeds: Vec<u64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            classification_tasks: vec!["topic".into(), "same-topic".into()],
            similarity_tasks: vec!["relatedness".into()],
            seeds: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub batch_size: usize,
    pub seq_len: usize,
    pub trials: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { batch_size: 32, seq_len: 32, trials: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub ratios: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig { ratios: vec![0.0, 0.25, 0.5, 0.75], seeds: vec![1, 2, 3] }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VizConfig {
    /// Sentence to render; defaults to the first test sentence of the
    /// first single-sentence task.
    pub sentence: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Filled in from the command line.
    pub command: String,
    pub seed: u64,
    pub precision: Precision,
    /// Share of heads removed per layer by `prune` and the pruning
    /// baselines. Meta-training validates at `episode.ratio`.
    pub ratio: f64,
    pub data: SyntheticSpec,
    pub encoder: EncoderConfig,
    pub pretrain: PretrainConfig,
    pub scorer: ScorerConfig,
    pub episode: EpisodeConfig,
    pub finetune: FinetuneConfig,
    pub prune: PruneConfig,
    pub l0: L0Config,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
    pub sweep: SweepConfig,
    pub viz: VizConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            command: String::new(),
            seed: 1,
            precision: Precision::F32,
            ratio: 0.5,
            data: SyntheticSpec::default(),
            encoder: EncoderConfig::default(),
            pretrain: PretrainConfig::default(),
            scorer: ScorerConfig::default(),
            episode: EpisodeConfig::default(),
            finetune: FinetuneConfig::default(),
            prune: PruneConfig::default(),
            l0: L0Config::default(),
            eval: EvalConfig::default(),
            bench: BenchConfig::default(),
            sweep: SweepConfig::default(),
            viz: VizConfig::default(),
            paths: Paths::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub ratio: Option<f64>,
    pub precision: Option<Precision>,
}

impl RunConfig {
    /// Parses a JSON document; blank text means all defaults.
    pub fn from_json(text: &str) -> Result<RunConfig, CliError> {
        if text.trim().is_empty() {
            return Ok(RunConfig::default());
        }
        serde_json::from_str(text).map_err(|e| CliError::Usage(format!("configuration: {e}")))
    }

    pub fn load(path: &Path) -> Result<RunConfig, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data") + "\n"
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(r) = o.ratio {
            self.ratio = r;
        }
        if let Some(p) = o.precision {
            self.precision = p;
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |e: smp_core::Error| CliError::Usage(e.to_string());
        if !(0.0..1.0).contains(&self.ratio) {
            return Err(CliError::Usage(format!("ratio {} must lie in [0, 1)", self.ratio)));
        }
        self.encoder.validate().map_err(usage)?;
        self.scorer.validate().map_err(usage)?;
        self.pretrain.validate().map_err(usage)?;
        self.episode.validate().map_err(usage)?;
        self.l0.validate().map_err(usage)?;
        if self.finetune.batch_size == 0 || self.bench.batch_size == 0 || self.bench.trials == 0 {
            return Err(CliError::Usage("batch sizes and trial counts must be positive".into()));
        }
        if self.prune.instances == 0 {
            return Err(CliError::Usage("pruning needs at least one instance".into()));
        }
        if self.sweep.ratios.iter().any(|r| !(0.0..1.0).contains(r)) {
            return Err(CliError::Usage("sweep ratios must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn eval_seeds(&self) -> Vec<u64> {
        if self.eval.seeds.is_empty() {
            vec![self.seed]
        } else {
            self.eval.seeds.clone()
        }
    }
}

/// File (or defaults), then flags, then validation.
pub fn resolve(path: Option<&Path>, overrides: &Overrides, command: &str) -> Result<RunConfig, CliError> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply(overrides);
    cfg.command = command.to_string();
    cfg.validate()?;
    Ok(cfg)
}
