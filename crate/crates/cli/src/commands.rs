//! One function per command. Every command owns one output directory,
//! refuses to reuse it without `--force`, and writes `config.json` there.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::json;
use smp_core::baselines::{hisp_importance, l0_train_gates, random_prune};
use smp_core::checkpoint::{
    config_hash, load_encoder, payload_hash, prepare_dir, save_encoder, save_tensors, write_json, ArtifactManifest,
};
use smp_core::data::{
    generate_corpus, generate_synthetic_tasks, read_corpus, read_tasks, write_corpus, write_tasks, TaskDataset,
    TaskKind, Vocab,
};
use smp_core::encoder::{EncoderWeights, GateAssignment};
use smp_core::eval::{
    bench_compare, eval_similarity, export_attention_viz, finetune_classifier, labelled, train_classifier,
    write_report, write_sweep, Classifier, ReportRow,
};
use smp_core::metatrain::{train_meta, write_log};
use smp_core::pretrain::pretrain;
use smp_core::pruner::{load_scorer, save_scorer, select_prune_set, smp_prune, GateFile, ScorerWeights};
use smp_core::Error;
use smp_numerics::{Real, RngStream};

use crate::config::{Precision, PruneMethod, RunConfig};
use crate::{CliError, Command};

pub const CONFIG_FILE: &str = "config.json";
pub const CORPUS_FILE: &str = "corpus.txt";
pub const TASKS_DIR: &str = "tasks";
pub const GATES_FILE: &str = "gates.json";
pub const REPORT_FILE: &str = "report.csv";
/// Scorer-run key naming the best checkpoint's subdirectory.
pub const BEST_KEY: &str = "best_checkpoint";

type Res<T> = Result<T, CliError>;

pub fn output_dir(cfg: &mut RunConfig, command: Command) -> &mut PathBuf {
    let p = &mut cfg.paths;
    match command {
        Command::GenData => &mut p.data,
        Command::Pretrain => &mut p.encoder,
        Command::TrainSmp => &mut p.scorer,
        Command::Prune => &mut p.gates,
        Command::Finetune => &mut p.finetune,
        Command::EvalSim => &mut p.eval,
        Command::Bench => &mut p.bench,
        Command::SweepRatio => &mut p.sweep,
        Command::Viz => &mut p.viz,
    }
}

pub fn dispatch(command: Command, cfg: &RunConfig, force: bool) -> Res<()> {
    let out = output_dir(&mut cfg.clone(), command).clone();
    prepare_dir(&out, force)?;
    write_json(&out.join(CONFIG_FILE), cfg)?;
    match cfg.precision {
        Precision::F32 => run_typed::<f32>(command, cfg, &out),
        Precision::F64 => run_typed::<f64>(command, cfg, &out),
    }
}

fn run_typed<T: Real>(command: Command, cfg: &RunConfig, out: &Path) -> Res<()> {
    match command {
        Command::GenData => gen_data(cfg, out),
        Command::Pretrain => run_pretrain::<T>(cfg, out),
        Command::TrainSmp => train_smp::<T>(cfg, out),
        Command::Prune => prune::<T>(cfg, out),
        Command::Finetune => finetune::<T>(cfg, out),
        Command::EvalSim => eval_sim::<T>(cfg, out),
        Command::Bench => bench::<T>(cfg, out),
        Command::SweepRatio => sweep::<T>(cfg, out),
        Command::Viz => viz::<T>(cfg, out),
    }
}

fn command_line(cfg: &RunConfig) -> String {
    format!("smp {}", cfg.command)
}

// ---- loaders ------------------------------------------------------------------------

fn load_tasks(cfg: &RunConfig) -> Res<Vec<TaskDataset>> {
    Ok(read_tasks(&cfg.paths.data.join(TASKS_DIR))?)
}

fn find_task<'a>(tasks: &'a [TaskDataset], name: &str) -> Res<&'a TaskDataset> {
    tasks.iter().find(|t| t.name == name).ok_or_else(|| CliError::Usage(format!("unknown task {name}")))
}

fn load_model<T: Real>(cfg: &RunConfig) -> Res<(EncoderWeights<T>, Vocab)> {
    let (encoder, vocab) = load_encoder::<T>(&cfg.paths.encoder)?;
    let vocab = vocab.ok_or_else(|| {
        Error::Input(format!("{}: encoder checkpoint has no vocabulary", cfg.paths.encoder.display()))
    })?;
    Ok((encoder, vocab))
}

/// The scorer named as best by the last `train-smp` run.
fn best_scorer_dir(cfg: &RunConfig) -> Res<PathBuf> {
    let run = ArtifactManifest::read(&cfg.paths.scorer)?;
    let best = run.extra.get(BEST_KEY).and_then(|v| v.as_str()).ok_or_else(|| {
        Error::Input(format!("{}: scorer run records no best checkpoint", cfg.paths.scorer.display()))
    })?;
    Ok(cfg.paths.scorer.join(best))
}

fn load_gates(cfg: &RunConfig) -> Res<GateFile> {
    Ok(GateFile::load(&cfg.paths.gates.join(GATES_FILE))?)
}

// ---- commands -----------------------------------------------------------------------

fn gen_data(cfg: &RunConfig, out: &Path) -> Res<()> {
    let corpus = generate_corpus(&cfg.data, cfg.seed)?;
    let tasks = generate_synthetic_tasks(&cfg.data, cfg.seed)?;
    write_corpus(&out.join(CORPUS_FILE), &corpus)?;
    write_tasks(&out.join(TASKS_DIR), &tasks)?;
    for t in &tasks {
        log::info!("task {}: {} train, {} valid, {} test", t.name, t.train.len(), t.valid.len(), t.test.len());
    }
    log::info!("corpus: {} lines", corpus.len());
    Ok(())
}

fn run_pretrain<T: Real>(cfg: &RunConfig, out: &Path) -> Res<()> {
    let corpus = read_corpus(&cfg.paths.data.join(CORPUS_FILE))?;
    let vocab = Vocab::build(&corpus, cfg.encoder.vocab_size)?;
    let encoder = smp_core::encoder::EncoderConfig { vocab_size: vocab.len(), ..cfg.encoder.clone() };
    let result = pretrain::<T>(&cfg.pretrain, &encoder, &corpus, &vocab, cfg.seed)?;
    if let Some(step) = result.diverged_at {
        return Err(Error::Diverged { step }.into());
    }
    let mut log = String::from("step,loss\n");
    for (i, l) in result.losses.iter().enumerate() {
        log.push_str(&format!("{i},{l:.8}\n"));
    }
    write_text(&out.join("loss.csv"), &log)?;
    let hash = save_encoder(out, &result.weights, Some(&vocab), &command_line(cfg), &config_hash(cfg))?;
    log::info!("encoder saved to {} ({} parameters, payload {hash})", out.display(), result.weights.num_params());
    Ok(())
}

fn train_smp<T: Real>(cfg: &RunConfig, out: &Path) -> Res<()> {
    let (encoder, vocab) = load_model::<T>(cfg)?;
    let tasks = load_tasks(cfg)?;
    let init = ScorerWeights::<T>::init(&cfg.scorer, cfg.seed)?;
    let r = train_meta(&encoder, &tasks, &vocab, &cfg.episode, &init, cfg.seed)?;
    if let Some(e) = r.diverged_at {
        log::warn!("meta-training diverged at episode {e}; keeping the best checkpoint so far");
    }
    let chash = config_hash(cfg);
    let best = save_scorer(&out.join("best"), &r.best, &command_line(cfg), &chash)?;
    save_scorer(&out.join("last"), &r.last, &command_line(cfg), &chash)?;
    write_log(&out.join("log.csv"), &r.log)?;
    let mut run = ArtifactManifest::new("scorer-run", best, &command_line(cfg), &chash);
    run.extra = json!({
        BEST_KEY: "best",
        "last_checkpoint": "last",
        "best_episode": r.best_episode,
        "best_valid": r.best_valid,
        "initial_valid": r.initial_valid,
        "lr": r.lr,
        "diverged_at": r.diverged_at,
        "encoder": payload_hash(&cfg.paths.encoder)?,
    });
    run.write(out)?;
    log::info!(
        "validation loss {:.6} -> {:.6} (episode {}, lr {})",
        r.initial_valid,
        r.best_valid,
        r.best_episode,
        r.lr
    );
    Ok(())
}

/// Shared by `prune` and `sweep-ratio`: everything a pruning method needs.
struct PruneContext<'a, T: Real> {
    cfg: &'a RunConfig,
    encoder: &'a EncoderWeights<T>,
    task: &'a TaskDataset,
    vocab: &'a Vocab,
    scorer: Option<(ScorerWeights<T>, String)>,
}

impl<'a, T: Real> PruneContext<'a, T> {
    fn new(cfg: &'a RunConfig, encoder: &'a EncoderWeights<T>, task: &'a TaskDataset, vocab: &'a Vocab) -> Res<Self> {
        let scorer = if cfg.prune.method == PruneMethod::Smp {
            let dir = best_scorer_dir(cfg)?;
            Some((load_scorer::<T>(&dir)?, dir.display().to_string()))
        } else {
            None
        };
        Ok(PruneContext { cfg, encoder, task, vocab, scorer })
    }

    fn source(&self) -> String {
        match &self.scorer {
            Some((_, dir)) => dir.clone(),
            None => self.cfg.paths.encoder.display().to_string(),
        }
    }

    /// Gates for `ratio`, plus method-specific details for the gate file.
    fn gates(&self, ratio: f64, seed: u64) -> Res<(GateAssignment, serde_json::Value)> {
        let max_len = self.encoder.config.max_len;
        let n = self.cfg.prune.instances.min(self.task.train.len());
        let head = &self.task.train[..n];
        match self.cfg.prune.method {
            PruneMethod::Random => {
                let mut rng = RngStream::new(seed).fork(0x7a4d);
                Ok((random_prune(&self.encoder.config, ratio, &mut rng)?, json!({ "seed": seed })))
            }
            PruneMethod::Smp => {
                let (scorer, _) = self.scorer.as_ref().expect("loaded for smp");
                let seqs: Vec<Vec<usize>> = head.iter().map(|i| self.vocab.encode(i, max_len)).collect();
                let kind = self.task.kind.instance_kind();
                let (gates, table) = smp_prune(self.encoder, scorer, &seqs, kind, ratio)?;
                Ok((gates, json!({ "task": self.task.name, "instances": n, "scores": table.for_kind(kind) })))
            }
            PruneMethod::Hisp | PruneMethod::L0 => {
                if self.task.kind == TaskKind::PairSim {
                    return Err(CliError::Usage(format!("{} needs a classification task", self.cfg.prune.method.name())));
                }
                let (x, y) = labelled(&self.task.train, self.vocab, max_len)?;
                let pooling = self.encoder.config.pooling(self.task.kind.instance_kind());
                let mut model = Classifier::new(self.encoder.clone(), self.task.num_classes().max(2), pooling, seed);
                train_classifier(&mut model, &x, &y, &self.cfg.finetune, self.cfg.prune.classifier_epochs, seed)?;
                if self.cfg.prune.method == PruneMethod::Hisp {
                    let table = hisp_importance(&model, &x[..n], &y[..n], self.cfg.finetune.batch_size, true)?;
                    let gates = select_prune_set(&table.values, ratio)?;
                    Ok((gates, json!({ "task": self.task.name, "instances": n, "importance": table.values })))
                } else {
                    let r = l0_train_gates(&model, &x, &y, &self.cfg.l0, seed)?;
                    Ok((r.gates, json!({ "task": self.task.name, "log_alpha": r.log_alpha, "lambda": self.cfg.l0.lambda })))
                }
            }
        }
    }
}

fn prune<T: Real>(cfg: &RunConfig, out: &Path) -> Res<()> {
    let (encoder, vocab) = load_model::<T>(cfg)?;
    let tasks = load_tasks(cfg)?;
    let task = find_task(&tasks, &cfg.prune.task)?;
    let ctx = PruneContext::new(cfg, &encoder, task, &vocab)?;
    let (gates, params) = ctx.gates(cfg.ratio, cfg.seed)?;
    let file = GateFile {
        method: cfg.prune.method.name().into(),
        ratio: cfg.ratio,
        kind: Some(task.kind.instance_kind()),
        source_checkpoint: ctx.source(),
        params,
        gates: gates.values.clone(),
    };
    file.save(&out.join(GATES_FILE))?;
    log::info!("kept heads per layer {:?} (gates {})", gates.kept_per_layer(), gates.hash());
    Ok(())
}

fn finetune<T: Real>(cfg: &RunConfig, out: &Path) -> Res<()> {
    let (encoder, vocab) = load_model::<T>(cfg)?;
    let tasks = load_tasks(cfg)?;
    let file = load_gates(cfg)?;
    let gates = file.assignment()?;
    let mut rows = Vec::new();
    for name in &cfg.eval.classification_tasks {
        let task = find_task(&tasks, name)?;
        for seed in cfg.eval_seeds() {
            let start = Instant::now();
            let r = finetune_classifier(&encoder, &gates, task, &vocab, &cfg.finetune, seed)?;
            let wall = start.elapsed().as_secs_f64();
            log::info!("{name} seed {seed}: accuracy {:.4} after {} epochs", r.accuracy, r.epochs);
            let mut named = r.model.encoder.named();
            named.push(("classifier.w".into(), &r.model.w));
            named.push(("classifier.b".into(), &r.model.b));
            let dir = out.join(format!("{name}-s{seed}"));
            let hash = save_tensors(&dir, &named)?;
            write_json(&dir.join("encoder_config.json"), &r.model.encoder.config)?;
            let mut art = ArtifactManifest::new("classifier", hash, &command_line(cfg), &config_hash(cfg));
            art.extra = json!({ "heads_per_layer": r.model.encoder.heads_per_layer(), "gates": gates.hash() });
            art.write(&dir)?;
            rows.push(ReportRow {
                method: file.method.clone(),
                ratio: file.ratio,
                task: name.clone(),
                seed,
                metric: "accuracy".into(),
                value: r.accuracy,
                gates_hash: gates.hash(),
                wall_clock_s: wall,
            });
        }
    }
    write_report(&out.join(REPORT_FILE), &rows)?;
    Ok(())
}

fn eval_sim<T: Real>(cfg: &RunConfig, out: &Path) -> Res<()> {
    let (encoder, vocab) = load_model::<T>(cfg)?;
    let tasks = load_tasks(cfg)?;
    let file = load_gates(cfg)?;
    let gates = file.assignment()?;
    let mut rows = Vec::new();
    for name in &cfg.eval.similarity_tasks {
        let task = find_task(&tasks, name)?;
        let start = Instant::now();
        let r = eval_similarity(&encoder, &gates, task, &vocab)?;
        log::info!("{name}: Pearson {r:.4}");
        rows.push(ReportRow {
            method: file.method.clone(),
            ratio: file.ratio,
            task: name.clone(),
            seed: cfg.seed,
            metric: "pearson".into(),
            value: r,
            gates_hash: gates.hash(),
            wall_clock_s: start.elapsed().as_secs_f64(),
        });
    }
    write_report(&out.join(REPORT_FILE), &rows)?;
    Ok(())
}

fn bench<T: Real>(cfg: &RunConfig, out: &Path) -> Res<()> {
    let (encoder, _) = load_model::<T>(cfg)?;
    let gates = load_gates(cfg)?.assignment()?;
    let b = &cfg.bench;
    let cmp = bench_compare(&encoder, &gates, b.batch_size, b.seq_len, b.trials, cfg.seed)?;
    log::info!(
        "throughput {:+.1}%, memory per instance {:+.1}%, attention FLOPs {:+.1}%",
        100.0 * cmp.ips_delta,
        100.0 * cmp.memory_delta,
        100.0 * cmp.attention_flops_delta
    );
    write_json(&out.join("bench.json"), &cmp)?;
    Ok(())
}

fn sweep<T: Real>(cfg: &RunConfig, out: &Path) -> Res<()> {
    let (encoder, vocab) = load_model::<T>(cfg)?;
    let tasks = load_tasks(cfg)?;
    let task = find_task(&tasks, &cfg.prune.task)?;
    let ctx = PruneContext::new(cfg, &encoder, task, &vocab)?;
    let mut failure = None;
    let mut prune = |ratio: f64, seed: u64| match ctx.gates(ratio, seed) {
        Ok((g, _)) => Ok(g),
        Err(CliError::Runtime(e)) => Err(e),
        Err(CliError::Usage(m)) => {
            failure = Some(m.clone());
            Err(Error::Config(m))
        }
    };
    let points =
        smp_core::eval::sweep_ratio(&encoder, &mut prune, task, &vocab, &cfg.sweep.ratios, &cfg.sweep.seeds, &cfg.finetune);
    if let Some(m) = failure {
        return Err(CliError::Usage(m));
    }
    write_sweep(&out.join("sweep.csv"), &points?)?;
    Ok(())
}

fn viz<T: Real>(cfg: &RunConfig, out: &Path) -> Res<()> {
    let (encoder, vocab) = load_model::<T>(cfg)?;
    let scorer = load_scorer::<T>(&best_scorer_dir(cfg)?)?;
    let sentence = match &cfg.viz.sentence {
        Some(s) => s.clone(),
        None => {
            let tasks = load_tasks(cfg)?;
            tasks
                .iter()
                .filter(|t| t.kind == TaskKind::Single)
                .find_map(|t| t.test.first())
                .map(|i| i.a.join(" "))
                .ok_or_else(|| Error::Input("no single-sentence test instance to render".into()))?
        }
    };
    let records = export_attention_viz(&encoder, &scorer, &vocab, &sentence, out)?;
    log::info!("wrote {} heatmaps for \"{sentence}\"", records.len());
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Res<()> {
    std::fs::write(path, text).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    Ok(())
}
