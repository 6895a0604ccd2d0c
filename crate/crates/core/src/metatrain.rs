//! Episodic meta-training of the scorer.
//!
//! One episode: full forward on a sampled mini dataset, per-head scores
//! for the episode kind, binary-concrete gates from those scores, a gated
//! forward, and the distribution-preservation loss. Gradients reach only
//! the scorer; they are summed over `update_every` episodes before each SGD
//! step.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use smp_numerics::{sigmoid, Real, RngStream, Tape, Tensor};

use crate::data::{sample_episode, InstanceKind, Split, TaskDataset, Vocab};
use crate::encoder::{forward, pool, represent, Batch, EncoderWeights, GateAssignment, Gates};
use crate::error::{io_err, Error, Result};
use crate::objective::{rows_to_tensor, smp_loss, smp_loss_tape};
use crate::optim::{accumulate, global_norm, Sgd};
use crate::pruner::{aggregate_head_scores, aggregate_log_tape, select_prune_set, HeadScoreTable, ScorerWeights};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeConfig {
    pub k: usize,
    pub update_every: usize,
    pub lr: f64,
    /// When non-empty, one run per learning rate; the lowest validation
    /// loss wins.
    pub lr_grid: Vec<f64>,
    pub episodes: usize,
    /// Global-norm bound on each accumulated update; `None` disables it.
    pub clip_norm: Option<f64>,
    pub tau: f64,
    pub relaxation: Relaxation,
    pub ratio: f64,
    pub valid_interval: usize,
    pub valid_batches: usize,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            k: 16,
            update_every: 8,
            lr: 0.02,
            lr_grid: Vec::new(),
            episodes: 2000,
            clip_norm: None,
            tau: 1.0,
            relaxation: Relaxation::LayerStandardized,
            ratio: 0.5,
            valid_interval: 200,
            valid_batches: 32,
        }
    }
}

impl EpisodeConfig {
    /// Full-scale settings: k = 60, 48,000 episodes and a learning-rate
    /// grid of {1, 2, 5}·10⁻².
    pub fn full_scale() -> Self {
        EpisodeConfig { k: 60, episodes: 48_000, lr_grid: vec![0.01, 0.02, 0.05], ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("temperature {} must be positive", self.tau)));
        }
        if self.k < 2 {
            return Err(Error::Config("episodes need at least two instances".into()));
        }
        if self.update_every == 0 || self.valid_interval == 0 || self.valid_batches == 0 {
            return Err(Error::Config("update and validation intervals must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.ratio) {
            return Err(Error::Config(format!("ratio {} must lie in [0, 1)", self.ratio)));
        }
        if self.relaxation == Relaxation::LayerStandardized && self.ratio == 0.0 {
            return Err(Error::Config("standardized gates need a positive pruning ratio".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip norm {c} must be positive")));
            }
        }
        Ok(())
    }

    pub fn gate_relax(&self) -> GateRelax {
        GateRelax { tau: self.tau, mode: self.relaxation, ratio: self.ratio }
    }
}

/// Variance floor for per-layer standardization.
pub const STD_EPS: f64 = 1e-8;

/// How training-time gate logits are formed from the scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Relaxation {
    /// `ln s − ln(1 − s)` per head, no budget.
    Independent,
    /// Each layer's logits are standardized to zero mean and unit
    /// spread, then shifted by `ln((1 − r)/r)`: the scorer can only rank
    /// heads within a layer, and the expected open count tracks the budget.
    LayerStandardized,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GateRelax {
    pub tau: f64,
    pub mode: Relaxation,
    pub ratio: f64,
}

impl GateRelax {
    pub fn independent(tau: f64) -> Self {
        GateRelax { tau, mode: Relaxation::Independent, ratio: 0.5 }
    }
}

/// Logistic noise `ln u − ln(1 − u)`.
pub fn logistic_noise(u: f64) -> f64 {
    u.ln() - (1.0 - u).ln()
}

/// `σ((ln s − ln(1 − s) + g) / τ)` for Logistic noise `g`.
pub fn gumbel_gate_with_noise(score: f64, tau: f64, noise: f64) -> f64 {
    sigmoid((score.ln() - (1.0 - score).ln() + noise) / tau)
}

pub fn gumbel_binary_gate(score: f64, tau: f64, rng: &mut RngStream) -> f64 {
    gumbel_gate_with_noise(score, tau, logistic_noise(rng.uniform_open()))
}

/// Encoded sequences of an episode.
#[derive(Clone, Debug)]
pub struct EncodedEpisode {
    pub kind: InstanceKind,
    pub seqs: Vec<Vec<usize>>,
}

impl EncodedEpisode {
    pub fn new(kind: InstanceKind, instances: &[crate::data::Instance], vocab: &Vocab, max_len: usize) -> Self {
        EncodedEpisode { kind, seqs: instances.iter().map(|i| vocab.encode(i, max_len)).collect() }
    }
}

pub struct EpisodeOutcome<T: Real> {
    pub loss: f64,
    /// One slot per scorer tensor, in [`ScorerWeights::named`] order.
    pub grads: Vec<Option<Tensor<T>>>,
    pub gates: Vec<f64>,
}

/// One episode at fixed Logistic noise (one value per head, row-major
/// over layer and head).
pub fn episode_with_noise<T: Real>(
    encoder: &EncoderWeights<T>,
    scorer: &ScorerWeights<T>,
    episode: &EncodedEpisode,
    relax: &GateRelax,
    noise: &[f64],
    checked: bool,
) -> Result<EpisodeOutcome<T>> {
    let c = &encoder.config;
    let heads = c.layers * c.heads;
    if noise.len() != heads {
        return Err(Error::Input(format!("expected {heads} noise values, got {}", noise.len())));
    }
    let pooling = c.pooling(episode.kind);
    let (full, att) = represent(encoder, &episode.seqs, Gates::None, pooling, true)?;
    let full = rows_to_tensor::<T>(&full)?;
    let att = att.expect("captured");

    let mut tape = Tape::with_checked(checked);
    let svars = scorer.bind(&mut tape, true);
    let (ls, l1) = aggregate_log_tape(&mut tape, scorer, &svars, &att, HeadScoreTable::column(episode.kind))?;
    let mut logit = tape.sub(ls, l1)?;
    if relax.mode == Relaxation::LayerStandardized {
        let grid = tape.reshape(logit, &[c.layers, c.heads])?;
        let mean = tape.mean_axis(grid, 1)?;
        let mean = tape.reshape(mean, &[c.layers, 1])?;
        let centered = tape.sub(grid, mean)?;
        let sq = tape.mul(centered, centered)?;
        let var = tape.mean_axis(sq, 1)?;
        let var = tape.add_scalar(var, STD_EPS)?;
        let std = tape.sqrt(var)?;
        let std = tape.reshape(std, &[c.layers, 1])?;
        let z = tape.div(centered, std)?;
        let r = relax.ratio;
        let z = tape.add_scalar(z, ((1.0 - r) / r).ln())?;
        logit = tape.reshape(z, &[heads, 1])?;
    }
    let g = tape.constant(Tensor::from_f64(&[heads, 1], noise)?);
    let z = tape.add(logit, g)?;
    let z = tape.scale(z, 1.0 / relax.tau)?;
    let gates = tape.sigmoid(z)?;
    let gate_values = tape.value(gates).to_f64_vec();
    let mut gate_vars = Vec::with_capacity(c.layers);
    for l in 0..c.layers {
        let mut row = Vec::with_capacity(c.heads);
        for h in 0..c.heads {
            let i = l * c.heads + h;
            let gi = tape.slice(gates, 0, i, i + 1)?;
            row.push(tape.reshape(gi, &[1])?);
        }
        gate_vars.push(row);
    }

    let evars = encoder.bind(&mut tape, false);
    let batch = Batch::new(&episode.seqs)?;
    let out = forward(&mut tape, encoder, &evars, &batch, Gates::Vars(&gate_vars), false)?;
    let pruned = pool(&mut tape, out.hidden, &batch, pooling)?;
    let loss = smp_loss_tape(&mut tape, &full, pruned)?;
    let value = tape.value(loss).item().to_f64_lossy();
    if !value.is_finite() {
        return Ok(EpisodeOutcome { loss: value, grads: Vec::new(), gates: gate_values });
    }
    let grads = tape.backward(loss)?;
    Ok(EpisodeOutcome {
        loss: value,
        grads: svars.iter().map(|&v| grads.get(v).cloned()).collect(),
        gates: gate_values,
    })
}

#[allow(clippy::too_many_arguments)]
/// Largest error between the episode's reverse-mode gradient and finite
/// differences over `coords` randomly chosen scorer weights. Each error is
/// relative to the larger of the coordinate's own magnitude and a
/// thousandth of the largest gradient entry, so coordinates far below the
/// differencing noise floor do not dominate.
///
/// The loss is only piecewise smooth (ReLUs in the scorer and the encoder),
/// and small episodes sit close to the roundoff floor, so each coordinate is
/// differenced at `10·step`, `step` and `step/10` and keeps its best
/// estimate. A stencil whose one-sided slopes disagree straddles a kink;
/// its one-sided slopes are then candidates as well, since the side without
/// the kink still sees the local derivative.
pub fn scorer_gradient_check(
    encoder: &EncoderWeights<f64>,
    scorer: &ScorerWeights<f64>,
    episode: &EncodedEpisode,
    relax: &GateRelax,
    noise: &[f64],
    coords: usize,
    step: f64,
    seed: u64,
) -> Result<f64> {
    let analytic = episode_with_noise(encoder, scorer, episode, relax, noise, true)?;
    let largest = analytic.grads.iter().flatten().flat_map(|g| g.data().iter().map(|v| v.abs())).fold(0.0, f64::max);
    let floor = (1e-3 * largest).max(1e-12);
    let sizes: Vec<usize> = scorer.named().iter().map(|(_, t)| t.len()).collect();
    let mut rng = RngStream::new(seed).fork(0xfd);
    let mut worst = 0.0f64;
    for _ in 0..coords {
        let t = rng.below(sizes.len());
        let i = rng.below(sizes[t]);
        let loss_at = |delta: f64| -> Result<f64> {
            let mut probe = scorer.clone();
            probe.tensors_mut()[t].data_mut()[i] += delta;
            Ok(episode_with_noise(encoder, &probe, episode, relax, noise, true)?.loss)
        };
        let g = analytic.grads[t].as_ref().map_or(0.0, |g| g.data()[i]);
        let err = |numeric: f64| (g - numeric).abs() / g.abs().max(numeric.abs()).max(floor);
        let centre = loss_at(0.0)?;
        let mut best = f64::INFINITY;
        for h in [10.0 * step, step, 0.1 * step] {
            let (up, down) = (loss_at(h)?, loss_at(-h)?);
            best = best.min(err((up - down) / (2.0 * h)));
            let (forward, backward) = ((up - centre) / h, (centre - down) / h);
            if (forward - backward).abs() > 1e-3 * forward.abs().max(backward.abs()).max(floor) {
                best = best.min(err(forward)).min(err(backward));
            }
        }
        worst = worst.max(best);
    }
    Ok(worst)
}

/// Draws one Logistic noise value per head, then runs the episode.
pub fn run_episode<T: Real>(
    encoder: &EncoderWeights<T>,
    scorer: &ScorerWeights<T>,
    episode: &EncodedEpisode,
    relax: &GateRelax,
    rng: &mut RngStream,
) -> Result<EpisodeOutcome<T>> {
    let n = encoder.config.layers * encoder.config.heads;
    let noise: Vec<f64> = (0..n).map(|_| logistic_noise(rng.uniform_open())).collect();
    episode_with_noise(encoder, scorer, episode, relax, &noise, false)
}

/// Loss of deterministic hard gates at `ratio`, and those gates.
pub fn hard_gate_loss<T: Real>(
    encoder: &EncoderWeights<T>,
    scorer: &ScorerWeights<T>,
    episode: &EncodedEpisode,
    ratio: f64,
) -> Result<(f64, GateAssignment)> {
    let pooling = encoder.config.pooling(episode.kind);
    let (full, att) = represent(encoder, &episode.seqs, Gates::None, pooling, true)?;
    let table = aggregate_head_scores(scorer, &att.expect("captured"))?;
    let gates = select_prune_set(&table.for_kind(episode.kind), ratio)?;
    let loss = gates_loss(encoder, episode, &gates, Some(&full))?;
    Ok((loss, gates))
}

/// Distribution-preservation loss of arbitrary gates on an episode.
pub fn gates_loss<T: Real>(
    encoder: &EncoderWeights<T>,
    episode: &EncodedEpisode,
    gates: &GateAssignment,
    full: Option<&Vec<Vec<f64>>>,
) -> Result<f64> {
    let pooling = encoder.config.pooling(episode.kind);
    let owned;
    let full = match full {
        Some(f) => f,
        None => {
            owned = represent(encoder, &episode.seqs, Gates::None, pooling, false)?.0;
            &owned
        }
    };
    let (pruned, _) = represent(encoder, &episode.seqs, Gates::Values(gates), pooling, false)?;
    smp_loss(full, &pruned)
}

pub fn validation_loss<T: Real>(
    encoder: &EncoderWeights<T>,
    scorer: &ScorerWeights<T>,
    batches: &[EncodedEpisode],
    ratio: f64,
) -> Result<f64> {
    let mut total = 0.0;
    for ep in batches {
        total += hard_gate_loss(encoder, scorer, ep, ratio)?.0;
    }
    Ok(total / batches.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub episode: usize,
    pub train_loss: f64,
    pub valid_loss: Option<f64>,
    pub lr: f64,
    pub tau: f64,
    /// Global norm of this episode's scorer gradient (not written to CSV).
    #[serde(skip)]
    pub grad_norm: f64,
}

pub fn write_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut text = String::from("episode,train_loss,valid_loss,lr,tau\n");
    for r in rows {
        let valid = r.valid_loss.map(|v| format!("{v:.8}")).unwrap_or_default();
        let _ = writeln!(text, "{},{:.8},{},{},{}", r.episode, r.train_loss, valid, r.lr, r.tau);
    }
    std::fs::write(path, text).map_err(io_err(path))
}

pub struct MetaTrainResult<T: Real> {
    pub best: ScorerWeights<T>,
    /// Weights after the final update.
    pub last: ScorerWeights<T>,
    pub best_valid: f64,
    pub initial_valid: f64,
    pub best_episode: usize,
    pub lr: f64,
    pub log: Vec<LogRow>,
    pub diverged_at: Option<usize>,
}

/// Fixed validation episodes drawn from the validation splits.
pub fn validation_episodes(
    datasets: &[TaskDataset],
    vocab: &Vocab,
    max_len: usize,
    k: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<EncodedEpisode>> {
    let mut rng = RngStream::new(seed).fork(0x7a11d);
    (0..count)
        .map(|_| {
            let s = sample_episode(datasets, Split::Valid, k, &mut rng)?;
            Ok(EncodedEpisode::new(s.kind, &s.instances, vocab, max_len))
        })
        .collect()
}

pub fn train_meta<T: Real>(
    encoder: &EncoderWeights<T>,
    datasets: &[TaskDataset],
    vocab: &Vocab,
    config: &EpisodeConfig,
    scorer_init: &ScorerWeights<T>,
    seed: u64,
) -> Result<MetaTrainResult<T>> {
    config.validate()?;
    let valid = validation_episodes(datasets, vocab, encoder.config.max_len, config.k, config.valid_batches, seed)?;
    let grid = if config.lr_grid.is_empty() { vec![config.lr] } else { config.lr_grid.clone() };
    let mut best: Option<MetaTrainResult<T>> = None;
    for &lr in &grid {
        let run = train_one(encoder, datasets, vocab, config, scorer_init, &valid, lr, seed)?;
        log::info!("meta-train lr {lr}: best validation loss {:.6}", run.best_valid);
        if best.as_ref().map_or(true, |b| run.best_valid < b.best_valid) {
            best = Some(run);
        }
    }
    Ok(best.expect("non-empty grid"))
}

#[allow(clippy::too_many_arguments)]
fn train_one<T: Real>(
    encoder: &EncoderWeights<T>,
    datasets: &[TaskDataset],
    vocab: &Vocab,
    config: &EpisodeConfig,
    scorer_init: &ScorerWeights<T>,
    valid: &[EncodedEpisode],
    lr: f64,
    seed: u64,
) -> Result<MetaTrainResult<T>> {
    let mut scorer = scorer_init.clone();
    let mut opt = Sgd::new(0.0, config.clip_norm);
    let mut rng = RngStream::new(seed).fork(0xe9);
    let initial_valid = validation_loss(encoder, &scorer, valid, config.ratio)?;
    let mut best = scorer.clone();
    let (mut best_valid, mut best_episode) = (initial_valid, 0);
    let mut log = Vec::with_capacity(config.episodes);
    let slots = scorer.named().len();
    let mut acc: Vec<Option<Tensor<T>>> = vec![None; slots];
    let mut window_loss = 0.0;
    for e in 0..config.episodes {
        let sample = sample_episode(datasets, Split::Train, config.k, &mut rng)?;
        let ep = EncodedEpisode::new(sample.kind, &sample.instances, vocab, encoder.config.max_len);
        let out = run_episode(encoder, &scorer, &ep, &config.gate_relax(), &mut rng)?;
        if !out.loss.is_finite() || out.grads.iter().flatten().any(|g| !g.is_finite()) {
            log::warn!("meta-training diverged at episode {e}");
            return Ok(MetaTrainResult {
                last: scorer,
                best,
                best_valid,
                initial_valid,
                best_episode,
                lr,
                log,
                diverged_at: Some(e),
            });
        }
        accumulate(&mut acc, &out.grads);
        window_loss += out.loss;
        let done = e + 1;
        let mut row = LogRow {
            episode: done,
            train_loss: out.loss,
            valid_loss: None,
            lr,
            tau: config.tau,
            grad_norm: global_norm(&out.grads),
        };
        if done % config.update_every == 0 {
            opt.step(scorer.tensors_mut(), &acc, lr);
            acc = vec![None; slots];
            log::debug!("episode {done}: mean train loss {:.6}", window_loss / config.update_every as f64);
            window_loss = 0.0;
        }
        if done % config.valid_interval == 0 {
            let v = validation_loss(encoder, &scorer, valid, config.ratio)?;
            row.valid_loss = Some(v);
            log::info!("episode {done}: validation loss {v:.6}");
            if v < best_valid {
                best_valid = v;
                best_episode = done;
                best = scorer.clone();
            }
        }
        log.push(row);
    }
    Ok(MetaTrainResult { best, last: scorer, best_valid, initial_valid, best_episode, lr, log, diverged_at: None })
}
