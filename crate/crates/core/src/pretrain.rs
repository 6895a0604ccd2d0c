//! Masked-language-model pre-training of the encoder.

use serde::{Deserialize, Serialize};
use smp_numerics::{Real, RngStream, Tape, Tensor};

use crate::data::{encode_ids, Vocab, CLS, MASK, NUM_RESERVED, PAD, SEP};
use crate::encoder::{forward, mlm_log_probs, nll, Batch, EncoderConfig, EncoderWeights, Gates};
use crate::error::{Error, Result};
use crate::optim::Sgd;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub mask_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Initial learning rate, decayed linearly to zero.
    pub lr: f64,
    pub momentum: f64,
    pub clip_norm: Option<f64>,
    /// Share of training examples built from two corpus lines.
    pub pair_rate: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            mask_rate: 0.15,
            steps: 5000,
            batch_size: 32,
            lr: 0.1,
            momentum: 0.9,
            clip_norm: Some(1.0),
            pair_rate: 0.5,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mask_rate > 0.0 && self.mask_rate <= 0.5) {
            return Err(Error::Config(format!("mask rate {} must lie in (0, 0.5]", self.mask_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.pair_rate) {
            return Err(Error::Config("pair rate must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskBranch {
    Mask,
    Random,
    Keep,
}

impl MaskBranch {
    /// 80% / 10% / 10% on a uniform draw in `[0, 1)`.
    pub fn from_draw(u: f64) -> MaskBranch {
        if u < 0.8 {
            MaskBranch::Mask
        } else if u < 0.9 {
            MaskBranch::Random
        } else {
            MaskBranch::Keep
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedSequence {
    pub ids: Vec<usize>,
    pub positions: Vec<usize>,
    pub targets: Vec<usize>,
}

fn maskable(id: usize) -> bool {
    !matches!(id, PAD | CLS | SEP | MASK)
}

/// Selects `max(1, round(rate·n))` of the `n` maskable positions and
/// corrupts them; `None` when nothing is maskable.
pub fn mask_tokens(ids: &[usize], rate: f64, vocab_size: usize, rng: &mut RngStream) -> Option<MaskedSequence> {
    let candidates: Vec<usize> = (0..ids.len()).filter(|&i| maskable(ids[i])).collect();
    if candidates.is_empty() {
        return None;
    }
    let count = ((rate * candidates.len() as f64).round() as usize).clamp(1, candidates.len());
    let mut chosen: Vec<usize> = rng.sample_indices(candidates.len(), count).into_iter().map(|i| candidates[i]).collect();
    chosen.sort_unstable();
    let mut out = ids.to_vec();
    let mut targets = Vec::with_capacity(count);
    for &p in &chosen {
        targets.push(ids[p]);
        match MaskBranch::from_draw(rng.uniform()) {
            MaskBranch::Mask => out[p] = MASK,
            MaskBranch::Random if vocab_size > NUM_RESERVED => {
                out[p] = NUM_RESERVED + rng.below(vocab_size - NUM_RESERVED)
            }
            MaskBranch::Random => {}
            MaskBranch::Keep => {}
        }
    }
    Some(MaskedSequence { ids: out, positions: chosen, targets })
}

pub struct PretrainResult<T: Real> {
    pub weights: EncoderWeights<T>,
    /// Masked-position loss per step.
    pub losses: Vec<f64>,
    /// Step at which the loss became non-finite; `weights` are then the
    /// last finite ones.
    pub diverged_at: Option<usize>,
}

/// Loss and gradients of one masked batch.
pub fn mlm_step<T: Real>(
    weights: &EncoderWeights<T>,
    batch: &[MaskedSequence],
    checked: bool,
) -> Result<(f64, Vec<Option<Tensor<T>>>)> {
    let seqs: Vec<Vec<usize>> = batch.iter().map(|m| m.ids.clone()).collect();
    let b = Batch::new(&seqs)?;
    let mut tape = Tape::with_checked(checked);
    let vars = weights.bind(&mut tape, true);
    let out = forward(&mut tape, weights, &vars, &b, Gates::None, false)?;
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (i, m) in batch.iter().enumerate() {
        rows.extend(m.positions.iter().map(|&p| b.row(i, p)));
        targets.extend_from_slice(&m.targets);
    }
    let lp = mlm_log_probs(&mut tape, &vars, out.hidden, &rows)?;
    let loss = nll(&mut tape, lp, &targets)?;
    let value = tape.value(loss).item().to_f64_lossy();
    if !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    let grads = tape.backward(loss)?;
    Ok((value, vars.all.iter().map(|&v| grads.get(v).cloned()).collect()))
}

/// Draws one training sequence: a single line, or two lines as a pair.
fn draw_sequence(lines: &[Vec<usize>], pair_rate: f64, max_len: usize, rng: &mut RngStream) -> Vec<usize> {
    let a = &lines[rng.below(lines.len())];
    if rng.uniform() < pair_rate {
        let b = &lines[rng.below(lines.len())];
        encode_ids(a, Some(b), max_len)
    } else {
        encode_ids(a, None, max_len)
    }
}

pub fn pretrain<T: Real>(
    config: &PretrainConfig,
    encoder: &EncoderConfig,
    corpus: &[String],
    vocab: &Vocab,
    seed: u64,
) -> Result<PretrainResult<T>> {
    config.validate()?;
    if vocab.len() != encoder.vocab_size {
        return Err(Error::Config(format!(
            "encoder vocabulary size {} differs from the built vocabulary ({})",
            encoder.vocab_size,
            vocab.len()
        )));
    }
    let lines: Vec<Vec<usize>> = corpus
        .iter()
        .map(|l| vocab.ids(&crate::data::tokenize(l)))
        .filter(|ids| !ids.is_empty())
        .collect();
    if lines.is_empty() {
        return Err(Error::Input("corpus has no tokens".into()));
    }
    let mut weights = EncoderWeights::<T>::init(encoder, seed)?;
    let mut opt = Sgd::new(config.momentum, config.clip_norm);
    let mut rng = RngStream::new(seed).fork(0x9e);
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        let mut attempts = 0;
        while batch.len() < config.batch_size {
            attempts += 1;
            if attempts > 100 * config.batch_size {
                return Err(Error::Input("corpus has no maskable tokens".into()));
            }
            let seq = draw_sequence(&lines, config.pair_rate, encoder.max_len, &mut rng);
            if let Some(m) = mask_tokens(&seq, config.mask_rate, encoder.vocab_size, &mut rng) {
                batch.push(m);
            }
        }
        let (loss, grads) = mlm_step(&weights, &batch, false)?;
        if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
            log::warn!("pre-training diverged at step {step}");
            return Ok(PretrainResult { weights, losses, diverged_at: Some(step) });
        }
        losses.push(loss);
        let lr = config.lr * (1.0 - step as f64 / config.steps as f64);
        opt.step(weights.tensors_mut(), &grads, lr);
        if step % 500 == 0 {
            log::info!("pretrain step {step}: loss {loss:.4}");
        }
    }
    Ok(PretrainResult { weights, losses, diverged_at: None })
}

/// Centered moving average with window `w` (shorter at the ends).
pub fn smooth(values: &[f64], w: usize) -> Vec<f64> {
    (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(w / 2);
            let hi = (i + w - w / 2).min(values.len());
            values[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}
