//! Comparison pruners: random, gradient-based head importance (with
//! optional retraining) and L0-penalised hard-concrete gates.

use serde::{Deserialize, Serialize};
use smp_numerics::{sigmoid, Real, RngStream, Tape, Tensor, Var};

use crate::encoder::{compact, nll, Batch, EncoderConfig, GateAssignment, Gates};
use crate::error::{Error, Result};
use crate::eval::{train_classifier, Classifier, FinetuneConfig};
use crate::optim::Sgd;
use crate::pruner::{keep_count, select_prune_set};

/// Extra epochs for the retrained variant of importance pruning.
pub const HISP_RETRAIN_EPOCHS: usize = 3;

/// Random pruning is reported as the mean over this many seeds.
pub const RANDOM_SEEDS: usize = 5;

/// Keeps the same number of uniformly chosen heads in every layer.
pub fn random_prune(config: &EncoderConfig, ratio: f64, rng: &mut RngStream) -> Result<GateAssignment> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Config(format!("prune ratio {ratio} outside [0, 1)")));
    }
    let keep = keep_count(config.heads, ratio);
    let values = (0..config.layers)
        .map(|_| {
            let mut row = vec![0.0; config.heads];
            for h in rng.sample_indices(config.heads, keep) {
                row[h] = 1.0;
            }
            row
        })
        .collect();
    GateAssignment::new(values)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceTable {
    pub values: Vec<Vec<f64>>,
    pub normalized: bool,
}

/// Mean over batches of `|∂loss/∂gate|` at all-ones gates, optionally
/// L2-normalised within each layer.
pub fn hisp_importance<T: Real>(
    model: &Classifier<T>,
    seqs: &[Vec<usize>],
    labels: &[usize],
    batch_size: usize,
    normalize: bool,
) -> Result<ImportanceTable> {
    if seqs.is_empty() || batch_size == 0 {
        return Err(Error::Input("importance needs at least one labelled batch".into()));
    }
    let c = &model.encoder.config;
    let mut sum = vec![vec![0.0; c.heads]; c.layers];
    let mut batches = 0;
    for (chunk, ys) in seqs.chunks(batch_size).zip(labels.chunks(batch_size)) {
        let grads = gate_gradients(model, chunk, ys)?;
        for (s, g) in sum.iter_mut().zip(&grads) {
            for (a, b) in s.iter_mut().zip(g) {
                *a += b.abs();
            }
        }
        batches += 1;
    }
    let mut values: Vec<Vec<f64>> =
        sum.into_iter().map(|row| row.into_iter().map(|v| v / batches as f64).collect()).collect();
    if normalize {
        for row in &mut values {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|v| *v /= norm);
            }
        }
    }
    Ok(ImportanceTable { values, normalized: normalize })
}

/// `∂loss/∂gate` for every head at all-ones gates on one batch.
pub fn gate_gradients<T: Real>(model: &Classifier<T>, seqs: &[Vec<usize>], labels: &[usize]) -> Result<Vec<Vec<f64>>> {
    let c = &model.encoder.config;
    let batch = Batch::new(seqs)?;
    let mut tape = Tape::with_checked(false);
    let vars = model.bind(&mut tape, false);
    let gates: Vec<Vec<Var>> =
        (0..c.layers).map(|_| (0..c.heads).map(|_| tape.param(Tensor::ones(&[1]))).collect()).collect();
    let lp = model.log_probs(&mut tape, &vars, &batch, Gates::Vars(&gates))?;
    let loss = nll(&mut tape, lp, labels)?;
    let grads = tape.backward(loss)?;
    Ok(gates
        .iter()
        .map(|row| row.iter().map(|&g| grads.get(g).map_or(0.0, |t| t.item().to_f64_lossy())).collect())
        .collect())
}

/// Keeps the most important heads of each layer; with `retrain` the
/// compacted model is trained further on the given data.
pub fn hisp_prune<T: Real>(
    model: &Classifier<T>,
    table: &ImportanceTable,
    ratio: f64,
    retrain: Option<Retrain<'_>>,
) -> Result<(GateAssignment, Classifier<T>)> {
    let gates = select_prune_set(&table.values, ratio)?;
    let mut pruned = Classifier { encoder: compact(&model.encoder, &gates)?, ..model.clone() };
    if let Some(r) = retrain {
        if r.epochs > 0 {
            train_classifier(&mut pruned, r.seqs, r.labels, r.config, r.epochs, r.seed)?;
        }
    }
    Ok((gates, pruned))
}

pub struct Retrain<'a> {
    pub seqs: &'a [Vec<usize>],
    pub labels: &'a [usize],
    pub config: &'a FinetuneConfig,
    pub epochs: usize,
    pub seed: u64,
}

// ---- L0 gates ---------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct L0Config {
    pub lambda: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub gamma: f64,
    pub zeta: f64,
    pub beta: f64,
    pub init_log_alpha: f64,
}

impl Default for L0Config {
    fn default() -> Self {
        L0Config {
            lambda: 0.01,
            steps: 300,
            batch_size: 32,
            lr: 0.1,
            gamma: -0.1,
            zeta: 1.1,
            beta: 2.0 / 3.0,
            init_log_alpha: 2.0,
        }
    }
}

impl L0Config {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma < 0.0 && self.zeta > 1.0) {
            return Err(Error::Config("stretch interval must satisfy γ < 0 < 1 < ζ".into()));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::Config("concrete temperature β must lie in (0, 1)".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config("penalty weight must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }

    /// `P(gate > 0) = σ(log α − β·ln(−γ/ζ))`.
    pub fn open_probability(&self, log_alpha: f64) -> f64 {
        sigmoid(log_alpha - self.beta * (-self.gamma / self.zeta).ln())
    }

    /// Hard-concrete sample for a uniform draw `u ∈ (0, 1)`.
    pub fn sample_gate(&self, log_alpha: f64, u: f64) -> f64 {
        let s = sigmoid(((u.ln() - (1.0 - u).ln()) + log_alpha) / self.beta);
        (s * (self.zeta - self.gamma) + self.gamma).clamp(0.0, 1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct L0Result {
    pub gates: GateAssignment,
    pub log_alpha: Vec<Vec<f64>>,
    /// Mean open probability after each step.
    pub open_log: Vec<f64>,
    pub losses: Vec<f64>,
}

/// Trains one log-α per head with the model frozen; heads whose open
/// probability ends below 0.5 are pruned. Counts may differ per layer.
pub fn l0_train_gates<T: Real>(
    model: &Classifier<T>,
    seqs: &[Vec<usize>],
    labels: &[usize],
    config: &L0Config,
    seed: u64,
) -> Result<L0Result> {
    config.validate()?;
    if seqs.is_empty() {
        return Err(Error::Input("L0 training needs labelled instances".into()));
    }
    let c = &model.encoder.config;
    let (layers, heads) = (c.layers, c.heads);
    let mut log_alpha: Vec<Tensor<T>> = (0..layers * heads).map(|_| Tensor::full(&[1], T::c(config.init_log_alpha))).collect();
    let mut opt = Sgd::new(0.9, None);
    let mut rng = RngStream::new(seed).fork(0x10);
    let shift = config.beta * (-config.gamma / config.zeta).ln();
    let mut open_log = Vec::with_capacity(config.steps);
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let idx = rng.sample_indices(seqs.len(), config.batch_size.min(seqs.len()));
        let bs: Vec<Vec<usize>> = idx.iter().map(|&i| seqs[i].clone()).collect();
        let ys: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let batch = Batch::new(&bs)?;
        let mut tape = Tape::with_checked(false);
        let vars = model.bind(&mut tape, false);
        let alphas: Vec<Var> = log_alpha.iter().map(|t| tape.param(t.clone())).collect();
        let mut gates = Vec::with_capacity(layers);
        let mut penalty = None;
        for l in 0..layers {
            let mut row = Vec::with_capacity(heads);
            for h in 0..heads {
                let a = alphas[l * heads + h];
                let u = rng.uniform_open();
                let noise = tape.scalar(u.ln() - (1.0 - u).ln());
                let z = tape.add(a, noise)?;
                let z = tape.scale(z, 1.0 / config.beta)?;
                let s = tape.sigmoid(z)?;
                let s = tape.scale(s, config.zeta - config.gamma)?;
                let s = tape.add_scalar(s, config.gamma)?;
                // clamp to [0, 1] as relu(s) − relu(s − 1)
                let lo = tape.relu(s)?;
                let over = tape.add_scalar(s, -1.0)?;
                let hi = tape.relu(over)?;
                row.push(tape.sub(lo, hi)?);
                let p = tape.add_scalar(a, -shift)?;
                let p = tape.sigmoid(p)?;
                penalty = Some(match penalty {
                    None => p,
                    Some(acc) => tape.add(acc, p)?,
                });
            }
            gates.push(row);
        }
        let lp = model.log_probs(&mut tape, &vars, &batch, Gates::Vars(&gates))?;
        let task = nll(&mut tape, lp, &ys)?;
        let pen = tape.scale(penalty.expect("at least one head"), config.lambda)?;
        let loss = tape.add(task, pen)?;
        let value = tape.value(loss).item().to_f64_lossy();
        if !value.is_finite() {
            return Err(Error::Diverged { step });
        }
        let grads = tape.backward(loss)?;
        let g: Vec<Option<Tensor<T>>> = alphas.iter().map(|&a| grads.get(a).cloned()).collect();
        opt.step(log_alpha.iter_mut().collect(), &g, config.lr);
        losses.push(value);
        let mean_open = log_alpha.iter().map(|t| config.open_probability(t.item().to_f64_lossy())).sum::<f64>()
            / (layers * heads) as f64;
        open_log.push(mean_open);
    }
    let la: Vec<Vec<f64>> = log_alpha
        .chunks(heads)
        .map(|row| row.iter().map(|t| t.item().to_f64_lossy()).collect())
        .collect();
    let values = la
        .iter()
        .map(|row| row.iter().map(|&a| if config.open_probability(a) < 0.5 { 0.0 } else { 1.0 }).collect())
        .collect();
    Ok(L0Result { gates: GateAssignment::new(values)?, log_alpha: la, open_log, losses })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_prune_keeps_equal_counts() {
        let cfg = EncoderConfig { layers: 3, heads: 12, ..Default::default() };
        let mut rng = RngStream::new(5);
        let g = random_prune(&cfg, 0.5, &mut rng).unwrap();
        assert_eq!(g.kept_per_layer(), vec![6, 6, 6]);
        let all = random_prune(&cfg, 0.0, &mut rng).unwrap();
        assert_eq!(all, GateAssignment::ones(3, 12));
        assert!(random_prune(&cfg, 1.0, &mut rng).is_err());
    }

    #[test]
    fn open_probability_at_zero_alpha() {
        let c = L0Config::default();
        let expect = sigmoid(-(2.0 / 3.0) * (0.1f64 / 1.1).ln());
        assert!((c.open_probability(0.0) - expect).abs() < 1e-15);
        assert!(c.sample_gate(0.0, 1e-12) == 0.0 && c.sample_gate(0.0, 1.0 - 1e-12) == 1.0);
    }

    #[test]
    fn invalid_l0_constants() {
        assert!(L0Config { gamma: 0.1, ..Default::default() }.validate().is_err());
        assert!(L0Config { beta: 1.0, ..Default::default() }.validate().is_err());
    }
}
