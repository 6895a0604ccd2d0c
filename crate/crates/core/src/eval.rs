//! Evaluation harness: fine-tuning accuracy, similarity correlation,
//! throughput/memory benchmark, ratio sweeps, attention heatmaps and CSV
//! reports.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use smp_numerics::{Real, RngStream, Tape, Tensor, Var};

use crate::checkpoint::{deterministic, write_json};
use crate::data::{encode_ids, Instance, InstanceKind, Label, TaskDataset, TaskKind, Vocab, NUM_RESERVED};
use crate::encoder::{
    compact, count_flops, forward, nll, pool, represent, Batch, EncoderWeights, FlopCount, GateAssignment, Gates,
    Pooling,
};
use crate::error::{io_err, Error, Result};
use crate::objective::cosine_distance;
use crate::optim::Sgd;
use crate::pruner::{normalize_matrix, score_matrix, ScorerWeights};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    /// `None` applies the size rule (10 epochs below 10,000 training
    /// instances, otherwise 3).
    pub epochs: Option<usize>,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub clip_norm: Option<f64>,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig { epochs: None, batch_size: 32, lr: 0.02, momentum: 0.9, clip_norm: Some(1.0) }
    }
}

pub fn epochs_for(train_size: usize) -> usize {
    if train_size < 10_000 {
        10
    } else {
        3
    }
}

/// Encoder plus a linear classifier on the pooled representation.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier<T: Real> {
    pub encoder: EncoderWeights<T>,
    pub w: Tensor<T>,
    pub b: Tensor<T>,
    pub pooling: Pooling,
}

pub struct ClassifierVars {
    pub encoder: crate::encoder::EncoderVars,
    pub w: Var,
    pub b: Var,
}

impl<T: Real> Classifier<T> {
    pub fn new(encoder: EncoderWeights<T>, classes: usize, pooling: Pooling, seed: u64) -> Self {
        let d = encoder.config.d_model;
        let mut rng = RngStream::new(seed).fork(0xc1a5);
        let bound = 1.0 / (d as f64).sqrt();
        let data = (0..d * classes).map(|_| T::c(rng.uniform_range(-bound, bound))).collect();
        Classifier {
            encoder,
            w: Tensor::new(vec![d, classes], data).expect("shape matches data"),
            b: Tensor::zeros(&[classes]),
            pooling,
        }
    }

    pub fn classes(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> ClassifierVars {
        let encoder = self.encoder.bind(tape, trainable);
        ClassifierVars { encoder, w: tape.leaf(self.w.clone(), trainable), b: tape.leaf(self.b.clone(), trainable) }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut t = self.encoder.tensors_mut();
        t.push(&mut self.w);
        t.push(&mut self.b);
        t
    }

    /// Log-probabilities `[B, C]`.
    pub fn log_probs(&self, tape: &mut Tape<T>, vars: &ClassifierVars, batch: &Batch, gates: Gates<'_>) -> Result<Var> {
        let out = forward(tape, &self.encoder, &vars.encoder, batch, gates, false)?;
        let pooled = pool(tape, out.hidden, batch, self.pooling)?;
        let logits = tape.matmul(pooled, vars.w)?;
        let logits = tape.add(logits, vars.b)?;
        Ok(tape.log_softmax(logits)?)
    }

    pub fn predict(&self, seqs: &[Vec<usize>], gates: Gates<'_>) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(64) {
            let mut tape = Tape::with_checked(false);
            let vars = self.bind(&mut tape, false);
            let batch = Batch::new(chunk)?;
            let lp = self.log_probs(&mut tape, &vars, &batch, gates)?;
            let c = self.classes();
            for row in tape.value(lp).data().chunks(c) {
                let best = (0..c).fold(0, |b, j| if row[j] > row[b] { j } else { b });
                out.push(best);
            }
        }
        Ok(out)
    }

    /// Mean cross-entropy over `seqs` (no gradients).
    pub fn loss(&self, seqs: &[Vec<usize>], labels: &[usize], gates: Gates<'_>) -> Result<f64> {
        let mut total = 0.0;
        for (chunk, ys) in seqs.chunks(64).zip(labels.chunks(64)) {
            let mut tape = Tape::with_checked(false);
            let vars = self.bind(&mut tape, false);
            let batch = Batch::new(chunk)?;
            let lp = self.log_probs(&mut tape, &vars, &batch, gates)?;
            let l = nll(&mut tape, lp, ys)?;
            total += tape.value(l).item().to_f64_lossy() * chunk.len() as f64;
        }
        Ok(total / seqs.len() as f64)
    }
}

/// Encoded sequences and integer labels of a classification split.
pub fn labelled(instances: &[Instance], vocab: &Vocab, max_len: usize) -> Result<(Vec<Vec<usize>>, Vec<usize>)> {
    let mut seqs = Vec::with_capacity(instances.len());
    let mut labels = Vec::with_capacity(instances.len());
    for inst in instances {
        let y = inst
            .label
            .and_then(|l| l.class())
            .ok_or_else(|| Error::Input(format!("instance from {} lacks a class label", inst.source)))?;
        seqs.push(vocab.encode(inst, max_len));
        labels.push(y);
    }
    Ok((seqs, labels))
}

pub fn accuracy(pred: &[usize], gold: &[usize]) -> f64 {
    if gold.is_empty() {
        return 0.0;
    }
    pred.iter().zip(gold).filter(|(p, g)| p == g).count() as f64 / gold.len() as f64
}

pub struct FinetuneResult<T: Real> {
    pub model: Classifier<T>,
    pub accuracy: f64,
    pub losses: Vec<f64>,
    pub epochs: usize,
}

/// Trains `model` (all parameters) on labelled sequences.
pub fn train_classifier<T: Real>(
    model: &mut Classifier<T>,
    seqs: &[Vec<usize>],
    labels: &[usize],
    config: &FinetuneConfig,
    epochs: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if seqs.is_empty() {
        return Err(Error::Input("no training instances".into()));
    }
    let mut opt = Sgd::new(config.momentum, config.clip_norm);
    let mut rng = RngStream::new(seed).fork(0xf1e);
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let steps_per_epoch = seqs.len().div_ceil(config.batch_size);
    let total = (epochs * steps_per_epoch).max(1);
    let mut losses = Vec::with_capacity(total);
    let mut step = 0;
    for _ in 0..epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(config.batch_size) {
            let bs: Vec<Vec<usize>> = chunk.iter().map(|&i| seqs[i].clone()).collect();
            let ys: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let batch = Batch::new(&bs)?;
            let mut tape = Tape::with_checked(false);
            let vars = model.bind(&mut tape, true);
            let lp = model.log_probs(&mut tape, &vars, &batch, Gates::None)?;
            let loss = nll(&mut tape, lp, &ys)?;
            let value = tape.value(loss).item().to_f64_lossy();
            if !value.is_finite() {
                return Err(Error::Diverged { step });
            }
            let grads = tape.backward(loss)?;
            let mut all: Vec<Option<Tensor<T>>> = vars.encoder.all.iter().map(|&v| grads.get(v).cloned()).collect();
            all.push(grads.get(vars.w).cloned());
            all.push(grads.get(vars.b).cloned());
            let lr = config.lr * (1.0 - step as f64 / total as f64);
            opt.step(model.tensors_mut(), &all, lr);
            losses.push(value);
            step += 1;
        }
    }
    Ok(losses)
}

/// Compacts the encoder under `gates`, attaches a classifier and trains
/// everything on the task's training split; accuracy is on the test split.
pub fn finetune_classifier<T: Real>(
    encoder: &EncoderWeights<T>,
    gates: &GateAssignment,
    task: &TaskDataset,
    vocab: &Vocab,
    config: &FinetuneConfig,
    seed: u64,
) -> Result<FinetuneResult<T>> {
    if task.kind == TaskKind::PairSim {
        return Err(Error::Input(format!("task {} has no class labels", task.name)));
    }
    let max_len = encoder.config.max_len;
    let (train_x, train_y) = labelled(&task.train, vocab, max_len)?;
    let (test_x, test_y) = labelled(&task.test, vocab, max_len)?;
    let classes = task.num_classes().max(2);
    let pooling = encoder.config.pooling(task.kind.instance_kind());
    let mut model = Classifier::new(compact(encoder, &gates.discrete())?, classes, pooling, seed);
    let epochs = config.epochs.unwrap_or_else(|| epochs_for(task.train.len()));
    let losses = train_classifier(&mut model, &train_x, &train_y, config, epochs, seed)?;
    let pred = model.predict(&test_x, Gates::None)?;
    Ok(FinetuneResult { accuracy: accuracy(&pred, &test_y), model, losses, epochs })
}

// ---- similarity -------------------------------------------------------------------

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Input("correlation needs two equally long series of length ≥ 2".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(Error::Input("correlation undefined for a constant series".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Pearson correlation between gold similarity and the cosine similarity
/// of mean-pooled sentence representations, on the test split.
pub fn eval_similarity<T: Real>(
    encoder: &EncoderWeights<T>,
    gates: &GateAssignment,
    task: &TaskDataset,
    vocab: &Vocab,
) -> Result<f64> {
    let max_len = encoder.config.max_len;
    let mut a = Vec::new();
    let mut b = Vec::new();
    let mut gold = Vec::new();
    for inst in &task.test {
        let (Some(tb), Some(Label::Similarity(s))) = (&inst.b, inst.label) else {
            return Err(Error::Input(format!("task {} lacks similarity pairs", task.name)));
        };
        a.push(encode_ids(&vocab.ids(&inst.a), None, max_len));
        b.push(encode_ids(&vocab.ids(tb), None, max_len));
        gold.push(s);
    }
    let g = Gates::Values(gates);
    let mut pred = Vec::with_capacity(gold.len());
    for (ca, cb) in a.chunks(64).zip(b.chunks(64)) {
        let (ra, _) = represent(encoder, ca, g, Pooling::Mean, false)?;
        let (rb, _) = represent(encoder, cb, g, Pooling::Mean, false)?;
        for (x, y) in ra.iter().zip(&rb) {
            pred.push(1.0 - cosine_distance(x, y)?);
        }
    }
    pearson(&pred, &gold)
}

// ---- benchmark ----------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub instances_per_second: f64,
    pub bytes_per_instance: f64,
    pub flops: FlopCount,
    pub batch_size: usize,
    pub seq_len: usize,
    pub trials: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchComparison {
    pub full: BenchReport,
    pub pruned: BenchReport,
    /// Relative changes of pruned vs full (`pruned / full − 1`).
    pub ips_delta: f64,
    pub memory_delta: f64,
    pub attention_flops_delta: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median instances/second of a full training step (forward and backward
/// through a pooled objective) on the compacted encoder, after one warm-up.
/// Memory is the live tensor bytes of that step (tape plus gradients) per
/// instance.
pub fn bench_throughput<T: Real>(
    encoder: &EncoderWeights<T>,
    gates: &GateAssignment,
    batch_size: usize,
    seq_len: usize,
    trials: usize,
    seed: u64,
) -> Result<BenchReport> {
    if trials < 3 {
        return Err(Error::Config("benchmarks need at least three trials".into()));
    }
    let c = &encoder.config;
    if seq_len > c.max_len || seq_len < 2 {
        return Err(Error::Config(format!("sequence length {seq_len} outside 2..={}", c.max_len)));
    }
    let model = compact(encoder, &gates.discrete())?;
    let mut rng = RngStream::new(seed).fork(0xbe);
    let seqs: Vec<Vec<usize>> = (0..batch_size)
        .map(|_| (0..seq_len).map(|_| NUM_RESERVED + rng.below(c.vocab_size - NUM_RESERVED)).collect())
        .collect();
    let batch = Batch::new(&seqs)?;
    let step = || -> Result<usize> {
        let mut tape = Tape::<T>::with_checked(false);
        let vars = model.bind(&mut tape, true);
        let out = forward(&mut tape, &model, &vars, &batch, Gates::None, false)?;
        let pooled = pool(&mut tape, out.hidden, &batch, Pooling::Mean)?;
        let loss = tape.mean_all(pooled)?;
        let grads = tape.backward(loss)?;
        Ok(tape.live_bytes() + grads.nbytes())
    };
    let bytes = step()?;
    let mut rates = Vec::with_capacity(trials);
    for _ in 0..trials {
        let t = Instant::now();
        step()?;
        rates.push(batch_size as f64 / t.elapsed().as_secs_f64().max(1e-12));
    }
    Ok(BenchReport {
        instances_per_second: median(rates),
        bytes_per_instance: bytes as f64 / batch_size as f64,
        flops: count_flops(c, gates, seq_len),
        batch_size,
        seq_len,
        trials,
    })
}

/// Benchmarks the full and the pruned model with identical batch shapes.
/// Trials alternate between the two to share machine noise.
pub fn bench_compare<T: Real>(
    encoder: &EncoderWeights<T>,
    gates: &GateAssignment,
    batch_size: usize,
    seq_len: usize,
    trials: usize,
    seed: u64,
) -> Result<BenchComparison> {
    let ones = GateAssignment::ones(encoder.config.layers, encoder.config.heads);
    let mut full_runs = Vec::new();
    let mut pruned_runs = Vec::new();
    for r in 0..trials.max(3) {
        full_runs.push(bench_throughput(encoder, &ones, batch_size, seq_len, 3, seed + r as u64)?);
        pruned_runs.push(bench_throughput(encoder, gates, batch_size, seq_len, 3, seed + r as u64)?);
    }
    let merge = |runs: Vec<BenchReport>| BenchReport {
        instances_per_second: median(runs.iter().map(|r| r.instances_per_second).collect()),
        trials: runs.len() * 3,
        ..runs[0].clone()
    };
    let (full, pruned) = (merge(full_runs), merge(pruned_runs));
    let same = gates.discrete() == ones;
    let rel = |a: f64, b: f64| if same { 0.0 } else { a / b - 1.0 };
    Ok(BenchComparison {
        ips_delta: rel(pruned.instances_per_second, full.instances_per_second),
        memory_delta: rel(pruned.bytes_per_instance, full.bytes_per_instance),
        attention_flops_delta: rel(pruned.flops.attention, full.flops.attention),
        full,
        pruned,
    })
}

// ---- reports ----------------------------------------------------------------------

pub const REPORT_HEADER: &str = "method,ratio,task,seed,metric,value,gates_hash,wall_clock_s";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub ratio: f64,
    pub task: String,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
    pub gates_hash: String,
    pub wall_clock_s: f64,
}

impl ReportRow {
    pub fn csv(&self) -> String {
        let wall = if deterministic() { 0.0 } else { self.wall_clock_s };
        format!(
            "{},{},{},{},{},{:.8},{},{:.3}",
            self.method, self.ratio, self.task, self.seed, self.metric, self.value, self.gates_hash, wall
        )
    }
}

pub fn write_report(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let mut text = String::from(REPORT_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&r.csv());
        text.push('\n');
    }
    fs::write(path, text).map_err(io_err(path))
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (m, 0.0);
    }
    let v = values.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, v.sqrt())
}

// ---- sweeps -------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub ratio: f64,
    pub seed: u64,
    pub accuracy: f64,
    pub gates_hash: String,
}

/// Prunes with `prune(ratio)` and fine-tunes at every ratio and seed.
pub fn sweep_ratio<T: Real>(
    encoder: &EncoderWeights<T>,
    prune: &mut dyn FnMut(f64, u64) -> Result<GateAssignment>,
    task: &TaskDataset,
    vocab: &Vocab,
    ratios: &[f64],
    seeds: &[u64],
    config: &FinetuneConfig,
) -> Result<Vec<SweepPoint>> {
    if ratios.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Config("sweep ratios must be sorted ascending".into()));
    }
    let mut out = Vec::new();
    for &ratio in ratios {
        for &seed in seeds {
            let gates = prune(ratio, seed)?;
            let res = finetune_classifier(encoder, &gates, task, vocab, config, seed)?;
            log::info!("sweep ratio {ratio} seed {seed}: accuracy {:.4}", res.accuracy);
            out.push(SweepPoint { ratio, seed, accuracy: res.accuracy, gates_hash: gates.hash() });
        }
    }
    Ok(out)
}

pub fn write_sweep(path: &Path, points: &[SweepPoint]) -> Result<()> {
    let mut text = String::from("ratio,seed,accuracy,gates_hash\n");
    for p in points {
        let _ = writeln!(text, "{},{},{:.8},{}", p.ratio, p.seed, p.accuracy, p.gates_hash);
    }
    fs::write(path, text).map_err(io_err(path))
}

// ---- heatmaps -------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VizRecord {
    pub layer: usize,
    pub head: usize,
    pub s_sing: f64,
    pub s_pair: f64,
    pub tokens: Vec<String>,
}

/// Binary greyscale PGM with `round(255·v)` pixels.
pub fn pgm_bytes(values: &[f64], n: usize) -> Vec<u8> {
    let mut out = format!("P5\n{n} {n}\n255\n").into_bytes();
    out.extend(values.iter().map(|v| (255.0 * v.clamp(0.0, 1.0)).round() as u8));
    out
}

/// Writes `l{L}_h{H}.pgm` and `.json` for every head on one sentence.
pub fn export_attention_viz<T: Real>(
    encoder: &EncoderWeights<T>,
    scorer: &ScorerWeights<T>,
    vocab: &Vocab,
    sentence: &str,
    dir: &Path,
) -> Result<Vec<VizRecord>> {
    let inst = Instance::single(sentence, None, "viz");
    let max_len = encoder.config.max_len;
    if inst.a.len() + 2 > max_len {
        return Err(Error::Input(format!("sentence has {} tokens; the limit is {}", inst.a.len(), max_len - 2)));
    }
    let ids = vocab.encode(&inst, max_len);
    let mut tokens = vec!["[CLS]".to_string()];
    tokens.extend(inst.a.iter().cloned());
    tokens.push("[SEP]".into());
    let (_, att) = represent(encoder, &[ids], Gates::None, encoder.config.pooling(InstanceKind::Single), true)?;
    let att = att.expect("captured");
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let n = att.lens[0];
    let mut out = Vec::new();
    for l in 0..att.layers {
        for h in 0..att.heads {
            let m = att.matrix(l, h, 0);
            let canvas = normalize_matrix(m, None, scorer.config.canvas)?;
            let (s_sing, s_pair) = score_matrix(scorer, &canvas)?;
            let rec = VizRecord { layer: l, head: h, s_sing, s_pair, tokens: tokens.clone() };
            let stem = format!("l{l}_h{h}");
            let p = dir.join(format!("{stem}.pgm"));
            fs::write(&p, pgm_bytes(m, n)).map_err(io_err(&p))?;
            write_json(&dir.join(format!("{stem}.json")), &rec)?;
            out.push(rec);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pearson_examples() {
        let g = [0.1, 0.5, 0.3, 0.9];
        assert!((pearson(&g, &g).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = g.iter().map(|v| -v).collect();
        assert!((pearson(&neg, &g).unwrap() + 1.0).abs() < 1e-12);
        assert!(pearson(&[1.0, 1.0, 1.0], &g[..3]).is_err());
    }

    #[test]
    fn epoch_rule() {
        assert_eq!(epochs_for(9_999), 10);
        assert_eq!(epochs_for(10_000), 3);
    }

    #[test]
    fn pgm_layout() {
        let bytes = pgm_bytes(&[0.0, 0.5, 1.0, 0.25], 2);
        let header = b"P5\n2 2\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], &[0, 128, 255, 64]);
    }

    #[test]
    fn mean_and_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-12);
    }
}
