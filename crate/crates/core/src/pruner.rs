//! Attention-matrix scorer: fixed-size canvases, a strided CNN with a
//! two-way sigmoid head `(s_sing, s_pair)`, per-head aggregation and
//! per-layer equal-count selection.

use std::path::Path;

use serde::{Deserialize, Serialize};
use smp_numerics::{Real, RngStream, Tape, Tensor, Var};

use crate::checkpoint::{self, read_json, write_json, ArtifactManifest};
use crate::data::InstanceKind;
use crate::encoder::{represent, AttentionTensor, EncoderWeights, GateAssignment, Gates};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScorerConfig {
    pub canvas: usize,
    pub conv_layers: usize,
    pub base_channels: usize,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        ScorerConfig { canvas: 32, conv_layers: 5, base_channels: 8 }
    }
}

impl ScorerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.conv_layers == 0 || self.base_channels == 0 || self.canvas == 0 {
            return Err(Error::Config("scorer extents must be positive".into()));
        }
        if self.canvas % (1 << self.conv_layers) != 0 {
            return Err(Error::Config(format!(
                "canvas {} is not divisible by 2^{}",
                self.canvas, self.conv_layers
            )));
        }
        Ok(())
    }

    pub fn channels(&self, layer: usize) -> usize {
        self.base_channels << layer
    }

    pub fn feature_dim(&self) -> usize {
        self.channels(self.conv_layers - 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScorerWeights<T: Real> {
    pub config: ScorerConfig,
    /// `([C_out, C_in, 3, 3], [C_out])` per stage.
    pub convs: Vec<(Tensor<T>, Tensor<T>)>,
    pub fc_w: Tensor<T>,
    pub fc_b: Tensor<T>,
}

impl<T: Real> ScorerWeights<T> {
    /// Conv kernels uniform in ±√(6/fan_in), the final layer in
    /// ±1/√fan_in, all biases zero.
    pub fn init(config: &ScorerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = RngStream::new(seed).fork(0x5c);
        let mut uniform = |shape: &[usize], bound: f64| -> Tensor<T> {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| T::c(rng.uniform_range(-bound, bound))).collect();
            Tensor::new(shape.to_vec(), data).expect("shape matches data")
        };
        let mut convs = Vec::with_capacity(config.conv_layers);
        let mut c_in = 1;
        for l in 0..config.conv_layers {
            let c_out = config.channels(l);
            let fan_in = (c_in * 9) as f64;
            convs.push((uniform(&[c_out, c_in, 3, 3], (6.0 / fan_in).sqrt()), Tensor::zeros(&[c_out])));
            c_in = c_out;
        }
        let f = config.feature_dim();
        let fc_w = uniform(&[f, 2], 1.0 / (f as f64).sqrt());
        Ok(ScorerWeights { config: config.clone(), convs, fc_w, fc_b: Tensor::zeros(&[2]) })
    }

    /// All-zero weights and biases.
    pub fn zeros(config: &ScorerConfig) -> Result<Self> {
        let mut w = Self::init(config, 0)?;
        for t in w.tensors_mut() {
            *t = Tensor::zeros(t.shape());
        }
        Ok(w)
    }

    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (l, (w, b)) in self.convs.iter().enumerate() {
            out.push((format!("conv{l}.w"), w));
            out.push((format!("conv{l}.b"), b));
        }
        out.push(("fc.w".into(), &self.fc_w));
        out.push(("fc.b".into(), &self.fc_b));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for (w, b) in &mut self.convs {
            out.push(w);
            out.push(b);
        }
        out.push(&mut self.fc_w);
        out.push(&mut self.fc_b);
        out
    }

    pub fn from_tensors(config: &ScorerConfig, tensors: Vec<Tensor<T>>) -> Result<Self> {
        let template = Self::zeros(config)?;
        if tensors.len() != template.named().len() {
            return Err(Error::Input("scorer tensor count does not match the configuration".into()));
        }
        for ((name, want), got) in template.named().iter().zip(&tensors) {
            if want.shape() != got.shape() {
                return Err(Error::Input(format!(
                    "scorer tensor {name} has shape {:?}, expected {:?}",
                    got.shape(),
                    want.shape()
                )));
            }
        }
        let mut it = tensors.into_iter();
        let convs = (0..config.conv_layers).map(|_| (it.next().unwrap(), it.next().unwrap())).collect();
        Ok(ScorerWeights { config: config.clone(), convs, fc_w: it.next().unwrap(), fc_b: it.next().unwrap() })
    }

    pub fn cast<U: Real>(&self) -> ScorerWeights<U> {
        let t = self.named().into_iter().map(|(_, t)| t.cast::<U>()).collect();
        ScorerWeights::from_tensors(&self.config, t).expect("same shapes")
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.named().into_iter().map(|(_, t)| tape.leaf(t.clone(), trainable)).collect()
    }
}

/// Scores `[N, 2]` for canvases `[N, 1, S, S]`.
pub fn score_tape<T: Real>(tape: &mut Tape<T>, config: &ScorerConfig, vars: &[Var], canvases: Var) -> Result<Var> {
    let logits = score_logits_tape(tape, config, vars, canvases)?;
    Ok(tape.sigmoid(logits)?)
}

/// Pre-sigmoid outputs of [`score_tape`].
pub fn score_logits_tape<T: Real>(
    tape: &mut Tape<T>,
    config: &ScorerConfig,
    vars: &[Var],
    canvases: Var,
) -> Result<Var> {
    let mut x = canvases;
    for l in 0..config.conv_layers {
        let y = tape.conv2d(x, vars[2 * l], vars[2 * l + 1], 2, 1)?;
        x = tape.relu(y)?;
    }
    let s = tape.shape(x).to_vec();
    let flat = tape.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
    let pooled = tape.mean_axis(flat, 2)?;
    let feat = tape.reshape(pooled, &[s[0], s[1]])?;
    let n = config.conv_layers;
    let logits = tape.matmul(feat, vars[2 * n])?;
    Ok(tape.add(logits, vars[2 * n + 1])?)
}

/// Maps an `n×n` attention matrix onto an `S×S` canvas: rows and columns
/// outside `mask` are zeroed; `n ≤ S` is copied top-left, larger matrices
/// are average-pooled with kernel `⌈n/S⌉` (averaging in-range cells only);
/// the rest is zero.
pub fn normalize_matrix(attention: &[f64], mask: Option<&[bool]>, canvas: usize) -> Result<Vec<f64>> {
    let n = (attention.len() as f64).sqrt().round() as usize;
    if n == 0 || n * n != attention.len() {
        return Err(Error::Input(format!("attention of length {} is not a non-empty square", attention.len())));
    }
    if mask.is_some_and(|m| m.len() != n) {
        return Err(Error::Input("mask length does not match the attention matrix".into()));
    }
    let live = |i: usize| mask.map_or(true, |m| m[i]);
    let at = |i: usize, j: usize| if live(i) && live(j) { attention[i * n + j] } else { 0.0 };
    let mut out = vec![0.0; canvas * canvas];
    let k = n.div_ceil(canvas);
    let m = n.div_ceil(k);
    for bi in 0..m {
        for bj in 0..m {
            let (r0, r1) = (bi * k, ((bi + 1) * k).min(n));
            let (c0, c1) = (bj * k, ((bj + 1) * k).min(n));
            let mut s = 0.0;
            for i in r0..r1 {
                for j in c0..c1 {
                    s += at(i, j);
                }
            }
            out[bi * canvas + bj] = (s / ((r1 - r0) * (c1 - c0)) as f64).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// Canvases for every captured matrix, ordered (layer, head, instance).
pub fn canvases<T: Real>(att: &AttentionTensor, canvas: usize) -> Result<Tensor<T>> {
    let b = att.instances();
    let mut data = Vec::with_capacity(att.layers * att.heads * b * canvas * canvas);
    for l in 0..att.layers {
        for h in 0..att.heads {
            for i in 0..b {
                data.extend(normalize_matrix(att.matrix(l, h, i), None, canvas)?.into_iter().map(T::c));
            }
        }
    }
    Ok(Tensor::new(vec![att.layers * att.heads * b, 1, canvas, canvas], data)?)
}

/// Score pair of one canvas.
pub fn score_matrix<T: Real>(weights: &ScorerWeights<T>, canvas: &[f64]) -> Result<(f64, f64)> {
    let s = weights.config.canvas;
    let mut tape = Tape::new();
    let vars = weights.bind(&mut tape, false);
    let x = tape.constant(Tensor::from_f64(&[1, 1, s, s], canvas)?);
    let out = score_tape(&mut tape, &weights.config, &vars, x)?;
    let v = tape.value(out).to_f64_vec();
    Ok((v[0], v[1]))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadScoreTable {
    pub layers: usize,
    pub heads: usize,
    /// `[s_sing, s_pair]` per head, row-major over (layer, head).
    pub scores: Vec<[f64; 2]>,
    pub instances: usize,
}

impl HeadScoreTable {
    pub fn column(kind: InstanceKind) -> usize {
        match kind {
            InstanceKind::Single => 0,
            InstanceKind::Pair => 1,
        }
    }

    /// The L×H scalars used for an episode of `kind`.
    pub fn for_kind(&self, kind: InstanceKind) -> Vec<Vec<f64>> {
        let c = Self::column(kind);
        self.scores.chunks(self.heads).map(|r| r.iter().map(|s| s[c]).collect()).collect()
    }
}

/// Per-head `[L·H, 2]` means over instances, on `tape`.
pub fn aggregate_tape<T: Real>(
    tape: &mut Tape<T>,
    scorer: &ScorerWeights<T>,
    vars: &[Var],
    att: &AttentionTensor,
) -> Result<Var> {
    let b = att.instances();
    if b == 0 {
        return Err(Error::Input("no instances to score".into()));
    }
    let x = tape.constant(canvases(att, scorer.config.canvas)?);
    let s = score_tape(tape, &scorer.config, vars, x)?;
    let per = tape.reshape(s, &[att.layers * att.heads, b, 2])?;
    let m = tape.mean_axis(per, 1)?;
    Ok(tape.reshape(m, &[att.layers * att.heads, 2])?)
}

/// Per-head `ln s̄` and `ln(1 − s̄)` for output column `col`, each
/// `[L·H, 1]`, computed in log space so neither saturates.
pub fn aggregate_log_tape<T: Real>(
    tape: &mut Tape<T>,
    scorer: &ScorerWeights<T>,
    vars: &[Var],
    att: &AttentionTensor,
    col: usize,
) -> Result<(Var, Var)> {
    let b = att.instances();
    if b == 0 {
        return Err(Error::Input("no instances to score".into()));
    }
    let x = tape.constant(canvases(att, scorer.config.canvas)?);
    let z = score_logits_tape(tape, &scorer.config, vars, x)?;
    let z = tape.slice(z, 1, col, col + 1)?;
    let n = tape.shape(z)[0];
    let zero = tape.constant(Tensor::zeros(&[n, 1]));
    let pair = tape.concat(&[zero, z], 1)?;
    // [ln σ(−z), ln σ(z)] per instance.
    let lp = tape.log_softmax(pair)?;
    let heads = att.layers * att.heads;
    let mut out = Vec::with_capacity(2);
    for c in [1, 0] {
        let v = tape.slice(lp, 1, c, c + 1)?;
        let v = tape.reshape(v, &[heads, b])?;
        // ln Σ eᵛ = v₀ − log_softmax(v)₀
        let ls = tape.log_softmax(v)?;
        let first = tape.slice(v, 1, 0, 1)?;
        let first_ls = tape.slice(ls, 1, 0, 1)?;
        let lse = tape.sub(first, first_ls)?;
        out.push(tape.add_scalar(lse, -(b as f64).ln())?);
    }
    Ok((out[0], out[1]))
}

pub fn aggregate_head_scores<T: Real>(scorer: &ScorerWeights<T>, att: &AttentionTensor) -> Result<HeadScoreTable> {
    let mut tape = Tape::new();
    let vars = scorer.bind(&mut tape, false);
    let agg = aggregate_tape(&mut tape, scorer, &vars, att)?;
    let v = tape.value(agg).to_f64_vec();
    Ok(HeadScoreTable {
        layers: att.layers,
        heads: att.heads,
        scores: v.chunks(2).map(|c| [c[0], c[1]]).collect(),
        instances: att.instances(),
    })
}

/// `⌈(1 − ratio)·H⌉`, guarded against representation error.
pub fn keep_count(heads: usize, ratio: f64) -> usize {
    (((1.0 - ratio) * heads as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Keeps the top [`keep_count`] heads of every layer; ties go to the lower
/// head index.
pub fn select_prune_set(scores: &[Vec<f64>], ratio: f64) -> Result<GateAssignment> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Config(format!("pruning ratio {ratio} must lie in [0, 1)")));
    }
    let values = scores
        .iter()
        .map(|row| {
            let keep = keep_count(row.len(), ratio);
            let mut order: Vec<usize> = (0..row.len()).collect();
            order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            let mut gates = vec![0.0; row.len()];
            for &h in &order[..keep] {
                gates[h] = 1.0;
            }
            gates
        })
        .collect();
    GateAssignment::new(values)
}

/// Single-shot pruning pass: full forward, scoring, aggregation by `kind`,
/// selection.
pub fn smp_prune<T: Real>(
    encoder: &EncoderWeights<T>,
    scorer: &ScorerWeights<T>,
    seqs: &[Vec<usize>],
    kind: InstanceKind,
    ratio: f64,
) -> Result<(GateAssignment, HeadScoreTable)> {
    if seqs.is_empty() {
        return Err(Error::Input("pruning needs at least one instance".into()));
    }
    let pooling = encoder.config.pooling(kind);
    let (_, att) = represent(encoder, seqs, Gates::None, pooling, true)?;
    let table = aggregate_head_scores(scorer, &att.expect("captured"))?;
    let gates = select_prune_set(&table.for_kind(kind), ratio)?;
    Ok((gates, table))
}

// ---- files ------------------------------------------------------------------------

/// Gate assignment with its provenance header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateFile {
    pub method: String,
    pub ratio: f64,
    pub kind: Option<InstanceKind>,
    pub source_checkpoint: String,
    #[serde(default)]
    pub params: serde_json::Value,
    pub gates: Vec<Vec<f64>>,
}

impl GateFile {
    pub fn assignment(&self) -> Result<GateAssignment> {
        GateAssignment::new(self.gates.clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let g: GateFile = read_json(path)?;
        g.assignment()?;
        Ok(g)
    }
}

pub const SCORER_CONFIG: &str = "scorer_config.json";

pub fn save_scorer<T: Real>(dir: &Path, scorer: &ScorerWeights<T>, command: &str, config_hash: &str) -> Result<String> {
    let hash = checkpoint::save_tensors(dir, &scorer.named())?;
    write_json(&dir.join(SCORER_CONFIG), &scorer.config)?;
    ArtifactManifest::new("scorer", hash.clone(), command, config_hash).write(dir)?;
    Ok(hash)
}

pub fn load_scorer<T: Real>(dir: &Path) -> Result<ScorerWeights<T>> {
    let config: ScorerConfig = read_json(&dir.join(SCORER_CONFIG))?;
    let tensors = checkpoint::load_tensors::<T>(dir)?;
    ScorerWeights::from_tensors(&config, tensors.into_iter().map(|(_, t)| t).collect())
}
