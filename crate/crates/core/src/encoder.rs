//! Gated multi-head Transformer encoder (post-LN, ReLU feed-forward,
//! learned positions, tied masked-LM head).
//!
//! Each head's context is multiplied by its gate before the heads are
//! concatenated and projected. Attention probabilities are captured after
//! the softmax and before gating.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use smp_numerics::{Real, RngStream, Tape, Tensor, Var};

use crate::data::PAD;
use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-5;
const MASK_FILL: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Cls,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub single_pooling: Pooling,
    pub pair_pooling: Pooling,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            layers: 4,
            heads: 4,
            d_model: 64,
            d_ff: 128,
            max_len: 32,
            vocab_size: 2048,
            single_pooling: Pooling::Mean,
            pair_pooling: Pooling::Cls,
        }
    }
}

impl EncoderConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return Err(Error::Config("encoder extents must be positive".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.max_len < 4 {
            return Err(Error::Config(format!("max_len {} is below 4", self.max_len)));
        }
        if self.vocab_size < crate::data::NUM_RESERVED {
            return Err(Error::Config("vocabulary smaller than the reserved set".into()));
        }
        Ok(())
    }

    pub fn pooling(&self, kind: crate::data::InstanceKind) -> Pooling {
        match kind {
            crate::data::InstanceKind::Single => self.single_pooling,
            crate::data::InstanceKind::Pair => self.pair_pooling,
        }
    }
}

// ---- weights ----------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights<T: Real> {
    pub wq: Tensor<T>,
    pub bq: Tensor<T>,
    pub wk: Tensor<T>,
    pub bk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bo: Tensor<T>,
    pub ln1_g: Tensor<T>,
    pub ln1_b: Tensor<T>,
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
    pub ln2_g: Tensor<T>,
    pub ln2_b: Tensor<T>,
}

const LAYER_FIELDS: [&str; 16] = [
    "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln1_g", "ln1_b", "w1", "b1", "w2", "b2", "ln2_g", "ln2_b",
];

impl<T: Real> LayerWeights<T> {
    fn fields(&self) -> [&Tensor<T>; 16] {
        [
            &self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv, &self.wo, &self.bo, &self.ln1_g,
            &self.ln1_b, &self.w1, &self.b1, &self.w2, &self.b2, &self.ln2_g, &self.ln2_b,
        ]
    }

    fn fields_mut(&mut self) -> [&mut Tensor<T>; 16] {
        [
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.ln2_g,
            &mut self.ln2_b,
        ]
    }

    fn from_fields(mut f: Vec<Tensor<T>>) -> Self {
        let mut next = || f.remove(0);
        LayerWeights {
            wq: next(),
            bq: next(),
            wk: next(),
            bk: next(),
            wv: next(),
            bv: next(),
            wo: next(),
            bo: next(),
            ln1_g: next(),
            ln1_b: next(),
            w1: next(),
            b1: next(),
            w2: next(),
            b2: next(),
            ln2_g: next(),
            ln2_b: next(),
        }
    }

    /// Heads present in this layer (fewer than configured after compaction).
    pub fn num_heads(&self, d_head: usize) -> usize {
        self.wq.shape()[1] / d_head
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderWeights<T: Real> {
    pub config: EncoderConfig,
    pub tok_emb: Tensor<T>,
    pub pos_emb: Tensor<T>,
    pub emb_ln_g: Tensor<T>,
    pub emb_ln_b: Tensor<T>,
    pub layers: Vec<LayerWeights<T>>,
    pub mlm_bias: Tensor<T>,
}

fn normal_tensor<T: Real>(shape: &[usize], std: f64, rng: &mut RngStream) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::c(rng.normal() * std)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

fn uniform_tensor<T: Real>(shape: &[usize], bound: f64, rng: &mut RngStream) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::c(rng.uniform_range(-bound, bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

impl<T: Real> EncoderWeights<T> {
    /// Linear maps uniform in ±1/√fan_in, embeddings normal with std 0.1,
    /// zero biases, unit layer-norm gains.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = RngStream::new(seed).fork(0xe1);
        let (d, f, v) = (config.d_model, config.d_ff, config.vocab_size);
        let lin = |i: usize, o: usize, rng: &mut RngStream| uniform_tensor::<T>(&[i, o], 1.0 / (i as f64).sqrt(), rng);
        let layers = (0..config.layers)
            .map(|_| LayerWeights {
                wq: lin(d, d, &mut rng),
                bq: Tensor::zeros(&[d]),
                wk: lin(d, d, &mut rng),
                bk: Tensor::zeros(&[d]),
                wv: lin(d, d, &mut rng),
                bv: Tensor::zeros(&[d]),
                wo: lin(d, d, &mut rng),
                bo: Tensor::zeros(&[d]),
                ln1_g: Tensor::ones(&[d]),
                ln1_b: Tensor::zeros(&[d]),
                w1: lin(d, f, &mut rng),
                b1: Tensor::zeros(&[f]),
                w2: lin(f, d, &mut rng),
                b2: Tensor::zeros(&[d]),
                ln2_g: Tensor::ones(&[d]),
                ln2_b: Tensor::zeros(&[d]),
            })
            .collect();
        Ok(EncoderWeights {
            config: config.clone(),
            tok_emb: normal_tensor(&[v, d], 0.1, &mut rng),
            pos_emb: normal_tensor(&[config.max_len, d], 0.1, &mut rng),
            emb_ln_g: Tensor::ones(&[d]),
            emb_ln_b: Tensor::zeros(&[d]),
            layers,
            mlm_bias: Tensor::zeros(&[v]),
        })
    }

    /// Parameter tensors with stable names, in checkpoint order.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
            ("emb_ln_g".to_string(), &self.emb_ln_g),
            ("emb_ln_b".to_string(), &self.emb_ln_b),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, t) in LAYER_FIELDS.iter().zip(layer.fields()) {
                out.push((format!("layer{l}.{name}"), t));
            }
        }
        out.push(("mlm_bias".to_string(), &self.mlm_bias));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb, &mut self.emb_ln_g, &mut self.emb_ln_b];
        for layer in &mut self.layers {
            out.extend(layer.fields_mut());
        }
        out.push(&mut self.mlm_bias);
        out
    }

    /// Rebuilds weights from tensors in [`named`](Self::named) order,
    /// checking every shape against `config`.
    pub fn from_tensors(config: &EncoderConfig, tensors: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let expected = 4 + 16 * config.layers + 1;
        if tensors.len() != expected {
            return Err(Error::Input(format!("expected {expected} encoder tensors, got {}", tensors.len())));
        }
        let mut it = tensors.into_iter();
        let mut take = |n: usize| -> Vec<Tensor<T>> { (&mut it).take(n).collect() };
        let head = take(4);
        let mut layers = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            layers.push(LayerWeights::from_fields(take(16)));
        }
        let mlm_bias = take(1).remove(0);
        let mut head = head.into_iter();
        let w = EncoderWeights {
            config: config.clone(),
            tok_emb: head.next().unwrap(),
            pos_emb: head.next().unwrap(),
            emb_ln_g: head.next().unwrap(),
            emb_ln_b: head.next().unwrap(),
            layers,
            mlm_bias,
        };
        w.check_shapes()?;
        Ok(w)
    }

    fn check_shapes(&self) -> Result<()> {
        let c = &self.config;
        let (d, f, v, dh) = (c.d_model, c.d_ff, c.vocab_size, c.d_head());
        let bad = |name: &str, got: &[usize], want: &[usize]| {
            Err(Error::Input(format!("tensor {name} has shape {got:?}, expected {want:?}")))
        };
        for (name, t, want) in [
            ("tok_emb", &self.tok_emb, vec![v, d]),
            ("pos_emb", &self.pos_emb, vec![c.max_len, d]),
            ("emb_ln_g", &self.emb_ln_g, vec![d]),
            ("emb_ln_b", &self.emb_ln_b, vec![d]),
            ("mlm_bias", &self.mlm_bias, vec![v]),
        ] {
            if t.shape() != want.as_slice() {
                return bad(name, t.shape(), &want);
            }
        }
        for (l, layer) in self.layers.iter().enumerate() {
            let hk = layer.wq.shape().get(1).copied().unwrap_or(0) / dh;
            if hk > c.heads {
                return Err(Error::Input(format!("layer {l} has more than {} heads", c.heads)));
            }
            let a = hk * dh;
            let want: [Vec<usize>; 16] = [
                vec![d, a],
                vec![a],
                vec![d, a],
                vec![a],
                vec![d, a],
                vec![a],
                vec![a, d],
                vec![d],
                vec![d],
                vec![d],
                vec![d, f],
                vec![f],
                vec![f, d],
                vec![d],
                vec![d],
                vec![d],
            ];
            for ((name, t), w) in LAYER_FIELDS.iter().zip(layer.fields()).zip(want.iter()) {
                if t.shape() != w.as_slice() {
                    return bad(&format!("layer{l}.{name}"), t.shape(), w);
                }
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> EncoderWeights<U> {
        let tensors = self.named().into_iter().map(|(_, t)| t.cast::<U>()).collect();
        EncoderWeights::from_tensors(&self.config, tensors).expect("same shapes")
    }

    pub fn num_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Parameters of the Q/K/V/O projections (weights and biases).
    pub fn attention_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| [&l.wq, &l.bq, &l.wk, &l.bk, &l.wv, &l.bv, &l.wo].iter().map(|t| t.len()).sum::<usize>())
            .sum()
    }

    pub fn heads_per_layer(&self) -> Vec<usize> {
        let dh = self.config.d_head();
        self.layers.iter().map(|l| l.num_heads(dh)).collect()
    }

    /// Places every parameter on `tape`, as gradient-carrying leaves when
    /// `trainable`.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> EncoderVars {
        let all: Vec<Var> = self.named().into_iter().map(|(_, t)| tape.leaf(t.clone(), trainable)).collect();
        EncoderVars::from_list(all, self.config.layers)
    }
}

/// Tape handles for every encoder parameter, in checkpoint order.
#[derive(Clone, Debug)]
pub struct EncoderVars {
    pub all: Vec<Var>,
    layers: usize,
}

impl EncoderVars {
    fn from_list(all: Vec<Var>, layers: usize) -> Self {
        EncoderVars { all, layers }
    }

    fn tok_emb(&self) -> Var {
        self.all[0]
    }

    fn pos_emb(&self) -> Var {
        self.all[1]
    }

    fn emb_ln(&self) -> (Var, Var) {
        (self.all[2], self.all[3])
    }

    fn layer(&self, l: usize, field: usize) -> Var {
        self.all[4 + 16 * l + field]
    }

    fn mlm_bias(&self) -> Var {
        self.all[4 + 16 * self.layers]
    }
}

// ---- gates ------------------------------------------------------------------

/// L×H gate values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateAssignment {
    pub values: Vec<Vec<f64>>,
}

impl GateAssignment {
    pub fn ones(layers: usize, heads: usize) -> Self {
        GateAssignment { values: vec![vec![1.0; heads]; layers] }
    }

    pub fn new(values: Vec<Vec<f64>>) -> Result<Self> {
        let g = GateAssignment { values };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.values.first().map_or(0, Vec::len);
        if self.values.is_empty() || h == 0 || self.values.iter().any(|r| r.len() != h) {
            return Err(Error::Input("gate matrix must be a non-empty rectangle".into()));
        }
        if self.values.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Input("gate values must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn layers(&self) -> usize {
        self.values.len()
    }

    pub fn heads(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn is_discrete(&self) -> bool {
        self.values.iter().flatten().all(|&v| v == 0.0 || v == 1.0)
    }

    /// Rounds to `{0, 1}` at 0.5.
    pub fn discrete(&self) -> GateAssignment {
        GateAssignment {
            values: self.values.iter().map(|r| r.iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect()).collect(),
        }
    }

    pub fn kept_per_layer(&self) -> Vec<usize> {
        self.values.iter().map(|r| r.iter().filter(|&&v| v >= 0.5).count()).collect()
    }

    pub fn kept_heads(&self, layer: usize) -> Vec<usize> {
        (0..self.heads()).filter(|&h| self.values[layer][h] >= 0.5).collect()
    }

    /// FNV-1a over the little-endian bit patterns of the values.
    pub fn hash(&self) -> String {
        let bytes: Vec<u8> = self.values.iter().flatten().flat_map(|v| v.to_le_bytes()).collect();
        crate::hash::fnv1a_hex(&bytes)
    }
}

/// How gates enter a forward pass.
#[derive(Clone, Copy, Debug)]
pub enum Gates<'a> {
    /// No multiplication at all.
    None,
    Values(&'a GateAssignment),
    /// One `[1]`-shaped tape variable per (layer, head).
    Vars(&'a [Vec<Var>]),
}

// ---- batches ------------------------------------------------------------------

/// Token ids padded to the longest sequence of the batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ids: Vec<usize>,
    pub lens: Vec<usize>,
    pub size: usize,
    pub seq_len: usize,
}

impl Batch {
    pub fn new(seqs: &[Vec<usize>]) -> Result<Batch> {
        if seqs.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        if seqs.iter().any(Vec::is_empty) {
            return Err(Error::Input("empty sequence in batch".into()));
        }
        let t = seqs.iter().map(Vec::len).max().unwrap();
        let mut ids = vec![PAD; seqs.len() * t];
        for (b, s) in seqs.iter().enumerate() {
            ids[b * t..b * t + s.len()].copy_from_slice(s);
        }
        Ok(Batch { ids, lens: seqs.iter().map(Vec::len).collect(), size: seqs.len(), seq_len: t })
    }

    /// `[B, T, T]`, true where the key position is padding.
    fn key_mask(&self) -> Arc<Vec<bool>> {
        let t = self.seq_len;
        let mut m = vec![false; self.size * t * t];
        for b in 0..self.size {
            for i in 0..t {
                for j in self.lens[b]..t {
                    m[(b * t + i) * t + j] = true;
                }
            }
        }
        Arc::new(m)
    }

    /// Flat row index of token `i` of instance `b`.
    pub fn row(&self, b: usize, i: usize) -> usize {
        b * self.seq_len + i
    }
}

// ---- attention capture ----------------------------------------------------------

/// Unpadded per-(layer, head, instance) attention matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTensor {
    pub layers: usize,
    pub heads: usize,
    pub lens: Vec<usize>,
    mats: Vec<Vec<f64>>,
}

impl AttentionTensor {
    pub fn instances(&self) -> usize {
        self.lens.len()
    }

    /// Row-major `n×n` matrix with `n = lens[b]`.
    pub fn matrix(&self, layer: usize, head: usize, b: usize) -> &[f64] {
        &self.mats[(layer * self.heads + head) * self.lens.len() + b]
    }
}

// ---- forward ------------------------------------------------------------------

pub struct ForwardOutput {
    /// Token outputs `[B·T, d]`.
    pub hidden: Var,
    pub attention: Option<AttentionTensor>,
}

/// Runs the encoder on `tape`.
pub fn forward<T: Real>(
    tape: &mut Tape<T>,
    weights: &EncoderWeights<T>,
    vars: &EncoderVars,
    batch: &Batch,
    gates: Gates<'_>,
    capture: bool,
) -> Result<ForwardOutput> {
    let c = &weights.config;
    let (b, t, d, dh) = (batch.size, batch.seq_len, c.d_model, c.d_head());
    if t > c.max_len {
        return Err(Error::Input(format!("sequence length {t} exceeds max_len {}", c.max_len)));
    }
    if let Some(&bad) = batch.ids.iter().find(|&&i| i >= c.vocab_size) {
        return Err(Error::Input(format!("token id {bad} outside the vocabulary")));
    }
    let heads = weights.heads_per_layer();
    match gates {
        Gates::Values(g) if g.layers() != c.layers || g.heads() != c.heads => {
            return Err(Error::Input("gate matrix does not match the encoder".into()));
        }
        Gates::Vars(g) if g.len() != c.layers || g.iter().any(|r| r.len() != c.heads) => {
            return Err(Error::Input("gate variables do not match the encoder".into()));
        }
        Gates::Values(_) | Gates::Vars(_) if heads.iter().any(|&h| h != c.heads) => {
            return Err(Error::Input("gating a compacted encoder is not supported".into()));
        }
        _ => {}
    }

    let positions: Vec<usize> = (0..b).flat_map(|_| 0..t).collect();
    let tok = tape.embedding(vars.tok_emb(), &batch.ids)?;
    let pos = tape.embedding(vars.pos_emb(), &positions)?;
    let emb = tape.add(tok, pos)?;
    let (g0, b0) = vars.emb_ln();
    let mut x = tape.layer_norm(emb, g0, b0, LN_EPS)?;

    let mask = batch.key_mask();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut captured = capture.then(Vec::new);

    for (l, &hk) in heads.iter().enumerate() {
        let w = |f: usize| vars.layer(l, f);
        let attn_out = if hk == 0 {
            let zeros = tape.constant(Tensor::zeros(&[b * t, d]));
            tape.add(zeros, w(7))?
        } else {
            let q = linear(tape, x, w(0), w(1))?;
            let k = linear(tape, x, w(2), w(3))?;
            let v = linear(tape, x, w(4), w(5))?;
            let mut contexts = Vec::with_capacity(hk);
            for h in 0..hk {
                let split = |tape: &mut Tape<T>, m: Var| -> Result<Var> {
                    let s = tape.slice(m, 1, h * dh, (h + 1) * dh)?;
                    Ok(tape.reshape(s, &[b, t, dh])?)
                };
                let (qh, kh, vh) = (split(tape, q)?, split(tape, k)?, split(tape, v)?);
                let scores = tape.matmul_t(qh, kh, false, true)?;
                let scores = tape.scale(scores, scale)?;
                let scores = tape.masked_fill(scores, mask.clone(), MASK_FILL)?;
                let probs = tape.softmax(scores)?;
                if let Some(cap) = captured.as_mut() {
                    let p = tape.value(probs).data();
                    for (bi, &n) in batch.lens.iter().enumerate() {
                        let mut m = Vec::with_capacity(n * n);
                        for i in 0..n {
                            let row = &p[(bi * t + i) * t..(bi * t + i) * t + n];
                            m.extend(row.iter().map(|v| v.to_f64_lossy()));
                        }
                        cap.push(m);
                    }
                }
                let mut ctx = tape.matmul(probs, vh)?;
                match gates {
                    Gates::None => {}
                    Gates::Values(g) => {
                        let gv = tape.scalar(g.values[l][h]);
                        ctx = tape.mul(ctx, gv)?;
                    }
                    Gates::Vars(g) => ctx = tape.mul(ctx, g[l][h])?,
                }
                contexts.push(ctx);
            }
            let cat = if hk == 1 { contexts[0] } else { tape.concat(&contexts, 2)? };
            let cat = tape.reshape(cat, &[b * t, hk * dh])?;
            linear(tape, cat, w(6), w(7))?
        };
        let r = tape.add(attn_out, x)?;
        let x1 = tape.layer_norm(r, w(8), w(9), LN_EPS)?;
        let f = linear(tape, x1, w(10), w(11))?;
        let f = tape.relu(f)?;
        let f = linear(tape, f, w(12), w(13))?;
        let r2 = tape.add(f, x1)?;
        x = tape.layer_norm(r2, w(14), w(15), LN_EPS)?;
    }

    let attention = captured.map(|mats| AttentionTensor {
        layers: c.layers,
        heads: c.heads,
        lens: batch.lens.clone(),
        mats,
    });
    Ok(ForwardOutput { hidden: x, attention })
}

fn linear<T: Real>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    Ok(tape.add(y, b)?)
}

/// `[B, B·T]` pooling matrix: CLS picks position 0, MEAN averages the real
/// tokens.
pub fn pooling_matrix<T: Real>(batch: &Batch, pooling: Pooling) -> Tensor<T> {
    let (b, t) = (batch.size, batch.seq_len);
    let mut m = vec![T::zero(); b * b * t];
    for (i, &n) in batch.lens.iter().enumerate() {
        match pooling {
            Pooling::Cls => m[i * b * t + i * t] = T::one(),
            Pooling::Mean => {
                let w = T::one() / T::c(n as f64);
                for j in 0..n {
                    m[i * b * t + i * t + j] = w;
                }
            }
        }
    }
    Tensor::new(vec![b, b * t], m).expect("shape matches data")
}

/// Pooled `[B, d]` representations.
pub fn pool<T: Real>(tape: &mut Tape<T>, hidden: Var, batch: &Batch, pooling: Pooling) -> Result<Var> {
    if batch.lens.iter().zip(0..).any(|(&n, b)| (0..n).all(|i| batch.ids[batch.row(b, i)] == PAD)) {
        return Err(Error::Input("cannot pool an all-padding instance".into()));
    }
    let p = tape.constant(pooling_matrix(batch, pooling));
    Ok(tape.matmul(p, hidden)?)
}

/// Log-probabilities over the vocabulary at the given flat rows, through
/// the tied output embedding.
pub fn mlm_log_probs<T: Real>(tape: &mut Tape<T>, vars: &EncoderVars, hidden: Var, rows: &[usize]) -> Result<Var> {
    let picked = tape.embedding(hidden, rows)?;
    let logits = tape.matmul_t(picked, vars.tok_emb(), false, true)?;
    let logits = tape.add(logits, vars.mlm_bias())?;
    Ok(tape.log_softmax(logits)?)
}

/// Mean negative log-likelihood of `targets` under row-wise
/// log-probabilities `[M, C]`.
pub fn nll<T: Real>(tape: &mut Tape<T>, log_probs: Var, targets: &[usize]) -> Result<Var> {
    let shape = tape.shape(log_probs).to_vec();
    let (m, c) = (shape[0], shape[1]);
    if targets.len() != m || targets.iter().any(|&y| y >= c) {
        return Err(Error::Input("targets do not match the log-probabilities".into()));
    }
    let mut onehot = vec![T::zero(); m * c];
    for (i, &y) in targets.iter().enumerate() {
        onehot[i * c + y] = T::one();
    }
    let oh = tape.constant(Tensor::new(vec![m, c], onehot)?);
    let picked = tape.mul(log_probs, oh)?;
    let s = tape.sum_all(picked)?;
    Ok(tape.scale(s, -1.0 / m as f64)?)
}

/// Convenience: pooled representations of encoded sequences as `f64` rows,
/// without gradients.
pub fn represent<T: Real>(
    weights: &EncoderWeights<T>,
    seqs: &[Vec<usize>],
    gates: Gates<'_>,
    pooling: Pooling,
    capture: bool,
) -> Result<(Vec<Vec<f64>>, Option<AttentionTensor>)> {
    let mut tape = Tape::with_checked(false);
    let vars = weights.bind(&mut tape, false);
    let batch = Batch::new(seqs)?;
    let out = forward(&mut tape, weights, &vars, &batch, gates, capture)?;
    let pooled = pool(&mut tape, out.hidden, &batch, pooling)?;
    let d = weights.config.d_model;
    let rows = tape.value(pooled).to_f64_vec().chunks(d).map(<[f64]>::to_vec).collect();
    Ok((rows, out.attention))
}

// ---- compaction and cost ------------------------------------------------------------

fn take_cols<T: Real>(m: &Tensor<T>, cols: &[usize], width: usize) -> Tensor<T> {
    let (r, c) = (m.shape()[0], m.shape()[1]);
    let mut out = Vec::with_capacity(r * cols.len() * width);
    for i in 0..r {
        for &blk in cols {
            out.extend_from_slice(&m.data()[i * c + blk * width..i * c + (blk + 1) * width]);
        }
    }
    Tensor::new(vec![r, cols.len() * width], out).expect("shape matches data")
}

fn take_blocks<T: Real>(v: &Tensor<T>, blocks: &[usize], width: usize) -> Tensor<T> {
    let out: Vec<T> = blocks.iter().flat_map(|&b| v.data()[b * width..(b + 1) * width].iter().copied()).collect();
    Tensor::new(vec![blocks.len() * width], out).expect("shape matches data")
}

fn take_rows<T: Real>(m: &Tensor<T>, rows: &[usize], width: usize) -> Tensor<T> {
    let c = m.shape()[1];
    let out: Vec<T> =
        rows.iter().flat_map(|&b| m.data()[b * width * c..(b + 1) * width * c].iter().copied()).collect();
    Tensor::new(vec![rows.len() * width, c], out).expect("shape matches data")
}

/// Physically removes pruned heads. A layer left with no heads keeps only
/// the output-projection bias in its attention sublayer.
pub fn compact<T: Real>(weights: &EncoderWeights<T>, gates: &GateAssignment) -> Result<EncoderWeights<T>> {
    gates.validate()?;
    if !gates.is_discrete() {
        return Err(Error::Input("compaction needs discrete gates".into()));
    }
    let c = &weights.config;
    if gates.layers() != c.layers || gates.heads() != c.heads {
        return Err(Error::Input("gate matrix does not match the encoder".into()));
    }
    if weights.heads_per_layer().iter().any(|&h| h != c.heads) {
        return Err(Error::Input("encoder is already compacted".into()));
    }
    let dh = c.d_head();
    let mut out = weights.clone();
    for (l, layer) in out.layers.iter_mut().enumerate() {
        let keep = gates.kept_heads(l);
        if keep.is_empty() {
            log::warn!("layer {l} keeps no attention heads");
        }
        layer.wq = take_cols(&layer.wq, &keep, dh);
        layer.wk = take_cols(&layer.wk, &keep, dh);
        layer.wv = take_cols(&layer.wv, &keep, dh);
        layer.bq = take_blocks(&layer.bq, &keep, dh);
        layer.bk = take_blocks(&layer.bk, &keep, dh);
        layer.bv = take_blocks(&layer.bv, &keep, dh);
        layer.wo = take_rows(&layer.wo, &keep, dh);
    }
    Ok(out)
}

/// Analytic multiply-add counts for one sequence.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopCount {
    pub attention: f64,
    pub feed_forward: f64,
}

impl FlopCount {
    pub fn total(&self) -> f64 {
        self.attention + self.feed_forward
    }
}

/// Kept heads per layer come from `gates` (rounded at 0.5); the attention
/// term is linear in the kept count.
pub fn count_flops(config: &EncoderConfig, gates: &GateAssignment, seq_len: usize) -> FlopCount {
    let (n, d, dh, f) = (seq_len as f64, config.d_model as f64, config.d_head() as f64, config.d_ff as f64);
    let mut attention = 0.0;
    let mut feed_forward = 0.0;
    for l in 0..config.layers {
        let hk = gates.kept_per_layer().get(l).copied().unwrap_or(config.heads) as f64;
        attention += 3.0 * n * d * hk * dh + 2.0 * hk * n * n * dh + n * hk * dh * d;
        feed_forward += 2.0 * n * d * f;
    }
    FlopCount { attention, feed_forward }
}
