//! Relative-distance-distribution objective.
//!
//! For anchor `n`, `r^n_i = exp(Dist(h_n, h_i)) / Σ_j exp(Dist(h_n, h_j))`
//! with cosine distance and the self-term included. The loss sums
//! `KL(r^n ‖ r̂^n)` over anchors, with `r` from the full model treated as a
//! constant.

use smp_numerics::{Real, Tape, Tensor, Var};

use crate::error::{Error, Result};

pub const NORM_EPS: f64 = 1e-12;
pub const KL_EPS: f64 = 1e-12;

pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Input("cosine distance of vectors with different lengths".into()));
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na <= NORM_EPS || nb <= NORM_EPS {
        return Err(Error::Input("cosine distance of a near-zero vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok(1.0 - dot / (na * nb))
}

/// Row `n` is the distribution for anchor `n`.
pub fn relative_distance_distribution(reps: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    if reps.len() < 2 {
        return Err(Error::Input("relative distances need at least two instances".into()));
    }
    reps.iter()
        .map(|hn| {
            let dist = reps.iter().map(|hi| cosine_distance(hn, hi)).collect::<Result<Vec<f64>>>()?;
            let max = dist.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = dist.iter().map(|d| (d - max).exp()).collect();
            let z: f64 = e.iter().sum();
            Ok(e.into_iter().map(|v| v / z).collect())
        })
        .collect()
}

/// `Σ r_i ln(r_i / max(r̂_i, ε))`; terms with `r_i = 0` contribute 0.
pub fn kl_divergence(r: &[f64], r_hat: &[f64]) -> f64 {
    r.iter()
        .zip(r_hat)
        .filter(|(&p, _)| p > 0.0)
        .map(|(&p, &q)| p * (p / q.max(KL_EPS)).ln())
        .sum()
}

pub fn smp_loss(full: &[Vec<f64>], pruned: &[Vec<f64>]) -> Result<f64> {
    if full.len() != pruned.len() {
        return Err(Error::Input("full and pruned batches differ in size".into()));
    }
    let r = relative_distance_distribution(full)?;
    let r_hat = relative_distance_distribution(pruned)?;
    Ok(r.iter().zip(&r_hat).map(|(p, q)| kl_divergence(p, q)).sum())
}

// ---- differentiable form ----------------------------------------------------------

fn check_norms<T: Real>(x: &Tensor<T>) -> Result<()> {
    let d = x.shape()[1];
    for row in x.data().chunks(d.max(1)) {
        let n = row.iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>().sqrt();
        if n <= NORM_EPS {
            return Err(Error::Input("cosine distance of a near-zero vector".into()));
        }
    }
    Ok(())
}

/// `ln r` for `[N, d]` representations, row per anchor.
pub fn log_distance_distribution<T: Real>(tape: &mut Tape<T>, reps: Var) -> Result<Var> {
    let shape = tape.shape(reps).to_vec();
    if shape.len() != 2 || shape[0] < 2 {
        return Err(Error::Input("relative distances need an [N ≥ 2, d] batch".into()));
    }
    check_norms(tape.value(reps))?;
    let sq = tape.mul(reps, reps)?;
    let ss = tape.sum_axis(sq, 1)?;
    let norms = tape.sqrt(ss)?;
    let unit = tape.div(reps, norms)?;
    let cos = tape.matmul_t(unit, unit, false, true)?;
    let dist = tape.one_minus(cos)?;
    Ok(tape.log_softmax(dist)?)
}

/// Loss on `tape` with gradient flowing into `pruned` only. The target
/// distribution is computed through the same operations on a private tape,
/// so identical representations give exactly zero.
pub fn smp_loss_tape<T: Real>(tape: &mut Tape<T>, full: &Tensor<T>, pruned: Var) -> Result<Var> {
    if full.shape() != tape.shape(pruned) {
        return Err(Error::Input("full and pruned batches differ in shape".into()));
    }
    let mut aux = Tape::with_checked(tape.is_checked());
    let fv = aux.constant(full.clone());
    let lr = log_distance_distribution(&mut aux, fv)?;
    let log_r = aux.value(lr).clone();
    let r = log_r.map(|v| v.exp());

    let log_r_hat = log_distance_distribution(tape, pruned)?;
    let log_r = tape.constant(log_r);
    let r = tape.constant(r);
    let diff = tape.sub(log_r, log_r_hat)?;
    let weighted = tape.mul(r, diff)?;
    Ok(tape.sum_all(weighted)?)
}

pub fn rows_to_tensor<T: Real>(rows: &[Vec<f64>]) -> Result<Tensor<T>> {
    let d = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || rows.iter().any(|r| r.len() != d) {
        return Err(Error::Input("representation rows must be non-empty and equally long".into()));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(Tensor::from_f64(&[rows.len(), d], &flat)?)
}
