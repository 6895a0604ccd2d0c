//! Plain and momentum SGD over lists of tensors.

use smp_numerics::{Real, Tensor};

/// Heavy-ball SGD: `v ← μ·v + g`, `θ ← θ − lr·v`. With `momentum = 0`
/// this is plain SGD.
#[derive(Clone, Debug)]
pub struct Sgd<T: Real> {
    pub momentum: f64,
    /// Rescales the joint gradient to at most this L2 norm when set.
    pub clip_norm: Option<f64>,
    velocity: Vec<Vec<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(momentum: f64, clip_norm: Option<f64>) -> Self {
        Sgd { momentum, clip_norm, velocity: Vec::new() }
    }

    /// Parameters without a gradient are left untouched.
    pub fn step(&mut self, params: Vec<&mut Tensor<T>>, grads: &[Option<Tensor<T>>], lr: f64) {
        assert_eq!(params.len(), grads.len(), "one gradient slot per parameter");
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
        }
        let scale = match self.clip_norm {
            Some(c) => {
                let norm = global_norm(grads);
                if norm > c {
                    c / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let (mu, lr, scale) = (T::c(self.momentum), T::c(lr), T::c(scale));
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            let Some(g) = g else { continue };
            let data = p.data_mut();
            for ((x, &gi), vi) in data.iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *vi = mu * *vi + scale * gi;
                *x -= lr * *vi;
            }
        }
    }
}

pub fn global_norm<T: Real>(grads: &[Option<Tensor<T>>]) -> f64 {
    grads
        .iter()
        .flatten()
        .flat_map(|g| g.data().iter().map(|v| v.to_f64_lossy().powi(2)))
        .sum::<f64>()
        .sqrt()
}

/// Element-wise `acc += g`, allocating on first use.
pub fn accumulate<T: Real>(acc: &mut [Option<Tensor<T>>], grads: &[Option<Tensor<T>>]) {
    for (a, g) in acc.iter_mut().zip(grads) {
        let Some(g) = g else { continue };
        match a {
            Some(t) => {
                for (x, &y) in t.data_mut().iter_mut().zip(g.data()) {
                    *x += y;
                }
            }
            None => *a = Some(g.clone()),
        }
    }
}
