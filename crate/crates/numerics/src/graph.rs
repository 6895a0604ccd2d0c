//! Named-input evaluation, gradients and finite-difference checking on top
//! of the tape.
//!
//! A graph is described by a builder closure that records operations on a
//! fresh tape given the bound inputs; re-running the builder re-evaluates
//! the graph, which is what the finite-difference checker does.

use std::collections::BTreeMap;

use crate::error::{NumericsError, Result};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub type Bindings<T> = BTreeMap<String, Tensor<T>>;
pub type Inputs = BTreeMap<String, Var>;

/// Output of [`evaluate`]: the tape with all intermediates cached.
pub struct Evaluation<T: Real> {
    pub tape: Tape<T>,
    pub root: Var,
    pub inputs: Inputs,
}

/// Gradients by input name. Names bound but unreachable from the root are
/// reported as zero tensors and listed in `disconnected`.
#[derive(Debug)]
pub struct GradientSet<T> {
    pub grads: BTreeMap<String, Tensor<T>>,
    pub disconnected: Vec<String>,
}

pub fn evaluate<T, F>(build: F, bindings: &Bindings<T>, checked: bool) -> Result<Evaluation<T>>
where
    T: Real,
    F: Fn(&mut Tape<T>, &Inputs) -> Result<Var>,
{
    let mut tape = Tape::with_checked(checked);
    let inputs: Inputs = bindings
        .iter()
        .map(|(name, t)| (name.clone(), tape.param(t.clone())))
        .collect();
    let root = build(&mut tape, &inputs)?;
    Ok(Evaluation { tape, root, inputs })
}

impl<T: Real> Evaluation<T> {
    pub fn output(&self) -> &Tensor<T> {
        self.tape.value(self.root)
    }

    pub fn gradient(&self, wrt: &[&str]) -> Result<GradientSet<T>> {
        let all = self.tape.backward(self.root)?;
        let mut grads = BTreeMap::new();
        let mut disconnected = Vec::new();
        for &name in wrt {
            let v = *self
                .inputs
                .get(name)
                .ok_or_else(|| NumericsError::UnknownInput(name.to_string()))?;
            match all.get(v) {
                Some(g) => {
                    grads.insert(name.to_string(), g.clone());
                }
                None => {
                    grads.insert(name.to_string(), Tensor::zeros(self.tape.shape(v)));
                    disconnected.push(name.to_string());
                }
            }
        }
        Ok(GradientSet { grads, disconnected })
    }
}

/// Relative error between two derivative estimates, guarded for tiny values.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// Largest relative error between the reverse-mode gradient of the (scalar)
/// graph output w.r.t. `param` and central differences with `step`.
pub fn finite_diff_check<T, F>(build: F, bindings: &Bindings<T>, param: &str, step: f64) -> Result<f64>
where
    T: Real,
    F: Fn(&mut Tape<T>, &Inputs) -> Result<Var>,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(NumericsError::InvalidArgument {
            op: "finite_diff_check",
            reason: format!("step must be positive, got {step}"),
        });
    }
    let eval = evaluate(&build, bindings, true)?;
    let grad = eval.gradient(&[param])?.grads.remove(param).unwrap();
    let base = bindings[param].clone();
    let mut worst = 0.0f64;
    let mut probe = bindings.clone();
    let mut values = base.to_vec();
    for i in 0..base.len() {
        let orig = values[i];
        values[i] = orig + T::c(step);
        probe.insert(param.to_string(), Tensor::new(base.shape().to_vec(), values.clone())?);
        let up = evaluate(&build, &probe, true)?.output().item().to_f64_lossy();
        values[i] = orig - T::c(step);
        probe.insert(param.to_string(), Tensor::new(base.shape().to_vec(), values.clone())?);
        let down = evaluate(&build, &probe, true)?.output().item().to_f64_lossy();
        values[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        worst = worst.max(relative_error(grad.data()[i].to_f64_lossy(), numeric));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bind(pairs: &[(&str, Tensor<f64>)]) -> Bindings<f64> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    #[test]
    fn square_derivative_at_three() {
        let b = bind(&[("x", Tensor::scalar(3.0))]);
        let eval = evaluate(|t, i| t.mul(i["x"], i["x"]), &b, true).unwrap();
        assert_eq!(eval.output().item(), 9.0);
        let g = eval.gradient(&["x"]).unwrap();
        assert_eq!(g.grads["x"].item(), 6.0);
    }

    #[test]
    fn linear_graph_check_is_tight() {
        let b = bind(&[("x", Tensor::from(vec![0.3, -1.2, 2.0]))]);
        let err = finite_diff_check(
            |t, i| {
                let y = t.scale(i["x"], 2.0)?;
                t.sum_all(y)
            },
            &b,
            "x",
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn unused_input_is_flagged() {
        let b = bind(&[("x", Tensor::scalar(1.0)), ("unused", Tensor::from(vec![1.0, 2.0]))]);
        let eval = evaluate(|t, i| t.exp(i["x"]), &b, true).unwrap();
        let g = eval.gradient(&["x", "unused"]).unwrap();
        assert_eq!(g.disconnected, vec!["unused".to_string()]);
        assert_eq!(g.grads["unused"].to_vec(), vec![0.0, 0.0]);
        assert!(matches!(eval.gradient(&["nope"]), Err(NumericsError::UnknownInput(_))));
    }

    #[test]
    fn zero_weights_report_zero_error() {
        // relu(w·x) with w = 0 sits on the kink: both estimates vanish
        let b = bind(&[("w", Tensor::zeros(&[2, 2])), ("x", Tensor::from_f64(&[2, 1], &[1.0, 2.0]).unwrap())]);
        let err = finite_diff_check(
            |t, i| {
                let y = t.matmul(i["w"], i["x"])?;
                let y = t.mul(y, y)?;
                t.sum_all(y)
            },
            &b,
            "w",
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn rejects_bad_step() {
        let b = bind(&[("x", Tensor::scalar(1.0))]);
        assert!(finite_diff_check(|t, i| t.exp(i["x"]), &b, "x", 0.0).is_err());
    }
}
