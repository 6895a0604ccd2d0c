//! Finite-difference self-check of every differentiable primitive on
//! random 64-bit inputs.

use std::sync::Arc;

use crate::error::Result;
use crate::graph::{finite_diff_check, Bindings, Inputs};
use crate::rng::RngStream;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Central-difference step used by the suite.
pub const STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub primitive: &'static str,
    pub param: String,
    /// Largest relative error over all coordinates of `param`.
    pub error: f64,
}

fn normal(rng: &mut RngStream, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).expect("shape matches data")
}

fn positive(rng: &mut RngStream, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform_range(0.5, 2.0)).collect()).expect("shape matches data")
}

/// `sum(w ⊙ y)` with a fixed random `w`, so every output component
/// contributes to the checked gradient.
fn project(t: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = RngStream::new(seed ^ 0xabcd);
    let w = normal(&mut rng, t.shape(y));
    let w = t.constant(w);
    let p = t.mul(y, w)?;
    t.sum_all(p)
}

fn bind(pairs: Vec<(&str, Tensor<f64>)>) -> Bindings<f64> {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

struct Suite {
    out: Vec<CheckResult>,
}

impl Suite {
    fn check<F>(&mut self, primitive: &'static str, bindings: &Bindings<f64>, build: F) -> Result<()>
    where
        F: Fn(&mut Tape<f64>, &Inputs) -> Result<Var>,
    {
        for param in bindings.keys() {
            let error = finite_diff_check(&build, bindings, param, STEP)?;
            self.out.push(CheckResult { primitive, param: param.clone(), error });
        }
        Ok(())
    }
}

/// Runs every primitive's gradient check once with inputs drawn from `seed`.
pub fn primitive_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut s = Suite { out: Vec::new() };
    let mut rng = RngStream::new(seed).fork(0x9c);

    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let sa = if ta { [4, 3] } else { [3, 4] };
        let sb = if tb { [5, 4] } else { [4, 5] };
        let b = bind(vec![("a", normal(&mut rng, &sa)), ("b", normal(&mut rng, &sb))]);
        s.check("matmul", &b, |t, i| {
            let y = t.matmul_t(i["a"], i["b"], ta, tb)?;
            project(t, y, seed)
        })?;
    }
    let b = bind(vec![
        ("a", normal(&mut rng, &[2, 3, 4])),
        ("b", normal(&mut rng, &[4, 2])),
        ("c", normal(&mut rng, &[2, 5, 4])),
    ]);
    s.check("batched matmul", &b, |t, i| {
        let y = t.matmul(i["a"], i["b"])?;
        let z = t.matmul_t(i["a"], i["c"], false, true)?;
        let y = project(t, y, seed)?;
        let z = project(t, z, seed + 1)?;
        t.add(y, z)
    })?;

    let shapes: [(&[usize], &[usize]); 5] =
        [(&[3, 4], &[3, 4]), (&[3, 4], &[4]), (&[3, 4], &[3, 1]), (&[2, 3, 4], &[2, 1, 4]), (&[3, 4], &[1])];
    for (sa, sb) in shapes {
        let b = bind(vec![("a", normal(&mut rng, sa)), ("b", positive(&mut rng, sb))]);
        s.check("add", &b, |t, i| {
            let y = t.add(i["a"], i["b"])?;
            project(t, y, seed)
        })?;
        s.check("sub", &b, |t, i| {
            let y = t.sub(i["b"], i["a"])?;
            project(t, y, seed)
        })?;
        s.check("mul", &b, |t, i| {
            let y = t.mul(i["a"], i["b"])?;
            project(t, y, seed)
        })?;
        s.check("div", &b, |t, i| {
            let y = t.div(i["a"], i["b"])?;
            project(t, y, seed)
        })?;
    }

    let x = bind(vec![("x", normal(&mut rng, &[3, 5]))]);
    let pos = bind(vec![("x", positive(&mut rng, &[3, 5]))]);
    s.check("exp", &x, |t, i| {
        let y = t.exp(i["x"])?;
        project(t, y, seed)
    })?;
    s.check("log", &pos, |t, i| {
        let y = t.log(i["x"])?;
        project(t, y, seed)
    })?;
    s.check("sigmoid", &x, |t, i| {
        let y = t.sigmoid(i["x"])?;
        project(t, y, seed)
    })?;
    s.check("tanh", &x, |t, i| {
        let y = t.tanh(i["x"])?;
        project(t, y, seed)
    })?;
    s.check("relu", &x, |t, i| {
        let y = t.relu(i["x"])?;
        project(t, y, seed)
    })?;
    s.check("sqrt", &pos, |t, i| {
        let y = t.sqrt(i["x"])?;
        project(t, y, seed)
    })?;
    s.check("scale", &x, |t, i| {
        let y = t.scale(i["x"], -1.7)?;
        project(t, y, seed)
    })?;
    s.check("add_scalar", &x, |t, i| {
        let y = t.add_scalar(i["x"], 0.4)?;
        let y = t.mul(y, y)?;
        project(t, y, seed)
    })?;
    s.check("one_minus", &x, |t, i| {
        let y = t.one_minus(i["x"])?;
        let y = t.exp(y)?;
        project(t, y, seed)
    })?;

    let x = bind(vec![("x", normal(&mut rng, &[4, 6]))]);
    s.check("softmax", &x, |t, i| {
        let y = t.softmax(i["x"])?;
        project(t, y, seed)
    })?;
    s.check("log_softmax", &x, |t, i| {
        let y = t.log_softmax(i["x"])?;
        project(t, y, seed)
    })?;
    let ln = bind(vec![
        ("x", normal(&mut rng, &[4, 6])),
        ("g", normal(&mut rng, &[6])),
        ("b", normal(&mut rng, &[6])),
    ]);
    s.check("layer_norm", &ln, |t, i| {
        let y = t.layer_norm(i["x"], i["g"], i["b"], 1e-5)?;
        project(t, y, seed)
    })?;

    for (stride, pad) in [(1, 0), (2, 1), (1, 1)] {
        let b = bind(vec![
            ("x", normal(&mut rng, &[2, 2, 6, 6])),
            ("w", normal(&mut rng, &[3, 2, 3, 3])),
            ("b", normal(&mut rng, &[3])),
        ]);
        s.check("conv2d", &b, |t, i| {
            let y = t.conv2d(i["x"], i["w"], i["b"], stride, pad)?;
            project(t, y, seed)
        })?;
    }

    let x = bind(vec![("x", normal(&mut rng, &[3, 4, 2])), ("y", normal(&mut rng, &[3, 2, 2]))]);
    s.check("sum_all", &x, |t, i| {
        let a = t.sum_all(i["x"])?;
        let b = t.sum_all(i["y"])?;
        let p = t.mul(a, b)?;
        t.mul(p, a)
    })?;
    s.check("mean_all", &x, |t, i| {
        let a = t.mean_all(i["x"])?;
        let b = t.mean_all(i["y"])?;
        let p = t.add(a, b)?;
        t.exp(p)
    })?;
    for axis in 0..3 {
        s.check("sum_axis", &x, |t, i| {
            let a = t.sum_axis(i["x"], axis)?;
            let b = t.sum_axis(i["y"], axis)?;
            let a = project(t, a, seed)?;
            let b = project(t, b, seed + 2)?;
            t.add(a, b)
        })?;
        s.check("mean_axis", &x, |t, i| {
            let a = t.mean_axis(i["x"], axis)?;
            let b = t.mean_axis(i["y"], axis)?;
            let a = project(t, a, seed)?;
            let b = project(t, b, seed + 2)?;
            t.add(a, b)
        })?;
    }
    s.check("concat", &x, |t, i| {
        let y = t.concat(&[i["x"], i["y"], i["x"]], 1)?;
        project(t, y, seed)
    })?;
    s.check("slice", &x, |t, i| {
        let a = t.slice(i["x"], 1, 1, 3)?;
        let b = t.slice(i["y"], 0, 0, 2)?;
        let a = project(t, a, seed)?;
        let b = project(t, b, seed + 3)?;
        t.add(a, b)
    })?;
    s.check("reshape", &x, |t, i| {
        let a = t.reshape(i["x"], &[6, 4])?;
        let a = t.softmax(a)?;
        let b = t.reshape(i["y"], &[12])?;
        let a = project(t, a, seed)?;
        let b = project(t, b, seed + 4)?;
        t.add(a, b)
    })?;
    let mask: Arc<Vec<bool>> = Arc::new((0..24).map(|k| k % 3 == 0).collect());
    let xm = bind(vec![("x", normal(&mut rng, &[3, 4, 2]))]);
    s.check("masked_fill", &xm, |t, i| {
        let y = t.masked_fill(i["x"], Arc::clone(&mask), -1e9)?;
        let y = t.softmax(y)?;
        project(t, y, seed)
    })?;
    let e = bind(vec![("table", normal(&mut rng, &[5, 3]))]);
    s.check("embedding", &e, |t, i| {
        let y = t.embedding(i["table"], &[4, 0, 4, 2])?;
        project(t, y, seed)
    })?;
    Ok(s.out)
}
