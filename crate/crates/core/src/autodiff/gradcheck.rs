//! Central finite-difference gradient checking.
//!
//! The numerical side only ever evaluates the forward pass on constant
//! inputs, so it does not share code with any backward rule.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::ParamStore;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Gradients whose magnitude is below this are compared in absolute terms.
pub const MAGNITUDE_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub max_rel_err: f64,
    /// (input index, flat coordinate) of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR)
}

/// Compares the tape gradient of the scalar `f(inputs)` against central
/// differences with the given `step`.
pub fn check_gradients<F>(inputs: &[Tensor], step: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed.iter().map(|x| t.constant(x.clone())).collect();
        let o = f(&mut t, &vs)?;
        Ok(t.scalar(o))
    };

    let mut report = GradCheck {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let zeros = vec![0.0; inputs[i].numel()];
        let analytic = grads.get(*v).unwrap_or(&zeros).to_vec();
        for (j, &a) in analytic.iter().enumerate() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - step;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(a, numeric);
            if err > report.max_rel_err || err.is_nan() {
                report = GradCheck {
                    max_rel_err: err,
                    worst: (i, j),
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(report)
}

/// Like [`check_gradients`] but differentiates with respect to every scalar
/// in `store`. `f` reads parameters through [`Tape::param`].
pub fn check_param_gradients<F>(store: &ParamStore, step: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut analytic_store = store.clone();
    analytic_store.zero_grad();
    let mut tape = Tape::new();
    let out = f(&mut tape, &analytic_store)?;
    tape.backward_into(out, &mut analytic_store)?;

    let mut report = GradCheck {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut work = store.clone();
    let ids: Vec<_> = store.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let n = store.get(id).numel();
        let zeros = vec![0.0; n];
        let analytic = analytic_store.get(id).grad().unwrap_or(&zeros).to_vec();
        for (j, &a) in analytic.iter().enumerate() {
            let orig = store.get(id).data()[j];
            let mut eval = |x: f64| -> Result<f64> {
                work.get_mut(id).data_mut()[j] = x;
                let mut t = Tape::new();
                let o = f(&mut t, &work)?;
                Ok(t.scalar(o))
            };
            let plus = eval(orig + step)?;
            let minus = eval(orig - step)?;
            work.get_mut(id).data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(a, numeric);
            if err > report.max_rel_err || err.is_nan() {
                report = GradCheck {
                    max_rel_err: err,
                    worst: (i, j),
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(report)
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .expect("valid shape")
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(0.2..2.0)).collect(),
    )
    .expect("valid shape")
}

/// Runs every recorded op through [`check_gradients`] on inputs drawn
/// from `seed`.
pub fn op_suite(seed: u64) -> Result<Vec<(&'static str, GradCheck)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut run = |name: &'static str,
                   inputs: Vec<Tensor>,
                   f: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>|
     -> Result<()> {
        out.push((name, check_gradients(&inputs, 1e-5, |t, v| f(t, v))?));
        Ok(())
    };
    let a = random(&mut rng, &[3, 4]);
    let b = random(&mut rng, &[3, 4]);
    let w = random(&mut rng, &[3, 4]);
    let s = random(&mut rng, &[]);
    let p = positive(&mut rng, &[3, 4]);
    let m = random(&mut rng, &[4, 2]);
    // Weighted sum so every output coordinate gets a distinct cotangent.
    let weigh = |t: &mut Tape, x: Var, w: Var| -> Result<Var> {
        let y = t.mul(x, w)?;
        Ok(t.sum(y))
    };
    run("add", vec![a.clone(), b.clone(), w.clone()], &|t, v| {
        let y = t.add(v[0], v[1])?;
        weigh(t, y, v[2])
    })?;
    run(
        "add_scalar",
        vec![a.clone(), s.clone(), w.clone()],
        &|t, v| {
            let y = t.add(v[0], v[1])?;
            weigh(t, y, v[2])
        },
    )?;
    run("sub", vec![a.clone(), b.clone(), w.clone()], &|t, v| {
        let y = t.sub(v[0], v[1])?;
        weigh(t, y, v[2])
    })?;
    run("mul", vec![a.clone(), b.clone(), w.clone()], &|t, v| {
        let y = t.mul(v[0], v[1])?;
        weigh(t, y, v[2])
    })?;
    run(
        "mul_scalar",
        vec![s.clone(), b.clone(), w.clone()],
        &|t, v| {
            let y = t.mul(v[0], v[1])?;
            weigh(t, y, v[2])
        },
    )?;
    run("div", vec![a.clone(), p.clone(), w.clone()], &|t, v| {
        let y = t.div(v[0], v[1])?;
        weigh(t, y, v[2])
    })?;
    run("affine", vec![a.clone(), w.clone()], &|t, v| {
        let y = t.affine(v[0], -1.7, 0.3);
        weigh(t, y, v[1])
    })?;
    run("exp", vec![a.clone(), w.clone()], &|t, v| {
        let y = t.exp(v[0]);
        weigh(t, y, v[1])
    })?;
    run("log", vec![p.clone(), w.clone()], &|t, v| {
        let y = t.log(v[0])?;
        weigh(t, y, v[1])
    })?;
    run("tanh", vec![a.clone(), w.clone()], &|t, v| {
        let y = t.tanh(v[0]);
        weigh(t, y, v[1])
    })?;
    run("sigmoid", vec![a.clone(), w.clone()], &|t, v| {
        let y = t.sigmoid(v[0]);
        weigh(t, y, v[1])
    })?;
    run("softplus", vec![a.clone(), w.clone()], &|t, v| {
        let y = t.softplus(v[0]);
        weigh(t, y, v[1])
    })?;
    run("matmul", vec![a.clone(), m.clone()], &|t, v| {
        let y = t.matmul(v[0], v[1])?;
        let y = t.tanh(y);
        Ok(t.sum(y))
    })?;
    run(
        "transpose",
        vec![a.clone(), random(&mut rng, &[4, 3])],
        &|t, v| {
            let y = t.transpose(v[0])?;
            weigh(t, y, v[1])
        },
    )?;
    run(
        "reshape",
        vec![a.clone(), random(&mut rng, &[2, 6])],
        &|t, v| {
            let y = t.reshape(v[0], &[2, 6])?;
            weigh(t, y, v[1])
        },
    )?;
    run("softmax_axis1", vec![a.clone(), w.clone()], &|t, v| {
        let y = t.softmax(v[0], 1)?;
        weigh(t, y, v[1])
    })?;
    run("softmax_axis0", vec![a.clone(), w.clone()], &|t, v| {
        let y = t.softmax(v[0], 0)?;
        weigh(t, y, v[1])
    })?;
    run("log_softmax", vec![a.clone(), w.clone()], &|t, v| {
        let y = t.log_softmax(v[0], 1)?;
        weigh(t, y, v[1])
    })?;
    run(
        "logsumexp",
        vec![a.clone(), random(&mut rng, &[4])],
        &|t, v| {
            let y = t.logsumexp(v[0], 0)?;
            weigh(t, y, v[1])
        },
    )?;
    run(
        "sum_axis",
        vec![a.clone(), random(&mut rng, &[3])],
        &|t, v| {
            let y = t.sum_axis(v[0], 1)?;
            weigh(t, y, v[1])
        },
    )?;
    run("mean", vec![a.clone()], &|t, v| {
        let y = t.exp(v[0]);
        Ok(t.mean(y))
    })?;
    run(
        "concat",
        vec![a.clone(), b.clone(), random(&mut rng, &[3, 8])],
        &|t, v| {
            let y = t.concat(&[v[0], v[1]], 1)?;
            weigh(t, y, v[2])
        },
    )?;
    run(
        "slice",
        vec![a.clone(), random(&mut rng, &[3, 2])],
        &|t, v| {
            let y = t.slice(v[0], 1, 1, 2)?;
            weigh(t, y, v[1])
        },
    )?;
    run(
        "cosine",
        vec![random(&mut rng, &[5]), random(&mut rng, &[5])],
        &|t, v| {
            let c = t.cosine_similarity(v[0], v[1])?;
            Ok(t.exp(c))
        },
    )?;
    run("normalize_rows", vec![a.clone(), w.clone()], &|t, v| {
        let y = t.normalize_rows(v[0]);
        weigh(t, y, v[1])
    })?;
    Ok(out)
}
