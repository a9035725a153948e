//! Central finite-difference verification of tape gradients (64-bit).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Graph, ParamStore, Tensor, Var};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub checks: usize,
}

const MIN_COSINE: f64 = 1e-3;
const MAX_REDRAWS: usize = 16;

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn eval<F>(store: &ParamStore<f64>, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>) -> Result<Var>,
{
    let mut g = Graph::new(store, true);
    let out = f(&mut g)?;
    Ok(g.value(out).item())
}

/// For every parameter and `probes` random directions, compares the analytic
/// directional derivative against `(f(θ+h·d) − f(θ−h·d)) / 2h`.
///
/// `f` must build a scalar and be deterministic (fixed dropout seeds etc.).
pub fn check_gradients<F>(
    store: &mut ParamStore<f64>,
    f: F,
    h: f64,
    probes: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>) -> Result<Var>,
{
    let grads = {
        let mut g = Graph::new(store, true);
        let out = f(&mut g)?;
        g.backward(out)?
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        checks: 0,
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.value(id).shape().to_vec();
        let zero = Tensor::zeros(&shape);
        let analytic_grad = grads.param(id).cloned().unwrap_or(zero);
        let grad_norm = dot(&analytic_grad, &analytic_grad).sqrt();
        for _ in 0..probes {
            // A direction almost orthogonal to the gradient has a derivative
            // far below the difference quotient's rounding noise; redraw it.
            let mut dir: Tensor<f64> = Tensor::from_fn(&shape, |_| StandardNormal.sample(&mut rng));
            let mut analytic = dot(&analytic_grad, &dir);
            for _ in 0..MAX_REDRAWS {
                if analytic.abs() >= MIN_COSINE * grad_norm * dot(&dir, &dir).sqrt() {
                    break;
                }
                dir = Tensor::from_fn(&shape, |_| StandardNormal.sample(&mut rng));
                analytic = dot(&analytic_grad, &dir);
            }
            let original = store.value(id).clone();
            let shifted = |sign: f64| {
                let mut t = original.clone();
                for (v, d) in t.data_mut().iter_mut().zip(dir.data()) {
                    *v += sign * h * d;
                }
                t
            };
            store.get_mut(id).value = shifted(1.0);
            let plus = eval(store, &f)?;
            store.get_mut(id).value = shifted(-1.0);
            let minus = eval(store, &f)?;
            store.get_mut(id).value = original;
            let numeric = (plus - minus) / (2.0 * h);
            // Smallest slope the difference quotient can resolve at this loss
            // magnitude; anything below it is indistinguishable from zero
            // (e.g. a key bias, to which softmax attention is invariant).
            let resolution = 64.0 * f64::EPSILON * plus.abs().max(minus.abs()).max(1.0) / h;
            let scale = analytic.abs().max(numeric.abs());
            let rel = if scale <= resolution {
                0.0
            } else {
                (analytic - numeric).abs() / scale.max(1e-7)
            };
            report.checks += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = store.get(id).name.clone();
            }
        }
    }
    Ok(report)
}
