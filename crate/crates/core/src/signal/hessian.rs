use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::numeric::{forward_backward, Batch, FlatVector, ModelSpec, ParamVector};
use crate::{Error, Result};

/// Step used for central-difference Hessian-vector products.
pub const HVP_EPS: f64 = 1e-4;

const START_SEED: u64 = 0x5eed_0f_4e55;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Power iteration on `H v ≈ (∇f(w + εv) - ∇f(w - εv)) / 2ε`.
///
/// Returns the Rayleigh quotient of the dominant eigenvector. Stops once two
/// successive estimates differ by less than `tol`, or after `iters` rounds.
pub fn power_iteration<G>(point: &[f64], mut grad: G, iters: usize, tol: f64) -> Result<f64>
where
    G: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if iters == 0 || !(tol > 0.0) {
        return Err(Error::config("power iteration needs iters > 0 and tol > 0"));
    }
    if point.is_empty() {
        return Err(Error::config("power iteration needs a non-empty point"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(START_SEED);
    let mut v: Vec<f64> = (0..point.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let norm = dot(&v, &v).sqrt();
    v.iter_mut().for_each(|x| *x /= norm);

    let mut probe = point.to_vec();
    let mut estimate: Option<f64> = None;
    for _ in 0..iters {
        for ((p, w), dv) in probe.iter_mut().zip(point).zip(&v) {
            *p = w + HVP_EPS * dv;
        }
        let up = grad(&probe)?;
        for ((p, w), dv) in probe.iter_mut().zip(point).zip(&v) {
            *p = w - HVP_EPS * dv;
        }
        let down = grad(&probe)?;
        let hv: Vec<f64> = up.iter().zip(&down).map(|(a, b)| (a - b) / (2.0 * HVP_EPS)).collect();
        let rayleigh = dot(&v, &hv);
        let hv_norm = dot(&hv, &hv).sqrt();
        if !rayleigh.is_finite() || !hv_norm.is_finite() {
            return Err(Error::Signal("non-finite Hessian-vector product".into()));
        }
        if hv_norm == 0.0 {
            return Ok(0.0);
        }
        let converged = estimate.is_some_and(|prev| (rayleigh - prev).abs() < tol);
        estimate = Some(rayleigh);
        if converged {
            break;
        }
        v = hv.into_iter().map(|x| x / hv_norm).collect();
    }
    Ok(estimate.expect("at least one iteration ran"))
}

/// Largest-magnitude Hessian eigenvalue of the mean batch loss at `params`.
pub fn hessian_top_eigenvalue(
    params: &ParamVector,
    batch: &Batch,
    spec: &ModelSpec,
    iters: usize,
    tol: f64,
) -> Result<f64> {
    let layout = params.layout().clone();
    power_iteration(
        params.values(),
        |w| {
            let probe = ParamVector::new(w.to_vec(), layout.clone())?;
            let (_, g) = forward_backward(&probe, batch, spec)?;
            Ok(g.into_values())
        },
        iters,
        tol,
    )
}
