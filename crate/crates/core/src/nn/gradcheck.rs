//! Central-finite-difference verification of analytic gradients. Runs in
//! f64; callers instantiate their graphs at that precision.

use std::collections::HashMap;

use crate::error::{Error, Result};

use super::graph::{Graph, NodeId};
use super::params::{ParamId, ParamSet};

/// Compare analytic gradients against (f(θ+ε)−f(θ−ε))/2ε for every element
/// of the listed parameters. `f` rebuilds the scalar loss graph for the
/// given parameter values. Returns the max relative error, where the
/// denominator is floored at 1e-3 so near-zero gradients are compared
/// absolutely.
pub fn grad_check<F>(
    params: &ParamSet<f64>,
    ids: &[ParamId],
    eps: f64,
    mut f: F,
) -> Result<f64>
where
    F: FnMut(&ParamSet<f64>) -> Result<(Graph<f64>, NodeId)>,
{
    let (mut graph, loss) = f(params)?;
    if !graph.scalar(loss).is_finite() {
        return Err(Error::Numerical("grad_check: loss not finite".into()));
    }
    graph.backward(loss)?;
    let mut analytic: HashMap<ParamId, Vec<f64>> = HashMap::new();
    for (pid, g) in graph.param_grads() {
        let entry = analytic
            .entry(pid)
            .or_insert_with(|| vec![0.0; g.len()]);
        for (a, v) in entry.iter_mut().zip(g.iter()) {
            *a += v;
        }
    }

    let mut work = params.clone();
    let mut max_rel: f64 = 0.0;
    for &id in ids {
        let n = params.get(id).len();
        for i in 0..n {
            let orig = work.get(id).values[i];
            work.get_mut(id).values[i] = orig + eps;
            let (gp, lp) = f(&work)?;
            let fplus = gp.scalar(lp);
            work.get_mut(id).values[i] = orig - eps;
            let (gm, lm) = f(&work)?;
            let fminus = gm.scalar(lm);
            work.get_mut(id).values[i] = orig;
            if !fplus.is_finite() || !fminus.is_finite() {
                return Err(Error::Numerical(
                    "grad_check: perturbed loss not finite".into(),
                ));
            }
            let numeric = (fplus - fminus) / (2.0 * eps);
            let a = analytic.get(&id).map(|v| v[i]).unwrap_or(0.0);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::Init;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_matches_to_1e8() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps: ParamSet<f64> = ParamSet::new();
        let theta = ps.add("theta", 1, 1, Init::Zeros, &mut rng, true);
        ps.get_mut(theta).values[0] = 3.0;
        // f(θ) = θ² via mse against 0 scaled by n=1: mse_const gives (θ-0)²
        let err = grad_check(&ps, &[theta], 1e-4, |p| {
            let mut g = Graph::new();
            let t = g.param(p, theta);
            let loss = g.mse_const(t, &[0.0])?;
            Ok((g, loss))
        })
        .unwrap();
        assert!(err <= 1e-8, "rel err {err}");
    }
}
