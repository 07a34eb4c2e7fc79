//! Finite differences, brute-force helpers and seeded generators.

use ldct_core::autograd::{Graph, Var};
use ldct_core::params::{ParamId, ParamSet};
use ldct_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOL: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let len = shape.iter().product();
    Tensor::from_vec(shape, (0..len).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

pub fn vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Central differences of `f` at `x`.
pub fn numeric_grad(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + FD_STEP;
            let up = f(&p);
            p[i] = x[i] - FD_STEP;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Compares the tape's gradient of `build` against central differences at
/// the `(parameter, element)` entries in `probe`. Returns the relative error.
pub fn graph_fd_error(
    params: &ParamSet,
    probe: &[(ParamId, usize)],
    build: impl Fn(&mut Graph, &[Var]) -> Var,
) -> f64 {
    let mut g = Graph::new();
    let vars = params.bind(&mut g, true);
    let loss = build(&mut g, &vars);
    let grads = g.backward(loss).unwrap();
    let analytic: Vec<f64> = probe
        .iter()
        .map(|&(id, i)| grads.get(vars[id.0]).map_or(0.0, |t| t.data()[i]))
        .collect();
    let eval = |p: &ParamSet| {
        let mut g = Graph::new();
        let vars = p.bind(&mut g, false);
        let loss = build(&mut g, &vars);
        g.value(loss).data()[0]
    };
    let numeric: Vec<f64> = probe
        .iter()
        .map(|&(id, i)| {
            let mut p = params.clone();
            p.get_mut(id).data_mut()[i] += FD_STEP;
            let up = eval(&p);
            p.get_mut(id).data_mut()[i] -= 2.0 * FD_STEP;
            let down = eval(&p);
            (up - down) / (2.0 * FD_STEP)
        })
        .collect();
    relative_error(&analytic, &numeric)
}

/// Every element of every parameter.
pub fn all_entries(params: &ParamSet) -> Vec<(ParamId, usize)> {
    params
        .ids()
        .flat_map(|id| (0..params.get(id).len()).map(move |i| (id, i)))
        .collect()
}

/// Every `k`-th element when a set is too large to probe exhaustively.
pub fn strided_entries(params: &ParamSet, k: usize) -> Vec<(ParamId, usize)> {
    all_entries(params).into_iter().step_by(k.max(1)).collect()
}

/// `count` distinct random entries.
pub fn random_entries(
    params: &ParamSet,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<(ParamId, usize)> {
    let all = all_entries(params);
    rand::seq::index::sample(rng, all.len(), count)
        .into_iter()
        .map(|i| all[i])
        .collect()
}

/// Cosine similarity straight from the definition.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}
