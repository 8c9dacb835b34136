//! Helpers shared by the integration tests.
#![allow(dead_code)]

use deepc_core::hankel::DataBlocks;
use deepc_core::lti_sim::{generate_pe_input, simulate, LtiModel, NoiseSpec};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn normal_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

/// Random stable, controllable system: `A` is rescaled to a spectral norm in
/// `[0.5, 0.95]` so long simulations stay bounded.
pub fn random_system(rng: &mut ChaCha8Rng, n: usize, m: usize, p: usize) -> LtiModel {
    loop {
        let a = normal_matrix(rng, n, n);
        let norm = a.clone().svd(false, false).singular_values.max();
        let a = a * (rng.gen_range(0.5..0.95) / norm);
        let b = normal_matrix(rng, n, m);
        let c = normal_matrix(rng, p, n);
        let d = if rng.gen_bool(0.5) {
            normal_matrix(rng, p, m)
        } else {
            DMatrix::zeros(p, m)
        };
        let model = LtiModel::new(a, b, c, d).unwrap();
        if model.is_controllable() {
            return model;
        }
    }
}

/// Least-squares residual `‖H g - w‖ / ‖w‖` of `w` against the range of `h`.
pub fn range_residual(h: &DMatrix<f64>, w: &DVector<f64>) -> f64 {
    let svd = h.clone().svd(true, true);
    let tol = 1e-12 * svd.singular_values.max();
    let g = svd.solve(w, tol).unwrap();
    (h * g - w).norm() / w.norm()
}

/// `col(u window, y window)` of a fresh noise-free trajectory, ordered like
/// `DataBlocks::stacked`.
pub fn fresh_window(model: &LtiModel, rng: &mut ChaCha8Rng, np: usize, nf: usize) -> DVector<f64> {
    let len = np + nf;
    let x0 = DVector::from_fn(model.n(), |_, _| rng.sample(StandardNormal));
    let u: Vec<DVector<f64>> = (0..len)
        .map(|_| DVector::from_fn(model.m(), |_, _| rng.gen_range(-1.0..1.0)))
        .collect();
    let traj = simulate(model, &x0, &u, &NoiseSpec::noiseless(0)).unwrap();
    let mut parts: Vec<f64> = Vec::new();
    for v in &traj.inputs {
        parts.extend(v.iter());
    }
    for v in &traj.outputs {
        parts.extend(v.iter());
    }
    DVector::from_vec(parts)
}

/// Benchmark-plant data blocks from one PE experiment.
pub fn benchmark_blocks(t: usize, np: usize, nf: usize, sigma2: f64, seed: u64) -> DataBlocks {
    let model = LtiModel::benchmark();
    let u = generate_pe_input(1, t, np + nf + 2, 1.0, seed).unwrap();
    let spec = NoiseSpec::new(sigma2, sigma2, seed ^ 0x5eed).unwrap();
    let traj = simulate(&model, &DVector::zeros(2), &u, &spec).unwrap();
    deepc_core::hankel::split_past_future(&traj.inputs, &traj.outputs, np, nf).unwrap()
}
