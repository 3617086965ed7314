//! Synthetic inputs shared by the benchmarks.

use lamp_core::probe::{apply_jitter, sample_jitters};
use lamp_core::{MockSurface, ProbeSample, WeightVector};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Seed sample plus `m` jittered samples of a noisy sigmoid in `d` dimensions.
pub fn probe_samples(d: usize, m: usize, delta: f64, seed: u64) -> (WeightVector, Vec<ProbeSample>) {
    let w0 = WeightVector::new(vec![0.5; d]).expect("valid weights");
    let a: Vec<f64> = (0..d).map(|i| if i % 2 == 0 { 1.5 } else { -1.0 }).collect();
    let surface = MockSurface::sigmoid(a, 0.0).with_noise(0.01, seed);
    let observe = |w: &WeightVector, j: u64| surface.mean(w.as_slice()).expect("in range") + surface.noise(j);
    let mut samples = vec![ProbeSample::seed(w0.clone(), observe(&w0, 0))];
    for (j, eps) in sample_jitters(d, delta, m, seed).expect("valid jitter").into_iter().enumerate() {
        let w = apply_jitter(&w0, &eps).expect("same dimension").weights;
        let y = observe(&w, j as u64 + 1);
        samples.push(ProbeSample { index: j + 1, weights: w, probability: y, jitter: Some(eps) });
    }
    (w0, samples)
}

/// Uniform design with a response linear in the first three columns.
pub fn regression(n: usize, p: usize, seed: u64) -> (DMatrix<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DMatrix::from_fn(n, p, |_, _| rng.random_range(0.0..1.0));
    let y = (0..n).map(|i| (0..p.min(3)).map(|j| x[(i, j)]).sum::<f64>() + rng.random_range(-0.1..0.1)).collect();
    (x, y)
}
