#![allow(dead_code)]

use bandrest_core::nn::{Array, Tape, Var};
use ndarray::IxDyn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array {
    Array::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
}

pub fn noise(n: usize, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
}

/// Worst relative error between tape gradients and central differences.
///
/// The scalar objective is `sum(f(inputs) * proj)` with a fixed random
/// projection so every output element contributes.
pub fn grad_check<F>(inputs: &[Array], seed: u64, f: F) -> f64
where
    F: for<'t> Fn(&[Var<'t>]) -> Var<'t>,
{
    const STEP: f64 = 1e-5;
    let mut r = rng(seed ^ 0x9e37_79b9);
    let out_shape = {
        let tape = Tape::inference();
        let vars: Vec<Var<'_>> = inputs.iter().map(|a| tape.constant(a.clone())).collect();
        f(&vars).shape()
    };
    let proj = randn(&mut r, &out_shape);
    let objective = |xs: &[Array]| -> f64 {
        let tape = Tape::inference();
        let vars: Vec<Var<'_>> = xs.iter().map(|a| tape.constant(a.clone())).collect();
        let y = f(&vars).value();
        (&*y * &proj).sum()
    };
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|a| tape.leaf(a.clone())).collect();
    let y = f(&vars);
    let loss = y.mul(tape.constant(proj.clone())).unwrap().sum();
    let grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*v);
        let mut numeric = Array::zeros(analytic.raw_dim());
        let mut xs: Vec<Array> = inputs.to_vec();
        for k in 0..xs[i].len() {
            let orig = xs[i].as_slice().unwrap()[k];
            xs[i].as_slice_mut().unwrap()[k] = orig + STEP;
            let up = objective(&xs);
            xs[i].as_slice_mut().unwrap()[k] = orig - STEP;
            let down = objective(&xs);
            xs[i].as_slice_mut().unwrap()[k] = orig;
            numeric.as_slice_mut().unwrap()[k] = (up - down) / (2.0 * STEP);
        }
        let diff = (&analytic - &numeric).mapv(|e| e * e).sum().sqrt();
        let scale = analytic
            .mapv(|e| e * e)
            .sum()
            .sqrt()
            .max(numeric.mapv(|e| e * e).sum().sqrt())
            .max(1e-8);
        worst = worst.max(diff / scale);
    }
    worst
}

/// Small end-to-end configuration that trains in well under a second per step.
pub fn tiny_config() -> bandrest_core::config::RunConfig {
    let mut cfg = bandrest_core::config::RunConfig::default();
    cfg.generator.bandwidth_hz = 800.0;
    cfg.generator.feature_dim = 16;
    cfg.generator.depth = 1;
    cfg.generator.attention.heads = 4;
    cfg.discriminator.window_sizes = vec![128, 256];
    cfg.discriminator.base_channels = 2;
    cfg.data.clip_seconds = 0.25;
    cfg.data.max_stems = 3;
    cfg.trainer.batch_size = 2;
    cfg.trainer.steps_per_epoch = 2;
    cfg.trainer.epochs = 2;
    cfg.trainer.validation_batches = 1;
    cfg.trainer.prefetch = 2;
    cfg
}

/// In-memory library of harmonic-plus-noise stems at 44.1 kHz.
pub fn synthetic_library(stems: usize, seconds: f64) -> bandrest_core::data::StemLibrary {
    use bandrest_core::data::{SadConfig, StemLibrary};
    let sr = 44_100u32;
    let len = (seconds * sr as f64) as usize;
    let mut lib = StemLibrary::new(sr);
    for s in 0..stems {
        let f0 = 110.0 * (s + 2) as f64;
        let n = noise(len, 500 + s as u64);
        let wave: Vec<f64> = (0..len)
            .map(|i| {
                let t = i as f64 / sr as f64;
                let tone: f64 = (1..12)
                    .map(|k| (std::f64::consts::TAU * f0 * k as f64 * t).sin() / k as f64)
                    .sum();
                0.2 * tone + 0.05 * n[i]
            })
            .collect();
        lib.add(format!("track{}", s / 2), format!("stem{s}"), format!("mem{s}.wav").into(), sr, wave, &SadConfig::default())
            .unwrap();
    }
    lib
}
