//! Fixtures shared by the criterion benches.

use bandrest_core::config::RunConfig;

pub const SAMPLE_RATE: u32 = 44_100;

/// Reduced model that keeps every stage of the default pipeline.
pub fn toy_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.generator.bandwidth_hz = 800.0;
    cfg.generator.feature_dim = 32;
    cfg.generator.depth = 2;
    cfg.generator.causal = true;
    cfg.discriminator.window_sizes = vec![128, 256, 512];
    cfg.discriminator.base_channels = 4;
    cfg.data.clip_seconds = 0.5;
    cfg.trainer.batch_size = 1;
    cfg
}

/// Deterministic harmonic signal of `seconds` length.
pub fn signal(seconds: f64) -> Vec<f64> {
    let n = (seconds * SAMPLE_RATE as f64) as usize;
    (0..n)
        .map(|i| {
            let t = i as f64 / SAMPLE_RATE as f64;
            (1..20)
                .map(|k| (std::f64::consts::TAU * 110.0 * k as f64 * t).sin() / k as f64)
                .sum::<f64>()
                * 0.2
        })
        .collect()
}
