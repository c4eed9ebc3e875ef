//! Training objectives: LSGAN, multi-resolution reconstruction, feature matching.

use serde::{Deserialize, Serialize};

use crate::dsp::StftConfig;
use crate::error::{Error, Result};
use crate::nn::{complex_abs, spectral, Var};

/// Guard for the feature-matching and reconstruction denominators.
pub const LOSS_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::arg(format!("loss weight {k} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub rec_windows: Vec<usize>,
    /// Divide each resolution's L1 error by the target's L1 magnitude.
    pub rec_normalized: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            rec_windows: vec![32, 64, 128, 256, 512, 1024, 2048],
            rec_normalized: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.rec_windows.is_empty() {
            return Err(Error::arg("rec_windows must not be empty"));
        }
        for &w in &self.rec_windows {
            if w < 4 || w % 4 != 0 {
                return Err(Error::arg(format!("rec window {w} must be a positive multiple of 4")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_rec: f64,
    pub l_fm: f64,
    pub l_gan: f64,
    pub l_total: f64,
    pub l_disc: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.l_rec, self.l_fm, self.l_gan, self.l_total, self.l_disc]
            .iter()
            .all(|v| v.is_finite())
    }
}

fn check_sizes(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b || a == 0 {
        return Err(Error::shape(format!("{what}: {a} vs {b} discriminator outputs")));
    }
    Ok(())
}

/// `sum_i mean((D_i(real) - 1)^2) + sum_i mean(D_i(fake)^2)`.
pub fn lsgan_disc_loss<'t>(real: &[Var<'t>], fake: &[Var<'t>]) -> Result<Var<'t>> {
    check_sizes(real.len(), fake.len(), "lsgan_disc_loss")?;
    let mut terms = Vec::with_capacity(2 * real.len());
    for (r, f) in real.iter().zip(fake) {
        terms.push(r.add_scalar(-1.0).square().mean());
        terms.push(f.square().mean());
    }
    Var::sum_all(&terms)
}

/// `sum_i mean((D_i(fake) - 1)^2)`.
pub fn lsgan_gen_loss<'t>(fake: &[Var<'t>]) -> Result<Var<'t>> {
    let terms: Vec<Var<'t>> = fake.iter().map(|f| f.add_scalar(-1.0).square().mean()).collect();
    Var::sum_all(&terms)
}

/// STFT magnitude at window `w`, hop `w / 4`, as `[T, F]`.
pub fn magnitude<'t>(wave: Var<'t>, sample_rate: u32, w: usize) -> Result<Var<'t>> {
    let cfg = StftConfig::new(sample_rate, w, w / 4)?;
    complex_abs(spectral::stft(wave, &cfg)?)
}

/// Multi-resolution magnitude L1 between `est` and `target` (`[L]` each),
/// averaged over `windows`. The target is treated as a constant.
pub fn multires_rec_loss<'t>(
    est: Var<'t>,
    target: Var<'t>,
    windows: &[usize],
    normalized: bool,
    sample_rate: u32,
) -> Result<Var<'t>> {
    if est.shape() != target.shape() || est.shape().len() != 1 {
        return Err(Error::shape(format!(
            "rec loss needs equal-length waveforms, got {:?} and {:?}",
            est.shape(),
            target.shape()
        )));
    }
    if windows.is_empty() {
        return Err(Error::arg("rec loss needs at least one window"));
    }
    let target = target.detach();
    let mut terms = Vec::with_capacity(windows.len());
    for &w in windows {
        let me = magnitude(est, sample_rate, w)?;
        let mt = magnitude(target, sample_rate, w)?;
        let l1 = me.sub(mt)?.abs().sum();
        terms.push(if normalized {
            let denom = mt.value().sum().max(LOSS_EPS);
            l1.scale(1.0 / denom)
        } else {
            l1
        });
    }
    Ok(Var::sum_all(&terms)?.scale(1.0 / windows.len() as f64))
}

/// Layer-normalized L1 between generated and (stop-gradient) real hidden
/// activations, averaged over layers and then over discriminators.
pub fn feature_matching_loss<'t>(fake: &[Vec<Var<'t>>], real: &[Vec<Var<'t>>]) -> Result<Var<'t>> {
    check_sizes(fake.len(), real.len(), "feature_matching_loss")?;
    let mut per_disc = Vec::with_capacity(fake.len());
    for (hf, hr) in fake.iter().zip(real) {
        check_sizes(hf.len(), hr.len(), "feature_matching_loss layers")?;
        let mut per_layer = Vec::with_capacity(hf.len());
        for (f, r) in hf.iter().zip(hr) {
            if f.shape() != r.shape() {
                return Err(Error::shape(format!(
                    "hidden activations {:?} vs {:?}",
                    f.shape(),
                    r.shape()
                )));
            }
            let r = r.detach();
            let rv = r.value();
            let denom = (rv.iter().map(|v| v.abs()).sum::<f64>() / rv.len().max(1) as f64).max(LOSS_EPS);
            per_layer.push(f.sub(r)?.abs().mean().scale(1.0 / denom));
        }
        per_disc.push(Var::sum_all(&per_layer)?.scale(1.0 / hf.len() as f64));
    }
    Ok(Var::sum_all(&per_disc)?.scale(1.0 / fake.len() as f64))
}

/// `alpha * l_rec + beta * l_fm + gamma * l_gan`.
pub fn generator_total<'t>(l_rec: Var<'t>, l_fm: Var<'t>, l_gan: Var<'t>, w: &LossWeights) -> Result<Var<'t>> {
    Var::sum_all(&[l_rec.scale(w.alpha), l_fm.scale(w.beta), l_gan.scale(w.gamma)])
}
