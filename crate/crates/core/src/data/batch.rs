use ndarray::{s, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::degrade::{degrade, DegradeConfig};
use super::mixing::{sample_mixture, StemLibrary};
use super::sad::SadConfig;
use crate::error::{Error, Result};

/// Guard for [`rescale_pair`] on silent pairs.
pub const RESCALE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub sample_rate: u32,
    pub clip_seconds: f64,
    pub max_stems: usize,
    pub gain_db: f64,
    pub sad: SadConfig,
    pub degrade: DegradeConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            sample_rate: 44_100,
            clip_seconds: 3.0,
            max_stems: 8,
            gain_db: 10.0,
            sad: SadConfig::default(),
            degrade: DegradeConfig::default(),
        }
    }
}

impl DataConfig {
    pub fn clip_len(&self) -> usize {
        (self.clip_seconds * self.sample_rate as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.clip_len() == 0 {
            return Err(Error::arg("clip_seconds must give at least one sample"));
        }
        if self.max_stems == 0 {
            return Err(Error::arg("max_stems must be at least 1"));
        }
        if !(self.gain_db >= 0.0) {
            return Err(Error::arg("gain_db must be >= 0"));
        }
        self.degrade.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemMeta {
    pub stems: Vec<String>,
    pub gains_db: Vec<f64>,
    pub bitrate: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    /// `[B, 1, L]`
    pub degraded: Array3<f64>,
    /// `[B, 1, L]`
    pub target: Array3<f64>,
    pub meta: Vec<ItemMeta>,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.target.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn clip_len(&self) -> usize {
        self.target.shape()[2]
    }

    pub fn pair(&self, i: usize) -> (Vec<f64>, Vec<f64>) {
        (
            self.degraded.slice(s![i, 0, ..]).to_vec(),
            self.target.slice(s![i, 0, ..]).to_vec(),
        )
    }

    pub fn from_pairs(pairs: &[(Vec<f64>, Vec<f64>)], meta: Vec<ItemMeta>) -> Result<Self> {
        let len = pairs.first().map_or(0, |p| p.1.len());
        if pairs.iter().any(|(d, t)| d.len() != len || t.len() != len) {
            return Err(Error::shape("batch items must share one length"));
        }
        let b = pairs.len();
        let mut degraded = Array3::zeros((b, 1, len));
        let mut target = Array3::zeros((b, 1, len));
        for (i, (d, t)) in pairs.iter().enumerate() {
            degraded.slice_mut(s![i, 0, ..]).assign(&ndarray::ArrayView1::from(d));
            target.slice_mut(s![i, 0, ..]).assign(&ndarray::ArrayView1::from(t));
        }
        Ok(Self { degraded, target, meta })
    }
}

/// Divides both signals by their joint peak (at least [`RESCALE_EPS`]).
pub fn rescale_pair(degraded: &mut [f64], target: &mut [f64]) {
    let peak = degraded
        .iter()
        .chain(target.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let d = peak.max(RESCALE_EPS);
    degraded.iter_mut().chain(target.iter_mut()).for_each(|v| *v /= d);
}

/// `batch_size` (degraded, target) pairs: mix, degrade at a random
/// configured bitrate, rescale.
pub fn make_batch<R: Rng + ?Sized>(lib: &StemLibrary, rng: &mut R, batch_size: usize, cfg: &DataConfig) -> Result<TrainBatch> {
    if batch_size == 0 {
        return Err(Error::arg("batch_size must be positive"));
    }
    if lib.sample_rate() != cfg.sample_rate {
        return Err(Error::Data(format!(
            "library is {} Hz but data.sample_rate is {}",
            lib.sample_rate(),
            cfg.sample_rate
        )));
    }
    let mut pairs = Vec::with_capacity(batch_size);
    let mut meta = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let mix = sample_mixture(lib, rng, cfg.clip_len(), cfg.max_stems, cfg.gain_db)?;
        let bitrate = cfg.degrade.bitrates[rng.random_range(0..cfg.degrade.bitrates.len())];
        let mut degraded = degrade(&mix.wave, cfg.sample_rate, bitrate, &cfg.degrade, rng)?;
        let mut target = mix.wave;
        rescale_pair(&mut degraded, &mut target);
        pairs.push((degraded, target));
        meta.push(ItemMeta {
            stems: mix.stems,
            gains_db: mix.gains_db,
            bitrate,
        });
    }
    TrainBatch::from_pairs(&pairs, meta)
}
