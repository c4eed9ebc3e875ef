//! Multi-resolution STFT discriminator ensemble.
//!
//! Each member sees the (re, im) spectrogram of one STFT resolution as a
//! 2-channel image `[2, F, T]`, normalized to unit L2 norm. Layers 1-6 are
//! bias-free spectral-normalized 3x3 convolutions with LeakyReLU(0.2); layer 7
//! maps to a single-channel score map. Parameter names:
//! `disc/{i}/conv{j}/w`, `disc/{i}/conv{j}/sn_u` (j = 1..=6, the persistent
//! power-iteration vector), `disc/{i}/conv7/{w,b}`.

use ndarray::{Array1, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::StftConfig;
use crate::error::{Error, Result};
use crate::nn::{self, spectral, uniform_init, Array, Bound, ParameterStore, Var};

pub const N_LAYERS: usize = 7;
pub const N_HIDDEN: usize = N_LAYERS - 1;
const STRIDES: [usize; N_HIDDEN] = [1, 2, 1, 2, 1, 2];
const SLOPE: f64 = 0.2;
const UNIT_NORM_TOL: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    pub window_sizes: Vec<usize>,
    pub base_channels: usize,
    pub n_layers: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            window_sizes: vec![128, 256, 512, 1024, 2048],
            base_channels: 32,
            n_layers: N_LAYERS,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_sizes.is_empty() {
            return Err(Error::arg("discriminator needs at least one window size"));
        }
        if let Some(w) = self.window_sizes.iter().find(|&&w| w < 4 || w % 4 != 0) {
            return Err(Error::arg(format!("discriminator window {w} must be a positive multiple of 4")));
        }
        if self.base_channels == 0 {
            return Err(Error::arg("base_channels must be positive"));
        }
        if self.n_layers != N_LAYERS {
            return Err(Error::arg(format!("n_layers must be {N_LAYERS}, got {}", self.n_layers)));
        }
        Ok(())
    }
}

/// Score map plus the six hidden activations of one ensemble member.
#[derive(Debug, Clone)]
pub struct DiscriminatorOutput<'t> {
    pub score: Var<'t>,
    pub hidden: Vec<Var<'t>>,
}

pub struct Discriminator {
    cfg: DiscriminatorConfig,
    sample_rate: u32,
}

impl Discriminator {
    pub fn new(cfg: DiscriminatorConfig, sample_rate: u32) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, sample_rate })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.cfg
    }

    pub fn n_members(&self) -> usize {
        self.cfg.window_sizes.len()
    }

    pub fn stft_config(&self, member: usize) -> Result<StftConfig> {
        let w = self.cfg.window_sizes[member];
        StftConfig::new(self.sample_rate, w, w / 4)
    }

    fn channels(&self) -> [usize; N_LAYERS + 1] {
        let c = self.cfg.base_channels;
        [2, c, 2 * c, 4 * c, 8 * c, 16 * c, 32 * c, 1]
    }

    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ParameterStore> {
        let ch = self.channels();
        let mut s = ParameterStore::new();
        for i in 0..self.n_members() {
            for j in 0..N_LAYERS {
                let (cin, cout) = (ch[j], ch[j + 1]);
                let pre = format!("disc/{i}/conv{}", j + 1);
                s.insert(format!("{pre}/w"), uniform_init(rng, &[cout, cin, 3, 3], cin * 9), true)?;
                if j < N_HIDDEN {
                    let u = uniform_init(rng, &[cout], 1);
                    let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                    s.insert(format!("{pre}/sn_u"), u.mapv(|v| v / norm), false)?;
                } else {
                    s.insert(format!("{pre}/b"), Array::zeros(IxDyn(&[cout])), true)?;
                }
            }
        }
        Ok(s)
    }

    /// One power-iteration step on every spectral-normalized weight,
    /// refreshing the stored left singular vectors.
    pub fn power_iterate(&self, store: &mut ParameterStore, steps: usize) -> Result<()> {
        for i in 0..self.n_members() {
            for j in 1..=N_HIDDEN {
                let pre = format!("disc/{i}/conv{j}");
                let w = store.data(&format!("{pre}/w"))?;
                let rows = w.shape()[0];
                let w2 = w.view().into_shape_with_order((rows, w.len() / rows)).unwrap();
                let mut u: Array1<f64> = store
                    .data(&format!("{pre}/sn_u"))?
                    .iter()
                    .copied()
                    .collect();
                nn::power_iteration(&w2, &mut u, steps);
                store.set_data(&format!("{pre}/sn_u"), u.into_dyn())?;
            }
        }
        Ok(())
    }

    /// Spectral-normalized weight of layer `j` using the stored `u`.
    fn normalized_weight<'t>(&self, p: &Bound<'t>, member: usize, j: usize) -> Result<Var<'t>> {
        let pre = format!("disc/{member}/conv{j}");
        let w = p.var(&format!("{pre}/w"))?;
        let wv = w.value();
        let rows = wv.shape()[0];
        let w2 = wv.view().into_shape_with_order((rows, wv.len() / rows)).unwrap();
        let mut u: Array1<f64> = p.value(&format!("{pre}/sn_u"))?.iter().copied().collect();
        let (v, _) = nn::power_iteration(&w2, &mut u, 0);
        nn::spectral_normalize(w, &u, &v)
    }

    /// Forward pass of member `member` on a unit-norm `[T, F, 2]` spectrum.
    pub fn disc_forward<'t>(&self, p: &Bound<'t>, member: usize, spec: Var<'t>) -> Result<DiscriminatorOutput<'t>> {
        if member >= self.n_members() {
            return Err(Error::arg(format!("no discriminator {member}")));
        }
        let s = spec.shape();
        if s.len() != 3 || s[2] != 2 {
            return Err(Error::shape(format!("discriminator input must be [T, F, 2], got {s:?}")));
        }
        let norm = spec.value().iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm != 0.0 && (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::arg(format!("discriminator input has L2 norm {norm:.6}, expected 1")));
        }
        let mut x = spec.permute(&[2, 1, 0])?;
        let mut hidden = Vec::with_capacity(N_HIDDEN);
        for (j, &stride) in STRIDES.iter().enumerate() {
            let w = self.normalized_weight(p, member, j + 1)?;
            x = nn::conv2d(x, w, None, (stride, stride), (1, 1))?.leaky_relu(SLOPE);
            hidden.push(x);
        }
        let pre = format!("disc/{member}/conv{N_LAYERS}");
        let score = nn::conv2d(
            x,
            p.var(&format!("{pre}/w"))?,
            Some(p.var(&format!("{pre}/b"))?),
            (1, 1),
            (1, 1),
        )?;
        Ok(DiscriminatorOutput { score, hidden })
    }

    /// Runs every member on its unit-normalized STFT of `wave` (`[L]`).
    pub fn ensemble_forward<'t>(&self, p: &Bound<'t>, wave: Var<'t>) -> Result<Vec<DiscriminatorOutput<'t>>> {
        let len = wave.shape().first().copied().unwrap_or(0);
        let largest = self.cfg.window_sizes.iter().copied().max().unwrap_or(0);
        if wave.shape().len() != 1 || len < largest {
            return Err(Error::SignalTooShort { len, window: largest });
        }
        (0..self.n_members())
            .map(|i| {
                let spec = spectral::stft(wave, &self.stft_config(i)?)?;
                self.disc_forward(p, i, nn::l2_normalize(spec))
            })
            .collect()
    }
}
