//! STFT/iSTFT with perfect reconstruction, windows, and the sub-band plan.
//!
//! Framing convention: the signal is reflect-padded by `window_len - hop_len`
//! samples on both sides, framed with a periodic Hann window, and transformed
//! with a one-sided DFT of `fft_len` points. Synthesis overlap-adds the
//! windowed inverse frames, divides by the summed squared window and trims the
//! padding, so `istft(stft(x), x.len()) == x` up to rounding.

use std::fmt::Debug;
use std::sync::Arc;

use ndarray::{s, Array2};
use num_complex::Complex;
use num_traits::{Float, FromPrimitive};
use rustfft::{Fft, FftNum, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scalar types the DSP layer runs on (`f32` and `f64`).
pub trait Sample: FftNum + Float + FromPrimitive + Debug + Default {}
impl<T: FftNum + Float + FromPrimitive + Debug + Default> Sample for T {}

fn cst<T: Sample>(v: f64) -> T {
    T::from_f64(v).expect("representable constant")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    #[default]
    Hann,
}

impl WindowKind {
    /// Periodic window of length `n` (the DFT-even form that satisfies COLA).
    pub fn build<T: Sample>(self, n: usize) -> Vec<T> {
        match self {
            WindowKind::Hann => (0..n)
                .map(|i| {
                    let x = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
                    cst(0.5 - 0.5 * x.cos())
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StftConfig {
    pub sample_rate: u32,
    pub window_len: usize,
    pub hop_len: usize,
    pub window: WindowKind,
    pub fft_len: usize,
}

impl Default for StftConfig {
    /// 20 ms window, 10 ms hop at 44.1 kHz.
    fn default() -> Self {
        Self {
            sample_rate: 44_100,
            window_len: 882,
            hop_len: 441,
            window: WindowKind::Hann,
            fft_len: 882,
        }
    }
}

impl StftConfig {
    pub fn new(sample_rate: u32, window_len: usize, hop_len: usize) -> Result<Self> {
        let cfg = Self {
            sample_rate,
            window_len,
            hop_len,
            window: WindowKind::Hann,
            fft_len: window_len,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks the ordering invariants and the constant-overlap-add condition.
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::InvalidStft("sample_rate must be positive".into()));
        }
        if self.hop_len == 0 || self.hop_len > self.window_len {
            return Err(Error::InvalidStft(format!(
                "hop_len {} must be in 1..={}",
                self.hop_len, self.window_len
            )));
        }
        if self.window_len > self.fft_len {
            return Err(Error::InvalidStft(format!(
                "window_len {} exceeds fft_len {}",
                self.window_len, self.fft_len
            )));
        }
        let dev = self.cola_deviation();
        if dev >= 1e-10 {
            return Err(Error::InvalidStft(format!(
                "window/hop pair violates COLA (deviation {dev:.3e})"
            )));
        }
        Ok(())
    }

    /// Peak-to-peak deviation of the summed shifted windows.
    pub fn cola_deviation(&self) -> f64 {
        let w: Vec<f64> = self.window.build(self.window_len);
        let sums: Vec<f64> = (0..self.hop_len)
            .map(|n| w.iter().skip(n).step_by(self.hop_len).sum())
            .collect();
        let max = sums.iter().cloned().fold(f64::MIN, f64::max);
        let min = sums.iter().cloned().fold(f64::MAX, f64::min);
        max - min
    }

    pub fn n_bins(&self) -> usize {
        self.fft_len / 2 + 1
    }

    pub fn bin_spacing_hz(&self) -> f64 {
        self.sample_rate as f64 / self.fft_len as f64
    }

    /// Reflect padding applied on each side before framing.
    pub fn pad_len(&self) -> usize {
        self.window_len - self.hop_len
    }

    /// Number of frames produced for a signal of `len` samples.
    pub fn n_frames(&self, len: usize) -> usize {
        let padded = len + 2 * self.pad_len();
        if padded < self.window_len {
            return 0;
        }
        1 + (padded - self.window_len) / self.hop_len
    }
}

/// One-sided complex spectrogram, `F x T` (bins by frames).
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram<T> {
    pub data: Array2<Complex<T>>,
    pub config: StftConfig,
}

impl<T: Sample> ComplexSpectrogram<T> {
    pub fn n_bins(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_frames(&self) -> usize {
        self.data.ncols()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|c| c.re.is_finite() && c.im.is_finite())
    }
}

/// Cached FFT plans and window for one [`StftConfig`].
pub struct StftProcessor<T: Sample> {
    cfg: StftConfig,
    window: Vec<T>,
    fwd: Arc<dyn Fft<T>>,
    inv: Arc<dyn Fft<T>>,
}

impl<T: Sample> StftProcessor<T> {
    pub fn new(cfg: StftConfig) -> Result<Self> {
        cfg.validate()?;
        let mut planner = FftPlanner::new();
        Ok(Self {
            window: cfg.window.build(cfg.window_len),
            fwd: planner.plan_fft_forward(cfg.fft_len),
            inv: planner.plan_fft_inverse(cfg.fft_len),
            cfg,
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.cfg
    }

    pub fn window(&self) -> &[T] {
        &self.window
    }

    /// Reflect-pads `wave` by `pad_len` on both sides (edge sample not repeated).
    pub fn reflect_pad(&self, wave: &[T]) -> Result<Vec<T>> {
        reflect_pad(wave, self.cfg.pad_len())
    }

    /// DFT of one frame of `window_len` samples (window applied here).
    pub fn forward_frame(&self, frame: &[T], buf: &mut Vec<Complex<T>>, out: &mut [Complex<T>]) {
        let n = self.cfg.fft_len;
        buf.clear();
        buf.extend(
            frame
                .iter()
                .zip(&self.window)
                .map(|(&x, &w)| Complex::new(x * w, T::zero())),
        );
        buf.resize(n, Complex::new(T::zero(), T::zero()));
        self.fwd.process(buf);
        out.copy_from_slice(&buf[..self.cfg.n_bins()]);
    }

    /// Real inverse DFT of a one-sided spectrum, first `window_len` samples,
    /// unwindowed. Imaginary parts of the DC and Nyquist bins are ignored.
    pub fn inverse_frame(&self, bins: &[Complex<T>], buf: &mut Vec<Complex<T>>, out: &mut [T]) {
        let n = self.cfg.fft_len;
        let nb = self.cfg.n_bins();
        buf.clear();
        buf.resize(n, Complex::new(T::zero(), T::zero()));
        buf[0] = Complex::new(bins[0].re, T::zero());
        for f in 1..nb {
            buf[f] = bins[f];
            buf[n - f] = bins[f].conj();
        }
        if n.is_multiple_of(2) {
            buf[n / 2] = Complex::new(bins[nb - 1].re, T::zero());
        }
        self.inv.process(buf);
        let scale = T::one() / cst::<T>(n as f64);
        for (o, c) in out.iter_mut().zip(buf.iter()) {
            *o = c.re * scale;
        }
    }

    /// Unnormalized in-place forward FFT of length `fft_len`.
    pub(crate) fn fft_forward(&self, buf: &mut [Complex<T>]) {
        self.fwd.process(buf);
    }

    /// Unnormalized in-place inverse FFT of length `fft_len`.
    pub(crate) fn fft_inverse(&self, buf: &mut [Complex<T>]) {
        self.inv.process(buf);
    }

    pub fn stft(&self, wave: &[T]) -> Result<ComplexSpectrogram<T>> {
        let cfg = &self.cfg;
        if wave.len() < cfg.window_len {
            return Err(Error::SignalTooShort {
                len: wave.len(),
                window: cfg.window_len,
            });
        }
        if wave.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("stft input".into()));
        }
        let padded = self.reflect_pad(wave)?;
        let frames = cfg.n_frames(wave.len());
        let nb = cfg.n_bins();
        let mut data = Array2::from_elem((nb, frames), Complex::new(T::zero(), T::zero()));
        let mut buf = Vec::with_capacity(cfg.fft_len);
        let mut col = vec![Complex::new(T::zero(), T::zero()); nb];
        for t in 0..frames {
            let start = t * cfg.hop_len;
            self.forward_frame(&padded[start..start + cfg.window_len], &mut buf, &mut col);
            data.column_mut(t)
                .iter_mut()
                .zip(&col)
                .for_each(|(d, c)| *d = *c);
        }
        Ok(ComplexSpectrogram {
            data,
            config: *cfg,
        })
    }

    pub fn istft(&self, spec: &ComplexSpectrogram<T>, out_len: usize) -> Result<Vec<T>> {
        let cfg = &self.cfg;
        if spec.n_bins() != cfg.n_bins() {
            return Err(Error::shape(format!(
                "spectrogram has {} bins, config expects {}",
                spec.n_bins(),
                cfg.n_bins()
            )));
        }
        if !spec.is_finite() {
            return Err(Error::NonFinite("istft input".into()));
        }
        let frames = spec.n_frames();
        let (lo, hi) = consistent_len_range(cfg, frames);
        if out_len < lo || out_len >= hi {
            return Err(Error::InconsistentLength {
                out_len,
                frames,
                lo,
                hi,
            });
        }
        let total = (frames - 1) * cfg.hop_len + cfg.window_len;
        let mut ola = vec![T::zero(); total];
        let mut buf = Vec::with_capacity(cfg.fft_len);
        let mut frame = vec![T::zero(); cfg.fft_len];
        let mut bins = vec![Complex::new(T::zero(), T::zero()); cfg.n_bins()];
        for t in 0..frames {
            bins.iter_mut()
                .zip(spec.data.column(t))
                .for_each(|(b, c)| *b = *c);
            self.inverse_frame(&bins, &mut buf, &mut frame);
            let start = t * cfg.hop_len;
            for m in 0..cfg.window_len {
                ola[start + m] = ola[start + m] + frame[m] * self.window[m];
            }
        }
        let env = self.window_envelope(frames);
        let p = cfg.pad_len();
        Ok((p..p + out_len).map(|n| ola[n] / env[n]).collect())
    }

    /// Summed squared window over `frames` overlapping frames (padded domain).
    pub fn window_envelope(&self, frames: usize) -> Vec<T> {
        let cfg = &self.cfg;
        let total = (frames.max(1) - 1) * cfg.hop_len + cfg.window_len;
        let mut env = vec![T::zero(); total];
        for t in 0..frames {
            let start = t * cfg.hop_len;
            for (m, &w) in self.window.iter().enumerate() {
                env[start + m] = env[start + m] + w * w;
            }
        }
        env
    }
}

/// Output lengths `[lo, hi)` that frame to exactly `frames` frames.
pub fn consistent_len_range(cfg: &StftConfig, frames: usize) -> (usize, usize) {
    // n_frames(L) = 1 + floor((L + 2p - win) / hop)
    let base = 2 * cfg.pad_len();
    let lo_num = (frames.saturating_sub(1) * cfg.hop_len + cfg.window_len).saturating_sub(base);
    let hi_num = (frames * cfg.hop_len + cfg.window_len).saturating_sub(base);
    (lo_num, hi_num)
}

pub fn reflect_pad<T: Copy>(wave: &[T], pad: usize) -> Result<Vec<T>> {
    let len = wave.len();
    if pad > 0 && len <= pad {
        return Err(Error::SignalTooShort {
            len,
            window: pad + 1,
        });
    }
    let mut out = Vec::with_capacity(len + 2 * pad);
    out.extend((0..pad).map(|i| wave[pad - i]));
    out.extend_from_slice(wave);
    out.extend((0..pad).map(|i| wave[len - 2 - i]));
    Ok(out)
}

pub fn stft<T: Sample>(wave: &[T], cfg: &StftConfig) -> Result<ComplexSpectrogram<T>> {
    StftProcessor::new(*cfg)?.stft(wave)
}

pub fn istft<T: Sample>(spec: &ComplexSpectrogram<T>, out_len: usize) -> Result<Vec<T>> {
    StftProcessor::new(spec.config)?.istft(spec, out_len)
}

/// Partition of the one-sided spectrum into contiguous sub-bands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandPlan {
    /// Half-open `[start, end)` bin ranges.
    pub band_edges: Vec<(usize, usize)>,
    pub bandwidth_hz: f64,
    pub bins_per_band: Vec<usize>,
}

impl BandPlan {
    pub fn n_bands(&self) -> usize {
        self.band_edges.len()
    }

    pub fn n_bins(&self) -> usize {
        self.band_edges.last().map_or(0, |e| e.1)
    }
}

/// Uniform bands of `round(bandwidth / bin_spacing)` bins; the last band takes
/// whatever remains and may be narrower.
pub fn make_band_plan(cfg: &StftConfig, bandwidth_hz: f64) -> Result<BandPlan> {
    let spacing = cfg.bin_spacing_hz();
    if !bandwidth_hz.is_finite() || bandwidth_hz < spacing * (1.0 - 1e-9) {
        return Err(Error::arg(format!(
            "bandwidth {bandwidth_hz} Hz is below the bin spacing {spacing} Hz"
        )));
    }
    let n_bins = cfg.n_bins();
    let width = ((bandwidth_hz / spacing).round() as usize).clamp(1, n_bins);
    let mut band_edges = Vec::with_capacity(n_bins.div_ceil(width));
    let mut start = 0;
    while start < n_bins {
        let end = (start + width).min(n_bins);
        band_edges.push((start, end));
        start = end;
    }
    let bins_per_band = band_edges.iter().map(|(a, b)| b - a).collect();
    Ok(BandPlan {
        band_edges,
        bandwidth_hz,
        bins_per_band,
    })
}

pub fn split_bands<T: Sample>(
    spec: &ComplexSpectrogram<T>,
    plan: &BandPlan,
) -> Result<Vec<Array2<Complex<T>>>> {
    if plan.n_bins() != spec.n_bins() {
        return Err(Error::shape(format!(
            "band plan covers {} bins, spectrogram has {}",
            plan.n_bins(),
            spec.n_bins()
        )));
    }
    Ok(plan
        .band_edges
        .iter()
        .map(|&(a, b)| spec.data.slice(s![a..b, ..]).to_owned())
        .collect())
}

pub fn merge_bands<T: Sample>(
    bands: &[Array2<Complex<T>>],
    plan: &BandPlan,
    config: StftConfig,
) -> Result<ComplexSpectrogram<T>> {
    if bands.len() != plan.n_bands() {
        return Err(Error::shape(format!(
            "{} bands given, plan has {}",
            bands.len(),
            plan.n_bands()
        )));
    }
    if plan.n_bins() != config.n_bins() {
        return Err(Error::shape("band plan does not match STFT config".to_string()));
    }
    let frames = bands.first().map_or(0, |b| b.ncols());
    let mut data = Array2::from_elem((plan.n_bins(), frames), Complex::new(T::zero(), T::zero()));
    for (k, (band, &(a, b))) in bands.iter().zip(&plan.band_edges).enumerate() {
        if band.dim() != (b - a, frames) {
            return Err(Error::shape(format!(
                "band {k} has shape {:?}, expected {:?}",
                band.dim(),
                (b - a, frames)
            )));
        }
        data.slice_mut(s![a..b, ..]).assign(band);
    }
    Ok(ComplexSpectrogram { data, config })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise<T: Sample>(len: usize, seed: u64) -> Vec<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len)
            .map(|_| cst::<T>(rng.random_range(-1.0..1.0)))
            .collect()
    }

    #[test]
    fn default_config_has_442_bins() {
        let cfg = StftConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.n_bins(), 442);
        assert!((cfg.bin_spacing_hz() - 50.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(StftConfig::new(44_100, 882, 1000).is_err());
        // Hann at hop 3/4 of the window is not COLA.
        assert!(StftConfig::new(44_100, 800, 600).is_err());
        let cfg = StftConfig {
            fft_len: 512,
            ..StftConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_input_gives_zero_spectrogram() {
        let cfg = StftConfig::default();
        let spec = stft(&vec![0.0f64; 44_100], &cfg).unwrap();
        assert_eq!(spec.n_bins(), 442);
        assert_eq!(spec.n_frames(), cfg.n_frames(44_100));
        assert!(spec.data.iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn short_or_empty_input_is_an_error() {
        let cfg = StftConfig::default();
        let err = stft::<f64>(&[], &cfg).unwrap_err();
        assert!(err.to_string().contains("signal shorter than one window"));
        assert!(stft(&vec![0.0f32; 881], &cfg).is_err());
    }

    #[test]
    fn cosine_peaks_at_expected_bin_and_matches_direct_dft() {
        let cfg = StftConfig::default();
        let sr = cfg.sample_rate as f64;
        let wave: Vec<f64> = (0..44_100)
            .map(|n| (2.0 * std::f64::consts::PI * 441.0 * n as f64 / sr).cos())
            .collect();
        let spec = stft(&wave, &cfg).unwrap();
        let t = 10;
        let col = spec.data.column(t);
        let peak = (0..col.len())
            .max_by(|&a, &b| col[a].norm().partial_cmp(&col[b].norm()).unwrap())
            .unwrap();
        assert_eq!(peak, (441.0f64 / 50.0).round() as usize);

        // Direct DFT of the same frame.
        let padded = reflect_pad(&wave, cfg.pad_len()).unwrap();
        let w: Vec<f64> = cfg.window.build(cfg.window_len);
        let start = t * cfg.hop_len;
        for k in [0usize, 5, 9, 100, 441] {
            let mut acc = Complex::new(0.0, 0.0);
            for n in 0..cfg.window_len {
                let ang = -2.0 * std::f64::consts::PI * (k * n) as f64 / cfg.fft_len as f64;
                acc += Complex::from_polar(padded[start + n] * w[n], ang);
            }
            assert!((acc - col[k]).norm() < 1e-9, "bin {k}");
        }
    }

    #[test]
    fn roundtrip_f64_and_f32() {
        let cfg = StftConfig::default();
        let x: Vec<f64> = noise(44_100, 1);
        let y = istft(&stft(&x, &cfg).unwrap(), x.len()).unwrap();
        let err = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-10, "{err}");

        let x: Vec<f32> = noise(44_100, 2);
        let y = istft(&stft(&x, &cfg).unwrap(), x.len()).unwrap();
        let err = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn zero_spectrogram_synthesizes_silence() {
        let cfg = StftConfig::default();
        let frames = cfg.n_frames(4410);
        let spec = ComplexSpectrogram {
            data: Array2::<Complex<f64>>::zeros((442, frames)),
            config: cfg,
        };
        assert!(istft(&spec, 4410).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dc_only_frames_match_direct_overlap_add() {
        let cfg = StftConfig::default();
        let len = 4410;
        let frames = cfg.n_frames(len);
        let mut data = Array2::<Complex<f64>>::zeros((442, frames));
        let levels: Vec<f64> = (0..frames).map(|t| 1.0 + t as f64 * 0.25).collect();
        for t in 0..frames {
            data[[0, t]] = Complex::new(levels[t] * cfg.fft_len as f64, 0.0);
        }
        let y = istft(&ComplexSpectrogram { data, config: cfg }, len).unwrap();

        // Each frame inverts to the constant `levels[t]`.
        let w: Vec<f64> = cfg.window.build(cfg.window_len);
        let total = (frames - 1) * cfg.hop_len + cfg.window_len;
        let (mut num, mut den) = (vec![0.0; total], vec![0.0; total]);
        for t in 0..frames {
            for m in 0..cfg.window_len {
                num[t * cfg.hop_len + m] += levels[t] * w[m];
                den[t * cfg.hop_len + m] += w[m] * w[m];
            }
        }
        let p = cfg.pad_len();
        for n in 0..len {
            let want = num[n + p] / den[n + p];
            assert!((y[n] - want).abs() < 1e-10);
        }
    }

    #[test]
    fn inconsistent_out_len_is_rejected() {
        let cfg = StftConfig::default();
        let spec = stft(&vec![0.1f64; 4410], &cfg).unwrap();
        assert!(istft(&spec, 4410).is_ok());
        assert!(istft(&spec, 4410 + 441).is_err());
        assert!(istft(&spec, 4410 - 441).is_err());
    }

    #[test]
    fn parseval_with_window_envelope() {
        let cfg = StftConfig::new(44_100, 1024, 256).unwrap();
        let x: Vec<f64> = noise(20_000, 3);
        let proc = StftProcessor::<f64>::new(cfg).unwrap();
        let spec = proc.stft(&x).unwrap();
        let n = cfg.fft_len as f64;
        let spectral: f64 = spec
            .data
            .indexed_iter()
            .map(|((k, _), c)| {
                let weight = if k == 0 || k == cfg.fft_len / 2 { 1.0 } else { 2.0 };
                weight * c.norm_sqr()
            })
            .sum::<f64>()
            / n;
        let padded = proc.reflect_pad(&x).unwrap();
        let env = proc.window_envelope(spec.n_frames());
        let temporal: f64 = padded.iter().zip(&env).map(|(v, e)| v * v * e).sum();
        assert!(((spectral - temporal) / temporal).abs() < 1e-4);
        // Away from the edges the envelope is flat (1.5 at 75% overlap).
        let (p, w) = (cfg.pad_len(), cfg.window_len);
        let inner = p + w..p + x.len() - w;
        let plain: f64 = inner.clone().map(|i| padded[i] * padded[i]).sum();
        let weighted: f64 = inner.map(|i| padded[i] * padded[i] * env[i]).sum();
        assert!(((weighted / 1.5 - plain) / plain).abs() < 1e-10);
    }

    #[test]
    fn linearity() {
        let cfg = StftConfig::default();
        let x: Vec<f64> = noise(8000, 4);
        let y: Vec<f64> = noise(8000, 5);
        let (a, b) = (0.7, -1.3);
        let z: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let (sx, sy, sz) = (
            stft(&x, &cfg).unwrap(),
            stft(&y, &cfg).unwrap(),
            stft(&z, &cfg).unwrap(),
        );
        for ((cx, cy), cz) in sx.data.iter().zip(sy.data.iter()).zip(sz.data.iter()) {
            assert!((*cx * a + *cy * b - *cz).norm() < 1e-6);
        }
    }

    #[test]
    fn band_plan_defaults() {
        let cfg = StftConfig::default();
        let plan = make_band_plan(&cfg, 160.0).unwrap();
        assert_eq!(plan.n_bands(), 148);
        assert!(plan.bins_per_band[..147].iter().all(|&m| m == 3));
        assert_eq!(plan.bins_per_band[147], 1);
        assert_eq!(plan.bins_per_band.iter().sum::<usize>(), 442);
        assert_eq!(plan.band_edges[0], (0, 3));

        let plan = make_band_plan(&cfg, 50.0).unwrap();
        assert_eq!(plan.n_bands(), 442);
        assert!(plan.bins_per_band.iter().all(|&m| m == 1));

        let full = 442.0 * cfg.bin_spacing_hz();
        let plan = make_band_plan(&cfg, full).unwrap();
        assert_eq!(plan.bins_per_band, vec![442]);

        assert!(make_band_plan(&cfg, 20.0).is_err());
    }

    #[test]
    fn split_merge_is_identity() {
        let cfg = StftConfig::default();
        let spec = stft(&noise::<f64>(5000, 6), &cfg).unwrap();
        for bw in [160.0, 50.0, 22_100.0, 800.0] {
            let plan = make_band_plan(&cfg, bw).unwrap();
            let bands = split_bands(&spec, &plan).unwrap();
            if bw == 22_100.0 {
                assert_eq!(bands[0], spec.data);
            }
            if bw == 160.0 {
                assert_eq!(bands[0], spec.data.slice(s![0..3, ..]));
            }
            let merged = merge_bands(&bands, &plan, cfg).unwrap();
            assert_eq!(merged, spec);
        }
    }

    #[test]
    fn split_is_independent_of_later_mutation() {
        let cfg = StftConfig::default();
        let mut spec = stft(&noise::<f64>(5000, 7), &cfg).unwrap();
        let plan = make_band_plan(&cfg, 160.0).unwrap();
        let bands = split_bands(&spec, &plan).unwrap();
        let before = bands[0][[0, 0]];
        spec.data[[0, 0]] = Complex::new(99.0, 0.0);
        assert_eq!(bands[0][[0, 0]], before);
    }

    #[test]
    fn mismatched_shapes_error() {
        let cfg = StftConfig::default();
        let spec = stft(&noise::<f64>(5000, 8), &cfg).unwrap();
        let other = StftConfig::new(44_100, 1024, 512).unwrap();
        let plan = make_band_plan(&other, 160.0).unwrap();
        assert!(split_bands(&spec, &plan).is_err());
        let plan = make_band_plan(&cfg, 160.0).unwrap();
        let mut bands = split_bands(&spec, &plan).unwrap();
        bands[3] = Array2::zeros((2, spec.n_frames()));
        assert!(merge_bands(&bands, &plan, cfg).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn roundtrip_any_length(len in 882usize..6000, seed in any::<u64>()) {
            let cfg = StftConfig::default();
            let x: Vec<f64> = noise(len, seed);
            let y = istft(&stft(&x, &cfg).unwrap(), len).unwrap();
            let err = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            prop_assert!(err < 1e-10);
        }
    }
}
