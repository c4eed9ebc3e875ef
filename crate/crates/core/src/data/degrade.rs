use std::io::Read;
use std::path::Path;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use num_complex::Complex;
use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::wav::{read_wav, write_wav, Audio, WavFormat};
use crate::dsp::{make_band_plan, stft, ComplexSpectrogram, StftConfig, StftProcessor};
use crate::error::{Error, Result};

pub const DEFAULT_BITRATES: [u32; 6] = [24_000, 32_000, 48_000, 64_000, 96_000, 128_000];

const SURROGATE_CUTOFFS: [(u32, f64); 6] = [
    (24_000, 8_000.0),
    (32_000, 10_000.0),
    (48_000, 13_000.0),
    (64_000, 15_000.0),
    (96_000, 17_000.0),
    (128_000, 19_000.0),
];

const NOISE_WINDOW: usize = 1024;
const NOISE_BAND_HZ: f64 = 160.0;
/// Largest codec delay searched when aligning external output.
const MAX_ALIGN_LAG: usize = 8192;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradeMethod {
    Surrogate,
    ExternalCodec,
}

impl DegradeMethod {
    pub const NAMES: [&'static str; 2] = ["surrogate", "external_codec"];
}

impl std::str::FromStr for DegradeMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "surrogate" => Ok(Self::Surrogate),
            "external_codec" | "external" => Ok(Self::ExternalCodec),
            other => Err(Error::arg(format!(
                "unknown degradation method `{other}` (valid: {})",
                Self::NAMES.join(", ")
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DegradeConfig {
    pub method: DegradeMethod,
    pub bitrates: Vec<u32>,
    /// Shell template with `{in}`, `{out}`, `{bitrate}` (bps) and `{kbps}`.
    pub codec_command: Option<String>,
    pub codec_timeout_s: f64,
    /// Quantization noise level relative to each band's energy.
    pub noise_db: f64,
}

impl Default for DegradeConfig {
    fn default() -> Self {
        Self {
            method: DegradeMethod::Surrogate,
            bitrates: DEFAULT_BITRATES.to_vec(),
            codec_command: None,
            codec_timeout_s: 60.0,
            noise_db: -30.0,
        }
    }
}

impl DegradeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bitrates.is_empty() {
            return Err(Error::arg("at least one bitrate is required"));
        }
        match self.method {
            DegradeMethod::Surrogate => {
                for &b in &self.bitrates {
                    surrogate_cutoff_hz(b)?;
                }
            }
            DegradeMethod::ExternalCodec => {
                if self.codec_command.as_deref().is_none_or(|c| c.trim().is_empty()) {
                    return Err(Error::arg("external_codec needs codec_command"));
                }
            }
        }
        if !(self.codec_timeout_s > 0.0) {
            return Err(Error::arg("codec_timeout_s must be positive"));
        }
        Ok(())
    }
}

pub fn surrogate_cutoff_hz(bitrate: u32) -> Result<f64> {
    SURROGATE_CUTOFFS
        .iter()
        .find(|(b, _)| *b == bitrate)
        .map(|(_, c)| *c)
        .ok_or_else(|| {
            let valid: Vec<String> = SURROGATE_CUTOFFS.iter().map(|(b, _)| b.to_string()).collect();
            Error::arg(format!("unsupported bitrate {bitrate} (valid: {})", valid.join(", ")))
        })
}

/// Degrades `target` at `bitrate` with the configured method.
pub fn degrade<R: Rng + ?Sized>(
    target: &[f64],
    sample_rate: u32,
    bitrate: u32,
    cfg: &DegradeConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if !cfg.bitrates.contains(&bitrate) {
        return Err(Error::arg(format!(
            "bitrate {bitrate} is not in the configured set {:?}",
            cfg.bitrates
        )));
    }
    match cfg.method {
        DegradeMethod::Surrogate => surrogate(target, sample_rate, bitrate, cfg.noise_db, rng),
        DegradeMethod::ExternalCodec => {
            let cmd = cfg
                .codec_command
                .as_deref()
                .ok_or_else(|| Error::arg("external_codec needs codec_command"))?;
            external_codec(
                target,
                sample_rate,
                bitrate,
                cmd,
                Duration::from_secs_f64(cfg.codec_timeout_s),
            )
        }
    }
}

/// Zeroes every DFT bin above `cutoff_hz`.
pub fn lowpass(wave: &[f64], sample_rate: u32, cutoff_hz: f64) -> Vec<f64> {
    let n = wave.len();
    if n == 0 {
        return Vec::new();
    }
    let mut planner = FftPlanner::new();
    let mut buf: Vec<Complex<f64>> = wave.iter().map(|&v| Complex::new(v, 0.0)).collect();
    planner.plan_fft_forward(n).process(&mut buf);
    let df = sample_rate as f64 / n as f64;
    for (k, c) in buf.iter_mut().enumerate() {
        let f = k.min(n - k) as f64 * df;
        if f > cutoff_hz {
            *c = Complex::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf.iter().map(|c| c.re / n as f64).collect()
}

/// Complex Gaussian noise in every STFT band at `noise_db` below that band's
/// energy, resynthesized to the time domain.
pub fn band_noise<R: Rng + ?Sized>(wave: &[f64], sample_rate: u32, noise_db: f64, rng: &mut R) -> Result<Vec<f64>> {
    let n = wave.len();
    let mut win = NOISE_WINDOW;
    while win > n {
        win /= 2;
    }
    if win < 8 {
        return Ok(vec![0.0; n]);
    }
    let cfg = StftConfig::new(sample_rate, win, win / 4)?;
    let spec = stft(wave, &cfg)?;
    let plan = make_band_plan(&cfg, NOISE_BAND_HZ.max(cfg.bin_spacing_hz()))?;
    let rel = 10f64.powf(noise_db / 10.0);
    let mut noise = ComplexSpectrogram {
        data: ndarray::Array2::zeros(spec.data.dim()),
        config: cfg,
    };
    for t in 0..spec.n_frames() {
        for &(a, b) in &plan.band_edges {
            let energy: f64 = (a..b).map(|f| spec.data[[f, t]].norm_sqr()).sum();
            let sigma = (energy * rel / (b - a) as f64 / 2.0).sqrt();
            for f in a..b {
                let re: f64 = rng.sample(StandardNormal);
                let im: f64 = rng.sample(StandardNormal);
                noise.data[[f, t]] = Complex::new(re, im) * sigma;
            }
        }
    }
    StftProcessor::new(cfg)?.istft(&noise, n)
}

fn surrogate<R: Rng + ?Sized>(
    target: &[f64],
    sample_rate: u32,
    bitrate: u32,
    noise_db: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let cutoff = surrogate_cutoff_hz(bitrate)?;
    let lp = lowpass(target, sample_rate, cutoff);
    let noise = band_noise(&lp, sample_rate, noise_db, rng)?;
    let noisy: Vec<f64> = lp.iter().zip(&noise).map(|(a, b)| a + b).collect();
    Ok(lowpass(&noisy, sample_rate, cutoff))
}

/// Encodes and decodes through a user command, then aligns the decoded
/// signal to `target` and trims it to the same length.
pub fn external_codec(
    target: &[f64],
    sample_rate: u32,
    bitrate: u32,
    template: &str,
    timeout: Duration,
) -> Result<Vec<f64>> {
    let dir = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
    let input = dir.path().join("in.wav");
    let output = dir.path().join("out.wav");
    write_wav(&input, &Audio::mono(sample_rate, target.to_vec()), WavFormat::Pcm16)?;
    let cmd = template
        .replace("{in}", &shell_quote(&input))
        .replace("{out}", &shell_quote(&output))
        .replace("{bitrate}", &bitrate.to_string())
        .replace("{kbps}", &(bitrate / 1000).to_string());
    run_with_timeout(&cmd, timeout)?;
    let decoded = read_wav(&output).map_err(|e| Error::Codec(format!("reading codec output: {e}")))?;
    if decoded.sample_rate != sample_rate {
        return Err(Error::Codec(format!(
            "codec output is {} Hz, expected {sample_rate} Hz",
            decoded.sample_rate
        )));
    }
    Ok(align(target, &decoded.downmix()))
}

fn shell_quote(p: &Path) -> String {
    format!("'{}'", p.display().to_string().replace('\'', r"'\''"))
}

fn run_with_timeout(cmd: &str, timeout: Duration) -> Result<()> {
    let mut child = Command::new("sh")
        .arg("-c")
        .arg(cmd)
        .stdin(Stdio::null())
        .stdout(Stdio::null())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| Error::Codec(format!("spawning `{cmd}`: {e}")))?;
    let mut stderr = child.stderr.take().expect("piped stderr");
    let reader = std::thread::spawn(move || {
        let mut s = String::new();
        let _ = stderr.read_to_string(&mut s);
        s
    });
    let start = Instant::now();
    let status = loop {
        match child.try_wait() {
            Ok(Some(status)) => break status,
            Ok(None) if start.elapsed() >= timeout => {
                let _ = child.kill();
                let _ = child.wait();
                let diag = reader.join().unwrap_or_default();
                return Err(Error::Codec(format!(
                    "`{cmd}` timed out after {:.1} s; stderr: {}",
                    timeout.as_secs_f64(),
                    diag.trim()
                )));
            }
            Ok(None) => std::thread::sleep(Duration::from_millis(5)),
            Err(e) => return Err(Error::Codec(format!("waiting for `{cmd}`: {e}"))),
        }
    };
    let diag = reader.join().unwrap_or_default();
    if !status.success() {
        return Err(Error::Codec(format!("`{cmd}` exited with {status}; stderr: {}", diag.trim())));
    }
    Ok(())
}

/// Shifts `decoded` by the lag maximizing its cross-correlation with
/// `target` and trims or zero-pads it to `target.len()`.
pub fn align(target: &[f64], decoded: &[f64]) -> Vec<f64> {
    let n = target.len();
    if n == 0 {
        return Vec::new();
    }
    let max_lag = MAX_ALIGN_LAG.min(decoded.len().max(n));
    let size = (n + decoded.len() + max_lag).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(size);
    let mut a: Vec<Complex<f64>> = vec![Complex::new(0.0, 0.0); size];
    let mut b = a.clone();
    for (i, &v) in target.iter().enumerate() {
        a[i].re = v;
    }
    for (i, &v) in decoded.iter().enumerate() {
        b[i].re = v;
    }
    fwd.process(&mut a);
    fwd.process(&mut b);
    // corr[k] = sum_i decoded[i + k] * target[i]
    let mut c: Vec<Complex<f64>> = a.iter().zip(&b).map(|(x, y)| x.conj() * y).collect();
    planner.plan_fft_inverse(size).process(&mut c);
    let mut best = (0isize, c[0].re);
    for k in -(max_lag as isize)..=(max_lag as isize) {
        let v = c[k.rem_euclid(size as isize) as usize].re;
        if v > best.1 * (1.0 + 1e-9) + 1e-12 {
            best = (k, v);
        }
    }
    let lag = if best.1 > 0.0 { best.0 } else { 0 };
    (0..n)
        .map(|i| {
            let j = i as isize + lag;
            if j >= 0 && (j as usize) < decoded.len() {
                decoded[j as usize]
            } else {
                0.0
            }
        })
        .collect()
}
