//! SI-SNR, SDR, real-time-factor benchmarking and report files.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DB_CAP: f64 = 100.0;

fn cap(db: f64) -> f64 {
    if db.is_nan() {
        -DB_CAP
    } else {
        db.clamp(-DB_CAP, DB_CAP)
    }
}

fn ratio_db(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        return if num > 0.0 { DB_CAP } else { -DB_CAP };
    }
    if num == 0.0 {
        return -DB_CAP;
    }
    cap(10.0 * (num / den).log10())
}

fn check_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape(format!("metric inputs {} vs {} samples", a.len(), b.len())));
    }
    Ok(())
}

/// Scale-invariant SNR in dB after mean removal; `None` for a silent reference.
pub fn si_snr(est: &[f64], reference: &[f64]) -> Result<Option<f64>> {
    check_len(est, reference)?;
    let n = est.len() as f64;
    let me = est.iter().sum::<f64>() / n;
    let mr = reference.iter().sum::<f64>() / n;
    let r: Vec<f64> = reference.iter().map(|v| v - mr).collect();
    let e: Vec<f64> = est.iter().map(|v| v - me).collect();
    let rr: f64 = r.iter().map(|v| v * v).sum();
    if rr == 0.0 {
        return Ok(None);
    }
    let alpha = e.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>() / rr;
    let (mut num, mut den) = (0.0, 0.0);
    for (a, b) in e.iter().zip(&r) {
        let t = alpha * b;
        num += t * t;
        den += (a - t) * (a - t);
    }
    Ok(Some(ratio_db(num, den)))
}

/// Plain signal-to-distortion ratio in dB; `None` for a silent reference.
pub fn sdr(est: &[f64], reference: &[f64]) -> Result<Option<f64>> {
    check_len(est, reference)?;
    let rr: f64 = reference.iter().map(|v| v * v).sum();
    if rr == 0.0 {
        return Ok(None);
    }
    let err: f64 = est.iter().zip(reference).map(|(a, b)| (b - a) * (b - a)).sum();
    Ok(Some(ratio_db(rr, err)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RtfReport {
    pub params_m: f64,
    /// Milliseconds of compute per second of audio.
    pub mean_ms: f64,
    pub p95_ms: f64,
    pub iters: usize,
    pub warmup: usize,
    pub clip_seconds: f64,
}

pub const RTF_WARMUP: usize = 10;

/// Times `run` (one pass over `clip_seconds` of audio) `iters` times after
/// [`RTF_WARMUP`] untimed runs.
pub fn bench_rtf<F: FnMut() -> Result<()>>(
    mut run: F,
    iters: usize,
    clip_seconds: f64,
    param_count: usize,
) -> Result<RtfReport> {
    if iters == 0 {
        return Err(Error::arg("iters must be at least 1"));
    }
    if !(clip_seconds > 0.0) {
        return Err(Error::arg("clip_seconds must be positive"));
    }
    for _ in 0..RTF_WARMUP {
        run()?;
    }
    let mut times = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t = Instant::now();
        run()?;
        times.push(t.elapsed().as_secs_f64() * 1e3 / clip_seconds);
    }
    let mean_ms = times.iter().sum::<f64>() / iters as f64;
    times.sort_by(f64::total_cmp);
    let rank = ((0.95 * iters as f64).ceil() as usize).clamp(1, iters);
    Ok(RtfReport {
        params_m: param_count as f64 / 1e6,
        mean_ms,
        p95_ms: times[rank - 1],
        iters,
        warmup: RTF_WARMUP,
        clip_seconds,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub file: String,
    pub bitrate: Option<u32>,
    pub si_snr: Option<f64>,
    pub sdr: Option<f64>,
    /// Metrics of the unrestored input against the reference.
    pub input_si_snr: Option<f64>,
    pub input_sdr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BitrateSummary {
    pub bitrate: Option<u32>,
    pub n_files: usize,
    pub si_snr: Option<f64>,
    pub sdr: Option<f64>,
    pub input_si_snr: Option<f64>,
    pub input_sdr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<EvalRow>,
    /// Means per bitrate; undefined values are excluded.
    pub summary: Vec<BitrateSummary>,
}

fn mean_defined(vals: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = vals.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl MetricReport {
    pub fn from_rows(rows: Vec<EvalRow>) -> Self {
        let mut groups: BTreeMap<Option<u32>, Vec<&EvalRow>> = BTreeMap::new();
        for r in &rows {
            groups.entry(r.bitrate).or_default().push(r);
        }
        let summary = groups
            .into_iter()
            .map(|(bitrate, g)| BitrateSummary {
                bitrate,
                n_files: g.len(),
                si_snr: mean_defined(g.iter().map(|r| r.si_snr)),
                sdr: mean_defined(g.iter().map(|r| r.sdr)),
                input_si_snr: mean_defined(g.iter().map(|r| r.input_si_snr)),
                input_sdr: mean_defined(g.iter().map(|r| r.input_sdr)),
            })
            .collect();
        Self { rows, summary }
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Per-file rows to `rows_path`, per-bitrate means to `summary_path`.
    pub fn write_csv(&self, rows_path: &Path, summary_path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(rows_path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(rows_path, e))?;
        let mut w = csv::Writer::from_path(summary_path)?;
        for s in &self.summary {
            w.serialize(s)?;
        }
        w.flush().map_err(|e| Error::io(summary_path, e))
    }
}
