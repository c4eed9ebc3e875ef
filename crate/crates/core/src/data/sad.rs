use serde::{Deserialize, Serialize};

/// Half-open sample range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SadConfig {
    pub window_s: f64,
    pub hop_s: f64,
    /// Windows within this many dB of the loudest window count as active.
    pub threshold_db: f64,
    pub merge_gap_s: f64,
}

impl Default for SadConfig {
    fn default() -> Self {
        Self {
            window_s: 0.5,
            hop_s: 0.25,
            threshold_db: 40.0,
            merge_gap_s: 0.25,
        }
    }
}

/// Energy-based source activity detection.
pub fn detect_activity(wave: &[f64], sample_rate: u32, cfg: &SadConfig) -> Vec<Segment> {
    let sr = sample_rate as f64;
    let win = ((cfg.window_s * sr).round() as usize).max(1);
    let hop = ((cfg.hop_s * sr).round() as usize).max(1);
    let gap = (cfg.merge_gap_s * sr).round() as usize;
    let len = wave.len();
    if len == 0 {
        return Vec::new();
    }
    let mut starts = vec![0];
    while starts.last().unwrap() + win < len {
        starts.push(starts.last().unwrap() + hop);
    }
    let rms: Vec<f64> = starts
        .iter()
        .map(|&s| {
            let e = (s + win).min(len);
            (wave[s..e].iter().map(|v| v * v).sum::<f64>() / (e - s) as f64).sqrt()
        })
        .collect();
    let peak = rms.iter().cloned().fold(0.0, f64::max);
    if peak <= 0.0 {
        return Vec::new();
    }
    let thresh = peak * 10f64.powf(-cfg.threshold_db / 20.0);
    let mut segs: Vec<Segment> = Vec::new();
    for (&s, &r) in starts.iter().zip(&rms) {
        if r <= thresh {
            continue;
        }
        let seg = Segment {
            start: s,
            end: (s + win).min(len),
        };
        match segs.last_mut() {
            Some(last) if seg.start <= last.end + gap => last.end = last.end.max(seg.end),
            _ => segs.push(seg),
        }
    }
    segs
}
