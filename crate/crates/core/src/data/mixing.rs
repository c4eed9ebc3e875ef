use std::path::PathBuf;
use std::sync::Arc;

use rand::seq::index;
use rand::Rng;

use super::manifest::ManifestEntry;
use super::sad::{detect_activity, SadConfig, Segment};
use super::wav::read_wav;
use crate::error::{Error, Result};

pub const LIBRARY_SAMPLE_RATE: u32 = 44_100;

#[derive(Debug, Clone)]
pub struct StemRecord {
    pub track: String,
    pub stem: String,
    pub path: PathBuf,
    pub sample_rate: u32,
    pub segments: Vec<Segment>,
    audio: Arc<Vec<f64>>,
}

impl StemRecord {
    pub fn audio(&self) -> &[f64] {
        &self.audio
    }

    pub fn label(&self) -> String {
        format!("{}/{}", self.track, self.stem)
    }
}

/// Mono stems with their active regions, immutable once built.
#[derive(Debug, Clone)]
pub struct StemLibrary {
    sample_rate: u32,
    stems: Vec<StemRecord>,
}

impl StemLibrary {
    pub fn new(sample_rate: u32) -> Self {
        Self {
            sample_rate,
            stems: Vec::new(),
        }
    }

    /// Adds an in-memory stem, running activity detection on it.
    pub fn add(
        &mut self,
        track: impl Into<String>,
        stem: impl Into<String>,
        path: PathBuf,
        sample_rate: u32,
        audio: Vec<f64>,
        sad: &SadConfig,
    ) -> Result<()> {
        if sample_rate != self.sample_rate {
            return Err(Error::Data(format!(
                "{}: sample rate {sample_rate} Hz differs from library rate {} Hz",
                path.display(),
                self.sample_rate
            )));
        }
        if audio.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(path.display().to_string()));
        }
        let segments = detect_activity(&audio, sample_rate, sad);
        self.stems.push(StemRecord {
            track: track.into(),
            stem: stem.into(),
            path,
            sample_rate,
            segments,
            audio: Arc::new(audio),
        });
        Ok(())
    }

    /// Reads and downmixes every manifest entry.
    pub fn load(entries: &[ManifestEntry], sample_rate: u32, sad: &SadConfig) -> Result<Self> {
        let mut lib = Self::new(sample_rate);
        for e in entries {
            let audio = read_wav(&e.path)?;
            lib.add(&e.track, &e.stem, e.path.clone(), audio.sample_rate, audio.downmix(), sad)?;
        }
        Ok(lib)
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn stems(&self) -> &[StemRecord] {
        &self.stems
    }

    pub fn len(&self) -> usize {
        self.stems.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stems.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    pub wave: Vec<f64>,
    pub stems: Vec<String>,
    pub gains_db: Vec<f64>,
}

/// Sums 1..=`max_stems` distinct random stems, each a `clip_len` excerpt of
/// an active segment scaled by a gain uniform in `[-gain_db, gain_db]`.
pub fn sample_mixture<R: Rng + ?Sized>(
    lib: &StemLibrary,
    rng: &mut R,
    clip_len: usize,
    max_stems: usize,
    gain_db: f64,
) -> Result<Mixture> {
    if lib.is_empty() {
        return Err(Error::Data("stem library is empty".into()));
    }
    let active: Vec<&StemRecord> = lib.stems.iter().filter(|s| !s.segments.is_empty()).collect();
    if active.is_empty() {
        return Err(Error::Data("no stem has an active segment".into()));
    }
    let count = rng.random_range(1..=max_stems.max(1)).min(active.len());
    let mut wave = vec![0.0; clip_len];
    let mut stems = Vec::with_capacity(count);
    let mut gains_db = Vec::with_capacity(count);
    for i in index::sample(rng, active.len(), count) {
        let rec = active[i];
        let total: usize = rec.segments.iter().map(Segment::len).sum();
        let mut pick = rng.random_range(0..total);
        let seg = rec
            .segments
            .iter()
            .find(|s| {
                if pick < s.len() {
                    true
                } else {
                    pick -= s.len();
                    false
                }
            })
            .expect("pick within total");
        let start = seg.start + rng.random_range(0..=seg.len().saturating_sub(clip_len));
        let g = if gain_db > 0.0 {
            rng.random_range(-gain_db..=gain_db)
        } else {
            0.0
        };
        let scale = 10f64.powf(g / 20.0);
        let audio = rec.audio();
        let end = (start + clip_len).min(audio.len());
        for (w, a) in wave.iter_mut().zip(&audio[start..end]) {
            *w += scale * a;
        }
        stems.push(rec.label());
        gains_db.push(g);
    }
    Ok(Mixture { wave, stems, gains_db })
}
