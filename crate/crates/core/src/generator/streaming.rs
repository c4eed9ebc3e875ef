use ndarray::IxDyn;
use num_complex::Complex;

use super::{Generator, TcnState};
use crate::dsp::StftProcessor;
use crate::error::{Error, Result};
use crate::nn::{spectral, Array, ParameterStore};

/// Incremental causal restoration. Feed audio with [`push`](Self::push) and
/// close the stream with [`finish`](Self::finish); the concatenated outputs
/// match the offline causal forward pass.
pub struct StreamingSession<'a> {
    gen: &'a Generator,
    params: &'a ParameterStore,
    proc_: std::rc::Rc<StftProcessor<f64>>,
    state: TcnState,
    /// Raw samples until the left reflect padding can be formed.
    head: Vec<f64>,
    /// Padded-domain input, `padded[0]` sits at absolute index `padded_start`.
    padded: Vec<f64>,
    padded_start: usize,
    /// Overlap-add accumulator, `ola[0]` sits at absolute index `ola_start`.
    ola: Vec<f64>,
    ola_start: usize,
    next_frame: usize,
    received: usize,
    emitted: usize,
}

impl<'a> StreamingSession<'a> {
    pub fn new(gen: &'a Generator, params: &'a ParameterStore) -> Result<Self> {
        if !gen.config().causal {
            return Err(Error::arg("streaming requires a causal generator configuration"));
        }
        Ok(Self {
            gen,
            params,
            proc_: spectral::processor(gen.stft_config())?,
            state: gen.new_state(),
            head: Vec::new(),
            padded: Vec::new(),
            padded_start: 0,
            ola: Vec::new(),
            ola_start: 0,
            next_frame: 0,
            received: 0,
            emitted: 0,
        })
    }

    /// Samples between an input sample arriving and its restored value
    /// becoming available (at most one window).
    pub fn latency_samples(&self) -> usize {
        let cfg = self.gen.stft_config();
        cfg.pad_len() + 1
    }

    pub fn reset(&mut self) {
        self.state = self.gen.new_state();
        self.head.clear();
        self.padded.clear();
        self.padded_start = 0;
        self.ola.clear();
        self.ola_start = 0;
        self.next_frame = 0;
        self.received = 0;
        self.emitted = 0;
    }

    pub fn push(&mut self, chunk: &[f64]) -> Result<Vec<f64>> {
        if chunk.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("streaming input".into()));
        }
        let p = self.gen.stft_config().pad_len();
        self.received += chunk.len();
        if self.padded.is_empty() && self.padded_start == 0 {
            self.head.extend_from_slice(chunk);
            if self.head.len() <= p {
                return Ok(Vec::new());
            }
            let head = std::mem::take(&mut self.head);
            self.padded.extend((0..p).map(|i| head[p - i]));
            self.padded.extend_from_slice(&head);
        } else {
            self.padded.extend_from_slice(chunk);
        }
        self.run_frames(None)?;
        Ok(self.emit(None))
    }

    /// Flushes the tail (right reflect padding) and resets the session.
    pub fn finish(&mut self) -> Result<Vec<f64>> {
        let cfg = *self.gen.stft_config();
        let len = self.received;
        if len == 0 {
            self.reset();
            return Ok(Vec::new());
        }
        if len < cfg.window_len {
            let err = Error::SignalTooShort {
                len,
                window: cfg.window_len,
            };
            self.reset();
            return Err(err);
        }
        let p = cfg.pad_len();
        // last p + 1 original samples live at the end of `padded`
        let n = self.padded.len();
        let tail: Vec<f64> = (0..p).map(|i| self.padded[n - 2 - i]).collect();
        self.padded.extend(tail);
        let frames = cfg.n_frames(len);
        self.run_frames(Some(frames))?;
        let out = self.emit(Some((len, frames)));
        self.reset();
        Ok(out)
    }

    fn run_frames(&mut self, limit: Option<usize>) -> Result<()> {
        let cfg = *self.gen.stft_config();
        let (win, hop, nb) = (cfg.window_len, cfg.hop_len, cfg.n_bins());
        let end_abs = self.padded_start + self.padded.len();
        let mut last = if end_abs >= win { (end_abs - win) / hop + 1 } else { 0 };
        if let Some(t) = limit {
            last = last.min(t);
        }
        if last <= self.next_frame {
            return Ok(());
        }
        let count = last - self.next_frame;
        let mut spec = Array::zeros(IxDyn(&[count, nb, 2]));
        let mut buf = Vec::with_capacity(cfg.fft_len);
        let mut col = vec![Complex::new(0.0, 0.0); nb];
        for (i, f) in (self.next_frame..last).enumerate() {
            let s = f * hop - self.padded_start;
            self.proc_.forward_frame(&self.padded[s..s + win], &mut buf, &mut col);
            for (b, c) in col.iter().enumerate() {
                spec[[i, b, 0]] = c.re;
                spec[[i, b, 1]] = c.im;
            }
        }
        let out = self.gen.infer_spec(self.params, spec, Some(&mut self.state))?;
        let mut frame = vec![0.0; cfg.fft_len];
        let window = self.proc_.window().to_vec();
        let need = last * hop + win - self.ola_start;
        if self.ola.len() < need {
            self.ola.resize(need, 0.0);
        }
        for (i, f) in (self.next_frame..last).enumerate() {
            for (b, c) in col.iter_mut().enumerate() {
                *c = Complex::new(out[[i, b, 0]], out[[i, b, 1]]);
            }
            self.proc_.inverse_frame(&col, &mut buf, &mut frame);
            let s = f * hop - self.ola_start;
            for m in 0..win {
                self.ola[s + m] += frame[m] * window[m];
            }
        }
        self.next_frame = last;
        // drop input no later frame needs, keeping p + 1 samples for the tail pad
        let keep_from = (self.next_frame * hop).min(end_abs.saturating_sub(cfg.pad_len() + 1));
        if keep_from > self.padded_start {
            self.padded.drain(..keep_from - self.padded_start);
            self.padded_start = keep_from;
        }
        Ok(())
    }

    fn envelope_at(&self, i: usize, frames: Option<usize>) -> f64 {
        let cfg = self.gen.stft_config();
        let (win, hop) = (cfg.window_len, cfg.hop_len);
        let w = self.proc_.window();
        let first = (i + 1).saturating_sub(win).div_ceil(hop);
        let mut last = i / hop;
        if let Some(t) = frames {
            last = last.min(t - 1);
        }
        (first..=last).map(|f| w[i - f * hop] * w[i - f * hop]).sum()
    }

    fn emit(&mut self, done: Option<(usize, usize)>) -> Vec<f64> {
        let cfg = *self.gen.stft_config();
        let p = cfg.pad_len();
        // padded positions below `ready` receive no further contributions
        let ready = match done {
            Some((len, _)) => p + len,
            None => self.next_frame * cfg.hop_len,
        };
        let frames = done.map(|(_, t)| t);
        let from = p + self.emitted;
        if ready <= from {
            return Vec::new();
        }
        let out: Vec<f64> = (from..ready)
            .map(|i| self.ola[i - self.ola_start] / self.envelope_at(i, frames))
            .collect();
        self.emitted += out.len();
        if ready > self.ola_start {
            self.ola.drain(..ready - self.ola_start);
            self.ola_start = ready;
        }
        out
    }
}
