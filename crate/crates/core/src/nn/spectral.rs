//! STFT and iSTFT as differentiable tape operations.
//!
//! Spectra are real tensors `[T, F, 2]` holding (re, im) per frame and bin.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use ndarray::IxDyn;
use num_complex::Complex;

use super::tape::{Array, Var};
use crate::dsp::{consistent_len_range, reflect_pad, StftConfig, StftProcessor};
use crate::error::{Error, Result};

type ProcessorCache = HashMap<(usize, usize, usize), Rc<StftProcessor<f64>>>;

thread_local! {
    static PROCESSORS: RefCell<ProcessorCache> =
        RefCell::new(HashMap::new());
}

/// Cached `f64` processor for `cfg` (per thread).
pub fn processor(cfg: &StftConfig) -> Result<Rc<StftProcessor<f64>>> {
    let key = (cfg.window_len, cfg.hop_len, cfg.fft_len);
    if let Some(p) = PROCESSORS.with(|m| m.borrow().get(&key).cloned()) {
        return Ok(p);
    }
    let p = Rc::new(StftProcessor::new(*cfg)?);
    PROCESSORS.with(|m| m.borrow_mut().insert(key, p.clone()));
    Ok(p)
}

/// Plain STFT of `wave` into a `[T, F, 2]` array.
pub fn stft_array(wave: &[f64], cfg: &StftConfig) -> Result<Array> {
    let spec = processor(cfg)?.stft(wave)?;
    let (nb, frames) = spec.data.dim();
    let mut out = Array::zeros(IxDyn(&[frames, nb, 2]));
    for ((f, t), c) in spec.data.indexed_iter() {
        out[[t, f, 0]] = c.re;
        out[[t, f, 1]] = c.im;
    }
    Ok(out)
}

/// Differentiable STFT: `wave: [L]` -> `[T, F, 2]`.
pub fn stft<'t>(wave: Var<'t>, cfg: &StftConfig) -> Result<Var<'t>> {
    let shape = wave.shape();
    if shape.len() != 1 {
        return Err(Error::shape(format!("stft expects a 1-D waveform, got {shape:?}")));
    }
    let len = shape[0];
    let wv = wave.value();
    let y = stft_array(wv.as_slice().unwrap(), cfg)?;
    let proc_ = processor(cfg)?;
    let cfg = *cfg;
    let wi = wave.id();
    Ok(wave.tape().op(y, &[wave], move |g, s| {
        s.add_with(wi, || stft_backward(&proc_, &cfg, g, len))
    }))
}

fn stft_backward(proc_: &StftProcessor<f64>, cfg: &StftConfig, g: &Array, len: usize) -> Array {
    let (frames, nb) = (g.shape()[0], g.shape()[1]);
    let n = cfg.fft_len;
    let p = cfg.pad_len();
    let win = proc_.window();
    let mut gpad = vec![0.0; len + 2 * p];
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    for t in 0..frames {
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for f in 0..nb {
            buf[f] = Complex::new(g[[t, f, 0]], g[[t, f, 1]]);
        }
        proc_.fft_inverse(&mut buf);
        let start = t * cfg.hop_len;
        for m in 0..cfg.window_len {
            gpad[start + m] += buf[m].re * win[m];
        }
    }
    let src: Vec<usize> = reflect_pad(&(0..len).collect::<Vec<_>>(), p).expect("length checked by forward");
    let mut gw = vec![0.0; len];
    for (i, &j) in src.iter().enumerate() {
        gw[j] += gpad[i];
    }
    Array::from_shape_vec(IxDyn(&[len]), gw).unwrap()
}

/// Plain iSTFT of a `[T, F, 2]` array.
pub fn istft_array(spec: &Array, cfg: &StftConfig, out_len: usize) -> Result<Vec<f64>> {
    let proc_ = processor(cfg)?;
    let (frames, nb) = check_spec_shape(spec, cfg)?;
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
    let mut ola = vec![0.0; total];
    let mut buf = Vec::with_capacity(cfg.fft_len);
    let mut frame = vec![0.0; cfg.fft_len];
    let mut bins = vec![Complex::new(0.0, 0.0); nb];
    let win = proc_.window();
    for t in 0..frames {
        for (f, b) in bins.iter_mut().enumerate() {
            *b = Complex::new(spec[[t, f, 0]], spec[[t, f, 1]]);
        }
        proc_.inverse_frame(&bins, &mut buf, &mut frame);
        let start = t * cfg.hop_len;
        for m in 0..cfg.window_len {
            ola[start + m] += frame[m] * win[m];
        }
    }
    let env = proc_.window_envelope(frames);
    let p = cfg.pad_len();
    Ok((p..p + out_len).map(|i| ola[i] / env[i]).collect())
}

fn check_spec_shape(spec: &Array, cfg: &StftConfig) -> Result<(usize, usize)> {
    let s = spec.shape();
    if s.len() != 3 || s[1] != cfg.n_bins() || s[2] != 2 || s[0] == 0 {
        return Err(Error::shape(format!(
            "istft expects [T, {}, 2], got {s:?}",
            cfg.n_bins()
        )));
    }
    Ok((s[0], s[1]))
}

/// Differentiable iSTFT: `[T, F, 2]` -> `[out_len]`.
pub fn istft<'t>(spec: Var<'t>, cfg: &StftConfig, out_len: usize) -> Result<Var<'t>> {
    let sv = spec.value();
    let y = istft_array(&sv, cfg, out_len)?;
    let (frames, nb) = check_spec_shape(&sv, cfg)?;
    let proc_ = processor(cfg)?;
    let cfg = *cfg;
    let si = spec.id();
    let y = Array::from_shape_vec(IxDyn(&[out_len]), y).unwrap();
    Ok(spec.tape().op(y, &[spec], move |g, s| {
        s.add_with(si, || istft_backward(&proc_, &cfg, g, frames, nb))
    }))
}

fn istft_backward(proc_: &StftProcessor<f64>, cfg: &StftConfig, g: &Array, frames: usize, nb: usize) -> Array {
    let n = cfg.fft_len;
    let p = cfg.pad_len();
    let env = proc_.window_envelope(frames);
    let mut gola = vec![0.0; env.len()];
    for (i, &gv) in g.iter().enumerate() {
        gola[p + i] = gv / env[p + i];
    }
    let win = proc_.window();
    let mut out = Array::zeros(IxDyn(&[frames, nb, 2]));
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    let nyquist = n.is_multiple_of(2).then_some(n / 2);
    for t in 0..frames {
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        let start = t * cfg.hop_len;
        for m in 0..cfg.window_len {
            buf[m] = Complex::new(gola[start + m] * win[m], 0.0);
        }
        proc_.fft_forward(&mut buf);
        for f in 0..nb {
            let c = if f == 0 || Some(f) == nyquist { 1.0 } else { 2.0 } / n as f64;
            out[[t, f, 0]] = c * buf[f].re;
            out[[t, f, 1]] = if f == 0 || Some(f) == nyquist { 0.0 } else { c * buf[f].im };
        }
    }
    out
}
