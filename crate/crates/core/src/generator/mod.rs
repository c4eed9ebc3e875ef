//! Band-split restoration generator.
//!
//! Internally activations are laid out `[T, K, N]` (frames, bands, features)
//! and spectra `[T, F, 2]`. Parameter names:
//!
//! - `gen/enc/{k}/{norm,w,b}` per-band bottleneck
//! - `gen/bs/{b}/attn/...` band Roformer of module `b`
//! - `gen/bs/{b}/tcn/{j}/...` shared TCN block `j` of module `b`
//! - `gen/dec/{k}/{norm,w,b}` per-band reconstruction head

mod streaming;

pub use streaming::StreamingSession;

use std::sync::Arc;

use ndarray::{Axis, IxDyn, Slice};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{make_band_plan, BandPlan, StftConfig};
use crate::error::{Error, Result};
use crate::nn::{
    self, spectral, uniform_init, Array, AttentionWeights, Bound, Conv1dSpec, PaddingMode, ParameterStore, Tape,
    Var,
};

/// Frames per block of offline inference.
pub const INFER_CHUNK_FRAMES: usize = 128;

/// Magnitude floor of the gain-shape features.
pub const EPS_MAG: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TcnConfig {
    pub blocks: usize,
    /// Layers per block: in-projection, depthwise dilated conv, out-projection.
    pub layers_per_block: usize,
    pub kernel: usize,
    /// Hidden width as a multiple of the feature dimension.
    pub hidden_mult: usize,
    pub dilations: Vec<usize>,
}

impl Default for TcnConfig {
    fn default() -> Self {
        Self {
            blocks: 3,
            layers_per_block: 3,
            kernel: 3,
            hidden_mult: 4,
            dilations: vec![1, 2, 4],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttentionConfig {
    pub heads: usize,
    pub ffn_mult: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self { heads: 8, ffn_mult: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub bandwidth_hz: f64,
    pub feature_dim: usize,
    pub depth: usize,
    pub tcn: TcnConfig,
    pub attention: AttentionConfig,
    pub causal: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            bandwidth_hz: 160.0,
            feature_dim: 256,
            depth: 6,
            tcn: TcnConfig::default(),
            attention: AttentionConfig::default(),
            causal: false,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::arg(m));
        if self.feature_dim == 0 {
            return bad("feature_dim must be positive".into());
        }
        if self.depth == 0 {
            return bad("depth must be at least 1".into());
        }
        let t = &self.tcn;
        if t.layers_per_block != 3 {
            return bad(format!("tcn.layers_per_block must be 3, got {}", t.layers_per_block));
        }
        if t.blocks == 0 || t.dilations.len() != t.blocks {
            return bad(format!(
                "tcn.dilations needs one entry per block ({} blocks, {} dilations)",
                t.blocks,
                t.dilations.len()
            ));
        }
        if t.kernel == 0 || t.hidden_mult == 0 || t.dilations.contains(&0) {
            return bad("tcn kernel, hidden_mult and dilations must be positive".into());
        }
        let a = &self.attention;
        if a.heads == 0 || !self.feature_dim.is_multiple_of(a.heads) || !(self.feature_dim / a.heads).is_multiple_of(2) {
            return bad(format!(
                "feature_dim {} must split into {} heads of even width",
                self.feature_dim, a.heads
            ));
        }
        if a.ffn_mult == 0 {
            return bad("attention.ffn_mult must be positive".into());
        }
        Ok(())
    }
}

/// History of depthwise-conv inputs carried across streaming calls, one entry
/// per (module, block), each `[(kernel - 1) * dilation, K, hidden]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TcnState {
    pub history: Vec<Array>,
}

pub struct Generator {
    cfg: GeneratorConfig,
    stft: StftConfig,
    plan: BandPlan,
    spec_scale: f64,
}

impl Generator {
    pub fn new(stft: StftConfig, cfg: GeneratorConfig) -> Result<Self> {
        stft.validate()?;
        cfg.validate()?;
        let plan = make_band_plan(&stft, cfg.bandwidth_hz)?;
        let window: Vec<f64> = stft.window.build(stft.window_len);
        let spec_scale = window.iter().map(|w| w * w).sum::<f64>().sqrt();
        Ok(Self {
            cfg,
            stft,
            plan,
            spec_scale,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn stft_config(&self) -> &StftConfig {
        &self.stft
    }

    pub fn plan(&self) -> &BandPlan {
        &self.plan
    }

    /// Fixed scale between raw STFT values and the network's spectral domain.
    pub fn spec_scale(&self) -> f64 {
        self.spec_scale
    }

    fn hidden(&self) -> usize {
        self.cfg.tcn.hidden_mult * self.cfg.feature_dim
    }

    /// Fresh parameters: uniform fan-in init for weights, zero biases, unit norms.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ParameterStore> {
        let n = self.cfg.feature_dim;
        let h = self.hidden();
        let f = n * self.cfg.attention.ffn_mult;
        let k = self.cfg.tcn.kernel;
        let mut s = ParameterStore::new();
        let ones = |len: usize| Array::ones(IxDyn(&[len]));
        let zeros = |len: usize| Array::zeros(IxDyn(&[len]));
        for (band, &m) in self.plan.bins_per_band.iter().enumerate() {
            let p = format!("gen/enc/{band}");
            s.insert(format!("{p}/norm"), ones(3 * m), true)?;
            s.insert(format!("{p}/w"), uniform_init(rng, &[3 * m, n], 3 * m), true)?;
            s.insert(format!("{p}/b"), zeros(n), true)?;
        }
        for b in 0..self.cfg.depth {
            let p = format!("gen/bs/{b}/attn");
            s.insert(format!("{p}/norm1"), ones(n), true)?;
            for proj in ["q", "k", "v", "o"] {
                s.insert(format!("{p}/w{proj}"), uniform_init(rng, &[n, n], n), true)?;
                s.insert(format!("{p}/b{proj}"), zeros(n), true)?;
            }
            s.insert(format!("{p}/norm2"), ones(n), true)?;
            s.insert(format!("{p}/ffn_w1"), uniform_init(rng, &[n, f], n), true)?;
            s.insert(format!("{p}/ffn_b1"), zeros(f), true)?;
            s.insert(format!("{p}/ffn_w2"), uniform_init(rng, &[f, n], f), true)?;
            s.insert(format!("{p}/ffn_b2"), zeros(n), true)?;
            for j in 0..self.cfg.tcn.blocks {
                let p = format!("gen/bs/{b}/tcn/{j}");
                s.insert(format!("{p}/norm"), ones(n), true)?;
                s.insert(format!("{p}/w_in"), uniform_init(rng, &[n, h], n), true)?;
                s.insert(format!("{p}/b_in"), zeros(h), true)?;
                s.insert(format!("{p}/dw_w"), uniform_init(rng, &[h, 1, k], k), true)?;
                s.insert(format!("{p}/dw_b"), zeros(h), true)?;
                s.insert(format!("{p}/w_out"), uniform_init(rng, &[h, n], h), true)?;
                s.insert(format!("{p}/b_out"), zeros(n), true)?;
            }
        }
        for (band, &m) in self.plan.bins_per_band.iter().enumerate() {
            let p = format!("gen/dec/{band}");
            s.insert(format!("{p}/norm"), ones(n), true)?;
            s.insert(format!("{p}/w"), uniform_init(rng, &[n, 4 * m], n), true)?;
            s.insert(format!("{p}/b"), zeros(4 * m), true)?;
        }
        Ok(s)
    }

    /// Gain-shape features per band, each `[T, 3, M_k]`, of a raw `[T, F, 2]` spectrum.
    pub fn gain_shapes<'t>(&self, spec: Var<'t>) -> Result<Vec<Var<'t>>> {
        let s = spec.shape();
        if s.len() != 3 || s[1] != self.plan.n_bins() || s[2] != 2 {
            return Err(Error::shape(format!(
                "expected spectrum [T, {}, 2], got {s:?}",
                self.plan.n_bins()
            )));
        }
        let scaled = spec.scale(1.0 / self.spec_scale);
        self.plan
            .band_edges
            .iter()
            .map(|&(lo, hi)| nn::gain_shape(scaled.slice_axis(1, lo, hi)?, EPS_MAG))
            .collect()
    }

    /// Per-band RMSNorm + linear bottleneck, stacked to `[T, K, N]`.
    pub fn band_encode<'t>(&self, p: &Bound<'t>, gs: &[Var<'t>]) -> Result<Var<'t>> {
        if gs.len() != self.plan.n_bands() {
            return Err(Error::shape(format!(
                "{} gain-shape bands for a {}-band plan",
                gs.len(),
                self.plan.n_bands()
            )));
        }
        let mut out = Vec::with_capacity(gs.len());
        for (band, (g, &m)) in gs.iter().zip(&self.plan.bins_per_band).enumerate() {
            let s = g.shape();
            if s.len() != 3 || s[1] != 3 || s[2] != m {
                return Err(Error::shape(format!("band {band}: expected [T, 3, {m}], got {s:?}")));
            }
            let flat = g.reshape(&[s[0], 3 * m])?;
            let pre = format!("gen/enc/{band}");
            let h = nn::rms_norm(flat, p.var(&format!("{pre}/norm"))?)?;
            out.push(nn::linear(h, p.var(&format!("{pre}/w"))?, Some(p.var(&format!("{pre}/b"))?))?);
        }
        Var::stack(&out, 1)
    }

    /// Residual band Roformer (per frame, over bands).
    pub fn band_roformer<'t>(&self, p: &Bound<'t>, module: usize, z: Var<'t>) -> Result<Var<'t>> {
        let pre = format!("gen/bs/{module}/attn");
        let v = |name: &str| p.var(&format!("{pre}/{name}"));
        let w = AttentionWeights {
            wq: v("wq")?,
            bq: v("bq")?,
            wk: v("wk")?,
            bk: v("bk")?,
            wv: v("wv")?,
            bv: v("bv")?,
            wo: v("wo")?,
            bo: v("bo")?,
        };
        let h = nn::rms_norm(z, v("norm1")?)?;
        let z = z.add(nn::multi_head_attention(h, &w, self.cfg.attention.heads, false)?)?;
        let h = nn::rms_norm(z, v("norm2")?)?;
        let h = nn::linear(h, v("ffn_w1")?, Some(v("ffn_b1")?))?.gelu();
        z.add(nn::linear(h, v("ffn_w2")?, Some(v("ffn_b2")?))?)
    }

    /// Shared TCN over time (bands act as the batch axis). With `state`, the
    /// depthwise convolutions consume stored left context instead of padding.
    pub fn tcn<'t>(
        &self,
        p: &Bound<'t>,
        module: usize,
        mut z: Var<'t>,
        mut state: Option<&mut TcnState>,
    ) -> Result<Var<'t>> {
        for j in 0..self.cfg.tcn.blocks {
            z = self.tcn_block(p, module, j, z, state.as_deref_mut())?;
        }
        Ok(z)
    }

    /// Residual TCN block `j` of module `module`.
    pub fn tcn_block<'t>(
        &self,
        p: &Bound<'t>,
        module: usize,
        j: usize,
        z: Var<'t>,
        state: Option<&mut TcnState>,
    ) -> Result<Var<'t>> {
        let k = self.cfg.tcn.kernel;
        let h = self.hidden();
        let dil = self.cfg.tcn.dilations[j];
        let pre = format!("gen/bs/{module}/tcn/{j}");
        let v = |name: &str| p.var(&format!("{pre}/{name}"));
        let x = nn::rms_norm(z, v("norm")?)?;
        let x = nn::linear(x, v("w_in")?, Some(v("b_in")?))?.gelu();
        let x = match state {
            Some(st) => {
                let slot = &mut st.history[module * self.cfg.tcn.blocks + j];
                let ctx = slot.shape()[0];
                let full = Var::concat(&[p.tape().constant(slot.clone()), x], 0)?;
                let fv = full.value();
                let total = fv.shape()[0];
                *slot = fv
                    .slice_axis(ndarray::Axis(0), ndarray::Slice::from(total - ctx..total))
                    .to_owned();
                nn::conv1d(full, v("dw_w")?, Some(v("dw_b")?), Conv1dSpec::valid(h, dil))?
            }
            None => nn::conv1d(x, v("dw_w")?, Some(v("dw_b")?), Conv1dSpec::new(k, 1, dil, self.padding(), h))?,
        };
        let x = nn::linear(x.gelu(), v("w_out")?, Some(v("b_out")?))?;
        z.add(x)
    }

    fn padding(&self) -> PaddingMode {
        if self.cfg.causal {
            PaddingMode::Causal
        } else {
            PaddingMode::Same
        }
    }

    /// Frames of past and future input that one output frame depends on.
    pub fn context_frames(&self) -> (usize, usize) {
        let (mut left, mut right) = (0, 0);
        for &d in &self.cfg.tcn.dilations {
            let spec = Conv1dSpec::new(self.cfg.tcn.kernel, 1, d, self.padding(), 1);
            left += spec.pad_left;
            right += spec.pad_right;
        }
        (left * self.cfg.depth, right * self.cfg.depth)
    }

    /// One band-sequence module: band Roformer, then the shared TCN.
    pub fn bs_module<'t>(
        &self,
        p: &Bound<'t>,
        module: usize,
        z: Var<'t>,
        state: Option<&mut TcnState>,
    ) -> Result<Var<'t>> {
        let z = self.band_roformer(p, module, z)?;
        self.tcn(p, module, z, state)
    }

    /// Per-band RMSNorm + linear + GLU heads, merged to a raw `[T, F, 2]` spectrum.
    pub fn band_decode<'t>(&self, p: &Bound<'t>, q: Var<'t>) -> Result<Var<'t>> {
        let s = q.shape();
        let (kn, n) = (self.plan.n_bands(), self.cfg.feature_dim);
        if s.len() != 3 || s[1] != kn || s[2] != n {
            return Err(Error::shape(format!("expected [T, {kn}, {n}], got {s:?}")));
        }
        let t = s[0];
        let mut bands = Vec::with_capacity(kn);
        for (band, &m) in self.plan.bins_per_band.iter().enumerate() {
            let pre = format!("gen/dec/{band}");
            let x = q.slice_axis(1, band, band + 1)?.reshape(&[t, n])?;
            let x = nn::rms_norm(x, p.var(&format!("{pre}/norm"))?)?;
            let x = nn::linear(x, p.var(&format!("{pre}/w"))?, Some(p.var(&format!("{pre}/b"))?))?;
            // [T, 2M] -> (re, im) pairs [T, M, 2]
            let x = nn::glu(x)?.reshape(&[t, 2, m])?.permute(&[0, 2, 1])?;
            bands.push(x);
        }
        Ok(Var::concat(&bands, 1)?.scale(self.spec_scale))
    }

    pub fn new_state(&self) -> TcnState {
        let kn = self.plan.n_bands();
        let ctx = |d: usize| (self.cfg.tcn.kernel - 1) * d;
        TcnState {
            history: (0..self.cfg.depth)
                .flat_map(|_| self.cfg.tcn.dilations.iter().map(|&d| ctx(d)))
                .map(|c| Array::zeros(IxDyn(&[c, kn, self.hidden()])))
                .collect(),
        }
    }

    /// Spectrum-to-spectrum mapping shared by the offline and streaming paths.
    pub fn forward_spec<'t>(
        &self,
        p: &Bound<'t>,
        spec: Var<'t>,
        mut state: Option<&mut TcnState>,
    ) -> Result<Var<'t>> {
        let gs = self.gain_shapes(spec)?;
        let mut z = self.band_encode(p, &gs)?;
        for b in 0..self.cfg.depth {
            z = self.bs_module(p, b, z, state.as_deref_mut())?;
        }
        self.band_decode(p, z)
    }

    /// Waveform `[L]` to restored waveform `[L]`.
    pub fn forward<'t>(&self, p: &Bound<'t>, wave: Var<'t>) -> Result<Var<'t>> {
        let len = wave.shape().first().copied().unwrap_or(0);
        let spec = spectral::stft(wave, &self.stft)?;
        let out = self.forward_spec(p, spec, None)?;
        spectral::istft(out, &self.stft, len)
    }

    /// Runs `f` on a throwaway inference tape so its intermediates are freed
    /// as soon as the stage ends.
    fn stage<F>(&self, params: &ParameterStore, x: Array, f: F) -> Result<Array>
    where
        F: for<'t> FnOnce(&Bound<'t>, Var<'t>) -> Result<Var<'t>>,
    {
        let tape = Tape::inference();
        let p = params.bind_frozen(&tape);
        let y = f(&p, tape.constant(x))?.value();
        drop(p);
        drop(tape);
        Ok(Arc::try_unwrap(y).unwrap_or_else(|a| (*a).clone()))
    }

    /// Same mapping as [`forward_spec`](Self::forward_spec) without gradient
    /// tracking, holding only one stage's activations at a time.
    pub fn infer_spec(
        &self,
        params: &ParameterStore,
        spec: Array,
        mut state: Option<&mut TcnState>,
    ) -> Result<Array> {
        let mut z = self.stage(params, spec, |p, x| {
            let gs = self.gain_shapes(x)?;
            self.band_encode(p, &gs)
        })?;
        for b in 0..self.cfg.depth {
            z = self.stage(params, z, |p, x| self.band_roformer(p, b, x))?;
            for j in 0..self.cfg.tcn.blocks {
                let st = state.as_deref_mut();
                z = self.stage(params, z, |p, x| self.tcn_block(p, b, j, x, st))?;
            }
        }
        self.stage(params, z, |p, x| self.band_decode(p, x))
    }

    /// Inference on a plain slice. Long inputs are processed in blocks of
    /// [`INFER_CHUNK_FRAMES`] frames with enough context that the result
    /// equals the whole-signal forward pass.
    pub fn restore(&self, params: &ParameterStore, wave: &[f64]) -> Result<Vec<f64>> {
        let spec = spectral::stft_array(wave, &self.stft)?;
        let frames = spec.shape()[0];
        let (left, right) = self.context_frames();
        let mut out = Array::zeros(IxDyn(&[frames, self.plan.n_bins(), 2]));
        let mut a = 0;
        while a < frames {
            let b = (a + INFER_CHUNK_FRAMES).min(frames);
            let (lo, hi) = (a.saturating_sub(left), (b + right).min(frames));
            let part = spec.slice_axis(Axis(0), Slice::from(lo..hi)).to_owned();
            let y = self.infer_spec(params, part, None)?;
            out.slice_axis_mut(Axis(0), Slice::from(a..b))
                .assign(&y.slice_axis(Axis(0), Slice::from(a - lo..b - lo)));
            a = b;
        }
        spectral::istft_array(&out, &self.stft, wave.len())
    }

    pub fn streaming_session<'a>(&'a self, params: &'a ParameterStore) -> Result<StreamingSession<'a>> {
        StreamingSession::new(self, params)
    }
}
