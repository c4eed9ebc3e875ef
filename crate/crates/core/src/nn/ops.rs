//! Differentiable layer primitives recorded on a [`Tape`](super::Tape).

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView2, Axis, Ix2, IxDyn};

use super::tape::{sigmoid, Array, Var};
use crate::error::{Error, Result};

pub const RMS_EPS: f64 = 1e-8;
pub const ROTARY_BASE: f64 = 10_000.0;

fn as_2d(a: &Array, cols: usize) -> ArrayView2<'_, f64> {
    a.view()
        .into_shape_with_order((a.len() / cols.max(1), cols))
        .expect("contiguous activation")
}

/// Owned array in standard layout reshaped to `shape`.
fn reshaped<D: ndarray::Dimension>(a: ndarray::Array<f64, D>, shape: &[usize]) -> Array {
    a.as_standard_layout()
        .into_owned()
        .into_dyn()
        .into_shape_with_order(IxDyn(shape))
        .expect("element count preserved")
}

fn last_dim(v: &Var<'_>, op: &str) -> Result<usize> {
    v.shape()
        .last()
        .copied()
        .ok_or_else(|| Error::shape(format!("{op} on a scalar")))
}

/// `x @ w (+ b)` over the last axis; `w` is `[in, out]`.
pub fn linear<'t>(x: Var<'t>, w: Var<'t>, b: Option<Var<'t>>) -> Result<Var<'t>> {
    let xs = x.shape();
    let ws = w.shape();
    let n_in = last_dim(&x, "linear")?;
    if ws.len() != 2 || ws[0] != n_in {
        return Err(Error::shape(format!("linear: input {xs:?} vs weight {ws:?}")));
    }
    let n_out = ws[1];
    let (xv, wv) = (x.value(), w.value());
    let x2 = as_2d(&xv, n_in);
    let w2 = wv.view().into_dimensionality::<Ix2>().unwrap();
    let y2 = x2.dot(&w2);
    let mut out_shape = xs.clone();
    *out_shape.last_mut().unwrap() = n_out;
    let y = reshaped(y2, &out_shape);
    let (xi, wi) = (x.id(), w.id());
    let mm = x.tape().op(y, &[x, w], move |g, s| {
        let g2 = as_2d(g, n_out);
        s.add_with(xi, || {
            let w2 = wv.view().into_dimensionality::<Ix2>().unwrap();
            reshaped(g2.dot(&w2.t()), &xs)
        });
        s.add_with(wi, || as_2d(&xv, n_in).t().dot(&g2).into_dyn());
    });
    match b {
        Some(b) => mm.add_bias(b),
        None => Ok(mm),
    }
}

/// `gain * x / sqrt(mean(x^2) + eps)` over the last axis.
pub fn rms_norm<'t>(x: Var<'t>, gain: Var<'t>) -> Result<Var<'t>> {
    let n = last_dim(&x, "rms_norm")?;
    if n == 0 || x.value().is_empty() {
        return Err(Error::shape("rms_norm over a zero-size dimension".to_string()));
    }
    if gain.shape() != [n] {
        return Err(Error::shape(format!(
            "rms_norm: gain {:?} vs last dim {n}",
            gain.shape()
        )));
    }
    let xv = x.value();
    let gv = gain.value();
    let rows = xv.len() / n;
    let x2 = as_2d(&xv, n);
    let mut xhat = Array2::<f64>::zeros((rows, n));
    let mut inv_r = Array1::<f64>::zeros(rows);
    for (r, (xr, mut hr)) in x2.rows().into_iter().zip(xhat.rows_mut()).enumerate() {
        let ms = xr.iter().map(|v| v * v).sum::<f64>() / n as f64;
        let ir = 1.0 / (ms + RMS_EPS).sqrt();
        inv_r[r] = ir;
        hr.iter_mut().zip(xr).for_each(|(h, &v)| *h = v * ir);
    }
    let g1 = gv.view().into_shape_with_order(n).unwrap().to_owned();
    let y = reshaped(&xhat * &g1, &x.shape());
    let shape = x.shape();
    let (xi, gi) = (x.id(), gain.id());
    Ok(x.tape().op(y, &[x, gain], move |g, s| {
        let g2 = as_2d(g, n);
        s.add_with(gi, || (&g2 * &xhat).sum_axis(Axis(0)).into_dyn());
        s.add_with(xi, || {
            let mut dx = Array2::<f64>::zeros((rows, n));
            for r in 0..rows {
                let (gr, hr) = (g2.row(r), xhat.row(r));
                let dot: f64 = (0..n).map(|j| gr[j] * g1[j] * hr[j]).sum::<f64>() / n as f64;
                for j in 0..n {
                    dx[[r, j]] = (gr[j] * g1[j] - hr[j] * dot) * inv_r[r];
                }
            }
            reshaped(dx, &shape)
        });
    }))
}

/// Gated linear unit: `a * sigmoid(b)` with `[a; b]` split on the last axis.
pub fn glu(x: Var<'_>) -> Result<Var<'_>> {
    let n2 = last_dim(&x, "glu")?;
    if n2 % 2 != 0 {
        return Err(Error::shape(format!("glu needs an even last dim, got {n2}")));
    }
    let h = n2 / 2;
    let xv = x.value();
    let x2 = as_2d(&xv, n2);
    let rows = x2.nrows();
    let mut y = Array2::<f64>::zeros((rows, h));
    for r in 0..rows {
        for j in 0..h {
            y[[r, j]] = x2[[r, j]] * sigmoid(x2[[r, j + h]]);
        }
    }
    let mut out_shape = x.shape();
    *out_shape.last_mut().unwrap() = h;
    let in_shape = x.shape();
    let xi = x.id();
    Ok(x.tape().op(
        reshaped(y, &out_shape),
        &[x],
        move |g, s| {
            s.add_with(xi, || {
                let x2 = as_2d(&xv, n2);
                let g2 = as_2d(g, h);
                let mut d = Array2::<f64>::zeros((rows, n2));
                for r in 0..rows {
                    for j in 0..h {
                        let (a, sb) = (x2[[r, j]], sigmoid(x2[[r, j + h]]));
                        d[[r, j]] = g2[[r, j]] * sb;
                        d[[r, j + h]] = g2[[r, j]] * a * sb * (1.0 - sb);
                    }
                }
                reshaped(d, &in_shape)
            })
        },
    ))
}

/// Rotation angles `pos * base^(-2i/d)` for each position and pair index.
fn rotary_table(positions: &[f64], d: usize) -> (Array2<f64>, Array2<f64>) {
    let half = d / 2;
    let mut cos = Array2::zeros((positions.len(), half));
    let mut sin = Array2::zeros((positions.len(), half));
    for (p, &pos) in positions.iter().enumerate() {
        for i in 0..half {
            let theta = pos * ROTARY_BASE.powf(-2.0 * i as f64 / d as f64);
            cos[[p, i]] = theta.cos();
            sin[[p, i]] = theta.sin();
        }
    }
    (cos, sin)
}

fn rotate_pairs(x: &Array, seq: usize, d: usize, cos: &Array2<f64>, sin: &Array2<f64>, inverse: bool) -> Array {
    // x: [B, S, H, d] flattened as (B, S, H*d)
    let mut y = x.as_standard_layout().into_owned();
    let shape = y.shape().to_vec();
    let inner = y.len() / (shape[0] * seq);
    let heads = inner / d;
    let sign = if inverse { -1.0 } else { 1.0 };
    let flat = y.as_slice_mut().unwrap();
    for b in 0..shape[0] {
        for p in 0..seq {
            let base = (b * seq + p) * inner;
            for h in 0..heads {
                for i in 0..d / 2 {
                    let (c, sn) = (cos[[p, i]], sign * sin[[p, i]]);
                    let k = base + h * d + 2 * i;
                    let (x0, x1) = (flat[k], flat[k + 1]);
                    flat[k] = x0 * c - x1 * sn;
                    flat[k + 1] = x0 * sn + x1 * c;
                }
            }
        }
    }
    y
}

/// Rotary position embedding on `[B, S, H, d]`, rotating consecutive pairs.
pub fn rotary<'t>(x: Var<'t>, positions: &[f64]) -> Result<Var<'t>> {
    let shape = x.shape();
    if shape.len() != 4 {
        return Err(Error::shape(format!("rotary expects [B, S, H, d], got {shape:?}")));
    }
    let (seq, d) = (shape[1], shape[3]);
    if d % 2 != 0 {
        return Err(Error::shape(format!("rotary needs an even head dim, got {d}")));
    }
    if positions.len() != seq {
        return Err(Error::shape(format!(
            "rotary: {} positions for sequence length {seq}",
            positions.len()
        )));
    }
    let (cos, sin) = rotary_table(positions, d);
    let y = rotate_pairs(&x.value(), seq, d, &cos, &sin, false);
    let xi = x.id();
    Ok(x.tape().op(y, &[x], move |g, s| {
        s.add_with(xi, || rotate_pairs(g, seq, d, &cos, &sin, true))
    }))
}

/// Plain rotary embedding of a `heads x positions x d` array.
pub fn rotary_embed(x: &ndarray::Array3<f64>, positions: &[f64]) -> Result<ndarray::Array3<f64>> {
    let (h, p, d) = x.dim();
    if d % 2 != 0 {
        return Err(Error::shape(format!("rotary needs an even head dim, got {d}")));
    }
    if positions.len() != p {
        return Err(Error::shape("positions length mismatch".to_string()));
    }
    let (cos, sin) = rotary_table(positions, d);
    // [H, P, d] -> [1, P, H, d]
    let bshd = x
        .view()
        .permuted_axes([1, 0, 2])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((1, p, h, d))
        .unwrap()
        .into_dyn();
    let y = rotate_pairs(&bshd, p, d, &cos, &sin, false);
    Ok(y.into_shape_with_order((p, h, d))
        .unwrap()
        .permuted_axes([1, 0, 2])
        .as_standard_layout()
        .into_owned())
}

/// Scaled dot-product attention over `[B, S, H, d]` inputs, optional causal mask.
pub fn attention<'t>(q: Var<'t>, k: Var<'t>, v: Var<'t>, causal: bool) -> Result<Var<'t>> {
    let shape = q.shape();
    if shape.len() != 4 || k.shape() != shape || v.shape() != shape {
        return Err(Error::shape(format!(
            "attention: q {shape:?}, k {:?}, v {:?}",
            k.shape(),
            v.shape()
        )));
    }
    let (bn, sn, hn, dn) = (shape[0], shape[1], shape[2], shape[3]);
    let scale = 1.0 / (dn as f64).sqrt();
    let (qv, kv, vv) = (q.value(), k.value(), v.value());
    let (qs, ks, vs) = (
        qv.as_slice().unwrap(),
        kv.as_slice().unwrap(),
        vv.as_slice().unwrap(),
    );
    let idx = move |b: usize, s: usize, h: usize| ((b * sn + s) * hn + h) * dn;
    // probs[b, h, i, j]
    let mut probs = vec![0.0; bn * hn * sn * sn];
    let mut out = vec![0.0; qs.len()];
    let mut row = vec![0.0; sn];
    for b in 0..bn {
        for h in 0..hn {
            for i in 0..sn {
                let qi = &qs[idx(b, i, h)..idx(b, i, h) + dn];
                let jmax = if causal { i + 1 } else { sn };
                let mut mx = f64::NEG_INFINITY;
                for j in 0..jmax {
                    let kj = &ks[idx(b, j, h)..idx(b, j, h) + dn];
                    let sc = qi.iter().zip(kj).map(|(a, c)| a * c).sum::<f64>() * scale;
                    row[j] = sc;
                    mx = mx.max(sc);
                }
                let mut den = 0.0;
                for r in row.iter_mut().take(jmax) {
                    *r = (*r - mx).exp();
                    den += *r;
                }
                let pbase = ((b * hn + h) * sn + i) * sn;
                for j in 0..jmax {
                    let p = row[j] / den;
                    probs[pbase + j] = p;
                    let vj = &vs[idx(b, j, h)..idx(b, j, h) + dn];
                    let o = &mut out[idx(b, i, h)..idx(b, i, h) + dn];
                    o.iter_mut().zip(vj).for_each(|(o, &x)| *o += p * x);
                }
            }
        }
    }
    let y = Array::from_shape_vec(IxDyn(&shape), out).unwrap();
    let (qi_, ki_, vi_) = (q.id(), k.id(), v.id());
    Ok(q.tape().op(y, &[q, k, v], move |g, s| {
        let gs = g.as_slice().unwrap();
        let (qs, ks, vs) = (
            qv.as_slice().unwrap(),
            kv.as_slice().unwrap(),
            vv.as_slice().unwrap(),
        );
        let n = qs.len();
        let (mut dq, mut dk, mut dv) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        let mut dp = vec![0.0; sn];
        for b in 0..bn {
            for h in 0..hn {
                for i in 0..sn {
                    let jmax = if causal { i + 1 } else { sn };
                    let pbase = ((b * hn + h) * sn + i) * sn;
                    let gi = &gs[idx(b, i, h)..idx(b, i, h) + dn];
                    let mut dot = 0.0;
                    for j in 0..jmax {
                        let p = probs[pbase + j];
                        let vj = &vs[idx(b, j, h)..idx(b, j, h) + dn];
                        dp[j] = gi.iter().zip(vj).map(|(a, c)| a * c).sum();
                        dot += p * dp[j];
                        let dvj = &mut dv[idx(b, j, h)..idx(b, j, h) + dn];
                        dvj.iter_mut().zip(gi).for_each(|(d, &x)| *d += p * x);
                    }
                    for j in 0..jmax {
                        let ds = probs[pbase + j] * (dp[j] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let (oi, oj) = (idx(b, i, h), idx(b, j, h));
                        for e in 0..dn {
                            dq[oi + e] += ds * ks[oj + e];
                            dk[oj + e] += ds * qs[oi + e];
                        }
                    }
                }
            }
        }
        let mk = |v: Vec<f64>| Array::from_shape_vec(IxDyn(&shape), v).unwrap();
        s.add(qi_, mk(dq));
        s.add(ki_, mk(dk));
        s.add(vi_, mk(dv));
    }))
}

/// Padding and stride of a 1-D convolution along time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv1dSpec {
    pub stride: usize,
    pub dilation: usize,
    pub pad_left: usize,
    pub pad_right: usize,
    pub groups: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PaddingMode {
    /// Output length equals input length (stride 1); split padding.
    Same,
    /// Left padding only, `(kernel - 1) * dilation`.
    Causal,
}

impl Conv1dSpec {
    pub fn new(kernel: usize, stride: usize, dilation: usize, mode: PaddingMode, groups: usize) -> Self {
        let total = (kernel - 1) * dilation;
        let (pad_left, pad_right) = match mode {
            PaddingMode::Same => (total / 2, total - total / 2),
            PaddingMode::Causal => (total, 0),
        };
        Self {
            stride,
            dilation,
            pad_left,
            pad_right,
            groups,
        }
    }

    pub fn valid(groups: usize, dilation: usize) -> Self {
        Self {
            stride: 1,
            dilation,
            pad_left: 0,
            pad_right: 0,
            groups,
        }
    }
}

/// Grouped 1-D cross-correlation along axis 0 of `x: [T, B, C_in]`.
/// `w: [C_out, C_in / groups, k]`, `bias: [C_out]`. Output `[T_out, B, C_out]`.
pub fn conv1d<'t>(x: Var<'t>, w: Var<'t>, bias: Option<Var<'t>>, spec: Conv1dSpec) -> Result<Var<'t>> {
    let xs = x.shape();
    let ws = w.shape();
    if xs.len() != 3 || ws.len() != 3 {
        return Err(Error::shape(format!("conv1d: x {xs:?}, w {ws:?}")));
    }
    let (tn, bn, cin) = (xs[0], xs[1], xs[2]);
    let (cout, cin_g, kn) = (ws[0], ws[1], ws[2]);
    let Conv1dSpec {
        stride,
        dilation,
        pad_left,
        pad_right,
        groups,
    } = spec;
    if stride == 0 || dilation == 0 || groups == 0 || kn == 0 {
        return Err(Error::arg("conv1d: stride, dilation, groups and kernel must be positive"));
    }
    if cin % groups != 0 || cout % groups != 0 || cin / groups != cin_g {
        return Err(Error::shape(format!(
            "conv1d: {cin} input / {cout} output channels with {groups} groups vs weight {ws:?}"
        )));
    }
    let span = (kn - 1) * dilation + 1;
    let padded = tn + pad_left + pad_right;
    if padded < span {
        return Err(Error::shape(format!(
            "conv1d: kernel span {span} exceeds padded length {padded}"
        )));
    }
    let tout = (padded - span) / stride + 1;
    let cout_g = cout / groups;
    let (xv, wv) = (x.value(), w.value());
    let xs_ = xv.as_slice().unwrap();
    let ws_ = wv.as_slice().unwrap();
    let mut out = vec![0.0; tout * bn * cout];
    let tap_src = move |to: usize, j: usize| -> Option<usize> {
        let p = to * stride + j * dilation;
        (p >= pad_left && p - pad_left < tn).then(|| p - pad_left)
    };
    for to in 0..tout {
        for j in 0..kn {
            let Some(ti) = tap_src(to, j) else { continue };
            for b in 0..bn {
                let xrow = &xs_[(ti * bn + b) * cin..(ti * bn + b + 1) * cin];
                let orow = &mut out[(to * bn + b) * cout..(to * bn + b + 1) * cout];
                if cin_g == 1 && cout_g == 1 {
                    for c in 0..cout {
                        orow[c] += ws_[c * kn + j] * xrow[c];
                    }
                } else {
                    for co in 0..cout {
                        let g = co / cout_g;
                        let xin = &xrow[g * cin_g..(g + 1) * cin_g];
                        let wrow = &ws_[co * cin_g * kn..(co + 1) * cin_g * kn];
                        orow[co] += xin
                            .iter()
                            .enumerate()
                            .map(|(ci, &xv)| wrow[ci * kn + j] * xv)
                            .sum::<f64>();
                    }
                }
            }
        }
    }
    let y = Array::from_shape_vec(IxDyn(&[tout, bn, cout]), out).unwrap();
    let (xi, wi) = (x.id(), w.id());
    let conv = x.tape().op(y, &[x, w], move |g, s| {
        let gs = g.as_slice().unwrap();
        let xs_ = xv.as_slice().unwrap();
        let ws_ = wv.as_slice().unwrap();
        let want_x = s.wants(xi);
        let want_w = s.wants(wi);
        let mut dx = vec![0.0; if want_x { xs_.len() } else { 0 }];
        let mut dw = vec![0.0; if want_w { ws_.len() } else { 0 }];
        for to in 0..tout {
            for j in 0..kn {
                let Some(ti) = tap_src(to, j) else { continue };
                for b in 0..bn {
                    let xo = (ti * bn + b) * cin;
                    let grow = &gs[(to * bn + b) * cout..(to * bn + b + 1) * cout];
                    for (co, &gv) in grow.iter().enumerate() {
                        if gv == 0.0 {
                            continue;
                        }
                        let gidx = co / cout_g;
                        for ci in 0..cin_g {
                            let xpos = xo + gidx * cin_g + ci;
                            let widx = (co * cin_g + ci) * kn + j;
                            if want_x {
                                dx[xpos] += ws_[widx] * gv;
                            }
                            if want_w {
                                dw[widx] += xs_[xpos] * gv;
                            }
                        }
                    }
                }
            }
        }
        if want_x {
            s.add(xi, Array::from_shape_vec(IxDyn(&xs), dx).unwrap());
        }
        if want_w {
            s.add(wi, Array::from_shape_vec(IxDyn(&ws), dw).unwrap());
        }
    });
    match bias {
        Some(b) => conv.add_bias(b),
        None => Ok(conv),
    }
}

/// 2-D convolution on `x: [C_in, H, W]` with `w: [C_out, C_in, kh, kw]`.
pub fn conv2d<'t>(
    x: Var<'t>,
    w: Var<'t>,
    bias: Option<Var<'t>>,
    stride: (usize, usize),
    padding: (usize, usize),
) -> Result<Var<'t>> {
    let xs = x.shape();
    let ws = w.shape();
    if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] {
        return Err(Error::shape(format!("conv2d: x {xs:?}, w {ws:?}")));
    }
    if stride.0 == 0 || stride.1 == 0 {
        return Err(Error::arg("conv2d: stride must be positive"));
    }
    let (cin, hn, wn) = (xs[0], xs[1], xs[2]);
    let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
    let (hp, wp) = (hn + 2 * padding.0, wn + 2 * padding.1);
    if hp < kh || wp < kw {
        return Err(Error::shape(format!(
            "conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}"
        )));
    }
    let ho = (hp - kh) / stride.0 + 1;
    let wo = (wp - kw) / stride.1 + 1;
    let kdim = cin * kh * kw;
    let xv = x.value();
    let cols = im2col(&xv, (cin, hn, wn), (kh, kw), stride, padding, (ho, wo));
    let wv = w.value();
    let w2 = wv.view().into_shape_with_order((cout, kdim)).unwrap().to_owned();
    let y2 = w2.dot(&cols);
    let y = reshaped(y2, &[cout, ho, wo]);
    let (xi, wi) = (x.id(), w.id());
    let cols = Arc::new(cols);
    let conv = x.tape().op(y, &[x, w], move |g, s| {
        let g2 = g.view().into_shape_with_order((cout, ho * wo)).unwrap();
        s.add_with(wi, || {
            reshaped(g2.dot(&cols.t()), &[cout, cin, kh, kw])
        });
        s.add_with(xi, || {
            let dcols = w2.t().dot(&g2);
            col2im(&dcols, (cin, hn, wn), (kh, kw), stride, padding, (ho, wo))
        });
    });
    match bias {
        Some(b) => {
            // bias over channel axis 0: permute to channel-last, add, permute back
            let yt = conv.permute(&[1, 2, 0])?;
            yt.add_bias(b)?.permute(&[2, 0, 1])
        }
        None => Ok(conv),
    }
}

fn im2col(
    x: &Array,
    (cin, hn, wn): (usize, usize, usize),
    (kh, kw): (usize, usize),
    (sh, sw): (usize, usize),
    (ph, pw): (usize, usize),
    (ho, wo): (usize, usize),
) -> Array2<f64> {
    let xs = x.as_slice().unwrap();
    let mut cols = Array2::<f64>::zeros((cin * kh * kw, ho * wo));
    let cs = cols.as_slice_mut().unwrap();
    let ncol = ho * wo;
    for c in 0..cin {
        for a in 0..kh {
            for b in 0..kw {
                let row = ((c * kh + a) * kw + b) * ncol;
                for i in 0..ho {
                    let hi = (i * sh + a) as isize - ph as isize;
                    if hi < 0 || hi >= hn as isize {
                        continue;
                    }
                    let xbase = (c * hn + hi as usize) * wn;
                    for j in 0..wo {
                        let wi = (j * sw + b) as isize - pw as isize;
                        if wi >= 0 && (wi as usize) < wn {
                            cs[row + i * wo + j] = xs[xbase + wi as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(
    cols: &Array2<f64>,
    (cin, hn, wn): (usize, usize, usize),
    (kh, kw): (usize, usize),
    (sh, sw): (usize, usize),
    (ph, pw): (usize, usize),
    (ho, wo): (usize, usize),
) -> Array {
    let cols = cols.as_standard_layout();
    let cs = cols.as_slice().unwrap();
    let mut x = vec![0.0; cin * hn * wn];
    let ncol = ho * wo;
    for c in 0..cin {
        for a in 0..kh {
            for b in 0..kw {
                let row = ((c * kh + a) * kw + b) * ncol;
                for i in 0..ho {
                    let hi = (i * sh + a) as isize - ph as isize;
                    if hi < 0 || hi >= hn as isize {
                        continue;
                    }
                    let xbase = (c * hn + hi as usize) * wn;
                    for j in 0..wo {
                        let wi = (j * sw + b) as isize - pw as isize;
                        if wi >= 0 && (wi as usize) < wn {
                            x[xbase + wi as usize] += cs[row + i * wo + j];
                        }
                    }
                }
            }
        }
    }
    Array::from_shape_vec(IxDyn(&[cin, hn, wn]), x).unwrap()
}

/// One power-iteration step on `w` (viewed as `[rows, rest]`), updating the
/// left vector `u` in place. Returns the right vector and `sigma = u^T W v`.
pub fn power_iteration(w: &ArrayView2<'_, f64>, u: &mut Array1<f64>, steps: usize) -> (Array1<f64>, f64) {
    let mut v = normalized(w.t().dot(u));
    for _ in 0..steps {
        v = normalized(w.t().dot(u));
        *u = normalized(w.dot(&v));
    }
    if steps > 0 {
        v = normalized(w.t().dot(u));
    }
    let sigma = u.dot(&w.dot(&v));
    (v, sigma)
}

fn normalized(v: Array1<f64>) -> Array1<f64> {
    let n = v.dot(&v).sqrt().max(1e-12);
    v / n
}

/// `w / sigma` with `sigma = u^T W v` for fixed singular-vector estimates.
pub fn spectral_normalize<'t>(w: Var<'t>, u: &Array1<f64>, v: &Array1<f64>) -> Result<Var<'t>> {
    let shape = w.shape();
    if shape.len() < 2 {
        return Err(Error::shape("spectral norm needs a weight of rank >= 2".to_string()));
    }
    let rows = shape[0];
    let wv = w.value();
    let rest = wv.len() / rows;
    if u.len() != rows || v.len() != rest {
        return Err(Error::shape("spectral norm vectors do not match weight".to_string()));
    }
    let w2 = wv.view().into_shape_with_order((rows, rest)).unwrap();
    let sigma = u.dot(&w2.dot(v));
    let y = wv.mapv(|e| e / sigma);
    let uv: Array2<f64> = u
        .view()
        .insert_axis(Axis(1))
        .dot(&v.view().insert_axis(Axis(0)));
    let wi = w.id();
    Ok(w.tape().op(y, &[w], move |g, s| {
        s.add_with(wi, || {
            let inner: f64 = (g * &*wv).sum();
            let corr = uv.mapv(|e| e * inner / (sigma * sigma));
            let corr = reshaped(corr, g.shape());
            g.mapv(|e| e / sigma) - corr
        })
    }))
}

/// Plain spectral normalization with `iters` power-iteration steps.
pub fn spectral_norm_apply(w: &Array, u: &mut Array1<f64>, iters: usize) -> Array {
    let rows = w.shape()[0];
    let flat = w.as_standard_layout();
    let w2 = flat.view().into_shape_with_order((rows, w.len() / rows)).unwrap();
    let (_, sigma) = power_iteration(&w2, u, iters);
    w.mapv(|e| e / sigma)
}

/// Magnitude of `[..., 2]` (re, im) pairs; zero gradient at the origin.
pub fn complex_abs(x: Var<'_>) -> Result<Var<'_>> {
    let shape = x.shape();
    if shape.last() != Some(&2) {
        return Err(Error::shape(format!("complex_abs expects [..., 2], got {shape:?}")));
    }
    let xv = x.value();
    let xs = xv.as_slice().unwrap();
    let mags: Vec<f64> = xs.chunks_exact(2).map(|c| c[0].hypot(c[1])).collect();
    let out_shape = &shape[..shape.len() - 1];
    let y = Array::from_shape_vec(IxDyn(out_shape), mags.clone()).unwrap();
    let xi = x.id();
    Ok(x.tape().op(y, &[x], move |g, s| {
        s.add_with(xi, || {
            let xs = xv.as_slice().unwrap();
            let gs = g.as_slice().unwrap();
            let mut d = vec![0.0; xs.len()];
            for (i, &r) in mags.iter().enumerate() {
                if r > 0.0 {
                    d[2 * i] = gs[i] * xs[2 * i] / r;
                    d[2 * i + 1] = gs[i] * xs[2 * i + 1] / r;
                }
            }
            Array::from_shape_vec(IxDyn(&shape), d).unwrap()
        })
    }))
}

/// Gain-shape features: `[..., M, 2]` (re, im) -> `[..., 3, M]` holding
/// `(re / |X|, im / |X|, ln |X|)` with `|X|` floored at `eps`.
pub fn gain_shape(x: Var<'_>, eps: f64) -> Result<Var<'_>> {
    let shape = x.shape();
    if shape.len() < 2 || shape[shape.len() - 1] != 2 {
        return Err(Error::shape(format!("gain_shape expects [..., M, 2], got {shape:?}")));
    }
    let m = shape[shape.len() - 2];
    let outer: usize = shape[..shape.len() - 2].iter().product();
    let xv = x.value();
    let xs = xv.as_slice().unwrap();
    let mut out = vec![0.0; outer * 3 * m];
    for o in 0..outer {
        for j in 0..m {
            let (re, im) = (xs[(o * m + j) * 2], xs[(o * m + j) * 2 + 1]);
            let r = re.hypot(im).max(eps);
            out[(o * 3) * m + j] = re / r;
            out[(o * 3 + 1) * m + j] = im / r;
            out[(o * 3 + 2) * m + j] = r.ln();
        }
    }
    let mut out_shape = shape[..shape.len() - 2].to_vec();
    out_shape.extend([3, m]);
    let y = Array::from_shape_vec(IxDyn(&out_shape), out).unwrap();
    let xi = x.id();
    Ok(x.tape().op(y, &[x], move |g, s| {
        s.add_with(xi, || {
            let xs = xv.as_slice().unwrap();
            let gs = g.as_slice().unwrap();
            let mut d = vec![0.0; xs.len()];
            for o in 0..outer {
                for j in 0..m {
                    let (re, im) = (xs[(o * m + j) * 2], xs[(o * m + j) * 2 + 1]);
                    let (g0, g1, g2) = (
                        gs[(o * 3) * m + j],
                        gs[(o * 3 + 1) * m + j],
                        gs[(o * 3 + 2) * m + j],
                    );
                    let r = re.hypot(im);
                    let (dre, dim) = if r >= eps && r > 0.0 {
                        let r2 = r * r;
                        let r3 = r2 * r;
                        (
                            g0 * im * im / r3 - g1 * re * im / r3 + g2 * re / r2,
                            -g0 * re * im / r3 + g1 * re * re / r3 + g2 * im / r2,
                        )
                    } else {
                        (g0 / eps, g1 / eps)
                    };
                    d[(o * m + j) * 2] = dre;
                    d[(o * m + j) * 2 + 1] = dim;
                }
            }
            Array::from_shape_vec(IxDyn(&shape), d).unwrap()
        })
    }))
}

/// Scales `x` to unit L2 norm over all elements (zero stays zero).
pub fn l2_normalize(x: Var<'_>) -> Var<'_> {
    let xv = x.value();
    let norm = xv.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return x.scale(0.0);
    }
    let y = Arc::new(xv.mapv(|v| v / norm));
    let yc = y.clone();
    let xi = x.id();
    x.tape().op((*y).clone(), &[x], move |g, s| {
        s.add_with(xi, || {
            let dot: f64 = (g * &*yc).sum();
            (g - &yc.mapv(|v| v * dot)).mapv(|v| v / norm)
        })
    })
}

/// Mean of `|a - b|` divided by `max(mean(|b|), eps)`, with `b` a constant.
pub fn normalized_l1<'t>(a: Var<'t>, b: Var<'t>, eps: f64) -> Result<Var<'t>> {
    let denom = b.value().iter().map(|v| v.abs()).sum::<f64>() / b.value().len().max(1) as f64;
    Ok(a.sub(b.detach())?.abs().mean().scale(1.0 / denom.max(eps)))
}

/// Projection weights of one attention layer; all linears carry a bias.
#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights<'t> {
    pub wq: Var<'t>,
    pub bq: Var<'t>,
    pub wk: Var<'t>,
    pub bk: Var<'t>,
    pub wv: Var<'t>,
    pub bv: Var<'t>,
    pub wo: Var<'t>,
    pub bo: Var<'t>,
}

/// Multi-head self-attention over `x: [B, S, N]` with rotary embedding on
/// queries and keys (positions `0..S`).
pub fn multi_head_attention<'t>(
    x: Var<'t>,
    w: &AttentionWeights<'t>,
    heads: usize,
    causal: bool,
) -> Result<Var<'t>> {
    let shape = x.shape();
    if shape.len() != 3 {
        return Err(Error::shape(format!("attention input must be [B, S, N], got {shape:?}")));
    }
    let (b, s, n) = (shape[0], shape[1], shape[2]);
    if heads == 0 || n % heads != 0 {
        return Err(Error::arg(format!("feature dim {n} not divisible by {heads} heads")));
    }
    let d = n / heads;
    let pos: Vec<f64> = (0..s).map(|p| p as f64).collect();
    let split = |v: Var<'t>| v.reshape(&[b, s, heads, d]);
    let q = rotary(split(linear(x, w.wq, Some(w.bq))?)?, &pos)?;
    let k = rotary(split(linear(x, w.wk, Some(w.bk))?)?, &pos)?;
    let v = split(linear(x, w.wv, Some(w.bv))?)?;
    let o = attention(q, k, v, causal)?.reshape(&[b, s, n])?;
    linear(o, w.wo, Some(w.bo))
}
