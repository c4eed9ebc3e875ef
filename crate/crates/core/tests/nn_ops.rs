mod common;

use bandrest_core::nn::{
    self, conv1d, conv2d, glu, linear, multi_head_attention, rms_norm, rotary_embed, spectral_norm_apply,
    AttentionWeights, Array, Conv1dSpec, PaddingMode, ParameterStore, Tape, Var,
};
use common::{grad_check, randn, rng};
use nalgebra::DMatrix;
use ndarray::{array, Array1, Array3, IxDyn};

fn max_diff(a: &Array, b: &Array) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter().zip(b.iter()).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

fn sigma_max(a: &Array) -> f64 {
    let rows = a.shape()[0];
    let cols = a.len() / rows;
    let m = DMatrix::from_row_slice(rows, cols, a.as_standard_layout().as_slice().unwrap());
    m.singular_values().max()
}

#[test]
fn rms_norm_examples() {
    let tape = Tape::new();
    let ones = tape.constant(Array::ones(IxDyn(&[2, 4])));
    let gain = tape.constant(Array::ones(IxDyn(&[4])));
    let y = rms_norm(ones, gain).unwrap();
    assert!(y.value().iter().all(|v| (v - 1.0).abs() < 1e-8));
    let scaled = tape.constant(Array::from_elem(IxDyn(&[3, 4]), 7.5));
    let y = rms_norm(scaled, gain).unwrap();
    assert!(y.value().iter().all(|v| (v - 1.0).abs() < 1e-8));

    let mut r = rng(1);
    let x = randn(&mut r, &[5, 8]);
    let g = randn(&mut r, &[8]);
    let y = rms_norm(tape.constant(x.clone()), tape.constant(g.clone())).unwrap();
    for i in 0..5 {
        let ms: f64 = (0..8).map(|j| x[[i, j]] * x[[i, j]]).sum::<f64>() / 8.0;
        for j in 0..8 {
            let want = g[[j]] * x[[i, j]] / (ms + 1e-8).sqrt();
            assert!((y.value()[[i, j]] - want).abs() < 1e-6);
        }
    }
}

#[test]
fn glu_examples() {
    let tape = Tape::new();
    let x = array![[1.0, -2.0, 4.0, 0.0, 0.0, 0.0]].into_dyn();
    let y = glu(tape.constant(x)).unwrap();
    assert_eq!(*y.value(), array![[0.5, -1.0, 2.0]].into_dyn());
    let x = array![[0.0, 0.0, 3.0, -1.0]].into_dyn();
    assert!(glu(tape.constant(x)).unwrap().value().iter().all(|v| *v == 0.0));

    let x = randn(&mut rng(2), &[3, 10]);
    let y = glu(tape.constant(x.clone())).unwrap();
    for i in 0..3 {
        for j in 0..5 {
            let want = x[[i, j]] / (1.0 + (-x[[i, j + 5]]).exp());
            assert!((y.value()[[i, j]] - want).abs() < 1e-7);
        }
    }
}

fn conv1d_oracle(x: &Array, w: &Array, b: &[f64], dil: usize, pad_left: usize, out_len: usize) -> Array {
    // x: [T, 1, C_in], w: [C_out, C_in, k]
    let (t, cin) = (x.shape()[0], x.shape()[2]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    Array::from_shape_fn(IxDyn(&[out_len, 1, cout]), |idx| {
        let (o, co) = (idx[0], idx[2]);
        let mut s = b[co];
        for ci in 0..cin {
            for j in 0..k {
                let src = o as isize + (j * dil) as isize - pad_left as isize;
                if src >= 0 && (src as usize) < t {
                    s += w[[co, ci, j]] * x[[src as usize, 0, ci]];
                }
            }
        }
        s
    })
}

#[test]
fn conv1d_identity_kernel_passes_input_through() {
    let tape = Tape::new();
    let x = randn(&mut rng(3), &[6, 1, 3]);
    let mut w = Array::zeros(IxDyn(&[3, 3, 1]));
    for c in 0..3 {
        w[[c, c, 0]] = 1.0;
    }
    let y = conv1d(
        tape.constant(x.clone()),
        tape.constant(w),
        None,
        Conv1dSpec::new(1, 1, 1, PaddingMode::Same, 1),
    )
    .unwrap();
    assert_eq!(*y.value(), x);
}

#[test]
fn conv1d_matches_direct_sum() {
    let mut r = rng(4);
    let x = randn(&mut r, &[8, 1, 2]);
    let w = randn(&mut r, &[3, 2, 3]);
    let b = vec![0.1, -0.2, 0.3];
    let tape = Tape::new();
    for mode in [PaddingMode::Same, PaddingMode::Causal] {
        let spec = Conv1dSpec::new(3, 1, 2, mode, 1);
        let y = conv1d(
            tape.constant(x.clone()),
            tape.constant(w.clone()),
            Some(tape.constant(Array1::from(b.clone()).into_dyn())),
            spec,
        )
        .unwrap();
        let want = conv1d_oracle(&x, &w, &b, 2, spec.pad_left, 8);
        assert!(max_diff(&y.value(), &want) < 1e-6, "{mode:?}");
    }
}

#[test]
fn causal_conv1d_never_looks_ahead() {
    let mut r = rng(5);
    let x = randn(&mut r, &[12, 1, 2]);
    let w = randn(&mut r, &[2, 2, 3]);
    let spec = Conv1dSpec::new(3, 1, 2, PaddingMode::Causal, 1);
    let run = |x: &Array| {
        let tape = Tape::inference();
        (*conv1d(tape.constant(x.clone()), tape.constant(w.clone()), None, spec)
            .unwrap()
            .value())
        .clone()
    };
    let base = run(&x);
    for t in 0..12 {
        let mut xp = x.clone();
        xp[[t, 0, 1]] += 1.0;
        let y = run(&xp);
        for o in 0..12 {
            let same = (0..2).all(|c| y[[o, 0, c]] == base[[o, 0, c]]);
            if o < t {
                assert!(same, "output {o} changed by input {t}");
            }
        }
    }
}

fn conv2d_oracle(x: &Array, w: &Array, stride: (usize, usize), pad: (usize, usize)) -> Array {
    let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let ho = (h + 2 * pad.0 - kh) / stride.0 + 1;
    let wo = (wd + 2 * pad.1 - kw) / stride.1 + 1;
    Array::from_shape_fn(IxDyn(&[cout, ho, wo]), |i| {
        let mut s = 0.0;
        for ci in 0..cin {
            for a in 0..kh {
                for b in 0..kw {
                    let y = (i[1] * stride.0 + a) as isize - pad.0 as isize;
                    let z = (i[2] * stride.1 + b) as isize - pad.1 as isize;
                    if y >= 0 && z >= 0 && (y as usize) < h && (z as usize) < wd {
                        s += w[[i[0], ci, a, b]] * x[[ci, y as usize, z as usize]];
                    }
                }
            }
        }
        s
    })
}

#[test]
fn conv2d_examples() {
    let tape = Tape::new();
    let mut r = rng(6);
    let x = randn(&mut r, &[2, 5, 6]);
    let mut id = Array::zeros(IxDyn(&[2, 2, 1, 1]));
    id[[0, 0, 0, 0]] = 1.0;
    id[[1, 1, 0, 0]] = 1.0;
    let y = conv2d(tape.constant(x.clone()), tape.constant(id), None, (1, 1), (0, 0)).unwrap();
    assert_eq!(*y.value(), x);

    let img = randn(&mut r, &[1, 8, 8]);
    let w = randn(&mut r, &[1, 1, 3, 3]);
    let y = conv2d(tape.constant(img), tape.constant(w), None, (2, 2), (1, 1)).unwrap();
    assert_eq!(y.shape(), vec![1, 4, 4]);

    let x = randn(&mut r, &[3, 7, 5]);
    let w = randn(&mut r, &[2, 3, 3, 3]);
    for (stride, pad) in [((1, 1), (1, 1)), ((2, 1), (1, 0)), ((2, 2), (0, 1))] {
        let y = conv2d(tape.constant(x.clone()), tape.constant(w.clone()), None, stride, pad).unwrap();
        assert!(max_diff(&y.value(), &conv2d_oracle(&x, &w, stride, pad)) < 1e-6);
    }
}

#[test]
fn spectral_norm_examples() {
    let mut u = Array1::from(vec![0.3, -0.2, 0.9, 0.1]);
    let w = (Array::eye_like(4) * 2.0).into_dyn();
    let y = spectral_norm_apply(&w, &mut u, 1);
    assert!(max_diff(&y, &Array::eye_like(4).into_dyn()) < 1e-12);

    let a = array![1.0, -2.0, 0.5];
    let b = array![0.3, 0.7, -1.1, 2.0];
    let rank1 = a
        .view()
        .insert_axis(ndarray::Axis(1))
        .dot(&b.view().insert_axis(ndarray::Axis(0)))
        .into_dyn();
    let mut u = Array1::from(vec![1.0, 1.0, 1.0]);
    let y = spectral_norm_apply(&rank1, &mut u, 1);
    assert!((sigma_max(&y) - 1.0).abs() < 1e-9);

    let w = randn(&mut rng(7), &[8, 8]);
    let mut u = Array1::from(randn(&mut rng(8), &[8]).iter().copied().collect::<Vec<_>>());
    let y = spectral_norm_apply(&w, &mut u, 50);
    let s = sigma_max(&y);
    assert!((0.99..=1.01).contains(&s), "{s}");
}

trait EyeLike {
    fn eye_like(n: usize) -> Self;
}

impl EyeLike for Array {
    fn eye_like(n: usize) -> Self {
        ndarray::Array2::<f64>::eye(n).into_dyn()
    }
}

#[test]
fn rotary_examples() {
    let x = Array3::from_shape_fn((2, 3, 4), |(h, p, d)| (h * 12 + p * 4 + d) as f64 * 0.1 - 0.7);
    let y = rotary_embed(&x, &[0.0, 0.0, 0.0]).unwrap();
    assert_eq!(y, x);

    let pos = [0.0, 1.0, 5.0];
    let y = rotary_embed(&x, &pos).unwrap();
    for h in 0..2 {
        for p in 0..3 {
            let nx: f64 = (0..4).map(|d| x[[h, p, d]].powi(2)).sum();
            let ny: f64 = (0..4).map(|d| y[[h, p, d]].powi(2)).sum();
            assert!((nx - ny).abs() < 1e-12);
        }
    }

    // d = 4, position 1: angles 1 and 10000^(-1/2)
    for h in 0..2 {
        for (i, theta) in [1.0f64, 0.01].into_iter().enumerate() {
            let (x0, x1) = (x[[h, 1, 2 * i]], x[[h, 1, 2 * i + 1]]);
            assert!((y[[h, 1, 2 * i]] - (x0 * theta.cos() - x1 * theta.sin())).abs() < 1e-7);
            assert!((y[[h, 1, 2 * i + 1]] - (x0 * theta.sin() + x1 * theta.cos())).abs() < 1e-7);
        }
    }
}

fn attention_store(n: usize, seed: u64) -> ParameterStore {
    let mut r = rng(seed);
    let mut s = ParameterStore::new();
    for k in ["q", "k", "v", "o"] {
        s.insert(format!("w{k}"), randn(&mut r, &[n, n]) * 0.5, true).unwrap();
        s.insert(format!("b{k}"), randn(&mut r, &[n]) * 0.1, true).unwrap();
    }
    s
}

fn weights<'t>(p: &nn::Bound<'t>) -> AttentionWeights<'t> {
    let v = |k: &str| p.var(k).unwrap();
    AttentionWeights {
        wq: v("wq"),
        bq: v("bq"),
        wk: v("wk"),
        bk: v("bk"),
        wv: v("wv"),
        bv: v("bv"),
        wo: v("wo"),
        bo: v("bo"),
    }
}

fn affine(x: &[f64], w: &Array, b: &Array) -> Vec<f64> {
    let n = b.len();
    (0..n)
        .map(|j| b[[j]] + (0..x.len()).map(|i| x[i] * w[[i, j]]).sum::<f64>())
        .collect()
}

#[test]
fn attention_over_one_position_is_value_then_output_projection() {
    let s = attention_store(4, 9);
    let tape = Tape::new();
    let p = s.bind(&tape);
    let x = randn(&mut rng(10), &[1, 1, 4]);
    let y = multi_head_attention(tape.constant(x.clone()), &weights(&p), 2, false).unwrap();
    let xs: Vec<f64> = x.iter().copied().collect();
    let v = affine(&xs, &s.data("wv").unwrap(), &s.data("bv").unwrap());
    let want = affine(&v, &s.data("wo").unwrap(), &s.data("bo").unwrap());
    for (a, b) in y.value().iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn uniform_values_give_identical_outputs() {
    let mut s = attention_store(4, 11);
    s.set_data("wv", Array::zeros(IxDyn(&[4, 4]))).unwrap();
    let tape = Tape::new();
    let p = s.bind(&tape);
    let x = randn(&mut rng(12), &[1, 5, 4]);
    for causal in [false, true] {
        let y = multi_head_attention(tape.constant(x.clone()), &weights(&p), 2, causal).unwrap();
        let y = y.value();
        for t in 1..5 {
            for j in 0..4 {
                assert!((y[[0, t, j]] - y[[0, 0, j]]).abs() < 1e-12);
            }
        }
    }
}

#[test]
#[allow(clippy::needless_range_loop)]
fn attention_matches_hand_rolled_oracle() {
    let s = attention_store(4, 13);
    let x = randn(&mut rng(14), &[1, 3, 4]);
    let rows: Vec<Vec<f64>> = (0..3).map(|t| (0..4).map(|j| x[[0, t, j]]).collect()).collect();
    let proj = |k: &str| -> Vec<Vec<f64>> {
        rows.iter()
            .map(|r| affine(r, &s.data(&format!("w{k}")).unwrap(), &s.data(&format!("b{k}")).unwrap()))
            .collect()
    };
    let rot = |v: &[Vec<f64>]| -> Vec<Vec<f64>> {
        v.iter()
            .enumerate()
            .map(|(pos, r)| {
                let mut o = r.clone();
                for i in 0..2 {
                    let th = pos as f64 * 10000f64.powf(-2.0 * i as f64 / 4.0);
                    o[2 * i] = r[2 * i] * th.cos() - r[2 * i + 1] * th.sin();
                    o[2 * i + 1] = r[2 * i] * th.sin() + r[2 * i + 1] * th.cos();
                }
                o
            })
            .collect()
    };
    let (q, k, v) = (rot(&proj("q")), rot(&proj("k")), proj("v"));
    for causal in [false, true] {
        let mut att = Vec::new();
        for i in 0..3 {
            let lim = if causal { i + 1 } else { 3 };
            let sc: Vec<f64> = (0..lim)
                .map(|j| (0..4).map(|d| q[i][d] * k[j][d]).sum::<f64>() / 2.0)
                .collect();
            let m = sc.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = sc.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            assert!(((e.iter().map(|v| v / z).sum::<f64>()) - 1.0).abs() < 1e-12);
            att.push((0..4).map(|d| (0..lim).map(|j| e[j] / z * v[j][d]).sum()).collect::<Vec<f64>>());
        }
        let want: Vec<f64> = att
            .iter()
            .flat_map(|a| affine(a, &s.data("wo").unwrap(), &s.data("bo").unwrap()))
            .collect();
        let tape = Tape::new();
        let p = s.bind(&tape);
        let y = multi_head_attention(tape.constant(x.clone()), &weights(&p), 1, causal).unwrap();
        for (a, b) in y.value().iter().zip(&want) {
            assert!((a - b).abs() < 1e-6, "causal={causal}");
        }
    }
}

#[test]
fn backward_examples() {
    let tape = Tape::new();
    let x = tape.leaf(array![1.0, -2.0, 3.5].into_dyn());
    let g = tape.backward(x.square().sum()).unwrap();
    assert_eq!(g.get_or_zeros(x), array![2.0, -4.0, 7.0].into_dyn());

    let tape = Tape::new();
    let x = tape.leaf(array![1.0, 2.0].into_dyn());
    let g = tape.backward(x.detach().square().sum()).unwrap();
    assert!(g.get_or_zeros(x).iter().all(|v| *v == 0.0));
}

#[test]
fn two_layer_net_gradients_match_finite_differences() {
    let mut r = rng(15);
    let inputs = vec![
        randn(&mut r, &[4, 3]),
        randn(&mut r, &[3, 5]),
        randn(&mut r, &[5]),
        randn(&mut r, &[5, 2]),
        randn(&mut r, &[2]),
        randn(&mut r, &[5]),
    ];
    let err = grad_check(&inputs, 16, |v: &[Var]| {
        let h = linear(v[0], v[1], Some(v[2])).unwrap().gelu();
        let h = rms_norm(h, v[5]).unwrap();
        let y = linear(h, v[3], Some(v[4])).unwrap();
        y.square().mean().add(y.abs().sum()).unwrap()
    });
    assert!(err < 1e-4, "{err}");
}
