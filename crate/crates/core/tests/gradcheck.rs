mod common;

use bandrest_core::dsp::StftConfig;
use bandrest_core::nn::{self, spectral, Conv1dSpec, PaddingMode, Var};
use common::{grad_check, randn, rng};
use ndarray::Array1;

const TOL: f64 = 1e-4;

fn assert_ok(name: &str, err: f64) {
    assert!(err < TOL, "{name}: relative error {err:.3e}");
}

#[test]
fn elementwise_ops() {
    let mut r = rng(1);
    for (i, shape) in [[3usize, 4], [1, 7], [5, 2], [2, 2], [6, 3]].iter().enumerate() {
        let x = randn(&mut r, shape);
        let y = randn(&mut r, shape);
        let s = i as u64;
        assert_ok("mul", grad_check(&[x.clone(), y.clone()], s, |v| v[0].mul(v[1]).unwrap()));
        assert_ok("sub", grad_check(&[x.clone(), y.clone()], s, |v| v[0].sub(v[1]).unwrap()));
        assert_ok("gelu", grad_check(std::slice::from_ref(&x), s, |v| v[0].gelu()));
        assert_ok("sigmoid", grad_check(std::slice::from_ref(&x), s, |v| v[0].sigmoid()));
        assert_ok("leaky", grad_check(std::slice::from_ref(&x), s, |v| v[0].leaky_relu(0.2)));
        assert_ok("abs", grad_check(std::slice::from_ref(&x), s, |v| v[0].abs()));
        assert_ok("square", grad_check(std::slice::from_ref(&x), s, |v| v[0].square()));
        assert_ok("mean", grad_check(std::slice::from_ref(&x), s, |v| v[0].mean()));
    }
}

#[test]
fn shape_ops() {
    let mut r = rng(2);
    for (i, shape) in [[2usize, 3, 4], [1, 5, 2], [3, 1, 3], [4, 2, 2], [2, 2, 5]].iter().enumerate() {
        let x = randn(&mut r, shape);
        let s = i as u64;
        assert_ok("permute", grad_check(std::slice::from_ref(&x), s, |v| v[0].permute(&[2, 0, 1]).unwrap()));
        assert_ok(
            "reshape",
            grad_check(std::slice::from_ref(&x), s, |v| v[0].reshape(&[shape.iter().product()]).unwrap()),
        );
        assert_ok(
            "slice",
            grad_check(std::slice::from_ref(&x), s, |v| v[0].slice_axis(1, 0, shape[1]).unwrap().square()),
        );
        assert_ok(
            "concat",
            grad_check(&[x.clone(), x.clone()], s, |v| Var::concat(&[v[0], v[1].square()], 2).unwrap()),
        );
        assert_ok(
            "stack",
            grad_check(&[x.clone(), x.clone()], s, |v| Var::stack(&[v[0].square(), v[1]], 0).unwrap()),
        );
    }
}

#[test]
fn linear_layer() {
    let mut r = rng(3);
    for (i, &(rows, n_in, n_out)) in [(1, 1, 1), (3, 4, 2), (2, 5, 7), (6, 3, 3), (4, 8, 1)].iter().enumerate() {
        let x = randn(&mut r, &[rows, 2, n_in]);
        let w = randn(&mut r, &[n_in, n_out]);
        let b = randn(&mut r, &[n_out]);
        let err = grad_check(&[x, w, b], i as u64, |v| nn::linear(v[0], v[1], Some(v[2])).unwrap());
        assert_ok("linear", err);
    }
}

#[test]
fn rms_norm_layer() {
    let mut r = rng(4);
    for (i, shape) in [vec![4usize], vec![2, 3], vec![3, 8], vec![2, 2, 5], vec![1, 16]].iter().enumerate() {
        let x = randn(&mut r, shape);
        let g = randn(&mut r, &[*shape.last().unwrap()]);
        let err = grad_check(&[x, g], i as u64, |v| nn::rms_norm(v[0], v[1]).unwrap());
        assert_ok("rms_norm", err);
    }
}

#[test]
fn glu_layer() {
    let mut r = rng(5);
    for (i, shape) in [[1usize, 2], [3, 4], [2, 6], [5, 8], [1, 12]].iter().enumerate() {
        let x = randn(&mut r, shape);
        assert_ok("glu", grad_check(&[x], i as u64, |v| nn::glu(v[0]).unwrap()));
    }
}

#[test]
fn glu_decoder_head() {
    // rms_norm -> linear -> glu, as used per band by the decoder
    let mut r = rng(6);
    for (i, &(t, n, m)) in [(2, 4, 1), (3, 4, 3), (1, 8, 2), (4, 6, 3), (2, 3, 5)].iter().enumerate() {
        let x = randn(&mut r, &[t, n]);
        let g = randn(&mut r, &[n]);
        let w = randn(&mut r, &[n, 4 * m]);
        let b = randn(&mut r, &[4 * m]);
        let err = grad_check(&[x, g, w, b], i as u64, |v| {
            let h = nn::rms_norm(v[0], v[1]).unwrap();
            nn::glu(nn::linear(h, v[2], Some(v[3])).unwrap()).unwrap()
        });
        assert_ok("decoder head", err);
    }
}

#[test]
fn attention_with_rotary() {
    let mut r = rng(7);
    let cases = [(1, 1, 1, 2), (1, 3, 1, 4), (2, 4, 2, 2), (3, 2, 2, 4), (1, 5, 4, 2)];
    for (i, &(b, s, h, d)) in cases.iter().enumerate() {
        let q = randn(&mut r, &[b, s, h, d]);
        let k = randn(&mut r, &[b, s, h, d]);
        let v = randn(&mut r, &[b, s, h, d]);
        let pos: Vec<f64> = (0..s).map(|p| p as f64).collect();
        for causal in [false, true] {
            let err = grad_check(&[q.clone(), k.clone(), v.clone()], i as u64, |x| {
                let qr = nn::rotary(x[0], &pos).unwrap();
                let kr = nn::rotary(x[1], &pos).unwrap();
                nn::attention(qr, kr, x[2], causal).unwrap()
            });
            assert_ok("attention", err);
        }
    }
}

#[test]
fn conv1d_layer() {
    let mut r = rng(8);
    // (T, B, Cin, Cout, k, stride, dilation, groups, mode)
    let cases = [
        (8, 1, 2, 3, 3, 1, 2, 1, PaddingMode::Same),
        (6, 2, 4, 4, 3, 1, 1, 4, PaddingMode::Causal),
        (9, 1, 3, 2, 2, 2, 1, 1, PaddingMode::Same),
        (5, 3, 2, 2, 1, 1, 1, 1, PaddingMode::Causal),
        (10, 2, 4, 2, 3, 1, 4, 2, PaddingMode::Causal),
        (7, 1, 1, 1, 5, 1, 1, 1, PaddingMode::Same),
    ];
    for (i, &(t, b, cin, cout, k, stride, dil, groups, mode)) in cases.iter().enumerate() {
        let x = randn(&mut r, &[t, b, cin]);
        let w = randn(&mut r, &[cout, cin / groups, k]);
        let bias = randn(&mut r, &[cout]);
        let spec = Conv1dSpec::new(k, stride, dil, mode, groups);
        let err = grad_check(&[x, w, bias], i as u64, |v| nn::conv1d(v[0], v[1], Some(v[2]), spec).unwrap());
        assert_ok("conv1d", err);
    }
}

#[test]
fn conv2d_layer() {
    let mut r = rng(9);
    let cases = [
        (1, 2, 4, 4, (1, 1), (1, 1)),
        (2, 3, 5, 6, (2, 2), (1, 1)),
        (2, 1, 3, 3, (1, 1), (0, 0)),
        (3, 2, 6, 5, (2, 1), (1, 1)),
        (1, 1, 7, 4, (1, 2), (1, 0)),
    ];
    for (i, &(cin, cout, h, w, stride, pad)) in cases.iter().enumerate() {
        let x = randn(&mut r, &[cin, h, w]);
        let k = randn(&mut r, &[cout, cin, 3, 3]);
        let b = randn(&mut r, &[cout]);
        let err = grad_check(&[x, k, b], i as u64, |v| nn::conv2d(v[0], v[1], Some(v[2]), stride, pad).unwrap());
        assert_ok("conv2d", err);
    }
}

#[test]
fn spectral_norm_conv() {
    let mut r = rng(10);
    for (i, &(cin, cout, h, w)) in [(1, 2, 4, 4), (2, 2, 5, 3), (2, 3, 4, 6), (3, 1, 3, 3), (1, 4, 6, 6)]
        .iter()
        .enumerate()
    {
        let x = randn(&mut r, &[cin, h, w]);
        let k = randn(&mut r, &[cout, cin, 3, 3]);
        let mut u = Array1::from_elem(cout, 1.0 / (cout as f64).sqrt());
        let k2 = k.view().into_shape_with_order((cout, cin * 9)).unwrap().to_owned();
        let (v_vec, _) = nn::power_iteration(&k2.view(), &mut u, 3);
        let err = grad_check(&[x, k], i as u64, |v| {
            let wn = nn::spectral_normalize(v[1], &u, &v_vec).unwrap();
            nn::conv2d(v[0], wn, None, (2, 2), (1, 1)).unwrap().leaky_relu(0.2)
        });
        assert_ok("spectral norm conv", err);
    }
}

#[test]
fn complex_features() {
    let mut r = rng(11);
    for (i, shape) in [[1usize, 1, 2], [2, 3, 2], [4, 2, 2], [3, 5, 2], [1, 6, 2]].iter().enumerate() {
        let x = randn(&mut r, shape);
        assert_ok("complex_abs", grad_check(std::slice::from_ref(&x), i as u64, |v| nn::complex_abs(v[0]).unwrap()));
        assert_ok("gain_shape", grad_check(std::slice::from_ref(&x), i as u64, |v| nn::gain_shape(v[0], 1e-8).unwrap()));
        assert_ok("l2_normalize", grad_check(std::slice::from_ref(&x), i as u64, |v| nn::l2_normalize(v[0])));
    }
}

#[test]
fn stft_and_istft_ops() {
    let mut r = rng(12);
    let cfgs = [
        (StftConfig::new(8000, 8, 4).unwrap(), 20),
        (StftConfig::new(8000, 16, 4).unwrap(), 33),
        (StftConfig::new(8000, 10, 5).unwrap(), 25),
        (StftConfig::new(8000, 12, 6).unwrap(), 12),
        (StftConfig::new(8000, 8, 2).unwrap(), 17),
    ];
    for (i, (cfg, len)) in cfgs.iter().enumerate() {
        let x = randn(&mut r, &[*len]);
        assert_ok("stft", grad_check(std::slice::from_ref(&x), i as u64, |v| spectral::stft(v[0], cfg).unwrap()));
        let frames = cfg.n_frames(*len);
        let s = randn(&mut r, &[frames, cfg.n_bins(), 2]);
        assert_ok("istft", grad_check(&[s], i as u64, |v| spectral::istft(v[0], cfg, *len).unwrap()));
    }
}
