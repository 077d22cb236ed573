mod common;

use common::{check_network, rng, uniform};
use nalgebra::{DMatrix, DVector};
use spiralcluster::mixae::AutoencoderConfig;
use spiralcluster::neuralcore::{
    adam_update, clip_global_norm, mse, mse_grad, same_padding, AdamConfig, AdamState, LayerSpec, Network, Tensor,
};

fn random_tensor(shape: Vec<usize>, seed: u64) -> Tensor {
    let len = shape.iter().product();
    Tensor::new(shape, uniform(len, -1.0, 1.0, &mut rng(seed))).unwrap()
}

/// Keeps every entry at least 1e-3 away from the LReLU kink.
fn nudge_off_zero(t: &mut Tensor) {
    for v in t.data.iter_mut() {
        if v.abs() < 1e-3 {
            *v = if *v < 0.0 { -1e-3 } else { 1e-3 };
        }
    }
}

fn assert_grad(name: &str, net: &Network, input: &Tensor, seed: u64) {
    let report = check_network(net, input, seed);
    assert!(report.passed(), "{name}: max relative error {:.3e} over {} coordinates", report.max_rel, report.checked);
}

#[test]
fn conv_layer_gradients() {
    for (i, (c, h, w, f, k, s)) in
        [(1, 9, 9, 4, 3, 2), (3, 8, 6, 5, 3, 1), (2, 7, 10, 3, 5, 2), (2, 6, 6, 2, 2, 2)].into_iter().enumerate()
    {
        let net = Network::new(vec![c, h, w], &[LayerSpec::Conv { filters: f, kernel: k, stride: s }], 10 + i as u64)
            .unwrap();
        assert_grad("conv", &net, &random_tensor(vec![2, c, h, w], i as u64), 100 + i as u64);
    }
}

#[test]
fn deconv_layer_gradients() {
    for (i, (c, h, w, f, k, s)) in [(4, 4, 4, 2, 3, 2), (3, 5, 3, 2, 3, 1), (2, 3, 4, 3, 5, 2)].into_iter().enumerate()
    {
        let net = Network::new(vec![c, h, w], &[LayerSpec::Deconv { filters: f, kernel: k, stride: s }], 20 + i as u64)
            .unwrap();
        assert_grad("deconv", &net, &random_tensor(vec![3, c, h, w], i as u64), 200 + i as u64);
    }
}

#[test]
fn dense_sigmoid_reshape_gradients() {
    let net = Network::new(vec![7], &[LayerSpec::Dense { units: 5 }], 1).unwrap();
    assert_grad("dense", &net, &random_tensor(vec![4, 7], 1), 301);

    let net = Network::new(vec![6], &[LayerSpec::Sigmoid], 1).unwrap();
    let mut x = random_tensor(vec![3, 6], 2);
    x.data.iter_mut().for_each(|v| *v *= 4.0);
    assert_grad("sigmoid", &net, &x, 302);

    let net = Network::new(
        vec![2, 3, 4],
        &[LayerSpec::Flatten, LayerSpec::Reshape { shape: vec![4, 3, 2] }, LayerSpec::Flatten],
        1,
    )
    .unwrap();
    assert_grad("flatten/reshape", &net, &random_tensor(vec![2, 2, 3, 4], 3), 303);
}

#[test]
fn lrelu_gradients_with_nudged_inputs() {
    let net = Network::new(vec![40], &[LayerSpec::Lrelu { slope: 0.01 }], 1).unwrap();
    let mut x = random_tensor(vec![4, 40], 4);
    nudge_off_zero(&mut x);
    assert_grad("lrelu", &net, &x, 304);
}

#[test]
fn stacked_autoencoder_gradients() {
    let ae = AutoencoderConfig { resolution: 16, filters: vec![4, 3], latent_dim: 6, ..AutoencoderConfig::default() };
    let mut x = random_tensor(vec![2, 1, 16, 16], 5);
    x.data.iter_mut().for_each(|v| *v = v.abs());
    let enc = Network::new(vec![1, 16, 16], &ae.encoder_specs(), 7).unwrap();
    assert_grad("encoder", &enc, &x, 305);
    let dec = Network::new(vec![6], &ae.decoder_specs(), 8).unwrap();
    assert_grad("decoder", &dec, &random_tensor(vec![2, 6], 6), 306);
}

/// Straightforward "same" convolution, independent of the im2col path.
fn naive_conv(x: &[f64], [c, h, w]: [usize; 3], wts: &[f64], bias: &[f64], f: usize, k: usize, s: usize) -> Vec<f64> {
    let (oh, pt) = same_padding(h, k, s);
    let (ow, pl) = same_padding(w, k, s);
    let mut out = vec![0.0; f * oh * ow];
    for o in 0..f {
        for y in 0..oh {
            for xo in 0..ow {
                let mut acc = bias[o];
                for i in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let (yy, xx) = ((y * s + ky) as isize - pt as isize, (xo * s + kx) as isize - pl as isize);
                            if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                                acc +=
                                    wts[((o * c + i) * k + ky) * k + kx] * x[(i * h + yy as usize) * w + xx as usize];
                            }
                        }
                    }
                }
                out[(o * oh + y) * ow + xo] = acc;
            }
        }
    }
    out
}

/// Scatter form of the transposed convolution onto the stride-upsampled grid.
fn naive_deconv(x: &[f64], [c, h, w]: [usize; 3], wts: &[f64], bias: &[f64], f: usize, k: usize, s: usize) -> Vec<f64> {
    let (bh, bw) = (h * s, w * s);
    let (_, pt) = same_padding(bh, k, s);
    let (_, pl) = same_padding(bw, k, s);
    let mut out = vec![0.0; f * bh * bw];
    for o in 0..f {
        out[o * bh * bw..(o + 1) * bh * bw].iter_mut().for_each(|v| *v = bias[o]);
    }
    for i in 0..c {
        for y in 0..h {
            for xi in 0..w {
                for o in 0..f {
                    for ky in 0..k {
                        for kx in 0..k {
                            let (yy, xx) = ((y * s + ky) as isize - pt as isize, (xi * s + kx) as isize - pl as isize);
                            if yy >= 0 && xx >= 0 && (yy as usize) < bh && (xx as usize) < bw {
                                out[(o * bh + yy as usize) * bw + xx as usize] +=
                                    wts[((i * f + o) * k + ky) * k + kx] * x[(i * h + y) * w + xi];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn with_random_bias(net: &mut Network, seed: u64) {
    let bias = net.layers[0].bias.clone();
    let vals = uniform(bias.len(), -0.5, 0.5, &mut rng(seed));
    net.params_mut()[bias].copy_from_slice(&vals);
}

#[test]
fn conv_matches_direct_loops() {
    for (i, (c, h, w, f, k, s)) in
        [(1, 32, 32, 16, 3, 2), (3, 7, 5, 4, 3, 2), (2, 6, 9, 3, 5, 1), (2, 8, 8, 2, 4, 2)].into_iter().enumerate()
    {
        let mut net =
            Network::new(vec![c, h, w], &[LayerSpec::Conv { filters: f, kernel: k, stride: s }], i as u64).unwrap();
        with_random_bias(&mut net, i as u64);
        let x = random_tensor(vec![2, c, h, w], 50 + i as u64);
        let y = net.forward(&x).unwrap();
        let layer = &net.layers[0];
        let (wts, bias) = (&net.params()[layer.weights.clone()], &net.params()[layer.bias.clone()]);
        for b in 0..2 {
            let want = naive_conv(x.sample(b), [c, h, w], wts, bias, f, k, s);
            for (a, e) in y.output().sample(b).iter().zip(&want) {
                assert!((a - e).abs() <= 1e-12 * (1.0 + e.abs()), "conv case {i}: {a} vs {e}");
            }
        }
    }
}

#[test]
fn deconv_matches_direct_loops() {
    for (i, (c, h, w, f, k, s)) in [(8, 8, 8, 16, 3, 2), (3, 4, 5, 2, 3, 2), (2, 5, 5, 3, 5, 1)].into_iter().enumerate()
    {
        let mut net =
            Network::new(vec![c, h, w], &[LayerSpec::Deconv { filters: f, kernel: k, stride: s }], i as u64).unwrap();
        with_random_bias(&mut net, i as u64);
        let x = random_tensor(vec![2, c, h, w], 60 + i as u64);
        let y = net.forward(&x).unwrap();
        assert_eq!(y.output().sample_shape(), &[f, h * s, w * s]);
        let layer = &net.layers[0];
        let (wts, bias) = (&net.params()[layer.weights.clone()], &net.params()[layer.bias.clone()]);
        for b in 0..2 {
            let want = naive_deconv(x.sample(b), [c, h, w], wts, bias, f, k, s);
            for (a, e) in y.output().sample(b).iter().zip(&want) {
                assert!((a - e).abs() <= 1e-12 * (1.0 + e.abs()), "deconv case {i}: {a} vs {e}");
            }
        }
    }
}

#[test]
fn full_scale_shapes() {
    let net = Network::new(vec![1, 128, 128], &[LayerSpec::Conv { filters: 64, kernel: 3, stride: 2 }], 0).unwrap();
    assert_eq!(net.output_shape(), &[64, 64, 64]);
    let ae = AutoencoderConfig::default();
    let enc = Network::new(vec![1, 128, 128], &ae.encoder_specs(), 0).unwrap();
    let grid = enc.layers.iter().rev().find(|l| matches!(l.spec, LayerSpec::Conv { .. })).unwrap();
    assert_eq!(grid.out_shape, vec![8, 8, 8]);
    assert_eq!(enc.output_shape(), &[20]);
    let dec = Network::new(vec![20], &ae.decoder_specs(), 0).unwrap();
    assert_eq!(dec.output_shape(), &[1, 128, 128]);

    let desk = AutoencoderConfig::desk();
    let enc = Network::new(vec![1, 32, 32], &desk.encoder_specs(), 0).unwrap();
    let grid = enc.layers.iter().rev().find(|l| matches!(l.spec, LayerSpec::Conv { .. })).unwrap();
    assert_eq!(grid.out_shape, vec![8, 8, 8]);
}

#[test]
fn shape_mismatch_names_the_layer() {
    let err = Network::new(
        vec![10],
        &[LayerSpec::Dense { units: 4 }, LayerSpec::Conv { filters: 2, kernel: 3, stride: 1 }],
        0,
    )
    .unwrap_err()
    .to_string();
    assert!(err.contains("layer 1"), "{err}");
    let err = Network::new(vec![2, 3], &[LayerSpec::Reshape { shape: vec![5] }], 0).unwrap_err().to_string();
    assert!(err.contains("layer 0"), "{err}");
    let net = Network::new(vec![4], &[LayerSpec::Dense { units: 2 }], 0).unwrap();
    assert!(net.forward(&Tensor::zeros(vec![1, 5])).is_err());
}

#[test]
fn identity_dense_layer() {
    let mut net = Network::new(vec![4], &[LayerSpec::Dense { units: 4 }], 0).unwrap();
    let w = net.layers[0].weights.clone();
    let p = net.params_mut();
    p.iter_mut().for_each(|v| *v = 0.0);
    for i in 0..4 {
        p[w.start + i * 4 + i] = 1.0;
    }
    let x = random_tensor(vec![3, 4], 9);
    assert_eq!(net.forward(&x).unwrap().output().data, x.data);
}

#[test]
fn stale_cache_is_rejected() {
    let mut net = Network::new(vec![3], &[LayerSpec::Dense { units: 2 }], 0).unwrap();
    let x = random_tensor(vec![1, 3], 1);
    let cache = net.forward(&x).unwrap();
    net.params_mut()[0] += 1.0;
    assert!(net.backward(&cache, &Tensor::zeros(vec![1, 2])).is_err());
}

#[test]
fn zero_output_gradient_gives_zero_parameter_gradient() {
    let ae = AutoencoderConfig { resolution: 8, filters: vec![2], latent_dim: 3, ..AutoencoderConfig::default() };
    let net = Network::new(vec![1, 8, 8], &ae.encoder_specs(), 3).unwrap();
    let x = random_tensor(vec![2, 1, 8, 8], 3);
    let cache = net.forward(&x).unwrap();
    let (g, dx) = net.backward(&cache, &Tensor::zeros(vec![2, 3])).unwrap();
    assert!(g.iter().all(|v| *v == 0.0));
    assert!(dx.data.iter().all(|v| *v == 0.0));
}

/// Dense layer + MSE: the backprop gradient equals the normal-equation
/// gradient `(2/nm)·[Xᵀ(XW + b − Y); Σ(XW + b − Y)]` computed with nalgebra.
#[test]
fn linear_regression_gradient_matches_closed_form() {
    let (n, d, m) = (12, 5, 3);
    let net = Network::new(vec![d], &[LayerSpec::Dense { units: m }], 4).unwrap();
    let x = random_tensor(vec![n, d], 11);
    let y = random_tensor(vec![n, m], 12);
    let cache = net.forward(&x).unwrap();
    let g_out = mse_grad(cache.output(), &y).unwrap();
    let (grads, _) = net.backward(&cache, &g_out).unwrap();

    let layer = &net.layers[0];
    // Stored row-major as W[out][in].
    let w = DMatrix::from_row_slice(m, d, &net.params()[layer.weights.clone()]);
    let b = DVector::from_column_slice(&net.params()[layer.bias.clone()]);
    let xm = DMatrix::from_row_slice(n, d, &x.data);
    let ym = DMatrix::from_row_slice(n, m, &y.data);
    let mut resid = &xm * w.transpose() - &ym;
    for mut row in resid.row_iter_mut() {
        row += b.transpose();
    }
    let scale = 2.0 / (n * m) as f64;
    let gw = resid.transpose() * &xm * scale;
    let gb = resid.row_sum().transpose() * scale;
    for o in 0..m {
        for i in 0..d {
            assert!((grads[layer.weights.start + o * d + i] - gw[(o, i)]).abs() <= 1e-10);
        }
        assert!((grads[layer.bias.start + o] - gb[o]).abs() <= 1e-10);
    }
}

#[test]
fn mse_examples() {
    let a = random_tensor(vec![2, 3, 4], 1);
    assert_eq!(mse(&a, &a).unwrap(), 0.0);
    let mut plus = a.clone();
    plus.data.iter_mut().for_each(|v| *v += 1.0);
    assert!((mse(&plus, &a).unwrap() - 1.0).abs() < 1e-12);
    let b = random_tensor(vec![2, 3, 4], 2);
    let manual = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / 24.0;
    assert!((mse(&a, &b).unwrap() - manual).abs() <= 1e-12);
    assert!(mse(&a, &Tensor::zeros(vec![2, 12])).is_err());
}

#[test]
fn adam_zero_gradient_and_first_step() {
    let cfg = AdamConfig::default();
    let mut p = vec![1.0, -2.0, 3.0];
    let mut st = AdamState::new(3);
    st.m = vec![0.5, 0.5, 0.5];
    st.v = vec![0.1, 0.1, 0.1];
    adam_update(&mut p, &[0.0; 3], &mut st, &cfg).unwrap();
    assert!(st.m.iter().all(|m| (m - 0.45).abs() < 1e-15));
    assert!(st.v.iter().all(|v| (v - 0.099).abs() < 1e-15));

    let g = [0.3, -1e-4, 7.0, 0.0];
    let mut p = vec![0.0; 4];
    let mut st = AdamState::new(4);
    adam_update(&mut p, &g, &mut st, &cfg).unwrap();
    for (pi, gi) in p.iter().zip(g) {
        assert!((pi - (-cfg.eta * gi / (gi.abs() + cfg.epsilon))).abs() <= 1e-9);
    }
}

#[test]
fn adam_constant_gradient_step_tends_to_eta() {
    let cfg = AdamConfig::default();
    let g = [0.5, -3.0];
    let mut p = vec![0.0; 2];
    let mut st = AdamState::new(2);
    let mut prev = p.clone();
    for _ in 0..2000 {
        prev.clone_from(&p);
        adam_update(&mut p, &g, &mut st, &cfg).unwrap();
    }
    for i in 0..2 {
        let step = p[i] - prev[i];
        assert!((step + cfg.eta * g[i].signum()).abs() <= 0.01 * cfg.eta, "step {step}");
    }
}

#[test]
fn clipping_scales_jointly() {
    let mut a = vec![3.0, 0.0];
    let mut b = vec![4.0];
    let norm = clip_global_norm(&mut [&mut a, &mut b], 1.0);
    assert_eq!(norm, 5.0);
    assert!((a[0] - 0.6).abs() < 1e-15 && (b[0] - 0.8).abs() < 1e-15);
    let norm = clip_global_norm(&mut [&mut a, &mut b], 2.0);
    assert!((norm - 1.0).abs() < 1e-15 && (a[0] - 0.6).abs() < 1e-15);
}

fn train_autoencoder(seed: u64, steps: usize) -> (Vec<f64>, f64, f64) {
    let ae = AutoencoderConfig { resolution: 16, filters: vec![8, 4], latent_dim: 8, ..AutoencoderConfig::default() };
    let mut specs = ae.encoder_specs();
    specs.extend(ae.decoder_specs());
    let mut net = Network::new(vec![1, 16, 16], &specs, seed).unwrap();
    // A fixed batch of four simulated events.
    let events = common::two_class_events(2, 2, 17);
    let x = spiralcluster::mixae::images_to_tensor(&common::images(&events, 16)).unwrap();
    let cfg = AdamConfig::default();
    let mut st = AdamState::new(net.param_count());
    let first = mse(net.forward(&x).unwrap().output(), &x).unwrap();
    for _ in 0..steps {
        let cache = net.forward(&x).unwrap();
        let g = mse_grad(cache.output(), &x).unwrap();
        let (grads, _) = net.backward(&cache, &g).unwrap();
        adam_update(net.params_mut(), &grads, &mut st, &cfg).unwrap();
    }
    let last = mse(net.forward(&x).unwrap().output(), &x).unwrap();
    (net.params().to_vec(), first, last)
}

#[test]
fn training_is_bitwise_deterministic() {
    let (a, _, _) = train_autoencoder(3, 10);
    let (b, _, _) = train_autoencoder(3, 10);
    let (c, _, _) = train_autoencoder(4, 10);
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert_ne!(a, c);
}

#[test]
fn adam_halves_reconstruction_error() {
    let mut ratios = Vec::new();
    for seed in 0..5 {
        let (_, first, last) = train_autoencoder(seed, 100);
        ratios.push(last / first);
    }
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    assert!(mean <= 0.5, "mean MSE ratio after 100 steps {mean:.3} ({ratios:?})");
}
