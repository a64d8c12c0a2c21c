mod common;

use proptest::prelude::*;

use stlight::metrics::{gaussian_window, ssim_image, window_size};
use stlight::ops::{
    batchnorm2d_forward, batchnorm2d_infer, conv2d_forward, gelu_forward, pixel_shuffle_forward,
    pixel_unshuffle_forward, Conv2dSpec, Mode, Padding, RunningStats,
};
use stlight::tensor::Tensor;

use common::{conv2d_reference, normal64, ssim_reference, uniform64};

#[test]
fn conv_three_channel_dilated_example_is_bitwise() {
    let spec = Conv2dSpec::new(3, 4, 3).with_dilation(2).with_padding(Padding::Explicit(2));
    let x = uniform64(&[1, 3, 6, 6], -1.0, 1.0, 1);
    let w = uniform64(&spec.weight_dims(), -1.0, 1.0, 2);
    let b = uniform64(&[4], -1.0, 1.0, 3);
    let got = conv2d_forward(&x, &w, Some(&b), &spec).unwrap();
    assert_eq!(got.dims(), &[1, 4, 6, 6]);
    assert!(got.bitwise_eq(&conv2d_reference(&x, &w, Some(&b), &spec)));
}

#[test]
fn conv_same_padding_depthwise_dilated() {
    for (k, dil) in [(3, 1), (7, 3), (5, 2)] {
        let spec = Conv2dSpec::depthwise(5, k, dil);
        let x = normal64(&[2, 5, 9, 7], k as u64);
        let w = normal64(&spec.weight_dims(), 9);
        let b = normal64(&[5], 10);
        let got = conv2d_forward(&x, &w, Some(&b), &spec).unwrap();
        assert_eq!(got.dims(), &[2, 5, 9, 7]);
        assert!(got.bitwise_eq(&conv2d_reference(&x, &w, Some(&b), &spec)));
    }
}

#[test]
fn conv_f32_matches_reference_closely() {
    let spec = Conv2dSpec::new(4, 6, 3).with_stride(2).with_padding(Padding::Explicit(1)).with_bias(false);
    let x = uniform64(&[2, 4, 9, 9], -1.0, 1.0, 4);
    let w = uniform64(&spec.weight_dims(), -1.0, 1.0, 5);
    let got = conv2d_forward(&x.cast::<f32>(), &w.cast::<f32>(), None, &spec).unwrap();
    let want = conv2d_reference(&x.cast::<f32>().cast(), &w.cast::<f32>().cast(), None, &spec);
    for (a, b) in got.data().iter().zip(want.data()) {
        assert!((*a as f64 - b).abs() < 1e-5);
    }
}

#[test]
fn conv_rejects_bad_shapes() {
    let spec = Conv2dSpec::new(3, 4, 3);
    let w = normal64(&spec.weight_dims(), 0);
    assert!(conv2d_forward(&normal64(&[1, 2, 5, 5], 0), &w, None, &spec).is_err());
    assert!(conv2d_forward(&normal64(&[1, 3, 2, 5], 0), &w, None, &spec).is_err());
    assert!(conv2d_forward(&normal64(&[3, 5, 5], 0), &w, None, &spec).is_err());
    let bad_w = normal64(&[4, 3, 2, 2], 0);
    assert!(conv2d_forward(&normal64(&[1, 3, 5, 5], 0), &bad_w, None, &spec).is_err());
}

/// Mean and biased variance per channel, computed in two passes.
fn two_pass(x: &Tensor<f64>) -> (Vec<f64>, Vec<f64>) {
    let [b, c, h, w]: [usize; 4] = x.dims().try_into().unwrap();
    let n = (b * h * w) as f64;
    let at = |i, ch, j| x.data()[(i * c + ch) * h * w + j];
    let mean: Vec<f64> = (0..c)
        .map(|ch| (0..b).flat_map(|i| (0..h * w).map(move |j| (i, j))).map(|(i, j)| at(i, ch, j)).sum::<f64>() / n)
        .collect();
    let var = (0..c)
        .map(|ch| {
            (0..b)
                .flat_map(|i| (0..h * w).map(move |j| (i, j)))
                .map(|(i, j)| (at(i, ch, j) - mean[ch]).powi(2))
                .sum::<f64>()
                / n
        })
        .collect();
    (mean, var)
}

#[test]
fn batchnorm_train_matches_two_pass_oracle() {
    for seed in 0..10 {
        let dims = [3, 4, 5, 6];
        let x = normal64(&dims, seed).scale(3.0);
        let gamma = uniform64(&[4], 0.5, 2.0, seed + 100);
        let beta = normal64(&[4], seed + 200);
        let mut stats = RunningStats::<f64>::new(4).unwrap();
        let (y, _) = batchnorm2d_forward(&x, &gamma, &beta, &mut stats, Mode::Train).unwrap();
        let (mean, var) = two_pass(&x);
        let plane = 30;
        for (i, &v) in y.data().iter().enumerate() {
            let ch = (i / plane) % 4;
            let want = gamma.data()[ch] * (x.data()[i] - mean[ch]) / (var[ch] + 1e-5).sqrt() + beta.data()[ch];
            assert!((v - want).abs() < 1e-6, "{v} vs {want}");
        }
        // running stats: momentum 0.1 from (0, 1), unbiased variance
        let n = 90.0;
        for ch in 0..4 {
            assert!((stats.mean.data()[ch] - 0.1 * mean[ch]).abs() < 1e-12);
            assert!((stats.var.data()[ch] - (0.9 + 0.1 * var[ch] * n / (n - 1.0))).abs() < 1e-12);
        }
    }
}

#[test]
fn batchnorm_train_output_is_standardized() {
    let x = normal64(&[4, 3, 6, 6], 7).scale(5.0).map(|v| v + 2.0);
    let ones = Tensor::<f64>::ones(&[3]).unwrap();
    let zeros = Tensor::<f64>::zeros(&[3]).unwrap();
    let mut stats = RunningStats::new(3).unwrap();
    let (y, _) = batchnorm2d_forward(&x, &ones, &zeros, &mut stats, Mode::Train).unwrap();
    let (mean, var) = two_pass(&y);
    for ch in 0..3 {
        assert!(mean[ch].abs() < 1e-5);
        // eps pulls the variance slightly under one
        assert!((var[ch] - 1.0).abs() < 1e-4, "{}", var[ch]);
    }
}

#[test]
fn batchnorm_eval_uses_running_stats_only() {
    let x = normal64(&[2, 2, 3, 3], 8);
    let gamma = uniform64(&[2], 0.5, 1.5, 9);
    let beta = normal64(&[2], 10);
    let mut stats = RunningStats::<f64>::new(2).unwrap();
    stats.mean = Tensor::from_vec(&[2], vec![0.5, -1.0]).unwrap();
    stats.var = Tensor::from_vec(&[2], vec![2.0, 0.25]).unwrap();
    let before = stats.clone();
    let (y, _) = batchnorm2d_forward(&x, &gamma, &beta, &mut stats, Mode::Eval).unwrap();
    assert_eq!(stats, before);
    let z = batchnorm2d_infer(&x, &gamma, &beta, &stats).unwrap();
    assert!(y.bitwise_eq(&z));
    for (i, &v) in y.data().iter().enumerate() {
        let ch = (i / 9) % 2;
        let want = gamma.data()[ch] * (x.data()[i] - stats.mean.data()[ch]) / (stats.var.data()[ch] + 1e-5).sqrt()
            + beta.data()[ch];
        assert!((v - want).abs() < 1e-12);
    }
}

#[test]
fn gelu_known_values() {
    // x * Phi(x) with tabulated normal CDF values
    let x = Tensor::<f64>::from_vec(&[5], vec![-2.0, -1.0, 0.0, 1.0, 2.0]).unwrap();
    let y = gelu_forward(&x);
    let want = [-2.0 * 0.022750131948179, -0.158655253931457, 0.0, 0.841344746068543, 2.0 * 0.977249868051821];
    for (a, b) in y.data().iter().zip(want) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn pixel_shuffle_layout() {
    // channel c*r*r + i*r + j lands at (c, y*r + i, x*r + j)
    let (c, r, h, w) = (2, 3, 2, 2);
    let n = c * r * r * h * w;
    let x = Tensor::<f64>::from_vec(&[1, c * r * r, h, w], (0..n).map(|v| v as f64).collect()).unwrap();
    let y = pixel_shuffle_forward(&x, r).unwrap();
    assert_eq!(y.dims(), &[1, c, h * r, w * r]);
    for ch in 0..c {
        for yy in 0..h * r {
            for xx in 0..w * r {
                let src = ((ch * r * r + (yy % r) * r + xx % r) * h + yy / r) * w + xx / r;
                assert_eq!(y.get(&[0, ch, yy, xx]).unwrap(), src as f64);
            }
        }
    }
}

#[test]
fn pixel_shuffle_rejects_indivisible_channels() {
    assert!(pixel_shuffle_forward(&normal64(&[1, 6, 2, 2], 0), 2).is_err());
    assert!(pixel_unshuffle_forward(&normal64(&[1, 1, 3, 4], 0), 2).is_err());
}

#[test]
fn ssim_matches_direct_window_reference() {
    for (h, w, seed) in [(16, 16, 0), (11, 20, 1), (24, 13, 2), (7, 9, 3)] {
        let a = uniform64(&[h * w], 0.0, 1.0, seed);
        let b = a.zip_map(&uniform64(&[h * w], -0.2, 0.2, seed + 10), "noise", |x, n| (x + n).clamp(0.0, 1.0)).unwrap();
        let win = window_size(h, w);
        let want = ssim_reference(a.data(), b.data(), h, w, win, 1.5);
        let got = ssim_image(a.data(), b.data(), h, w);
        assert!((got - want).abs() < 1e-12, "{h}x{w}: {got} vs {want}");
    }
}

#[test]
fn ssim_invariances() {
    let a = uniform64(&[20 * 20], 0.0, 1.0, 5);
    assert_eq!(ssim_image(a.data(), a.data(), 20, 20), 1.0);
    // constant images are identical structurally
    let c = vec![0.3; 400];
    assert_eq!(ssim_image(&c, &c, 20, 20), 1.0);
    let b = uniform64(&[20 * 20], 0.0, 1.0, 6);
    let s = ssim_image(a.data(), b.data(), 20, 20);
    assert!(s < 0.5 && s > -1.0);
    let w = gaussian_window(11, 1.5);
    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
}

proptest! {
    #[test]
    fn shuffle_round_trips(b in 1usize..3, c in 1usize..4, r in 1usize..4, h in 1usize..5, w in 1usize..5, seed in 0u64..1000) {
        let x = normal64(&[b, c * r * r, h, w], seed);
        let y = pixel_shuffle_forward(&x, r).unwrap();
        prop_assert!(pixel_unshuffle_forward(&y, r).unwrap().bitwise_eq(&x));
    }

    #[test]
    fn conv_matches_reference(cin in 1usize..4, cout in 1usize..4, k in 1usize..4, stride in 1usize..3,
                              dil in 1usize..3, pad in 0usize..3, h in 3usize..9, w in 3usize..9, seed in 0u64..1000) {
        let spec = Conv2dSpec::new(cin, cout, k).with_stride(stride).with_dilation(dil).with_padding(Padding::Explicit(pad));
        prop_assume!(spec.output_extent(h).is_some() && spec.output_extent(w).is_some());
        let x = normal64(&[1, cin, h, w], seed);
        let wt = normal64(&spec.weight_dims(), seed + 1);
        let bias = normal64(&[cout], seed + 2);
        let got = conv2d_forward(&x, &wt, Some(&bias), &spec).unwrap();
        prop_assert!(got.bitwise_eq(&conv2d_reference(&x, &wt, Some(&bias), &spec)));
    }
}
