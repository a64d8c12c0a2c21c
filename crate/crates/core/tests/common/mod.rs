#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stlight::model::ModelConfig;
use stlight::ops::Conv2dSpec;
use stlight::tensor::{Fill, Tensor};

/// Six nested loops over (b, o, y, x) and then (c, i, j); reads padding as
/// out-of-bounds zeros. Accumulation starts at 0 and the bias is added last.
pub fn conv2d_reference(x: &Tensor<f64>, w: &Tensor<f64>, bias: Option<&Tensor<f64>>, spec: &Conv2dSpec) -> Tensor<f64> {
    let [b, cin, h, wd]: [usize; 4] = x.dims().try_into().unwrap();
    let pad = spec.padding_amount() as isize;
    let k = spec.kernel;
    let oh = spec.output_extent(h).unwrap();
    let ow = spec.output_extent(wd).unwrap();
    let cin_g = cin / spec.groups;
    let cout_g = spec.out_channels / spec.groups;
    let mut out = vec![0.0; b * spec.out_channels * oh * ow];
    for n in 0..b {
        for o in 0..spec.out_channels {
            let g = o / cout_g;
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..cin_g {
                        let ci = g * cin_g + c;
                        for i in 0..k {
                            for j in 0..k {
                                let iy = (y * spec.stride) as isize + (i * spec.dilation) as isize - pad;
                                let ix = (xo * spec.stride) as isize + (j * spec.dilation) as isize - pad;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((n * cin + ci) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data()[((o * cin_g + c) * k + i) * k + j];
                                acc += xv * wv;
                            }
                        }
                    }
                    if let Some(bv) = bias {
                        acc += bv.data()[o];
                    }
                    out[((n * spec.out_channels + o) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    Tensor::from_vec(&[b, spec.out_channels, oh, ow], out).unwrap()
}

/// SSIM computed directly from each 2-D window, without separable filtering.
pub fn ssim_reference(a: &[f64], b: &[f64], h: usize, w: usize, win: usize, sigma: f64) -> f64 {
    let c = (win as f64 - 1.0) / 2.0;
    let mut k = vec![0.0; win * win];
    for i in 0..win {
        for j in 0..win {
            let (di, dj) = (i as f64 - c, j as f64 - c);
            k[i * win + j] = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
        }
    }
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut acc = 0.0;
    let mut count = 0;
    for y in 0..=h - win {
        for x in 0..=w - win {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..win {
                for j in 0..win {
                    let kv = k[i * win + j];
                    let (va, vb) = (a[(y + i) * w + x + j], b[(y + i) * w + x + j]);
                    ma += kv * va;
                    mb += kv * vb;
                    saa += kv * va * va;
                    sbb += kv * vb * vb;
                    sab += kv * va * vb;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    acc / count as f64
}

pub fn uniform64(dims: &[usize], low: f64, high: f64, seed: u64) -> Tensor<f64> {
    Tensor::create(dims, Fill::Uniform { low, high, seed }).unwrap()
}

pub fn normal64(dims: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::create(dims, Fill::Normal { mean: 0.0, std: 1.0, seed }).unwrap()
}

/// Smallest sensible network: 8×8 frames, d = 8, three blocks.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        t_in: 2,
        t_out: 2,
        channels: 1,
        height: 8,
        width: 8,
        hidden: 8,
        depth: 3,
        patch: 2,
        overlap: 0,
        kernel_local: 3,
        kernel_global: 3,
        dilation: 3,
    }
}

/// A random config that passes validation.
pub fn random_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    loop {
        let patch = [1, 2, 4][rng.random_range(0..3)];
        let grid = rng.random_range(1..=4);
        let c = ModelConfig {
            t_in: rng.random_range(1..=4),
            t_out: rng.random_range(1..=4),
            channels: rng.random_range(1..=3),
            height: patch * grid,
            width: patch * rng.random_range(1..=4),
            hidden: patch * patch * rng.random_range(1..=6),
            depth: rng.random_range(1..=7),
            patch,
            overlap: rng.random_range(0..=3),
            kernel_local: [1, 3, 5][rng.random_range(0..3)],
            kernel_global: [1, 3, 5, 7][rng.random_range(0..4)],
            dilation: rng.random_range(1..=3),
        };
        if c.validate().is_ok() {
            return c;
        }
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
