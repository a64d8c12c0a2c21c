//! Frame-prediction metrics: MSE and MAE in both the per-pixel and the
//! frame-sum convention, windowed SSIM and PSNR.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const PSNR_CAP: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Squared error summed over each frame, averaged over frames.
    pub mse: f64,
    pub mae: f64,
    pub mse_pixel: f64,
    pub mae_pixel: f64,
    pub ssim: f64,
    pub psnr: f64,
    /// Breakdown per predicted time step, each averaged over the batch.
    pub mse_per_frame: Vec<f64>,
    pub mae_per_frame: Vec<f64>,
    pub ssim_per_frame: Vec<f64>,
}

impl MetricsReport {
    /// One `key=value` line per scalar.
    pub fn to_key_value(&self) -> String {
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(",");
        format!(
            "mse={:.6}\nmae={:.6}\nmse_pixel={:.8}\nmae_pixel={:.8}\nssim={:.6}\npsnr={:.4}\n\
             mse_per_frame={}\nmae_per_frame={}\nssim_per_frame={}\n",
            self.mse,
            self.mae,
            self.mse_pixel,
            self.mae_pixel,
            self.ssim,
            self.psnr,
            join(&self.mse_per_frame),
            join(&self.mae_per_frame),
            join(&self.ssim_per_frame),
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report is plain data")
    }
}

pub fn psnr(mse_pixel: f64) -> f64 {
    if mse_pixel < 1e-10 {
        PSNR_CAP
    } else {
        10.0 * (1.0 / mse_pixel).log10()
    }
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let center = (size as f64 - 1.0) / 2.0;
    let taps: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - center;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Window side for an `h × w` frame: the standard 11, shrunk to the
/// largest odd size that fits smaller frames.
pub fn window_size(h: usize, w: usize) -> usize {
    let s = SSIM_WINDOW.min(h).min(w);
    if s.is_multiple_of(2) {
        s - 1
    } else {
        s
    }
}

/// Separable 'valid' filtering of an `h × w` image.
fn filter_valid(img: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, &t) in taps.iter().enumerate() {
                acc += t * img[y * w + x + i];
            }
            rows[y * ow + x] = acc;
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, &t) in taps.iter().enumerate() {
                acc += t * rows[(y + i) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Mean SSIM of two single-channel `h × w` images with values in [0, 1].
pub fn ssim_image(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let taps = gaussian_window(window_size(h, w), SSIM_SIGMA);
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect() };
    let mu_a = filter_valid(a, h, w, &taps);
    let mu_b = filter_valid(b, h, w, &taps);
    let e_aa = filter_valid(&prod(&|x, _| x * x), h, w, &taps);
    let e_bb = filter_valid(&prod(&|_, y| y * y), h, w, &taps);
    let e_ab = filter_valid(&prod(&|x, y| x * y), h, w, &taps);
    let n = mu_a.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let var_a = e_aa[i] - ma * ma;
        let var_b = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        let num = (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2);
        let den = (ma * ma + mb * mb + SSIM_C1) * (var_a + var_b + SSIM_C2);
        total += num / den;
    }
    total / n as f64
}

/// Metrics of predicted future frames `[B, T', C, H, W]` against targets.
pub fn evaluate(pred: &Tensor<f32>, target: &Tensor<f32>) -> Result<MetricsReport> {
    if pred.dims() != target.dims() || pred.dims().len() != 5 {
        return Err(Error::ShapeMismatch {
            op: "evaluate",
            lhs: pred.dims().to_vec(),
            rhs: target.dims().to_vec(),
        });
    }
    let [b, t, c, h, w]: [usize; 5] = pred.dims().try_into().unwrap();
    let frame = c * h * w;
    let plane = h * w;

    // (sse, sae, ssim) per (sequence, frame), in row-major order.
    let per_frame: Vec<(f64, f64, f64)> = pred
        .data()
        .par_chunks_exact(frame)
        .zip(target.data().par_chunks_exact(frame))
        .map(|(p, q)| {
            let p: Vec<f64> = p.iter().map(|&v| v as f64).collect();
            let q: Vec<f64> = q.iter().map(|&v| v as f64).collect();
            let (mut sse, mut sae) = (0.0, 0.0);
            for (x, y) in p.iter().zip(&q) {
                let d = x - y;
                sse += d * d;
                sae += d.abs();
            }
            let ssim = (0..c)
                .map(|ch| ssim_image(&p[ch * plane..(ch + 1) * plane], &q[ch * plane..(ch + 1) * plane], h, w))
                .sum::<f64>()
                / c as f64;
            (sse, sae, ssim)
        })
        .collect();

    let frames = (b * t) as f64;
    let mut mse_per_frame = vec![0.0; t];
    let mut mae_per_frame = vec![0.0; t];
    let mut ssim_per_frame = vec![0.0; t];
    for (i, &(sse, sae, s)) in per_frame.iter().enumerate() {
        mse_per_frame[i % t] += sse;
        mae_per_frame[i % t] += sae;
        ssim_per_frame[i % t] += s;
    }
    for v in mse_per_frame
        .iter_mut()
        .chain(mae_per_frame.iter_mut())
        .chain(ssim_per_frame.iter_mut())
    {
        *v /= b as f64;
    }
    let sse: f64 = per_frame.iter().map(|f| f.0).sum();
    let sae: f64 = per_frame.iter().map(|f| f.1).sum();
    let ssim = per_frame.iter().map(|f| f.2).sum::<f64>() / frames;
    let mse_pixel = sse / (frames * frame as f64);
    let mae_pixel = sae / (frames * frame as f64);
    Ok(MetricsReport {
        mse: sse / frames,
        mae: sae / frames,
        mse_pixel,
        mae_pixel,
        ssim,
        psnr: psnr(mse_pixel),
        mse_per_frame,
        mae_per_frame,
        ssim_per_frame,
    })
}
