//! Image-quality metrics on `[..., H, W]` tensors.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// PSNR returned for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;

/// Side of the square, non-overlapping SSIM windows.
pub const SSIM_WINDOW: usize = 8;

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

pub fn mse<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    same_shape("mse", pred, target)?;
    let s: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| (a.as_f64() - b.as_f64()).powi(2))
        .sum();
    Ok(s / pred.numel() as f64)
}

/// `10·log10(max² / MSE)`, capped at [`PSNR_CAP_DB`].
pub fn psnr<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, max_val: f64) -> Result<f64> {
    if !(max_val > 0.0) {
        return Err(Error::config("psnr max_val must be positive"));
    }
    Ok(psnr_from_mse(mse(pred, target)?, max_val))
}

pub fn psnr_from_mse(mse: f64, max_val: f64) -> f64 {
    if mse == 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (max_val * max_val / mse).log10()).min(PSNR_CAP_DB)
}

/// SSIM of one pair of equally sized pixel sets.
pub fn ssim_window(x: &[f64], y: &[f64], max_val: f64) -> f64 {
    let c1 = (0.01 * max_val).powi(2);
    let c2 = (0.03 * max_val).powi(2);
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
        cxy += (a - mx) * (b - my);
    }
    let (vx, vy, cxy) = (vx / n, vy / n, cxy / n);
    ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
}

/// Mean SSIM over non-overlapping 8×8 windows, averaged over every leading
/// (channel or batch) slice. Partial edge windows are skipped; images
/// smaller than a window use one global window.
pub fn ssim<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, max_val: f64) -> Result<f64> {
    same_shape("ssim", pred, target)?;
    if pred.ndim() < 2 {
        return Err(Error::dim("ssim", format!("need [..., H, W], got {:?}", pred.shape())));
    }
    let nd = pred.ndim();
    let (h, w) = (pred.shape()[nd - 2], pred.shape()[nd - 1]);
    let planes = pred.numel() / (h * w);
    let (wh, ww) = if h < SSIM_WINDOW || w < SSIM_WINDOW {
        (h, w)
    } else {
        (SSIM_WINDOW, SSIM_WINDOW)
    };
    let (pa, pb) = (pred.to_f64_vec(), target.to_f64_vec());
    let mut total = 0.0;
    let mut count = 0usize;
    let (mut xs, mut ys) = (Vec::with_capacity(wh * ww), Vec::with_capacity(wh * ww));
    for p in 0..planes {
        let base = p * h * w;
        for bi in 0..h / wh {
            for bj in 0..w / ww {
                xs.clear();
                ys.clear();
                for i in bi * wh..(bi + 1) * wh {
                    let row = base + i * w + bj * ww;
                    xs.extend_from_slice(&pa[row..row + ww]);
                    ys.extend_from_slice(&pb[row..row + ww]);
                }
                total += ssim_window(&xs, &ys, max_val);
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{streams, RngStream};

    #[test]
    fn psnr_closed_forms() {
        let a = Tensor::<f64>::full([3, 4, 4], 0.5);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), 100.0);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
        let c = a.map(|v| v + 0.01);
        assert!((psnr(&a, &c, 1.0).unwrap() - 40.0).abs() < 1e-9);
        assert!(psnr(&a, &a, 0.0).is_err());
    }

    #[test]
    fn ssim_identical_is_exactly_one() {
        let mut rng = RngStream::new(1, streams::INIT);
        let a = Tensor::<f64>::from_fn([3, 16, 16], |_| rng.uniform());
        assert_eq!(ssim(&a, &a, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn ssim_negated_zero_mean_is_negative() {
        let mut rng = RngStream::new(2, streams::INIT);
        let mut a = Tensor::<f64>::from_fn([8, 8], |_| rng.uniform_in(-1.0, 1.0));
        let mean = a.sum() / 64.0;
        a = a.map(|v| v - mean);
        let neg = a.map(|v| -v);
        assert!(ssim(&neg, &a, 1.0).unwrap() < 0.0);
    }

    #[test]
    fn ssim_matches_per_window_oracle() {
        let mut rng = RngStream::new(3, streams::INIT);
        let a = Tensor::<f64>::from_fn([2, 16, 24], |_| rng.uniform());
        let b = Tensor::<f64>::from_fn([2, 16, 24], |_| rng.uniform());
        let (c1, c2) = (1e-4, 9e-4);
        let mut acc = 0.0;
        let mut n = 0.0;
        for p in 0..2 {
            for bi in 0..2 {
                for bj in 0..3 {
                    let px: Vec<(f64, f64)> = (0..64)
                        .map(|k| {
                            let (i, j) = (bi * 8 + k / 8, bj * 8 + k % 8);
                            (a.at(&[p, i, j]), b.at(&[p, i, j]))
                        })
                        .collect();
                    let mx = px.iter().map(|v| v.0).sum::<f64>() / 64.0;
                    let my = px.iter().map(|v| v.1).sum::<f64>() / 64.0;
                    let vx = px.iter().map(|v| (v.0 - mx).powi(2)).sum::<f64>() / 64.0;
                    let vy = px.iter().map(|v| (v.1 - my).powi(2)).sum::<f64>() / 64.0;
                    let cxy = px.iter().map(|v| (v.0 - mx) * (v.1 - my)).sum::<f64>() / 64.0;
                    acc += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                    n += 1.0;
                }
            }
        }
        assert!((ssim(&a, &b, 1.0).unwrap() - acc / n).abs() < 1e-9);
    }

    #[test]
    fn small_images_use_one_window() {
        let a = Tensor::<f64>::from_fn([4, 4], |i| i as f64 / 16.0);
        let b = a.map(|v| v * 0.5);
        let direct = ssim_window(&a.to_f64_vec(), &b.to_f64_vec(), 1.0);
        assert_eq!(ssim(&a, &b, 1.0).unwrap(), direct);
    }

    #[test]
    fn noise_lowers_psnr() {
        let mut rng = RngStream::new(4, streams::INIT);
        let a = Tensor::<f64>::from_fn([3, 8, 8], |_| rng.uniform());
        let small = a.map(|v| v + 0.01);
        let big = a.map(|v| v + 0.05);
        assert!(psnr(&big, &a, 1.0).unwrap() < psnr(&small, &a, 1.0).unwrap());
        assert!(psnr(&small, &a, 1.0).unwrap() < 100.0);
    }
}
