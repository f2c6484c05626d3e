//! Image quality metrics, computed in `f64` on `[0, 1]` float images.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

fn check_shapes<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("metric inputs differ: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

pub fn mse<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    check_shapes(a, b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x.to_f64_lossy() - y.to_f64_lossy()).powi(2))
        .sum();
    Ok(sum / a.len() as f64)
}

pub fn mae<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    check_shapes(a, b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x.to_f64_lossy() - y.to_f64_lossy()).abs())
        .sum();
    Ok(sum / a.len() as f64)
}

/// `10·log10(peak² / MSE)`; identical inputs give `f64::INFINITY`.
pub fn psnr<T: Real>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 { f64::INFINITY } else { 10.0 * (peak * peak / m).log10() })
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let total: f64 = g.iter().sum::<f64>().powi(2);
    std::array::from_fn(|k| g[k / SSIM_WINDOW] * g[k % SSIM_WINDOW] / total)
}

fn grayscale<T: Real>(t: &Tensor<T>) -> Result<(usize, usize, Vec<f64>)> {
    let (h, w, c) = t.hwc()?;
    let gray = t
        .data()
        .chunks_exact(c)
        .map(|px| px.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / c as f64)
        .collect();
    Ok((h, w, gray))
}

/// Mean SSIM over every position where the 11×11 Gaussian window (σ = 1.5)
/// fits entirely inside the channel-mean grayscale image. Dynamic range 1.
pub fn ssim<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    check_shapes(a, b)?;
    let (h, w, x) = grayscale(a)?;
    let (_, _, y) = grayscale(b)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::usage(format!("SSIM needs at least {SSIM_WINDOW}×{SSIM_WINDOW}, image is {h}×{w}")));
    }
    let win = gaussian_window();
    let (c1, c2) = (K1 * K1, K2 * K2);
    let mut total = 0.0;
    let mut count = 0usize;
    for top in 0..=h - SSIM_WINDOW {
        for left in 0..=w - SSIM_WINDOW {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..SSIM_WINDOW {
                let row = (top + i) * w + left;
                for j in 0..SSIM_WINDOW {
                    let g = win[i * SSIM_WINDOW + j];
                    let (p, q) = (x[row + j], y[row + j]);
                    mx += g * p;
                    my += g * q;
                    sxx += g * p * p;
                    syy += g * q * q;
                    sxy += g * p * q;
                }
            }
            let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_is_normalized() {
        let s: f64 = gaussian_window().iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn psnr_closed_form() {
        let a = Tensor::<f64>::zeros(vec![4, 4, 3]);
        let b = Tensor::full(vec![4, 4, 3], 0.1);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = Tensor::<f32>::zeros(vec![10, 16, 3]);
        assert!(matches!(ssim(&a, &a), Err(Error::Usage(_))));
    }
}
