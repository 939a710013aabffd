//! Restoration quality metrics.

use crate::error::{check_dim, Error, Result};

/// `10·log10(peak² / MSE)`; `f64::INFINITY` when the inputs are identical.
pub fn psnr(x: &[f64], y: &[f64], peak: f64) -> Result<f64> {
    check_dim(x.len(), y.len())?;
    if !(peak > 0.0) {
        return Err(Error::InvalidArgument(format!("peak {peak} must be positive")));
    }
    if x.is_empty() {
        return Err(Error::InvalidArgument("empty signal".into()));
    }
    let mse = x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / x.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

const WINDOW: usize = 11;
const WINDOW_SIGMA: f64 = 1.5;

fn gaussian_window(len: usize) -> Vec<f64> {
    let c = (len as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..len)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable filtering over the valid region.
fn filter_valid(img: &[f64], rows: usize, cols: usize, wr: &[f64], wc: &[f64]) -> (Vec<f64>, usize, usize) {
    let oc = cols - wc.len() + 1;
    let or = rows - wr.len() + 1;
    let mut tmp = vec![0.0; rows * oc];
    for r in 0..rows {
        for c in 0..oc {
            tmp[r * oc + c] = wc.iter().enumerate().map(|(j, w)| w * img[r * cols + c + j]).sum();
        }
    }
    let mut out = vec![0.0; or * oc];
    for r in 0..or {
        for c in 0..oc {
            out[r * oc + c] = wr.iter().enumerate().map(|(i, w)| w * tmp[(r + i) * oc + c]).sum();
        }
    }
    (out, or, oc)
}

/// Mean SSIM with an 11×11 Gaussian window (σ = 1.5) over the valid region of a
/// row-major `rows × cols` image. Dimensions shorter than 11 use a window of
/// their own length, so 1-D signals are `1 × n` images.
pub fn ssim(x: &[f64], y: &[f64], rows: usize, cols: usize, peak: f64) -> Result<f64> {
    check_dim(x.len(), y.len())?;
    check_dim(rows * cols, x.len())?;
    if !(peak > 0.0) {
        return Err(Error::InvalidArgument(format!("peak {peak} must be positive")));
    }
    if x.is_empty() {
        return Err(Error::InvalidArgument("empty image".into()));
    }
    let wr = gaussian_window(rows.min(WINDOW));
    let wc = gaussian_window(cols.min(WINDOW));
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let (mx, ..) = filter_valid(x, rows, cols, &wr, &wc);
    let (my, ..) = filter_valid(y, rows, cols, &wr, &wc);
    let (mxx, ..) = filter_valid(&prod(x, x), rows, cols, &wr, &wc);
    let (myy, ..) = filter_valid(&prod(y, y), rows, cols, &wr, &wc);
    let (mxy, ..) = filter_valid(&prod(x, y), rows, cols, &wr, &wc);
    let mut total = 0.0;
    for i in 0..mx.len() {
        let (a, b) = (mx[i], my[i]);
        let vx = mxx[i] - a * a;
        let vy = myy[i] - b * b;
        let cov = mxy[i] - a * b;
        total += ((2.0 * a * b + c1) * (2.0 * cov + c2)) / ((a * a + b * b + c1) * (vx + vy + c2));
    }
    Ok(total / mx.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn psnr_examples() {
        let x = vec![0.3; 8];
        assert_eq!(psnr(&x, &x, 1.0).unwrap(), f64::INFINITY);
        let y: Vec<f64> = x.iter().map(|v| v + 0.1).collect();
        approx::assert_relative_eq!(psnr(&x, &y, 1.0).unwrap(), 20.0, epsilon = 1e-9);
        assert!(psnr(&x, &y, 0.0).is_err());
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..16 * 16).map(|_| rng.random::<f64>()).collect();
        approx::assert_relative_eq!(ssim(&x, &x, 16, 16, 1.0).unwrap(), 1.0, epsilon = 1e-12);
        for _ in 0..5 {
            let y: Vec<f64> = (0..16 * 16).map(|_| rng.random::<f64>()).collect();
            let a = ssim(&x, &y, 16, 16, 1.0).unwrap();
            let b = ssim(&y, &x, 16, 16, 1.0).unwrap();
            approx::assert_relative_eq!(a, b, epsilon = 1e-14);
            assert!(a < 1.0);
        }
        let s: Vec<f64> = (0..40).map(|i| (i as f64 * 0.3).sin()).collect();
        approx::assert_relative_eq!(ssim(&s, &s, 1, 40, 2.0).unwrap(), 1.0, epsilon = 1e-12);
    }
}
