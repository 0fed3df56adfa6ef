//! Image similarity metrics on `[0,1]` pixels.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Side of the square SSIM window.
pub const SSIM_WINDOW: usize = 8;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Mean absolute difference.
pub fn l1<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape("l1", a, b)?;
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x.as_f64() - y.as_f64()).abs()).sum();
    Ok(s / a.len() as f64)
}

/// Root of the mean squared difference.
pub fn rmse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape("rmse", a, b)?;
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2)).sum();
    Ok((s / a.len() as f64).sqrt())
}

/// SSIM of one window from its first and second moments.
pub fn ssim_from_moments(mu_a: f64, mu_b: f64, var_a: f64, var_b: f64, cov: f64) -> f64 {
    ((2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2))
        / ((mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2))
}

/// Summed-area table with a zero border: `t[(y+1)(w+1) + x+1] = Σ v[..=y][..=x]`.
fn integral(h: usize, w: usize, v: impl Fn(usize) -> f64) -> Vec<f64> {
    let mut t = vec![0.0; (h + 1) * (w + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += v(y * w + x);
            t[(y + 1) * (w + 1) + x + 1] = t[y * (w + 1) + x + 1] + row;
        }
    }
    t
}

/// Mean SSIM over all 8×8 windows (stride 1, uniform weights, population
/// moments). Leading axes are treated as separate channels and averaged.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape("ssim", a, b)?;
    let shape = a.shape();
    if shape.len() < 2 {
        return Err(Error::dim("ssim", format!("need an image, got shape {shape:?}")));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::dim(
            "ssim",
            format!("{h}×{w} image is smaller than the {SSIM_WINDOW}×{SSIM_WINDOW} window"),
        ));
    }
    let plane = h * w;
    let channels = a.len() / plane;
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for c in 0..channels {
        let pa = &a.data()[c * plane..(c + 1) * plane];
        let pb = &b.data()[c * plane..(c + 1) * plane];
        let sa = integral(h, w, |i| pa[i].as_f64());
        let sb = integral(h, w, |i| pb[i].as_f64());
        let saa = integral(h, w, |i| pa[i].as_f64().powi(2));
        let sbb = integral(h, w, |i| pb[i].as_f64().powi(2));
        let sab = integral(h, w, |i| pa[i].as_f64() * pb[i].as_f64());
        let stride = w + 1;
        let window = |t: &[f64], y: usize, x: usize| {
            let (y1, x1) = (y + SSIM_WINDOW, x + SSIM_WINDOW);
            (t[y1 * stride + x1] - t[y * stride + x1] - t[y1 * stride + x] + t[y * stride + x]) / n
        };
        for y in 0..oh {
            for x in 0..ow {
                let (ma, mb) = (window(&sa, y, x), window(&sb, y, x));
                let va = window(&saa, y, x) - ma * ma;
                let vb = window(&sbb, y, x) - mb * mb;
                let cov = window(&sab, y, x) - ma * mb;
                total += ssim_from_moments(ma, mb, va, vb, cov);
            }
        }
    }
    Ok(total / (channels * oh * ow) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(v: Vec<f64>) -> Tensor<f64> {
        Tensor::new(&[1, 8, 8], v).unwrap()
    }

    #[test]
    fn l1_and_rmse_examples() {
        let zeros = img(vec![0.0; 64]);
        let ones = img(vec![1.0; 64]);
        assert_eq!(l1(&zeros, &zeros).unwrap(), 0.0);
        assert_eq!(l1(&zeros, &ones).unwrap(), 1.0);
        assert_eq!(rmse(&zeros, &ones).unwrap(), 1.0);
        let half = img((0..64).map(|i| if i % 2 == 0 { 0.5 } else { 0.0 }).collect());
        assert_eq!(l1(&zeros, &half).unwrap(), 0.25);
    }

    #[test]
    fn ssim_single_window_by_hand() {
        let a = img((0..64).map(|i| (i % 8) as f64 / 8.0).collect());
        let b = img(vec![0.5; 64]);
        // b is constant: var_b = cov = 0.
        let mu_a = 3.5 / 8.0;
        let var_a = (0..8).map(|x| (x as f64 / 8.0 - mu_a).powi(2)).sum::<f64>() / 8.0;
        let want = (2.0 * mu_a * 0.5 + SSIM_C1) * SSIM_C2 / ((mu_a * mu_a + 0.25 + SSIM_C1) * (var_a + SSIM_C2));
        assert!((ssim(&a, &b).unwrap() - want).abs() < 1e-12);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_errors() {
        let small = Tensor::<f64>::zeros(&[1, 7, 9]);
        assert!(ssim(&small, &small).is_err());
        assert!(ssim(&img(vec![0.0; 64]), &Tensor::zeros(&[1, 64, 1])).is_err());
        assert!(l1(&img(vec![0.0; 64]), &Tensor::zeros(&[64])).is_err());
    }
}
