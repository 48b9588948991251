//! Normalized Gaussian kernels and reflect-padded separable filtering.

use ndarray::{Array2, Array3, ArrayView2, Axis};

use crate::error::{Error, Result};

fn check(r: usize, sigma: f64) -> Result<()> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Param(format!(
            "gaussian sigma must be positive and finite, got {sigma} (radius {r})"
        )));
    }
    Ok(())
}

/// One-dimensional Gaussian of length `2r + 1`, summing to one.
pub fn gaussian_kernel_1d(r: usize, sigma: f64) -> Result<Vec<f64>> {
    check(r, sigma)?;
    let raw: Vec<f64> = (0..=2 * r)
        .map(|k| {
            let x = k as f64 - r as f64;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|v| v / total).collect())
}

/// Square Gaussian kernel with side `2r + 1`, entries proportional to
/// `exp(-(x² + y²) / 2σ²)` and summing to one.
pub fn gaussian_kernel(r: usize, sigma: f64) -> Result<Array2<f64>> {
    let k = gaussian_kernel_1d(r, sigma)?;
    let n = k.len();
    Ok(Array2::from_shape_fn((n, n), |(i, j)| k[i] * k[j]))
}

/// Mirror an out-of-range index back into `0..n` without repeating the edge
/// sample (`-1 -> 1`, `n -> n-2`). Offsets larger than the signal bounce
/// repeatedly.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

fn filter_lines(src: ArrayView2<f64>, kernel: &[f64], axis: Axis) -> Array2<f64> {
    let r = kernel.len() / 2;
    let mut out = Array2::zeros(src.dim());
    let n = src.len_of(axis);
    let mut padded = vec![0.0; n + 2 * r];
    for (src_line, mut dst_line) in src.lanes(axis).into_iter().zip(out.lanes_mut(axis)) {
        for (i, p) in padded.iter_mut().enumerate() {
            *p = src_line[reflect_index(i as isize - r as isize, n)];
        }
        for (i, dst) in dst_line.iter_mut().enumerate() {
            *dst = kernel.iter().zip(&padded[i..]).map(|(w, v)| w * v).sum();
        }
    }
    out
}

/// Convolve one plane with the Gaussian `g(r, sigma)`, reflect padding.
pub fn blur_plane(plane: ArrayView2<f64>, r: usize, sigma: f64) -> Result<Array2<f64>> {
    if r == 0 {
        check(r, sigma)?;
        return Ok(plane.to_owned());
    }
    let k = gaussian_kernel_1d(r, sigma)?;
    let rows = filter_lines(plane, &k, Axis(1));
    Ok(filter_lines(rows.view(), &k, Axis(0)))
}

/// Blur every channel of a `(channel, row, column)` raster independently.
pub fn blur_channels(src: &Array3<f64>, r: usize, sigma: f64) -> Result<Array3<f64>> {
    let mut out = Array3::zeros(src.dim());
    for (s, mut d) in src.outer_iter().zip(out.outer_iter_mut()) {
        d.assign(&blur_plane(s, r, sigma)?);
    }
    Ok(out)
}

/// The `n x n` matrix `M` of one reflect-padded Gaussian pass along a signal
/// of length `n`: `filtered[i] = sum_j M[i, j] * signal[j]`.
pub fn blur_matrix(n: usize, r: usize, sigma: f64) -> Result<Array2<f64>> {
    let k = gaussian_kernel_1d(r, sigma)?;
    let mut m = Array2::zeros((n, n));
    for i in 0..n {
        for (t, w) in k.iter().enumerate() {
            let j = reflect_index(i as isize + t as isize - r as isize, n);
            m[[i, j]] += w;
        }
    }
    Ok(m)
}
