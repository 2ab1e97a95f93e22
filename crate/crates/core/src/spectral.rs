//! FFT helpers on row-major planes.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

/// In-place 2-D FFT of a `rows x cols` complex plane (unnormalized).
pub fn fft2(data: &mut [Complex64], rows: usize, cols: usize, inverse: bool) {
    assert_eq!(data.len(), rows * cols);
    let mut planner = FftPlanner::new();
    let (row_fft, col_fft) = if inverse {
        (planner.plan_fft_inverse(cols), planner.plan_fft_inverse(rows))
    } else {
        (planner.plan_fft_forward(cols), planner.plan_fft_forward(rows))
    };
    row_fft.process(data);
    let mut col = vec![Complex64::default(); rows];
    for j in 0..cols {
        for i in 0..rows {
            col[i] = data[i * cols + j];
        }
        col_fft.process(&mut col);
        for i in 0..rows {
            data[i * cols + j] = col[i];
        }
    }
}

/// Signed integer frequency of FFT bin `k` out of `n`.
pub fn signed_freq(k: usize, n: usize) -> f64 {
    if k <= n / 2 {
        k as f64
    } else {
        k as f64 - n as f64
    }
}

/// Mirror a `nlat x nlon` plane into a `2 nlat x nlon` plane that is
/// periodic in both directions (rows, then rows reversed).
pub fn mirror_rows(plane: &[f64], nlat: usize, nlon: usize) -> Vec<Complex64> {
    let mut out = Vec::with_capacity(2 * nlat * nlon);
    out.extend(plane.iter().map(|v| Complex64::new(*v, 0.0)));
    for i in (0..nlat).rev() {
        out.extend(plane[i * nlon..(i + 1) * nlon].iter().map(|v| Complex64::new(*v, 0.0)));
    }
    out
}

/// Multiply the 2-D spectrum of `plane` (mirrored to be periodic) by
/// `gain(radial_wavenumber)` and return the filtered plane.
pub fn radial_filter(plane: &[f64], nlat: usize, nlon: usize, gain: impl Fn(f64) -> f64) -> Vec<f64> {
    let rows = 2 * nlat;
    let mut c = mirror_rows(plane, nlat, nlon);
    fft2(&mut c, rows, nlon, false);
    for i in 0..rows {
        let ky = signed_freq(i, rows);
        for j in 0..nlon {
            let kx = signed_freq(j, nlon);
            c[i * nlon + j] *= gain((kx * kx + ky * ky).sqrt());
        }
    }
    fft2(&mut c, rows, nlon, true);
    let scale = 1.0 / (rows * nlon) as f64;
    c[..nlat * nlon].iter().map(|v| v.re * scale).collect()
}
