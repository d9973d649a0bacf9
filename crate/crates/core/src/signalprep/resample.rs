use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{ensure, Result};

/// Output length for resampling `n` samples from `fs_in` to `fs_out`.
pub fn resampled_len(n: usize, fs_in: f64, fs_out: f64) -> usize {
    (n as f64 * fs_out / fs_in).round() as usize
}

/// Band-limited resampling: the spectrum is truncated or zero-padded and
/// inverted at the new length. An even-length Nyquist bin is split when
/// upsampling and folded when downsampling, so real input stays real.
pub fn resample(x: &[f64], fs_in: f64, fs_out: f64) -> Result<Vec<f64>> {
    ensure!(fs_in > 0.0 && fs_out > 0.0 && fs_in.is_finite() && fs_out.is_finite(), InvalidArgument, "sampling rates must be positive, got {} -> {}", fs_in, fs_out);
    ensure!(!x.is_empty(), InvalidArgument, "cannot resample an empty signal");
    ensure!(x.iter().all(|v| v.is_finite()), InvalidArgument, "signal holds non-finite samples");
    let nx = x.len();
    let num = resampled_len(nx, fs_in, fs_out);
    ensure!(num > 0, InvalidArgument, "resampling {} samples to {} Hz leaves no samples", nx, fs_out);
    if num == nx {
        return Ok(x.to_vec());
    }

    let mut planner = FftPlanner::<f64>::new();
    let mut spec: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    planner.plan_fft_forward(nx).process(&mut spec);

    let n = num.min(nx);
    let nyq = n / 2 + 1;
    let mut out = vec![Complex64::new(0.0, 0.0); num];
    out[..nyq].copy_from_slice(&spec[..nyq]);
    for j in 1..=(n - nyq) {
        out[num - j] = spec[nx - j];
    }
    if n % 2 == 0 {
        let h = n / 2;
        if num < nx {
            out[h] = spec[h] + spec[nx - h];
        } else {
            out[h] = spec[h] * 0.5;
            out[num - h] = spec[nx - h] * 0.5;
        }
    }
    planner.plan_fft_inverse(num).process(&mut out);
    let scale = 1.0 / nx as f64;
    Ok(out.iter().map(|c| c.re * scale).collect())
}
