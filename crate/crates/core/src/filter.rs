//! Butterworth band-pass design and zero-phase application.
//!
//! Classic recipe: analog prototype poles, low-pass to band-pass transform,
//! bilinear transform with pre-warped cutoffs, then forward-backward filtering
//! with odd-symmetric edge padding and steady-state initial conditions so
//! constant inputs produce exactly zero output.

use crate::error::{KnockError, Result};
use num_complex::Complex64;
use std::f64::consts::PI;

/// Digital coefficients (b, a) of a 4th-order Butterworth band-pass
/// (order-2 prototype, so four poles). `a[0]` is normalized to 1.
pub fn butter_bandpass(low_hz: f64, high_hz: f64, rate_hz: f64) -> (Vec<f64>, Vec<f64>) {
    let fs2 = 2.0 * rate_hz;
    // Pre-warp the cutoffs so the bilinear transform lands them exactly.
    let wl = fs2 * (PI * low_hz / rate_hz).tan();
    let wh = fs2 * (PI * high_hz / rate_hz).tan();
    let w0sq = wl * wh;
    let bw = wh - wl;

    // Order-2 Butterworth prototype poles on the unit circle's left half.
    let prototype = [
        Complex64::from_polar(1.0, 3.0 * PI / 4.0),
        Complex64::from_polar(1.0, 5.0 * PI / 4.0),
    ];

    // Low-pass -> band-pass: each prototype pole splits into two.
    let mut s_poles = Vec::with_capacity(4);
    for p in prototype {
        let half = p * (bw * 0.5);
        let disc = (half * half - w0sq).sqrt();
        s_poles.push(half + disc);
        s_poles.push(half - disc);
    }
    // Band-pass gain in s: H(s) = (bw * s)^2 / prod(s - p_i), zeros at s = 0.
    let analog_gain = bw * bw;

    // Bilinear map s -> z and gain bookkeeping.
    let z_poles: Vec<Complex64> = s_poles
        .iter()
        .map(|&s| (Complex64::new(fs2, 0.0) + s) / (Complex64::new(fs2, 0.0) - s))
        .collect();
    // Two zeros at s = 0 map to z = 1; the two zeros at infinity land on z = -1.
    let mut denom_corr = Complex64::new(1.0, 0.0);
    for &s in &s_poles {
        denom_corr *= Complex64::new(fs2, 0.0) - s;
    }
    let digital_gain = analog_gain * (Complex64::new(fs2 * fs2, 0.0) / denom_corr).re;

    // b(z) = gain * (z - 1)^2 (z + 1)^2 = gain * (z^2 - 1)^2
    let b: Vec<f64> = [1.0, 0.0, -2.0, 0.0, 1.0].iter().map(|c| c * digital_gain).collect();
    let a = real_poly_from_roots(&z_poles);
    (b, a)
}

/// Real polynomial coefficients (descending powers, leading 1) from complex
/// roots that come in conjugate pairs.
fn real_poly_from_roots(roots: &[Complex64]) -> Vec<f64> {
    let mut coeffs = vec![Complex64::new(1.0, 0.0)];
    for &r in roots {
        let mut next = vec![Complex64::new(0.0, 0.0); coeffs.len() + 1];
        for (i, &c) in coeffs.iter().enumerate() {
            next[i] += c;
            next[i + 1] -= c * r;
        }
        coeffs = next;
    }
    coeffs.iter().map(|c| c.re).collect()
}

/// Direct-form II transposed filter with explicit initial state.
fn lfilter(b: &[f64], a: &[f64], x: &[f64], zi: &[f64]) -> Vec<f64> {
    let order = a.len() - 1;
    let mut z = zi.to_vec();
    debug_assert_eq!(z.len(), order);
    let mut y = Vec::with_capacity(x.len());
    for &xi in x {
        let yi = b[0] * xi + z[0];
        for j in 0..order - 1 {
            z[j] = b[j + 1] * xi + z[j + 1] - a[j + 1] * yi;
        }
        z[order - 1] = b[order] * xi - a[order] * yi;
        y.push(yi);
    }
    y
}

/// Steady-state filter state for a unit step, so startup transients vanish.
fn steady_state_zi(b: &[f64], a: &[f64]) -> Vec<f64> {
    let order = a.len() - 1;
    let gain_dc = b.iter().sum::<f64>() / a.iter().sum::<f64>();
    let mut zi = vec![0.0; order];
    zi[order - 1] = b[order] - a[order] * gain_dc;
    for j in (0..order - 1).rev() {
        zi[j] = b[j + 1] + zi[j + 1] - a[j + 1] * gain_dc;
    }
    zi
}

/// Zero-phase filtering: forward pass, backward pass, odd edge extension.
pub fn filtfilt(b: &[f64], a: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    let pad = 3 * a.len().max(b.len());
    if x.len() <= pad {
        return Err(KnockError::Domain(format!(
            "signal of {} samples is too short to filter (needs more than {pad})",
            x.len()
        )));
    }
    let n = x.len();
    let mut ext = Vec::with_capacity(n + 2 * pad);
    for i in (1..=pad).rev() {
        ext.push(2.0 * x[0] - x[i]);
    }
    ext.extend_from_slice(x);
    for i in 0..pad {
        ext.push(2.0 * x[n - 1] - x[n - 2 - i]);
    }

    let zi = steady_state_zi(b, a);
    let scaled: Vec<f64> = zi.iter().map(|z| z * ext[0]).collect();
    let mut y = lfilter(b, a, &ext, &scaled);
    y.reverse();
    let scaled: Vec<f64> = zi.iter().map(|z| z * y[0]).collect();
    let mut y = lfilter(b, a, &y, &scaled);
    y.reverse();
    Ok(y[pad..pad + n].to_vec())
}
