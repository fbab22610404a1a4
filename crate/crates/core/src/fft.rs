//! Iterative radix-2 FFT, enough for power-of-two kernel spectra.

use num_complex::Complex64;
use std::f64::consts::PI;

/// In-place decimation-in-time FFT. Length must be a power of two.
pub fn fft_in_place(data: &mut [Complex64]) {
    let n = data.len();
    assert!(n.is_power_of_two(), "fft length must be a power of two, got {n}");
    if n < 2 {
        return;
    }
    // Bit-reversal permutation.
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            data.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let step = -2.0 * PI / len as f64;
        let w_len = Complex64::from_polar(1.0, step);
        for chunk in data.chunks_mut(len) {
            let mut w = Complex64::new(1.0, 0.0);
            let half = len / 2;
            for i in 0..half {
                let u = chunk[i];
                let v = chunk[i + half] * w;
                chunk[i] = u + v;
                chunk[i + half] = u - v;
                w *= w_len;
            }
        }
        len <<= 1;
    }
}

/// Forward transform of a real signal zero-padded (or truncated) to `n`.
pub fn fft_real(signal: &[f64], n: usize) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = signal
        .iter()
        .take(n)
        .map(|&x| Complex64::new(x, 0.0))
        .collect();
    buf.resize(n, Complex64::new(0.0, 0.0));
    fft_in_place(&mut buf);
    buf
}
