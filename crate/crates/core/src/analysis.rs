//! Frequency-domain inspection of learned kernels.
//!
//! A trained network can be asked what its first convolution layer listens
//! to: each of the four first-layer kernels is mean-removed, zero-padded, and
//! transformed, and the dominant spectral peaks are compared against the
//! chamber resonance modes of the engine the data came from. Agreement means
//! the network learned the physics it was sized for, rather than an arbitrary
//! shortcut.

use crate::cnn::KnockNet;
use crate::error::{KnockError, Result};
use crate::fft::fft_real;
use crate::signal::{acoustic_mode_frequencies, sample_rate_hz, EngineGeometry, DEFAULT_RESOLUTION_DEG};

/// Zero-pad target for kernel transforms: fine bin spacing (about 88 Hz at
/// the default 90 kHz rate) while staying a radix-2 length.
pub const DEFAULT_ZERO_PAD: usize = 1024;

/// Peak search ignores bins at or below this frequency; the mean removal
/// leaves a near-DC artifact that must not win the argmax.
pub const DEFAULT_PEAK_MIN_HZ: f64 = 500.0;

/// One-sided magnitude spectra of the first-layer kernels.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSpectrum {
    /// Bin center frequencies, 0 through Nyquist; length zero_pad_length/2+1.
    pub frequencies: Vec<f64>,
    /// One magnitude row per first-layer output channel.
    pub magnitudes: Vec<Vec<f64>>,
    pub kernel_size: usize,
    pub zero_pad_length: usize,
}

/// The first-layer kernels, one slice per output channel. The first layer
/// sees a single input channel, so both convolution modes store exactly one
/// kernel per output channel.
pub fn first_layer_kernels(net: &KnockNet) -> Vec<&[f64]> {
    let k = net.conv1.kernel_size;
    (0..net.conv1.out_channels).map(|j| &net.conv1.weights[j * k..(j + 1) * k]).collect()
}

/// Transform each first-layer kernel: embed in `zero_pad_length` zeros,
/// subtract the mean over the padded length (equivalently, clear the DC bin),
/// and take one-sided magnitudes.
pub fn first_layer_spectrum(
    net: &KnockNet,
    sample_rate_hz: f64,
    zero_pad_length: usize,
) -> Result<KernelSpectrum> {
    let k = net.conv1.kernel_size;
    if zero_pad_length < k {
        return Err(KnockError::Domain(format!(
            "zero-pad length {zero_pad_length} is shorter than the kernel ({k} taps)"
        )));
    }
    if !zero_pad_length.is_power_of_two() {
        return Err(KnockError::Domain(format!(
            "zero-pad length must be a power of two, got {zero_pad_length}"
        )));
    }
    if !(sample_rate_hz.is_finite() && sample_rate_hz > 0.0) {
        return Err(KnockError::Domain(format!("bad sample rate {sample_rate_hz}")));
    }
    let half = zero_pad_length / 2;
    let frequencies: Vec<f64> =
        (0..=half).map(|i| i as f64 * sample_rate_hz / zero_pad_length as f64).collect();
    let mut magnitudes = Vec::with_capacity(net.conv1.out_channels);
    for kernel in first_layer_kernels(net) {
        let mut padded = vec![0.0; zero_pad_length];
        padded[..k].copy_from_slice(kernel);
        let mean = padded.iter().sum::<f64>() / zero_pad_length as f64;
        for x in &mut padded {
            *x -= mean;
        }
        let bins = fft_real(&padded, zero_pad_length);
        magnitudes.push(bins[..=half].iter().map(|c| c.norm()).collect());
    }
    Ok(KernelSpectrum { frequencies, magnitudes, kernel_size: k, zero_pad_length })
}

/// Strongest bin of one channel above `min_hz` (exclusive); ties go to the
/// lower frequency. Returns (frequency, magnitude).
pub fn dominant_peak_above(
    spectrum: &KernelSpectrum,
    channel: usize,
    min_hz: f64,
) -> Result<(f64, f64)> {
    let row = spectrum.magnitudes.get(channel).ok_or_else(|| {
        KnockError::Domain(format!(
            "channel {channel} out of range ({} channels)",
            spectrum.magnitudes.len()
        ))
    })?;
    let mut best: Option<(f64, f64)> = None;
    for (f, m) in spectrum.frequencies.iter().zip(row) {
        if *f <= min_hz {
            continue;
        }
        match best {
            Some((_, bm)) if *m <= bm => {}
            _ => best = Some((*f, *m)),
        }
    }
    best.ok_or_else(|| {
        KnockError::Domain(format!("no spectrum bins above {min_hz} Hz"))
    })
}

pub fn dominant_peak(spectrum: &KernelSpectrum, channel: usize) -> Result<(f64, f64)> {
    dominant_peak_above(spectrum, channel, DEFAULT_PEAK_MIN_HZ)
}

/// Outcome of checking learned kernels against the chamber resonances.
#[derive(Debug, Clone, PartialEq)]
pub struct HypothesisReport {
    /// Magnitude-weighted mean of the per-channel dominant peak frequencies.
    pub consensus_hz: f64,
    /// (frequency, magnitude) of each channel's dominant peak.
    pub per_channel: Vec<(f64, f64)>,
    /// Resonance mode frequencies of the geometry, ascending.
    pub mode_frequencies: Vec<f64>,
    /// The mode closest to the consensus.
    pub best_mode_hz: f64,
    /// Symmetric relative distance to the best mode:
    /// |consensus - mode| / max(consensus, mode). A tolerance of 1.0 always
    /// passes, so the scale is bounded and comparable across geometries.
    pub relative_error: f64,
    pub pass: bool,
}

/// Do the first-layer kernels resonate near a chamber mode of `geometry`?
///
/// Passes when the magnitude-weighted consensus of the per-channel dominant
/// peaks lies within `tolerance_fraction` (symmetric relative distance) of
/// any mode. All-zero kernels have no peaks to speak for and fail.
pub fn hypothesis_check(
    net: &KnockNet,
    geometry: &EngineGeometry,
    tolerance_fraction: f64,
) -> Result<HypothesisReport> {
    if !(tolerance_fraction >= 0.0 && tolerance_fraction.is_finite()) {
        return Err(KnockError::Domain(format!(
            "tolerance fraction must be finite and non-negative, got {tolerance_fraction}"
        )));
    }
    let rate = sample_rate_hz(geometry.rpm, DEFAULT_RESOLUTION_DEG);
    let spectrum = first_layer_spectrum(net, rate, DEFAULT_ZERO_PAD)?;
    let mut per_channel = Vec::with_capacity(spectrum.magnitudes.len());
    for channel in 0..spectrum.magnitudes.len() {
        per_channel.push(dominant_peak(&spectrum, channel)?);
    }
    let mode_frequencies: Vec<f64> =
        acoustic_mode_frequencies(geometry)?.iter().map(|m| m.frequency_hz).collect();
    let weight: f64 = per_channel.iter().map(|(_, m)| m).sum();
    if weight <= 0.0 {
        return Ok(HypothesisReport {
            consensus_hz: 0.0,
            per_channel,
            best_mode_hz: mode_frequencies[0],
            mode_frequencies,
            relative_error: f64::INFINITY,
            pass: false,
        });
    }
    let consensus_hz = per_channel.iter().map(|(f, m)| f * m).sum::<f64>() / weight;
    let (best_mode_hz, relative_error) = mode_frequencies
        .iter()
        .map(|&m| (m, (consensus_hz - m).abs() / consensus_hz.max(m)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("mode list is never empty");
    Ok(HypothesisReport {
        consensus_hz,
        per_channel,
        mode_frequencies,
        best_mode_hz,
        relative_error,
        pass: relative_error <= tolerance_fraction,
    })
}

/// `frequency_hz,channel_0,...` rows for external plotting.
pub fn spectrum_csv(spectrum: &KernelSpectrum) -> String {
    let mut out = String::from("frequency_hz");
    for c in 0..spectrum.magnitudes.len() {
        out.push_str(&format!(",channel_{c}"));
    }
    out.push('\n');
    for (i, f) in spectrum.frequencies.iter().enumerate() {
        out.push_str(&format!("{f:?}"));
        for row in &spectrum.magnitudes {
            out.push_str(&format!(",{:?}", row[i]));
        }
        out.push('\n');
    }
    out
}
