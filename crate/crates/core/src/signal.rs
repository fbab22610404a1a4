//! Chamber resonance physics and crank-angle signal handling.
//!
//! A knocking cylinder rings at the acoustic eigenmodes of the combustion
//! chamber, modeled as a flat cylindrical cavity: each mode frequency is a
//! Bessel-root factor scaled by the speed of sound in the burned gas and
//! divided by the bore circumference term. Everything downstream (kernel
//! sizing, band selection, synthetic data) hangs off these few numbers.
//!
//! Signals live on a crank-angle grid. At a given engine speed the grid has a
//! fixed time axis, so a sample rate in Hz follows from rpm and angular
//! resolution; the analysis window is the 60 degrees after top dead center.

use crate::error::{KnockError, Result};
use crate::filter;

/// Speed of sound in the burned mixture, m/s (charge near 2500 K).
pub const DEFAULT_SPEED_OF_SOUND: f64 = 966.0;
pub const DEFAULT_RPM: f64 = 1500.0;
/// Crank-angle distance between samples, degrees.
pub const DEFAULT_RESOLUTION_DEG: f64 = 0.1;
/// Analysis window span after top dead center, degrees.
pub const WINDOW_DEG: f64 = 60.0;

/// Bessel-root mode factors of a cylindrical cavity, lowest five modes.
pub const MODE_FACTORS: [(&str, f64); 5] = [
    ("1st circumferential", 1.841),
    ("2nd circumferential", 3.054),
    ("1st radial", 3.831),
    ("3rd circumferential", 4.201),
    ("1st combined", 5.318),
];

/// Cylinder and operating-point description sufficient for mode frequencies.
#[derive(Debug, Clone, PartialEq)]
pub struct EngineGeometry {
    /// Cylinder bore in millimeters.
    pub bore_mm: f64,
    pub rpm: f64,
    /// Speed of sound in the burned charge, m/s.
    pub speed_of_sound: f64,
}

impl EngineGeometry {
    pub fn new(bore_mm: f64) -> Self {
        EngineGeometry { bore_mm, rpm: DEFAULT_RPM, speed_of_sound: DEFAULT_SPEED_OF_SOUND }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if !(self.bore_mm.is_finite() && self.bore_mm > 0.0) {
            return Err(KnockError::Geometry(format!("bore must be positive, got {}", self.bore_mm)));
        }
        if !(self.speed_of_sound.is_finite() && self.speed_of_sound > 0.0) {
            return Err(KnockError::Geometry(format!(
                "speed of sound must be positive, got {}",
                self.speed_of_sound
            )));
        }
        if !(self.rpm.is_finite() && self.rpm > 0.0) {
            return Err(KnockError::Geometry(format!("rpm must be positive, got {}", self.rpm)));
        }
        Ok(())
    }
}

/// One chamber resonance: mode name, its Bessel factor, and the frequency it
/// lands on for a concrete geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct AcousticMode {
    pub name: &'static str,
    pub bessel_factor: f64,
    pub frequency_hz: f64,
}

/// Resonance frequencies of the first five chamber modes, ascending.
///
/// `f = a * B / (pi * D)` with the speed of sound `a` in m/s and the bore `D`
/// in mm gives kHz directly; the returned values are in Hz.
pub fn acoustic_mode_frequencies(geometry: &EngineGeometry) -> Result<Vec<AcousticMode>> {
    geometry.validate()?;
    Ok(MODE_FACTORS
        .iter()
        .map(|&(name, factor)| AcousticMode {
            name,
            bessel_factor: factor,
            frequency_hz: 1000.0 * geometry.speed_of_sound * factor
                / (std::f64::consts::PI * geometry.bore_mm),
        })
        .collect())
}

/// Sample rate in Hz of a crank-angle grid: `rpm * 6 / resolution`.
pub fn sample_rate_hz(rpm: f64, resolution_deg: f64) -> f64 {
    rpm * 6.0 / resolution_deg
}

fn validate_rate(rpm: f64, resolution_deg: f64) -> Result<f64> {
    if !(rpm.is_finite() && rpm > 0.0) {
        return Err(KnockError::Geometry(format!("rpm must be positive, got {rpm}")));
    }
    if !(resolution_deg.is_finite() && resolution_deg > 0.0) {
        return Err(KnockError::Geometry(format!(
            "resolution must be positive, got {resolution_deg}"
        )));
    }
    Ok(sample_rate_hz(rpm, resolution_deg))
}

/// Convolution kernel size whose span covers one period of `f_target_hz`.
///
/// The kernel should span one full oscillation of the target mode, so its
/// size is the number of samples per period, rounded half-up and floored at 1:
/// `k = round(sample_rate / f_target)`.
pub fn kernel_size_for_frequency(f_target_hz: f64, rpm: f64, resolution_deg: f64) -> Result<usize> {
    let rate = validate_rate(rpm, resolution_deg)?;
    if !(f_target_hz.is_finite() && f_target_hz > 0.0) {
        return Err(KnockError::Domain(format!(
            "target frequency must be positive, got {f_target_hz}"
        )));
    }
    let nyquist = rate / 2.0;
    if f_target_hz > nyquist {
        return Err(KnockError::OutOfBand { requested_hz: f_target_hz, nyquist_hz: nyquist });
    }
    let samples_per_period = rate / f_target_hz;
    Ok(((samples_per_period + 0.5).floor() as usize).max(1))
}

/// Inverse of [`kernel_size_for_frequency`]: the half-open frequency interval
/// `(low, high]` whose rounded kernel size equals `k`.
pub fn frequency_range_for_kernel(k: usize, rpm: f64, resolution_deg: f64) -> Result<(f64, f64)> {
    let rate = validate_rate(rpm, resolution_deg)?;
    if k == 0 {
        return Err(KnockError::Domain("kernel size must be at least 1".into()));
    }
    let k = k as f64;
    Ok((rate / (k + 0.5), rate / (k - 0.5)))
}

/// One full engine cycle of pressure samples on a crank-angle grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PressureCycle {
    pub cycle_id: String,
    /// Opaque origin marker (engine, measurement campaign, generator run).
    pub source_tag: String,
    /// Angle of the first sample, degrees relative to firing top dead center.
    pub start_deg: f64,
    pub resolution_deg: f64,
    pub samples: Vec<f64>,
}

impl PressureCycle {
    pub fn angle_at(&self, index: usize) -> f64 {
        self.start_deg + index as f64 * self.resolution_deg
    }
}

/// The knock analysis segment: pressure over `[0, 60)` degrees after top dead
/// center (600 samples at the default resolution).
#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisWindow {
    pub start_deg: f64,
    pub resolution_deg: f64,
    pub samples: Vec<f64>,
}

/// Cut the `[0, WINDOW_DEG)` segment out of a full cycle.
///
/// Selects exactly the samples whose angle lies in the half-open window; the
/// cycle must cover the whole span. A window-sized input starting at zero
/// passes through unchanged.
pub fn extract_window(cycle: &PressureCycle) -> Result<AnalysisWindow> {
    if !(cycle.resolution_deg.is_finite() && cycle.resolution_deg > 0.0) {
        return Err(KnockError::Geometry(format!(
            "resolution must be positive, got {}",
            cycle.resolution_deg
        )));
    }
    if cycle.samples.is_empty() {
        return Err(KnockError::Coverage(format!("cycle {} has no samples", cycle.cycle_id)));
    }
    // First index with angle >= 0 and first with angle >= WINDOW_DEG; the small
    // slack absorbs representation error in the angle grid.
    let eps = 1e-9;
    let first = ((0.0 - cycle.start_deg) / cycle.resolution_deg - eps).ceil().max(0.0) as usize;
    let end = ((WINDOW_DEG - cycle.start_deg) / cycle.resolution_deg - eps).ceil() as usize;
    if cycle.start_deg > 0.0 + cycle.resolution_deg * 0.5 {
        return Err(KnockError::Coverage(format!(
            "cycle {} starts at {} deg, after the window start",
            cycle.cycle_id, cycle.start_deg
        )));
    }
    if end > cycle.samples.len() || first >= end {
        return Err(KnockError::Coverage(format!(
            "cycle {} covers [{}, {}) deg but the window needs [0, {}) deg",
            cycle.cycle_id,
            cycle.start_deg,
            cycle.angle_at(cycle.samples.len()),
            WINDOW_DEG
        )));
    }
    Ok(AnalysisWindow {
        start_deg: cycle.angle_at(first),
        resolution_deg: cycle.resolution_deg,
        samples: cycle.samples[first..end].to_vec(),
    })
}

/// A pass band in Hz. Default is 3-9 kHz, bracketing the large-bore modes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Band {
    pub low_hz: f64,
    pub high_hz: f64,
}

impl Default for Band {
    fn default() -> Self {
        Band { low_hz: 3000.0, high_hz: 9000.0 }
    }
}

/// Zero-phase band-pass: a 4th-order Butterworth run forward and backward.
///
/// Forward-backward application doubles the magnitude response and cancels
/// phase distortion, so oscillation peaks keep their crank-angle positions.
/// Both cutoffs must lie strictly inside `(0, sample_rate / 2)`.
pub fn band_pass(window: &AnalysisWindow, band: Band, sample_rate_hz: f64) -> Result<AnalysisWindow> {
    if !(sample_rate_hz.is_finite() && sample_rate_hz > 0.0) {
        return Err(KnockError::Geometry(format!(
            "sample rate must be positive, got {sample_rate_hz}"
        )));
    }
    let nyquist = sample_rate_hz / 2.0;
    if !(band.low_hz > 0.0 && band.low_hz < band.high_hz && band.high_hz < nyquist) {
        return Err(KnockError::OutOfBand {
            requested_hz: if band.low_hz <= 0.0 { band.low_hz } else { band.high_hz },
            nyquist_hz: nyquist,
        });
    }
    let (b, a) = filter::butter_bandpass(band.low_hz, band.high_hz, sample_rate_hz);
    let samples = filter::filtfilt(&b, &a, &window.samples)?;
    Ok(AnalysisWindow {
        start_deg: window.start_deg,
        resolution_deg: window.resolution_deg,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn geometry(bore_mm: f64) -> EngineGeometry {
        EngineGeometry::new(bore_mm)
    }

    // Frozen mode-frequency table (kHz) recomputed from the mode formula for
    // the three bores used throughout the tests.
    const EXPECTED_KHZ: [(f64, [f64; 5]); 3] = [
        (65.0, [8.7, 14.4, 18.1, 19.9, 25.2]),
        (145.0, [3.9, 6.5, 8.1, 8.9, 11.3]),
        (190.0, [3.0, 4.9, 6.2, 6.8, 8.6]),
    ];

    #[test]
    fn mode_frequencies_match_frozen_table() {
        for (bore, expected) in EXPECTED_KHZ {
            let modes = acoustic_mode_frequencies(&geometry(bore)).unwrap();
            assert_eq!(modes.len(), 5);
            for (mode, want_khz) in modes.iter().zip(expected) {
                let got_khz = mode.frequency_hz / 1000.0;
                assert!(
                    (got_khz - want_khz).abs() <= 0.1,
                    "bore {bore} mode {}: got {got_khz} kHz, want {want_khz} kHz",
                    mode.name
                );
            }
        }
    }

    #[test]
    fn first_circumferential_examples() {
        let f145 = acoustic_mode_frequencies(&geometry(145.0)).unwrap()[0].frequency_hz;
        assert!((f145 / 1000.0 - 3.9).abs() <= 0.05);
        let f190 = acoustic_mode_frequencies(&geometry(190.0)).unwrap()[0].frequency_hz;
        assert!((f190 / 1000.0 - 3.0).abs() <= 0.05);
        let combined65 = acoustic_mode_frequencies(&geometry(65.0)).unwrap()[4].frequency_hz;
        assert!((combined65 / 1000.0 - 25.2).abs() <= 0.1);
    }

    #[test]
    fn modes_are_ascending() {
        let modes = acoustic_mode_frequencies(&geometry(145.0)).unwrap();
        for pair in modes.windows(2) {
            assert!(pair[0].frequency_hz < pair[1].frequency_hz);
        }
    }

    #[test]
    fn zero_bore_is_rejected() {
        assert!(matches!(
            acoustic_mode_frequencies(&geometry(0.0)),
            Err(KnockError::Geometry(_))
        ));
    }

    proptest! {
        // f scales linearly with the speed of sound and inversely with bore.
        #[test]
        fn mode_frequency_homogeneity(bore in 40.0f64..400.0, scale in 1.2f64..4.0) {
            let base = acoustic_mode_frequencies(&geometry(bore)).unwrap();
            let doubled = acoustic_mode_frequencies(&geometry(bore * scale)).unwrap();
            for (m0, m1) in base.iter().zip(&doubled) {
                prop_assert!((m1.frequency_hz * scale - m0.frequency_hz).abs() < 1e-6 * m0.frequency_hz);
            }
            let mut faster = geometry(bore);
            faster.speed_of_sound *= scale;
            let scaled = acoustic_mode_frequencies(&faster).unwrap();
            for (m0, m1) in base.iter().zip(&scaled) {
                prop_assert!((m1.frequency_hz - m0.frequency_hz * scale).abs() < 1e-6 * m1.frequency_hz);
            }
        }

        // Kernel size never grows with target frequency.
        #[test]
        fn kernel_size_monotone(f1 in 500.0f64..44_000.0, f2 in 500.0f64..44_000.0) {
            let (lo, hi) = if f1 <= f2 { (f1, f2) } else { (f2, f1) };
            let k_lo = kernel_size_for_frequency(lo, DEFAULT_RPM, DEFAULT_RESOLUTION_DEG).unwrap();
            let k_hi = kernel_size_for_frequency(hi, DEFAULT_RPM, DEFAULT_RESOLUTION_DEG).unwrap();
            prop_assert!(k_lo >= k_hi);
        }

        // Every frequency inside the reported interval rounds back to k.
        #[test]
        fn frequency_range_round_trips(k in 3usize..60, t in 1e-9f64..1.0) {
            let (low, high) = frequency_range_for_kernel(k, DEFAULT_RPM, DEFAULT_RESOLUTION_DEG).unwrap();
            prop_assert!(low < high);
            let f = low + (high - low) * t; // (low, high]
            prop_assert_eq!(
                kernel_size_for_frequency(f, DEFAULT_RPM, DEFAULT_RESOLUTION_DEG).unwrap(),
                k
            );
        }
    }

    #[test]
    fn kernel_size_reference_points() {
        // 1500 rpm sweeps 9000 deg/s, so 3 kHz spans 30 samples at 0.1 deg.
        assert_eq!(kernel_size_for_frequency(3000.0, 1500.0, 0.1).unwrap(), 30);
        assert_eq!(kernel_size_for_frequency(3900.0, 1500.0, 0.1).unwrap(), 23);
        assert_eq!(kernel_size_for_frequency(4900.0, 1500.0, 0.1).unwrap(), 18);
        assert_eq!(kernel_size_for_frequency(8100.0, 1500.0, 0.1).unwrap(), 11);
        // Exactly at Nyquist is the coarsest legal request: two samples per period.
        assert_eq!(kernel_size_for_frequency(4500.0, 1500.0, 1.0).unwrap(), 2);
        // One sample per period would alias; the guard fires first.
        assert!(matches!(
            kernel_size_for_frequency(9000.0, 1500.0, 1.0),
            Err(KnockError::OutOfBand { .. })
        ));
    }

    #[test]
    fn kernel_size_above_nyquist_errors() {
        let err = kernel_size_for_frequency(50_000.0, 1500.0, 0.1).unwrap_err();
        match err {
            KnockError::OutOfBand { nyquist_hz, .. } => assert_eq!(nyquist_hz, 45_000.0),
            other => panic!("expected out-of-band, got {other}"),
        }
    }

    #[test]
    fn frequency_ranges_cover_published_bands() {
        // (k, representative band in Hz that the interval must overlap)
        let cases = [
            (30usize, (3000.0, 3000.0)),
            (23, (3800.0, 4000.0)),
            (18, (4800.0, 5200.0)),
            (11, (7800.0, 8700.0)),
        ];
        for (k, (lo, hi)) in cases {
            let (rlo, rhi) = frequency_range_for_kernel(k, 1500.0, 0.1).unwrap();
            assert!(rlo < hi && rhi >= lo, "k={k}: ({rlo}, {rhi}] misses [{lo}, {hi}]");
        }
    }

    fn full_cycle() -> PressureCycle {
        let n = 7200;
        PressureCycle {
            cycle_id: "c0".into(),
            source_tag: "test".into(),
            start_deg: -360.0,
            resolution_deg: 0.1,
            samples: (0..n).map(|i| i as f64).collect(),
        }
    }

    #[test]
    fn extract_window_picks_the_post_tdc_segment() {
        let cycle = full_cycle();
        // Independent oracle: scan every index for 0 <= angle < 60.
        let oracle: Vec<f64> = (0..cycle.samples.len())
            .filter(|&i| {
                let a = cycle.angle_at(i);
                (0.0..WINDOW_DEG).contains(&a)
            })
            .map(|i| cycle.samples[i])
            .collect();
        assert_eq!(oracle.len(), 600);
        assert_eq!(oracle[0], 3600.0);

        let window = extract_window(&cycle).unwrap();
        assert_eq!(window.samples, oracle);
        assert!((window.start_deg - 0.0).abs() < 1e-9);
    }

    #[test]
    fn extract_window_is_identity_on_window_sized_input() {
        let win = PressureCycle {
            cycle_id: "w".into(),
            source_tag: "test".into(),
            start_deg: 0.0,
            resolution_deg: 0.1,
            samples: (0..600).map(|i| (i as f64).sin()).collect(),
        };
        let extracted = extract_window(&win).unwrap();
        assert_eq!(extracted.samples, win.samples);
        // And extracting from the result again changes nothing.
        let again = extract_window(&PressureCycle {
            cycle_id: "w".into(),
            source_tag: "test".into(),
            start_deg: extracted.start_deg,
            resolution_deg: extracted.resolution_deg,
            samples: extracted.samples.clone(),
        })
        .unwrap();
        assert_eq!(again.samples, extracted.samples);
    }

    #[test]
    fn extract_window_rejects_partial_coverage() {
        let mut cycle = full_cycle();
        cycle.samples.truncate(3600); // covers [-360, 0) only
        assert!(matches!(extract_window(&cycle), Err(KnockError::Coverage(_))));
    }

    fn tone(freq_hz: f64, n: usize, rate: f64) -> AnalysisWindow {
        AnalysisWindow {
            start_deg: 0.0,
            resolution_deg: 0.1,
            samples: (0..n)
                .map(|i| (2.0 * std::f64::consts::PI * freq_hz * i as f64 / rate).sin())
                .collect(),
        }
    }

    /// Amplitude of `signal` at `freq_hz` read off a plain discrete Fourier sum.
    fn dft_amplitude(signal: &[f64], freq_hz: f64, rate: f64) -> f64 {
        let n = signal.len() as f64;
        let w = 2.0 * std::f64::consts::PI * freq_hz / rate;
        let (mut re, mut im) = (0.0, 0.0);
        for (i, &x) in signal.iter().enumerate() {
            re += x * (w * i as f64).cos();
            im -= x * (w * i as f64).sin();
        }
        2.0 * (re * re + im * im).sqrt() / n
    }

    #[test]
    fn band_pass_rejects_dc() {
        let window = AnalysisWindow {
            start_deg: 0.0,
            resolution_deg: 0.1,
            samples: vec![75.0; 600],
        };
        let out = band_pass(&window, Band::default(), 90_000.0).unwrap();
        assert_eq!(out.samples.len(), 600);
        let max = out.samples.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
        assert!(max < 75.0 * 1e-6, "dc leak {max}");
    }

    #[test]
    fn band_pass_preserves_in_band_tone() {
        let rate = 90_000.0;
        let window = tone(6000.0, 600, rate);
        let out = band_pass(&window, Band::default(), rate).unwrap();
        let amp = dft_amplitude(&out.samples, 6000.0, rate);
        assert!((amp - 1.0).abs() <= 0.05, "6 kHz amplitude {amp}");
    }

    #[test]
    fn band_pass_attenuates_out_of_band_tone() {
        let rate = 90_000.0;
        let window = tone(100.0, 600, rate);
        let out = band_pass(&window, Band::default(), rate).unwrap();
        let peak = out.samples.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
        assert!(peak < 0.1, "100 Hz peak after filtering: {peak}");
    }

    #[test]
    fn band_pass_rejects_cutoffs_beyond_nyquist() {
        let window = tone(6000.0, 600, 90_000.0);
        let band = Band { low_hz: 3000.0, high_hz: 46_000.0 };
        assert!(matches!(
            band_pass(&window, band, 90_000.0),
            Err(KnockError::OutOfBand { .. })
        ));
    }

    proptest! {
        // Filtering is linear: filter(a*x + b*y) = a*filter(x) + b*filter(y).
        #[test]
        fn band_pass_is_linear(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = 256;
            let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mix: Vec<f64> = x.iter().zip(&y).map(|(&u, &v)| a * u + b * v).collect();
            let wrap = |s: Vec<f64>| AnalysisWindow { start_deg: 0.0, resolution_deg: 0.1, samples: s };
            let rate = 90_000.0;
            let fx = band_pass(&wrap(x), Band::default(), rate).unwrap().samples;
            let fy = band_pass(&wrap(y), Band::default(), rate).unwrap().samples;
            let fmix = band_pass(&wrap(mix), Band::default(), rate).unwrap().samples;
            for i in 0..n {
                let combined = a * fx[i] + b * fy[i];
                prop_assert!((fmix[i] - combined).abs() <= 1e-9 * combined.abs().max(1.0));
            }
        }
    }
}
