//! Synthetic in-cylinder pressure generator with vote-based labeling.
//!
//! Each cycle is a motored compression curve plus a single-zone heat-release
//! bump, with optional exponentially decaying resonance bursts at the first
//! three chamber modes and white sensor noise on top. Five simulated judges
//! then threshold the band-passed oscillation amplitude of the analysis
//! window, each with its own noisy threshold, and their binary votes become
//! the labels. Labels are therefore produced by measuring the generated
//! signal, not by copying the intended intensity class, so borderline cycles
//! genuinely get disputed votes.

use std::f64::consts::PI;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{KnockError, Result};
use crate::signal::{
    acoustic_mode_frequencies, band_pass, extract_window, sample_rate_hz, Band, PressureCycle,
    DEFAULT_RESOLUTION_DEG,
};

use super::{ExpertVotes, LabeledCycle, SyntheticConfig};

// Cylinder model constants. The geometry argument only steers the resonance
// frequencies; the thermodynamic shape is fixed so different bores stay
// comparable.
const COMPRESSION_RATIO: f64 = 12.0;
const CONROD_RATIO: f64 = 3.5;
const POLYTROPIC_EXP: f64 = 1.32;
const BASE_PRESSURE_BAR: f64 = 1.5;
const BLOWDOWN_TAU_DEG: f64 = 15.0;

// Heat release bump: sigmoidal burn fraction with cubic shape, anchored just
// before top dead center.
const SOC_DEG: f64 = -10.0;
const SOC_JITTER_DEG: f64 = 1.5;
const BURN_DURATION_DEG: f64 = 40.0;
const BURN_DURATION_JITTER: f64 = 0.06;
const BURN_COMPLETE: f64 = 6.908;
const PRESSURE_RISE_BAR: f64 = 55.0;
const PRESSURE_RISE_SIGMA: f64 = 0.08;
const EXPANSION_EXP: f64 = 1.28;

// Knock burst: the first three modes with fixed relative weights, common
// random phase per mode, and a shared exponential decay.
const MODE_WEIGHTS: [f64; 3] = [1.0, 0.45, 0.25];
const DECAY_TAU_S: f64 = 1.8e-3;
const DECAY_TAU_SIGMA: f64 = 0.15;
const KNOCK_AMP_BASE_BAR: f64 = 0.9;
const AMP_LADDER: [f64; 5] = [0.45, 0.70, 1.05, 1.55, 2.40];
const AMP_SIGMA: f64 = 0.10;

// The judges listen to a wider band than the default detector band. Human
// annotators integrate audible energy well past the first resonances, so the
// label source deliberately sees more of the spectrum than a fixed-band
// detector does.
const JUDGE_BAND: Band = Band { low_hz: 2500.0, high_hz: 10500.0 };
const JUDGE_THRESHOLD_SIGMA: f64 = 0.06;
const CALIBRATION_PROBES: usize = 48;

// Substream salts; each consumer of randomness gets its own ChaCha stream so
// adding draws in one place never shifts another.
const SALT_CYCLE: u64 = 0x6379636c65;
const SALT_CALIBRATION: u64 = 0x63616c6962;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

fn substream(seed: u64, salt: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(splitmix64(seed ^ salt) ^ index))
}

/// Normalized cylinder volume at `theta` degrees after top dead center;
/// 1 at TDC, `COMPRESSION_RATIO` at BDC.
fn volume_ratio(theta_deg: f64) -> f64 {
    let th = theta_deg.to_radians();
    let s = th.sin();
    1.0 + (COMPRESSION_RATIO - 1.0) / 2.0
        * (CONROD_RATIO + 1.0 - th.cos() - (CONROD_RATIO * CONROD_RATIO - s * s).sqrt())
}

/// Burn fraction at `theta` for the given start of combustion and duration.
fn burn_fraction(theta_deg: f64, soc_deg: f64, duration_deg: f64) -> f64 {
    let u = ((theta_deg - soc_deg) / duration_deg).clamp(0.0, 1.0);
    1.0 - (-BURN_COMPLETE * u * u * u).exp()
}

struct Generator {
    config: SyntheticConfig,
    /// First three mode frequencies in Hz, ascending.
    mode_hz: [f64; 3],
    rate_hz: f64,
    deg_per_sec: f64,
    n_samples: usize,
    /// Motored pressure factor (p / BASE_PRESSURE_BAR) per sample.
    motored: Vec<f64>,
    /// (1 / volume_ratio)^EXPANSION_EXP per sample, the heat release scaling.
    expansion: Vec<f64>,
    cumulative_weights: [f64; 6],
    /// Vote thresholds in MAPO units, one per judge, ascending strictness.
    judge_thresholds: [f64; 5],
}

impl Generator {
    fn new(config: &SyntheticConfig) -> Result<Self> {
        config.validate()?;
        let modes = acoustic_mode_frequencies(&config.geometry)?;
        let rate_hz = sample_rate_hz(config.geometry.rpm, DEFAULT_RESOLUTION_DEG);
        let nyquist = rate_hz / 2.0;
        let mode_hz = [modes[0].frequency_hz, modes[1].frequency_hz, modes[2].frequency_hz];
        if mode_hz[2] >= nyquist {
            return Err(KnockError::OutOfBand { requested_hz: mode_hz[2], nyquist_hz: nyquist });
        }

        let n_samples = (720.0 / DEFAULT_RESOLUTION_DEG).round() as usize;
        let mut motored = vec![1.0; n_samples];
        let mut expansion = vec![0.0; n_samples];
        for j in 0..n_samples {
            let theta = -360.0 + DEFAULT_RESOLUTION_DEG * j as f64;
            if (-180.0..180.0).contains(&theta) {
                let v = volume_ratio(theta);
                motored[j] = (COMPRESSION_RATIO / v).powf(POLYTROPIC_EXP);
                expansion[j] = v.powf(-EXPANSION_EXP);
            }
        }

        let total: f64 = config.class_weights.iter().sum();
        let mut cumulative_weights = [0.0; 6];
        let mut acc = 0.0;
        for (c, w) in config.class_weights.iter().enumerate() {
            acc += w / total;
            cumulative_weights[c] = acc;
        }
        cumulative_weights[5] = 1.0;

        let mut gen = Generator {
            config: config.clone(),
            mode_hz,
            rate_hz,
            deg_per_sec: config.geometry.rpm * 6.0,
            n_samples,
            motored,
            expansion,
            cumulative_weights,
            judge_thresholds: [0.0; 5],
        };
        gen.calibrate_judges()?;
        Ok(gen)
    }

    fn draw_class(&self, rng: &mut ChaCha8Rng) -> usize {
        let u: f64 = rng.gen();
        self.cumulative_weights.iter().position(|&c| u < c).unwrap_or(5)
    }

    /// Build the raw pressure trace for one intended intensity class.
    ///
    /// Draw order is fixed; every build consumes the same sequence of RNG
    /// values for a given class so cycles are reproducible individually.
    fn build_samples(&self, class: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let z = |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };

        let soc = SOC_DEG + SOC_JITTER_DEG * z(rng);
        let duration = (BURN_DURATION_DEG * (1.0 + BURN_DURATION_JITTER * z(rng))).max(10.0);
        let pressure_rise = PRESSURE_RISE_BAR * (PRESSURE_RISE_SIGMA * z(rng)).exp();

        let burst = if class >= 1 {
            let (lo, hi) = self.config.knock_onset_range;
            let onset_deg: f64 = if hi > lo { rng.gen_range(lo..hi) } else { lo };
            let amp = AMP_LADDER[class - 1]
                * KNOCK_AMP_BASE_BAR
                * self.config.knock_amp_scale
                * (AMP_SIGMA * z(rng)).exp();
            let tau_deg = DECAY_TAU_S * (DECAY_TAU_SIGMA * z(rng)).exp() * self.deg_per_sec;
            let phases = [
                rng.gen_range(0.0..2.0 * PI),
                rng.gen_range(0.0..2.0 * PI),
                rng.gen_range(0.0..2.0 * PI),
            ];
            Some((onset_deg, amp, tau_deg, phases))
        } else {
            None
        };

        // Pressure drop left over at exhaust valve opening, decays during
        // blowdown. Burn fraction is 1 there.
        let blowdown_ref = pressure_rise * self.expansion[self.n_samples - 1];

        let mut samples = Vec::with_capacity(self.n_samples);
        for j in 0..self.n_samples {
            let theta = -360.0 + DEFAULT_RESOLUTION_DEG * j as f64;
            let mut p = if theta < -180.0 {
                BASE_PRESSURE_BAR
            } else if theta < 180.0 {
                BASE_PRESSURE_BAR * self.motored[j]
                    + pressure_rise * burn_fraction(theta, soc, duration) * self.expansion[j]
            } else {
                BASE_PRESSURE_BAR + blowdown_ref * (-(theta - 180.0) / BLOWDOWN_TAU_DEG).exp()
            };
            if let Some((onset_deg, amp, tau_deg, phases)) = burst {
                if theta >= onset_deg {
                    let dt_s = (theta - onset_deg) / self.deg_per_sec;
                    let envelope = amp * (-(theta - onset_deg) / tau_deg).exp();
                    let mut osc = 0.0;
                    for m in 0..3 {
                        osc += MODE_WEIGHTS[m]
                            * (2.0 * PI * self.mode_hz[m] * dt_s + phases[m]).sin();
                    }
                    p += envelope * osc;
                }
            }
            p += self.config.noise_level * z(rng);
            samples.push(p);
        }
        samples
    }

    /// Band-passed maximum oscillation amplitude of the analysis window, the
    /// quantity the judges threshold.
    fn judged_mapo(&self, samples: &[f64]) -> Result<f64> {
        let cycle = PressureCycle {
            cycle_id: String::new(),
            source_tag: String::new(),
            start_deg: -360.0,
            resolution_deg: DEFAULT_RESOLUTION_DEG,
            samples: samples.to_vec(),
        };
        let window = extract_window(&cycle)?;
        let filtered = band_pass(&window, JUDGE_BAND, self.rate_hz)?;
        Ok(filtered.samples.iter().fold(0.0f64, |m, &x| m.max(x.abs())))
    }

    /// Probes each intensity class and places the judge thresholds at the
    /// geometric midpoints between the median amplitudes of adjacent classes.
    /// Judge j then votes knock when the cycle rings louder than a typical
    /// class j - 1 cycle, so the vote sum tracks intensity.
    fn calibrate_judges(&mut self) -> Result<()> {
        let mut medians = [0.0f64; 6];
        for (class, median) in medians.iter_mut().enumerate() {
            let mut probes = Vec::with_capacity(CALIBRATION_PROBES);
            for rep in 0..CALIBRATION_PROBES {
                let mut rng = substream(
                    self.config.seed,
                    SALT_CALIBRATION,
                    (class * 1000 + rep) as u64,
                );
                let samples = self.build_samples(class, &mut rng);
                probes.push(self.judged_mapo(&samples)?);
            }
            probes.sort_by(|a, b| a.total_cmp(b));
            *median = probes[probes.len() / 2].max(1e-12);
        }
        for j in 0..5 {
            self.judge_thresholds[j] = (medians[j] * medians[j + 1]).sqrt();
        }
        Ok(())
    }

    fn vote(&self, mapo: f64, rng: &mut ChaCha8Rng) -> ExpertVotes {
        let mut votes = [0u8; 5];
        for (j, vote) in votes.iter_mut().enumerate() {
            let wobble: f64 = rng.sample(StandardNormal);
            let threshold = self.judge_thresholds[j] * (JUDGE_THRESHOLD_SIGMA * wobble).exp();
            *vote = u8::from(mapo > threshold);
        }
        ExpertVotes(votes)
    }
}

/// Generates full-resolution pressure cycles with judge votes attached.
///
/// Deterministic: the same config always produces bitwise identical cycles,
/// and each cycle has its own RNG stream derived from `(seed, index)`, so the
/// batch size never changes individual cycles.
pub fn synthesize_cycles(config: &SyntheticConfig) -> Result<Vec<(PressureCycle, ExpertVotes)>> {
    let gen = Generator::new(config)?;
    let mut out = Vec::with_capacity(config.n_cycles);
    for i in 0..config.n_cycles {
        let mut rng = substream(config.seed, SALT_CYCLE, i as u64);
        let class = gen.draw_class(&mut rng);
        let samples = gen.build_samples(class, &mut rng);
        let mapo = gen.judged_mapo(&samples)?;
        let votes = gen.vote(mapo, &mut rng);
        let cycle = PressureCycle {
            cycle_id: format!("{}-{:05}", config.source_tag, i),
            source_tag: config.source_tag.clone(),
            start_deg: -360.0,
            resolution_deg: DEFAULT_RESOLUTION_DEG,
            samples,
        };
        out.push((cycle, votes));
    }
    Ok(out)
}

/// [`synthesize_cycles`] plus window extraction and label derivation.
pub fn synthesize_dataset(config: &SyntheticConfig) -> Result<Vec<LabeledCycle>> {
    let cycles = synthesize_cycles(config)?;
    let mut out = Vec::with_capacity(cycles.len());
    for (cycle, votes) in cycles {
        let window = extract_window(&cycle)?;
        out.push(LabeledCycle::new(cycle.cycle_id, window, votes, config.source_tag.clone()));
    }
    Ok(out)
}

#[allow(dead_code)]
pub(crate) fn judge_band() -> Band {
    JUDGE_BAND
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{labels_from_votes, BinaryLabel};
    use crate::fft::fft_real;
    use crate::signal::AnalysisWindow;

    fn config(bore_mm: f64, n: usize, weights: [f64; 6], seed: u64) -> SyntheticConfig {
        let mut c = SyntheticConfig::new(bore_mm).unwrap();
        c.n_cycles = n;
        c.class_weights = weights;
        c.seed = seed;
        c
    }

    fn window_mapo(window: &AnalysisWindow, band: Band) -> f64 {
        let rate = sample_rate_hz(1500.0, window.resolution_deg);
        let filtered = band_pass(window, band, rate).unwrap();
        filtered.samples.iter().fold(0.0f64, |m, &x| m.max(x.abs()))
    }

    #[test]
    fn generation_is_deterministic_and_labels_match_votes() {
        let cfg = config(145.0, 40, [1.0; 6], 9);
        let a = synthesize_dataset(&cfg).unwrap();
        let b = synthesize_dataset(&cfg).unwrap();
        assert_eq!(a.len(), 40);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.cycle_id, y.cycle_id);
            assert_eq!(x.votes, y.votes);
            assert_eq!(x.window.samples, y.window.samples, "samples must match bitwise");
            let (rel, scaled, binary) = labels_from_votes(x.votes);
            assert_eq!(x.relative_label, rel);
            assert_eq!(x.scaled_label, scaled);
            assert_eq!(x.binary_label, binary);
        }

        // A different seed must actually change the data.
        let other = synthesize_dataset(&config(145.0, 40, [1.0; 6], 10)).unwrap();
        assert_ne!(a[0].window.samples, other[0].window.samples);
    }

    #[test]
    fn batch_size_does_not_shift_cycles() {
        let small = synthesize_cycles(&config(145.0, 5, [1.0; 6], 4)).unwrap();
        let large = synthesize_cycles(&config(145.0, 30, [1.0; 6], 4)).unwrap();
        for i in 0..5 {
            assert_eq!(small[i].0.samples, large[i].0.samples);
            assert_eq!(small[i].1, large[i].1);
        }
    }

    #[test]
    fn binary_ratio_tracks_class_weights() {
        // Knocking fraction = weight of classes 3..=5. Tolerance is three
        // binomial standard errors.
        for (weights, seed) in [([1.0; 6], 21u64), ([8.0, 2.5, 2.3, 1.4, 3.3, 11.2], 22)] {
            let total: f64 = weights.iter().sum();
            let expected: f64 = weights[3..].iter().sum::<f64>() / total;
            let n = 2000;
            let data = synthesize_dataset(&config(145.0, n, weights, seed)).unwrap();
            let knocking =
                data.iter().filter(|c| c.binary_label == BinaryLabel::Knocking).count() as f64;
            let ratio = knocking / n as f64;
            let se = (expected * (1.0 - expected) / n as f64).sqrt();
            assert!(
                (ratio - expected).abs() <= 3.0 * se,
                "ratio {} vs expected {} (3 SE = {})",
                ratio,
                expected,
                3.0 * se
            );
        }
    }

    #[test]
    fn heavy_knock_rings_louder_than_normal() {
        // Only classes 0 and 5 are generated, so the binary label separates
        // the intended extremes.
        let data = synthesize_dataset(&config(145.0, 300, [1.0, 0.0, 0.0, 0.0, 0.0, 1.0], 3))
            .unwrap();
        let band = Band::default();
        let mut normal = Vec::new();
        let mut heavy = Vec::new();
        for c in &data {
            let m = window_mapo(&c.window, band);
            match c.binary_label {
                BinaryLabel::Normal => normal.push(m),
                BinaryLabel::Knocking => heavy.push(m),
            }
        }
        assert!(normal.len() > 50 && heavy.len() > 50);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&heavy) > mean(&normal));

        // No normal cycle should ring like a typical heavy one; that is what
        // "no oscillation above the noise" means operationally.
        heavy.sort_by(|a, b| a.total_cmp(b));
        let heavy_median = heavy[heavy.len() / 2];
        let normal_max = normal.iter().fold(0.0f64, |m, &x| m.max(x));
        assert!(
            normal_max < heavy_median,
            "normal max {} vs heavy median {}",
            normal_max,
            heavy_median
        );
    }

    #[test]
    fn median_ring_amplitude_increases_with_vote_sum() {
        let data = synthesize_dataset(&config(145.0, 600, [1.0; 6], 17)).unwrap();
        let mut by_label: Vec<Vec<f64>> = vec![Vec::new(); 6];
        for c in &data {
            by_label[c.relative_label as usize].push(window_mapo(&c.window, Band::default()));
        }
        let medians: Vec<f64> = by_label
            .iter()
            .map(|v| {
                assert!(v.len() >= 5, "every vote sum should occur");
                let mut s = v.clone();
                s.sort_by(|a, b| a.total_cmp(b));
                s[s.len() / 2]
            })
            .collect();
        for w in medians.windows(2) {
            assert!(w[0] < w[1], "medians not increasing: {:?}", medians);
        }
    }

    #[test]
    fn knock_energy_concentrates_at_first_mode() {
        let bore = 145.0;
        let data = synthesize_dataset(&config(bore, 240, [1.0, 0.0, 0.0, 0.0, 0.0, 1.0], 5))
            .unwrap();
        let normal: Vec<&LabeledCycle> =
            data.iter().filter(|c| c.binary_label == BinaryLabel::Normal).collect();
        let heavy: Vec<&LabeledCycle> =
            data.iter().filter(|c| c.binary_label == BinaryLabel::Knocking).collect();
        assert!(normal.len() > 40 && heavy.len() > 40);

        let len = normal[0].window.samples.len();
        let mut mean_normal = vec![0.0; len];
        for c in &normal {
            for (acc, &x) in mean_normal.iter_mut().zip(&c.window.samples) {
                *acc += x / normal.len() as f64;
            }
        }

        // Average amplitude spectrum of (knocking - mean normal), zero padded.
        let n_fft = 1024;
        let rate = sample_rate_hz(1500.0, DEFAULT_RESOLUTION_DEG);
        let mut avg = vec![0.0; n_fft / 2 + 1];
        for c in &heavy {
            let diff: Vec<f64> =
                c.window.samples.iter().zip(&mean_normal).map(|(&a, &b)| a - b).collect();
            let spec = fft_real(&diff, n_fft);
            for (a, s) in avg.iter_mut().zip(spec.iter().take(n_fft / 2 + 1)) {
                *a += s.norm() / heavy.len() as f64;
            }
        }

        // Dominant bin above the heat-release band must sit on the first mode.
        let f_of = |i: usize| i as f64 * rate / n_fft as f64;
        let start = (1500.0 / (rate / n_fft as f64)).ceil() as usize;
        let peak = (start..avg.len())
            .max_by(|&a, &b| avg[a].total_cmp(&avg[b]))
            .unwrap();
        let modes = acoustic_mode_frequencies(&crate::signal::EngineGeometry::new(bore)).unwrap();
        let f1 = modes[0].frequency_hz;
        assert!(
            (f_of(peak) - f1).abs() <= 0.10 * f1,
            "spectral peak {} Hz vs first mode {} Hz",
            f_of(peak),
            f1
        );
    }

    #[test]
    fn all_normal_batch_has_no_knock_labels() {
        let data = synthesize_dataset(&config(190.0, 150, [1.0, 0.0, 0.0, 0.0, 0.0, 0.0], 2))
            .unwrap();
        assert!(data.iter().all(|c| c.binary_label == BinaryLabel::Normal));
        // Stray single votes are allowed (judges are noisy), a majority is not.
        assert!(data.iter().all(|c| c.relative_label <= 2));
    }

    #[test]
    fn nyquist_violations_are_rejected() {
        // Slow engine: sample rate too low for the judges' band.
        let mut cfg = config(145.0, 4, [1.0; 6], 0);
        cfg.geometry.rpm = 300.0;
        assert!(matches!(synthesize_cycles(&cfg), Err(KnockError::OutOfBand { .. })));

        // Tiny bore: third mode above Nyquist.
        let cfg = config(20.0, 4, [1.0; 6], 0);
        assert!(matches!(synthesize_cycles(&cfg), Err(KnockError::OutOfBand { .. })));
    }

    #[test]
    fn pressure_trace_is_physically_shaped() {
        let cycles = synthesize_cycles(&config(145.0, 12, [1.0, 0.0, 0.0, 0.0, 0.0, 0.0], 8))
            .unwrap();
        for (cycle, _) in &cycles {
            assert_eq!(cycle.samples.len(), 7200);
            let peak_idx = (0..7200)
                .max_by(|&a, &b| cycle.samples[a].total_cmp(&cycle.samples[b]))
                .unwrap();
            let peak_deg = cycle.angle_at(peak_idx);
            let peak = cycle.samples[peak_idx];
            // Peak pressure lands shortly after TDC at tens of bar.
            assert!(
                (0.0..40.0).contains(&peak_deg),
                "peak at {} deg",
                peak_deg
            );
            assert!((40.0..90.0).contains(&peak), "peak pressure {} bar", peak);
            // Intake region sits near the base pressure.
            let early = &cycle.samples[..1000];
            let early_mean = early.iter().sum::<f64>() / early.len() as f64;
            assert!((early_mean - BASE_PRESSURE_BAR).abs() < 0.1);
        }
    }
}
