//! Classical knock detectors' shared machinery.
//!
//! Three ingredients: the band-limited oscillation amplitude (the classic
//! threshold statistic), principal-component features of the raw pressure
//! window, and a small logistic regression that turns either kind of feature
//! into a calibrated probability. The detector front ends live in
//! [`crate::detector`]; everything here is plain math over windows.

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::dataset::{atomic_write, parse_err, parse_num, BinaryLabel, LabeledCycle};
use crate::error::{KnockError, Result};
use crate::signal::{band_pass, AnalysisWindow, Band};

/// Principal components kept by default.
pub const DEFAULT_COMPONENTS: usize = 8;

/// Largest component count the detector configurations accept.
pub const MAX_COMPONENTS: usize = 20;

/// Maximum absolute value of the band-passed window.
///
/// Zero-phase filtering rejects the DC and slow combustion pressure, so the
/// result measures oscillation amplitude only and adding a constant offset to
/// the window does not change it.
pub fn mapo(window: &AnalysisWindow, band: Band, sample_rate_hz: f64) -> Result<f64> {
    let filtered = band_pass(window, band, sample_rate_hz)?;
    Ok(filtered.samples.iter().fold(0.0_f64, |m, v| m.max(v.abs())))
}

/// Threshold rule: knocking exactly when the value strictly exceeds the
/// threshold.
pub fn mapo_classify(value: f64, threshold: f64) -> BinaryLabel {
    if value > threshold {
        BinaryLabel::Knocking
    } else {
        BinaryLabel::Normal
    }
}

/// Gradient-ascent settings for [`logreg_fit`].
#[derive(Debug, Clone, Copy)]
pub struct LogregConfig {
    /// L2 penalty on the standardized weights (intercept unregularized).
    pub l2: f64,
    /// Stop when the gradient norm falls below this.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for LogregConfig {
    fn default() -> Self {
        LogregConfig { l2: 1e-4, tolerance: 1e-6, max_iterations: 5000 }
    }
}

/// A fitted logistic regression on the original (unstandardized) scale.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticModel {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub feature_names: Vec<String>,
}

impl LogisticModel {
    /// sigma(w . x + b).
    pub fn predict(&self, features: &[f64]) -> Result<f64> {
        if features.len() != self.weights.len() {
            return Err(KnockError::Shape(format!(
                "expected {} features, got {}",
                self.weights.len(),
                features.len()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(KnockError::Domain("non-finite feature value".into()));
        }
        let s: f64 =
            self.intercept + self.weights.iter().zip(features).map(|(w, x)| w * x).sum::<f64>();
        Ok(sigmoid(s))
    }
}

fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^x) without overflow.
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Mean log-likelihood minus the L2 penalty, on the standardized scale.
fn objective(z: &[Vec<f64>], y: &[f64], w: &[f64], b: f64, l2: f64) -> f64 {
    let n = z.len() as f64;
    let mut ll = 0.0;
    for (row, &yi) in z.iter().zip(y) {
        let s: f64 = b + w.iter().zip(row).map(|(wj, zj)| wj * zj).sum::<f64>();
        // y ln p + (1-y) ln(1-p) with p = sigma(s), written overflow-safe.
        ll += -softplus(-s) - (1.0 - yi) * s;
    }
    ll / n - 0.5 * l2 * w.iter().map(|v| v * v).sum::<f64>()
}

/// Fit an L2-regularized logistic regression by gradient ascent.
///
/// Features are z-scored internally from the training statistics; the penalty
/// applies on that scale, so its strength does not depend on feature units.
/// The returned coefficients are mapped back to the original scale. Ascent
/// runs with backtracking line search until the gradient norm reaches
/// `tolerance` or the iteration budget is spent, whichever comes first.
pub fn logreg_fit(
    features: &[Vec<f64>],
    labels: &[BinaryLabel],
    config: &LogregConfig,
) -> Result<LogisticModel> {
    if features.is_empty() || features.len() != labels.len() {
        return Err(KnockError::Domain(format!(
            "need matching non-empty features and labels, got {} and {}",
            features.len(),
            labels.len()
        )));
    }
    let dim = features[0].len();
    if dim == 0 {
        return Err(KnockError::Domain("feature vectors are empty".into()));
    }
    for row in features {
        if row.len() != dim {
            return Err(KnockError::Domain(format!(
                "ragged feature rows: {} vs {}",
                row.len(),
                dim
            )));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(KnockError::Domain("non-finite feature value".into()));
        }
    }
    let positives = labels.iter().filter(|l| **l == BinaryLabel::Knocking).count();
    if positives == 0 || positives == labels.len() {
        return Err(KnockError::DegenerateFit(
            "training data contains a single class".into(),
        ));
    }
    if !(config.l2 >= 0.0 && config.tolerance > 0.0 && config.max_iterations > 0) {
        return Err(KnockError::Domain("invalid logistic regression settings".into()));
    }

    let n = features.len();
    let mut mean = vec![0.0; dim];
    for row in features {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut std = vec![0.0; dim];
    for row in features {
        for ((s, v), m) in std.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    for s in &mut std {
        *s = (*s / n as f64).sqrt();
        // A constant feature carries no signal; leave it centered at zero
        // rather than dividing by zero.
        if *s < 1e-300 {
            *s = 1.0;
        }
    }

    let z: Vec<Vec<f64>> = features
        .iter()
        .map(|row| row.iter().zip(&mean).zip(&std).map(|((v, m), s)| (v - m) / s).collect())
        .collect();
    let y: Vec<f64> = labels
        .iter()
        .map(|l| if *l == BinaryLabel::Knocking { 1.0 } else { 0.0 })
        .collect();

    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    let mut step = 1.0_f64;
    for _ in 0..config.max_iterations {
        // Gradient of the objective at (w, b).
        let mut gw = vec![0.0; dim];
        let mut gb = 0.0;
        for (row, &yi) in z.iter().zip(&y) {
            let s: f64 = b + w.iter().zip(row).map(|(wj, zj)| wj * zj).sum::<f64>();
            let r = yi - sigmoid(s);
            for (g, zj) in gw.iter_mut().zip(row) {
                *g += r * zj;
            }
            gb += r;
        }
        for (g, wj) in gw.iter_mut().zip(&w) {
            *g = *g / n as f64 - config.l2 * wj;
        }
        gb /= n as f64;

        let gnorm =
            (gw.iter().map(|g| g * g).sum::<f64>() + gb * gb).sqrt();
        if gnorm <= config.tolerance {
            break;
        }

        // Backtracking: halve the step until the Armijo ascent condition
        // holds; the concave objective guarantees an acceptable step exists.
        let current = objective(&z, &y, &w, b, config.l2);
        step = (step * 2.0).min(1e6);
        loop {
            let wt: Vec<f64> = w.iter().zip(&gw).map(|(wj, g)| wj + step * g).collect();
            let bt = b + step * gb;
            if objective(&z, &y, &wt, bt, config.l2)
                >= current + 1e-4 * step * gnorm * gnorm
            {
                w = wt;
                b = bt;
                break;
            }
            step *= 0.5;
            if step < 1e-18 {
                break;
            }
        }
    }

    if w.iter().any(|v| !v.is_finite()) || !b.is_finite() {
        return Err(KnockError::DegenerateFit("optimizer left the finite range".into()));
    }

    // Map back: p = sigma(sum w'_j (x_j - mu_j)/sigma_j + b').
    let weights: Vec<f64> = w.iter().zip(&std).map(|(wj, s)| wj / s).collect();
    let intercept = b - w
        .iter()
        .zip(&mean)
        .zip(&std)
        .map(|((wj, m), s)| wj * m / s)
        .sum::<f64>();
    Ok(LogisticModel {
        weights,
        intercept,
        feature_names: (0..dim).map(|i| format!("f{i}")).collect(),
    })
}

/// A fitted threshold detector: the decision boundary of a one-feature
/// logistic regression on oscillation amplitudes.
#[derive(Debug, Clone, PartialEq)]
pub struct MapoModel {
    pub threshold: f64,
    pub band: Band,
    pub sample_rate_hz: f64,
    pub logistic: LogisticModel,
}

impl MapoModel {
    /// Fit on a labeled train set. The threshold is where the logistic
    /// probability crosses one half, so thresholding reproduces the logistic
    /// decision rule.
    pub fn fit(train: &[LabeledCycle], band: Band, sample_rate_hz: f64) -> Result<Self> {
        let mut features = Vec::with_capacity(train.len());
        let mut labels = Vec::with_capacity(train.len());
        for cycle in train {
            features.push(vec![mapo(&cycle.window, band, sample_rate_hz)?]);
            labels.push(cycle.binary_label);
        }
        let mut logistic = logreg_fit(&features, &labels, &LogregConfig::default())?;
        logistic.feature_names = vec!["mapo".into()];
        let w = logistic.weights[0];
        if w <= 0.0 {
            // Larger oscillation must mean more knock for a threshold rule to
            // make sense at all.
            return Err(KnockError::DegenerateFit(format!(
                "oscillation amplitude anti-correlates with the labels (weight {w:.3e})"
            )));
        }
        Ok(MapoModel {
            threshold: -logistic.intercept / w,
            band,
            sample_rate_hz,
            logistic,
        })
    }

    pub fn classify(&self, window: &AnalysisWindow) -> Result<BinaryLabel> {
        Ok(mapo_classify(mapo(window, self.band, self.sample_rate_hz)?, self.threshold))
    }

    pub fn probability(&self, window: &AnalysisWindow) -> Result<f64> {
        self.logistic.predict(&[mapo(window, self.band, self.sample_rate_hz)?])
    }
}

/// Where a one-feature logistic regression on oscillation amplitude puts the
/// even-odds point.
pub fn fit_mapo_threshold(
    train: &[LabeledCycle],
    band: Band,
    sample_rate_hz: f64,
) -> Result<f64> {
    Ok(MapoModel::fit(train, band, sample_rate_hz)?.threshold)
}

/// Mean-centered orthonormal principal axes of a set of windows.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaBasis {
    pub mean: Vec<f64>,
    /// Orthonormal, ordered by non-increasing explained variance, each with
    /// its first nonzero coefficient positive.
    pub components: Vec<Vec<f64>>,
    /// Sample variance captured per component (covariance eigenvalues).
    pub explained_variance: Vec<f64>,
}

/// Eigen-decomposition of the sample covariance of `windows`.
///
/// Deterministic: eigenpairs are sorted by descending eigenvalue and each
/// component's sign is fixed so its first nonzero coefficient is positive.
/// Asking for more components than the data's numerical rank is an error, so
/// a fitted basis never contains noise directions.
pub fn pca_fit(windows: &[&[f64]], n_components: usize) -> Result<PcaBasis> {
    if windows.len() < 2 {
        return Err(KnockError::Rank(format!(
            "need at least 2 windows to estimate a covariance, got {}",
            windows.len()
        )));
    }
    let dim = windows[0].len();
    if dim == 0 {
        return Err(KnockError::Domain("windows are empty".into()));
    }
    if n_components == 0 || n_components > dim {
        return Err(KnockError::Domain(format!(
            "component count must be in 1..={dim}, got {n_components}"
        )));
    }
    for w in windows {
        if w.len() != dim {
            return Err(KnockError::Shape(format!(
                "ragged windows: {} vs {}",
                w.len(),
                dim
            )));
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(KnockError::Domain("non-finite window sample".into()));
        }
    }

    let n = windows.len();
    let mut mean = vec![0.0; dim];
    for w in windows {
        for (m, v) in mean.iter_mut().zip(*w) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }

    // Sample covariance, n-1 denominator.
    let centered = DMatrix::from_fn(n, dim, |i, j| windows[i][j] - mean[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let eig = cov.symmetric_eigen();

    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).expect("finite eigenvalues")
    });

    let top = eig.eigenvalues[order[0]].max(0.0);
    let rank_tol = top * dim as f64 * f64::EPSILON;
    let rank = order
        .iter()
        .take_while(|&&i| eig.eigenvalues[i] > rank_tol && eig.eigenvalues[i] > 0.0)
        .count();
    if rank < n_components {
        return Err(KnockError::Rank(format!(
            "data spans {rank} directions but {n_components} components were requested"
        )));
    }

    let mut components = Vec::with_capacity(n_components);
    let mut explained_variance = Vec::with_capacity(n_components);
    for &i in order.iter().take(n_components) {
        let col: DVector<f64> = eig.eigenvectors.column(i).into();
        let mut v: Vec<f64> = col.iter().copied().collect();
        if let Some(first) = v.iter().find(|c| c.abs() > 1e-12) {
            if *first < 0.0 {
                for c in &mut v {
                    *c = -*c;
                }
            }
        }
        components.push(v);
        explained_variance.push(eig.eigenvalues[i].max(0.0));
    }

    Ok(PcaBasis { mean, components, explained_variance })
}

fn check_window_len(window: &[f64], basis: &PcaBasis) -> Result<()> {
    if window.len() != basis.mean.len() {
        return Err(KnockError::Shape(format!(
            "window has {} samples, basis expects {}",
            window.len(),
            basis.mean.len()
        )));
    }
    Ok(())
}

/// Inner products of the mean-centered window with each component.
pub fn pca_dd_features(window: &[f64], basis: &PcaBasis) -> Result<Vec<f64>> {
    check_window_len(window, basis)?;
    Ok(basis
        .components
        .iter()
        .map(|c| {
            window
                .iter()
                .zip(&basis.mean)
                .zip(c)
                .map(|((w, m), ci)| (w - m) * ci)
                .sum()
        })
        .collect())
}

/// Reconstruction residual summarized two ways: its root mean square and its
/// largest absolute value.
///
/// The residual of a combustion window is already dominated by content the
/// smooth principal components cannot express, so no band-pass is applied
/// here; [`pca_eigen_features_banded`] is the filtered variant.
pub fn pca_eigen_features(window: &[f64], basis: &PcaBasis) -> Result<(f64, f64)> {
    let residual = reconstruction_residual(window, basis)?;
    Ok(residual_stats(&residual))
}

/// Like [`pca_eigen_features`], but band-passes the residual before taking
/// its maximum amplitude.
pub fn pca_eigen_features_banded(
    window: &AnalysisWindow,
    basis: &PcaBasis,
    band: Band,
    sample_rate_hz: f64,
) -> Result<(f64, f64)> {
    let residual = reconstruction_residual(&window.samples, basis)?;
    let (rmse, _) = residual_stats(&residual);
    let carrier = AnalysisWindow {
        start_deg: window.start_deg,
        resolution_deg: window.resolution_deg,
        samples: residual,
    };
    let filtered = band_pass(&carrier, band, sample_rate_hz)?;
    let peak = filtered.samples.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    Ok((rmse, peak))
}

fn reconstruction_residual(window: &[f64], basis: &PcaBasis) -> Result<Vec<f64>> {
    let features = pca_dd_features(window, basis)?;
    let mut recon = basis.mean.clone();
    for (f, c) in features.iter().zip(&basis.components) {
        for (r, ci) in recon.iter_mut().zip(c) {
            *r += f * ci;
        }
    }
    Ok(window.iter().zip(&recon).map(|(w, r)| w - r).collect())
}

fn residual_stats(residual: &[f64]) -> (f64, f64) {
    let rmse =
        (residual.iter().map(|v| v * v).sum::<f64>() / residual.len() as f64).sqrt();
    let peak = residual.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    (rmse, peak)
}

// ---- file formats ----------------------------------------------------------
//
// Basis container, all integers and floats little-endian:
//
//   offset  size  field
//   0       4     magic "KNKB"
//   4       4     format version (u32, currently 1)
//   8       4     component count (u32)
//   12      4     window dimension (u32)
//   16      ...   f64 arrays: mean (dim), components row-major
//                 (count * dim), explained variance (count)
//
// Threshold and logistic models are `key = value` text, same syntax as the
// generator config files.

const BASIS_MAGIC: &[u8; 4] = b"KNKB";
const BASIS_VERSION: u32 = 1;

pub fn save_pca_basis(basis: &PcaBasis, path: &Path) -> Result<()> {
    let dim = basis.mean.len();
    let mut buf = Vec::with_capacity(16 + 8 * (dim * (basis.components.len() + 1)));
    buf.extend_from_slice(BASIS_MAGIC);
    buf.extend_from_slice(&BASIS_VERSION.to_le_bytes());
    buf.extend_from_slice(&(basis.components.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(dim as u32).to_le_bytes());
    for v in &basis.mean {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for c in &basis.components {
        for v in c {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    for v in &basis.explained_variance {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    atomic_write(path, &buf)
}

pub fn load_pca_basis(path: &Path) -> Result<PcaBasis> {
    let bytes = std::fs::read(path)?;
    let mut r = crate::cnn::io::Reader { bytes: &bytes, pos: 0, path };
    if r.take(4, "magic")? != BASIS_MAGIC {
        return Err(KnockError::ModelFormat(format!(
            "{}: not a basis file (bad magic)",
            path.display()
        )));
    }
    let version = r.u32("version")?;
    if version != BASIS_VERSION {
        return Err(KnockError::ModelFormat(format!(
            "{}: unsupported format version {version}, expected {BASIS_VERSION}",
            path.display()
        )));
    }
    let count = r.u32("component count")? as usize;
    let dim = r.u32("dimension")? as usize;
    if count == 0 || dim == 0 || count > dim {
        return Err(KnockError::ModelFormat(format!(
            "{}: implausible shape ({count} components, dimension {dim})",
            path.display()
        )));
    }
    let mean = r.f64_array(dim, "mean")?;
    let mut components = Vec::with_capacity(count);
    for _ in 0..count {
        components.push(r.f64_array(dim, "components")?);
    }
    let explained_variance = r.f64_array(count, "explained variance")?;
    let basis = PcaBasis { mean, components, explained_variance };

    // A corrupted body still parses, so verify the geometric invariant.
    for i in 0..count {
        for j in i..count {
            let dot: f64 =
                basis.components[i].iter().zip(&basis.components[j]).map(|(a, b)| a * b).sum();
            let want = if i == j { 1.0 } else { 0.0 };
            if !dot.is_finite() || (dot - want).abs() > 1e-6 {
                return Err(KnockError::ModelFormat(format!(
                    "{}: components are not orthonormal",
                    path.display()
                )));
            }
        }
    }
    Ok(basis)
}

pub fn save_mapo_model(model: &MapoModel, path: &Path) -> Result<()> {
    let text = format!(
        "detector = mapo\nthreshold = {:?}\nband_low_hz = {:?}\nband_high_hz = {:?}\n\
         sample_rate_hz = {:?}\nweight_mapo = {:?}\nintercept = {:?}\n",
        model.threshold,
        model.band.low_hz,
        model.band.high_hz,
        model.sample_rate_hz,
        model.logistic.weights[0],
        model.logistic.intercept,
    );
    atomic_write(path, text.as_bytes())
}

pub fn load_mapo_model(path: &Path) -> Result<MapoModel> {
    let text = std::fs::read_to_string(path)?;
    let mut fields = std::collections::BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let row = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| parse_err(path, row, "expected key = value"))?;
        fields.insert(key.trim().to_string(), (row, value.trim().to_string()));
    }
    match fields.get("detector") {
        Some((_, kind)) if kind == "mapo" => {}
        Some((row, kind)) => {
            return Err(parse_err(path, *row, format!("not a mapo model (detector = {kind})")));
        }
        None => return Err(parse_err(path, 1, "missing key detector")),
    }
    let num = |key: &str| -> Result<f64> {
        let (row, value) =
            fields.get(key).ok_or_else(|| parse_err(path, 1, format!("missing key {key}")))?;
        parse_num(path, *row, key, value)
    };
    let threshold = num("threshold")?;
    let band = Band { low_hz: num("band_low_hz")?, high_hz: num("band_high_hz")? };
    let sample_rate_hz = num("sample_rate_hz")?;
    let weight = num("weight_mapo")?;
    let intercept = num("intercept")?;
    Ok(MapoModel {
        threshold,
        band,
        sample_rate_hz,
        logistic: LogisticModel {
            weights: vec![weight],
            intercept,
            feature_names: vec!["mapo".into()],
        },
    })
}
