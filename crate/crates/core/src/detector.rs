//! One interface over all four detectors.
//!
//! The network and the three classical baselines differ wildly inside, but
//! evaluation only needs three verbs: fit on labeled cycles, return a knock
//! probability for a window, and decide. Everything downstream (repeated
//! splits, comparisons, generalization runs, latency measurements) works
//! against [`Detector`] and never inspects the concrete type.

use std::any::Any;
use std::path::Path;

use crate::cnn::{self, build_model, KnockNet, TrainReport};
use crate::dataset::{atomic_write, parse_err, parse_num, BinaryLabel, LabeledCycle};
use crate::error::{KnockError, Result};
use crate::reference::{
    load_pca_basis, logreg_fit, mapo_classify, pca_dd_features, pca_eigen_features,
    pca_eigen_features_banded, pca_fit, save_pca_basis, LogisticModel, LogregConfig, MapoModel,
    PcaBasis, DEFAULT_COMPONENTS, MAX_COMPONENTS,
};
use crate::signal::{sample_rate_hz, AnalysisWindow, Band, DEFAULT_RESOLUTION_DEG, DEFAULT_RPM};
use crate::{ConvMode, TrainConfig};

/// A binary knock detector with a calibrated probability output.
///
/// `fit` receives the evaluation cycles too because the network variant stops
/// training on evaluation-accuracy plateau; the classical detectors ignore
/// them. The default decision rule is probability at least one half; the
/// threshold detector overrides it with its strict amplitude rule.
pub trait Detector {
    fn name(&self) -> &str;
    fn fit(&mut self, train: &[LabeledCycle], eval: &[LabeledCycle]) -> Result<()>;
    fn probability(&self, window: &AnalysisWindow) -> Result<f64>;
    fn classify(&self, window: &AnalysisWindow) -> Result<BinaryLabel> {
        Ok(if self.probability(window)? >= 0.5 {
            BinaryLabel::Knocking
        } else {
            BinaryLabel::Normal
        })
    }
    /// Escape hatch for callers that need the concrete type back, e.g. to
    /// pull the trained network out after a cross-validation run.
    fn as_any(&self) -> &dyn Any;
}

fn not_fitted(name: &str) -> KnockError {
    KnockError::Domain(format!("{name} detector has not been fitted"))
}

/// The convolutional network behind the [`Detector`] interface.
#[derive(Debug, Clone)]
pub struct CnnDetector {
    pub name: String,
    pub kernel: usize,
    pub mode: ConvMode,
    pub train_config: TrainConfig,
    /// Seed for weight initialization (shuffling is seeded by `train_config`).
    pub init_seed: u64,
    net: Option<KnockNet>,
    report: Option<TrainReport>,
}

impl CnnDetector {
    pub fn new(kernel: usize, mode: ConvMode) -> Self {
        CnnDetector {
            name: "cnn".into(),
            kernel,
            mode,
            train_config: TrainConfig::default(),
            init_seed: 0,
            net: None,
            report: None,
        }
    }

    /// Wrap an already trained network, e.g. one loaded from a model file.
    pub fn from_net(net: KnockNet) -> Self {
        CnnDetector {
            name: "cnn".into(),
            kernel: net.base_kernel,
            mode: net.mode,
            train_config: TrainConfig::default(),
            init_seed: 0,
            net: Some(net),
            report: None,
        }
    }

    pub fn net(&self) -> Option<&KnockNet> {
        self.net.as_ref()
    }

    pub fn report(&self) -> Option<&TrainReport> {
        self.report.as_ref()
    }
}

impl Detector for CnnDetector {
    fn name(&self) -> &str {
        &self.name
    }

    fn fit(&mut self, train: &[LabeledCycle], eval: &[LabeledCycle]) -> Result<()> {
        let first = train
            .first()
            .ok_or_else(|| KnockError::Domain("training set is empty".into()))?;
        let net = build_model(self.kernel, first.window.samples.len(), self.mode, self.init_seed)?;
        let (net, report) = cnn::train(net, train, eval, &self.train_config)?;
        self.net = Some(net);
        self.report = Some(report);
        Ok(())
    }

    fn probability(&self, window: &AnalysisWindow) -> Result<f64> {
        let net = self.net.as_ref().ok_or_else(|| not_fitted(&self.name))?;
        cnn::forward(net, window)
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

/// Band-passed amplitude against a threshold fitted per training set.
#[derive(Debug, Clone)]
pub struct MapoDetector {
    pub name: String,
    pub band: Band,
    pub sample_rate_hz: f64,
    model: Option<MapoModel>,
}

impl MapoDetector {
    pub fn new(band: Band) -> Self {
        MapoDetector {
            name: "mapo".into(),
            band,
            sample_rate_hz: sample_rate_hz(DEFAULT_RPM, DEFAULT_RESOLUTION_DEG),
            model: None,
        }
    }

    /// Wrap an already fitted model, e.g. one loaded from a model file.
    pub fn from_model(model: MapoModel) -> Self {
        MapoDetector {
            name: "mapo".into(),
            band: model.band,
            sample_rate_hz: model.sample_rate_hz,
            model: Some(model),
        }
    }

    pub fn model(&self) -> Option<&MapoModel> {
        self.model.as_ref()
    }
}

impl Default for MapoDetector {
    fn default() -> Self {
        MapoDetector::new(Band::default())
    }
}

impl Detector for MapoDetector {
    fn name(&self) -> &str {
        &self.name
    }

    fn fit(&mut self, train: &[LabeledCycle], _eval: &[LabeledCycle]) -> Result<()> {
        self.model = Some(MapoModel::fit(train, self.band, self.sample_rate_hz)?);
        Ok(())
    }

    fn probability(&self, window: &AnalysisWindow) -> Result<f64> {
        let model = self.model.as_ref().ok_or_else(|| not_fitted(&self.name))?;
        model.probability(window)
    }

    fn classify(&self, window: &AnalysisWindow) -> Result<BinaryLabel> {
        let model = self.model.as_ref().ok_or_else(|| not_fitted(&self.name))?;
        let value = crate::reference::mapo(window, self.band, self.sample_rate_hz)?;
        Ok(mapo_classify(value, model.threshold))
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

fn check_components(n: usize) -> Result<()> {
    if !(1..=MAX_COMPONENTS).contains(&n) {
        return Err(KnockError::Domain(format!(
            "component count must be in 1..={MAX_COMPONENTS}, got {n}"
        )));
    }
    Ok(())
}

fn fit_basis(train: &[LabeledCycle], n_components: usize) -> Result<PcaBasis> {
    let windows: Vec<&[f64]> = train.iter().map(|c| c.window.samples.as_slice()).collect();
    pca_fit(&windows, n_components)
}

fn fit_on_features(
    train: &[LabeledCycle],
    features: Vec<Vec<f64>>,
    names: &[&str],
    config: &LogregConfig,
) -> Result<LogisticModel> {
    let labels: Vec<BinaryLabel> = train.iter().map(|c| c.binary_label).collect();
    let mut model = logreg_fit(&features, &labels, config)?;
    if names.len() == model.feature_names.len() {
        model.feature_names = names.iter().map(|n| n.to_string()).collect();
    }
    Ok(model)
}

/// Principal-component coordinates fed to a logistic regression.
#[derive(Debug, Clone)]
pub struct PcaDdDetector {
    pub name: String,
    pub n_components: usize,
    pub logreg: LogregConfig,
    fitted: Option<(PcaBasis, LogisticModel)>,
}

impl PcaDdDetector {
    pub fn new(n_components: usize) -> Self {
        PcaDdDetector {
            name: "pca-dd".into(),
            n_components,
            logreg: LogregConfig::default(),
            fitted: None,
        }
    }

    pub fn basis(&self) -> Option<&PcaBasis> {
        self.fitted.as_ref().map(|(b, _)| b)
    }

    pub fn logistic(&self) -> Option<&LogisticModel> {
        self.fitted.as_ref().map(|(_, m)| m)
    }

    /// Write the fitted model: coefficients as text at `path`, the basis in
    /// its binary container next to it (same stem, `.knkb` extension).
    pub fn save(&self, path: &Path) -> Result<()> {
        let (basis, model) = self.fitted.as_ref().ok_or_else(|| not_fitted(&self.name))?;
        let basis_path = path.with_extension("knkb");
        save_pca_basis(basis, &basis_path)?;
        let mut text = format!(
            "detector = pca-dd\nn_components = {}\nbasis_file = {}\nintercept = {:?}\n",
            self.n_components,
            basis_file_name(&basis_path)?,
            model.intercept,
        );
        for (i, w) in model.weights.iter().enumerate() {
            text.push_str(&format!("weight_{i} = {w:?}\n"));
        }
        atomic_write(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (kind, n_components, basis, model) = load_pca_detector_file(path)?;
        if kind != "pca-dd" {
            return Err(parse_err(path, 1, format!("not a pca-dd model (detector = {kind})")));
        }
        let mut detector = PcaDdDetector::new(n_components);
        detector.fitted = Some((basis, model));
        Ok(detector)
    }
}

impl Default for PcaDdDetector {
    fn default() -> Self {
        PcaDdDetector::new(DEFAULT_COMPONENTS)
    }
}

impl Detector for PcaDdDetector {
    fn name(&self) -> &str {
        &self.name
    }

    fn fit(&mut self, train: &[LabeledCycle], _eval: &[LabeledCycle]) -> Result<()> {
        check_components(self.n_components)?;
        let basis = fit_basis(train, self.n_components)?;
        let features: Result<Vec<Vec<f64>>> =
            train.iter().map(|c| pca_dd_features(&c.window.samples, &basis)).collect();
        let names: Vec<String> = (0..self.n_components).map(|i| format!("pc{i}")).collect();
        let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let model = fit_on_features(train, features?, &name_refs, &self.logreg)?;
        self.fitted = Some((basis, model));
        Ok(())
    }

    fn probability(&self, window: &AnalysisWindow) -> Result<f64> {
        let (basis, model) = self.fitted.as_ref().ok_or_else(|| not_fitted(&self.name))?;
        model.predict(&pca_dd_features(&window.samples, basis)?)
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

/// Reconstruction-residual summary (RMS and peak) fed to a logistic
/// regression. The residual is used raw by default; set `residual_band` to
/// band-pass it before taking the peak.
#[derive(Debug, Clone)]
pub struct PcaEigenDetector {
    pub name: String,
    pub n_components: usize,
    pub residual_band: Option<Band>,
    pub sample_rate_hz: f64,
    pub logreg: LogregConfig,
    fitted: Option<(PcaBasis, LogisticModel)>,
}

impl PcaEigenDetector {
    pub fn new(n_components: usize) -> Self {
        PcaEigenDetector {
            name: "pca-eigen".into(),
            n_components,
            residual_band: None,
            sample_rate_hz: sample_rate_hz(DEFAULT_RPM, DEFAULT_RESOLUTION_DEG),
            logreg: LogregConfig::default(),
            fitted: None,
        }
    }

    pub fn basis(&self) -> Option<&PcaBasis> {
        self.fitted.as_ref().map(|(b, _)| b)
    }

    pub fn logistic(&self) -> Option<&LogisticModel> {
        self.fitted.as_ref().map(|(_, m)| m)
    }

    fn features(&self, window: &AnalysisWindow, basis: &PcaBasis) -> Result<Vec<f64>> {
        let (rmse, peak) = match self.residual_band {
            None => pca_eigen_features(&window.samples, basis)?,
            Some(band) => {
                pca_eigen_features_banded(window, basis, band, self.sample_rate_hz)?
            }
        };
        Ok(vec![rmse, peak])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let (basis, model) = self.fitted.as_ref().ok_or_else(|| not_fitted(&self.name))?;
        let basis_path = path.with_extension("knkb");
        save_pca_basis(basis, &basis_path)?;
        let mut text = format!(
            "detector = pca-eigen\nn_components = {}\nbasis_file = {}\nintercept = {:?}\n",
            self.n_components,
            basis_file_name(&basis_path)?,
            model.intercept,
        );
        for (i, w) in model.weights.iter().enumerate() {
            text.push_str(&format!("weight_{i} = {w:?}\n"));
        }
        if let Some(band) = self.residual_band {
            text.push_str(&format!(
                "residual_band_low_hz = {:?}\nresidual_band_high_hz = {:?}\n\
                 sample_rate_hz = {:?}\n",
                band.low_hz, band.high_hz, self.sample_rate_hz
            ));
        }
        atomic_write(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (kind, n_components, basis, model) = load_pca_detector_file(path)?;
        if kind != "pca-eigen" {
            return Err(parse_err(path, 1, format!("not a pca-eigen model (detector = {kind})")));
        }
        let mut detector = PcaEigenDetector::new(n_components);
        let text = std::fs::read_to_string(path)?;
        let mut low = None;
        let mut high = None;
        for (i, line) in text.lines().enumerate() {
            let Some((key, value)) = line.split_once('=') else { continue };
            let (key, value) = (key.trim(), value.trim());
            match key {
                "residual_band_low_hz" => low = Some(parse_num(path, i + 1, key, value)?),
                "residual_band_high_hz" => high = Some(parse_num(path, i + 1, key, value)?),
                "sample_rate_hz" => {
                    detector.sample_rate_hz = parse_num(path, i + 1, key, value)?;
                }
                _ => {}
            }
        }
        if let (Some(low_hz), Some(high_hz)) = (low, high) {
            detector.residual_band = Some(Band { low_hz, high_hz });
        }
        detector.fitted = Some((basis, model));
        Ok(detector)
    }
}

impl Default for PcaEigenDetector {
    fn default() -> Self {
        PcaEigenDetector::new(DEFAULT_COMPONENTS)
    }
}

impl Detector for PcaEigenDetector {
    fn name(&self) -> &str {
        &self.name
    }

    fn fit(&mut self, train: &[LabeledCycle], _eval: &[LabeledCycle]) -> Result<()> {
        check_components(self.n_components)?;
        let basis = fit_basis(train, self.n_components)?;
        let features: Result<Vec<Vec<f64>>> =
            train.iter().map(|c| self.features(&c.window, &basis)).collect();
        let model =
            fit_on_features(train, features?, &["rmse", "residual_mapo"], &self.logreg)?;
        self.fitted = Some((basis, model));
        Ok(())
    }

    fn probability(&self, window: &AnalysisWindow) -> Result<f64> {
        let (basis, model) = self.fitted.as_ref().ok_or_else(|| not_fitted(&self.name))?;
        model.predict(&self.features(window, basis)?)
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

fn basis_file_name(path: &Path) -> Result<String> {
    path.file_name()
        .and_then(|n| n.to_str())
        .map(str::to_string)
        .ok_or_else(|| KnockError::Domain(format!("unusable basis path {}", path.display())))
}

/// Shared part of the two PCA detector file formats: kind, component count,
/// the basis from the referenced container file, and the logistic model.
fn load_pca_detector_file(path: &Path) -> Result<(String, usize, PcaBasis, LogisticModel)> {
    let text = std::fs::read_to_string(path)?;
    let mut kind = None;
    let mut n_components = None;
    let mut basis_file = None;
    let mut intercept = None;
    let mut weights: Vec<(usize, f64)> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let row = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) =
            line.split_once('=').ok_or_else(|| parse_err(path, row, "expected key = value"))?;
        let (key, value) = (key.trim(), value.trim());
        match key {
            "detector" => kind = Some(value.to_string()),
            "n_components" => {
                n_components = Some(value.parse::<usize>().map_err(|_| {
                    parse_err(path, row, format!("bad value for n_components: {value:?}"))
                })?);
            }
            "basis_file" => basis_file = Some(value.to_string()),
            "intercept" => intercept = Some(parse_num(path, row, key, value)?),
            _ => {
                if let Some(index) = key.strip_prefix("weight_") {
                    let index: usize = index.parse().map_err(|_| {
                        parse_err(path, row, format!("bad weight key {key:?}"))
                    })?;
                    weights.push((index, parse_num(path, row, key, value)?));
                }
            }
        }
    }
    let kind = kind.ok_or_else(|| parse_err(path, 1, "missing key detector"))?;
    let n_components =
        n_components.ok_or_else(|| parse_err(path, 1, "missing key n_components"))?;
    let basis_file = basis_file.ok_or_else(|| parse_err(path, 1, "missing key basis_file"))?;
    let intercept = intercept.ok_or_else(|| parse_err(path, 1, "missing key intercept"))?;
    weights.sort_by_key(|(i, _)| *i);
    if weights.iter().enumerate().any(|(want, (got, _))| want != *got) {
        return Err(parse_err(path, 1, "weight indices are not contiguous from 0"));
    }
    let basis_path = path.parent().unwrap_or(Path::new("")).join(basis_file);
    let basis = load_pca_basis(&basis_path)?;
    let model = LogisticModel {
        weights: weights.into_iter().map(|(_, w)| w).collect(),
        intercept,
        feature_names: Vec::new(),
    };
    Ok((kind, n_components, basis, model))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ExpertVotes;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const RATE: f64 = 90_000.0;

    /// Short windows keep the network tiny: noise for normal cycles, noise
    /// plus a 6 kHz tone and a randomly placed spike for knocking ones. The
    /// fixed-phase tone lands inside any reasonable principal subspace (so
    /// projection coordinates separate), while the wandering spike escapes it
    /// (so reconstruction residuals separate too).
    fn tiny_dataset(n_per_class: usize, seed: u64) -> Vec<LabeledCycle> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cycles = Vec::new();
        for i in 0..2 * n_per_class {
            let knocking = i % 2 == 0;
            let spike_at = rng.gen_range(0..64usize);
            let samples: Vec<f64> = (0..64)
                .map(|j| {
                    let t = j as f64 / RATE;
                    let mut x = 0.05 * (rng.gen::<f64>() - 0.5);
                    if knocking {
                        x += (2.0 * std::f64::consts::PI * 6000.0 * t).sin();
                        if j == spike_at {
                            x += 0.8;
                        }
                    }
                    x
                })
                .collect();
            let window = AnalysisWindow { start_deg: 0.0, resolution_deg: 0.1, samples };
            let votes = ExpertVotes::new(if knocking { [1; 5] } else { [0; 5] }).unwrap();
            cycles.push(LabeledCycle::new(format!("c{i}"), window, votes, "synth"));
        }
        cycles
    }

    fn all_detectors() -> Vec<Box<dyn Detector>> {
        let mut cnn = CnnDetector::new(8, ConvMode::SharedKernel);
        cnn.train_config.max_epochs = 30;
        cnn.train_config.batch_size = 8;
        vec![
            Box::new(cnn),
            Box::new(MapoDetector::default()),
            Box::new(PcaDdDetector::new(4)),
            Box::new(PcaEigenDetector::new(4)),
        ]
    }

    #[test]
    fn every_detector_learns_the_tone() {
        let train = tiny_dataset(20, 1);
        let eval = tiny_dataset(10, 2);
        for mut detector in all_detectors() {
            detector.fit(&train, &eval).unwrap();
            let correct = train
                .iter()
                .filter(|c| detector.classify(&c.window).unwrap() == c.binary_label)
                .count();
            assert!(
                correct as f64 / train.len() as f64 >= 0.9,
                "{}: {}/{}",
                detector.name(),
                correct,
                train.len()
            );
            for c in train.iter().take(4) {
                let p = detector.probability(&c.window).unwrap();
                assert!((0.0..=1.0).contains(&p), "{}: {p}", detector.name());
            }
        }
    }

    #[test]
    fn unfitted_detectors_refuse_to_classify() {
        let window = tiny_dataset(1, 3)[0].window.clone();
        for detector in all_detectors() {
            let err = detector.probability(&window).unwrap_err();
            assert!(matches!(err, KnockError::Domain(_)), "{}", detector.name());
        }
    }

    #[test]
    fn component_count_bounds_are_enforced() {
        let train = tiny_dataset(8, 4);
        for n in [0, MAX_COMPONENTS + 1] {
            let mut detector = PcaDdDetector::new(n);
            let err = detector.fit(&train, &[]).unwrap_err();
            assert!(matches!(err, KnockError::Domain(_)), "n={n}");
        }
    }

    #[test]
    fn mapo_decision_matches_threshold_rule() {
        let train = tiny_dataset(15, 5);
        let mut detector = MapoDetector::default();
        detector.fit(&train, &[]).unwrap();
        let model = detector.model().unwrap();
        for c in &train {
            let value =
                crate::reference::mapo(&c.window, detector.band, detector.sample_rate_hz)
                    .unwrap();
            assert_eq!(
                detector.classify(&c.window).unwrap(),
                mapo_classify(value, model.threshold)
            );
        }
    }

    #[test]
    fn pca_detectors_roundtrip_through_files() {
        let train = tiny_dataset(15, 6);
        let dir = tempfile::tempdir().unwrap();
        let window = &train[0].window;

        let mut dd = PcaDdDetector::new(4);
        dd.fit(&train, &[]).unwrap();
        let dd_path = dir.path().join("dd.txt");
        dd.save(&dd_path).unwrap();
        let dd2 = PcaDdDetector::load(&dd_path).unwrap();
        assert_eq!(
            dd.probability(window).unwrap(),
            dd2.probability(window).unwrap()
        );

        let mut eigen = PcaEigenDetector::new(4);
        eigen.residual_band = Some(Band { low_hz: 3000.0, high_hz: 10_000.0 });
        eigen.fit(&train, &[]).unwrap();
        let eigen_path = dir.path().join("eigen.txt");
        eigen.save(&eigen_path).unwrap();
        let eigen2 = PcaEigenDetector::load(&eigen_path).unwrap();
        assert_eq!(eigen2.residual_band, eigen.residual_band);
        assert_eq!(
            eigen.probability(window).unwrap(),
            eigen2.probability(window).unwrap()
        );

        // Loading one kind as the other is rejected.
        assert!(PcaEigenDetector::load(&dd_path).is_err());
    }

    #[test]
    fn trained_net_is_reachable_through_the_trait() {
        let train = tiny_dataset(10, 7);
        let mut cnn = CnnDetector::new(8, ConvMode::SharedKernel);
        cnn.train_config.max_epochs = 2;
        cnn.train_config.batch_size = 8;
        let mut boxed: Box<dyn Detector> = Box::new(cnn);
        boxed.fit(&train, &train).unwrap();
        let concrete = boxed.as_any().downcast_ref::<CnnDetector>().unwrap();
        assert_eq!(concrete.net().unwrap().base_kernel, 8);
        assert!(concrete.report().is_some());
    }
}
