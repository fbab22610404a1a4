//! Metrics and experiment protocols.
//!
//! Everything here consumes detectors through the [`Detector`] trait and
//! labeled cycles, and produces numbers: six-class confusion matrices with
//! their diagonal readings, repeated stratified-split validation, side-by-side
//! detector comparison over shared splits, leave-groups-out generalization
//! runs, and wall-clock latency. Report rendering (text and CSV) lives here
//! too so every caller prints identical tables.

use std::collections::BTreeSet;
use std::time::Instant;

use crate::dataset::{
    filter_nonknock, probability_to_class, stratified_split, BinaryLabel, LabeledCycle, SplitSpec,
};
use crate::detector::Detector;
use crate::error::{KnockError, Result};
use crate::signal::AnalysisWindow;

/// Counts of (true class, predicted class) pairs over the 0..=5 vote scale.
/// Rows are the true class, columns the prediction.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ConfusionMatrix6 {
    counts: [[u64; 6]; 6],
}

impl ConfusionMatrix6 {
    pub fn new() -> Self {
        ConfusionMatrix6::default()
    }

    pub fn record(&mut self, true_class: u8, predicted: u8) -> Result<()> {
        if true_class > 5 || predicted > 5 {
            return Err(KnockError::Domain(format!(
                "classes must be in 0..=5, got true {true_class}, predicted {predicted}"
            )));
        }
        self.counts[true_class as usize][predicted as usize] += 1;
        Ok(())
    }

    pub fn counts(&self) -> &[[u64; 6]; 6] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Coarsen to the binary reading: classes {0,1,2} are normal, {3,4,5}
    /// knocking. Fraction of cycles landing on the correct side.
    pub fn binary_accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(KnockError::Domain("empty confusion matrix".into()));
        }
        let mut correct = 0u64;
        for t in 0..6 {
            for p in 0..6 {
                if (t >= 3) == (p >= 3) {
                    correct += self.counts[t][p];
                }
            }
        }
        Ok(correct as f64 / total as f64)
    }
}

/// Build a matrix from parallel prediction/truth slices (both on the 0..=5
/// scale).
pub fn confusion_matrix(predicted: &[u8], true_classes: &[u8]) -> Result<ConfusionMatrix6> {
    if predicted.len() != true_classes.len() {
        return Err(KnockError::Domain(format!(
            "{} predictions vs {} labels",
            predicted.len(),
            true_classes.len()
        )));
    }
    let mut cm = ConfusionMatrix6::new();
    for (&p, &t) in predicted.iter().zip(true_classes) {
        cm.record(t, p)?;
    }
    Ok(cm)
}

/// The three diagonal readings of a six-class matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiagonalMetrics {
    /// Exact class hits: trace / total.
    pub main: f64,
    /// Additionally credits every off-by-one confusion.
    pub with_secondary: f64,
    /// Off-by-one credit except where the error flips the binary reading,
    /// i.e. the 2 <-> 3 confusions stay errors.
    pub with_secondary_modified: f64,
}

pub fn diagonal_metrics(cm: &ConfusionMatrix6) -> Result<DiagonalMetrics> {
    let total = cm.total();
    if total == 0 {
        return Err(KnockError::Domain("empty confusion matrix".into()));
    }
    let counts = cm.counts();
    let mut main = 0u64;
    let mut secondary = 0u64;
    let mut secondary_modified = 0u64;
    for (t, row) in counts.iter().enumerate() {
        main += row[t];
        for (p, &count) in row.iter().enumerate() {
            if t.abs_diff(p) == 1 {
                secondary += count;
                if !(t.min(p) == 2 && t.max(p) == 3) {
                    secondary_modified += count;
                }
            }
        }
    }
    let frac = |n: u64| n as f64 / total as f64;
    Ok(DiagonalMetrics {
        main: frac(main),
        with_secondary: frac(main + secondary),
        with_secondary_modified: frac(main + secondary_modified),
    })
}

/// Fraction of agreeing prediction/label pairs.
pub fn binary_accuracy(predictions: &[BinaryLabel], labels: &[BinaryLabel]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(KnockError::Domain("no predictions to score".into()));
    }
    if predictions.len() != labels.len() {
        return Err(KnockError::Domain(format!(
            "{} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / predictions.len() as f64)
}

/// Five-number description of a score list. `std_dev` uses the sample (n-1)
/// denominator and is 0 for a single value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
    pub max: f64,
    pub min: f64,
    pub std_dev: f64,
}

impl Summary {
    pub fn from_values(values: &[f64]) -> Result<Summary> {
        if values.is_empty() {
            return Err(KnockError::Domain("cannot summarize zero values".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let mut sorted = values.to_vec();
        sorted.sort_by(|a, b| a.total_cmp(b));
        let mid = sorted.len() / 2;
        let median = if sorted.len() % 2 == 1 {
            sorted[mid]
        } else {
            (sorted[mid - 1] + sorted[mid]) / 2.0
        };
        let std_dev = if sorted.len() == 1 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Ok(Summary { mean, median, max: sorted[sorted.len() - 1], min: sorted[0], std_dev })
    }
}

/// Accuracies of one train/test split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitScore {
    pub split: usize,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

/// Repeated-split validation result for one detector.
#[derive(Debug, Clone, PartialEq)]
pub struct CvReport {
    pub detector: String,
    pub scores: Vec<SplitScore>,
    pub train: Summary,
    pub test: Summary,
    /// Hash of the cycle-id sequences of every split, in order. Two reports
    /// with equal fingerprints were evaluated on identical splits.
    pub split_fingerprint: u64,
}

/// Everything a validation run produces: the score report, one test-set
/// confusion matrix per split, and the fitted detectors themselves (in split
/// order) for callers that want to inspect what was learned.
pub struct CvOutcome {
    pub report: CvReport,
    pub confusions: Vec<ConfusionMatrix6>,
    pub detectors: Vec<Box<dyn Detector>>,
}

impl std::fmt::Debug for CvOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CvOutcome")
            .field("report", &self.report)
            .field("confusions", &self.confusions)
            .field("detectors", &self.detectors.len())
            .finish()
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(hash: &mut u64, bytes: &[u8]) {
    for &b in bytes {
        *hash ^= b as u64;
        *hash = hash.wrapping_mul(FNV_PRIME);
    }
}

fn fold_split(hash: &mut u64, train: &[LabeledCycle], test: &[LabeledCycle]) {
    fnv1a(hash, b"|train|");
    for c in train {
        fnv1a(hash, c.cycle_id.as_bytes());
        fnv1a(hash, b";");
    }
    fnv1a(hash, b"|test|");
    for c in test {
        fnv1a(hash, c.cycle_id.as_bytes());
        fnv1a(hash, b";");
    }
}

fn annotate(err: KnockError, context: &str) -> KnockError {
    let wrap = |m: String| format!("{context}: {m}");
    match err {
        KnockError::Geometry(m) => KnockError::Geometry(wrap(m)),
        KnockError::Coverage(m) => KnockError::Coverage(wrap(m)),
        KnockError::Domain(m) => KnockError::Domain(wrap(m)),
        KnockError::Shape(m) => KnockError::Shape(wrap(m)),
        KnockError::Rank(m) => KnockError::Rank(wrap(m)),
        KnockError::DegenerateFit(m) => KnockError::DegenerateFit(wrap(m)),
        KnockError::ModelFormat(m) => KnockError::ModelFormat(wrap(m)),
        KnockError::Parse { path, row, message } => {
            KnockError::Parse { path, row, message: wrap(message) }
        }
        other => KnockError::Domain(wrap(other.to_string())),
    }
}

/// Binary accuracy of a fitted detector over a labeled set.
pub fn set_accuracy(detector: &dyn Detector, cycles: &[LabeledCycle]) -> Result<f64> {
    let predictions: Result<Vec<BinaryLabel>> =
        cycles.iter().map(|c| detector.classify(&c.window)).collect();
    let labels: Vec<BinaryLabel> = cycles.iter().map(|c| c.binary_label).collect();
    binary_accuracy(&predictions?, &labels)
}

/// Six-class confusion of a fitted detector over a labeled set: predicted
/// classes come from the probability bins, truth from the vote sums.
pub fn test_confusion(detector: &dyn Detector, cycles: &[LabeledCycle]) -> Result<ConfusionMatrix6> {
    let mut cm = ConfusionMatrix6::new();
    for c in cycles {
        let class = probability_to_class(detector.probability(&c.window)?)?;
        cm.record(c.relative_label, class)?;
    }
    Ok(cm)
}

/// Fit and score a fresh detector on `n_repeats` stratified splits.
///
/// Split `i` uses seed `i` (the seed in `spec` is ignored), so the split
/// sequence depends only on the dataset and fractions: every detector
/// validated against the same spec sees bitwise-identical splits. The test
/// half doubles as the fitting eval set, which drives the network's early
/// stopping and is ignored by the classical detectors.
pub fn cross_validate(
    factory: &dyn Fn() -> Box<dyn Detector>,
    cycles: &[LabeledCycle],
    spec: &SplitSpec,
    n_repeats: usize,
) -> Result<CvOutcome> {
    if n_repeats == 0 {
        return Err(KnockError::Domain("n_repeats must be at least 1".into()));
    }
    let mut scores = Vec::with_capacity(n_repeats);
    let mut confusions = Vec::with_capacity(n_repeats);
    let mut detectors = Vec::with_capacity(n_repeats);
    let mut fingerprint = FNV_OFFSET;
    let mut name = String::new();
    for i in 0..n_repeats {
        let context = format!("split {i}");
        let mut split_spec = spec.clone();
        split_spec.seed = i as u64;
        let (train, test) =
            stratified_split(cycles, &split_spec).map_err(|e| annotate(e, &context))?;
        fold_split(&mut fingerprint, &train, &test);
        let mut detector = factory();
        if i == 0 {
            name = detector.name().to_string();
        }
        detector.fit(&train, &test).map_err(|e| annotate(e, &context))?;
        scores.push(SplitScore {
            split: i,
            train_accuracy: set_accuracy(detector.as_ref(), &train)
                .map_err(|e| annotate(e, &context))?,
            test_accuracy: set_accuracy(detector.as_ref(), &test)
                .map_err(|e| annotate(e, &context))?,
        });
        confusions.push(test_confusion(detector.as_ref(), &test).map_err(|e| annotate(e, &context))?);
        detectors.push(detector);
    }
    let report = CvReport {
        detector: name,
        train: Summary::from_values(&scores.iter().map(|s| s.train_accuracy).collect::<Vec<_>>())?,
        test: Summary::from_values(&scores.iter().map(|s| s.test_accuracy).collect::<Vec<_>>())?,
        scores,
        split_fingerprint: fingerprint,
    };
    Ok(CvOutcome { report, confusions, detectors })
}

/// Validate several detectors over the same split sequence and return their
/// outcomes side by side. Fingerprints are compared across columns; a
/// mismatch means the split generation was not deterministic and is an error.
pub fn compare_detectors(
    factories: &[&dyn Fn() -> Box<dyn Detector>],
    cycles: &[LabeledCycle],
    spec: &SplitSpec,
    n_repeats: usize,
) -> Result<Vec<CvOutcome>> {
    let mut outcomes = Vec::with_capacity(factories.len());
    for factory in factories {
        let outcome = cross_validate(*factory, cycles, spec, n_repeats)?;
        if let Some(first) = outcomes.first() {
            let first: &CvOutcome = first;
            if outcome.report.split_fingerprint != first.report.split_fingerprint {
                return Err(KnockError::Domain(format!(
                    "split sequences diverged between {} and {}",
                    first.report.detector, outcome.report.detector
                )));
            }
        }
        outcomes.push(outcome);
    }
    Ok(outcomes)
}

/// Extra non-knocking cycles mixed into a scenario's training set: a fraction
/// of one subset's non-knocking cycles, sampled with the given seed.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentSpec {
    pub tag: String,
    pub fraction: f64,
    pub seed: u64,
}

/// One leave-groups-out experiment: train on whole subsets, test on others.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub train_tags: Vec<String>,
    pub test_tags: Vec<String>,
    pub augment_nonknock: Option<AugmentSpec>,
}

impl Scenario {
    pub fn new(
        name: impl Into<String>,
        train_tags: &[&str],
        test_tags: &[&str],
    ) -> Self {
        Scenario {
            name: name.into(),
            train_tags: train_tags.iter().map(|t| t.to_string()).collect(),
            test_tags: test_tags.iter().map(|t| t.to_string()).collect(),
            augment_nonknock: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioResult {
    pub name: String,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub n_train: usize,
    pub n_test: usize,
}

/// Run each scenario with a fresh detector from `factory`.
///
/// Training uses the full train-tag subsets (plus any augmentation); the
/// train set itself serves as the fitting eval set so nothing from the test
/// subsets influences fitting. Identical train and test tags therefore reduce
/// to a resubstitution run.
pub fn generalization_matrix(
    factory: &dyn Fn() -> Box<dyn Detector>,
    cycles: &[LabeledCycle],
    scenarios: &[Scenario],
) -> Result<Vec<ScenarioResult>> {
    let known: BTreeSet<&str> = cycles.iter().map(|c| c.subset_tag.as_str()).collect();
    let mut results = Vec::with_capacity(scenarios.len());
    for scenario in scenarios {
        let context = format!("scenario {}", scenario.name);
        let mut referenced: Vec<&str> = Vec::new();
        referenced.extend(scenario.train_tags.iter().map(String::as_str));
        referenced.extend(scenario.test_tags.iter().map(String::as_str));
        if let Some(augment) = &scenario.augment_nonknock {
            referenced.push(&augment.tag);
        }
        for tag in referenced {
            if !known.contains(tag) {
                return Err(KnockError::Domain(format!(
                    "{context}: unknown subset tag {tag:?}"
                )));
            }
        }
        let mut train: Vec<LabeledCycle> = cycles
            .iter()
            .filter(|c| scenario.train_tags.contains(&c.subset_tag))
            .cloned()
            .collect();
        if let Some(augment) = &scenario.augment_nonknock {
            // filter_nonknock thins one subset inside the whole dataset; the
            // augmentation wants only that subset's sampled non-knocking
            // cycles, so restrict its output accordingly.
            let sampled = filter_nonknock(cycles, &augment.tag, augment.fraction, augment.seed)
                .map_err(|e| annotate(e, &context))?;
            train.extend(sampled.into_iter().filter(|c| {
                c.subset_tag == augment.tag && c.binary_label == BinaryLabel::Normal
            }));
        }
        let test: Vec<LabeledCycle> = cycles
            .iter()
            .filter(|c| scenario.test_tags.contains(&c.subset_tag))
            .cloned()
            .collect();
        if train.is_empty() {
            return Err(KnockError::Domain(format!("{context}: training selection is empty")));
        }
        if test.is_empty() {
            return Err(KnockError::Domain(format!("{context}: test selection is empty")));
        }
        let mut detector = factory();
        let eval = train.clone();
        detector.fit(&train, &eval).map_err(|e| annotate(e, &context))?;
        results.push(ScenarioResult {
            name: scenario.name.clone(),
            train_accuracy: set_accuracy(detector.as_ref(), &train)
                .map_err(|e| annotate(e, &context))?,
            test_accuracy: set_accuracy(detector.as_ref(), &test)
                .map_err(|e| annotate(e, &context))?,
            n_train: train.len(),
            n_test: test.len(),
        });
    }
    Ok(results)
}

/// Wall-clock per-window classification time, single thread.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyReport {
    pub mean_us: f64,
    pub p99_us: f64,
    pub n_warmup: usize,
    pub n_measured: usize,
}

/// Time `classify` over the given windows (cycled round-robin) on a monotonic
/// clock. Warmup calls run first and are discarded.
pub fn latency_benchmark(
    detector: &dyn Detector,
    windows: &[AnalysisWindow],
    n_warmup: usize,
    n_measured: usize,
) -> Result<LatencyReport> {
    if n_measured < 100 {
        return Err(KnockError::Domain(format!(
            "need at least 100 measured classifications, got {n_measured}"
        )));
    }
    if windows.is_empty() {
        return Err(KnockError::Domain("no windows to classify".into()));
    }
    for i in 0..n_warmup {
        std::hint::black_box(detector.classify(&windows[i % windows.len()])?);
    }
    let mut samples_us = Vec::with_capacity(n_measured);
    for i in 0..n_measured {
        let window = &windows[i % windows.len()];
        let started = Instant::now();
        std::hint::black_box(detector.classify(window)?);
        samples_us.push(started.elapsed().as_secs_f64() * 1e6);
    }
    let mean_us = samples_us.iter().sum::<f64>() / n_measured as f64;
    samples_us.sort_by(|a, b| a.total_cmp(b));
    let index = ((0.99 * n_measured as f64).ceil() as usize).clamp(1, n_measured) - 1;
    Ok(LatencyReport { mean_us, p99_us: samples_us[index], n_warmup, n_measured })
}

fn render_table(rows: &[Vec<String>]) -> String {
    let columns = rows.iter().map(Vec::len).max().unwrap_or(0);
    let mut widths = vec![0usize; columns];
    for row in rows {
        for (i, cell) in row.iter().enumerate() {
            widths[i] = widths[i].max(cell.len());
        }
    }
    let mut out = String::new();
    for row in rows {
        let mut line = String::new();
        for (i, cell) in row.iter().enumerate() {
            if i > 0 {
                line.push_str("  ");
            }
            if i == 0 {
                line.push_str(&format!("{cell:<width$}", width = widths[0]));
            } else {
                line.push_str(&format!("{cell:>width$}", width = widths[i]));
            }
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out
}

const AGGREGATE_ROWS: [&str; 5] = ["mean", "median", "max", "min", "std_dev"];

fn aggregate_value(summary: &Summary, stat: &str) -> f64 {
    match stat {
        "mean" => summary.mean,
        "median" => summary.median,
        "max" => summary.max,
        "min" => summary.min,
        _ => summary.std_dev,
    }
}

/// Side-by-side text table: one row per split plus the five aggregate rows,
/// two columns (train/test accuracy) per detector.
pub fn render_cv_reports(reports: &[CvReport]) -> String {
    let mut header = vec!["split".to_string()];
    for r in reports {
        header.push(format!("{}:train", r.detector));
        header.push(format!("{}:test", r.detector));
    }
    let n_splits = reports.iter().map(|r| r.scores.len()).max().unwrap_or(0);
    let mut rows = vec![header];
    for i in 0..n_splits {
        let mut row = vec![i.to_string()];
        for r in reports {
            match r.scores.get(i) {
                Some(s) => {
                    row.push(format!("{:.4}", s.train_accuracy));
                    row.push(format!("{:.4}", s.test_accuracy));
                }
                None => {
                    row.push("-".into());
                    row.push("-".into());
                }
            }
        }
        rows.push(row);
    }
    for stat in AGGREGATE_ROWS {
        let mut row = vec![stat.to_string()];
        for r in reports {
            row.push(format!("{:.4}", aggregate_value(&r.train, stat)));
            row.push(format!("{:.4}", aggregate_value(&r.test, stat)));
        }
        rows.push(row);
    }
    render_table(&rows)
}

/// Long-format CSV: one row per (detector, split), then one per (detector,
/// aggregate statistic). Accuracies are printed with full precision so reruns
/// compare byte for byte.
pub fn cv_reports_csv(reports: &[CvReport]) -> String {
    let mut out = String::from("detector,split,train_accuracy,test_accuracy\n");
    for r in reports {
        for s in &r.scores {
            out.push_str(&format!(
                "{},{},{:?},{:?}\n",
                r.detector, s.split, s.train_accuracy, s.test_accuracy
            ));
        }
        for stat in AGGREGATE_ROWS {
            out.push_str(&format!(
                "{},{},{:?},{:?}\n",
                r.detector,
                stat,
                aggregate_value(&r.train, stat),
                aggregate_value(&r.test, stat)
            ));
        }
    }
    out
}

/// Counts block followed by a row-normalized block (all-zero rows print 0).
pub fn render_confusion(cm: &ConfusionMatrix6) -> String {
    let counts = cm.counts();
    let mut rows = Vec::new();
    let mut header = vec!["counts".to_string()];
    header.extend((0..6).map(|p| format!("p{p}")));
    rows.push(header);
    for (t, row) in counts.iter().enumerate() {
        let mut cells = vec![format!("t{t}")];
        cells.extend(row.iter().map(|c| c.to_string()));
        rows.push(cells);
    }
    let mut normalized_header = vec!["fraction".to_string()];
    normalized_header.extend((0..6).map(|p| format!("p{p}")));
    rows.push(normalized_header);
    for (t, row) in counts.iter().enumerate() {
        let total: u64 = row.iter().sum();
        let mut cells = vec![format!("t{t}")];
        cells.extend(row.iter().map(|&c| {
            if total == 0 {
                "0.000".to_string()
            } else {
                format!("{:.3}", c as f64 / total as f64)
            }
        }));
        rows.push(cells);
    }
    render_table(&rows)
}

pub fn render_generalization(results: &[ScenarioResult]) -> String {
    let mut rows = vec![vec![
        "scenario".to_string(),
        "n_train".to_string(),
        "n_test".to_string(),
        "train_accuracy".to_string(),
        "test_accuracy".to_string(),
    ]];
    for r in results {
        rows.push(vec![
            r.name.clone(),
            r.n_train.to_string(),
            r.n_test.to_string(),
            format!("{:.4}", r.train_accuracy),
            format!("{:.4}", r.test_accuracy),
        ]);
    }
    render_table(&rows)
}

pub fn render_latency(detector: &str, report: &LatencyReport) -> String {
    format!(
        "{}: mean {:.1} us, p99 {:.1} us over {} windows ({} warmup)\n",
        detector, report.mean_us, report.p99_us, report.n_measured, report.n_warmup
    )
}
