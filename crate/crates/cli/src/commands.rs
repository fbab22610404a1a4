//! One function per subcommand; flag structs live in `main`.

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use knock_core::analysis::{dominant_peak, first_layer_spectrum, hypothesis_check, spectrum_csv};
use knock_core::cnn::{build_model, load_model, save_model};
use knock_core::dataset::{
    load_cycles, save_cycles, save_labels, stratified_split, synthesize_cycles,
};
use knock_core::evaluation::{
    compare_detectors, cv_reports_csv, diagonal_metrics, latency_benchmark, render_confusion,
    render_cv_reports, render_latency, set_accuracy, test_confusion,
};
use knock_core::reference::load_mapo_model;
use knock_core::signal::sample_rate_hz;
use knock_core::{
    Band, CnnDetector, ConvMode, CvOutcome, Detector, EngineGeometry, LabeledCycle, MapoDetector,
    PcaDdDetector, PcaEigenDetector, SplitSpec, SyntheticConfig, TrainConfig, TrainReport,
};

use crate::output::{atomic_write, with_suffix, write_config};
use crate::{
    BenchArgs, CompareArgs, CrossvalArgs, EvalArgs, Mode, NetArgs, SpectrumArgs, SynthArgs,
    TrainArgs,
};

const VALID_DETECTORS: &str = "cnn, mapo, pca-dd, pca-eigen";

// ---------------------------------------------------------------- synth

#[derive(Serialize)]
struct ResolvedSynth {
    subcommand: &'static str,
    bore_mm: f64,
    rpm: f64,
    speed_of_sound: f64,
    n: usize,
    seed: u64,
    noise_level: f64,
    knock_amp: f64,
    onset_low: f64,
    onset_high: f64,
    class_weights: [f64; 6],
    tag: String,
    out_cycles: String,
    out_labels: String,
}

pub fn synth(args: SynthArgs) -> Result<()> {
    let weights = parse_class_weights(&args.class_weights)?;
    let mut config = SyntheticConfig::new(args.bore_mm)
        .with_context(|| format!("invalid geometry (bore {} mm)", args.bore_mm))?;
    config.geometry.rpm = args.rpm;
    config.geometry.speed_of_sound = args.speed_of_sound;
    config.n_cycles = args.n;
    config.seed = args.seed;
    config.noise_level = args.noise_level;
    config.knock_amp_scale = args.knock_amp;
    config.knock_onset_range = (args.onset_low, args.onset_high);
    config.class_weights = weights;
    config.source_tag = args.tag.clone();

    let pairs = synthesize_cycles(&config)?;
    let cycles: Vec<_> = pairs.iter().map(|(c, _)| c.clone()).collect();
    let labels: Vec<_> = pairs
        .iter()
        .map(|(c, v)| (c.cycle_id.clone(), *v))
        .collect();
    save_cycles(&args.out_cycles, &cycles)?;
    save_labels(&args.out_labels, &labels)?;

    let resolved = ResolvedSynth {
        subcommand: "synth",
        bore_mm: args.bore_mm,
        rpm: args.rpm,
        speed_of_sound: args.speed_of_sound,
        n: args.n,
        seed: args.seed,
        noise_level: args.noise_level,
        knock_amp: args.knock_amp,
        onset_low: args.onset_low,
        onset_high: args.onset_high,
        class_weights: weights,
        tag: args.tag,
        out_cycles: args.out_cycles.display().to_string(),
        out_labels: args.out_labels.display().to_string(),
    };
    write_config(&args.out_cycles, &resolved)?;
    println!(
        "wrote {} cycles to {} (labels {}, manifest {})",
        pairs.len(),
        args.out_cycles.display(),
        args.out_labels.display(),
        with_suffix(&args.out_cycles, ".config.json").display()
    );
    Ok(())
}

fn parse_class_weights(text: &str) -> Result<[f64; 6]> {
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != 6 {
        bail!("--class-weights needs 6 comma-separated values, got {}", parts.len());
    }
    let mut weights = [0.0; 6];
    for (slot, part) in weights.iter_mut().zip(&parts) {
        *slot = part
            .trim()
            .parse()
            .with_context(|| format!("bad class weight {part:?}"))?;
    }
    Ok(weights)
}

// ---------------------------------------------------------------- train

#[derive(Serialize)]
struct ResolvedTrain {
    subcommand: &'static str,
    cycles: String,
    labels: String,
    variant: Option<char>,
    kernel: usize,
    mode: &'static str,
    input_length: usize,
    learning_rate: f64,
    batch_size: usize,
    max_epochs: usize,
    patience: usize,
    l2_penalty: f64,
    train_seed: u64,
    init_seed: u64,
    split_fraction: f64,
    split_seed: u64,
    out: String,
}

pub fn train(args: TrainArgs) -> Result<()> {
    let cycles = load_dataset(&args.data.cycles, &args.data.labels)?;
    let (kernel, variant) = resolve_kernel(&args.net)?;
    let mode = conv_mode(args.net.mode);
    let spec = uniform_spec(&cycles, args.split_fraction, args.split_seed)?;
    let (train_set, eval_set) = stratified_split(&cycles, &spec)?;
    let input_length = train_set
        .first()
        .map(|c| c.window.samples.len())
        .context("training set is empty after the split")?;

    let net = build_model(kernel, input_length, mode, args.net.init_seed)?;
    let tc = train_config(&args.net);
    let (net, report) = knock_core::cnn::train(net, &train_set, &eval_set, &tc)?;
    save_model(&net, &args.out)?;
    atomic_write(
        &with_suffix(&args.out, ".report.txt"),
        render_train_report(&report).as_bytes(),
    )?;
    atomic_write(
        &with_suffix(&args.out, ".report.csv"),
        train_report_csv(&report).as_bytes(),
    )?;
    write_config(
        &args.out,
        &ResolvedTrain {
            subcommand: "train",
            cycles: args.data.cycles.display().to_string(),
            labels: args.data.labels.display().to_string(),
            variant: variant.map(|v| v.letter()),
            kernel,
            mode: mode_name(mode),
            input_length,
            learning_rate: tc.learning_rate,
            batch_size: tc.batch_size,
            max_epochs: tc.max_epochs,
            patience: tc.patience,
            l2_penalty: tc.l2_penalty,
            train_seed: tc.seed,
            init_seed: args.net.init_seed,
            split_fraction: args.split_fraction,
            split_seed: args.split_seed,
            out: args.out.display().to_string(),
        },
    )?;
    println!(
        "trained kernel-{kernel} net on {} cycles: stopped epoch {} ({:?}), best test accuracy {:.4}",
        train_set.len(),
        report.stop_epoch,
        report.stop_reason,
        report.best_test_accuracy
    );
    println!("model written to {}", args.out.display());
    Ok(())
}

fn render_train_report(report: &TrainReport) -> String {
    let mut out = String::from("epoch  train_loss  train_accuracy  test_accuracy\n");
    for (i, ((l, tr), te)) in report
        .train_loss
        .iter()
        .zip(&report.train_accuracy)
        .zip(&report.test_accuracy)
        .enumerate()
    {
        out.push_str(&format!("{:>5}  {l:>10.4}  {tr:>14.4}  {te:>13.4}\n", i + 1));
    }
    out.push_str(&format!(
        "stopped after epoch {} ({:?}); best epoch {} with test accuracy {:.4}\n",
        report.stop_epoch, report.stop_reason, report.best_epoch, report.best_test_accuracy
    ));
    out
}

fn train_report_csv(report: &TrainReport) -> String {
    let mut out = String::from("epoch,train_loss,train_accuracy,test_accuracy\n");
    for (i, ((l, tr), te)) in report
        .train_loss
        .iter()
        .zip(&report.train_accuracy)
        .zip(&report.test_accuracy)
        .enumerate()
    {
        out.push_str(&format!("{},{l:?},{tr:?},{te:?}\n", i + 1));
    }
    out
}

// ---------------------------------------------------------------- eval

#[derive(Serialize)]
struct ResolvedEval {
    subcommand: &'static str,
    cycles: String,
    labels: String,
    model: String,
    report: String,
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let cycles = load_dataset(&args.data.cycles, &args.data.labels)?;
    let detector = load_detector(&args.model)?;
    let accuracy = set_accuracy(detector.as_ref(), &cycles)?;
    let confusion = test_confusion(detector.as_ref(), &cycles)?;
    let diag = diagonal_metrics(&confusion)?;

    let mut text = format!(
        "detector {} on {} cycles\nbinary accuracy {accuracy:.4}\n\n{}\n",
        detector.name(),
        cycles.len(),
        render_confusion(&confusion)
    );
    text.push_str(&format!(
        "diagonal readings\n  main                     {:.4}\n  with secondary           {:.4}\n  with secondary, modified {:.4}\n",
        diag.main, diag.with_secondary, diag.with_secondary_modified
    ));
    atomic_write(&with_suffix(&args.report, ".txt"), text.as_bytes())?;

    let mut csv = String::from("true_class,p0,p1,p2,p3,p4,p5\n");
    for (t, row) in confusion.counts().iter().enumerate() {
        csv.push_str(&format!(
            "{t},{},{},{},{},{},{}\n",
            row[0], row[1], row[2], row[3], row[4], row[5]
        ));
    }
    atomic_write(&with_suffix(&args.report, ".csv"), csv.as_bytes())?;
    write_config(
        &args.report,
        &ResolvedEval {
            subcommand: "eval",
            cycles: args.data.cycles.display().to_string(),
            labels: args.data.labels.display().to_string(),
            model: args.model.display().to_string(),
            report: args.report.display().to_string(),
        },
    )?;
    print!("{text}");
    Ok(())
}

// ---------------------------------------------------------------- crossval / compare

#[derive(Serialize)]
struct ResolvedStudy {
    subcommand: &'static str,
    cycles: String,
    labels: String,
    detectors: Vec<String>,
    repeats: usize,
    split_fractions: BTreeMap<String, f64>,
    split_seed: u64,
    band_low_hz: f64,
    band_high_hz: f64,
    components: usize,
    kernel: Option<usize>,
    mode: &'static str,
    learning_rate: f64,
    batch_size: usize,
    max_epochs: usize,
    patience: usize,
    l2_penalty: f64,
    train_seed: u64,
    init_seed: u64,
    out: String,
}

/// Builds a fresh boxed detector per cross-validation repeat.
type Factory = Box<dyn Fn() -> Box<dyn Detector>>;

fn detector_factory(name: &str, study: &crate::StudyArgs, net: &NetArgs) -> Result<Factory> {
    let band = Band { low_hz: study.band_low, high_hz: study.band_high };
    let components = study.components;
    match name {
        "cnn" => {
            let (kernel, _) = resolve_kernel(net)?;
            let mode = conv_mode(net.mode);
            let tc = train_config(net);
            let init_seed = net.init_seed;
            Ok(Box::new(move || {
                let mut d = CnnDetector::new(kernel, mode);
                d.train_config = tc.clone();
                d.init_seed = init_seed;
                Box::new(d)
            }))
        }
        "mapo" => Ok(Box::new(move || Box::new(MapoDetector::new(band)))),
        "pca-dd" => Ok(Box::new(move || Box::new(PcaDdDetector::new(components)))),
        "pca-eigen" => Ok(Box::new(move || Box::new(PcaEigenDetector::new(components)))),
        other => bail!("unknown detector {other:?}; valid detectors: {VALID_DETECTORS}"),
    }
}

fn study_report(outcomes: &[CvOutcome], out: &Path) -> Result<()> {
    let reports: Vec<_> = outcomes.iter().map(|o| o.report.clone()).collect();
    let mut text = render_cv_reports(&reports);
    for outcome in outcomes {
        for (i, cm) in outcome.confusions.iter().enumerate() {
            text.push_str(&format!(
                "\n{} split {i} confusion\n{}",
                outcome.report.detector,
                render_confusion(cm)
            ));
            let diag = diagonal_metrics(cm)?;
            text.push_str(&format!(
                "diagonal readings: main {:.4}, with secondary {:.4}, modified {:.4}\n",
                diag.main, diag.with_secondary, diag.with_secondary_modified
            ));
        }
    }
    atomic_write(&with_suffix(out, ".txt"), text.as_bytes())?;
    atomic_write(&with_suffix(out, ".csv"), cv_reports_csv(&reports).as_bytes())?;
    Ok(())
}

fn run_study(
    subcommand: &'static str,
    study: &crate::StudyArgs,
    net: &NetArgs,
    detector_names: &[String],
) -> Result<()> {
    let cycles = load_dataset(&study.data.cycles, &study.data.labels)?;
    let spec = split_spec(&cycles, &study.split, study.split_seed)?;
    let mut factories = Vec::new();
    for name in detector_names {
        factories.push(detector_factory(name, study, net)?);
    }
    let refs: Vec<&dyn Fn() -> Box<dyn Detector>> =
        factories.iter().map(|f| f.as_ref() as _).collect();
    let outcomes = compare_detectors(&refs, &cycles, &spec, study.repeats)?;
    study_report(&outcomes, &study.out)?;

    let uses_cnn = detector_names.iter().any(|n| n == "cnn");
    let kernel = if uses_cnn { Some(resolve_kernel(net)?.0) } else { None };
    let tc = train_config(net);
    write_config(
        &study.out,
        &ResolvedStudy {
            subcommand,
            cycles: study.data.cycles.display().to_string(),
            labels: study.data.labels.display().to_string(),
            detectors: detector_names.to_vec(),
            repeats: study.repeats,
            split_fractions: spec.fractions.clone(),
            split_seed: spec.seed,
            band_low_hz: study.band_low,
            band_high_hz: study.band_high,
            components: study.components,
            kernel,
            mode: mode_name(conv_mode(net.mode)),
            learning_rate: tc.learning_rate,
            batch_size: tc.batch_size,
            max_epochs: tc.max_epochs,
            patience: tc.patience,
            l2_penalty: tc.l2_penalty,
            train_seed: tc.seed,
            init_seed: net.init_seed,
            out: study.out.display().to_string(),
        },
    )?;

    let reports: Vec<_> = outcomes.iter().map(|o| o.report.clone()).collect();
    print!("{}", render_cv_reports(&reports));
    println!("\nreports written to {}.txt / .csv", study.out.display());
    Ok(())
}

pub fn crossval(args: CrossvalArgs) -> Result<()> {
    run_study("crossval", &args.study, &args.net, &[args.detector.clone()])
}

pub fn compare(args: CompareArgs) -> Result<()> {
    let names: Vec<String> = args
        .detectors
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    if names.is_empty() {
        bail!("--detectors is empty; valid detectors: {VALID_DETECTORS}");
    }
    run_study("compare", &args.study, &args.net, &names)
}

// ---------------------------------------------------------------- spectrum

#[derive(Serialize)]
struct ResolvedSpectrum {
    subcommand: &'static str,
    model: String,
    out: String,
    zero_pad: usize,
    rpm: f64,
    resolution_deg: f64,
    sample_rate_hz: f64,
    geometry_bore: Option<f64>,
    speed_of_sound: f64,
    tolerance: f64,
}

pub fn spectrum(args: SpectrumArgs) -> Result<()> {
    let net = load_model(&args.model)
        .with_context(|| format!("loading model {}", args.model.display()))?;
    let rate = sample_rate_hz(args.rpm, args.resolution_deg);
    let spec = first_layer_spectrum(&net, rate, args.zero_pad)?;
    atomic_write(&args.out, spectrum_csv(&spec).as_bytes())?;

    println!("channel  peak_hz  magnitude");
    for channel in 0..spec.magnitudes.len() {
        let (hz, magnitude) = dominant_peak(&spec, channel)?;
        println!("{channel:>7}  {hz:>7.0}  {magnitude:>9.4}");
    }

    if let Some(bore) = args.geometry_bore {
        let mut geometry = EngineGeometry::new(bore);
        geometry.rpm = args.rpm;
        geometry.speed_of_sound = args.speed_of_sound;
        let report = hypothesis_check(&net, &geometry, args.tolerance)?;
        println!(
            "hypothesis: consensus {:.0} Hz vs nearest mode {:.0} Hz (relative error {:.3}): {}",
            report.consensus_hz,
            report.best_mode_hz,
            report.relative_error,
            if report.pass { "PASS" } else { "FAIL" }
        );
    }

    write_config(
        &args.out,
        &ResolvedSpectrum {
            subcommand: "spectrum",
            model: args.model.display().to_string(),
            out: args.out.display().to_string(),
            zero_pad: args.zero_pad,
            rpm: args.rpm,
            resolution_deg: args.resolution_deg,
            sample_rate_hz: rate,
            geometry_bore: args.geometry_bore,
            speed_of_sound: args.speed_of_sound,
            tolerance: args.tolerance,
        },
    )?;
    println!("spectrum written to {}", args.out.display());
    Ok(())
}

// ---------------------------------------------------------------- bench

#[derive(Serialize)]
struct ResolvedBench {
    subcommand: &'static str,
    cycles: String,
    labels: String,
    model: String,
    warmup: usize,
    measure: usize,
    budget_us: f64,
    out: Option<String>,
}

pub fn bench(args: BenchArgs) -> Result<()> {
    let cycles = load_dataset(&args.data.cycles, &args.data.labels)?;
    let detector = load_detector(&args.model)?;
    let windows: Vec<_> = cycles.iter().map(|c| c.window.clone()).collect();
    let report = latency_benchmark(detector.as_ref(), &windows, args.warmup, args.measure)?;

    let verdict = if report.mean_us < args.budget_us { "PASS" } else { "FAIL" };
    let mut text = render_latency(detector.name(), &report);
    text.push_str(&format!(
        "{verdict} (mean {:.1} us vs budget {:.1} us)\n",
        report.mean_us, args.budget_us
    ));
    print!("{text}");

    if let Some(out) = &args.out {
        atomic_write(&with_suffix(out, ".txt"), text.as_bytes())?;
        write_config(
            out,
            &ResolvedBench {
                subcommand: "bench",
                cycles: args.data.cycles.display().to_string(),
                labels: args.data.labels.display().to_string(),
                model: args.model.display().to_string(),
                warmup: args.warmup,
                measure: args.measure,
                budget_us: args.budget_us,
                out: Some(out.display().to_string()),
            },
        )?;
    }
    Ok(())
}

// ---------------------------------------------------------------- shared helpers

fn load_dataset(cycles: &Path, labels: &Path) -> Result<Vec<LabeledCycle>> {
    load_cycles(cycles, labels).with_context(|| {
        format!("loading dataset ({} + {})", cycles.display(), labels.display())
    })
}

/// Sniff the on-disk model kind: CNN containers open with the "KNK1" magic,
/// the classical detectors are text files whose first line names them.
fn load_detector(path: &Path) -> Result<Box<dyn Detector>> {
    let bytes = fs::read(path).with_context(|| format!("reading model {}", path.display()))?;
    if bytes.starts_with(b"KNK1") {
        return Ok(Box::new(CnnDetector::from_net(load_model(path)?)));
    }
    let head = String::from_utf8_lossy(&bytes[..bytes.len().min(64)]);
    let kind = head
        .lines()
        .next()
        .and_then(|l| l.split_once('='))
        .map(|(k, v)| (k.trim(), v.trim()))
        .filter(|(k, _)| *k == "detector")
        .map(|(_, v)| v.to_string());
    match kind.as_deref() {
        Some("mapo") => Ok(Box::new(MapoDetector::from_model(load_mapo_model(path)?))),
        Some("pca-dd") => Ok(Box::new(PcaDdDetector::load(path)?)),
        Some("pca-eigen") => Ok(Box::new(PcaEigenDetector::load(path)?)),
        Some(other) => bail!(
            "unknown detector kind {other:?} in {}; valid detectors: {VALID_DETECTORS}",
            path.display()
        ),
        None => bail!(
            "{} is neither a CNN model container nor a detector text file",
            path.display()
        ),
    }
}

fn resolve_kernel(net: &NetArgs) -> Result<(usize, Option<crate::Variant>)> {
    match (net.kernel, net.variant) {
        (Some(k), _) => Ok((k, None)),
        (None, Some(v)) => Ok((v.kernel(), Some(v))),
        (None, None) => bail!("specify --variant a|b|c|d or --kernel <size>"),
    }
}

fn conv_mode(mode: Mode) -> ConvMode {
    match mode {
        Mode::Shared => ConvMode::SharedKernel,
        Mode::Cross => ConvMode::CrossChannel,
    }
}

fn mode_name(mode: ConvMode) -> &'static str {
    match mode {
        ConvMode::SharedKernel => "shared",
        ConvMode::CrossChannel => "cross",
    }
}

fn train_config(net: &NetArgs) -> TrainConfig {
    TrainConfig {
        learning_rate: net.lr,
        batch_size: net.batch,
        max_epochs: net.epochs,
        patience: net.patience,
        l2_penalty: net.l2,
        seed: net.train_seed,
        ..TrainConfig::default()
    }
}

fn dataset_tags(cycles: &[LabeledCycle]) -> Vec<String> {
    let tags: BTreeSet<&str> = cycles.iter().map(|c| c.subset_tag.as_str()).collect();
    tags.into_iter().map(str::to_string).collect()
}

fn uniform_spec(cycles: &[LabeledCycle], fraction: f64, seed: u64) -> Result<SplitSpec> {
    let tags = dataset_tags(cycles);
    Ok(SplitSpec::uniform(tags, fraction, seed)?)
}

/// Parse "--split": either one percentage for every subset ("70") or one per
/// subset in lexicographic tag order ("70/70/70"). Values above 1 are read
/// as percentages, values up to 1 as fractions.
fn split_spec(cycles: &[LabeledCycle], text: &str, seed: u64) -> Result<SplitSpec> {
    let tags = dataset_tags(cycles);
    let parts: Vec<&str> = text.split('/').collect();
    let mut values = Vec::with_capacity(parts.len());
    for part in &parts {
        let v: f64 = part
            .trim()
            .parse()
            .with_context(|| format!("bad split value {part:?}"))?;
        values.push(if v > 1.0 { v / 100.0 } else { v });
    }
    if values.len() == 1 {
        return Ok(SplitSpec::uniform(tags, values[0], seed)?);
    }
    if values.len() != tags.len() {
        bail!(
            "--split lists {} values but the dataset has {} subsets ({})",
            values.len(),
            tags.len(),
            tags.join(", ")
        );
    }
    let fractions: BTreeMap<String, f64> = tags.into_iter().zip(values).collect();
    Ok(SplitSpec::new(fractions, seed)?)
}
