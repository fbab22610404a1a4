//! `knock`: command-line front end for the knock-detection library.
//!
//! Subcommands cover the whole experiment loop: synthesize a dataset, train
//! a model, evaluate or benchmark it, run repeated-split studies, and export
//! the learned first-layer kernels as spectra. Every run writes its fully
//! resolved configuration next to its outputs, and all randomness flows from
//! explicit seeds, so rerunning a command reproduces its artifacts
//! byte-for-byte (timing numbers excepted).

mod commands;
mod output;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "knock", version, about = "Theory-guided CNN knock detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled pressure-cycle dataset
    Synth(SynthArgs),
    /// Train a CNN variant on a dataset
    Train(TrainArgs),
    /// Evaluate a saved model on a dataset
    Eval(EvalArgs),
    /// Repeated-split cross-validation of one detector
    Crossval(CrossvalArgs),
    /// Cross-validate several detectors on shared splits
    Compare(CompareArgs),
    /// Export first-layer kernel spectra and check the resonance hypothesis
    Spectrum(SpectrumArgs),
    /// Measure single-window classification latency
    Bench(BenchArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Variant {
    A,
    B,
    C,
    D,
}

impl Variant {
    /// Base kernel size of each published model variant.
    fn kernel(self) -> usize {
        match self {
            Variant::A => 30,
            Variant::B => 23,
            Variant::C => 18,
            Variant::D => 11,
        }
    }

    fn letter(self) -> char {
        match self {
            Variant::A => 'a',
            Variant::B => 'b',
            Variant::C => 'c',
            Variant::D => 'd',
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Shared,
    Cross,
}

#[derive(Args)]
struct SynthArgs {
    /// Cylinder bore in millimeters
    #[arg(long)]
    bore_mm: f64,
    /// Number of cycles to generate
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1500.0)]
    rpm: f64,
    /// Speed of sound in the burned charge, m/s
    #[arg(long, default_value_t = 966.0)]
    speed_of_sound: f64,
    /// Sensor noise standard deviation, bar
    #[arg(long, default_value_t = 0.10)]
    noise_level: f64,
    /// Scale on the knock amplitude ladder (1.0 = default severity)
    #[arg(long, default_value_t = 1.0)]
    knock_amp: f64,
    /// Earliest knock onset, degrees after TDC
    #[arg(long, default_value_t = 5.0)]
    onset_low: f64,
    /// Latest knock onset, degrees after TDC
    #[arg(long, default_value_t = 25.0)]
    onset_high: f64,
    /// Relative weights of intensity classes 0-5, comma separated
    #[arg(long, default_value = "1,1,1,1,1,1")]
    class_weights: String,
    /// Subset tag stamped on every cycle
    #[arg(long, default_value = "synth")]
    tag: String,
    #[arg(long)]
    out_cycles: PathBuf,
    #[arg(long)]
    out_labels: PathBuf,
}

#[derive(Args)]
struct DatasetArgs {
    /// Cycle file (one cycle per row)
    #[arg(long)]
    cycles: PathBuf,
    /// Label file (cycle_id plus five votes per row)
    #[arg(long)]
    labels: PathBuf,
}

#[derive(Args)]
struct NetArgs {
    /// Model variant (a|b|c|d), shorthand for the published kernel sizes
    #[arg(long, conflicts_with = "kernel")]
    variant: Option<Variant>,
    /// Base kernel size, overrides --variant
    #[arg(long)]
    kernel: Option<usize>,
    /// Convolution parameter layout
    #[arg(long, value_enum, default_value_t = Mode::Shared)]
    mode: Mode,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    /// Early-stopping patience, epochs without test-accuracy gain
    #[arg(long, default_value_t = 15)]
    patience: usize,
    #[arg(long, default_value_t = 1e-4)]
    l2: f64,
    /// Minibatch shuffle seed
    #[arg(long, default_value_t = 0)]
    train_seed: u64,
    /// Weight initialization seed
    #[arg(long, default_value_t = 0)]
    init_seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DatasetArgs,
    #[command(flatten)]
    net: NetArgs,
    /// Fraction of each subset used for training (rest drives early stopping)
    #[arg(long, default_value_t = 0.7)]
    split_fraction: f64,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    /// Model output path; reports land next to it
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DatasetArgs,
    /// Saved model file (CNN, MAPO, or PCA detector)
    #[arg(long)]
    model: PathBuf,
    /// Report base path; .txt and .csv are appended
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct StudyArgs {
    #[command(flatten)]
    data: DatasetArgs,
    /// Number of repeated splits
    #[arg(long, default_value_t = 10)]
    repeats: usize,
    /// Train percentage per subset: one value for all ("70") or one per
    /// subset in tag order ("70/70/70"); fractions like "0.7" also work
    #[arg(long, default_value = "70")]
    split: String,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    /// Band edges for the amplitude-threshold detector, Hz
    #[arg(long, default_value_t = 3000.0)]
    band_low: f64,
    #[arg(long, default_value_t = 9000.0)]
    band_high: f64,
    /// Principal components kept by the subspace detectors
    #[arg(long, default_value_t = 8)]
    components: usize,
    /// Report base path; .txt and .csv are appended
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CrossvalArgs {
    #[command(flatten)]
    study: StudyArgs,
    /// Detector to validate
    #[arg(long, default_value = "cnn")]
    detector: String,
    #[command(flatten)]
    net: NetArgs,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    study: StudyArgs,
    /// Comma-separated detectors, e.g. cnn,mapo,pca-dd,pca-eigen
    #[arg(long)]
    detectors: String,
    #[command(flatten)]
    net: NetArgs,
}

#[derive(Args)]
struct SpectrumArgs {
    /// Saved CNN model file
    #[arg(long)]
    model: PathBuf,
    /// Spectrum export path (comma-separated values)
    #[arg(long)]
    out: PathBuf,
    /// Zero-padded transform length (power of two, >= kernel size)
    #[arg(long, default_value_t = 1024)]
    zero_pad: usize,
    #[arg(long, default_value_t = 1500.0)]
    rpm: f64,
    /// Crank-angle resolution, degrees per sample
    #[arg(long, default_value_t = 0.1)]
    resolution_deg: f64,
    /// Bore for the resonance hypothesis check, mm; omit to skip the check
    #[arg(long)]
    geometry_bore: Option<f64>,
    #[arg(long, default_value_t = 966.0)]
    speed_of_sound: f64,
    /// Maximum relative distance between consensus peak and nearest mode
    #[arg(long, default_value_t = 0.15)]
    tolerance: f64,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    data: DatasetArgs,
    /// Saved model file (CNN, MAPO, or PCA detector)
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 100)]
    warmup: usize,
    #[arg(long, default_value_t = 1000)]
    measure: usize,
    /// Latency budget for the PASS/FAIL line, microseconds
    #[arg(long, default_value_t = 1000.0)]
    budget_us: f64,
    /// Optional report path; stdout only when omitted
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Synth(args) => commands::synth(args),
        Command::Train(args) => commands::train(args),
        Command::Eval(args) => commands::eval(args),
        Command::Crossval(args) => commands::crossval(args),
        Command::Compare(args) => commands::compare(args),
        Command::Spectrum(args) => commands::spectrum(args),
        Command::Bench(args) => commands::bench(args),
    }
}
