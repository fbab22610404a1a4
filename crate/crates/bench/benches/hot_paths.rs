//! Criterion benchmarks for the per-window hot paths: CNN forward passes at
//! every published kernel size, the zero-phase band-pass, PCA feature
//! extraction, and the radix-2 transform behind the kernel spectra.

use criterion::{black_box, criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use knock_core::analysis::first_layer_spectrum;
use knock_core::cnn::{build_model, forward};
use knock_core::reference::{pca_dd_features, pca_eigen_features, pca_fit};
use knock_core::signal::{band_pass, AnalysisWindow};
use knock_core::{Band, ConvMode};

fn window(seed: u64) -> AnalysisWindow {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..600)
        .map(|i| {
            let angle = i as f64 * 0.1;
            40.0 * (-angle / 40.0).exp() + 20.0 + rng.gen_range(-0.3..0.3)
        })
        .collect();
    AnalysisWindow { start_deg: 0.0, resolution_deg: 0.1, samples }
}

fn cnn_forward(c: &mut Criterion) {
    let input = window(1);
    let mut group = c.benchmark_group("cnn_forward");
    for (variant, kernel) in [('a', 30), ('b', 23), ('c', 18), ('d', 11)] {
        let net = build_model(kernel, 600, ConvMode::SharedKernel, 0).unwrap();
        group.bench_function(format!("model_{variant}_k{kernel}"), |b| {
            b.iter(|| forward(&net, black_box(&input)).unwrap())
        });
    }
    group.finish();
}

fn band_pass_window(c: &mut Criterion) {
    let input = window(2);
    let band = Band { low_hz: 3000.0, high_hz: 9000.0 };
    c.bench_function("band_pass_600", |b| {
        b.iter(|| band_pass(black_box(&input), band, 90_000.0).unwrap())
    });
}

fn pca_features(c: &mut Criterion) {
    let windows: Vec<AnalysisWindow> = (0..200).map(|i| window(i)).collect();
    let rows: Vec<&[f64]> = windows.iter().map(|w| w.samples.as_slice()).collect();
    let basis = pca_fit(&rows, 8).unwrap();
    let probe = window(999);
    c.bench_function("pca_dd_features_600x8", |b| {
        b.iter(|| pca_dd_features(black_box(&probe.samples), &basis).unwrap())
    });
    c.bench_function("pca_eigen_features_600x8", |b| {
        b.iter(|| pca_eigen_features(black_box(&probe.samples), &basis).unwrap())
    });
}

fn kernel_spectrum(c: &mut Criterion) {
    let net = build_model(30, 600, ConvMode::SharedKernel, 0).unwrap();
    c.bench_function("first_layer_spectrum_pad1024", |b| {
        b.iter(|| first_layer_spectrum(black_box(&net), 90_000.0, 1024).unwrap())
    });
}

criterion_group!(benches, cnn_forward, band_pass_window, pca_features, kernel_spectrum);
criterion_main!(benches);
