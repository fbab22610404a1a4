//! The knock detection network: three 1D convolution stages sized by the
//! resonance period, two dense stages, sigmoid output.
//!
//! The base kernel size `k` is the whole design: conv1 and conv2 use kernels
//! of length `k`, conv3 doubles to `2k + 1`, channels go 4, 8, 16, and every
//! convolution runs with padding 5, stride 1, and no bias. Each stage is
//! followed by a rectifier and a max pool of size and stride 2; the closing
//! dense pair halves the flattened width and squashes to a probability. The
//! network consumes raw pressure windows; there is deliberately no input
//! normalization, the rectifier stages cope with the scale.
//!
//! Convolutions come in two parameterizations. `SharedKernel` gives each
//! output channel a single length-`k` kernel applied to the sum of the input
//! channels (`k * out_channels` parameters per layer); `CrossChannel` is the
//! conventional form with one kernel per input/output channel pair. The
//! shared form is the default and is what the parameter accounting in the
//! tests pins down.

pub(crate) mod io;
mod ops;
mod train;

pub use io::{load_model, save_model};
pub use ops::Gradients;
pub use train::{train, StopReason, TrainConfig, TrainReport};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{probability_to_class, BinaryLabel};
use crate::error::{KnockError, Result};
use crate::signal::AnalysisWindow;

/// Convolution padding applied on both ends of every conv stage.
pub const CONV_PADDING: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvMode {
    /// One kernel per output channel, applied to the summed input channels.
    SharedKernel,
    /// One kernel per (input, output) channel pair.
    CrossChannel,
}

#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub kernel_size: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub mode: ConvMode,
    /// SharedKernel: `[out][k]` row-major. CrossChannel: `[out][in][k]`.
    pub weights: Vec<f64>,
}

impl ConvLayer {
    pub fn parameter_count(&self) -> usize {
        match self.mode {
            ConvMode::SharedKernel => self.kernel_size * self.out_channels,
            ConvMode::CrossChannel => self.kernel_size * self.in_channels * self.out_channels,
        }
    }

    /// Output length for an input of `l` samples: `l + 2*padding - k + 1`.
    pub fn output_length(&self, l: usize) -> usize {
        l + 2 * CONV_PADDING + 1 - self.kernel_size
    }
}

#[derive(Debug, Clone)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major `[out][in]`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn parameter_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

#[derive(Debug, Clone)]
pub struct KnockNet {
    pub mode: ConvMode,
    pub base_kernel: usize,
    pub input_length: usize,
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
    pub conv3: ConvLayer,
    pub fc1: Dense,
    pub fc2: Dense,
}

/// Layer-by-layer sample counts for a given base kernel and input length:
/// lengths after conv1, pool1, conv2, pool2, conv3, pool3, then the flattened
/// width feeding fc1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShapePlan {
    pub conv1: usize,
    pub pool1: usize,
    pub conv2: usize,
    pub pool2: usize,
    pub conv3: usize,
    pub pool3: usize,
    pub flatten: usize,
}

pub(crate) fn plan_shapes(base_kernel: usize, input_length: usize) -> Result<ShapePlan> {
    if base_kernel == 0 {
        return Err(KnockError::Shape("base kernel size must be at least 1".to_string()));
    }
    let conv_out = |l: usize, k: usize, name: &str| -> Result<usize> {
        (l + 2 * CONV_PADDING + 1).checked_sub(k).filter(|&n| n > 0).ok_or_else(|| {
            KnockError::Shape(format!(
                "{name}: kernel {k} does not fit an input of {l} samples (padding {CONV_PADDING})"
            ))
        })
    };
    let pool_out = |l: usize, name: &str| -> Result<usize> {
        if l < 2 {
            return Err(KnockError::Shape(format!(
                "{name}: input of {l} samples cannot be pooled"
            )));
        }
        Ok(l / 2)
    };
    let conv1 = conv_out(input_length, base_kernel, "conv1")?;
    let pool1 = pool_out(conv1, "pool1")?;
    let conv2 = conv_out(pool1, base_kernel, "conv2")?;
    let pool2 = pool_out(conv2, "pool2")?;
    let conv3 = conv_out(pool2, 2 * base_kernel + 1, "conv3")?;
    let pool3 = pool_out(conv3, "pool3")?;
    // pool3 >= 1 here, so the flattened width is at least 16 and fc1 always
    // has room to halve.
    Ok(ShapePlan { conv1, pool1, conv2, pool2, conv3, pool3, flatten: pool3 * 16 })
}

fn glorot_limit(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn init_uniform(rng: &mut ChaCha8Rng, n: usize, limit: f64) -> Vec<f64> {
    (0..n).map(|_| limit * (2.0 * rng.gen::<f64>() - 1.0)).collect()
}

/// Builds a network for one base kernel size with seeded uniform weight
/// initialization (bounds scale with fan-in and fan-out; biases start at
/// zero). Errors name the first layer whose shape collapses.
pub fn build_model(
    base_kernel: usize,
    input_length: usize,
    mode: ConvMode,
    seed: u64,
) -> Result<KnockNet> {
    let plan = plan_shapes(base_kernel, input_length)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let conv = |rng: &mut ChaCha8Rng, k: usize, c_in: usize, c_out: usize| {
        let n = match mode {
            ConvMode::SharedKernel => k * c_out,
            ConvMode::CrossChannel => k * c_in * c_out,
        };
        // Fan-in counts the summed input channels either way; the shared form
        // really does see all of them through the channel sum.
        let limit = glorot_limit(k * c_in, k * c_out);
        ConvLayer {
            kernel_size: k,
            in_channels: c_in,
            out_channels: c_out,
            mode,
            weights: init_uniform(rng, n, limit),
        }
    };
    let conv1 = conv(&mut rng, base_kernel, 1, 4);
    let conv2 = conv(&mut rng, base_kernel, 4, 8);
    let conv3 = conv(&mut rng, 2 * base_kernel + 1, 8, 16);

    let dense = |rng: &mut ChaCha8Rng, i: usize, o: usize| Dense {
        in_dim: i,
        out_dim: o,
        weights: init_uniform(rng, i * o, glorot_limit(i, o)),
        bias: vec![0.0; o],
    };
    let fc1 = dense(&mut rng, plan.flatten, plan.flatten / 2);
    let fc2 = dense(&mut rng, plan.flatten / 2, 1);

    Ok(KnockNet { mode, base_kernel, input_length, conv1, conv2, conv3, fc1, fc2 })
}

impl KnockNet {
    pub fn shapes(&self) -> ShapePlan {
        // Construction already validated the chain.
        plan_shapes(self.base_kernel, self.input_length).expect("validated at build time")
    }

    /// All trainable parameter arrays in declaration order.
    pub(crate) fn param_arrays_mut(&mut self) -> [&mut Vec<f64>; 7] {
        [
            &mut self.conv1.weights,
            &mut self.conv2.weights,
            &mut self.conv3.weights,
            &mut self.fc1.weights,
            &mut self.fc1.bias,
            &mut self.fc2.weights,
            &mut self.fc2.bias,
        ]
    }

    pub(crate) fn param_arrays(&self) -> [&Vec<f64>; 7] {
        [
            &self.conv1.weights,
            &self.conv2.weights,
            &self.conv3.weights,
            &self.fc1.weights,
            &self.fc1.bias,
            &self.fc2.weights,
            &self.fc2.bias,
        ]
    }

    /// Sum of squared weights, biases excluded; the quantity the L2 penalty
    /// multiplies.
    pub(crate) fn weight_square_sum(&self) -> f64 {
        let sq = |v: &[f64]| v.iter().map(|w| w * w).sum::<f64>();
        sq(&self.conv1.weights)
            + sq(&self.conv2.weights)
            + sq(&self.conv3.weights)
            + sq(&self.fc1.weights)
            + sq(&self.fc2.weights)
    }
}

/// Per-layer learnable parameter counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParameterCounts {
    pub conv1: usize,
    pub conv2: usize,
    pub conv3: usize,
    pub fc1: usize,
    pub fc2: usize,
    pub total: usize,
}

pub fn count_parameters(net: &KnockNet) -> ParameterCounts {
    let conv1 = net.conv1.parameter_count();
    let conv2 = net.conv2.parameter_count();
    let conv3 = net.conv3.parameter_count();
    let fc1 = net.fc1.parameter_count();
    let fc2 = net.fc2.parameter_count();
    ParameterCounts { conv1, conv2, conv3, fc1, fc2, total: conv1 + conv2 + conv3 + fc1 + fc2 }
}

/// Runs one window through the network. The result is clamped to stay
/// strictly inside (0, 1) even when the sigmoid saturates in f64.
pub fn forward(net: &KnockNet, window: &AnalysisWindow) -> Result<f64> {
    if window.samples.len() != net.input_length {
        return Err(KnockError::Shape(format!(
            "window has {} samples, network expects {}",
            window.samples.len(),
            net.input_length
        )));
    }
    let trace = ops::forward_batch(net, &[window.samples.as_slice()]);
    Ok(trace.probabilities[0])
}

/// Probability, binary decision, and intensity class for one window.
///
/// The binary boundary is inclusive on the knocking side: p = 0.5 is
/// knocking, matching the class map where 0.5 opens class 3.
pub fn classify(net: &KnockNet, window: &AnalysisWindow) -> Result<(f64, BinaryLabel, u8)> {
    let p = forward(net, window)?;
    let binary = if p >= 0.5 { BinaryLabel::Knocking } else { BinaryLabel::Normal };
    Ok((p, binary, probability_to_class(p)?))
}

/// Mean binary cross-entropy over a batch plus the L2 weight penalty.
///
/// Targets may be any value in [0, 1]; fractional vote shares are valid
/// cross-entropy targets. Probabilities are clamped to `[1e-7, 1 - 1e-7]`
/// before the logs.
pub fn loss(probabilities: &[f64], scaled_labels: &[f64], net: &KnockNet, l2_penalty: f64) -> Result<f64> {
    if probabilities.len() != scaled_labels.len() {
        return Err(KnockError::Shape(format!(
            "{} probabilities vs {} labels",
            probabilities.len(),
            scaled_labels.len()
        )));
    }
    if probabilities.is_empty() {
        return Err(KnockError::Domain("loss over an empty batch".to_string()));
    }
    for &y in scaled_labels {
        if !(0.0..=1.0).contains(&y) {
            return Err(KnockError::Domain(format!("label {y} outside [0, 1]")));
        }
    }
    let eps = 1e-7;
    let bce: f64 = probabilities
        .iter()
        .zip(scaled_labels)
        .map(|(&p, &y)| {
            let p = p.clamp(eps, 1.0 - eps);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / probabilities.len() as f64;
    Ok(bce + l2_penalty * net.weight_square_sum())
}

/// Gradients of [`loss`] with respect to every parameter, computed by
/// reverse-mode differentiation of the recorded forward pass.
pub fn backward(
    net: &KnockNet,
    windows: &[&AnalysisWindow],
    scaled_labels: &[f64],
    l2_penalty: f64,
) -> Result<Gradients> {
    if windows.len() != scaled_labels.len() {
        return Err(KnockError::Shape(format!(
            "{} windows vs {} labels",
            windows.len(),
            scaled_labels.len()
        )));
    }
    if windows.is_empty() {
        return Err(KnockError::Domain("backward over an empty batch".to_string()));
    }
    for w in windows {
        if w.samples.len() != net.input_length {
            return Err(KnockError::Shape(format!(
                "window has {} samples, network expects {}",
                w.samples.len(),
                net.input_length
            )));
        }
    }
    for &y in scaled_labels {
        if !(0.0..=1.0).contains(&y) {
            return Err(KnockError::Domain(format!("label {y} outside [0, 1]")));
        }
    }
    let inputs: Vec<&[f64]> = windows.iter().map(|w| w.samples.as_slice()).collect();
    let trace = ops::forward_batch(net, &inputs);
    Ok(ops::backward_batch(net, &trace, scaled_labels, l2_penalty))
}
