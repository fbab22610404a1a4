//! Minibatch training with adaptive moment estimation and early stopping.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{loss, ops, Gradients, KnockNet};
use crate::dataset::{BinaryLabel, LabeledCycle};
use crate::error::{KnockError, Result};

/// Optimizer and stopping configuration. The defaults are the training recipe
/// used throughout: BCE + L2 1e-4, Adam-style moments at canonical betas,
/// batch 64, at most 200 epochs.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub l2_penalty: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Epochs without improvement (or with monotone divergence) tolerated
    /// before stopping.
    pub patience: usize,
    /// Minimum test-accuracy gain that counts as an improvement.
    pub plateau_tolerance: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 64,
            max_epochs: 200,
            l2_penalty: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            patience: 15,
            plateau_tolerance: 1e-4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("epsilon", self.epsilon),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(KnockError::Domain(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(KnockError::Domain(format!("{name} must be in [0, 1), got {v}")));
            }
        }
        if self.l2_penalty < 0.0 || !self.l2_penalty.is_finite() {
            return Err(KnockError::Domain(format!(
                "l2_penalty must be non-negative, got {}",
                self.l2_penalty
            )));
        }
        if self.plateau_tolerance < 0.0 || !self.plateau_tolerance.is_finite() {
            return Err(KnockError::Domain(format!(
                "plateau_tolerance must be non-negative, got {}",
                self.plateau_tolerance
            )));
        }
        if self.batch_size == 0 {
            return Err(KnockError::Domain("batch_size must be at least 1".to_string()));
        }
        if self.patience == 0 {
            return Err(KnockError::Domain("patience must be at least 1".to_string()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    /// Test accuracy stopped improving.
    Plateau,
    /// The train/test gap grew monotonically while test accuracy fell.
    Divergence,
    MaxEpochs,
}

impl std::fmt::Display for StopReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StopReason::Plateau => f.write_str("plateau"),
            StopReason::Divergence => f.write_str("divergence"),
            StopReason::MaxEpochs => f.write_str("max_epochs"),
        }
    }
}

/// Epoch-by-epoch training record.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean optimized loss (BCE + L2) over the epoch's batches.
    pub train_loss: Vec<f64>,
    pub train_accuracy: Vec<f64>,
    pub test_accuracy: Vec<f64>,
    /// Number of completed epochs.
    pub stop_epoch: usize,
    pub stop_reason: StopReason,
    /// Epoch whose snapshot is returned; 0 means the untrained net.
    pub best_epoch: usize,
    pub best_test_accuracy: f64,
}

struct AdamState {
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    fn new(net: &KnockNet) -> Self {
        let shapes: Vec<Vec<f64>> = net.param_arrays().iter().map(|a| vec![0.0; a.len()]).collect();
        AdamState { t: 0, m: shapes.clone(), v: shapes }
    }

    fn step(&mut self, net: &mut KnockNet, grads: &Gradients, config: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - config.beta1.powi(self.t as i32);
        let bc2 = 1.0 - config.beta2.powi(self.t as i32);
        let arrays = grads.arrays();
        for (ai, param) in net.param_arrays_mut().into_iter().enumerate() {
            let g = arrays[ai];
            let m = &mut self.m[ai];
            let v = &mut self.v[ai];
            for i in 0..param.len() {
                m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g[i];
                v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                param[i] -= config.learning_rate * mhat / (vhat.sqrt() + config.epsilon);
            }
        }
    }
}

fn check_set(net: &KnockNet, set: &[LabeledCycle], name: &str) -> Result<()> {
    if set.is_empty() {
        return Err(KnockError::Domain(format!("{name} set is empty")));
    }
    for c in set {
        if c.window.samples.len() != net.input_length {
            return Err(KnockError::Shape(format!(
                "cycle {:?} window has {} samples, network expects {}",
                c.cycle_id,
                c.window.samples.len(),
                net.input_length
            )));
        }
    }
    Ok(())
}

fn binary_accuracy_from_probs(probs: &[f64], labels: &[BinaryLabel]) -> f64 {
    let correct = probs
        .iter()
        .zip(labels)
        .filter(|(&p, &l)| (p >= 0.5) == (l == BinaryLabel::Knocking))
        .count();
    correct as f64 / labels.len() as f64
}

/// Detects `patience` consecutive epochs in which the train/test accuracy gap
/// strictly grew while test accuracy strictly fell.
fn diverging(history: &VecDeque<(f64, f64)>, patience: usize) -> bool {
    if history.len() < patience + 1 {
        return false;
    }
    history.iter().zip(history.iter().skip(1)).all(|(a, b)| b.0 > a.0 && b.1 < a.1)
}

/// Trains with per-epoch reshuffling and returns the snapshot with the best
/// test accuracy seen, together with the epoch record.
///
/// Stopping: plateau (no test-accuracy improvement beyond the tolerance for
/// `patience` epochs), divergence (see [`StopReason::Divergence`]), or the
/// epoch budget. Deterministic for a fixed seed and fixed inputs.
pub fn train(
    net: KnockNet,
    train_set: &[LabeledCycle],
    test_set: &[LabeledCycle],
    config: &TrainConfig,
) -> Result<(KnockNet, TrainReport)> {
    config.validate()?;
    check_set(&net, train_set, "train")?;
    check_set(&net, test_set, "test")?;

    let train_inputs: Vec<&[f64]> = train_set.iter().map(|c| c.window.samples.as_slice()).collect();
    let train_targets: Vec<f64> = train_set.iter().map(|c| c.scaled_label).collect();
    let train_binary: Vec<BinaryLabel> = train_set.iter().map(|c| c.binary_label).collect();
    let test_inputs: Vec<&[f64]> = test_set.iter().map(|c| c.window.samples.as_slice()).collect();
    let test_binary: Vec<BinaryLabel> = test_set.iter().map(|c| c.binary_label).collect();
    let knocking = |label: BinaryLabel| label == BinaryLabel::Knocking;

    let mut net = net;
    let mut adam = AdamState::new(&net);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let eval = |net: &KnockNet, inputs: &[&[f64]], labels: &[BinaryLabel]| {
        let probs = ops::predict(net, inputs, config.batch_size);
        binary_accuracy_from_probs(&probs, labels)
    };

    // The untrained net is the baseline snapshot; an epoch must beat it.
    let mut best_net = net.clone();
    let mut best_acc = eval(&net, &test_inputs, &test_binary);
    let mut best_epoch = 0;

    let mut report = TrainReport {
        train_loss: Vec::new(),
        train_accuracy: Vec::new(),
        test_accuracy: Vec::new(),
        stop_epoch: 0,
        stop_reason: StopReason::MaxEpochs,
        best_epoch: 0,
        best_test_accuracy: best_acc,
    };

    let mut plateau_best = f64::NEG_INFINITY;
    let mut epochs_since_gain = 0usize;
    let mut gap_history: VecDeque<(f64, f64)> = VecDeque::new();

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);

        // Train accuracy is the running accuracy of the training-pass
        // forwards themselves; no second sweep over the train set.
        let mut loss_acc = 0.0;
        let mut correct = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let inputs: Vec<&[f64]> = chunk.iter().map(|&i| train_inputs[i]).collect();
            let targets: Vec<f64> = chunk.iter().map(|&i| train_targets[i]).collect();
            let trace = ops::forward_batch(&net, &inputs);
            let batch_loss = loss(&trace.probabilities, &targets, &net, config.l2_penalty)?;
            loss_acc += batch_loss * chunk.len() as f64;
            correct += chunk
                .iter()
                .zip(&trace.probabilities)
                .filter(|(&i, &p)| (p >= 0.5) == knocking(train_binary[i]))
                .count();
            let grads = ops::backward_batch(&net, &trace, &targets, config.l2_penalty);
            adam.step(&mut net, &grads, config);
        }

        let train_loss = loss_acc / train_set.len() as f64;
        let train_acc = correct as f64 / train_set.len() as f64;
        let test_acc = eval(&net, &test_inputs, &test_binary);
        report.train_loss.push(train_loss);
        report.train_accuracy.push(train_acc);
        report.test_accuracy.push(test_acc);
        report.stop_epoch = epoch;

        if test_acc > best_acc {
            best_acc = test_acc;
            best_net = net.clone();
            best_epoch = epoch;
        }

        if test_acc > plateau_best + config.plateau_tolerance {
            plateau_best = test_acc;
            epochs_since_gain = 0;
        } else {
            epochs_since_gain += 1;
        }

        gap_history.push_back((train_acc - test_acc, test_acc));
        if gap_history.len() > config.patience + 1 {
            gap_history.pop_front();
        }

        if epochs_since_gain >= config.patience {
            report.stop_reason = StopReason::Plateau;
            break;
        }
        if diverging(&gap_history, config.patience) {
            report.stop_reason = StopReason::Divergence;
            break;
        }
    }

    report.best_epoch = best_epoch;
    report.best_test_accuracy = best_acc;
    Ok((best_net, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cnn::{build_model, forward, ConvMode};
    use crate::dataset::ExpertVotes;
    use crate::signal::AnalysisWindow;

    /// Separable toy data: ringing windows (label 1) vs flat-with-drift
    /// windows (label 0), both deterministic.
    fn toy_set(n: usize, offset: usize) -> Vec<LabeledCycle> {
        let l = 60;
        (0..n)
            .map(|i| {
                let j = i + offset;
                let knocking = j.is_multiple_of(2);
                let samples: Vec<f64> = (0..l)
                    .map(|t| {
                        let base = 20.0 + 0.01 * t as f64;
                        if knocking {
                            base + 2.0 * ((t as f64 * 0.9) + j as f64).sin()
                        } else {
                            base + 0.02 * ((t + j) % 5) as f64
                        }
                    })
                    .collect();
                let votes =
                    if knocking { ExpertVotes([1; 5]) } else { ExpertVotes([0; 5]) };
                LabeledCycle::new(
                    format!("toy-{j}"),
                    AnalysisWindow { start_deg: 0.0, resolution_deg: 0.1, samples },
                    votes,
                    "toy",
                )
            })
            .collect()
    }

    fn quick_config() -> TrainConfig {
        TrainConfig { batch_size: 8, max_epochs: 50, seed: 1, ..TrainConfig::default() }
    }

    #[test]
    fn learns_the_separable_toy_problem() {
        let net = build_model(3, 60, ConvMode::SharedKernel, 5).unwrap();
        let train_set = toy_set(40, 0);
        let test_set = toy_set(20, 40);
        let (trained, report) = train(net, &train_set, &test_set, &quick_config()).unwrap();
        assert_eq!(
            report.best_test_accuracy, 1.0,
            "separable data should reach perfect accuracy, report: {:?}",
            report.test_accuracy
        );
        // The returned snapshot is the best one.
        let probs: Vec<f64> =
            test_set.iter().map(|c| forward(&trained, &c.window).unwrap()).collect();
        let labels: Vec<BinaryLabel> = test_set.iter().map(|c| c.binary_label).collect();
        assert_eq!(binary_accuracy_from_probs(&probs, &labels), 1.0);
    }

    #[test]
    fn fifty_steps_on_one_batch_reduce_the_loss() {
        let mut net = build_model(3, 60, ConvMode::SharedKernel, 2).unwrap();
        let set = toy_set(32, 0);
        let inputs: Vec<&[f64]> = set.iter().map(|c| c.window.samples.as_slice()).collect();
        let targets: Vec<f64> = set.iter().map(|c| c.scaled_label).collect();
        let config = TrainConfig::default();

        let initial = {
            let trace = ops::forward_batch(&net, &inputs);
            loss(&trace.probabilities, &targets, &net, config.l2_penalty).unwrap()
        };
        let mut adam = AdamState::new(&net);
        for _ in 0..50 {
            let trace = ops::forward_batch(&net, &inputs);
            let grads = ops::backward_batch(&net, &trace, &targets, config.l2_penalty);
            adam.step(&mut net, &grads, &config);
        }
        let trace = ops::forward_batch(&net, &inputs);
        let after = loss(&trace.probabilities, &targets, &net, config.l2_penalty).unwrap();
        assert!(after < initial, "loss {initial} -> {after}");
    }

    #[test]
    fn training_is_deterministic() {
        let train_set = toy_set(24, 0);
        let test_set = toy_set(12, 24);
        let config = TrainConfig { max_epochs: 6, batch_size: 8, seed: 3, ..TrainConfig::default() };
        let run = || {
            let net = build_model(3, 60, ConvMode::SharedKernel, 9).unwrap();
            train(net, &train_set, &test_set, &config).unwrap()
        };
        let (net_a, report_a) = run();
        let (net_b, report_b) = run();
        assert_eq!(report_a, report_b, "reports must match bitwise");
        assert_eq!(net_a.conv1.weights, net_b.conv1.weights);
        assert_eq!(net_a.fc1.weights, net_b.fc1.weights);
        assert_eq!(net_a.fc2.bias, net_b.fc2.bias);
    }

    #[test]
    fn zero_epoch_budget_returns_the_initial_net() {
        let net = build_model(3, 60, ConvMode::SharedKernel, 4).unwrap();
        let initial_weights = net.conv1.weights.clone();
        let set = toy_set(8, 0);
        let config = TrainConfig { max_epochs: 0, ..quick_config() };
        let (out, report) = train(net, &set, &set, &config).unwrap();
        assert_eq!(out.conv1.weights, initial_weights);
        assert_eq!(report.stop_epoch, 0);
        assert_eq!(report.stop_reason, StopReason::MaxEpochs);
        assert!(report.train_loss.is_empty());
    }

    #[test]
    fn empty_sets_are_config_errors() {
        let net = build_model(3, 60, ConvMode::SharedKernel, 4).unwrap();
        let set = toy_set(8, 0);
        assert!(train(net.clone(), &[], &set, &quick_config()).is_err());
        assert!(train(net, &set, &[], &quick_config()).is_err());
    }

    #[test]
    fn plateau_stops_early_once_accuracy_saturates() {
        // All-normal labels: the net predicts the majority class almost
        // immediately and accuracy cannot improve further.
        let set: Vec<LabeledCycle> = toy_set(24, 0)
            .into_iter()
            .map(|c| LabeledCycle::new(c.cycle_id, c.window, ExpertVotes([0; 5]), "toy"))
            .collect();
        let net = build_model(3, 60, ConvMode::SharedKernel, 5).unwrap();
        let config = TrainConfig { patience: 3, max_epochs: 60, batch_size: 8, seed: 2, ..TrainConfig::default() };
        let (_, report) = train(net, &set, &set, &config).unwrap();
        assert_eq!(report.stop_reason, StopReason::Plateau);
        assert!(report.stop_epoch <= 10, "stopped at {}", report.stop_epoch);
        assert_eq!(report.best_test_accuracy, 1.0);
    }

    #[test]
    fn divergence_predicate_requires_strict_monotone_window() {
        let mk = |pairs: &[(f64, f64)]| pairs.iter().copied().collect::<VecDeque<_>>();
        // Gap rising and test falling across 4 points = 3 epochs of patience.
        assert!(diverging(&mk(&[(0.1, 0.9), (0.2, 0.8), (0.3, 0.7), (0.4, 0.6)]), 3));
        // Too short.
        assert!(!diverging(&mk(&[(0.1, 0.9), (0.2, 0.8), (0.3, 0.7)]), 3));
        // Gap dips once.
        assert!(!diverging(&mk(&[(0.1, 0.9), (0.3, 0.8), (0.2, 0.7), (0.4, 0.6)]), 3));
        // Test accuracy recovers once.
        assert!(!diverging(&mk(&[(0.1, 0.9), (0.2, 0.92), (0.3, 0.7), (0.4, 0.6)]), 3));
    }

    #[test]
    fn config_validation_rejects_bad_fields() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { learning_rate: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { patience: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { beta1: 1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { l2_penalty: -1e-4, ..Default::default() }.validate().is_err());
    }
}
