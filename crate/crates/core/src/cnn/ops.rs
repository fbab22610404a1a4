//! Batched forward and reverse passes.
//!
//! Activations are flat row-major tensors `(sample, channel, position)` so
//! the hot inner loops always run over contiguous memory. The forward pass
//! records exactly the intermediates the reverse pass needs: padded conv
//! inputs (summed over channels in shared-kernel mode), post-rectifier
//! activations for the masks, and the argmax position of every pool window.

use super::{ConvMode, KnockNet, CONV_PADDING};

const PAD: usize = CONV_PADDING;
/// Forward probabilities stay this far inside (0, 1) even when the sigmoid
/// saturates.
const P_CLAMP: f64 = 1e-15;

/// Gradient of the loss for every parameter array, in the same order and
/// shapes as the network's own arrays.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub conv1: Vec<f64>,
    pub conv2: Vec<f64>,
    pub conv3: Vec<f64>,
    pub fc1_weights: Vec<f64>,
    pub fc1_bias: Vec<f64>,
    pub fc2_weights: Vec<f64>,
    pub fc2_bias: Vec<f64>,
}

impl Gradients {
    pub(crate) fn zeros_like(net: &KnockNet) -> Self {
        Gradients {
            conv1: vec![0.0; net.conv1.weights.len()],
            conv2: vec![0.0; net.conv2.weights.len()],
            conv3: vec![0.0; net.conv3.weights.len()],
            fc1_weights: vec![0.0; net.fc1.weights.len()],
            fc1_bias: vec![0.0; net.fc1.bias.len()],
            fc2_weights: vec![0.0; net.fc2.weights.len()],
            fc2_bias: vec![0.0; net.fc2.bias.len()],
        }
    }

    /// Arrays in the declaration order used everywhere else.
    pub fn arrays(&self) -> [&Vec<f64>; 7] {
        [
            &self.conv1,
            &self.conv2,
            &self.conv3,
            &self.fc1_weights,
            &self.fc1_bias,
            &self.fc2_weights,
            &self.fc2_bias,
        ]
    }
}

pub(crate) struct Trace {
    pub n: usize,
    /// Padded conv inputs: shared mode stores the channel sum `(n, 1, l+10)`,
    /// cross mode all channels `(n, c_in, l+10)`.
    pad1: Vec<f64>,
    pad2: Vec<f64>,
    pad3: Vec<f64>,
    /// Post-rectifier conv outputs.
    act1: Vec<f64>,
    act2: Vec<f64>,
    act3: Vec<f64>,
    /// Argmax position (within the row) for every pool output.
    idx1: Vec<u32>,
    idx2: Vec<u32>,
    idx3: Vec<u32>,
    /// Pooled conv3 output `(n, 16, p3)`; flattening is a no-op on this
    /// layout, each sample's channels are already contiguous.
    pooled3: Vec<f64>,
    /// Post-rectifier fc1 output `(n, h)`.
    act_fc1: Vec<f64>,
    pub probabilities: Vec<f64>,
}

impl Trace {
    #[cfg(test)]
    pub(crate) fn pooled3_row(&self, sample: usize, channel: usize) -> Vec<f64> {
        let p3 = self.pooled3.len() / (self.n * 16);
        self.pooled3[(sample * 16 + channel) * p3..][..p3].to_vec()
    }
}

/// Copies `x` of shape `(n, c, l)` into zero-padded rows, summing channels
/// when `sum` is set (output channel count 1) or keeping them separate.
fn pad_rows(x: &[f64], n: usize, c: usize, l: usize, sum: bool) -> Vec<f64> {
    let lp = l + 2 * PAD;
    let c_out = if sum { 1 } else { c };
    let mut out = vec![0.0; n * c_out * lp];
    for bi in 0..n {
        for ci in 0..c {
            let src = &x[(bi * c + ci) * l..][..l];
            let dst_row = if sum { bi } else { bi * c + ci };
            let dst = &mut out[dst_row * lp + PAD..][..l];
            if sum {
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            } else {
                dst.copy_from_slice(src);
            }
        }
    }
    out
}

/// Convolution over pre-padded input. `pad` has `c_pad` rows per sample
/// (1 for shared mode, `c_in` for cross mode).
#[allow(clippy::too_many_arguments)]
fn conv_forward(
    mode: ConvMode,
    pad: &[f64],
    n: usize,
    c_pad: usize,
    lp: usize,
    weights: &[f64],
    k: usize,
    c_out: usize,
) -> Vec<f64> {
    let l_out = lp - k + 1;
    let mut out = vec![0.0; n * c_out * l_out];
    for bi in 0..n {
        for co in 0..c_out {
            let o = &mut out[(bi * c_out + co) * l_out..][..l_out];
            match mode {
                ConvMode::SharedKernel => {
                    let s = &pad[bi * lp..][..lp];
                    for j in 0..k {
                        let w = weights[co * k + j];
                        for (i, oi) in o.iter_mut().enumerate() {
                            *oi += w * s[i + j];
                        }
                    }
                }
                ConvMode::CrossChannel => {
                    for a in 0..c_pad {
                        let s = &pad[(bi * c_pad + a) * lp..][..lp];
                        for j in 0..k {
                            let w = weights[(co * c_pad + a) * k + j];
                            for (i, oi) in o.iter_mut().enumerate() {
                                *oi += w * s[i + j];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn relu_in_place(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

/// Size-2 stride-2 max pool over every row; ties pick the first position.
pub(crate) fn max_pool(x: &[f64], rows: usize, l: usize) -> (Vec<f64>, Vec<u32>) {
    let lp = l / 2;
    let mut out = vec![0.0; rows * lp];
    let mut idx = vec![0u32; rows * lp];
    for r in 0..rows {
        let src = &x[r * l..][..l];
        for i in 0..lp {
            let (a, b) = (src[2 * i], src[2 * i + 1]);
            // Strict comparison keeps the first index on ties.
            if b > a {
                out[r * lp + i] = b;
                idx[r * lp + i] = (2 * i + 1) as u32;
            } else {
                out[r * lp + i] = a;
                idx[r * lp + i] = (2 * i) as u32;
            }
        }
    }
    (out, idx)
}

fn dense_forward(x: &[f64], n: usize, w: &[f64], bias: &[f64], n_in: usize, n_out: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n_out];
    for bi in 0..n {
        let xi = &x[bi * n_in..][..n_in];
        for o in 0..n_out {
            let row = &w[o * n_in..][..n_in];
            let mut acc = bias[o];
            for (a, b) in row.iter().zip(xi) {
                acc += a * b;
            }
            out[bi * n_out + o] = acc;
        }
    }
    out
}

pub(crate) fn forward_batch(net: &KnockNet, inputs: &[&[f64]]) -> Trace {
    let n = inputs.len();
    let l0 = net.input_length;
    let plan = net.shapes();
    let shared = net.mode == ConvMode::SharedKernel;

    let mut x0 = vec![0.0; n * l0];
    for (bi, w) in inputs.iter().enumerate() {
        x0[bi * l0..][..l0].copy_from_slice(w);
    }

    // Stage 1. Input has one channel, so summed and per-channel padding agree.
    let pad1 = pad_rows(&x0, n, 1, l0, shared);
    let mut act1 = conv_forward(net.mode, &pad1, n, 1, l0 + 2 * PAD, &net.conv1.weights, net.conv1.kernel_size, 4);
    relu_in_place(&mut act1);
    let (pool1, idx1) = max_pool(&act1, n * 4, plan.conv1);

    // Stage 2.
    let pad2 = pad_rows(&pool1, n, 4, plan.pool1, shared);
    let mut act2 = conv_forward(
        net.mode,
        &pad2,
        n,
        if shared { 1 } else { 4 },
        plan.pool1 + 2 * PAD,
        &net.conv2.weights,
        net.conv2.kernel_size,
        8,
    );
    relu_in_place(&mut act2);
    let (pool2, idx2) = max_pool(&act2, n * 8, plan.conv2);

    // Stage 3.
    let pad3 = pad_rows(&pool2, n, 8, plan.pool2, shared);
    let mut act3 = conv_forward(
        net.mode,
        &pad3,
        n,
        if shared { 1 } else { 8 },
        plan.pool2 + 2 * PAD,
        &net.conv3.weights,
        net.conv3.kernel_size,
        16,
    );
    relu_in_place(&mut act3);
    let (pooled3, idx3) = max_pool(&act3, n * 16, plan.conv3);

    // Dense head.
    let mut act_fc1 = dense_forward(&pooled3, n, &net.fc1.weights, &net.fc1.bias, plan.flatten, net.fc1.out_dim);
    relu_in_place(&mut act_fc1);
    let z2 = dense_forward(&act_fc1, n, &net.fc2.weights, &net.fc2.bias, net.fc1.out_dim, 1);
    let probabilities: Vec<f64> = z2
        .iter()
        .map(|&z| (1.0 / (1.0 + (-z).exp())).clamp(P_CLAMP, 1.0 - P_CLAMP))
        .collect();

    Trace { n, pad1, pad2, pad3, act1, act2, act3, idx1, idx2, idx3, pooled3, act_fc1, probabilities }
}

/// Routes pooled gradients back to the argmax positions.
fn unpool(dpooled: &[f64], idx: &[u32], rows: usize, l_in: usize) -> Vec<f64> {
    let lp = dpooled.len() / rows;
    let mut out = vec![0.0; rows * l_in];
    for r in 0..rows {
        for i in 0..lp {
            out[r * l_in + idx[r * lp + i] as usize] += dpooled[r * lp + i];
        }
    }
    out
}

/// Zeroes gradient where the recorded post-rectifier activation is zero.
fn relu_mask(d: &mut [f64], act: &[f64]) {
    for (g, &a) in d.iter_mut().zip(act) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Weight and input gradients of one convolution stage. `dinput` is filled
/// with `(n, c_in, l_in)` gradients when the stage has an upstream layer.
#[allow(clippy::too_many_arguments)]
fn conv_backward(
    mode: ConvMode,
    weights: &[f64],
    k: usize,
    c_in: usize,
    c_out: usize,
    pad: &[f64],
    lp: usize,
    dout: &[f64],
    n: usize,
    dw: &mut [f64],
    mut dinput: Option<&mut [f64]>,
) {
    let l_out = lp - k + 1;
    let l_in = lp - 2 * PAD;
    let c_pad = if mode == ConvMode::SharedKernel { 1 } else { c_in };
    // Gradient w.r.t. the padded input, reused per sample.
    let mut dpad = vec![0.0; c_pad * lp];
    for bi in 0..n {
        dpad.iter_mut().for_each(|x| *x = 0.0);
        for co in 0..c_out {
            let g = &dout[(bi * c_out + co) * l_out..][..l_out];
            for a in 0..c_pad {
                let s = &pad[(bi * c_pad + a) * lp..][..lp];
                let w_base = match mode {
                    ConvMode::SharedKernel => co * k,
                    ConvMode::CrossChannel => (co * c_in + a) * k,
                };
                let dp = &mut dpad[a * lp..][..lp];
                for j in 0..k {
                    let mut acc = 0.0;
                    let w = weights[w_base + j];
                    for (i, &gi) in g.iter().enumerate() {
                        acc += gi * s[i + j];
                        dp[i + j] += w * gi;
                    }
                    dw[w_base + j] += acc;
                }
            }
        }
        if let Some(dinput) = dinput.as_deref_mut() {
            for a in 0..c_in {
                // Shared mode: the channel sum hands every input channel the
                // same gradient.
                let src_row = if mode == ConvMode::SharedKernel { 0 } else { a };
                let src = &dpad[src_row * lp + PAD..][..l_in];
                dinput[(bi * c_in + a) * l_in..][..l_in].copy_from_slice(src);
            }
        }
    }
}

/// Reverse pass for the mean BCE + L2 loss over the traced batch.
pub(crate) fn backward_batch(
    net: &KnockNet,
    trace: &Trace,
    targets: &[f64],
    l2_penalty: f64,
) -> Gradients {
    let n = trace.n;
    let plan = net.shapes();
    let h = net.fc1.out_dim;
    let flatten = net.fc1.in_dim;
    let mut g = Gradients::zeros_like(net);

    // Sigmoid + clamped-log cross-entropy collapse to p - y.
    let dz: Vec<f64> =
        (0..n).map(|bi| (trace.probabilities[bi] - targets[bi]) / n as f64).collect();

    // fc2.
    g.fc2_bias[0] = dz.iter().sum();
    let mut d1 = vec![0.0; n * h];
    for bi in 0..n {
        let a1 = &trace.act_fc1[bi * h..][..h];
        let d = dz[bi];
        let row = &mut d1[bi * h..][..h];
        for j in 0..h {
            g.fc2_weights[j] += d * a1[j];
            row[j] = d * net.fc2.weights[j];
        }
    }
    relu_mask(&mut d1, &trace.act_fc1);

    // fc1.
    let mut dflat = vec![0.0; n * flatten];
    for bi in 0..n {
        let x = &trace.pooled3[bi * flatten..][..flatten];
        let dx = &mut dflat[bi * flatten..][..flatten];
        for o in 0..h {
            let d = d1[bi * h + o];
            if d == 0.0 {
                continue;
            }
            g.fc1_bias[o] += d;
            let wrow = &net.fc1.weights[o * flatten..][..flatten];
            let grow = &mut g.fc1_weights[o * flatten..][..flatten];
            for j in 0..flatten {
                grow[j] += d * x[j];
                dx[j] += d * wrow[j];
            }
        }
    }

    // Stage 3.
    let mut dact3 = unpool(&dflat, &trace.idx3, n * 16, plan.conv3);
    relu_mask(&mut dact3, &trace.act3);
    let mut dpool2 = vec![0.0; n * 8 * plan.pool2];
    conv_backward(
        net.mode,
        &net.conv3.weights,
        net.conv3.kernel_size,
        8,
        16,
        &trace.pad3,
        plan.pool2 + 2 * PAD,
        &dact3,
        n,
        &mut g.conv3,
        Some(&mut dpool2),
    );

    // Stage 2.
    let mut dact2 = unpool(&dpool2, &trace.idx2, n * 8, plan.conv2);
    relu_mask(&mut dact2, &trace.act2);
    let mut dpool1 = vec![0.0; n * 4 * plan.pool1];
    conv_backward(
        net.mode,
        &net.conv2.weights,
        net.conv2.kernel_size,
        4,
        8,
        &trace.pad2,
        plan.pool1 + 2 * PAD,
        &dact2,
        n,
        &mut g.conv2,
        Some(&mut dpool1),
    );

    // Stage 1; no upstream gradient needed.
    let mut dact1 = unpool(&dpool1, &trace.idx1, n * 4, plan.conv1);
    relu_mask(&mut dact1, &trace.act1);
    conv_backward(
        net.mode,
        &net.conv1.weights,
        net.conv1.kernel_size,
        1,
        4,
        &trace.pad1,
        net.input_length + 2 * PAD,
        &dact1,
        n,
        &mut g.conv1,
        None,
    );

    // L2 acts on weights only, never biases.
    let reg = 2.0 * l2_penalty;
    for (grad, w) in [
        (&mut g.conv1, &net.conv1.weights),
        (&mut g.conv2, &net.conv2.weights),
        (&mut g.conv3, &net.conv3.weights),
        (&mut g.fc1_weights, &net.fc1.weights),
        (&mut g.fc2_weights, &net.fc2.weights),
    ] {
        for (gi, wi) in grad.iter_mut().zip(w.iter()) {
            *gi += reg * wi;
        }
    }
    g
}

/// Probabilities for a set of windows, batched internally.
pub(crate) fn predict(net: &KnockNet, inputs: &[&[f64]], batch: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(batch.max(1)) {
        out.extend(forward_batch(net, chunk).probabilities);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cnn::{build_model, loss};

    fn toy_inputs(n: usize, l: usize) -> Vec<Vec<f64>> {
        // Deterministic smooth values with both signs. Irrational strides
        // keep activations away from exact pool ties and rectifier zeros,
        // where finite differences would straddle a kink.
        (0..n)
            .map(|bi| {
                (0..l)
                    .map(|i| 1.3 * (0.731 * i as f64 + 1.7 * bi as f64 + 0.41).sin() + 0.2)
                    .collect()
            })
            .collect()
    }

    fn batch_loss(net: &KnockNet, inputs: &[&[f64]], targets: &[f64], l2: f64) -> f64 {
        let trace = forward_batch(net, inputs);
        loss(&trace.probabilities, targets, net, l2).unwrap()
    }

    #[test]
    fn pool_takes_first_index_on_ties() {
        let x = [2.0, 2.0, 1.0, 3.0, -1.0, -1.0];
        let (out, idx) = max_pool(&x, 1, 6);
        assert_eq!(out, vec![2.0, 3.0, -1.0]);
        assert_eq!(idx, vec![0, 3, 4]);
    }

    #[test]
    #[allow(clippy::needless_range_loop)] // index loop mutates one array while reading another
    fn gradients_match_central_differences() {
        // Every parameter of a small net, both conv modes, against central
        // finite differences of the full loss.
        for mode in [ConvMode::SharedKernel, ConvMode::CrossChannel] {
            let mut net = build_model(3, 20, mode, 7).unwrap();
            let inputs_owned = toy_inputs(4, 20);
            let inputs: Vec<&[f64]> = inputs_owned.iter().map(|v| v.as_slice()).collect();
            let targets = [0.0, 1.0, 0.4, 0.8];
            let l2 = 0.01;

            let trace = forward_batch(&net, &inputs);
            let grads = backward_batch(&net, &trace, &targets, l2);
            let analytic: Vec<Vec<f64>> = grads.arrays().iter().map(|a| (*a).clone()).collect();

            let h = 1e-4;
            for (arr_i, n_params) in
                analytic.iter().map(|a| a.len()).enumerate().collect::<Vec<_>>()
            {
                for p in 0..n_params {
                    let orig = net.param_arrays()[arr_i][p];
                    net.param_arrays_mut()[arr_i][p] = orig + h;
                    let up = batch_loss(&net, &inputs, &targets, l2);
                    net.param_arrays_mut()[arr_i][p] = orig - h;
                    let down = batch_loss(&net, &inputs, &targets, l2);
                    net.param_arrays_mut()[arr_i][p] = orig;
                    let fd = (up - down) / (2.0 * h);
                    let g = analytic[arr_i][p];
                    // Relative 1e-4 with an absolute floor where the finite
                    // difference itself drowns in rounding.
                    let tol = (1e-4 * g.abs().max(fd.abs())).max(1e-8);
                    assert!(
                        (g - fd).abs() <= tol,
                        "{mode:?} array {arr_i} param {p}: analytic {g} vs fd {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn zero_net_routes_gradient_only_to_output_bias() {
        let mut net = build_model(3, 20, ConvMode::SharedKernel, 0).unwrap();
        for arr in net.param_arrays_mut() {
            arr.iter_mut().for_each(|w| *w = 0.0);
        }
        let zeros = vec![vec![0.0; 20]; 3];
        let inputs: Vec<&[f64]> = zeros.iter().map(|v| v.as_slice()).collect();
        let targets = [0.0, 0.0, 0.0];
        let trace = forward_batch(&net, &inputs);
        let g = backward_batch(&net, &trace, &targets, 0.0);

        // p = 0.5 everywhere, so the composite output gradient is 0.5 and
        // only the fc2 bias can receive it; every other path is blocked by
        // zero activations or zero weights.
        assert!((g.fc2_bias[0] - 0.5).abs() < 1e-15);
        for (i, arr) in g.arrays().iter().enumerate().take(6) {
            assert!(arr.iter().all(|&x| x == 0.0), "array {i} expected all zero");
        }
    }

    #[test]
    fn doubling_l2_doubles_the_regularization_component() {
        let net = build_model(3, 20, ConvMode::SharedKernel, 3).unwrap();
        let inputs_owned = toy_inputs(2, 20);
        let inputs: Vec<&[f64]> = inputs_owned.iter().map(|v| v.as_slice()).collect();
        let targets = [1.0, 0.0];
        let trace = forward_batch(&net, &inputs);
        let g0 = backward_batch(&net, &trace, &targets, 0.0);
        let g1 = backward_batch(&net, &trace, &targets, 0.05);
        let g2 = backward_batch(&net, &trace, &targets, 0.10);

        let weights = [&net.conv1.weights, &net.conv2.weights, &net.conv3.weights];
        for (i, (a0, (a1, a2))) in g0
            .arrays()
            .iter()
            .zip(g1.arrays().iter().zip(g2.arrays().iter()))
            .enumerate()
            .take(3)
        {
            for p in 0..a0.len() {
                let r1 = a1[p] - a0[p];
                let r2 = a2[p] - a0[p];
                assert!((r2 - 2.0 * r1).abs() < 1e-12);
                assert!((r1 - 2.0 * 0.05 * weights[i][p]).abs() < 1e-12);
            }
        }
        // Biases carry no regularization.
        assert_eq!(g0.fc1_bias, g1.fc1_bias);
        assert_eq!(g0.fc2_bias, g2.fc2_bias);
    }

    #[test]
    fn predict_matches_single_forward() {
        let net = build_model(5, 64, ConvMode::SharedKernel, 11).unwrap();
        let inputs_owned = toy_inputs(7, 64);
        let inputs: Vec<&[f64]> = inputs_owned.iter().map(|v| v.as_slice()).collect();
        let batched = predict(&net, &inputs, 3);
        for (i, input) in inputs.iter().enumerate() {
            let single = forward_batch(&net, &[input]).probabilities[0];
            assert_eq!(batched[i], single, "batch boundaries must not change values");
        }
    }
}
