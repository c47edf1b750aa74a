//! Minimal dense-tensor building blocks for the two trainable models:
//! 3x3 same-padding convolutions via im2col + sgemm, 2x2 max pooling, fully
//! connected layers, softmax cross-entropy and the Adam update rule.
//!
//! Activations are stored channel-major (`[c][y][x]`) in flat `Vec<f32>`s.

use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// `c = a * b + beta * c` with `a` m×k and `b` k×n, either optionally stored
/// transposed. All buffers row-major.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_transposed: bool,
    b: &[f32],
    b_transposed: bool,
    beta: f32,
    c: &mut [f32],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above describe exactly the buffers whose lengths
    // were checked, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// He-normal initialization.
pub fn he_init<R: Rng>(rng: &mut R, fan_in: usize, len: usize) -> Vec<f32> {
    let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).expect("finite std");
    (0..len).map(|_| normal.sample(rng)).collect()
}

fn im2col(input: &[f32], channels: usize, h: usize, w: usize, cols: &mut [f32]) {
    let hw = h * w;
    for c in 0..channels {
        let plane = &input[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((c * 9) + ky * 3 + kx) * hw..((c * 9) + ky * 3 + kx + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            dst[0] = 0.0;
                            dst[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => dst.copy_from_slice(src),
                        _ => {
                            dst[..w - 1].copy_from_slice(&src[1..]);
                            dst[w - 1] = 0.0;
                        }
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f32], channels: usize, h: usize, w: usize, out: &mut [f32]) {
    let hw = h * w;
    out.fill(0.0);
    for c in 0..channels {
        let plane = &mut out[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((c * 9) + ky * 3 + kx) * hw..((c * 9) + ky * 3 + kx + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            for x in 1..w {
                                dst[x - 1] += src[x];
                            }
                        }
                        1 => {
                            for x in 0..w {
                                dst[x] += src[x];
                            }
                        }
                        _ => {
                            for x in 0..w - 1 {
                                dst[x + 1] += src[x];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 3x3 convolution, stride 1, zero padding 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3x3 {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `[out][in * 9]`
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Conv3x3 {
    pub fn new<R: Rng>(rng: &mut R, in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            weight: he_init(rng, in_channels * 9, out_channels * in_channels * 9),
            bias: vec![0.0; out_channels],
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    /// Returns the output and the im2col buffer needed for the backward pass.
    pub fn forward(&self, input: &[f32], h: usize, w: usize) -> (Vec<f32>, Vec<f32>) {
        let hw = h * w;
        let k = self.in_channels * 9;
        let mut cols = vec![0.0; k * hw];
        im2col(input, self.in_channels, h, w, &mut cols);
        let mut out = vec![0.0; self.out_channels * hw];
        gemm(self.out_channels, k, hw, &self.weight, false, &cols, false, 0.0, &mut out);
        for (o, plane) in out.chunks_mut(hw).enumerate() {
            let b = self.bias[o];
            plane.iter_mut().for_each(|v| *v += b);
        }
        (out, cols)
    }

    /// Accumulates parameter gradients and returns the input gradient when
    /// `need_input_grad` is set.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        cols: &[f32],
        grad_out: &[f32],
        h: usize,
        w: usize,
        grad_weight: &mut [f32],
        grad_bias: &mut [f32],
        need_input_grad: bool,
    ) -> Option<Vec<f32>> {
        let hw = h * w;
        let k = self.in_channels * 9;
        gemm(self.out_channels, hw, k, grad_out, false, cols, true, 1.0, grad_weight);
        for (o, plane) in grad_out.chunks(hw).enumerate() {
            grad_bias[o] += plane.iter().sum::<f32>();
        }
        if !need_input_grad {
            return None;
        }
        let mut grad_cols = vec![0.0; k * hw];
        gemm(k, self.out_channels, hw, &self.weight, true, grad_out, false, 0.0, &mut grad_cols);
        let mut grad_in = vec![0.0; self.in_channels * hw];
        col2im(&grad_cols, self.in_channels, h, w, &mut grad_in);
        Some(grad_in)
    }
}

/// Fully connected layer, `y = W x + b` with `W` stored `[out][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Dense {
    pub fn new<R: Rng>(rng: &mut R, inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weight: he_init(rng, inputs, inputs * outputs),
            bias: vec![0.0; outputs],
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn forward(&self, x: &[f32]) -> Vec<f32> {
        let mut y = self.bias.clone();
        gemm(self.outputs, self.inputs, 1, &self.weight, false, x, false, 1.0, &mut y);
        y
    }

    pub fn backward(
        &self,
        x: &[f32],
        grad_out: &[f32],
        grad_weight: &mut [f32],
        grad_bias: &mut [f32],
    ) -> Vec<f32> {
        gemm(self.outputs, 1, self.inputs, grad_out, false, x, false, 1.0, grad_weight);
        for (gb, g) in grad_bias.iter_mut().zip(grad_out) {
            *gb += g;
        }
        let mut grad_in = vec![0.0; self.inputs];
        gemm(self.inputs, self.outputs, 1, &self.weight, true, grad_out, false, 0.0, &mut grad_in);
        grad_in
    }
}

pub fn relu_inplace(x: &mut [f32]) {
    x.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Zeroes gradient entries whose forward activation was clipped by ReLU.
pub fn relu_backward(activation: &[f32], grad: &mut [f32]) {
    for (g, &a) in grad.iter_mut().zip(activation) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// 2x2 max pooling with stride 2. Returns the pooled planes and, for each
/// output cell, the flat index of the winning input cell.
pub fn maxpool2(input: &[f32], channels: usize, h: usize, w: usize) -> (Vec<f32>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; channels * oh * ow];
    let mut arg = vec![0u32; channels * oh * ow];
    for c in 0..channels {
        let base = c * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let mut best = base + (2 * y) * w + 2 * x;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * y + dy) * w + 2 * x + dx;
                    if input[i] > input[best] {
                        best = i;
                    }
                }
                let o = c * oh * ow + y * ow + x;
                out[o] = input[best];
                arg[o] = best as u32;
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward(grad_out: &[f32], arg: &[u32], input_len: usize) -> Vec<f32> {
    let mut grad = vec![0.0; input_len];
    for (g, &i) in grad_out.iter().zip(arg) {
        grad[i as usize] += g;
    }
    grad
}

/// Numerically stable softmax.
pub fn softmax<T: Float>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum = exps.iter().copied().fold(T::zero(), |a, b| a + b);
    exps.into_iter().map(|e| e / sum).collect()
}

/// Cross-entropy of `softmax(logits)` against class `label`, with its
/// gradient with respect to the logits.
pub fn cross_entropy<T: Float>(logits: &[T], label: usize) -> (T, Vec<T>) {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let sum = logits.iter().map(|&z| (z - max).exp()).fold(T::zero(), |a, b| a + b);
    let log_z = max + sum.ln();
    let loss = log_z - logits[label];
    let mut grad: Vec<T> = logits.iter().map(|&z| (z - log_z).exp()).collect();
    grad[label] = grad[label] - T::one();
    (loss, grad)
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Adam state for a fixed list of parameter buffers.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    config: AdamConfig,
    step: i32,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Float> Adam<T> {
    pub fn new(config: AdamConfig, sizes: &[usize]) -> Self {
        Self {
            config,
            step: 0,
            first: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            second: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    /// Applies one update. `params` and `grads` must be in construction order.
    pub fn update(&mut self, params: &mut [&mut [T]], grads: &[&[T]]) {
        assert_eq!(params.len(), self.first.len());
        self.step += 1;
        let c = |v: f64| T::from(v).expect("representable");
        let (b1, b2) = (c(self.config.beta1), c(self.config.beta2));
        let lr = c(self.config.learning_rate);
        let eps = c(self.config.epsilon);
        let bias1 = T::one() - b1.powi(self.step);
        let bias2 = T::one() - b2.powi(self.step);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (T::one() - b1) * g[j];
                v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
                let mh = m[j] / bias1;
                let vh = v[j] / bias2;
                p[j] = p[j] - lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}
