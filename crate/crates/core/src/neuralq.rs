//! From-scratch 1D convolutional regressor for per-channel noise variance.
//!
//! Architecture: three valid (no-padding, stride-1) Conv1D layers — 5
//! filters of kernel 20, then 3 of kernel 10, then 3 of kernel 5 — each
//! followed by a leaky ReLU and a layer normalization, then global average
//! pooling into one value per channel, then a linear stack of widths
//! 100, 80, 50, 20, 1 with leaky ReLUs between. For the default input
//! length 200 the feature lengths are 181, 172, 168.
//!
//! The normalization statistics are taken over the whole feature map
//! (channels and positions jointly) with a per-channel gain and shift.
//! Normalizing each channel separately over its length would pin every
//! channel mean at zero and make the pooled vector a constant, severing
//! the amplitude signal the regressor exists to read.
//!
//! Each window is shifted by its own mean before entering the network: the
//! variance is the regression target, so the DC component carries no
//! information. The same centering is applied in training and online
//! inference and is recorded in the saved weight files.
//!
//! Everything here is plain `Vec<f64>` arithmetic: forward, exact
//! backpropagation, Adam, and a step learning-rate schedule.

use crate::eskf::ProcessNoiseDiag;
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

const WEIGHTS_SCHEMA_VERSION: u32 = 1;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    /// Loss became non-finite; carries the offending batch index.
    #[error("non-finite loss in batch {batch}")]
    NonFiniteLoss { batch: usize },
    #[error("weight schema mismatch: {0}")]
    SchemaVersionMismatch(String),
    #[error("corrupt weight file: {0}")]
    CorruptFile(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Leaky rectified linear unit: x for x > 0, 0.01·x otherwise.
#[inline]
pub fn leaky_relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.01 * x
    }
}

#[inline]
fn leaky_relu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        0.01
    }
}

/// Normalize a vector to zero mean and unit variance (ε = 1e-5), then apply
/// an affine gain and shift.
pub fn layer_norm(x: &[f64], gain: f64, shift: f64) -> Vec<f64> {
    let (xhat, _, _) = layer_norm_forward(x);
    xhat.iter().map(|&v| gain * v + shift).collect()
}

/// Returns (normalized values, mean, 1/√(var+ε)).
fn layer_norm_forward(x: &[f64]) -> (Vec<f64>, f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + LN_EPS).sqrt();
    let xhat = x.iter().map(|&v| (v - mean) * inv_std).collect();
    (xhat, mean, inv_std)
}

/// Per-channel arithmetic mean of a feature map.
pub fn global_avg_pool(channels: &[Vec<f64>]) -> Vec<f64> {
    channels
        .iter()
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect()
}

/// Squared error of a single prediction.
pub fn loss(q_hat: f64, q_star: f64) -> f64 {
    let d = q_star - q_hat;
    d * d
}

/// One Conv1D layer with its post-normalization affine parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub out_ch: usize,
    pub in_ch: usize,
    pub kernel: usize,
    /// Row-major [out_ch][in_ch][kernel].
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    /// Layer-norm gain/shift, one scalar per output channel.
    pub ln_gain: Vec<f64>,
    pub ln_shift: Vec<f64>,
}

impl ConvLayer {
    fn zeros(out_ch: usize, in_ch: usize, kernel: usize) -> Self {
        ConvLayer {
            out_ch,
            in_ch,
            kernel,
            weights: vec![0.0; out_ch * in_ch * kernel],
            bias: vec![0.0; out_ch],
            ln_gain: vec![0.0; out_ch],
            ln_shift: vec![0.0; out_ch],
        }
    }

    fn shapes_consistent(&self) -> bool {
        self.weights.len() == self.out_ch * self.in_ch * self.kernel
            && self.bias.len() == self.out_ch
            && self.ln_gain.len() == self.out_ch
            && self.ln_shift.len() == self.out_ch
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearLayer {
    pub out_dim: usize,
    pub in_dim: usize,
    /// Row-major [out_dim][in_dim].
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearLayer {
    fn zeros(out_dim: usize, in_dim: usize) -> Self {
        LinearLayer {
            out_dim,
            in_dim,
            weights: vec![0.0; out_dim * in_dim],
            bias: vec![0.0; out_dim],
        }
    }

    fn shapes_consistent(&self) -> bool {
        self.weights.len() == self.out_dim * self.in_dim && self.bias.len() == self.out_dim
    }
}

/// All weights of the regressor plus the input contract.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    pub version: u32,
    pub input_len: usize,
    /// Subtract the window mean before the first convolution.
    pub center_input: bool,
    pub conv: Vec<ConvLayer>,
    pub linear: Vec<LinearLayer>,
}

impl NetworkParams {
    /// The standard architecture for windows of length `input_len`,
    /// initialized from `seed`.
    pub fn init(input_len: usize, seed: u64) -> Result<Self, NetError> {
        let mut p = Self::architecture(input_len)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for c in &mut p.conv {
            let s = (1.0 / (c.in_ch * c.kernel) as f64).sqrt();
            for w in &mut c.weights {
                *w = rng.gen_range(-s..s);
            }
            // nonzero bias breaks the scale invariance of the
            // conv→activation→norm chain so amplitude can be learned
            for b in &mut c.bias {
                *b = rng.gen_range(-s..s);
            }
            c.ln_gain.fill(1.0);
        }
        for l in &mut p.linear {
            let s = (1.0 / l.in_dim as f64).sqrt();
            for w in &mut l.weights {
                *w = rng.gen_range(-s..s);
            }
            for b in &mut l.bias {
                *b = rng.gen_range(-s..s);
            }
        }
        Ok(p)
    }

    /// The standard layer shapes without weights.
    pub fn architecture(input_len: usize) -> Result<Self, NetError> {
        Self::custom_architecture(input_len, &[(5, 20), (3, 10), (3, 5)], &[100, 80, 50, 20])
    }

    /// Arbitrary conv stack (filters, kernel) and hidden linear widths; the
    /// output layer of width 1 is appended automatically. Scaled-down
    /// variants are used by the gradient-check tests.
    pub fn custom_architecture(
        input_len: usize,
        conv_spec: &[(usize, usize)],
        hidden: &[usize],
    ) -> Result<Self, NetError> {
        let mut len = input_len;
        let mut in_ch = 1;
        let mut conv = Vec::new();
        for &(filters, kernel) in conv_spec {
            if len < kernel {
                return Err(NetError::ShapeMismatch {
                    expected: kernel,
                    got: len,
                });
            }
            conv.push(ConvLayer::zeros(filters, in_ch, kernel));
            len = len - kernel + 1;
            in_ch = filters;
        }
        let mut linear = Vec::new();
        let mut dim = in_ch; // pooled vector length = channel count
        for &w in hidden {
            linear.push(LinearLayer::zeros(w, dim));
            dim = w;
        }
        linear.push(LinearLayer::zeros(1, dim));
        Ok(NetworkParams {
            version: WEIGHTS_SCHEMA_VERSION,
            input_len,
            center_input: true,
            conv,
            linear,
        })
    }

    /// Same structure with all parameters zero; gradient and moment buffers.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for c in &mut z.conv {
            c.weights.fill(0.0);
            c.bias.fill(0.0);
            c.ln_gain.fill(0.0);
            c.ln_shift.fill(0.0);
        }
        for l in &mut z.linear {
            l.weights.fill(0.0);
            l.bias.fill(0.0);
        }
        z
    }

    /// Feature lengths after each conv layer.
    pub fn conv_lengths(&self) -> Vec<usize> {
        let mut len = self.input_len;
        self.conv
            .iter()
            .map(|c| {
                len = len - c.kernel + 1;
                len
            })
            .collect()
    }

    /// Total scalar parameter count.
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each_array(|a| n += a.len());
        n
    }

    fn for_each_array(&self, mut f: impl FnMut(&Vec<f64>)) {
        for c in &self.conv {
            f(&c.weights);
            f(&c.bias);
            f(&c.ln_gain);
            f(&c.ln_shift);
        }
        for l in &self.linear {
            f(&l.weights);
            f(&l.bias);
        }
    }

    fn for_each_array_mut(&mut self, mut f: impl FnMut(&mut Vec<f64>)) {
        for c in &mut self.conv {
            f(&mut c.weights);
            f(&mut c.bias);
            f(&mut c.ln_gain);
            f(&mut c.ln_shift);
        }
        for l in &mut self.linear {
            f(&mut l.weights);
            f(&mut l.bias);
        }
    }

    /// Flatten all parameters in canonical order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.for_each_array(|a| out.extend_from_slice(a));
        out
    }

    /// Inverse of [`NetworkParams::flatten`]; lengths must match.
    pub fn unflatten_into(&mut self, flat: &[f64]) -> Result<(), NetError> {
        if flat.len() != self.param_count() {
            return Err(NetError::ShapeMismatch {
                expected: self.param_count(),
                got: flat.len(),
            });
        }
        let mut k = 0;
        self.for_each_array_mut(|a| {
            let n = a.len();
            a.copy_from_slice(&flat[k..k + n]);
            k += n;
        });
        Ok(())
    }

    fn add(&mut self, other: &NetworkParams) {
        let o = other.flatten();
        let mut k = 0;
        self.for_each_array_mut(|a| {
            for v in a.iter_mut() {
                *v += o[k];
                k += 1;
            }
        });
    }

    fn scale(&mut self, s: f64) {
        self.for_each_array_mut(|a| {
            for v in a.iter_mut() {
                *v *= s;
            }
        });
    }

    /// Error if this model was trained for a different window length.
    pub fn require_input_len(&self, n: usize) -> Result<(), NetError> {
        if self.input_len != n {
            return Err(NetError::SchemaVersionMismatch(format!(
                "model expects windows of length {}, run uses {}",
                self.input_len, n
            )));
        }
        Ok(())
    }
}

/// Cached intermediates of one forward pass, consumed by [`backward`].
struct ForwardTrace {
    /// Input feature maps per conv layer (layer 0 sees the centered window).
    conv_in: Vec<Vec<Vec<f64>>>,
    /// Pre-activation conv outputs.
    conv_z: Vec<Vec<Vec<f64>>>,
    /// Per layer: normalized feature map x̂ and the shared 1/√(var+ε).
    ln: Vec<(Vec<Vec<f64>>, f64)>,
    /// Linear inputs and pre-activations.
    lin_in: Vec<Vec<f64>>,
    lin_z: Vec<Vec<f64>>,
    output: f64,
}

/// Normalize a whole feature map jointly; returns (x̂ per channel, inv_std).
fn map_norm_forward(a: &[Vec<f64>]) -> (Vec<Vec<f64>>, f64) {
    let n: usize = a.iter().map(|c| c.len()).sum();
    let nf = n as f64;
    let mean = a.iter().flatten().sum::<f64>() / nf;
    let var = a
        .iter()
        .flatten()
        .map(|&v| (v - mean) * (v - mean))
        .sum::<f64>()
        / nf;
    let inv_std = 1.0 / (var + LN_EPS).sqrt();
    let xhat = a
        .iter()
        .map(|c| c.iter().map(|&v| (v - mean) * inv_std).collect())
        .collect();
    (xhat, inv_std)
}

fn conv_forward(layer: &ConvLayer, input: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let l_in = input[0].len();
    let l_out = l_in - layer.kernel + 1;
    let mut out = vec![vec![0.0; l_out]; layer.out_ch];
    for oc in 0..layer.out_ch {
        let o = &mut out[oc];
        for ic in 0..layer.in_ch {
            let x = &input[ic];
            let wbase = (oc * layer.in_ch + ic) * layer.kernel;
            let w = &layer.weights[wbase..wbase + layer.kernel];
            for (i, oi) in o.iter_mut().enumerate() {
                let xs = &x[i..i + layer.kernel];
                let mut acc = 0.0;
                for (wv, xv) in w.iter().zip(xs) {
                    acc += wv * xv;
                }
                *oi += acc;
            }
        }
        let b = layer.bias[oc];
        for v in out[oc].iter_mut() {
            *v += b;
        }
    }
    out
}

fn run_forward(params: &NetworkParams, window: &[f64]) -> Result<ForwardTrace, NetError> {
    if window.len() != params.input_len {
        return Err(NetError::ShapeMismatch {
            expected: params.input_len,
            got: window.len(),
        });
    }
    let mut x: Vec<Vec<f64>> = vec![window.to_vec()];
    if params.center_input {
        let mean = window.iter().sum::<f64>() / window.len() as f64;
        for v in x[0].iter_mut() {
            *v -= mean;
        }
    }
    let mut conv_in = Vec::new();
    let mut conv_z = Vec::new();
    let mut ln = Vec::new();
    for layer in &params.conv {
        let z = conv_forward(layer, &x);
        let a: Vec<Vec<f64>> = z
            .iter()
            .map(|c| c.iter().map(|&v| leaky_relu(v)).collect())
            .collect();
        let (xhat, inv_std) = map_norm_forward(&a);
        let y: Vec<Vec<f64>> = xhat
            .iter()
            .enumerate()
            .map(|(c, chan)| {
                chan.iter()
                    .map(|&v| layer.ln_gain[c] * v + layer.ln_shift[c])
                    .collect()
            })
            .collect();
        conv_in.push(x);
        conv_z.push(z);
        ln.push((xhat, inv_std));
        x = y;
    }
    let pooled = global_avg_pool(&x);

    let mut lin_in = Vec::new();
    let mut lin_z = Vec::new();
    let mut v = pooled;
    let n_lin = params.linear.len();
    for (li, layer) in params.linear.iter().enumerate() {
        let mut z = vec![0.0; layer.out_dim];
        for (o, zo) in z.iter_mut().enumerate() {
            let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
            let mut acc = layer.bias[o];
            for (wv, xv) in row.iter().zip(&v) {
                acc += wv * xv;
            }
            *zo = acc;
        }
        lin_in.push(v);
        v = if li + 1 < n_lin {
            z.iter().map(|&u| leaky_relu(u)).collect()
        } else {
            z.clone()
        };
        lin_z.push(z);
    }
    let output = v[0];
    Ok(ForwardTrace {
        conv_in,
        conv_z,
        ln,
        lin_in,
        lin_z,
        output,
    })
}

/// Regress the noise variance of one window.
pub fn forward(params: &NetworkParams, window: &[f64]) -> Result<f64, NetError> {
    Ok(run_forward(params, window)?.output)
}

/// Exact gradients of the squared loss (q* − q̂)² with respect to every
/// parameter. Returns (gradients, q̂).
pub fn backward(
    params: &NetworkParams,
    window: &[f64],
    q_star: f64,
) -> Result<(NetworkParams, f64), NetError> {
    let trace = run_forward(params, window)?;
    let mut grads = params.zeros_like();

    // dL/dq̂ for L = (q* − q̂)²
    let mut dv = vec![-2.0 * (q_star - trace.output)];

    // linear stack, last layer has no activation
    let n_lin = params.linear.len();
    for li in (0..n_lin).rev() {
        let layer = &params.linear[li];
        let g = &mut grads.linear[li];
        let dz: Vec<f64> = if li + 1 < n_lin {
            dv.iter()
                .zip(&trace.lin_z[li])
                .map(|(&d, &z)| d * leaky_relu_grad(z))
                .collect()
        } else {
            dv.clone()
        };
        let x = &trace.lin_in[li];
        let mut dx = vec![0.0; layer.in_dim];
        for o in 0..layer.out_dim {
            g.bias[o] += dz[o];
            let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
            let grow = &mut g.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
            for i in 0..layer.in_dim {
                grow[i] += dz[o] * x[i];
                dx[i] += row[i] * dz[o];
            }
        }
        dv = dx;
    }

    // global average pool: spread the gradient uniformly over each channel
    let last_len = trace.ln.last().map_or(0, |l| l.0[0].len());
    let mut dy: Vec<Vec<f64>> = dv
        .iter()
        .map(|&d| vec![d / last_len as f64; last_len])
        .collect();

    // conv stack in reverse: layer norm, activation, convolution
    for li in (0..params.conv.len()).rev() {
        let layer = &params.conv[li];
        let g = &mut grads.conv[li];

        // joint layer-norm backward:
        // dL/da = inv_std·(dx̂ − mean(dx̂) − x̂·mean(dx̂⊙x̂)), means over the map
        let (xhat, inv_std) = &trace.ln[li];
        let n_tot: f64 = xhat.iter().map(|c| c.len()).sum::<usize>() as f64;
        let mut dxhat_sum = 0.0;
        let mut dxhat_dot_xhat = 0.0;
        for c in 0..layer.out_ch {
            let gain = layer.ln_gain[c];
            for i in 0..xhat[c].len() {
                let dxh = dy[c][i] * gain;
                dxhat_sum += dxh;
                dxhat_dot_xhat += dxh * xhat[c][i];
                g.ln_gain[c] += dy[c][i] * xhat[c][i];
                g.ln_shift[c] += dy[c][i];
            }
        }
        let da: Vec<Vec<f64>> = (0..layer.out_ch)
            .map(|c| {
                let gain = layer.ln_gain[c];
                (0..xhat[c].len())
                    .map(|i| {
                        let dxh = dy[c][i] * gain;
                        inv_std
                            * (dxh - dxhat_sum / n_tot - xhat[c][i] * dxhat_dot_xhat / n_tot)
                    })
                    .collect()
            })
            .collect();

        // leaky ReLU backward
        let dz: Vec<Vec<f64>> = da
            .iter()
            .zip(&trace.conv_z[li])
            .map(|(dac, zc)| {
                dac.iter()
                    .zip(zc)
                    .map(|(&d, &z)| d * leaky_relu_grad(z))
                    .collect()
            })
            .collect();

        // convolution backward
        let input = &trace.conv_in[li];
        let l_out = dz[0].len();
        let mut dx = vec![vec![0.0; input[0].len()]; layer.in_ch];
        for oc in 0..layer.out_ch {
            let dzc = &dz[oc];
            g.bias[oc] += dzc.iter().sum::<f64>();
            for ic in 0..layer.in_ch {
                let x = &input[ic];
                let wbase = (oc * layer.in_ch + ic) * layer.kernel;
                let gw = &mut g.weights[wbase..wbase + layer.kernel];
                let w = &layer.weights[wbase..wbase + layer.kernel];
                let dxc = &mut dx[ic];
                for i in 0..l_out {
                    let d = dzc[i];
                    for j in 0..layer.kernel {
                        gw[j] += d * x[i + j];
                        dxc[i + j] += d * w[j];
                    }
                }
            }
        }
        dy = dx;
    }
    // gradient w.r.t. the raw window is not needed

    Ok((grads, trace.output))
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Optimizer and schedule settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub drop_factor: f64,
    /// Learning rate is multiplied by `drop_factor` after this many epochs.
    pub drop_epoch: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            drop_factor: 0.1,
            drop_epoch: 20,
            epochs: 30,
            batch_size: 500,
            seed: 17,
        }
    }
}

impl TrainConfig {
    /// Learning rate in force during a 1-indexed epoch.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        if epoch > self.drop_epoch {
            self.learning_rate * self.drop_factor
        } else {
            self.learning_rate
        }
    }
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub train_rmse: f64,
    pub test_rmse: f64,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    fn step(&mut self, params: &mut NetworkParams, grads: &NetworkParams, lr: f64) {
        self.t += 1;
        let g = grads.flatten();
        let mut p = params.flatten();
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..p.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        params.unflatten_into(&p).unwrap();
    }
}

/// Mean gradient over a batch; parallel across examples with a fixed
/// reduction order so results are reproducible.
fn batch_gradient(
    params: &NetworkParams,
    batch: &[(&[f64], f64)],
) -> Result<(NetworkParams, f64), NetError> {
    let chunk = batch.len().div_ceil(rayon::current_num_threads().max(1)).max(1);
    let partials: Vec<Result<(NetworkParams, f64), NetError>> = batch
        .par_chunks(chunk)
        .map(|ex| {
            let mut acc = params.zeros_like();
            let mut l = 0.0;
            for (w, q) in ex {
                let (g, q_hat) = backward(params, w, *q)?;
                acc.add(&g);
                l += loss(q_hat, *q);
            }
            Ok((acc, l))
        })
        .collect();
    let mut total = params.zeros_like();
    let mut total_loss = 0.0;
    for p in partials {
        let (g, l) = p?;
        total.add(&g);
        total_loss += l;
    }
    let n = batch.len() as f64;
    total.scale(1.0 / n);
    Ok((total, total_loss / n))
}

/// RMSE of the model over a labeled set.
pub fn evaluate_rmse(params: &NetworkParams, set: &[(&[f64], f64)]) -> Result<f64, NetError> {
    if set.is_empty() {
        return Err(NetError::EmptyDataset);
    }
    let sq: Vec<f64> = set
        .par_iter()
        .map(|(w, q)| forward(params, w).map(|q_hat| loss(q_hat, *q)))
        .collect::<Result<_, _>>()?;
    Ok((sq.iter().sum::<f64>() / sq.len() as f64).sqrt())
}

/// Train with Adam over shuffled mini-batches. Fully reproducible from the
/// seed in `cfg`.
pub fn train(
    train_set: &[(&[f64], f64)],
    test_set: &[(&[f64], f64)],
    cfg: &TrainConfig,
) -> Result<(NetworkParams, Vec<EpochStats>), NetError> {
    if train_set.is_empty() || test_set.is_empty() {
        return Err(NetError::EmptyDataset);
    }
    let n = train_set[0].0.len();
    for (w, _) in train_set.iter().chain(test_set) {
        if w.len() != n {
            return Err(NetError::ShapeMismatch {
                expected: n,
                got: w.len(),
            });
        }
    }
    let mut params = NetworkParams::init(n, cfg.seed)?;
    let mut adam = Adam::new(params.param_count());
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut batch_counter = 0usize;
    for epoch in 1..=cfg.epochs {
        let lr = cfg.lr_at_epoch(epoch);
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for ids in order.chunks(cfg.batch_size) {
            let batch: Vec<(&[f64], f64)> = ids.iter().map(|&i| train_set[i]).collect();
            let (grads, batch_loss) = batch_gradient(&params, &batch)?;
            if !batch_loss.is_finite() {
                return Err(NetError::NonFiniteLoss {
                    batch: batch_counter,
                });
            }
            adam.step(&mut params, &grads, lr);
            batch_counter += 1;
        }
        history.push(EpochStats {
            epoch,
            lr,
            train_rmse: evaluate_rmse(&params, train_set)?,
            test_rmse: evaluate_rmse(&params, test_set)?,
        });
    }
    Ok((params, history))
}

/// Clamp bounds for regressed variances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Clamp {
    pub min: f64,
    pub max: f64,
}

impl Clamp {
    /// The training-grid support [0.001, 0.025].
    pub fn training_grid() -> Self {
        Clamp {
            min: 0.001,
            max: 0.025,
        }
    }

    pub fn apply(&self, v: f64) -> f64 {
        v.clamp(self.min, self.max)
    }
}

/// Run the regressor on all six channels (fx, fy, fz, ωx, ωy, ωz) and
/// assemble the continuous process-noise diagonal with the fixed bias terms.
pub fn predict_qc(
    params: &NetworkParams,
    windows: &[Vec<f64>; 6],
    clamp: Clamp,
) -> Result<ProcessNoiseDiag, NetError> {
    let mut q = [0.0; 6];
    for (i, w) in windows.iter().enumerate() {
        q[i] = clamp.apply(forward(params, w)?);
    }
    Ok(ProcessNoiseDiag::new(
        Vector3::new(q[0], q[1], q[2]),
        Vector3::new(q[3], q[4], q[5]),
        1e-3,
    ))
}

// ---------------------------------------------------------------------------
// Persistence: versioned JSON with explicit shape metadata
// ---------------------------------------------------------------------------

pub fn save_params(params: &NetworkParams, path: &Path) -> Result<(), NetError> {
    let json = serde_json::to_string(params)
        .map_err(|e| NetError::CorruptFile(format!("serialize: {e}")))?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<NetworkParams, NetError> {
    let text = std::fs::read_to_string(path)?;
    params_from_json(&text)
}

pub fn params_from_json(text: &str) -> Result<NetworkParams, NetError> {
    let params: NetworkParams =
        serde_json::from_str(text).map_err(|e| NetError::CorruptFile(e.to_string()))?;
    if params.version != WEIGHTS_SCHEMA_VERSION {
        return Err(NetError::SchemaVersionMismatch(format!(
            "schema version {} (supported: {WEIGHTS_SCHEMA_VERSION})",
            params.version
        )));
    }
    for c in &params.conv {
        if !c.shapes_consistent() {
            return Err(NetError::CorruptFile("conv layer shape metadata".into()));
        }
    }
    for l in &params.linear {
        if !l.shapes_consistent() {
            return Err(NetError::CorruptFile("linear layer shape metadata".into()));
        }
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand::Rng;

    #[test]
    fn leaky_relu_branches() {
        assert_eq!(leaky_relu(2.0), 2.0);
        assert_eq!(leaky_relu(-2.0), -0.02);
        assert_eq!(leaky_relu(0.0), 0.0);
    }

    #[test]
    fn layer_norm_constant_input_is_near_zero() {
        let y = layer_norm(&[3.0; 16], 1.0, 0.0);
        for v in y {
            assert_abs_diff_eq!(v, 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn layer_norm_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..200).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let y = layer_norm(&x, 1.0, 0.0);
        let n = y.len() as f64;
        let mean = y.iter().sum::<f64>() / n;
        let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-6);
        assert_abs_diff_eq!(var, 1.0, epsilon = 1e-3);
    }

    #[test]
    fn layer_norm_shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Vec<f64> = (0..50).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let shifted: Vec<f64> = x.iter().map(|v| v + 42.0).collect();
        let a = layer_norm(&x, 1.3, 0.2);
        let b = layer_norm(&shifted, 1.3, 0.2);
        for (u, v) in a.iter().zip(&b) {
            assert_abs_diff_eq!(u, v, epsilon = 1e-9);
        }
    }

    #[test]
    fn gap_examples() {
        assert_eq!(global_avg_pool(&[vec![1.0, 2.0, 3.0, 4.0]]), vec![2.5]);
        assert_eq!(
            global_avg_pool(&[vec![0.0; 8], vec![0.0; 8]]),
            vec![0.0, 0.0]
        );
        let a = global_avg_pool(&[vec![5.0, 1.0, 3.0]]);
        let b = global_avg_pool(&[vec![3.0, 5.0, 1.0]]);
        assert_eq!(a, b);
    }

    #[test]
    fn loss_examples() {
        assert_eq!(loss(0.013, 0.013), 0.0);
        assert_relative_eq!(loss(0.01, 0.02), 1e-4, epsilon = 1e-18);
        let batch = [0.0, 1e-4];
        assert_relative_eq!(batch.iter().sum::<f64>() / 2.0, 5e-5, epsilon = 1e-18);
    }

    #[test]
    fn architecture_shapes_match_length_arithmetic() {
        let p = NetworkParams::architecture(200).unwrap();
        assert_eq!(p.conv_lengths(), vec![181, 172, 168]);
        assert_eq!(p.conv[0].out_ch, 5);
        assert_eq!(p.conv[0].kernel, 20);
        assert_eq!(p.conv[1].out_ch, 3);
        assert_eq!(p.conv[1].kernel, 10);
        assert_eq!(p.conv[2].out_ch, 3);
        assert_eq!(p.conv[2].kernel, 5);
        let widths: Vec<usize> = p.linear.iter().map(|l| l.out_dim).collect();
        assert_eq!(widths, vec![100, 80, 50, 20, 1]);
        assert_eq!(p.linear[0].in_dim, 3); // pooled channel count
    }

    #[test]
    fn forward_rejects_wrong_length() {
        let p = NetworkParams::init(200, 1).unwrap();
        assert!(matches!(
            forward(&p, &vec![0.0; 100]),
            Err(NetError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn forward_is_deterministic_on_zero_window() {
        let p = NetworkParams::init(200, 5).unwrap();
        let w = vec![0.0; 200];
        let a = forward(&p, &w).unwrap();
        let b = forward(&p, &w).unwrap();
        assert_eq!(a, b);
        assert!(a.is_finite());
    }

    /// Straight-line re-implementation of the forward arithmetic with
    /// explicit index loops and no shared helpers.
    fn forward_oracle(p: &NetworkParams, window: &[f64]) -> f64 {
        let mean: f64 = window.iter().sum::<f64>() / window.len() as f64;
        let mut maps: Vec<Vec<f64>> = vec![window.iter().map(|v| v - mean).collect()];
        for layer in &p.conv {
            let lo = maps[0].len() - layer.kernel + 1;
            let mut next: Vec<Vec<f64>> = Vec::new();
            for oc in 0..layer.out_ch {
                let mut chan = vec![0.0; lo];
                for (i, c) in chan.iter_mut().enumerate() {
                    let mut s = layer.bias[oc];
                    for ic in 0..layer.in_ch {
                        for j in 0..layer.kernel {
                            s += layer.weights[(oc * layer.in_ch + ic) * layer.kernel + j]
                                * maps[ic][i + j];
                        }
                    }
                    *c = s;
                }
                for v in chan.iter_mut() {
                    *v = if *v > 0.0 { *v } else { 0.01 * *v };
                }
                next.push(chan);
            }
            // normalization statistics over the whole feature map
            let count = (layer.out_ch * lo) as f64;
            let m: f64 = next.iter().flatten().sum::<f64>() / count;
            let var: f64 =
                next.iter().flatten().map(|v| (v - m) * (v - m)).sum::<f64>() / count;
            let inv = 1.0 / (var + 1e-5).sqrt();
            for (oc, chan) in next.iter_mut().enumerate() {
                for v in chan.iter_mut() {
                    *v = layer.ln_gain[oc] * ((*v - m) * inv) + layer.ln_shift[oc];
                }
            }
            maps = next;
        }
        let mut v: Vec<f64> = maps
            .iter()
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect();
        for (li, layer) in p.linear.iter().enumerate() {
            let mut out = vec![0.0; layer.out_dim];
            for (o, ov) in out.iter_mut().enumerate() {
                let mut s = layer.bias[o];
                for (i, xv) in v.iter().enumerate() {
                    s += layer.weights[o * layer.in_dim + i] * xv;
                }
                *ov = s;
            }
            if li + 1 < p.linear.len() {
                for u in out.iter_mut() {
                    *u = if *u > 0.0 { *u } else { 0.01 * *u };
                }
            }
            v = out;
        }
        v[0]
    }

    #[test]
    fn forward_matches_independent_oracle() {
        let p = NetworkParams::init(200, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..5 {
            let w: Vec<f64> = (0..200).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let a = forward(&p, &w).unwrap();
            let b = forward_oracle(&p, &w);
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
    }

    fn toy_params(seed: u64) -> NetworkParams {
        // N = 20, two small conv layers, narrow linear stack
        let mut p = NetworkParams::custom_architecture(20, &[(2, 5), (2, 3)], &[8, 4]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let flat: Vec<f64> = (0..p.param_count())
            .map(|_| rng.gen_range(-0.5..0.5))
            .collect();
        p.unflatten_into(&flat).unwrap();
        // keep layer-norm gains near one so every path stays active
        for c in &mut p.conv {
            for g in &mut c.ln_gain {
                *g = 1.0 + 0.1 * *g;
            }
        }
        p
    }

    #[test]
    fn gradients_match_central_finite_differences() {
        let p = toy_params(21);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let w: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let q_star = 0.012;
        let (grads, _) = backward(&p, &w, q_star).unwrap();
        let flat_g = grads.flatten();
        let flat_p = p.flatten();
        let h = 1e-5;
        for i in 0..flat_p.len() {
            let mut plus = flat_p.clone();
            plus[i] += h;
            let mut minus = flat_p.clone();
            minus[i] -= h;
            let mut pp = p.clone();
            pp.unflatten_into(&plus).unwrap();
            let mut pm = p.clone();
            pm.unflatten_into(&minus).unwrap();
            let lp = loss(forward(&pp, &w).unwrap(), q_star);
            let lm = loss(forward(&pm, &w).unwrap(), q_star);
            let fd = (lp - lm) / (2.0 * h);
            let g = flat_g[i];
            let denom = fd.abs().max(g.abs()).max(1e-8);
            assert!(
                (fd - g).abs() / denom < 1e-4,
                "param {i}: analytic {g:.6e} vs fd {fd:.6e}"
            );
        }
    }

    #[test]
    fn gradient_zero_at_perfect_prediction() {
        let p = toy_params(31);
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let w: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let q_hat = forward(&p, &w).unwrap();
        let (grads, _) = backward(&p, &w, q_hat).unwrap();
        assert!(grads.flatten().iter().all(|&g| g.abs() < 1e-14));
    }

    #[test]
    fn output_layer_gradient_linear_in_residual() {
        let p = toy_params(41);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let w: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let q_hat = forward(&p, &w).unwrap();
        let (g1, _) = backward(&p, &w, q_hat + 0.01).unwrap();
        let (g2, _) = backward(&p, &w, q_hat + 0.02).unwrap();
        let last1 = &g1.linear.last().unwrap().weights;
        let last2 = &g2.linear.last().unwrap().weights;
        for (a, b) in last1.iter().zip(last2) {
            assert_relative_eq!(2.0 * a, *b, epsilon = 1e-12, max_relative = 1e-6);
        }
    }

    #[test]
    fn lr_schedule_drops_after_epoch_twenty() {
        let cfg = TrainConfig::default();
        assert_relative_eq!(cfg.lr_at_epoch(20), 1e-3, epsilon = 1e-15);
        assert_relative_eq!(cfg.lr_at_epoch(21), 1e-4, epsilon = 1e-15);
    }

    #[test]
    fn smoke_training_reduces_rmse() {
        // 500 synthetic variance-regression examples at N = 50
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let grid = crate::scenario::q_grid();
        let mut windows = Vec::new();
        for i in 0..500 {
            let q = grid[i % grid.len()];
            let w: Vec<f64> = (0..50)
                .map(|_| q.sqrt() * rng.sample::<f64, _>(rand_distr::StandardNormal))
                .collect();
            windows.push((w, q));
        }
        let refs: Vec<(&[f64], f64)> = windows.iter().map(|(w, q)| (w.as_slice(), *q)).collect();
        let (train_set, test_set) = refs.split_at(400);
        let cfg = TrainConfig {
            epochs: 60,
            drop_epoch: 40,
            batch_size: 50,
            seed: 51,
            ..Default::default()
        };
        let (_, history) = train(train_set, test_set, &cfg).unwrap();
        let last = history.last().unwrap().train_rmse;
        let init_params = NetworkParams::init(50, cfg.seed).unwrap();
        let initial = evaluate_rmse(&init_params, train_set).unwrap();
        assert!(last * 5.0 < initial, "rmse {initial:.4} -> {last:.4}");
    }

    #[test]
    fn training_is_reproducible_from_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let windows: Vec<(Vec<f64>, f64)> = (0..80)
            .map(|_| {
                let q = 0.01;
                let w: Vec<f64> = (0..50)
                    .map(|_| q * rng.sample::<f64, _>(rand_distr::StandardNormal))
                    .collect();
                (w, q)
            })
            .collect();
        let refs: Vec<(&[f64], f64)> = windows.iter().map(|(w, q)| (w.as_slice(), *q)).collect();
        let (tr, te) = refs.split_at(60);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 20,
            seed: 61,
            ..Default::default()
        };
        let (p1, h1) = train(tr, te, &cfg).unwrap();
        let (p2, h2) = train(tr, te, &cfg).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(h1, h2);
    }

    #[test]
    fn predict_qc_assembly_and_clamp() {
        // constant-output stub: zero weights, output bias = 0.01
        let mut p = NetworkParams::architecture(200).unwrap();
        for c in &mut p.conv {
            c.ln_gain.fill(1.0);
        }
        p.linear.last_mut().unwrap().bias[0] = 0.01;
        let windows: [Vec<f64>; 6] = std::array::from_fn(|_| vec![0.0; 200]);
        let qc = predict_qc(&p, &windows, Clamp::training_grid()).unwrap();
        for i in 0..3 {
            assert_relative_eq!(qc.q_f[i], 0.01, epsilon = 1e-12);
            assert_relative_eq!(qc.q_omega[i], 0.01, epsilon = 1e-12);
        }
        assert_eq!(qc.epsilon_bias, 1e-3);
        let diag = qc.diagonal();
        for i in 6..12 {
            assert_eq!(diag[i], 1e-3);
        }

        // raw prediction outside the grid is clamped
        p.linear.last_mut().unwrap().bias[0] = 0.09;
        let qc = predict_qc(&p, &windows, Clamp::training_grid()).unwrap();
        assert_relative_eq!(qc.q_f[0], 0.025, epsilon = 1e-12);
    }

    #[test]
    fn predict_qc_channel_order() {
        let p = NetworkParams::init(200, 91).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(92);
        let windows: [Vec<f64>; 6] =
            std::array::from_fn(|_| (0..200).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let clamp = Clamp {
            min: -1e9,
            max: 1e9,
        };
        let qc = predict_qc(&p, &windows, clamp).unwrap();
        // diagonal order is fx, fy, fz, ωx, ωy, ωz
        for (i, w) in windows.iter().enumerate() {
            let q = forward(&p, w).unwrap();
            assert_eq!(qc.diagonal()[i], q);
        }
    }

    #[test]
    fn save_load_round_trip_preserves_forward_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.json");
        let p = NetworkParams::init(200, 71).unwrap();
        save_params(&p, &path).unwrap();
        let q = load_params(&path).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(72);
        let w: Vec<f64> = (0..200).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a = forward(&p, &w).unwrap();
        let b = forward(&q, &w).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.json");
        let p = NetworkParams::init(50, 73).unwrap();
        save_params(&p, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, &text[..text.len() / 2]).unwrap();
        assert!(matches!(load_params(&path), Err(NetError::CorruptFile(_))));
    }

    #[test]
    fn wrong_window_length_is_schema_mismatch() {
        let p = NetworkParams::init(400, 74).unwrap();
        assert!(matches!(
            p.require_input_len(200),
            Err(NetError::SchemaVersionMismatch(_))
        ));
        assert!(p.require_input_len(400).is_ok());
    }

    #[test]
    fn unsupported_schema_version_rejected() {
        let mut p = NetworkParams::init(50, 75).unwrap();
        p.version = 99;
        let text = serde_json::to_string(&p).unwrap();
        assert!(matches!(
            params_from_json(&text),
            Err(NetError::SchemaVersionMismatch(_))
        ));
    }

    #[test]
    fn inference_latency_single_window() {
        let p = NetworkParams::init(200, 81).unwrap();
        let w = vec![0.1; 200];
        forward(&p, &w).unwrap(); // warm up
        let start = std::time::Instant::now();
        let reps = 20;
        for _ in 0..reps {
            forward(&p, &w).unwrap();
        }
        let per_call = start.elapsed().as_secs_f64() / reps as f64;
        assert!(per_call < 0.010, "inference took {per_call:.4} s");
    }
}
