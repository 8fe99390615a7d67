//! Per-(message, node) policy network.
//!
//! Fixed architecture: one scalar input (the shared exploration value), two
//! ReLU hidden layers of 256 and 128 units, and `M` sigmoid outputs, one
//! transmission probability per opportunity. Gradients of the Bernoulli
//! log-likelihood are hand-derived for this architecture; updates go through
//! an adaptive-moment ascent step that is skipped entirely on zero reward,
//! so a failed episode leaves the parameters byte-for-byte unchanged.

use crate::model::{InstanceDims, Reward};
use crate::stream::{substream, tag};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

pub const HIDDEN1: usize = 256;
pub const HIDDEN2: usize = 128;

/// Logits are clamped to this magnitude inside the log-likelihood value (not
/// in the forward pass), bounding |log p| without changing sampled behavior.
pub const LOGIT_CLAMP: f64 = 30.0;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("non-finite exploration input")]
    NonFiniteInput,
    #[error("non-finite numerical state in layer {layer}")]
    NumericalState { layer: usize },
    #[error("move length {got} does not match output width {expected}")]
    MoveLengthMismatch { expected: usize, got: usize },
    #[error("snapshot dims {got:?} do not match expected {expected:?}")]
    SnapshotDimsMismatch {
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Serde(#[from] serde_json::Error),
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

// ln(1 + e^x) without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// One dense layer with its adaptive-moment accumulators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    in_dim: usize,
    out_dim: usize,
    w: Vec<f64>,
    b: Vec<f64>,
    mw: Vec<f64>,
    vw: Vec<f64>,
    mb: Vec<f64>,
    vb: Vec<f64>,
}

impl DenseLayer {
    fn init<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        // Fan-in scaled uniform weights, zero biases.
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w = (0..in_dim * out_dim)
            .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * bound)
            .collect();
        Self {
            in_dim,
            out_dim,
            w,
            b: vec![0.0; out_dim],
            mw: vec![0.0; in_dim * out_dim],
            vw: vec![0.0; in_dim * out_dim],
            mb: vec![0.0; out_dim],
            vb: vec![0.0; out_dim],
        }
    }

    fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            w: vec![0.0; in_dim * out_dim],
            b: vec![0.0; out_dim],
            mw: vec![0.0; in_dim * out_dim],
            vw: vec![0.0; in_dim * out_dim],
            mb: vec![0.0; out_dim],
            vb: vec![0.0; out_dim],
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.w
    }

    pub fn biases(&self) -> &[f64] {
        &self.b
    }

    /// y = W x + b; `w` is row-major `out_dim x in_dim`.
    fn affine(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.reserve(self.out_dim);
        for (row, &bias) in self.w.chunks_exact(self.in_dim).zip(&self.b) {
            let dot: f64 = row.iter().zip(x).map(|(&wi, &xi)| wi * xi).sum();
            out.push(dot + bias);
        }
    }

    fn is_finite(&self) -> bool {
        self.w.iter().chain(&self.b).all(|v| v.is_finite())
    }

    fn adam_step(&mut self, gw: &[f64], gb: &[f64], lr: f64, t: u64) {
        debug_assert_eq!(gw.len(), self.w.len());
        debug_assert_eq!(gb.len(), self.b.len());
        let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
        for i in 0..self.w.len() {
            let g = gw[i];
            self.mw[i] = ADAM_BETA1 * self.mw[i] + (1.0 - ADAM_BETA1) * g;
            self.vw[i] = ADAM_BETA2 * self.vw[i] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = self.mw[i] / bc1;
            let v_hat = self.vw[i] / bc2;
            self.w[i] += lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
        for i in 0..self.b.len() {
            let g = gb[i];
            self.mb[i] = ADAM_BETA1 * self.mb[i] + (1.0 - ADAM_BETA1) * g;
            self.vb[i] = ADAM_BETA2 * self.vb[i] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = self.mb[i] / bc1;
            let v_hat = self.vb[i] / bc2;
            self.b[i] += lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
}

/// Everything the forward pass produced: input, pre- and post-activations of
/// both hidden layers, output logits and output probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub input: f64,
    pub z1: Vec<f64>,
    pub a1: Vec<f64>,
    pub z2: Vec<f64>,
    pub a2: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

/// Gradient with the same shape as the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGradient {
    pub w: [Vec<f64>; 3],
    pub b: [Vec<f64>; 3],
}

/// Parameters of one policy network, with per-layer freeze flags and the
/// optimizer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    n_outputs: usize,
    layers: [DenseLayer; 3],
    frozen: [bool; 3],
    step: u64,
}

impl MlpParams {
    pub fn init<R: Rng>(n_outputs: usize, rng: &mut R) -> Self {
        Self {
            n_outputs,
            layers: [
                DenseLayer::init(1, HIDDEN1, rng),
                DenseLayer::init(HIDDEN1, HIDDEN2, rng),
                DenseLayer::init(HIDDEN2, n_outputs, rng),
            ],
            frozen: [false; 3],
            step: 0,
        }
    }

    /// All-zero parameters (every output probability is exactly 0.5).
    pub fn zeros(n_outputs: usize) -> Self {
        Self {
            n_outputs,
            layers: [
                DenseLayer::zeros(1, HIDDEN1),
                DenseLayer::zeros(HIDDEN1, HIDDEN2),
                DenseLayer::zeros(HIDDEN2, n_outputs),
            ],
            frozen: [false; 3],
            step: 0,
        }
    }

    /// A network whose deterministic move equals `move_bits` (large output
    /// biases of the matching sign, everything else zero). Used to encode
    /// explicit strategies.
    pub fn encoding_move(move_bits: &[bool]) -> Self {
        let mut net = Self::zeros(move_bits.len());
        for (m, &bit) in move_bits.iter().enumerate() {
            net.layers[2].b[m] = if bit { 10.0 } else { -10.0 };
        }
        net
    }

    pub fn n_outputs(&self) -> usize {
        self.n_outputs
    }

    pub fn layers(&self) -> &[DenseLayer; 3] {
        &self.layers
    }

    pub fn frozen(&self) -> [bool; 3] {
        self.frozen
    }

    pub fn set_frozen(&mut self, frozen: [bool; 3]) {
        self.frozen = frozen;
    }

    pub fn optimizer_step(&self) -> u64 {
        self.step
    }

    /// Zero the moment accumulators and the step counter.
    pub fn reset_optimizer(&mut self) {
        self.step = 0;
        for layer in &mut self.layers {
            layer.mw.iter_mut().for_each(|v| *v = 0.0);
            layer.vw.iter_mut().for_each(|v| *v = 0.0);
            layer.mb.iter_mut().for_each(|v| *v = 0.0);
            layer.vb.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Direct access for explicit strategy construction and derivative
    /// checking. `index` is row-major into the layer's weight matrix.
    pub fn weight(&self, layer: usize, index: usize) -> f64 {
        self.layers[layer].w[index]
    }

    pub fn set_weight(&mut self, layer: usize, index: usize, value: f64) {
        self.layers[layer].w[index] = value;
    }

    pub fn bias(&self, layer: usize, index: usize) -> f64 {
        self.layers[layer].b[index]
    }

    pub fn set_bias(&mut self, layer: usize, index: usize, value: f64) {
        self.layers[layer].b[index] = value;
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.is_finite())
    }

    /// Forward pass at exploration input `s`.
    pub fn forward(&self, s: f64) -> Result<ForwardTrace, PolicyError> {
        if !s.is_finite() {
            return Err(PolicyError::NonFiniteInput);
        }
        let mut z1 = Vec::new();
        self.layers[0].affine(&[s], &mut z1);
        let a1: Vec<f64> = z1.iter().map(|&z| z.max(0.0)).collect();
        let mut z2 = Vec::new();
        self.layers[1].affine(&a1, &mut z2);
        let a2: Vec<f64> = z2.iter().map(|&z| z.max(0.0)).collect();
        let mut logits = Vec::new();
        self.layers[2].affine(&a2, &mut logits);
        if !logits.iter().all(|v| v.is_finite()) {
            return Err(PolicyError::NumericalState { layer: 2 });
        }
        let probs = logits.iter().map(|&z| sigmoid(z)).collect();
        Ok(ForwardTrace {
            input: s,
            z1,
            a1,
            z2,
            a2,
            logits,
            probs,
        })
    }

    /// Bernoulli move sampled from the trace's output probabilities.
    pub fn sample_move<R: Rng>(trace: &ForwardTrace, rng: &mut R) -> Vec<bool> {
        trace.probs.iter().map(|&p| rng.random::<f64>() < p).collect()
    }

    /// Log-likelihood of `mv` under the trace's Bernoulli outputs, with
    /// logits clamped to +/-LOGIT_CLAMP.
    pub fn log_prob(trace: &ForwardTrace, mv: &[bool]) -> f64 {
        trace
            .logits
            .iter()
            .zip(mv)
            .map(|(&z, &bit)| {
                let z = z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
                // log sigmoid(z) = -softplus(-z); log(1 - sigmoid(z)) = -softplus(z)
                if bit {
                    -softplus(-z)
                } else {
                    -softplus(z)
                }
            })
            .sum()
    }

    /// Exact reverse-mode gradient of the move log-likelihood with respect
    /// to every parameter. The output-layer seed is `(m - p)` per logit.
    pub fn log_prob_gradient(
        &self,
        trace: &ForwardTrace,
        mv: &[bool],
    ) -> Result<MlpGradient, PolicyError> {
        if mv.len() != self.n_outputs {
            return Err(PolicyError::MoveLengthMismatch {
                expected: self.n_outputs,
                got: mv.len(),
            });
        }
        let seed: Vec<f64> = trace
            .probs
            .iter()
            .zip(mv)
            .map(|(&p, &bit)| if bit { 1.0 - p } else { -p })
            .collect();

        // Layer 3: gw3[m][h2] = seed[m] * a2[h2], gb3 = seed.
        let mut gw3 = vec![0.0; self.n_outputs * HIDDEN2];
        for (m, &g) in seed.iter().enumerate() {
            let row = &mut gw3[m * HIDDEN2..(m + 1) * HIDDEN2];
            for (dst, &a) in row.iter_mut().zip(&trace.a2) {
                *dst = g * a;
            }
        }
        // Backprop into hidden layer 2.
        let w3 = &self.layers[2].w;
        let mut dz2 = vec![0.0; HIDDEN2];
        for (m, &g) in seed.iter().enumerate() {
            let row = &w3[m * HIDDEN2..(m + 1) * HIDDEN2];
            for (dst, &w) in dz2.iter_mut().zip(row) {
                *dst += g * w;
            }
        }
        for (d, &z) in dz2.iter_mut().zip(&trace.z2) {
            if z <= 0.0 {
                *d = 0.0;
            }
        }

        // Layer 2: gw2[h2][h1] = dz2[h2] * a1[h1].
        let mut gw2 = vec![0.0; HIDDEN2 * HIDDEN1];
        for (h2, &g) in dz2.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let row = &mut gw2[h2 * HIDDEN1..(h2 + 1) * HIDDEN1];
            for (dst, &a) in row.iter_mut().zip(&trace.a1) {
                *dst = g * a;
            }
        }
        // Backprop into hidden layer 1.
        let w2 = &self.layers[1].w;
        let mut dz1 = vec![0.0; HIDDEN1];
        for (h2, &g) in dz2.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let row = &w2[h2 * HIDDEN1..(h2 + 1) * HIDDEN1];
            for (dst, &w) in dz1.iter_mut().zip(row) {
                *dst += g * w;
            }
        }
        for (d, &z) in dz1.iter_mut().zip(&trace.z1) {
            if z <= 0.0 {
                *d = 0.0;
            }
        }
        let gw1: Vec<f64> = dz1.iter().map(|&g| g * trace.input).collect();

        let grad = MlpGradient {
            w: [gw1, gw2, gw3],
            b: [dz1, dz2, seed],
        };
        let finite = grad
            .w
            .iter()
            .chain(grad.b.iter())
            .all(|v| v.iter().all(|x| x.is_finite()));
        if !finite {
            return Err(PolicyError::NumericalState { layer: 0 });
        }
        Ok(grad)
    }

    /// Reward-weighted ascent step. Zero reward is an exact no-op: neither
    /// the parameters nor the optimizer moments advance. Frozen layers are
    /// never touched.
    pub fn apply_update(&mut self, grad: &MlpGradient, reward: &Reward, learning_rate: f64) {
        if !reward.xi() {
            return;
        }
        self.step += 1;
        let t = self.step;
        for (i, layer) in self.layers.iter_mut().enumerate() {
            if self.frozen[i] {
                continue;
            }
            layer.adam_step(&grad.w[i], &grad.b[i], learning_rate, t);
        }
    }

    /// Deterministic inference move: forward at input 0, round each output
    /// probability to the nearest integer (exact 0.5 rounds down to "do not
    /// transmit"). Independent of any RNG state.
    pub fn deterministic_move(&self) -> Vec<bool> {
        let trace = self.forward(0.0).expect("finite zero input");
        trace.probs.iter().map(|&p| p > 0.5).collect()
    }
}

/// The full set of `L x N` policy networks plus run metadata; this is the
/// snapshot that round-trips through disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySet {
    dims: InstanceDims,
    seed: u64,
    epoch: u64,
    nets: Vec<MlpParams>,
}

impl PolicySet {
    pub fn init(dims: &InstanceDims, seed: u64) -> Self {
        let nets = (0..dims.n_messages() * dims.n_nodes())
            .map(|i| {
                let l = (i / dims.n_nodes()) as u64;
                let n = (i % dims.n_nodes()) as u64;
                let mut rng = substream(seed, &[tag::POLICY_INIT, l, n]);
                MlpParams::init(dims.n_opportunities(), &mut rng)
            })
            .collect();
        Self {
            dims: *dims,
            seed,
            epoch: 0,
            nets,
        }
    }

    /// Build a set that deterministically encodes one explicit strategy:
    /// `moves[l * N + n]` is the fixed move of node `n` for message `l`.
    pub fn encoding_moves(dims: &InstanceDims, moves: &[Vec<bool>]) -> Self {
        assert_eq!(moves.len(), dims.n_messages() * dims.n_nodes());
        Self {
            dims: *dims,
            seed: 0,
            epoch: 0,
            nets: moves.iter().map(|mv| MlpParams::encoding_move(mv)).collect(),
        }
    }

    pub fn dims(&self) -> &InstanceDims {
        &self.dims
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn set_epoch(&mut self, epoch: u64) {
        self.epoch = epoch;
    }

    pub fn get(&self, l: usize, n: usize) -> &MlpParams {
        &self.nets[l * self.dims.n_nodes() + n]
    }

    pub fn get_mut(&mut self, l: usize, n: usize) -> &mut MlpParams {
        let idx = l * self.dims.n_nodes() + n;
        &mut self.nets[idx]
    }

    pub fn nets(&self) -> &[MlpParams] {
        &self.nets
    }

    pub fn set_frozen(&mut self, frozen: [bool; 3]) {
        for net in &mut self.nets {
            net.set_frozen(frozen);
        }
    }

    pub fn reset_optimizer(&mut self) {
        for net in &mut self.nets {
            net.reset_optimizer();
        }
    }

    /// Precompute every learner's deterministic move (the inference table).
    pub fn deterministic_moves(&self) -> Vec<Vec<bool>> {
        self.nets.iter().map(|net| net.deterministic_move()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.nets.iter().all(|n| n.is_finite())
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<(), PolicyError> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(file, self)?;
        Ok(())
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self, PolicyError> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let set: Self = serde_json::from_reader(file)?;
        Ok(set)
    }

    pub fn load_checked<P: AsRef<Path>>(
        path: P,
        dims: &InstanceDims,
    ) -> Result<Self, PolicyError> {
        let set = Self::load(path)?;
        if set.dims != *dims {
            return Err(PolicyError::SnapshotDimsMismatch {
                expected: (dims.n_messages(), dims.n_nodes(), dims.n_opportunities()),
                got: (
                    set.dims.n_messages(),
                    set.dims.n_nodes(),
                    set.dims.n_opportunities(),
                ),
            });
        }
        Ok(set)
    }
}

/// Finite-difference derivative checking. The numeric gradient here is the
/// independent reference the analytic gradient is validated against; it
/// differentiates the same clamped log-likelihood value the analytic path
/// claims to differentiate.
pub mod gradcheck {
    use super::*;

    /// Central finite differences of the move log-likelihood over every
    /// parameter coordinate.
    pub fn numeric_gradient(params: &MlpParams, s: f64, mv: &[bool], h: f64) -> MlpGradient {
        let mut work = params.clone();
        let eval =
            |p: &MlpParams| MlpParams::log_prob(&p.forward(s).expect("finite input"), mv);
        let mut gw: [Vec<f64>; 3] = [Vec::new(), Vec::new(), Vec::new()];
        let mut gb: [Vec<f64>; 3] = [Vec::new(), Vec::new(), Vec::new()];
        for layer in 0..3 {
            let w_len = params.layers()[layer].weights().len();
            let mut g = Vec::with_capacity(w_len);
            for i in 0..w_len {
                let orig = work.weight(layer, i);
                work.set_weight(layer, i, orig + h);
                let up = eval(&work);
                work.set_weight(layer, i, orig - h);
                let down = eval(&work);
                work.set_weight(layer, i, orig);
                g.push((up - down) / (2.0 * h));
            }
            gw[layer] = g;
            let b_len = params.layers()[layer].biases().len();
            let mut g = Vec::with_capacity(b_len);
            for i in 0..b_len {
                let orig = work.bias(layer, i);
                work.set_bias(layer, i, orig + h);
                let up = eval(&work);
                work.set_bias(layer, i, orig - h);
                let down = eval(&work);
                work.set_bias(layer, i, orig);
                g.push((up - down) / (2.0 * h));
            }
            gb[layer] = g;
        }
        MlpGradient { w: gw, b: gb }
    }

    /// Largest relative error between two gradients, with a unit floor in
    /// the denominator so near-zero coordinates compare absolutely.
    pub fn max_relative_error(analytic: &MlpGradient, numeric: &MlpGradient) -> f64 {
        let mut worst: f64 = 0.0;
        for (a_vec, n_vec) in analytic
            .w
            .iter()
            .chain(analytic.b.iter())
            .zip(numeric.w.iter().chain(numeric.b.iter()))
        {
            for (&a, &n) in a_vec.iter().zip(n_vec) {
                let denom = a.abs().max(n.abs()).max(1.0);
                worst = worst.max((a - n).abs() / denom);
            }
        }
        worst
    }

    /// Finite differences are only valid away from the rectifier kinks:
    /// every hidden pre-activation must clear the step size by a margin.
    pub fn clear_of_kinks(trace: &ForwardTrace, margin: f64) -> bool {
        trace
            .z1
            .iter()
            .chain(trace.z2.iter())
            .all(|&z| z.abs() > margin)
    }
}
