//! Per-tower multi-layer perceptron: ReLU hidden layers, inverted dropout,
//! a single sigmoid output probability, exact reverse-mode gradients, and
//! Adam parameter updates. Everything is plain `f64` with hand-written loops;
//! no autodiff framework.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Esm2Error, Result};

/// Logits are clamped to this magnitude before the sigmoid so logloss stays
/// finite; probabilities stay strictly inside (0, 1).
pub const LOGIT_CLAMP: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// One affine layer; `weights` is row-major `out_dim x in_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl DenseLayer {
    fn apply(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.out_dim {
            let row = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
            let mut acc = self.biases[o];
            for (w, x) in row.iter().zip(input) {
                acc += w * x;
            }
            out.push(acc);
        }
    }
}

/// One decomposed prediction tower.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpTower {
    /// Role tag, e.g. `click`, `daction`, `buy_daction`, `buy_oaction`, `cvr`.
    pub name: String,
    /// Full dimension chain `[input, hidden.., 1]`.
    pub layer_dims: Vec<usize>,
    pub layers: Vec<DenseLayer>,
    pub dropout_ratio: f64,
}

/// Intermediate state captured by [`MlpTower::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub mode: Mode,
    /// Activations entering each layer; `acts[0]` is the tower input.
    pub acts: Vec<Vec<f64>>,
    /// Pre-activation values per hidden layer.
    pub pre_acts: Vec<Vec<f64>>,
    /// Per hidden layer, the applied dropout factor per unit: 0 for dropped,
    /// 1/(1-p) for kept. All ones in infer mode or when p = 0.
    pub masks: Vec<Vec<f64>>,
    /// Raw and clamped output logit.
    pub logit_raw: f64,
    pub logit: f64,
    pub output: f64,
}

/// Parameter gradients shaped like a tower.
#[derive(Debug, Clone)]
pub struct TowerGrads {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl TowerGrads {
    pub fn zeros_like(tower: &MlpTower) -> Self {
        TowerGrads {
            weights: tower.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            biases: tower.layers.iter().map(|l| vec![0.0; l.biases.len()]).collect(),
        }
    }

    pub fn reset(&mut self) {
        for w in &mut self.weights {
            w.iter_mut().for_each(|v| *v = 0.0);
        }
        for b in &mut self.biases {
            b.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// He-scaled random weights, zero biases. Deterministic for a given rng state.
pub fn init_tower(
    name: &str,
    layer_dims: &[usize],
    dropout_ratio: f64,
    rng: &mut ChaCha8Rng,
) -> Result<MlpTower> {
    if layer_dims.len() < 2 {
        return Err(Esm2Error::InvalidConfig(format!(
            "tower {name} needs at least input and output dims, got {layer_dims:?}"
        )));
    }
    if layer_dims.iter().any(|&d| d == 0) {
        return Err(Esm2Error::InvalidConfig(format!(
            "tower {name} has a zero layer dim: {layer_dims:?}"
        )));
    }
    if !(0.0..1.0).contains(&dropout_ratio) {
        return Err(Esm2Error::InvalidConfig(format!(
            "dropout ratio {dropout_ratio} outside [0, 1)"
        )));
    }
    let mut layers = Vec::with_capacity(layer_dims.len() - 1);
    for w in layer_dims.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let std = (2.0 / fan_in as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("std is positive");
        let weights: Vec<f64> = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
        layers.push(DenseLayer {
            weights,
            biases: vec![0.0; fan_out],
            in_dim: fan_in,
            out_dim: fan_out,
        });
    }
    Ok(MlpTower {
        name: name.to_string(),
        layer_dims: layer_dims.to_vec(),
        layers,
        dropout_ratio,
    })
}

impl MlpTower {
    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    /// Full forward pass. In train mode, hidden activations get inverted
    /// dropout (kept units scaled by 1/(1-p)); in infer mode the rng is not
    /// touched and masks are all ones.
    pub fn forward(&self, input: &[f64], mode: Mode, rng: &mut ChaCha8Rng) -> Result<(f64, ForwardCache)> {
        self.check_input(input)?;
        let n_hidden = self.layers.len() - 1;
        let mut masks = Vec::with_capacity(n_hidden);
        for layer in &self.layers[..n_hidden] {
            let mask = if mode == Mode::Train && self.dropout_ratio > 0.0 {
                let keep = 1.0 - self.dropout_ratio;
                let scale = 1.0 / keep;
                (0..layer.out_dim)
                    .map(|_| if rng.random::<f64>() < keep { scale } else { 0.0 })
                    .collect()
            } else {
                vec![1.0; layer.out_dim]
            };
            masks.push(mask);
        }
        Ok(self.forward_with_masks(input, mode, masks))
    }

    /// Forward with pinned dropout masks; shared by `forward` and the
    /// finite-difference tests that must re-evaluate under identical masks.
    pub(crate) fn forward_with_masks(
        &self,
        input: &[f64],
        mode: Mode,
        masks: Vec<Vec<f64>>,
    ) -> (f64, ForwardCache) {
        let n_hidden = self.layers.len() - 1;
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        let mut pre_acts: Vec<Vec<f64>> = Vec::with_capacity(n_hidden);
        acts.push(input.to_vec());
        let mut buf = Vec::new();
        for (l, layer) in self.layers[..n_hidden].iter().enumerate() {
            layer.apply(acts.last().expect("nonempty"), &mut buf);
            pre_acts.push(buf.clone());
            let act: Vec<f64> = buf
                .iter()
                .zip(&masks[l])
                .map(|(&z, &m)| if z > 0.0 { z * m } else { 0.0 })
                .collect();
            acts.push(act);
        }
        let out_layer = self.layers.last().expect("at least one layer");
        out_layer.apply(acts.last().expect("nonempty"), &mut buf);
        let logit_raw = buf[0];
        let logit = logit_raw.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
        let output = sigmoid(logit);
        let cache = ForwardCache {
            mode,
            acts,
            pre_acts,
            masks,
            logit_raw,
            logit,
            output,
        };
        (output, cache)
    }

    /// Inference fast path: no cache, no rng, dropout disabled.
    pub fn predict(&self, input: &[f64]) -> Result<f64> {
        self.check_input(input)?;
        let n_hidden = self.layers.len() - 1;
        let mut cur = input.to_vec();
        let mut buf = Vec::new();
        for layer in &self.layers[..n_hidden] {
            layer.apply(&cur, &mut buf);
            buf.iter_mut().for_each(|z| *z = z.max(0.0));
            std::mem::swap(&mut cur, &mut buf);
        }
        let out_layer = self.layers.last().expect("at least one layer");
        out_layer.apply(&cur, &mut buf);
        Ok(sigmoid(buf[0].clamp(-LOGIT_CLAMP, LOGIT_CLAMP)))
    }

    /// Exact reverse-mode pass. Accumulates parameter gradients into `grads`
    /// and returns dL/d(input) for routing into the shared encoder.
    pub fn backward_into(
        &self,
        cache: &ForwardCache,
        d_output: f64,
        grads: &mut TowerGrads,
    ) -> Result<Vec<f64>> {
        if cache.mode != Mode::Train {
            return Err(Esm2Error::ShapeMismatch(format!(
                "tower {}: backward needs a train-mode cache",
                self.name
            )));
        }
        if cache.acts.len() != self.layers.len() {
            return Err(Esm2Error::ShapeMismatch(format!(
                "tower {}: cache does not match tower shape",
                self.name
            )));
        }
        let y = cache.output;
        // Sigmoid derivative, gated by the logit clamp.
        let mut d_logit = d_output * y * (1.0 - y);
        if cache.logit_raw.abs() > LOGIT_CLAMP {
            d_logit = 0.0;
        }

        let n_hidden = self.layers.len() - 1;
        // Output layer.
        let out_layer = &self.layers[n_hidden];
        let last_act = &cache.acts[n_hidden];
        for (gw, x) in grads.weights[n_hidden].iter_mut().zip(last_act) {
            *gw += d_logit * x;
        }
        grads.biases[n_hidden][0] += d_logit;
        let mut d_act: Vec<f64> = out_layer.weights.iter().map(|w| w * d_logit).collect();

        // Hidden layers in reverse.
        for l in (0..n_hidden).rev() {
            let layer = &self.layers[l];
            let pre = &cache.pre_acts[l];
            let mask = &cache.masks[l];
            // d(pre-activation): dropout factor then ReLU gate.
            let mut d_pre = d_act;
            for ((d, &z), &m) in d_pre.iter_mut().zip(pre).zip(mask) {
                *d = if z > 0.0 { *d * m } else { 0.0 };
            }
            let prev_act = &cache.acts[l];
            let gw = &mut grads.weights[l];
            for (o, &dp) in d_pre.iter().enumerate() {
                if dp != 0.0 {
                    let row = &mut gw[o * layer.in_dim..(o + 1) * layer.in_dim];
                    for (g, x) in row.iter_mut().zip(prev_act) {
                        *g += dp * x;
                    }
                }
                grads.biases[l][o] += dp;
            }
            let mut d_prev = vec![0.0; layer.in_dim];
            for (o, &dp) in d_pre.iter().enumerate() {
                if dp != 0.0 {
                    let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                    for (d, w) in d_prev.iter_mut().zip(row) {
                        *d += dp * w;
                    }
                }
            }
            d_act = d_prev;
        }
        Ok(d_act)
    }

    /// Convenience wrapper returning fresh gradients.
    pub fn backward(&self, cache: &ForwardCache, d_output: f64) -> Result<(TowerGrads, Vec<f64>)> {
        let mut grads = TowerGrads::zeros_like(self);
        let d_input = self.backward_into(cache, d_output, &mut grads)?;
        Ok((grads, d_input))
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(Esm2Error::ShapeMismatch(format!(
                "tower {}: input length {} != expected {}",
                self.name,
                input.len(),
                self.input_dim()
            )));
        }
        if input.iter().any(|v| !v.is_finite()) {
            return Err(Esm2Error::ShapeMismatch(format!(
                "tower {}: non-finite input",
                self.name
            )));
        }
        Ok(())
    }
}

/// Adam accumulators for one parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One Adam update with bias correction:
///
/// ```text
/// m <- b1 m + (1-b1) g        m_hat = m / (1 - b1^t)
/// v <- b2 v + (1-b2) g^2      v_hat = v / (1 - b2^t)
/// p <- p - lr * m_hat / (sqrt(v_hat) + eps)
/// ```
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    learning_rate: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Esm2Error::ShapeMismatch(format!(
            "adam: params {} grads {} state {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if let Some(bad) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Esm2Error::NonFiniteGradient(format!(
            "component {bad} of {} (value {})",
            grads.len(),
            grads[bad]
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= learning_rate * m_hat / (v_hat.sqrt() + state.epsilon);
    }
    Ok(())
}
