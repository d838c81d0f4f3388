//! Dense MLP Q-network in plain f64: ReLU hidden layers, identity output,
//! trained by SGD on the mean squared error of the taken actions only.
//! Parameters are exposed as one flat vector so callers can run finite-
//! difference checks against `batch_gradient`.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fully connected network; `layer_sizes` includes input and output widths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QNetwork {
    layer_sizes: Vec<usize>,
    /// Per layer, row-major `out x in`.
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

/// Gradients in the same shape as the network parameters.
#[derive(Debug, Clone)]
pub struct Gradients {
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

impl QNetwork {
    /// Xavier-uniform initialization: weights drawn from
    /// `U(-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out)))` with a
    /// seeded generator, biases zero.
    pub fn new(layer_sizes: &[usize], seed: u64) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::config(
                "a network needs at least an input and an output layer",
            ));
        }
        if layer_sizes.iter().any(|s| *s == 0) {
            return Err(Error::config("layer sizes must be positive"));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-limit..limit))
                .collect();
            weights.push(w);
            biases.push(vec![0.0; fan_out]);
        }
        Ok(QNetwork {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("at least two layers")
    }

    pub fn param_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|p| p[0] * p[1] + p[1])
            .sum()
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(Error::contract(format!(
                "input has {} values, network expects {}",
                input.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Activations for every layer, input included; the last entry is the
    /// network output.
    fn forward_all(&self, input: &[f64]) -> Vec<Vec<f64>> {
        let n_layers = self.weights.len();
        let mut acts = Vec::with_capacity(n_layers + 1);
        acts.push(input.to_vec());
        for l in 0..n_layers {
            let fan_in = self.layer_sizes[l];
            let fan_out = self.layer_sizes[l + 1];
            let prev = &acts[l];
            let mut out = Vec::with_capacity(fan_out);
            for o in 0..fan_out {
                let row = &self.weights[l][o * fan_in..(o + 1) * fan_in];
                let mut z = self.biases[l][o];
                for (w, a) in row.iter().zip(prev.iter()) {
                    z += w * a;
                }
                // Hidden layers are ReLU; the output layer stays linear.
                out.push(if l + 1 < n_layers { z.max(0.0) } else { z });
            }
            acts.push(out);
        }
        acts
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        Ok(self.forward_all(input).pop().expect("output layer"))
    }

    fn check_batch(&self, states: &[Vec<f64>], actions: &[usize], targets: &[f64]) -> Result<()> {
        if states.is_empty() {
            return Err(Error::contract("empty training batch"));
        }
        if states.len() != actions.len() || states.len() != targets.len() {
            return Err(Error::contract(format!(
                "batch shape mismatch: {} states, {} actions, {} targets",
                states.len(),
                actions.len(),
                targets.len()
            )));
        }
        for s in states {
            self.check_input(s)?;
        }
        if let Some(a) = actions.iter().find(|a| **a >= self.output_dim()) {
            return Err(Error::contract(format!(
                "action index {a} out of range (output dim {})",
                self.output_dim()
            )));
        }
        Ok(())
    }

    /// Mean squared error of `Q(s_b, a_b)` against `targets`, without
    /// touching parameters.
    pub fn batch_loss(&self, states: &[Vec<f64>], actions: &[usize], targets: &[f64]) -> Result<f64> {
        self.check_batch(states, actions, targets)?;
        let mut loss = 0.0;
        for ((s, a), y) in states.iter().zip(actions).zip(targets) {
            let q = self.forward_all(s).pop().expect("output layer")[*a];
            loss += (q - y) * (q - y);
        }
        Ok(loss / states.len() as f64)
    }

    /// Loss and its analytic gradient at the current parameters.
    pub fn batch_gradient(
        &self,
        states: &[Vec<f64>],
        actions: &[usize],
        targets: &[f64],
    ) -> Result<(f64, Gradients)> {
        self.check_batch(states, actions, targets)?;
        let n_layers = self.weights.len();
        let mut grads = Gradients {
            weights: self.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: self.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        };
        let batch = states.len() as f64;
        let mut loss = 0.0;
        for ((s, a), y) in states.iter().zip(actions).zip(targets) {
            let acts = self.forward_all(s);
            let q = acts[n_layers][*a];
            loss += (q - y) * (q - y);
            // dL/dq for the taken output only; everything else is zero.
            let mut delta = vec![0.0; self.layer_sizes[n_layers]];
            delta[*a] = 2.0 * (q - y) / batch;
            for l in (0..n_layers).rev() {
                let fan_in = self.layer_sizes[l];
                let fan_out = self.layer_sizes[l + 1];
                let prev = &acts[l];
                let mut delta_prev = vec![0.0; fan_in];
                for o in 0..fan_out {
                    let d = delta[o];
                    if d == 0.0 {
                        continue;
                    }
                    grads.biases[l][o] += d;
                    let row = o * fan_in;
                    for i in 0..fan_in {
                        grads.weights[l][row + i] += d * prev[i];
                        delta_prev[i] += d * self.weights[l][row + i];
                    }
                }
                if l > 0 {
                    // Gate through the ReLU of the previous hidden layer:
                    // its activation is zero exactly where the unit was off.
                    for (dp, a) in delta_prev.iter_mut().zip(acts[l].iter()) {
                        if *a <= 0.0 {
                            *dp = 0.0;
                        }
                    }
                }
                delta = delta_prev;
            }
        }
        Ok((loss / batch, grads))
    }

    /// One SGD step on the batch; returns the loss measured before the
    /// parameters moved.
    pub fn train_batch(
        &mut self,
        states: &[Vec<f64>],
        actions: &[usize],
        targets: &[f64],
        learning_rate: f64,
    ) -> Result<f64> {
        let (loss, grads) = self.batch_gradient(states, actions, targets)?;
        if !loss.is_finite() {
            return Err(Error::arithmetic(format!(
                "non-finite training loss {loss}; aborting instead of diverging"
            )));
        }
        for l in 0..self.weights.len() {
            for (w, g) in self.weights[l].iter_mut().zip(&grads.weights[l]) {
                *w -= learning_rate * g;
            }
            for (b, g) in self.biases[l].iter_mut().zip(&grads.biases[l]) {
                *b -= learning_rate * g;
            }
        }
        Ok(loss)
    }

    /// All parameters as one vector: per layer, weights row-major then
    /// biases. The flattening matches `set_params_flat` and
    /// `Gradients::flatten`.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in 0..self.weights.len() {
            out.extend_from_slice(&self.weights[l]);
            out.extend_from_slice(&self.biases[l]);
        }
        out
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::contract(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        let mut at = 0;
        for l in 0..self.weights.len() {
            let wl = self.weights[l].len();
            self.weights[l].copy_from_slice(&params[at..at + wl]);
            at += wl;
            let bl = self.biases[l].len();
            self.biases[l].copy_from_slice(&params[at..at + bl]);
            at += bl;
        }
        Ok(())
    }

    /// Overwrite this network's parameters with another's (target sync).
    pub fn copy_params_from(&mut self, other: &QNetwork) -> Result<()> {
        if self.layer_sizes != other.layer_sizes {
            return Err(Error::contract("cannot sync networks of different shape"));
        }
        self.weights.clone_from(&other.weights);
        self.biases.clone_from(&other.biases);
        Ok(())
    }
}

impl Gradients {
    /// Same ordering as `QNetwork::params_flat`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in 0..self.weights.len() {
            out.extend_from_slice(&self.weights[l]);
            out.extend_from_slice(&self.biases[l]);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Hand-computed two-layer forward pass; values frozen from an
    /// independent calculation.
    #[test]
    fn forward_matches_the_frozen_hand_example() {
        let mut net = QNetwork::new(&[2, 3, 2], 0).unwrap();
        #[rustfmt::skip]
        let params = vec![
            // W1 (3x2 row-major), B1
            0.5, -0.25,
            0.125, 0.75,
            -1.0, 0.375,
            0.1, -0.2, 0.0,
            // W2 (2x3 row-major), B2
            1.0, -0.5, 0.25,
            0.0, 2.0, -1.5,
            -0.05, 0.3,
        ];
        net.set_params_flat(&params).unwrap();
        let out = net.forward(&[0.5, -1.0]).unwrap();
        assert!((out[0] - 0.55).abs() < 1e-12, "out[0] = {}", out[0]);
        assert!((out[1] - 0.3).abs() < 1e-12, "out[1] = {}", out[1]);
    }

    #[test]
    fn xavier_init_is_seeded_and_bounded() {
        let a = QNetwork::new(&[10, 20, 4], 42).unwrap();
        let b = QNetwork::new(&[10, 20, 4], 42).unwrap();
        let c = QNetwork::new(&[10, 20, 4], 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let limit1 = (6.0 / 30.0f64).sqrt();
        let limit2 = (6.0 / 24.0f64).sqrt();
        let params = a.params_flat();
        let (w1, rest) = params.split_at(200);
        let (b1, rest) = rest.split_at(20);
        let (w2, b2) = rest.split_at(80);
        assert!(w1.iter().all(|w| w.abs() <= limit1));
        assert!(w2.iter().all(|w| w.abs() <= limit2));
        assert!(b1.iter().chain(b2).all(|b| *b == 0.0));
        // Init actually spreads over the range instead of collapsing.
        assert!(w1.iter().any(|w| *w > 0.25 * limit1));
        assert!(w1.iter().any(|w| *w < -0.25 * limit1));
    }

    #[test]
    fn param_roundtrip_preserves_the_network() {
        let net = QNetwork::new(&[4, 6, 3], 9).unwrap();
        assert_eq!(net.param_count(), 4 * 6 + 6 + 6 * 3 + 3);
        let mut other = QNetwork::new(&[4, 6, 3], 10).unwrap();
        other.set_params_flat(&net.params_flat()).unwrap();
        assert_eq!(net, other);
        let x = [0.3, -0.2, 0.9, 0.0];
        assert_eq!(net.forward(&x).unwrap(), other.forward(&x).unwrap());
    }

    #[test]
    fn shape_errors_are_rejected() {
        assert!(QNetwork::new(&[5], 0).is_err());
        assert!(QNetwork::new(&[5, 0, 2], 0).is_err());
        let net = QNetwork::new(&[3, 4, 2], 0).unwrap();
        assert!(net.forward(&[1.0, 2.0]).is_err());
        let mut net = net;
        assert!(net.set_params_flat(&[0.0; 5]).is_err());
        assert!(net
            .train_batch(&[vec![0.0; 3]], &[2], &[1.0], 0.1)
            .is_err());
        assert!(net.train_batch(&[], &[], &[], 0.1).is_err());
    }

    #[test]
    fn analytic_gradient_matches_central_differences() {
        let net = QNetwork::new(&[4, 6, 3], 123).unwrap();
        let states = vec![
            vec![0.2, -0.5, 0.8, 0.1],
            vec![-0.3, 0.9, 0.0, -0.7],
            vec![0.6, 0.6, -0.2, 0.4],
        ];
        let actions = vec![0, 2, 1];
        let targets = vec![1.5, -0.5, 0.25];
        let (_, grads) = net.batch_gradient(&states, &actions, &targets).unwrap();
        let analytic = grads.flatten();
        let params = net.params_flat();
        let h = 1e-5;
        let mut worst = 0.0f64;
        for i in 0..params.len() {
            let mut probe = net.clone();
            let mut p = params.clone();
            p[i] += h;
            probe.set_params_flat(&p).unwrap();
            let up = probe.batch_loss(&states, &actions, &targets).unwrap();
            p[i] -= 2.0 * h;
            probe.set_params_flat(&p).unwrap();
            let down = probe.batch_loss(&states, &actions, &targets).unwrap();
            let numeric = (up - down) / (2.0 * h);
            let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((analytic[i] - numeric).abs() / denom);
        }
        assert!(worst < 1e-4, "worst relative gradient error {worst}");
    }

    #[test]
    fn training_reduces_loss_on_a_fixed_batch() {
        let mut net = QNetwork::new(&[3, 8, 2], 5).unwrap();
        let states = vec![vec![1.0, 0.0, -1.0], vec![0.0, 1.0, 1.0]];
        let actions = vec![0, 1];
        let targets = vec![2.0, -1.0];
        let first = net.batch_loss(&states, &actions, &targets).unwrap();
        let mut reported = Vec::new();
        for _ in 0..200 {
            reported.push(net.train_batch(&states, &actions, &targets, 0.05).unwrap());
        }
        let last = net.batch_loss(&states, &actions, &targets).unwrap();
        assert!((reported[0] - first).abs() < 1e-12, "first report is the pre-step loss");
        assert!(last < first * 0.01, "loss {first} -> {last}");
    }

    #[test]
    fn target_sync_requires_matching_shapes() {
        let src = QNetwork::new(&[3, 4, 2], 1).unwrap();
        let mut dst = QNetwork::new(&[3, 4, 2], 2).unwrap();
        dst.copy_params_from(&src).unwrap();
        assert_eq!(src, dst);
        let mut wrong = QNetwork::new(&[3, 5, 2], 3).unwrap();
        assert!(wrong.copy_params_from(&src).is_err());
    }
}
