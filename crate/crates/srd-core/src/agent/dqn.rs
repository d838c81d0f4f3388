//! DQN with a target network: epsilon-greedy exploration on a linear
//! schedule, uniform replay, and TD(0) targets `r + gamma * max_a' Q'(s', a')`
//! (bare `r` on terminal transitions).

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::agent::network::QNetwork;
use crate::agent::replay::ReplayBuffer;
use crate::env::Transition;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub gamma: f64,
    pub learning_rate: f64,
    /// Exploration schedule: linear from `epsilon_start` to `epsilon_end`
    /// over `epsilon_decay_steps` action selections, then flat.
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_decay_steps: u64,
    pub buffer_capacity: usize,
    pub batch_size: usize,
    /// Target network refresh period, counted in gradient steps.
    pub target_sync_interval: u64,
    pub hidden_sizes: Vec<usize>,
    pub episodes: u32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: 0.9,
            learning_rate: 1e-3,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_steps: 5000,
            buffer_capacity: 10_000,
            batch_size: 64,
            target_sync_interval: 250,
            hidden_sizes: vec![128, 128],
            episodes: 1500,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::config("gamma must lie in [0, 1]"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning rate must be positive"));
        }
        for eps in [self.epsilon_start, self.epsilon_end] {
            if !(0.0..=1.0).contains(&eps) {
                return Err(Error::config("epsilon bounds must lie in [0, 1]"));
            }
        }
        if self.epsilon_end > self.epsilon_start {
            return Err(Error::config("epsilon must not grow over time"));
        }
        if self.epsilon_decay_steps == 0 {
            return Err(Error::config("epsilon_decay_steps must be positive"));
        }
        if self.batch_size == 0 || self.buffer_capacity < self.batch_size {
            return Err(Error::config(
                "buffer capacity must hold at least one batch",
            ));
        }
        if self.target_sync_interval == 0 {
            return Err(Error::config("target_sync_interval must be positive"));
        }
        if self.episodes == 0 {
            return Err(Error::config("episodes must be positive"));
        }
        if self.hidden_sizes.iter().any(|h| *h == 0) {
            return Err(Error::config("hidden layer sizes must be positive"));
        }
        Ok(())
    }
}

pub struct DqnAgent {
    online: QNetwork,
    target: QNetwork,
    buffer: ReplayBuffer,
    config: TrainConfig,
    rng: ChaCha12Rng,
    /// Action selections so far; drives the epsilon schedule.
    actions_taken: u64,
    /// Gradient steps so far; drives target syncing.
    updates: u64,
}

impl DqnAgent {
    pub fn new(state_dim: usize, action_count: usize, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if state_dim == 0 || action_count == 0 {
            return Err(Error::config("state and action dimensions must be positive"));
        }
        let mut sizes = Vec::with_capacity(config.hidden_sizes.len() + 2);
        sizes.push(state_dim);
        sizes.extend_from_slice(&config.hidden_sizes);
        sizes.push(action_count);
        let online = QNetwork::new(&sizes, config.seed)?;
        let target = online.clone();
        let buffer = ReplayBuffer::new(config.buffer_capacity)?;
        let rng = ChaCha12Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
        Ok(DqnAgent {
            online,
            target,
            buffer,
            config,
            rng,
            actions_taken: 0,
            updates: 0,
        })
    }

    /// Wrap an already-trained network (checkpoint restore). Exploration
    /// starts fully decayed.
    pub fn from_network(online: QNetwork, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let target = online.clone();
        let buffer = ReplayBuffer::new(config.buffer_capacity)?;
        let rng = ChaCha12Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
        let actions_taken = config.epsilon_decay_steps;
        Ok(DqnAgent {
            online,
            target,
            buffer,
            config,
            rng,
            actions_taken,
            updates: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn online(&self) -> &QNetwork {
        &self.online
    }

    pub fn buffer_len(&self) -> usize {
        self.buffer.len()
    }

    /// Current exploration rate (before the next action is drawn).
    pub fn epsilon(&self) -> f64 {
        let c = &self.config;
        if self.actions_taken >= c.epsilon_decay_steps {
            return c.epsilon_end;
        }
        let frac = self.actions_taken as f64 / c.epsilon_decay_steps as f64;
        c.epsilon_start + (c.epsilon_end - c.epsilon_start) * frac
    }

    /// Greedy argmax under the online network; ties break to the lowest
    /// action index.
    pub fn greedy_action(&self, state: &[f64]) -> Result<usize> {
        let q = self.online.forward(state)?;
        let mut best = 0;
        for (i, v) in q.iter().enumerate() {
            if *v > q[best] {
                best = i;
            }
        }
        Ok(best)
    }

    /// Epsilon-greedy selection; advances the exploration schedule.
    pub fn select_action(&mut self, state: &[f64]) -> Result<usize> {
        let eps = self.epsilon();
        self.actions_taken += 1;
        if self.rng.random::<f64>() < eps {
            Ok(self.rng.random_range(0..self.online.output_dim()))
        } else {
            self.greedy_action(state)
        }
    }

    pub fn push_transition(&mut self, transition: Transition) {
        self.buffer.push(transition);
    }

    pub fn sync_target(&mut self) {
        self.target
            .copy_params_from(&self.online)
            .expect("online and target always share a shape");
    }

    /// One learning step: sample a batch, build TD targets against the
    /// target network, and descend. Returns `None` while the buffer is
    /// still smaller than a batch, otherwise the pre-step loss. A
    /// non-finite loss or target aborts with an arithmetic error.
    pub fn train_step(&mut self) -> Result<Option<f64>> {
        if self.buffer.len() < self.config.batch_size {
            return Ok(None);
        }
        let batch = self.buffer.sample(&mut self.rng, self.config.batch_size)?;
        let mut states = Vec::with_capacity(batch.len());
        let mut actions = Vec::with_capacity(batch.len());
        let mut targets = Vec::with_capacity(batch.len());
        for tr in &batch {
            let y = if tr.done {
                tr.reward
            } else {
                let q_next = self.target.forward(&tr.next_state)?;
                let best = q_next.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                tr.reward + self.config.gamma * best
            };
            if !y.is_finite() {
                return Err(Error::arithmetic(format!(
                    "non-finite TD target {y}; aborting instead of diverging"
                )));
            }
            states.push(tr.state.clone());
            actions.push(tr.action);
            targets.push(y);
        }
        let loss = self
            .online
            .train_batch(&states, &actions, &targets, self.config.learning_rate)?;
        self.updates += 1;
        if self.updates % self.config.target_sync_interval == 0 {
            self.sync_target();
        }
        Ok(Some(loss))
    }
}
