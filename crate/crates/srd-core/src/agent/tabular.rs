//! Tabular Q-learning and the little deterministic chain MDP used to
//! sanity-check the learners against exact dynamic programming.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};

/// Dense Q-table over index-coded states and actions.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularQ {
    n_states: usize,
    n_actions: usize,
    q: Vec<f64>,
}

impl TabularQ {
    pub fn new(n_states: usize, n_actions: usize) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::config("state and action counts must be positive"));
        }
        Ok(TabularQ {
            n_states,
            n_actions,
            q: vec![0.0; n_states * n_actions],
        })
    }

    fn index(&self, state: usize, action: usize) -> Result<usize> {
        if state >= self.n_states {
            return Err(Error::contract(format!(
                "unknown state {state} (table has {})",
                self.n_states
            )));
        }
        if action >= self.n_actions {
            return Err(Error::contract(format!(
                "unknown action {action} (table has {})",
                self.n_actions
            )));
        }
        Ok(state * self.n_actions + action)
    }

    pub fn value(&self, state: usize, action: usize) -> Result<f64> {
        Ok(self.q[self.index(state, action)?])
    }

    /// Greedy action for a state; ties break to the lowest index.
    pub fn greedy(&self, state: usize) -> Result<usize> {
        self.index(state, 0)?;
        let row = &self.q[state * self.n_actions..(state + 1) * self.n_actions];
        let mut best = 0;
        for (a, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = a;
            }
        }
        Ok(best)
    }

    pub fn max_value(&self, state: usize) -> Result<f64> {
        let best = self.greedy(state)?;
        self.value(state, best)
    }

    /// One Q-learning update:
    /// `Q(s,a) += alpha * (r + gamma * max_a' Q(s',a') - Q(s,a))`,
    /// with the bootstrap term dropped when `next_state` is terminal.
    pub fn update(
        &mut self,
        state: usize,
        action: usize,
        reward: f64,
        next_state: Option<usize>,
        alpha: f64,
        gamma: f64,
    ) -> Result<()> {
        let idx = self.index(state, action)?;
        let bootstrap = match next_state {
            Some(s) => gamma * self.max_value(s)?,
            None => 0.0,
        };
        let target = reward + bootstrap;
        self.q[idx] += alpha * (target - self.q[idx]);
        Ok(())
    }
}

/// Deterministic 1-D corridor: states `0..n-1`, actions 0 = left and
/// 1 = right. Walking right from the last non-terminal state pays 1.0 and
/// ends the episode; walking left at the wall stays put. Everything else
/// pays nothing.
#[derive(Debug, Clone, Copy)]
pub struct ChainMdp {
    n_states: usize,
}

pub const CHAIN_ACTIONS: usize = 2;

impl ChainMdp {
    pub fn new(n_states: usize) -> Result<Self> {
        if n_states < 2 {
            return Err(Error::config("a chain needs at least two states"));
        }
        Ok(ChainMdp { n_states })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn start(&self) -> usize {
        0
    }

    pub fn terminal(&self) -> usize {
        self.n_states - 1
    }

    /// `(next_state, reward, done)`.
    pub fn step(&self, state: usize, action: usize) -> Result<(usize, f64, bool)> {
        if state >= self.n_states - 1 {
            return Err(Error::EnvUsage(format!(
                "state {state} is terminal or out of range"
            )));
        }
        match action {
            0 => Ok((state.saturating_sub(1), 0.0, false)),
            1 => {
                let next = state + 1;
                if next == self.terminal() {
                    Ok((next, 1.0, true))
                } else {
                    Ok((next, 0.0, false))
                }
            }
            _ => Err(Error::contract(format!("unknown chain action {action}"))),
        }
    }

    /// One-hot encoding for function-approximation learners.
    pub fn encode(&self, state: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.n_states];
        if state < self.n_states {
            v[state] = 1.0;
        }
        v
    }
}

/// Epsilon-greedy tabular Q-learning on the chain; episodes are capped so
/// a left-stuck policy cannot loop forever.
pub fn train_chain_tabular(
    mdp: &ChainMdp,
    episodes: u32,
    alpha: f64,
    gamma: f64,
    epsilon: f64,
    seed: u64,
) -> Result<TabularQ> {
    let mut q = TabularQ::new(mdp.n_states(), CHAIN_ACTIONS)?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let step_cap = 8 * mdp.n_states();
    for _ in 0..episodes {
        let mut state = mdp.start();
        for _ in 0..step_cap {
            let action = if rng.random::<f64>() < epsilon {
                rng.random_range(0..CHAIN_ACTIONS)
            } else {
                q.greedy(state)?
            };
            let (next, reward, done) = mdp.step(state, action)?;
            q.update(
                state,
                action,
                reward,
                if done { None } else { Some(next) },
                alpha,
                gamma,
            )?;
            if done {
                break;
            }
            state = next;
        }
    }
    Ok(q)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chain_dynamics_match_the_corridor_description() {
        let mdp = ChainMdp::new(5).unwrap();
        assert_eq!(mdp.step(0, 0).unwrap(), (0, 0.0, false)); // left wall
        assert_eq!(mdp.step(2, 0).unwrap(), (1, 0.0, false));
        assert_eq!(mdp.step(2, 1).unwrap(), (3, 0.0, false));
        assert_eq!(mdp.step(3, 1).unwrap(), (4, 1.0, true));
        assert!(mdp.step(4, 1).is_err());
        assert!(mdp.step(2, 7).is_err());
        assert_eq!(mdp.encode(2), vec![0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn unknown_states_and_actions_are_errors() {
        let mut q = TabularQ::new(3, 2).unwrap();
        assert!(q.value(3, 0).is_err());
        assert!(q.value(0, 2).is_err());
        assert!(q.update(5, 0, 1.0, None, 0.5, 0.9).is_err());
        assert!(q.update(0, 0, 1.0, Some(9), 0.5, 0.9).is_err());
        assert!(TabularQ::new(0, 2).is_err());
    }

    #[test]
    fn single_update_moves_by_alpha_toward_the_target() {
        let mut q = TabularQ::new(2, 2).unwrap();
        q.update(0, 1, 1.0, None, 0.5, 0.9).unwrap();
        assert_eq!(q.value(0, 1).unwrap(), 0.5);
        // Bootstrapped: target = 0 + 0.9 * max_a Q(0, a) = 0.45.
        q.update(1, 0, 0.0, Some(0), 0.5, 0.9).unwrap();
        assert_eq!(q.value(1, 0).unwrap(), 0.225);
    }

    #[test]
    fn greedy_ties_break_low_and_track_the_best_entry() {
        let mut q = TabularQ::new(1, 3).unwrap();
        assert_eq!(q.greedy(0).unwrap(), 0);
        q.update(0, 2, 1.0, None, 1.0, 0.9).unwrap();
        assert_eq!(q.greedy(0).unwrap(), 2);
        assert_eq!(q.max_value(0).unwrap(), 1.0);
    }

    /// On the 5-state chain with gamma = 0.9 the optimal right-hand values
    /// have the closed form Q*(s, right) = 0.9^(3 - s): one unit of reward
    /// discounted once per remaining step.
    #[test]
    fn chain_learning_converges_to_the_closed_form() {
        let mdp = ChainMdp::new(5).unwrap();
        let q = train_chain_tabular(&mdp, 4000, 0.2, 0.9, 0.2, 11).unwrap();
        for s in 0..4 {
            let expected = 0.9f64.powi(3 - s as i32);
            let got = q.value(s, 1).unwrap();
            assert!(
                (got - expected).abs() < 1e-4,
                "Q({s}, right) = {got}, want {expected}"
            );
            assert_eq!(q.greedy(s).unwrap(), 1, "state {s} should walk right");
        }
    }
}
