//! Deep Q-learning governance agent.
//!
//! The agent observes ten features per pool and picks one joint action that
//! raises, lowers or keeps every pool's collateral factor at once, so the
//! action space has `3^pools` entries.

pub mod adam;
pub mod epsilon;
pub mod network;
pub mod replay;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::market::MarketState;
use crate::protocol::{CfDirection, Protocol, UTILIZATION_CAP};

pub use adam::{AdamConfig, AdamState};
pub use epsilon::{EpsilonConfig, EpsilonSchedule};
pub use network::{LossAndGradients, QNetwork};
pub use replay::{Batch, PrioritizedReplay, Transition, PRIORITY_EPSILON};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AgentError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("replay memory holds {have} transitions, {need} needed")]
    NotReady { have: usize, need: usize },
}

pub const FEATURES_PER_POOL: usize = 10;
/// Scale applied to pool balances in the feature vector (the opening deposit).
pub const BALANCE_SCALE: f64 = 15_000.0;

/// Ten features per pool in fixed order: log price, volatility estimate,
/// collateral factor, utilization, supply rate, borrow rate, then available
/// funds, supply tokens, borrow tokens and bad debt scaled by [`BALANCE_SCALE`].
///
/// Utilization is capped at [`UTILIZATION_CAP`] as in the rate model. A pool
/// whose deposits are withdrawn while loans remain open has B/S without
/// bound (1e8 has been observed), and the network extrapolates such inputs
/// into exploding Q-values.
pub fn encode_state(protocol: &Protocol, market: &MarketState) -> Vec<f64> {
    let mut features = Vec::with_capacity(FEATURES_PER_POOL * protocol.pool_count());
    for (i, pool) in protocol.pools.iter().enumerate() {
        features.extend_from_slice(&[
            market.prices[i].ln(),
            market.vol_estimate[i],
            pool.collateral_factor,
            pool.utilization().min(UTILIZATION_CAP),
            pool.supply_rate(&protocol.params),
            pool.borrow_rate(&protocol.params),
            pool.available_funds / BALANCE_SCALE,
            pool.supply_tokens / BALANCE_SCALE,
            pool.borrow_tokens / BALANCE_SCALE,
            pool.bad_debt / BALANCE_SCALE,
        ]);
    }
    assert!(
        features.iter().all(|f| f.is_finite()),
        "non-finite state features: {features:?}"
    );
    features
}

pub fn action_count(pools: usize) -> usize {
    3usize.pow(pools as u32)
}

/// Base-3 digits of `index`, most significant digit for pool 0.
/// Digit 0 lowers, 1 keeps, 2 raises.
pub fn decode_action(index: usize, pools: usize) -> Result<Vec<CfDirection>, AgentError> {
    if index >= action_count(pools) {
        return Err(AgentError::InvalidArgument(format!(
            "action {index} out of range for {pools} pools"
        )));
    }
    let mut digits = vec![CfDirection::Keep; pools];
    let mut rest = index;
    for slot in digits.iter_mut().rev() {
        *slot = match rest % 3 {
            0 => CfDirection::Lower,
            1 => CfDirection::Keep,
            _ => CfDirection::Raise,
        };
        rest /= 3;
    }
    Ok(digits)
}

pub fn encode_action(directions: &[CfDirection]) -> usize {
    directions.iter().fold(0, |acc, d| {
        acc * 3
            + match d {
                CfDirection::Lower => 0,
                CfDirection::Keep => 1,
                CfDirection::Raise => 2,
            }
    })
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Epsilon-greedy choice over `q_values`.
pub fn select_action<R: Rng + ?Sized>(q_values: &[f64], epsilon: f64, rng: &mut R) -> usize {
    if rng.random::<f64>() < epsilon {
        rng.random_range(0..q_values.len())
    } else {
        argmax(q_values)
    }
}

/// `r` for terminal transitions, otherwise `r + gamma * max_a Q_target(s', a)`.
pub fn td_target(reward: f64, done: bool, next_q: &[f64], gamma: f64) -> f64 {
    if done {
        reward
    } else {
        reward + gamma * next_q.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentConfig {
    pub hidden: Vec<usize>,
    pub batch_size: usize,
    pub gamma: f64,
    pub replay_capacity: usize,
    pub per_alpha: f64,
    pub per_beta_start: f64,
    pub per_beta_end: f64,
    /// Action steps between target syncs once the target network is on.
    pub target_sync_interval: u64,
    /// Rewards are divided by this before learning.
    pub reward_scale: f64,
    pub adam: AdamConfig,
    pub epsilon: EpsilonConfig,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256],
            batch_size: 64,
            gamma: 0.95,
            replay_capacity: 100_000,
            per_alpha: 0.6,
            per_beta_start: 0.4,
            per_beta_end: 1.0,
            target_sync_interval: 450,
            reward_scale: 1_000.0,
            adam: AdamConfig::default(),
            epsilon: EpsilonConfig::default(),
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<(), AgentError> {
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(AgentError::InvalidArgument("hidden layers must be non-empty".into()));
        }
        if self.batch_size == 0 || self.replay_capacity < self.batch_size {
            return Err(AgentError::InvalidArgument(
                "need 0 < batch_size <= replay_capacity".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(AgentError::InvalidArgument("gamma must lie in [0, 1]".into()));
        }
        if self.target_sync_interval == 0 || !(self.reward_scale > 0.0) {
            return Err(AgentError::InvalidArgument(
                "target_sync_interval and reward_scale must be positive".into(),
            ));
        }
        self.epsilon.validate()
    }

    pub fn layer_dims(&self, pools: usize) -> Vec<usize> {
        let mut dims = vec![FEATURES_PER_POOL * pools];
        dims.extend_from_slice(&self.hidden);
        dims.push(action_count(pools));
        dims
    }
}

/// Online and target networks, optimizer, replay memory and exploration state.
#[derive(Clone, Debug)]
pub struct DqnAgent {
    pub config: AgentConfig,
    pub online: QNetwork,
    pub target: QNetwork,
    pub adam: AdamState,
    pub replay: PrioritizedReplay,
    pub epsilon: EpsilonSchedule,
    steps_since_sync: u64,
    rng: ChaCha8Rng,
}

impl DqnAgent {
    pub fn new(config: AgentConfig, pools: usize, seed: u64) -> Result<Self, AgentError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let online = QNetwork::new(&config.layer_dims(pools), &mut rng)?;
        Self::from_network(config, online, rng)
    }

    fn from_network(config: AgentConfig, online: QNetwork, rng: ChaCha8Rng) -> Result<Self, AgentError> {
        let target = online.clone();
        let adam = AdamState::new(config.adam.clone(), online.params().len());
        let replay = PrioritizedReplay::new(config.replay_capacity, config.per_alpha)?;
        let epsilon = EpsilonSchedule::new(config.epsilon.clone());
        Ok(Self {
            config,
            online,
            target,
            adam,
            replay,
            epsilon,
            steps_since_sync: 0,
            rng,
        })
    }

    /// Rebuilds a learner from saved state. Replay memory starts empty.
    pub fn restore(
        config: AgentConfig,
        online: QNetwork,
        adam: AdamState,
        epsilon: EpsilonSchedule,
        steps_since_sync: u64,
        seed: u64,
    ) -> Result<Self, AgentError> {
        let mut agent = Self::from_network(config, online, ChaCha8Rng::seed_from_u64(seed))?;
        if adam.m.len() != agent.online.params().len() {
            return Err(AgentError::InvalidArgument(
                "optimizer state does not match network size".into(),
            ));
        }
        agent.adam = adam;
        agent.epsilon = epsilon;
        agent.steps_since_sync = steps_since_sync;
        Ok(agent)
    }

    /// Action steps since the last target sync.
    pub fn steps_since_sync(&self) -> u64 {
        self.steps_since_sync
    }

    pub fn act(&mut self, state: &[f64]) -> Result<usize, AgentError> {
        let q = self.online.forward(state)?;
        Ok(select_action(&q, self.epsilon.value(), &mut self.rng))
    }

    pub fn remember(&mut self, transition: Transition) {
        self.replay.push(transition);
    }

    /// Advances exploration by one action step and keeps the target network
    /// in sync: copied when it switches on, then every `target_sync_interval`
    /// steps.
    pub fn end_action_step(&mut self) -> Result<(), AgentError> {
        let was_enabled = self.epsilon.target_enabled;
        self.epsilon.tick();
        if self.epsilon.target_enabled {
            self.steps_since_sync += 1;
            if !was_enabled || self.steps_since_sync >= self.config.target_sync_interval {
                self.target.sync_from(&self.online)?;
                self.steps_since_sync = 0;
            }
        }
        Ok(())
    }

    /// One prioritized minibatch update. Returns `Ok(None)` while the replay
    /// memory is smaller than a batch.
    pub fn learn(&mut self, per_beta: f64) -> Result<Option<f64>, AgentError> {
        let batch_size = self.config.batch_size;
        let batch = match self.replay.sample(batch_size, per_beta, &mut self.rng) {
            Ok(b) => b,
            Err(AgentError::NotReady { .. }) => return Ok(None),
            Err(e) => return Err(e),
        };
        let in_dim = self.online.input_dim();
        let out_dim = self.online.output_dim();
        let mut states = Vec::with_capacity(batch_size * in_dim);
        let mut next_states = Vec::with_capacity(batch_size * in_dim);
        let mut actions = Vec::with_capacity(batch_size);
        for &i in &batch.indices {
            let t = self.replay.get(i);
            states.extend_from_slice(&t.state);
            next_states.extend_from_slice(&t.next_state);
            actions.push(t.action);
        }
        let bootstrap = if self.epsilon.target_enabled {
            &self.target
        } else {
            &self.online
        };
        let next_q = bootstrap.forward_batch(&next_states, batch_size)?;
        let targets: Vec<f64> = batch
            .indices
            .iter()
            .enumerate()
            .map(|(r, &i)| {
                let t = self.replay.get(i);
                td_target(
                    t.reward,
                    t.done,
                    &next_q[r * out_dim..(r + 1) * out_dim],
                    self.config.gamma,
                )
            })
            .collect();
        let result = self
            .online
            .loss_and_gradients(&states, &actions, &targets, &batch.weights)?;
        if !result.loss.is_finite() {
            return Err(AgentError::NonFinite(format!("loss is {}", result.loss)));
        }
        self.adam.step(self.online.params_mut(), &result.gradients)?;
        if !self.online.is_finite() {
            return Err(AgentError::NonFinite("network parameters".into()));
        }
        self.replay
            .update_priorities(&batch.indices, &result.td_errors)?;
        Ok(Some(result.loss))
    }
}
