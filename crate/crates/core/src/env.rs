//! The governed lending market as a step/reset environment.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{action_count, decode_action, encode_state, AgentError};
use crate::market::{EpisodeRandomness, MarketError, MarketParams, MarketState};
use crate::protocol::{Protocol, ProtocolError, ProtocolParams, MAX_COLLATERAL_FACTOR, POOL_COUNT};
use crate::user::{execute_attack, initial_deposits, ordinary_step, BehaviorParams, UserError, UserState};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("episode is over; call reset first")]
    EpisodeOver,
    #[error("randomness covers {have} steps, episode needs {need}")]
    ShortRandomness { have: usize, need: usize },
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    User(#[from] UserError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Market(#[from] MarketError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    /// Starting collateral factor for every pool; also the benchmark's fixed value.
    pub initial_cf: f64,
    pub protocol: ProtocolParams,
    pub market: MarketParams,
    pub behavior: BehaviorParams,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            initial_cf: 0.8,
            protocol: ProtocolParams::default(),
            market: MarketParams::default(),
            behavior: BehaviorParams::default(),
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        self.protocol.validate()?;
        self.market.validate()?;
        self.behavior.validate()?;
        if !(0.0..=MAX_COLLATERAL_FACTOR).contains(&self.initial_cf) {
            return Err(EnvError::InvalidConfig(format!(
                "initial_cf {} outside [0, {MAX_COLLATERAL_FACTOR}]",
                self.initial_cf
            )));
        }
        Ok(())
    }
}

/// Flags raised during one environment step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepFlags {
    pub attack: bool,
    pub cf_changed: bool,
    pub withdraw_restricted: bool,
    pub borrow_restricted: bool,
    pub liquidated: bool,
    /// A loss was written off as bad debt this step.
    pub default: bool,
    pub bankrupt: bool,
}

/// State after one step, valued at the post-update prices.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub action: usize,
    pub prices: [f64; POOL_COUNT],
    pub collateral_factors: [f64; POOL_COUNT],
    pub utilization: [f64; POOL_COUNT],
    /// Pool net positions in WETH.
    pub net_positions: [f64; POOL_COUNT],
    pub net_total: f64,
    pub bad_debt_total: f64,
    /// Change in total net position over the step, in WETH.
    pub reward: f64,
    pub flags: StepFlags,
}

pub struct LendingEnv {
    config: EnvConfig,
    pub protocol: Protocol,
    pub market: MarketState,
    pub user: UserState,
    randomness: EpisodeRandomness,
    max_steps: usize,
    step: usize,
    net_total: f64,
    initial_net_total: f64,
    done: bool,
}

impl LendingEnv {
    /// Builds an environment in its opening state for the given episode.
    pub fn new(config: EnvConfig, randomness: EpisodeRandomness, max_steps: usize) -> Result<Self, EnvError> {
        config.validate()?;
        let mut env = Self {
            protocol: Protocol::new(config.protocol.clone(), config.initial_cf)?,
            market: MarketState::new(&config.market),
            user: UserState::new(&config.behavior),
            config,
            randomness: EpisodeRandomness {
                seed: 0,
                attack_steps: Vec::new(),
                noise: Vec::new(),
            },
            max_steps,
            step: 0,
            net_total: 0.0,
            initial_net_total: 0.0,
            done: false,
        };
        env.reset(randomness, max_steps)?;
        Ok(env)
    }

    /// Restores the opening balances (full wallets, standard deposits,
    /// initial collateral factors, unit prices) and installs `randomness`.
    pub fn reset(&mut self, randomness: EpisodeRandomness, max_steps: usize) -> Result<Vec<f64>, EnvError> {
        if let Some(short) = randomness.noise.iter().find(|n| n.len() < max_steps) {
            return Err(EnvError::ShortRandomness {
                have: short.len(),
                need: max_steps,
            });
        }
        if randomness.noise.len() != POOL_COUNT {
            return Err(EnvError::InvalidConfig(format!(
                "randomness has {} noise streams, {POOL_COUNT} needed",
                randomness.noise.len()
            )));
        }
        self.protocol = Protocol::new(self.config.protocol.clone(), self.config.initial_cf)?;
        self.market = MarketState::new(&self.config.market);
        self.user = UserState::new(&self.config.behavior);
        initial_deposits(&mut self.user, &mut self.protocol, &self.config.behavior)?;
        self.randomness = randomness;
        self.max_steps = max_steps;
        self.step = 0;
        self.net_total = self.protocol.total_net_position(&self.market.prices);
        self.initial_net_total = self.net_total;
        self.done = false;
        Ok(self.observe())
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn randomness(&self) -> &EpisodeRandomness {
        &self.randomness
    }

    pub fn observe(&self) -> Vec<f64> {
        encode_state(&self.protocol, &self.market)
    }

    pub fn action_count(&self) -> usize {
        action_count(self.protocol.pool_count())
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn net_total(&self) -> f64 {
        self.net_total
    }

    pub fn initial_net_total(&self) -> f64 {
        self.initial_net_total
    }

    /// Governance action, then attack or user reaction, default recognition,
    /// interest accrual and the price update. The episode ends at the step
    /// limit or as soon as the total net position turns negative.
    pub fn step(&mut self, action: usize) -> Result<StepRecord, EnvError> {
        if self.done {
            return Err(EnvError::EpisodeOver);
        }
        let t = self.step;
        let mut flags = StepFlags::default();

        let directions = decode_action(action, self.protocol.pool_count())?;
        for (pool, &dir) in directions.iter().enumerate() {
            let before = self.protocol.pools[pool].collateral_factor;
            let after = self.protocol.set_collateral_factor(pool, dir);
            flags.cf_changed |= after != before;
        }

        if self.randomness.is_attack_step(t) {
            flags.attack = true;
            execute_attack(
                &mut self.user,
                &mut self.protocol,
                &mut self.market,
                self.config.market.attack_multiplier,
                self.config.behavior.initial_balance,
            )?;
        } else {
            let report = ordinary_step(
                &mut self.user,
                &mut self.protocol,
                &self.market,
                &self.config.behavior,
                flags.cf_changed,
            )?;
            flags.withdraw_restricted = report.events.withdraw_restricted;
            flags.borrow_restricted = report.events.borrow_restricted;
            flags.liquidated = report.events.liquidated;
        }

        flags.default = self.protocol.recognize_default(&self.market.prices) > 0.0;
        self.protocol.accrue_interest();
        let z: Vec<f64> = self.randomness.noise.iter().map(|n| n[t]).collect();
        self.market.advance(&z);

        let prices = &self.market.prices;
        let net_total = self.protocol.total_net_position(prices);
        let reward = net_total - self.net_total;
        self.net_total = net_total;
        self.step += 1;
        flags.bankrupt = net_total < 0.0;
        self.done = flags.bankrupt || self.step >= self.max_steps;

        let pools = &self.protocol.pools;
        Ok(StepRecord {
            step: t,
            action,
            prices: std::array::from_fn(|i| prices[i]),
            collateral_factors: std::array::from_fn(|i| pools[i].collateral_factor),
            utilization: std::array::from_fn(|i| pools[i].utilization()),
            net_positions: std::array::from_fn(|i| pools[i].net_position() * prices[i]),
            net_total,
            bad_debt_total: self.protocol.total_bad_debt(prices),
            reward,
            flags,
        })
    }
}

/// The action that keeps every collateral factor unchanged.
pub fn keep_all_action(pools: usize) -> usize {
    (action_count(pools) - 1) / 2
}
