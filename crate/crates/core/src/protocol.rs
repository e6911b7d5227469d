//! Balance-sheet accounting for the lending pools.
//!
//! The protocol models a single aggregate market user, so the user's supply and
//! borrow token holdings in a pool are the pool totals. Every user-facing
//! action moves tokens between the user's wallet and a pool and reports the
//! executed amount in an [`ActionOutcome`]; caps are signalled, never errors.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Utilization above this value is clamped before the rate model is applied.
pub const UTILIZATION_CAP: f64 = 0.99;
/// Upper bound for any collateral factor.
pub const MAX_COLLATERAL_FACTOR: f64 = 0.99;
/// Relative slack used when comparing a borrow value against capacity.
pub const HEALTH_TOLERANCE: f64 = 1e-9;

pub const POOL_COUNT: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Token {
    Weth,
    Usdc,
    Tkn,
}

impl Token {
    pub const ALL: [Token; POOL_COUNT] = [Token::Weth, Token::Usdc, Token::Tkn];

    pub fn index(self) -> usize {
        match self {
            Token::Weth => 0,
            Token::Usdc => 1,
            Token::Tkn => 2,
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Token::Weth => "weth",
            Token::Usdc => "usdc",
            Token::Tkn => "tkn",
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("wallet holds {available} of pool {pool}'s token, {requested} requested")]
    InsufficientBalance {
        pool: usize,
        requested: f64,
        available: f64,
    },
    #[error("invalid protocol parameters: {0}")]
    InvalidParams(String),
}

/// One lending pool's books, in units of the pool's underlying token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolState {
    pub asset: Token,
    pub available_funds: f64,
    pub supply_tokens: f64,
    pub borrow_tokens: f64,
    pub bad_debt: f64,
    pub collateral_factor: f64,
}

impl PoolState {
    pub fn new(asset: Token, collateral_factor: f64) -> Self {
        Self {
            asset,
            available_funds: 0.0,
            supply_tokens: 0.0,
            borrow_tokens: 0.0,
            bad_debt: 0.0,
            collateral_factor,
        }
    }

    /// Borrow tokens over supply tokens; an empty pool has zero utilization.
    pub fn utilization(&self) -> f64 {
        if self.supply_tokens <= 0.0 {
            0.0
        } else {
            self.borrow_tokens / self.supply_tokens
        }
    }

    /// `F + B - S - D`.
    pub fn net_position(&self) -> f64 {
        self.available_funds + self.borrow_tokens - self.supply_tokens - self.bad_debt
    }

    /// Annual borrow rate `1 / (b (1 - U))` with `U` clamped at [`UTILIZATION_CAP`].
    pub fn borrow_rate(&self, params: &ProtocolParams) -> f64 {
        borrow_rate_at(self.utilization(), params)
    }

    /// Annual supply rate `R^B U (1 - spread)`, using the same clamped `U`.
    pub fn supply_rate(&self, params: &ProtocolParams) -> f64 {
        supply_rate_at(self.utilization(), params)
    }
}

pub fn borrow_rate_at(utilization: f64, params: &ProtocolParams) -> f64 {
    let u = utilization.clamp(0.0, UTILIZATION_CAP);
    1.0 / (params.rate_scale * (1.0 - u))
}

pub fn supply_rate_at(utilization: f64, params: &ProtocolParams) -> f64 {
    let u = utilization.clamp(0.0, UTILIZATION_CAP);
    borrow_rate_at(u, params) * u * (1.0 - params.spread)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolParams {
    /// Share of borrow interest retained by the protocol.
    pub spread: f64,
    /// Scale `b` of the borrow-rate curve.
    pub rate_scale: f64,
    /// Collateral-factor change applied by one raise or lower action.
    pub cf_step: f64,
    /// Step length in years.
    pub dt: f64,
}

impl Default for ProtocolParams {
    fn default() -> Self {
        Self {
            spread: 0.3,
            rate_scale: 25.0,
            cf_step: 0.05,
            dt: 1.0 / 365.0,
        }
    }
}

impl ProtocolParams {
    pub fn validate(&self) -> Result<(), ProtocolError> {
        if !(self.spread > 0.0 && self.spread < 1.0) {
            return Err(ProtocolError::InvalidParams(format!(
                "spread must lie in (0, 1), got {}",
                self.spread
            )));
        }
        if !(self.rate_scale > 0.0) {
            return Err(ProtocolError::InvalidParams(format!(
                "rate_scale must be positive, got {}",
                self.rate_scale
            )));
        }
        if !(self.cf_step > 0.0 && self.cf_step <= 0.1) {
            return Err(ProtocolError::InvalidParams(format!(
                "cf_step must lie in (0, 0.1], got {}",
                self.cf_step
            )));
        }
        if !(self.dt > 0.0) {
            return Err(ProtocolError::InvalidParams(format!(
                "dt must be positive, got {}",
                self.dt
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ActionOutcome {
    pub requested: f64,
    pub executed: f64,
    /// The request was capped by liquidity, health, holdings or wallet.
    pub restricted: bool,
    pub liquidation_triggered: bool,
}

impl ActionOutcome {
    fn capped(requested: f64, executed: f64) -> Self {
        let executed = executed.clamp(0.0, requested);
        Self {
            requested,
            executed,
            restricted: executed < requested,
            liquidation_triggered: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CfDirection {
    Lower,
    Keep,
    Raise,
}

impl CfDirection {
    fn sign(self) -> f64 {
        match self {
            CfDirection::Lower => -1.0,
            CfDirection::Keep => 0.0,
            CfDirection::Raise => 1.0,
        }
    }
}

fn check_amount(amount: f64) -> Result<(), ProtocolError> {
    if !amount.is_finite() || amount < 0.0 {
        return Err(ProtocolError::InvalidArgument(format!(
            "amount must be finite and non-negative, got {amount}"
        )));
    }
    Ok(())
}

/// The set of pools plus the rate-model parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Protocol {
    pub pools: Vec<PoolState>,
    pub params: ProtocolParams,
}

impl Protocol {
    pub fn new(params: ProtocolParams, initial_cf: f64) -> Result<Self, ProtocolError> {
        params.validate()?;
        if !(0.0..=MAX_COLLATERAL_FACTOR).contains(&initial_cf) {
            return Err(ProtocolError::InvalidParams(format!(
                "initial collateral factor {initial_cf} outside [0, {MAX_COLLATERAL_FACTOR}]"
            )));
        }
        Ok(Self {
            pools: Token::ALL
                .iter()
                .map(|&t| PoolState::new(t, initial_cf))
                .collect(),
            params,
        })
    }

    pub fn pool_count(&self) -> usize {
        self.pools.len()
    }

    fn check_pool(&self, pool: usize) -> Result<(), ProtocolError> {
        if pool >= self.pools.len() {
            return Err(ProtocolError::InvalidArgument(format!(
                "pool index {pool} out of range"
            )));
        }
        Ok(())
    }

    /// Supply value `V^S` in WETH.
    pub fn supply_value(&self, prices: &[f64]) -> f64 {
        self.pools
            .iter()
            .zip(prices)
            .map(|(p, &price)| p.supply_tokens * price)
            .sum()
    }

    /// Borrow value `B^S` in WETH.
    pub fn borrow_value(&self, prices: &[f64]) -> f64 {
        self.pools
            .iter()
            .zip(prices)
            .map(|(p, &price)| p.borrow_tokens * price)
            .sum()
    }

    /// Collateral-factor weighted supply value: the most the user may borrow, in WETH.
    pub fn borrowing_capacity(&self, prices: &[f64]) -> f64 {
        self.pools
            .iter()
            .zip(prices)
            .map(|(p, &price)| p.supply_tokens * price * p.collateral_factor)
            .sum()
    }

    /// Unused borrowing capacity in WETH, never negative.
    pub fn headroom(&self, prices: &[f64]) -> f64 {
        (self.borrowing_capacity(prices) - self.borrow_value(prices)).max(0.0)
    }

    pub fn is_healthy(&self, prices: &[f64]) -> bool {
        let capacity = self.borrowing_capacity(prices);
        self.borrow_value(prices) <= capacity * (1.0 + HEALTH_TOLERANCE) + HEALTH_TOLERANCE
    }

    /// Sum of per-pool net positions valued in WETH.
    pub fn total_net_position(&self, prices: &[f64]) -> f64 {
        self.pools
            .iter()
            .zip(prices)
            .map(|(p, &price)| p.net_position() * price)
            .sum()
    }

    pub fn total_bad_debt(&self, prices: &[f64]) -> f64 {
        self.pools
            .iter()
            .zip(prices)
            .map(|(p, &price)| p.bad_debt * price)
            .sum()
    }

    pub fn deposit(
        &mut self,
        wallet: &mut [f64],
        pool: usize,
        amount: f64,
    ) -> Result<ActionOutcome, ProtocolError> {
        check_amount(amount)?;
        self.check_pool(pool)?;
        if amount > wallet[pool] {
            return Err(ProtocolError::InsufficientBalance {
                pool,
                requested: amount,
                available: wallet[pool],
            });
        }
        let p = &mut self.pools[pool];
        p.available_funds += amount;
        p.supply_tokens += amount;
        wallet[pool] -= amount;
        Ok(ActionOutcome::capped(amount, amount))
    }

    /// Largest withdrawal from `pool` that keeps the borrow value within capacity.
    pub fn max_healthy_withdrawal(&self, pool: usize, prices: &[f64]) -> f64 {
        let p = &self.pools[pool];
        let borrow_value = self.borrow_value(prices);
        if borrow_value <= 0.0 || p.collateral_factor <= 0.0 {
            return p.supply_tokens;
        }
        let spare = self.borrowing_capacity(prices) - borrow_value;
        if spare <= 0.0 {
            return 0.0;
        }
        (spare / (prices[pool] * p.collateral_factor)).min(p.supply_tokens)
    }

    pub fn withdraw(
        &mut self,
        wallet: &mut [f64],
        pool: usize,
        amount: f64,
        prices: &[f64],
    ) -> Result<ActionOutcome, ProtocolError> {
        check_amount(amount)?;
        self.check_pool(pool)?;
        let limit = self
            .max_healthy_withdrawal(pool, prices)
            .min(self.pools[pool].available_funds)
            .min(self.pools[pool].supply_tokens);
        let outcome = ActionOutcome::capped(amount, amount.min(limit));
        let p = &mut self.pools[pool];
        p.available_funds -= outcome.executed;
        p.supply_tokens -= outcome.executed;
        wallet[pool] += outcome.executed;
        Ok(outcome)
    }

    pub fn borrow(
        &mut self,
        wallet: &mut [f64],
        pool: usize,
        amount: f64,
        prices: &[f64],
    ) -> Result<ActionOutcome, ProtocolError> {
        check_amount(amount)?;
        self.check_pool(pool)?;
        let capacity_limit = self.headroom(prices) / prices[pool];
        let limit = capacity_limit.min(self.pools[pool].available_funds);
        let outcome = ActionOutcome::capped(amount, amount.min(limit));
        let p = &mut self.pools[pool];
        p.available_funds -= outcome.executed;
        p.borrow_tokens += outcome.executed;
        wallet[pool] += outcome.executed;
        Ok(outcome)
    }

    pub fn repay(
        &mut self,
        wallet: &mut [f64],
        pool: usize,
        amount: f64,
    ) -> Result<ActionOutcome, ProtocolError> {
        check_amount(amount)?;
        self.check_pool(pool)?;
        let limit = self.pools[pool].borrow_tokens.min(wallet[pool]);
        let outcome = ActionOutcome::capped(amount, amount.min(limit));
        let p = &mut self.pools[pool];
        p.available_funds += outcome.executed;
        p.borrow_tokens -= outcome.executed;
        wallet[pool] -= outcome.executed;
        Ok(outcome)
    }

    /// Cancels debt against supply tokens of the same asset; funds do not move.
    pub fn offset(&mut self, pool: usize, amount: f64) -> Result<ActionOutcome, ProtocolError> {
        check_amount(amount)?;
        self.check_pool(pool)?;
        let p = &mut self.pools[pool];
        let limit = p.borrow_tokens.min(p.supply_tokens);
        let outcome = ActionOutcome::capped(amount, amount.min(limit));
        p.borrow_tokens -= outcome.executed;
        p.supply_tokens -= outcome.executed;
        Ok(outcome)
    }

    /// Stand-in for a liquidation: an outside party funds a repayment of up to
    /// `shortfall` tokens on the user's behalf. The injected amount is added to
    /// `injected[pool]` so conservation checks can account for it.
    pub fn inject_liquidation_repay(
        &mut self,
        wallet: &mut [f64],
        injected: &mut [f64],
        pool: usize,
        shortfall: f64,
        prices: &[f64],
    ) -> Result<ActionOutcome, ProtocolError> {
        check_amount(shortfall)?;
        self.check_pool(pool)?;
        if self.is_healthy(prices) {
            return Ok(ActionOutcome::capped(shortfall, 0.0));
        }
        let amount = shortfall.min(self.pools[pool].borrow_tokens);
        wallet[pool] += amount;
        injected[pool] += amount;
        let mut outcome = self.repay(wallet, pool, amount)?;
        outcome.requested = shortfall;
        outcome.restricted = outcome.executed < shortfall;
        outcome.liquidation_triggered = outcome.executed > 0.0;
        Ok(outcome)
    }

    /// Grows supply and borrow tokens by one step of interest.
    pub fn accrue_interest(&mut self) {
        let params = self.params.clone();
        for p in &mut self.pools {
            let supply_rate = p.supply_rate(&params);
            let borrow_rate = p.borrow_rate(&params);
            p.supply_tokens *= 1.0 + supply_rate * params.dt;
            p.borrow_tokens *= 1.0 + borrow_rate * params.dt;
        }
    }

    /// If the user's borrow value exceeds their supply value the loan is
    /// written off: borrow and supply tokens are wiped and the shortfall is
    /// booked as bad debt, split across pools by borrow value. Returns the
    /// shortfall in WETH.
    pub fn recognize_default(&mut self, prices: &[f64]) -> f64 {
        let borrow_value = self.borrow_value(prices);
        let supply_value = self.supply_value(prices);
        if borrow_value <= supply_value {
            return 0.0;
        }
        let shortfall = borrow_value - supply_value;
        for (p, &price) in self.pools.iter_mut().zip(prices) {
            let share = p.borrow_tokens * price / borrow_value;
            p.bad_debt += shortfall * share / price;
            p.borrow_tokens = 0.0;
            p.supply_tokens = 0.0;
        }
        shortfall
    }

    /// Applies a governance action to one pool and returns the new factor.
    pub fn set_collateral_factor(&mut self, pool: usize, direction: CfDirection) -> f64 {
        let step = self.params.cf_step;
        let p = &mut self.pools[pool];
        if direction != CfDirection::Keep {
            let raw = p.collateral_factor + step * direction.sign();
            // Snap to the 1e-12 grid so repeated steps do not accumulate drift.
            p.collateral_factor = ((raw * 1e12).round() / 1e12).clamp(0.0, MAX_COLLATERAL_FACTOR);
        }
        p.collateral_factor
    }
}
