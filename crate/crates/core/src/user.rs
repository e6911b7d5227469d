//! The scripted aggregate market user.
//!
//! On ordinary steps the user supplies or withdraws according to how each
//! pool compares with the external market, then borrows or repays, keeps the
//! loan healthy, and adapts two precautionary buffers. On attack steps the
//! user runs the price-oracle attack sequence instead.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::market::MarketState;
use crate::protocol::{ActionOutcome, PoolState, Protocol, ProtocolError, Token, POOL_COUNT};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UserError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BehaviorParams {
    /// Weight of the collateral-factor differential in both attractiveness scores.
    pub cf_weight: f64,
    pub supply_fraction: f64,
    pub withdraw_fraction: f64,
    pub borrow_fraction: f64,
    pub repay_fraction: f64,
    pub buffer_up: f64,
    pub buffer_down: f64,
    pub buffer_min: f64,
    pub buffer_max: f64,
    pub initial_buffer: f64,
    /// Buffers relax after more than this many consecutive smooth steps.
    pub smooth_threshold: u32,
    pub initial_balance: f64,
    pub initial_deposit: f64,
}

impl Default for BehaviorParams {
    fn default() -> Self {
        Self {
            cf_weight: 0.1,
            supply_fraction: 0.1,
            withdraw_fraction: 0.1,
            borrow_fraction: 0.5,
            repay_fraction: 0.25,
            buffer_up: 0.1,
            buffer_down: 0.05,
            buffer_min: 0.1,
            buffer_max: 0.9,
            initial_buffer: 0.5,
            smooth_threshold: 20,
            initial_balance: 20_000.0,
            initial_deposit: 15_000.0,
        }
    }
}

impl BehaviorParams {
    pub fn validate(&self) -> Result<(), UserError> {
        let fractions = [
            ("supply_fraction", self.supply_fraction),
            ("withdraw_fraction", self.withdraw_fraction),
            ("borrow_fraction", self.borrow_fraction),
            ("repay_fraction", self.repay_fraction),
        ];
        for (name, f) in fractions {
            if !(f > 0.0 && f <= 1.0) {
                return Err(UserError::InvalidArgument(format!(
                    "{name} must lie in (0, 1], got {f}"
                )));
            }
        }
        if !(0.0 <= self.buffer_min
            && self.buffer_min <= self.initial_buffer
            && self.initial_buffer <= self.buffer_max
            && self.buffer_max <= 1.0)
        {
            return Err(UserError::InvalidArgument(
                "buffers must satisfy 0 <= min <= initial <= max <= 1".into(),
            ));
        }
        if self.cf_weight < 0.0 || self.buffer_up < 0.0 || self.buffer_down < 0.0 {
            return Err(UserError::InvalidArgument(
                "cf_weight and buffer steps must be non-negative".into(),
            ));
        }
        if !(self.initial_deposit >= 0.0 && self.initial_deposit <= self.initial_balance) {
            return Err(UserError::InvalidArgument(
                "initial_deposit must lie in [0, initial_balance]".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserState {
    pub wallet: Vec<f64>,
    /// Cumulative outside funds injected to mimic liquidations, per token.
    pub injected: Vec<f64>,
    pub supply_buffer: f64,
    pub borrow_buffer: f64,
    pub smooth_steps: u32,
}

impl UserState {
    pub fn new(params: &BehaviorParams) -> Self {
        Self {
            wallet: vec![params.initial_balance; POOL_COUNT],
            injected: vec![0.0; POOL_COUNT],
            supply_buffer: params.initial_buffer,
            borrow_buffer: params.initial_buffer,
            smooth_steps: 0,
        }
    }

    /// Raises or relaxes the buffers after a step. Any disturbance resets the
    /// smooth-step counter.
    pub fn update_buffers(&mut self, events: StepEvents, params: &BehaviorParams) {
        let up = |b: f64| (b + params.buffer_up).clamp(params.buffer_min, params.buffer_max);
        let disturbed = events.withdraw_restricted
            || events.borrow_restricted
            || events.liquidated
            || events.cf_changed;
        if disturbed {
            if events.withdraw_restricted || events.cf_changed {
                self.supply_buffer = up(self.supply_buffer);
            }
            if events.borrow_restricted || events.liquidated || events.cf_changed {
                self.borrow_buffer = up(self.borrow_buffer);
            }
            self.smooth_steps = 0;
            return;
        }
        self.smooth_steps += 1;
        if self.smooth_steps > params.smooth_threshold {
            let down = |b: f64| (b - params.buffer_down).clamp(params.buffer_min, params.buffer_max);
            self.supply_buffer = down(self.supply_buffer);
            self.borrow_buffer = down(self.borrow_buffer);
            self.smooth_steps = 0;
        }
    }
}

/// Disturbances the user experienced in one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StepEvents {
    pub withdraw_restricted: bool,
    pub borrow_restricted: bool,
    pub liquidated: bool,
    pub cf_changed: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum UserAction {
    Deposit,
    Withdraw,
    Borrow,
    Repay,
    Offset,
    Liquidation,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActionRecord {
    pub action: UserAction,
    pub pool: usize,
    pub outcome: ActionOutcome,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct UserStepReport {
    pub actions: Vec<ActionRecord>,
    pub events: StepEvents,
    /// The user was undercollateralized and walked away instead of acting.
    pub defaulting: bool,
}

impl UserStepReport {
    fn push(&mut self, action: UserAction, pool: usize, outcome: ActionOutcome) {
        self.actions.push(ActionRecord {
            action,
            pool,
            outcome,
        });
    }
}

/// `(R^S - R^{S,c}) + kappa (C - C^c)`; positive means the pool beats the market.
pub fn attractiveness_supply(
    pool: &PoolState,
    protocol: &Protocol,
    market: &MarketState,
    params: &BehaviorParams,
) -> f64 {
    let i = pool.asset.index();
    (pool.supply_rate(&protocol.params) - market.competing_supply_rate)
        + params.cf_weight * (pool.collateral_factor - market.competing_cf[i])
}

/// `(R^{B,c} - R^B) + kappa (C - C^c)`.
pub fn attractiveness_borrow(
    pool: &PoolState,
    protocol: &Protocol,
    market: &MarketState,
    params: &BehaviorParams,
) -> f64 {
    let i = pool.asset.index();
    (market.competing_borrow_rate - pool.borrow_rate(&protocol.params))
        + params.cf_weight * (pool.collateral_factor - market.competing_cf[i])
}

/// `(V^S, B^S)` in WETH.
pub fn user_portfolio_values(protocol: &Protocol, prices: &[f64]) -> (f64, f64) {
    (protocol.supply_value(prices), protocol.borrow_value(prices))
}

/// `max(0, B^S - V^S)`.
pub fn undercollateralized_value(protocol: &Protocol, prices: &[f64]) -> f64 {
    let (supply, borrow) = user_portfolio_values(protocol, prices);
    (borrow - supply).max(0.0)
}

/// Funds the pools with the user's opening deposits.
pub fn initial_deposits(
    user: &mut UserState,
    protocol: &mut Protocol,
    params: &BehaviorParams,
) -> Result<(), UserError> {
    for i in 0..protocol.pool_count() {
        protocol.deposit(&mut user.wallet, i, params.initial_deposit)?;
    }
    Ok(())
}

/// One ordinary (non-attack) step of user behavior, including the buffer update.
pub fn ordinary_step(
    user: &mut UserState,
    protocol: &mut Protocol,
    market: &MarketState,
    params: &BehaviorParams,
    cf_changed: bool,
) -> Result<UserStepReport, UserError> {
    let prices = market.prices.clone();
    let mut report = UserStepReport::default();
    report.events.cf_changed = cf_changed;

    if undercollateralized_value(protocol, &prices) > 0.0 {
        report.defaulting = true;
        user.update_buffers(report.events, params);
        return Ok(report);
    }

    // Supply side.
    for i in 0..protocol.pool_count() {
        let score = attractiveness_supply(&protocol.pools[i], protocol, market, params);
        if score > 0.0 {
            let amount = params.supply_fraction * (1.0 - user.supply_buffer) * user.wallet[i];
            let out = protocol.deposit(&mut user.wallet, i, amount)?;
            report.push(UserAction::Deposit, i, out);
        } else {
            let amount = params.withdraw_fraction * protocol.pools[i].supply_tokens;
            let out = protocol.withdraw(&mut user.wallet, i, amount, &prices)?;
            report.events.withdraw_restricted |= out.restricted;
            report.push(UserAction::Withdraw, i, out);
        }
    }

    // Borrow side.
    if protocol.is_healthy(&prices) {
        for i in 0..protocol.pool_count() {
            let score = attractiveness_borrow(&protocol.pools[i], protocol, market, params);
            if score > 0.0 {
                let amount = params.borrow_fraction * (1.0 - user.borrow_buffer)
                    * protocol.headroom(&prices)
                    / prices[i];
                let out = protocol.borrow(&mut user.wallet, i, amount, &prices)?;
                report.events.borrow_restricted |= out.restricted;
                report.push(UserAction::Borrow, i, out);
            } else if protocol.pools[i].borrow_tokens > 0.0 {
                let amount = params.repay_fraction * protocol.pools[i].borrow_tokens;
                let out = protocol.repay(&mut user.wallet, i, amount)?;
                report.push(UserAction::Repay, i, out);
            }
        }
    } else {
        restore_health(user, protocol, &prices, &mut report)?;
    }

    user.update_buffers(report.events, params);
    Ok(report)
}

/// Pool indices ordered by borrow value, largest first; ties keep index order.
fn by_borrow_value(protocol: &Protocol, prices: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..protocol.pool_count()).collect();
    order.sort_by(|&a, &b| {
        let va = protocol.pools[a].borrow_tokens * prices[a];
        let vb = protocol.pools[b].borrow_tokens * prices[b];
        vb.total_cmp(&va)
    });
    order
}

/// Repays from the wallet first; any remaining shortfall is covered by an
/// injected liquidation repayment. Both passes work through the largest
/// borrow positions first, as a liquidator would.
fn restore_health(
    user: &mut UserState,
    protocol: &mut Protocol,
    prices: &[f64],
    report: &mut UserStepReport,
) -> Result<(), UserError> {
    for i in by_borrow_value(protocol, prices) {
        let shortfall = protocol.borrow_value(prices) - protocol.borrowing_capacity(prices);
        if shortfall <= 0.0 {
            return Ok(());
        }
        if protocol.pools[i].borrow_tokens > 0.0 && user.wallet[i] > 0.0 {
            let out = protocol.repay(&mut user.wallet, i, shortfall / prices[i])?;
            report.push(UserAction::Repay, i, out);
        }
    }
    for i in by_borrow_value(protocol, prices) {
        if protocol.is_healthy(prices) {
            break;
        }
        let shortfall = protocol.borrow_value(prices) - protocol.borrowing_capacity(prices);
        if protocol.pools[i].borrow_tokens > 0.0 {
            let out = protocol.inject_liquidation_repay(
                &mut user.wallet,
                &mut user.injected,
                i,
                shortfall / prices[i],
                prices,
            )?;
            report.events.liquidated |= out.liquidation_triggered;
            report.push(UserAction::Liquidation, i, out);
        }
    }
    Ok(())
}

/// The price-oracle attack: inflate TKN, pledge it, strip other collateral
/// via offsets, borrow out WETH and USDC, then pull TKN back out.
pub fn execute_attack(
    user: &mut UserState,
    protocol: &mut Protocol,
    market: &mut MarketState,
    multiplier: f64,
    initial_balance: f64,
) -> Result<Vec<ActionRecord>, UserError> {
    let tkn = Token::Tkn.index();
    let mut report = UserStepReport::default();
    market.manipulate(Token::Tkn, multiplier);
    let prices = market.prices.clone();

    let all_tkn = user.wallet[tkn];
    let out = protocol.deposit(&mut user.wallet, tkn, all_tkn)?;
    report.push(UserAction::Deposit, tkn, out);

    let debt = protocol.pools[tkn].borrow_tokens;
    let out = protocol.offset(tkn, debt)?;
    report.push(UserAction::Offset, tkn, out);

    for token in [Token::Weth, Token::Usdc] {
        let i = token.index();
        let out = protocol.offset(i, protocol.pools[i].borrow_tokens)?;
        report.push(UserAction::Offset, i, out);
    }

    for token in [Token::Weth, Token::Usdc] {
        let i = token.index();
        let amount = protocol.pools[i].available_funds;
        let out = protocol.borrow(&mut user.wallet, i, amount, &prices)?;
        report.push(UserAction::Borrow, i, out);
    }

    let target = (initial_balance - user.wallet[tkn]).max(0.0);
    let out = protocol.withdraw(&mut user.wallet, tkn, target, &prices)?;
    report.push(UserAction::Withdraw, tkn, out);

    Ok(report.actions)
}

/// Whether the borrow leg of a flash-loan-funded oracle manipulation stays
/// overcollateralized: `(x_b - d2) / x_a < (x_b - d1) / (x_a + d3)`.
pub fn check_flashloan_feasibility(
    x_a: f64,
    x_b: f64,
    d1: f64,
    d2: f64,
    d3: f64,
) -> Result<bool, UserError> {
    let finite = [x_a, x_b, d1, d2, d3].iter().all(|v| v.is_finite());
    if !finite || !(x_a > 0.0 && x_b > 0.0) {
        return Err(UserError::InvalidArgument(
            "loan sizes must be positive and finite".into(),
        ));
    }
    if !(d2 > d1 && d1 > 0.0) {
        return Err(UserError::InvalidArgument(format!(
            "slippage terms must satisfy d2 > d1 > 0, got d1={d1}, d2={d2}"
        )));
    }
    if !(d3 > 0.0) {
        return Err(UserError::InvalidArgument(format!(
            "extra borrow d3 must be positive, got {d3}"
        )));
    }
    Ok((x_b - d2) / x_a < (x_b - d1) / (x_a + d3))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::MarketParams;
    use crate::protocol::ProtocolParams;

    fn setup() -> (UserState, Protocol, MarketState, BehaviorParams) {
        let params = BehaviorParams::default();
        let mut user = UserState::new(&params);
        let mut protocol = Protocol::new(ProtocolParams::default(), 0.8).unwrap();
        initial_deposits(&mut user, &mut protocol, &params).unwrap();
        let market = MarketState::new(&MarketParams::default());
        (user, protocol, market, params)
    }

    #[test]
    fn attractiveness_substitutions() {
        let (_, mut protocol, market, params) = setup();
        // U = 0.75 gives R^B = 0.16 and R^S = 0.084.
        protocol.pools[0].borrow_tokens = 0.75 * protocol.pools[0].supply_tokens;
        let pool = protocol.pools[0].clone();
        let s = attractiveness_supply(&pool, &protocol, &market, &params);
        assert!((s - 0.044).abs() < 1e-12);
        let b = attractiveness_borrow(&pool, &protocol, &market, &params);
        assert!(b.abs() < 1e-12);

        let mut lowered = pool.clone();
        lowered.collateral_factor = 0.7;
        assert!(attractiveness_supply(&lowered, &protocol, &market, &params) < s);
        assert!(attractiveness_borrow(&lowered, &protocol, &market, &params) < b);
    }

    #[test]
    fn attractiveness_zero_at_parity() {
        let (_, mut protocol, mut market, params) = setup();
        market.competing_cf[0] = 0.8;
        market.competing_supply_rate = 0.084;
        market.competing_borrow_rate = 0.16;
        protocol.pools[0].borrow_tokens = 0.75 * protocol.pools[0].supply_tokens;
        let pool = protocol.pools[0].clone();
        assert!(attractiveness_supply(&pool, &protocol, &market, &params).abs() < 1e-12);
        assert!(attractiveness_borrow(&pool, &protocol, &market, &params).abs() < 1e-12);
    }

    #[test]
    fn portfolio_values() {
        let protocol = Protocol::new(ProtocolParams::default(), 0.8).unwrap();
        assert_eq!(user_portfolio_values(&protocol, &[1.0; 3]), (0.0, 0.0));
        let mut protocol = protocol;
        protocol.pools[0].supply_tokens = 100.0;
        protocol.pools[1].supply_tokens = 50.0;
        assert_eq!(user_portfolio_values(&protocol, &[1.0; 3]).0, 150.0);
    }

    #[test]
    fn undercollateralized_cases() {
        let mut protocol = Protocol::new(ProtocolParams::default(), 0.8).unwrap();
        protocol.pools[0].supply_tokens = 100.0;
        protocol.pools[1].borrow_tokens = 120.0;
        assert!((undercollateralized_value(&protocol, &[1.0; 3]) - 20.0).abs() < 1e-12);
        protocol.pools[1].borrow_tokens = 90.0;
        assert_eq!(undercollateralized_value(&protocol, &[1.0; 3]), 0.0);
    }

    #[test]
    fn deposit_sizing_on_attractive_pool() {
        let (mut user, mut protocol, market, _) = setup();
        let params = BehaviorParams {
            supply_fraction: 0.25,
            ..Default::default()
        };
        // TKN is attractive at C = 0.8 against an external C of 0.
        assert_eq!(user.wallet[2], 5_000.0);
        let report = ordinary_step(&mut user, &mut protocol, &market, &params, false).unwrap();
        let dep = report
            .actions
            .iter()
            .find(|a| a.pool == 2 && a.action == UserAction::Deposit)
            .unwrap();
        assert!((dep.outcome.executed - 625.0).abs() < 1e-12);
    }

    #[test]
    fn buffers_relax_after_smooth_run() {
        let params = BehaviorParams::default();
        let mut user = UserState::new(&params);
        for _ in 0..20 {
            user.update_buffers(StepEvents::default(), &params);
            assert_eq!(user.supply_buffer, 0.5);
        }
        user.update_buffers(StepEvents::default(), &params);
        assert!((user.supply_buffer - 0.45).abs() < 1e-12);
        assert!((user.borrow_buffer - 0.45).abs() < 1e-12);
        assert_eq!(user.smooth_steps, 0);
    }

    #[test]
    fn cf_change_raises_both_buffers() {
        let params = BehaviorParams::default();
        let mut user = UserState::new(&params);
        user.smooth_steps = 7;
        let events = StepEvents {
            cf_changed: true,
            ..Default::default()
        };
        user.update_buffers(events, &params);
        assert!((user.supply_buffer - 0.6).abs() < 1e-12);
        assert!((user.borrow_buffer - 0.6).abs() < 1e-12);
        assert_eq!(user.smooth_steps, 0);
        for _ in 0..10 {
            user.update_buffers(events, &params);
        }
        assert_eq!(user.supply_buffer, 0.9);
    }

    #[test]
    fn unhealthy_user_is_liquidated() {
        let (mut user, mut protocol, mut market, params) = setup();
        for i in 0..2 {
            protocol.borrow(&mut user.wallet, i, 15_000.0, &[1.0; 3]).unwrap();
        }
        user.wallet = vec![0.0; 3];
        market.prices[2] = 0.2;
        assert!(!protocol.is_healthy(&market.prices));
        let report = ordinary_step(&mut user, &mut protocol, &market, &params, false).unwrap();
        assert!(report.events.liquidated);
        assert!(protocol.is_healthy(&market.prices));
        assert!(user.injected.iter().sum::<f64>() > 0.0);
        assert!((user.borrow_buffer - 0.6).abs() < 1e-12);
    }

    #[test]
    fn attack_sequence_leaves_loss_after_restore() {
        let (mut user, mut protocol, mut market, params) = setup();
        // Some protocol equity so that the pools hold more than the user's funds.
        for i in 0..3 {
            protocol.borrow(&mut user.wallet, i, 8_000.0, &[1.0; 3]).unwrap();
        }
        for _ in 0..60 {
            protocol.accrue_interest();
        }
        let actions =
            execute_attack(&mut user, &mut protocol, &mut market, 200.0, params.initial_balance)
                .unwrap();
        assert_eq!(market.prices[2], 200.0);
        assert_eq!(protocol.pools[0].available_funds, 0.0);
        assert_eq!(protocol.pools[1].available_funds, 0.0);
        assert_eq!(actions.len(), 7);
        market.advance(&[0.0; 3]);
        let (supply, borrow) = user_portfolio_values(&protocol, &market.prices);
        assert!(borrow > supply, "borrow {borrow} supply {supply}");
    }

    #[test]
    fn flashloan_predicate() {
        assert!(check_flashloan_feasibility(1000.0, 1000.0, 50.0, 100.0, 40.0).unwrap());
        assert!(check_flashloan_feasibility(1000.0, 1000.0, 50.0, 50.0, 40.0).is_err());
        assert!(check_flashloan_feasibility(1000.0, 1000.0, 50.0, 100.0, 0.0).is_err());
        assert!(!check_flashloan_feasibility(1000.0, 1000.0, 50.0, 100.0, 1e12).unwrap());
    }
}
