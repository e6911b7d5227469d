//! Stochastic price paths, external market constants and the attack timetable.

use std::collections::VecDeque;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{Token, POOL_COUNT};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MarketError {
    #[error("invalid market parameters: {0}")]
    InvalidParams(String),
}

/// Per-step volatility as a function of the step index.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Volatility {
    Constant(f64),
    /// `floor + curvature * (t - center)^2`
    Parabolic {
        floor: f64,
        center: f64,
        curvature: f64,
    },
}

impl Volatility {
    pub fn at(&self, step: usize) -> f64 {
        match *self {
            Volatility::Constant(s) => s,
            Volatility::Parabolic {
                floor,
                center,
                curvature,
            } => {
                let d = step as f64 - center;
                floor + curvature * d * d
            }
        }
    }
}

/// Piecewise-constant GBM parameters. Drift and volatility are per step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GbmSchedule {
    pub drift: f64,
    pub volatility: Volatility,
}

impl GbmSchedule {
    pub fn constant(drift: f64, volatility: f64) -> Self {
        Self {
            drift,
            volatility: Volatility::Constant(volatility),
        }
    }

    pub fn drift_at(&self, _step: usize) -> f64 {
        self.drift
    }

    pub fn vol_at(&self, step: usize) -> f64 {
        self.volatility.at(step)
    }
}

/// TKN volatility: lowest at step 200 and rising quadratically on both sides.
pub fn tkn_sigma(step: usize) -> f64 {
    let d = step as f64 - 200.0;
    0.05 + d * d / 5e5
}

/// One multiplicative GBM step with unit time inside the exponent.
pub fn step_price(price: f64, schedule: &GbmSchedule, step: usize, z: f64) -> f64 {
    let mu = schedule.drift_at(step);
    let sigma = schedule.vol_at(step);
    price * ((mu - 0.5 * sigma * sigma) + sigma * z).exp()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MarketParams {
    pub usdc_drift: f64,
    pub usdc_volatility: f64,
    pub tkn_drift: f64,
    pub tkn_vol_floor: f64,
    pub tkn_vol_center: f64,
    pub tkn_vol_curvature: f64,
    pub competing_supply_rate: f64,
    pub competing_borrow_rate: f64,
    /// External collateral factors for WETH, USDC and TKN.
    pub competing_cf: [f64; POOL_COUNT],
    /// Factor by which an attack inflates the reported TKN price.
    pub attack_multiplier: f64,
    pub attack_count_min: usize,
    pub attack_count_max: usize,
    /// Number of log returns in the rolling volatility estimate.
    pub vol_window: usize,
}

impl Default for MarketParams {
    fn default() -> Self {
        Self {
            usdc_drift: 1e-4,
            usdc_volatility: 0.05,
            tkn_drift: 1e-5,
            tkn_vol_floor: 0.05,
            tkn_vol_center: 200.0,
            tkn_vol_curvature: 1.0 / 5e5,
            competing_supply_rate: 0.05,
            competing_borrow_rate: 0.15,
            competing_cf: [0.7, 0.65, 0.0],
            attack_multiplier: 200.0,
            attack_count_min: 1,
            attack_count_max: 3,
            vol_window: 30,
        }
    }
}

impl MarketParams {
    pub fn validate(&self) -> Result<(), MarketError> {
        let bad = |msg: String| Err(MarketError::InvalidParams(msg));
        if self.usdc_volatility < 0.0 || self.tkn_vol_floor < 0.0 || self.tkn_vol_curvature < 0.0 {
            return bad("volatilities must be non-negative".into());
        }
        if self.competing_supply_rate < 0.0 || self.competing_borrow_rate < 0.0 {
            return bad("competing rates must be non-negative".into());
        }
        if self.competing_cf.iter().any(|c| !(0.0..1.0).contains(c)) {
            return bad(format!(
                "competing collateral factors must lie in [0, 1), got {:?}",
                self.competing_cf
            ));
        }
        if !(self.attack_multiplier > 0.0) {
            return bad("attack_multiplier must be positive".into());
        }
        if self.attack_count_min > self.attack_count_max {
            return bad("attack_count_min exceeds attack_count_max".into());
        }
        if self.vol_window < 2 {
            return bad("vol_window must be at least 2".into());
        }
        Ok(())
    }

    /// Schedules in pool order: WETH, USDC, TKN.
    pub fn schedules(&self) -> [GbmSchedule; POOL_COUNT] {
        [
            GbmSchedule::constant(0.0, 0.0),
            GbmSchedule::constant(self.usdc_drift, self.usdc_volatility),
            GbmSchedule {
                drift: self.tkn_drift,
                volatility: Volatility::Parabolic {
                    floor: self.tkn_vol_floor,
                    center: self.tkn_vol_center,
                    curvature: self.tkn_vol_curvature,
                },
            },
        ]
    }
}

/// SplitMix64 finalizer; used to derive independent seeds from a base seed.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Draws `k` uniformly from `count_range` and then `k` distinct steps below
/// `max_steps`, returned in ascending order.
pub fn schedule_attacks<R: Rng + ?Sized>(
    max_steps: usize,
    count_range: (usize, usize),
    rng: &mut R,
) -> Vec<usize> {
    if max_steps == 0 {
        return Vec::new();
    }
    let (lo, hi) = count_range;
    let k = rng.random_range(lo..=hi).min(max_steps);
    let mut steps = sample(rng, max_steps, k).into_vec();
    steps.sort_unstable();
    steps
}

const ATTACK_STREAM: u64 = 0;

/// Everything random about one episode. The agent run and its benchmark twin
/// consume the same instance.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRandomness {
    pub seed: u64,
    pub attack_steps: Vec<usize>,
    /// Standard normal draws, `noise[token][step]`.
    pub noise: Vec<Vec<f64>>,
}

impl EpisodeRandomness {
    /// Each token draws from its own ChaCha stream and attacks from another,
    /// so toggling attacks leaves price paths untouched.
    pub fn generate(seed: u64, max_steps: usize, attacks_enabled: bool, params: &MarketParams) -> Self {
        let attack_steps = if attacks_enabled {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(ATTACK_STREAM);
            schedule_attacks(
                max_steps,
                (params.attack_count_min, params.attack_count_max),
                &mut rng,
            )
        } else {
            Vec::new()
        };
        let noise = (0..POOL_COUNT)
            .map(|token| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(token as u64 + 1);
                (0..max_steps).map(|_| rng.sample(StandardNormal)).collect()
            })
            .collect();
        Self {
            seed,
            attack_steps,
            noise,
        }
    }

    pub fn is_attack_step(&self, step: usize) -> bool {
        self.attack_steps.binary_search(&step).is_ok()
    }
}

/// Population standard deviation of the last `window` log returns. Returns
/// `None` when fewer than two returns are available.
pub fn update_vol_estimate(returns: &[f64], window: usize) -> Option<f64> {
    let start = returns.len().saturating_sub(window);
    let recent = &returns[start..];
    if recent.len() < 2 {
        return None;
    }
    let n = recent.len() as f64;
    let mean = recent.iter().sum::<f64>() / n;
    let var = recent.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    Some(var.sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct MarketState {
    /// Oracle prices in WETH, including any manipulation.
    pub prices: Vec<f64>,
    /// Unmanipulated path values.
    pub true_prices: Vec<f64>,
    pub schedules: [GbmSchedule; POOL_COUNT],
    pub competing_supply_rate: f64,
    pub competing_borrow_rate: f64,
    pub competing_cf: [f64; POOL_COUNT],
    pub vol_estimate: Vec<f64>,
    returns: Vec<VecDeque<f64>>,
    vol_window: usize,
    /// Number of price updates applied so far.
    pub step: usize,
}

impl MarketState {
    pub fn new(params: &MarketParams) -> Self {
        let schedules = params.schedules();
        Self {
            prices: vec![1.0; POOL_COUNT],
            true_prices: vec![1.0; POOL_COUNT],
            vol_estimate: schedules.iter().map(|s| s.vol_at(0)).collect(),
            schedules,
            competing_supply_rate: params.competing_supply_rate,
            competing_borrow_rate: params.competing_borrow_rate,
            competing_cf: params.competing_cf,
            returns: vec![VecDeque::with_capacity(params.vol_window + 1); POOL_COUNT],
            vol_window: params.vol_window,
            step: 0,
        }
    }

    /// Multiplies the reported price of `token` until the next update.
    pub fn manipulate(&mut self, token: Token, multiplier: f64) {
        self.prices[token.index()] = self.true_prices[token.index()] * multiplier;
    }

    /// Advances every path by one GBM step using `z[token]` and drops any
    /// manipulation.
    pub fn advance(&mut self, z: &[f64]) {
        let t = self.step;
        for i in 0..POOL_COUNT {
            let next = step_price(self.true_prices[i], &self.schedules[i], t, z[i]);
            let log_return = (next / self.prices[i]).ln();
            self.true_prices[i] = next;
            self.prices[i] = next;
            let window = &mut self.returns[i];
            window.push_back(log_return);
            if window.len() > self.vol_window {
                window.pop_front();
            }
            let (a, b) = window.as_slices();
            let contiguous: Vec<f64> = a.iter().chain(b).copied().collect();
            self.vol_estimate[i] = update_vol_estimate(&contiguous, self.vol_window)
                .unwrap_or_else(|| self.schedules[i].vol_at(t + 1));
        }
        self.step += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weth_is_constant() {
        let s = GbmSchedule::constant(0.0, 0.0);
        let mut p = 1.0;
        for t in 0..500 {
            p = step_price(p, &s, t, 3.7);
        }
        assert_eq!(p, 1.0);
    }

    #[test]
    fn deterministic_limit() {
        let s = GbmSchedule::constant(0.1, 0.0);
        assert_eq!(step_price(2.0, &s, 0, 1.234), 2.0 * 0.1f64.exp());
    }

    #[test]
    fn tkn_sigma_values() {
        assert_eq!(tkn_sigma(200), 0.05);
        assert!((tkn_sigma(0) - 0.13).abs() < 1e-15);
        assert!((tkn_sigma(400) - 0.13).abs() < 1e-15);
        let p = MarketParams::default().schedules()[2];
        for t in [0, 17, 200, 333, 449] {
            assert!((p.vol_at(t) - tkn_sigma(t)).abs() < 1e-15);
        }
    }

    #[test]
    fn configured_constants() {
        let p = MarketParams::default();
        let s = p.schedules();
        assert_eq!(s[0], GbmSchedule::constant(0.0, 0.0));
        assert_eq!(s[1], GbmSchedule::constant(1e-4, 0.05));
        assert_eq!(s[2].drift, 1e-5);
        assert_eq!(p.competing_cf, [0.7, 0.65, 0.0]);
        assert_eq!(p.competing_supply_rate, 0.05);
        assert_eq!(p.competing_borrow_rate, 0.15);
        assert_eq!(p.attack_multiplier, 200.0);
        assert!(p.validate().is_ok());
    }

    #[test]
    fn attack_schedule_contract() {
        let r = EpisodeRandomness::generate(9, 450, false, &MarketParams::default());
        assert!(r.attack_steps.is_empty());
        for seed in 0..200 {
            let r = EpisodeRandomness::generate(seed, 450, true, &MarketParams::default());
            assert!((1..=3).contains(&r.attack_steps.len()));
            assert!(r.attack_steps.iter().all(|&s| s < 450));
            assert!(r.attack_steps.windows(2).all(|w| w[0] < w[1]));
            let again = EpisodeRandomness::generate(seed, 450, true, &MarketParams::default());
            assert_eq!(r, again);
        }
    }

    #[test]
    fn attacks_do_not_perturb_prices() {
        let p = MarketParams::default();
        let on = EpisodeRandomness::generate(5, 100, true, &p);
        let off = EpisodeRandomness::generate(5, 100, false, &p);
        assert_eq!(on.noise, off.noise);
        assert_ne!(
            EpisodeRandomness::generate(6, 100, false, &p).noise,
            off.noise
        );
    }

    #[test]
    fn vol_estimate_cases() {
        assert_eq!(update_vol_estimate(&[0.0; 10], 30), Some(0.0));
        let x = 0.03;
        let alternating: Vec<f64> = (0..30).map(|i| if i % 2 == 0 { x } else { -x }).collect();
        assert!((update_vol_estimate(&alternating, 30).unwrap() - x).abs() < 1e-15);
        assert_eq!(update_vol_estimate(&[0.1], 30), None);
        // Only the last `window` entries count.
        let mut long = vec![5.0; 10];
        long.extend_from_slice(&alternating);
        assert!((update_vol_estimate(&long, 30).unwrap() - x).abs() < 1e-15);
    }

    #[test]
    fn vol_estimate_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let n = rng.random_range(2..60);
            let xs: Vec<f64> = (0..n).map(|_| rng.random_range(-0.2..0.2)).collect();
            let window = &xs[xs.len().saturating_sub(30)..];
            let m = window.len() as f64;
            let mut acc = 0.0;
            for a in window {
                for b in window {
                    acc += (a - b) * (a - b);
                }
            }
            // Mean pairwise squared difference equals twice the population variance.
            let oracle = (acc / (2.0 * m * m)).sqrt();
            let got = update_vol_estimate(&xs, 30).unwrap();
            assert!((got - oracle).abs() < 1e-12, "{got} vs {oracle}");
        }
    }

    #[test]
    fn manipulation_reverts_on_advance() {
        let params = MarketParams::default();
        let mut m = MarketState::new(&params);
        m.manipulate(Token::Tkn, 200.0);
        assert_eq!(m.prices[2], 200.0);
        m.advance(&[0.0, 0.0, 0.0]);
        assert_eq!(m.prices[2], m.true_prices[2]);
        assert!((m.prices[2] - (1e-5 - 0.5 * 0.13f64.powi(2)).exp()).abs() < 1e-15);
    }

    #[test]
    fn derive_seed_is_spread() {
        let a: Vec<u64> = (0..100).map(|i| derive_seed(42, i)).collect();
        let mut b = a.clone();
        b.sort_unstable();
        b.dedup();
        assert_eq!(a.len(), b.len());
        assert_ne!(derive_seed(42, 0), derive_seed(43, 0));
    }
}
