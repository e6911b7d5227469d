//! Independent oracles shared by the integration suites and the acceptance target.
#![allow(dead_code)]

use lendgov::agent::{
    select_action, AdamConfig, AdamState, PrioritizedReplay, QNetwork, Transition, PRIORITY_EPSILON,
};
use lendgov::env::{keep_all_action, EnvConfig, LendingEnv};
use lendgov::harness::TrainRunConfig;
use lendgov::market::{derive_seed, step_price, EpisodeRandomness, GbmSchedule, MarketParams, MarketState};
use lendgov::protocol::{CfDirection, Protocol, ProtocolError, ProtocolParams, POOL_COUNT};
use lendgov::user::check_flashloan_feasibility;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn close(a: f64, b: f64, rel: f64, scale: f64) -> bool {
    (a - b).abs() <= rel * scale.max(a.abs()).max(b.abs()).max(1.0)
}

// ---------------------------------------------------------------------------
// Accounting

/// One randomized protocol operation: `kind` selects the operation, `x` in
/// [0, 1) scales its size or direction.
#[derive(Clone, Copy, Debug)]
pub struct Op {
    pub kind: u8,
    pub pool: usize,
    pub x: f64,
}

pub const OP_KINDS: u8 = 10;

pub fn random_ops(rng: &mut ChaCha8Rng, len: usize) -> Vec<Op> {
    (0..len)
        .map(|_| Op {
            kind: rng.random_range(0..OP_KINDS),
            pool: rng.random_range(0..POOL_COUNT),
            x: rng.random::<f64>(),
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default)]
struct Books {
    f: f64,
    b: f64,
    s: f64,
    d: f64,
}

/// Rate model written out directly.
fn rates(b: f64, s: f64) -> (f64, f64) {
    let u = if s > 0.0 { (b / s).clamp(0.0, 0.99) } else { 0.0 };
    let rb = 1.0 / (25.0 * (1.0 - u));
    (rb, rb * u * (1.0 - 0.3))
}

fn value(books: &[Books], prices: &[f64], f: fn(&Books) -> f64) -> f64 {
    books.iter().zip(prices).map(|(k, p)| f(k) * p).sum()
}

fn capacity(books: &[Books], cfs: &[f64], prices: &[f64]) -> f64 {
    books.iter().zip(cfs).zip(prices).map(|((k, c), p)| k.s * p * c).sum()
}

fn healthy(books: &[Books], cfs: &[f64], prices: &[f64]) -> bool {
    let bv = value(books, prices, |k| k.b);
    bv <= capacity(books, cfs, prices) * (1.0 + 1e-9) + 1e-9
}

/// Largest withdrawal from `pool` allowed by liquidity, holdings and loan
/// health, found by bisection on the health predicate.
fn brute_withdraw_limit(books: &[Books], cfs: &[f64], prices: &[f64], pool: usize) -> f64 {
    let hard = books[pool].f.min(books[pool].s);
    let bv = value(books, prices, |k| k.b);
    if bv <= 0.0 || cfs[pool] <= 0.0 {
        return hard;
    }
    let ok = |x: f64| {
        let mut after = books.to_vec();
        after[pool].s -= x;
        capacity(&after, cfs, prices) >= bv
    };
    if !ok(0.0) {
        return 0.0;
    }
    if ok(hard) {
        return hard;
    }
    let (mut lo, mut hi) = (0.0, hard);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if ok(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Replays `ops` against the protocol and a shadow ledger. Checks the
/// net-position identity against an incrementally tracked value, the action
/// caps against brute-force limits, and (when `economics` is false, so no
/// interest or defaults) token conservation and the utilization bound.
pub fn check_sequence(ops: &[Op], economics: bool) -> Result<(), String> {
    let mut protocol = Protocol::new(ProtocolParams::default(), 0.8).unwrap();
    let mut wallet = vec![20_000.0; POOL_COUNT];
    let mut injected = vec![0.0; POOL_COUNT];
    let mut prices = vec![1.0; POOL_COUNT];
    let mut books = vec![Books::default(); POOL_COUNT];
    for i in 0..POOL_COUNT {
        protocol.deposit(&mut wallet, i, 15_000.0).unwrap();
        books[i].f = 15_000.0;
        books[i].s = 15_000.0;
    }
    let mut tracked_n = [0.0; POOL_COUNT];
    let conserved: Vec<f64> = (0..POOL_COUNT).map(|i| books[i].f + wallet[i]).collect();
    let dt = protocol.params.dt;

    for (k, op) in ops.iter().enumerate() {
        let i = op.pool;
        let cfs: Vec<f64> = protocol.pools.iter().map(|p| p.collateral_factor).collect();
        let fail = |what: String| Err(format!("op {k} {op:?}: {what}"));
        match op.kind {
            0 => {
                let amount = op.x * 1.2 * wallet[i];
                let held = wallet[i];
                match protocol.deposit(&mut wallet, i, amount) {
                    Ok(out) => {
                        if amount > held || out.executed != amount {
                            return fail("deposit not executed in full or above the wallet".into());
                        }
                        books[i].f += out.executed;
                        books[i].s += out.executed;
                    }
                    Err(ProtocolError::InsufficientBalance { .. }) if amount > wallet[i] => {}
                    Err(e) => return fail(e.to_string()),
                }
            }
            1 => {
                let amount = op.x * 1.5 * books[i].s;
                let limit = brute_withdraw_limit(&books, &cfs, &prices, i);
                let out = protocol.withdraw(&mut wallet, i, amount, &prices).unwrap();
                let expect = amount.min(limit);
                if !close(out.executed, expect, 1e-9, books[i].s) {
                    return fail(format!("withdrew {} expected {expect}", out.executed));
                }
                if out.executed > books[i].f.min(books[i].s) * (1.0 + 1e-12) {
                    return fail("withdrawal above liquidity or holdings".into());
                }
                books[i].f -= out.executed;
                books[i].s -= out.executed;
            }
            2 => {
                let amount = op.x * 20_000.0;
                let head = (capacity(&books, &cfs, &prices) - value(&books, &prices, |k| k.b)).max(0.0);
                let expect = amount.min(books[i].f).min(head / prices[i]);
                let out = protocol.borrow(&mut wallet, i, amount, &prices).unwrap();
                if !close(out.executed, expect, 1e-9, 20_000.0) {
                    return fail(format!("borrowed {} expected {expect}", out.executed));
                }
                books[i].f -= out.executed;
                books[i].b += out.executed;
                if out.executed > 0.0 && !healthy(&books, &cfs, &prices) {
                    return fail("borrow left the loan unhealthy".into());
                }
            }
            3 => {
                let amount = op.x * 1.5 * books[i].b;
                let expect = amount.min(books[i].b).min(wallet[i]);
                let out = protocol.repay(&mut wallet, i, amount).unwrap();
                if !close(out.executed, expect, 1e-12, books[i].b) {
                    return fail(format!("repaid {} expected {expect}", out.executed));
                }
                books[i].f += out.executed;
                books[i].b -= out.executed;
            }
            4 => {
                let amount = op.x * 1.5 * books[i].b;
                let out = protocol.offset(i, amount).unwrap();
                let expect = amount.min(books[i].b).min(books[i].s);
                if !close(out.executed, expect, 1e-12, books[i].b) {
                    return fail(format!("offset {} expected {expect}", out.executed));
                }
                books[i].b -= out.executed;
                books[i].s -= out.executed;
            }
            5 => {
                let was_healthy = healthy(&books, &cfs, &prices);
                let shortfall = op.x * 10_000.0;
                let out = protocol
                    .inject_liquidation_repay(&mut wallet, &mut injected, i, shortfall, &prices)
                    .unwrap();
                let expect = if was_healthy { 0.0 } else { shortfall.min(books[i].b) };
                if !close(out.executed, expect, 1e-12, books[i].b) {
                    return fail(format!("liquidated {} expected {expect}", out.executed));
                }
                books[i].f += out.executed;
                books[i].b -= out.executed;
            }
            6 => {
                let dir = [CfDirection::Lower, CfDirection::Keep, CfDirection::Raise][(op.x * 3.0) as usize % 3];
                let c = protocol.set_collateral_factor(i, dir);
                if !(0.0..=0.99).contains(&c) {
                    return fail(format!("collateral factor {c} out of range"));
                }
            }
            7 => {
                if i != 0 {
                    prices[i] *= 0.5 + 1.5 * op.x;
                }
            }
            8 if economics => {
                for (j, bk) in books.iter_mut().enumerate() {
                    let (rb, rs) = rates(bk.b, bk.s);
                    tracked_n[j] += bk.b * rb * dt - bk.s * rs * dt;
                    bk.b *= 1.0 + rb * dt;
                    bk.s *= 1.0 + rs * dt;
                }
                protocol.accrue_interest();
            }
            9 if economics => {
                let bv = value(&books, &prices, |k| k.b);
                let sv = value(&books, &prices, |k| k.s);
                let loss = protocol.recognize_default(&prices);
                if bv > sv {
                    if !close(loss, bv - sv, 1e-9, bv) {
                        return fail(format!("default loss {loss} expected {}", bv - sv));
                    }
                    for (j, bk) in books.iter_mut().enumerate() {
                        let d = (bv - sv) * (bk.b * prices[j] / bv) / prices[j];
                        tracked_n[j] += -bk.b + bk.s - d;
                        bk.d += d;
                        bk.b = 0.0;
                        bk.s = 0.0;
                    }
                } else if loss != 0.0 {
                    return fail(format!("default recognized on a solvent loan: {loss}"));
                }
                let after_b = protocol.borrow_value(&prices);
                if after_b > protocol.supply_value(&prices) * (1.0 + 1e-9) + 1e-9 {
                    return fail("borrow value above supply value after default".into());
                }
            }
            _ => {}
        }

        for (j, (p, bk)) in protocol.pools.iter().zip(&books).enumerate() {
            let scale = bk.f.abs().max(bk.b).max(bk.s).max(bk.d);
            for (name, got, want) in [
                ("F", p.available_funds, bk.f),
                ("B", p.borrow_tokens, bk.b),
                ("S", p.supply_tokens, bk.s),
                ("D", p.bad_debt, bk.d),
            ] {
                if !close(got, want, 1e-9, scale) {
                    return fail(format!("pool {j} {name} = {got}, shadow {want}"));
                }
            }
            if p.bad_debt < 0.0 {
                return fail(format!("pool {j} negative bad debt"));
            }
            let recomputed = p.available_funds + p.borrow_tokens - p.supply_tokens - p.bad_debt;
            if !close(recomputed, tracked_n[j], 1e-9, scale) || !close(p.net_position(), tracked_n[j], 1e-9, scale) {
                return fail(format!("pool {j} net position {recomputed}, tracked {}", tracked_n[j]));
            }
            if wallet[j] < -1e-9 * scale {
                return fail(format!("wallet {j} negative: {}", wallet[j]));
            }
            if !economics {
                let total = p.available_funds + wallet[j] - injected[j];
                if !close(total, conserved[j], 1e-9, conserved[j]) {
                    return fail(format!("token {j} not conserved: {total} vs {}", conserved[j]));
                }
                // U <= 1, stated on token amounts so that dust left by
                // near-total withdrawals does not produce meaningless ratios.
                if p.borrow_tokens > p.supply_tokens + 1e-9 * conserved[j] {
                    return fail(format!("pool {j} utilization {}", p.utilization()));
                }
            }
        }
    }
    Ok(())
}

/// Runs `count` random sequences of 10 to 40 operations, alternating the
/// economics flag. Returns the first failure.
pub fn accounting_suite(seed: u64, count: usize) -> Result<(), String> {
    let mut r = rng(seed);
    for n in 0..count {
        let len = r.random_range(10..=40);
        let ops = random_ops(&mut r, len);
        check_sequence(&ops, n % 2 == 0).map_err(|e| format!("sequence {n}: {e}"))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Environment-level statistics

/// Mean utilization per pool over the final `window` steps of a benchmark
/// episode, or `None` if the episode ended early.
pub fn benchmark_tail_utilization(seed: u64, attacks: bool, steps: usize, window: usize) -> Option<[f64; POOL_COUNT]> {
    let market = MarketParams::default();
    let rnd = EpisodeRandomness::generate(seed, steps, attacks, &market);
    let mut env = LendingEnv::new(EnvConfig::default(), rnd, steps).unwrap();
    let mut sums = [0.0; POOL_COUNT];
    let mut n = 0;
    while !env.is_done() {
        let rec = env.step(keep_all_action(POOL_COUNT)).unwrap();
        if rec.step + window >= steps {
            for (s, u) in sums.iter_mut().zip(rec.utilization) {
                *s += u;
            }
            n += 1;
        }
    }
    (env.steps_taken() == steps).then(|| sums.map(|s| s / n as f64))
}

pub struct AttackStats {
    pub seeds: usize,
    pub with_bad_debt: usize,
    pub bankrupt: usize,
}

pub fn benchmark_attack_stats(seeds: &[u64]) -> AttackStats {
    let market = MarketParams::default();
    let mut stats = AttackStats {
        seeds: seeds.len(),
        with_bad_debt: 0,
        bankrupt: 0,
    };
    for &seed in seeds {
        let rnd = EpisodeRandomness::generate(seed, 450, true, &market);
        let mut env = LendingEnv::new(EnvConfig::default(), rnd, 450).unwrap();
        let mut bad_debt = false;
        let mut bankrupt = false;
        while !env.is_done() {
            let rec = env.step(keep_all_action(POOL_COUNT)).unwrap();
            bad_debt |= rec.bad_debt_total > 0.0;
            bankrupt |= rec.flags.bankrupt;
        }
        stats.with_bad_debt += bad_debt as usize;
        stats.bankrupt += bankrupt as usize;
    }
    stats
}

/// Seeds for the environment-level statistics, derived the same way as the
/// held-out evaluation seeds of a run.
pub fn statistic_seeds(count: usize) -> Vec<u64> {
    TrainRunConfig {
        eval_seeds: count,
        ..Default::default()
    }
    .eval_seed_list()
}

// ---------------------------------------------------------------------------
// Numerical kernel

/// Weighted mean squared TD loss evaluated with a naive forward pass.
fn oracle_loss(net: &QNetwork, states: &[f64], actions: &[usize], targets: &[f64], weights: &[f64]) -> f64 {
    let dims = net.dims();
    let rows = actions.len();
    let mut loss = 0.0;
    for r in 0..rows {
        let mut a = states[r * dims[0]..(r + 1) * dims[0]].to_vec();
        for l in 0..dims.len() - 1 {
            let mut z = vec![0.0; dims[l + 1]];
            for (j, zj) in z.iter_mut().enumerate() {
                let mut s = net.bias(l, j);
                for (i, ai) in a.iter().enumerate() {
                    s += ai * net.weight(l, i, j);
                }
                *zj = if l + 2 < dims.len() { s.max(0.0) } else { s };
            }
            a = z;
        }
        let e = a[actions[r]] - targets[r];
        loss += weights[r] * e * e;
    }
    loss / rows as f64
}

/// Largest relative gap between backprop gradients and central differences
/// on one random network. Relative error uses `max(|g|, |fd|, 1e-6)`.
pub fn gradient_check(seed: u64) -> f64 {
    let mut r = rng(seed);
    let depth = r.random_range(1..=3);
    let mut dims = vec![r.random_range(2..=6)];
    for _ in 0..depth {
        dims.push(r.random_range(3..=8));
    }
    dims.push(r.random_range(2..=5));
    let mut net = QNetwork::new(&dims, &mut r).unwrap();
    for p in net.params_mut() {
        *p += r.random_range(-0.1..0.1);
    }
    let rows = r.random_range(1..=6);
    let states: Vec<f64> = (0..rows * dims[0]).map(|_| r.random_range(-1.0..1.0)).collect();
    let actions: Vec<usize> = (0..rows).map(|_| r.random_range(0..*dims.last().unwrap())).collect();
    let targets: Vec<f64> = (0..rows).map(|_| r.random_range(-2.0..2.0)).collect();
    let weights: Vec<f64> = (0..rows).map(|_| r.random_range(0.1..1.0)).collect();

    let analytic = net.loss_and_gradients(&states, &actions, &targets, &weights).unwrap();
    let direct = oracle_loss(&net, &states, &actions, &targets, &weights);
    assert!((analytic.loss - direct).abs() <= 1e-12 * direct.max(1.0));

    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for k in 0..net.params().len() {
        let orig = net.params()[k];
        net.params_mut()[k] = orig + h;
        let up = oracle_loss(&net, &states, &actions, &targets, &weights);
        net.params_mut()[k] = orig - h;
        let down = oracle_loss(&net, &states, &actions, &targets, &weights);
        net.params_mut()[k] = orig;
        let fd = (up - down) / (2.0 * h);
        let g = analytic.gradients[k];
        worst = worst.max((g - fd).abs() / g.abs().max(fd.abs()).max(1e-6));
    }
    worst
}

/// Textbook Adam with bias corrections from running products.
pub fn adam_oracle_gap(seed: u64, steps: usize) -> f64 {
    let mut r = rng(seed);
    let n = 25;
    let cfg = AdamConfig::default();
    let (lr, b1, b2, eps) = (cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon);
    let start: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
    let mut ours = start.clone();
    let mut state = AdamState::new(cfg, n);
    let mut theirs = start;
    let (mut m, mut v) = (vec![0.0; n], vec![0.0; n]);
    let (mut p1, mut p2) = (1.0, 1.0);
    let mut worst: f64 = 0.0;
    for _ in 0..steps {
        let g: Vec<f64> = (0..n).map(|_| r.random_range(-3.0..3.0)).collect();
        state.step(&mut ours, &g).unwrap();
        p1 *= b1;
        p2 *= b2;
        for j in 0..n {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let mh = m[j] / (1.0 - p1);
            let vh = v[j] / (1.0 - p2);
            theirs[j] -= lr * mh / (vh.sqrt() + eps);
        }
        for (a, b) in ours.iter().zip(&theirs) {
            worst = worst.max((a - b).abs());
        }
    }
    worst
}

/// Gap between one Adam step from zero moments and `-lr g / (|g| + eps)`.
pub fn adam_first_step_gap() -> f64 {
    let cfg = AdamConfig::default();
    let g = [0.5, -4.0, 1e-3, 7.5e-6, -120.0];
    let mut p = vec![0.0; g.len()];
    AdamState::new(cfg.clone(), g.len()).step(&mut p, &g).unwrap();
    p.iter()
        .zip(g)
        .map(|(p, g)| (p + cfg.learning_rate * g / (g.abs() + cfg.epsilon)).abs())
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// Sampling tests

pub fn chi_square_p(observed: &[u64], expected_probs: &[f64]) -> f64 {
    let total: u64 = observed.iter().sum();
    let stat: f64 = observed
        .iter()
        .zip(expected_probs)
        .map(|(&o, &p)| {
            let e = p * total as f64;
            (o as f64 - e).powi(2) / e
        })
        .sum();
    let dist = ChiSquared::new((observed.len() - 1) as f64).unwrap();
    1.0 - dist.cdf(stat)
}

/// Empirical prioritized sampling frequencies over `draws` against
/// `(|delta| + eps)^alpha` normalized. Returns the chi-square p-value.
pub fn per_sampling_p(seed: u64, draws: usize) -> f64 {
    let alpha = 0.6;
    let n = 16;
    let mut mem = PrioritizedReplay::new(64, alpha).unwrap();
    for k in 0..n {
        mem.push(Transition {
            state: vec![k as f64],
            action: 0,
            reward: 0.0,
            next_state: vec![0.0],
            done: false,
        });
    }
    let deltas: Vec<f64> = (0..n).map(|k| 0.05 * (k as f64 + 1.0).powf(1.3) * if k % 2 == 0 { 1.0 } else { -1.0 }).collect();
    mem.update_priorities(&(0..n).collect::<Vec<_>>(), &deltas).unwrap();
    let weights: Vec<f64> = deltas.iter().map(|d| (d.abs() + PRIORITY_EPSILON).powf(alpha)).collect();
    let total: f64 = weights.iter().sum();
    let probs: Vec<f64> = weights.iter().map(|w| w / total).collect();

    let mut r = rng(seed);
    let mut counts = vec![0u64; n];
    let batch = 8;
    for _ in 0..draws / batch {
        for i in mem.sample(batch, 0.4, &mut r).unwrap().indices {
            counts[i] += 1;
        }
    }
    chi_square_p(&counts, &probs)
}

/// Frequencies of `select_action` at epsilon 1 against the uniform law.
pub fn uniform_exploration_p(seed: u64, draws: usize) -> f64 {
    let mut r = rng(seed);
    let q: Vec<f64> = (0..27).map(|k| (k as f64 * 0.37).sin()).collect();
    let mut counts = vec![0u64; 27];
    for _ in 0..draws {
        counts[select_action(&q, 1.0, &mut r)] += 1;
    }
    chi_square_p(&counts, &[1.0 / 27.0; 27])
}

// ---------------------------------------------------------------------------
// Price paths

/// Largest relative gap between a zero-volatility path and `exp(mu t)`.
pub fn zero_vol_gap(mu: f64, steps: usize) -> f64 {
    let schedule = GbmSchedule::constant(mu, 0.0);
    let mut p = 1.0;
    let mut worst: f64 = 0.0;
    for t in 0..steps {
        p = step_price(p, &schedule, t, 0.7 - (t % 5) as f64);
        let exact = (mu * (t + 1) as f64).exp();
        worst = worst.max((p - exact).abs() / exact);
    }
    worst
}

/// Whether WETH stays exactly 1 along random paths.
pub fn weth_is_numeraire(seed: u64, steps: usize) -> bool {
    let params = MarketParams::default();
    let rnd = EpisodeRandomness::generate(seed, steps, false, &params);
    let mut m = MarketState::new(&params);
    (0..steps).all(|t| {
        let z: Vec<f64> = rnd.noise.iter().map(|n| n[t]).collect();
        m.advance(&z);
        m.prices[0] == 1.0 && m.true_prices[0] == 1.0
    })
}

/// `(sample mean, expected mean, standard error)` of one-step log increments.
pub fn log_increment_stats(mu: f64, sigma: f64, draws: usize, seed: u64) -> (f64, f64, f64) {
    let schedule = GbmSchedule::constant(mu, sigma);
    let mut r = rng(seed);
    let xs: Vec<f64> = (0..draws)
        .map(|_| {
            let z: f64 = r.sample(rand_distr::StandardNormal);
            step_price(1.0, &schedule, 0, z).ln()
        })
        .collect();
    let n = draws as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, mu - 0.5 * sigma * sigma, (var / n).sqrt())
}

// ---------------------------------------------------------------------------
// Flash-loan predicate

/// Checks the predicate on a 10^4-point integer grid against the exact
/// cross-multiplied inequality. Returns `(points, mismatches, feasible)`.
pub fn flashloan_grid() -> (usize, usize, usize) {
    let xs = [1i64, 7, 50, 300, 999, 1000, 2500, 10_000, 40_000, 123_457];
    let d1s = [1i64, 10, 49, 50, 400];
    let gaps = [1i64, 5, 50, 600, 5000];
    let d3s = [3i64, 40, 999, 100_000];
    let mut points = 0;
    let mut mismatches = 0;
    let mut feasible = 0;
    for &xa in &xs {
        for &xb in &xs {
            for &d1 in &d1s {
                for &gap in &gaps {
                    for &d3 in &d3s {
                        let d2 = d1 + gap;
                        // (xb - d2) / xa < (xb - d1) / (xa + d3), with positive denominators.
                        let lhs = (xb - d2) as i128 * (xa + d3) as i128;
                        let rhs = (xb - d1) as i128 * xa as i128;
                        let exact = lhs < rhs;
                        let got = check_flashloan_feasibility(xa as f64, xb as f64, d1 as f64, d2 as f64, d3 as f64)
                            .expect("valid ordering");
                        points += 1;
                        mismatches += (got != exact) as usize;
                        feasible += exact as usize;
                    }
                }
            }
        }
    }
    (points, mismatches, feasible)
}

// ---------------------------------------------------------------------------
// Determinism helpers

pub fn tiny_config(seed: u64) -> TrainRunConfig {
    let mut c = TrainRunConfig {
        episodes: 4,
        steps_per_episode: 60,
        checkpoint_every: 2,
        eval_seeds: 3,
        seed,
        ..Default::default()
    };
    c.agent.hidden = vec![24, 24];
    c.agent.batch_size = 16;
    c.agent.replay_capacity = 500;
    c
}

pub fn seeds_for(base: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|k| derive_seed(base, k)).collect()
}
