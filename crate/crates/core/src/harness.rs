//! Training runs, paired benchmark evaluation and run output.

use std::fs::{self, File};
use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agent::{AgentConfig, AgentError, DqnAgent, QNetwork, Transition};
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::env::{keep_all_action, EnvConfig, EnvError, LendingEnv, StepRecord};
use crate::market::{derive_seed, EpisodeRandomness, MarketParams};
use crate::protocol::{ProtocolParams, Token, POOL_COUNT};
use crate::user::BehaviorParams;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("numerical abort in episode {episode}, step {step}: {detail}")]
    NumericalAbort {
        episode: usize,
        step: usize,
        detail: String,
    },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
}

const EVAL_SALT: u64 = 0x45D7_1A3B_90C2_6E11;
const AGENT_SALT: u64 = 0xA6E1_7F00_3C5D_B2E9;

/// Everything that defines a training run. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainRunConfig {
    pub episodes: usize,
    pub steps_per_episode: usize,
    pub attacks_enabled: bool,
    pub seed: u64,
    /// Episodes between checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Held-out seeds used by paired evaluation.
    pub eval_seeds: usize,
    pub initial_cf: f64,
    pub protocol: ProtocolParams,
    pub market: MarketParams,
    pub behavior: BehaviorParams,
    pub agent: AgentConfig,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        let env = EnvConfig::default();
        Self {
            episodes: 850,
            steps_per_episode: 450,
            attacks_enabled: true,
            seed: 0,
            checkpoint_every: 50,
            eval_seeds: 20,
            initial_cf: env.initial_cf,
            protocol: env.protocol,
            market: env.market,
            behavior: env.behavior,
            agent: AgentConfig::default(),
        }
    }
}

impl TrainRunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        let config: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.episodes == 0 || self.steps_per_episode == 0 {
            return Err(HarnessError::Config(
                "episodes and steps_per_episode must be positive".into(),
            ));
        }
        self.env_config()
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        self.agent
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn env_config(&self) -> EnvConfig {
        EnvConfig {
            initial_cf: self.initial_cf,
            protocol: self.protocol.clone(),
            market: self.market.clone(),
            behavior: self.behavior.clone(),
        }
    }

    /// First 8 bytes of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> u64 {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&canonical);
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }

    pub fn episode_seed(&self, episode: usize) -> u64 {
        derive_seed(self.seed, episode as u64)
    }

    /// Evaluation seeds come from a separate derivation so they never
    /// coincide with training episodes.
    pub fn eval_seed_list(&self) -> Vec<u64> {
        let base = derive_seed(self.seed ^ EVAL_SALT, 0);
        (0..self.eval_seeds as u64).map(|k| derive_seed(base, k)).collect()
    }

    fn agent_seed(&self) -> u64 {
        derive_seed(self.seed ^ AGENT_SALT, 0)
    }

    pub fn randomness(&self, seed: u64) -> EpisodeRandomness {
        EpisodeRandomness::generate(seed, self.steps_per_episode, self.attacks_enabled, &self.market)
    }
}

/// Exploration and learning statistics attached to a step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepStats {
    pub epsilon: Option<f64>,
    pub loss: Option<f64>,
}

pub trait Policy {
    fn act(&mut self, state: &[f64]) -> Result<usize, HarnessError>;

    /// Called after every step with the transition just taken.
    fn feedback(
        &mut self,
        _state: &[f64],
        _action: usize,
        _record: &StepRecord,
        _next_state: &[f64],
    ) -> Result<StepStats, HarnessError> {
        Ok(StepStats::default())
    }
}

/// Always plays one action; the keep-all action gives the fixed benchmark.
pub struct FixedPolicy(pub usize);

impl FixedPolicy {
    pub fn benchmark() -> Self {
        Self(keep_all_action(POOL_COUNT))
    }
}

impl Policy for FixedPolicy {
    fn act(&mut self, _state: &[f64]) -> Result<usize, HarnessError> {
        Ok(self.0)
    }
}

/// Argmax of a frozen network (epsilon = 0).
pub struct GreedyPolicy<'a>(pub &'a QNetwork);

impl Policy for GreedyPolicy<'_> {
    fn act(&mut self, state: &[f64]) -> Result<usize, HarnessError> {
        Ok(crate::agent::argmax(&self.0.forward(state)?))
    }
}

/// Epsilon-greedy acting plus one replay update per step.
struct LearningPolicy<'a> {
    agent: &'a mut DqnAgent,
    global_step: u64,
    total_steps: u64,
    epsilon_used: f64,
}

impl LearningPolicy<'_> {
    fn beta(&self) -> f64 {
        let c = &self.agent.config;
        let frac = (self.global_step as f64 / self.total_steps.max(1) as f64).min(1.0);
        c.per_beta_start + (c.per_beta_end - c.per_beta_start) * frac
    }
}

impl Policy for LearningPolicy<'_> {
    fn act(&mut self, state: &[f64]) -> Result<usize, HarnessError> {
        self.epsilon_used = self.agent.epsilon.value();
        Ok(self.agent.act(state)?)
    }

    fn feedback(
        &mut self,
        state: &[f64],
        action: usize,
        record: &StepRecord,
        next_state: &[f64],
    ) -> Result<StepStats, HarnessError> {
        let reward = record.reward / self.agent.config.reward_scale;
        self.agent.remember(Transition {
            state: state.to_vec(),
            action,
            reward,
            next_state: next_state.to_vec(),
            done: record.flags.bankrupt,
        });
        let loss = self.agent.learn(self.beta())?;
        self.agent.end_action_step()?;
        self.global_step += 1;
        Ok(StepStats {
            epsilon: Some(self.epsilon_used),
            loss,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub record: StepRecord,
    pub stats: StepStats,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeLog {
    pub episode: usize,
    pub seed: u64,
    pub attack_steps: Vec<usize>,
    pub initial_net_total: f64,
    pub steps: Vec<StepLog>,
}

impl EpisodeLog {
    pub fn final_net_total(&self) -> f64 {
        self.steps
            .last()
            .map_or(self.initial_net_total, |s| s.record.net_total)
    }

    /// Cumulative reward, equal to the change in total net position.
    pub fn score(&self) -> f64 {
        self.steps.iter().map(|s| s.record.reward).sum()
    }

    pub fn bankrupt(&self) -> bool {
        self.steps.last().is_some_and(|s| s.record.flags.bankrupt)
    }

    pub fn final_collateral_factors(&self) -> Option<[f64; POOL_COUNT]> {
        self.steps.last().map(|s| s.record.collateral_factors)
    }
}

/// Plays one episode from a fresh reset on `randomness`. Stops at the step
/// limit or at bankruptcy.
pub fn run_episode(
    env: &mut LendingEnv,
    policy: &mut dyn Policy,
    randomness: EpisodeRandomness,
    steps: usize,
    episode: usize,
) -> Result<EpisodeLog, HarnessError> {
    let seed = randomness.seed;
    let attack_steps = randomness.attack_steps.clone();
    let mut state = env.reset(randomness, steps)?;
    let mut log = EpisodeLog {
        episode,
        seed,
        attack_steps,
        initial_net_total: env.net_total(),
        steps: Vec::with_capacity(steps),
    };
    while !env.is_done() {
        let step = env.steps_taken();
        let abort = |e: HarnessError| match e {
            HarnessError::Agent(AgentError::NonFinite(detail)) => HarnessError::NumericalAbort {
                episode,
                step,
                detail,
            },
            other => other,
        };
        let action = policy.act(&state).map_err(abort)?;
        let record = env.step(action)?;
        let next_state = env.observe();
        let stats = policy
            .feedback(&state, action, &record, &next_state)
            .map_err(abort)?;
        log.steps.push(StepLog { record, stats });
        state = next_state;
    }
    Ok(log)
}

/// One CSV row of a run log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub run: String,
    pub episode: usize,
    pub seed: u64,
    pub step: usize,
    pub action: usize,
    pub price_weth: f64,
    pub price_usdc: f64,
    pub price_tkn: f64,
    pub cf_weth: f64,
    pub cf_usdc: f64,
    pub cf_tkn: f64,
    pub util_weth: f64,
    pub util_usdc: f64,
    pub util_tkn: f64,
    pub net_weth: f64,
    pub net_usdc: f64,
    pub net_tkn: f64,
    pub net_total: f64,
    pub bad_debt: f64,
    pub reward: f64,
    pub epsilon: Option<f64>,
    pub loss: Option<f64>,
    pub attack: bool,
    pub cf_changed: bool,
    pub withdraw_restricted: bool,
    pub borrow_restricted: bool,
    pub liquidated: bool,
    pub default: bool,
    pub bankrupt: bool,
}

impl LogRow {
    pub fn new(run: &str, episode: usize, seed: u64, log: &StepLog) -> Self {
        let r = &log.record;
        let (w, u, t) = (
            Token::Weth.index(),
            Token::Usdc.index(),
            Token::Tkn.index(),
        );
        Self {
            run: run.to_string(),
            episode,
            seed,
            step: r.step,
            action: r.action,
            price_weth: r.prices[w],
            price_usdc: r.prices[u],
            price_tkn: r.prices[t],
            cf_weth: r.collateral_factors[w],
            cf_usdc: r.collateral_factors[u],
            cf_tkn: r.collateral_factors[t],
            util_weth: r.utilization[w],
            util_usdc: r.utilization[u],
            util_tkn: r.utilization[t],
            net_weth: r.net_positions[w],
            net_usdc: r.net_positions[u],
            net_tkn: r.net_positions[t],
            net_total: r.net_total,
            bad_debt: r.bad_debt_total,
            reward: r.reward,
            epsilon: log.stats.epsilon,
            loss: log.stats.loss,
            attack: r.flags.attack,
            cf_changed: r.flags.cf_changed,
            withdraw_restricted: r.flags.withdraw_restricted,
            borrow_restricted: r.flags.borrow_restricted,
            liquidated: r.flags.liquidated,
            default: r.flags.default,
            bankrupt: r.flags.bankrupt,
        }
    }
}

/// Streams episode logs to a CSV file with a header row.
pub struct RunLogWriter {
    inner: csv::Writer<File>,
}

impl RunLogWriter {
    pub fn create(path: &Path) -> Result<Self, HarnessError> {
        Ok(Self {
            inner: csv::Writer::from_path(path)?,
        })
    }

    pub fn write_episode(&mut self, run: &str, log: &EpisodeLog) -> Result<(), HarnessError> {
        for step in &log.steps {
            self.inner.serialize(LogRow::new(run, log.episode, log.seed, step))?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<(), HarnessError> {
        self.inner.flush()?;
        Ok(())
    }
}

pub fn read_run_log(path: &Path) -> Result<Vec<LogRow>, HarnessError> {
    let mut reader = csv::Reader::from_path(path)?;
    let rows = reader.deserialize().collect::<Result<Vec<LogRow>, _>>()?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub episode: usize,
    pub seed: u64,
    pub steps: usize,
    pub score: f64,
    pub final_net_total: f64,
    pub bankrupt: bool,
    pub bad_debt: f64,
    pub attacks: usize,
    /// Whether the target network was on when the episode started.
    pub target_enabled: bool,
    pub epsilon_end: f64,
    pub mean_loss: Option<f64>,
    pub final_cfs: [f64; POOL_COUNT],
}

impl EpisodeSummary {
    fn new(log: &EpisodeLog, target_enabled: bool, epsilon_end: f64, initial_cf: f64) -> Self {
        let losses: Vec<f64> = log.steps.iter().filter_map(|s| s.stats.loss).collect();
        Self {
            episode: log.episode,
            seed: log.seed,
            steps: log.steps.len(),
            score: log.score(),
            final_net_total: log.final_net_total(),
            bankrupt: log.bankrupt(),
            bad_debt: log.steps.last().map_or(0.0, |s| s.record.bad_debt_total),
            attacks: log.steps.iter().filter(|s| s.record.flags.attack).count(),
            target_enabled,
            epsilon_end,
            mean_loss: (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64),
            final_cfs: log.final_collateral_factors().unwrap_or([initial_cf; POOL_COUNT]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Showcase {
    pub early: Option<usize>,
    pub well_trained: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub episodes: Vec<EpisodeSummary>,
    pub normalized_scores: Vec<f64>,
    pub bankruptcies: usize,
    pub mean_score: f64,
    pub showcase: Showcase,
}

impl RunSummary {
    pub fn new(config_hash: u64, episodes: Vec<EpisodeSummary>) -> Self {
        let scores: Vec<f64> = episodes.iter().map(|e| e.score).collect();
        let normalized_scores = if scores.len() >= 2 {
            normalize_scores(&scores).expect("at least two scores")
        } else {
            vec![0.5; scores.len()]
        };
        Self {
            config_hash: format!("{config_hash:016x}"),
            bankruptcies: episodes.iter().filter(|e| e.bankrupt).count(),
            mean_score: if scores.is_empty() {
                0.0
            } else {
                scores.iter().sum::<f64>() / scores.len() as f64
            },
            showcase: select_showcase_episodes(&episodes),
            normalized_scores,
            episodes,
        }
    }
}

/// Wall-clock timings, kept apart from the deterministic summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunTiming {
    pub episode_ms: Vec<f64>,
    pub total_ms: f64,
}

impl RunTiming {
    pub fn median_ms(&self) -> f64 {
        let mut v = self.episode_ms.clone();
        v.sort_by(f64::total_cmp);
        match v.len() {
            0 => 0.0,
            n if n % 2 == 1 => v[n / 2],
            n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
        }
    }

    pub fn max_ms(&self) -> f64 {
        self.episode_ms.iter().cloned().fold(0.0, f64::max)
    }
}

pub struct TrainOutcome {
    pub agent: DqnAgent,
    pub checkpoint: Checkpoint,
    pub summary: RunSummary,
    pub timing: RunTiming,
}

pub const RUN_LOG_FILE: &str = "run.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const TIMING_FILE: &str = "timing.json";
pub const FINAL_CHECKPOINT_FILE: &str = "final.ckpt";
pub const CHECKPOINT_DIR: &str = "checkpoints";

pub fn checkpoint_path(out_dir: &Path, episode: usize) -> PathBuf {
    out_dir
        .join(CHECKPOINT_DIR)
        .join(format!("episode_{episode:04}.ckpt"))
}

/// Trains a fresh agent for `config.episodes` episodes. With an output
/// directory, writes the run log, periodic and final checkpoints, the
/// summary and the timing file there.
pub fn train(config: &TrainRunConfig, out_dir: Option<&Path>) -> Result<TrainOutcome, HarnessError> {
    config.validate()?;
    let hash = config.hash();
    let steps = config.steps_per_episode;
    let mut agent = DqnAgent::new(config.agent.clone(), POOL_COUNT, config.agent_seed())?;
    let mut env = LendingEnv::new(config.env_config(), config.randomness(config.episode_seed(0)), steps)?;

    let mut writer = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir.join(CHECKPOINT_DIR))?;
            Some(RunLogWriter::create(&dir.join(RUN_LOG_FILE))?)
        }
        None => None,
    };

    let total_steps = (config.episodes * steps) as u64;
    let mut global_step = 0u64;
    let mut summaries = Vec::with_capacity(config.episodes);
    let mut timing = RunTiming {
        episode_ms: Vec::with_capacity(config.episodes),
        total_ms: 0.0,
    };
    let run_start = Instant::now();

    for episode in 0..config.episodes {
        let started = Instant::now();
        let target_enabled = agent.epsilon.target_enabled;
        let mut policy = LearningPolicy {
            agent: &mut agent,
            global_step,
            total_steps,
            epsilon_used: 0.0,
        };
        let result = run_episode(
            &mut env,
            &mut policy,
            config.randomness(config.episode_seed(episode)),
            steps,
            episode,
        );
        global_step = policy.global_step;
        let log = match result {
            Ok(log) => log,
            Err(e) => {
                if let (HarnessError::NumericalAbort { .. }, Some(dir)) = (&e, out_dir) {
                    write_abort_dump(dir, &e, &agent)?;
                }
                return Err(e);
            }
        };
        if let Some(w) = writer.as_mut() {
            w.write_episode("train", &log)?;
        }
        summaries.push(EpisodeSummary::new(
            &log,
            target_enabled,
            agent.epsilon.value(),
            config.initial_cf,
        ));
        if let Some(dir) = out_dir {
            if config.checkpoint_every > 0 && (episode + 1) % config.checkpoint_every == 0 {
                Checkpoint::from_agent(&agent, (episode + 1) as u64, hash)
                    .save(&checkpoint_path(dir, episode + 1))?;
            }
        }
        timing.episode_ms.push(started.elapsed().as_secs_f64() * 1e3);
    }
    timing.total_ms = run_start.elapsed().as_secs_f64() * 1e3;

    let checkpoint = Checkpoint::from_agent(&agent, config.episodes as u64, hash);
    let summary = RunSummary::new(hash, summaries);
    if let Some(dir) = out_dir {
        if let Some(w) = writer {
            w.finish()?;
        }
        checkpoint.save(&dir.join(FINAL_CHECKPOINT_FILE))?;
        write_json(&dir.join(SUMMARY_FILE), &summary)?;
        write_json(&dir.join(TIMING_FILE), &timing)?;
    }
    Ok(TrainOutcome {
        agent,
        checkpoint,
        summary,
        timing,
    })
}

fn write_abort_dump(dir: &Path, error: &HarnessError, agent: &DqnAgent) -> Result<(), HarnessError> {
    #[derive(Serialize)]
    struct Dump<'a> {
        error: String,
        epsilon: f64,
        adam_steps: u64,
        replay_len: usize,
        non_finite_params: usize,
        dims: &'a [usize],
    }
    let dump = Dump {
        error: error.to_string(),
        epsilon: agent.epsilon.value(),
        adam_steps: agent.adam.t,
        replay_len: agent.replay.len(),
        non_finite_params: agent.online.params().iter().filter(|p| !p.is_finite()).count(),
        dims: agent.online.dims(),
    };
    write_json(&dir.join("abort.json"), &dump)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// A greedy-agent episode and a fixed-CF benchmark episode on identical
/// randomness.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedEpisode {
    pub seed: u64,
    pub agent: EpisodeLog,
    pub benchmark: EpisodeLog,
}

impl PairedEpisode {
    pub fn agent_wins(&self) -> bool {
        self.agent.final_net_total() > self.benchmark.final_net_total()
    }
}

pub fn run_benchmark_pair(
    config: &TrainRunConfig,
    network: &QNetwork,
    seeds: &[u64],
) -> Result<Vec<PairedEpisode>, HarnessError> {
    config.validate()?;
    let steps = config.steps_per_episode;
    let mut env = LendingEnv::new(config.env_config(), config.randomness(seeds.first().copied().unwrap_or(0)), steps)?;
    seeds
        .iter()
        .enumerate()
        .map(|(k, &seed)| {
            let randomness = config.randomness(seed);
            let agent = run_episode(&mut env, &mut GreedyPolicy(network), randomness.clone(), steps, k)?;
            let benchmark = run_episode(&mut env, &mut FixedPolicy::benchmark(), randomness, steps, k)?;
            Ok(PairedEpisode {
                seed,
                agent,
                benchmark,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub seed: u64,
    pub agent_final: f64,
    pub benchmark_final: f64,
    pub agent_bankrupt: bool,
    pub benchmark_bankrupt: bool,
    pub agent_cf_weth: f64,
    pub agent_cf_usdc: f64,
    pub agent_cf_tkn: f64,
    pub agent_wins: bool,
}

impl EvalRow {
    pub fn new(pair: &PairedEpisode, initial_cf: f64) -> Self {
        let cfs = pair
            .agent
            .final_collateral_factors()
            .unwrap_or([initial_cf; POOL_COUNT]);
        Self {
            seed: pair.seed,
            agent_final: pair.agent.final_net_total(),
            benchmark_final: pair.benchmark.final_net_total(),
            agent_bankrupt: pair.agent.bankrupt(),
            benchmark_bankrupt: pair.benchmark.bankrupt(),
            agent_cf_weth: cfs[0],
            agent_cf_usdc: cfs[1],
            agent_cf_tkn: cfs[2],
            agent_wins: pair.agent_wins(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub seeds: usize,
    pub wins: usize,
    pub win_rate: f64,
    pub mean_agent_final: f64,
    pub mean_benchmark_final: f64,
    pub agent_bankruptcies: usize,
    pub benchmark_bankruptcies: usize,
}

impl EvalSummary {
    pub fn new(rows: &[EvalRow]) -> Self {
        let n = rows.len();
        let mean = |f: fn(&EvalRow) -> f64| {
            if n == 0 {
                0.0
            } else {
                rows.iter().map(f).sum::<f64>() / n as f64
            }
        };
        let wins = rows.iter().filter(|r| r.agent_wins).count();
        Self {
            seeds: n,
            wins,
            win_rate: if n == 0 { 0.0 } else { wins as f64 / n as f64 },
            mean_agent_final: mean(|r| r.agent_final),
            mean_benchmark_final: mean(|r| r.benchmark_final),
            agent_bankruptcies: rows.iter().filter(|r| r.agent_bankrupt).count(),
            benchmark_bankruptcies: rows.iter().filter(|r| r.benchmark_bankrupt).count(),
        }
    }
}

pub const EVAL_FILE: &str = "eval.csv";
pub const EVAL_LOG_FILE: &str = "eval_log.csv";
pub const EVAL_SUMMARY_FILE: &str = "eval_summary.json";
pub const BENCH_LOG_FILE: &str = "bench_log.csv";
pub const BENCH_SUMMARY_FILE: &str = "bench_summary.json";

/// Paired evaluation of `network` on `seeds`. With an output directory the
/// per-seed rows, both step logs (runs `agent` and `benchmark`) and the
/// summary are written there.
pub fn evaluate(
    config: &TrainRunConfig,
    network: &QNetwork,
    seeds: &[u64],
    out_dir: Option<&Path>,
) -> Result<(Vec<EvalRow>, EvalSummary), HarnessError> {
    let pairs = run_benchmark_pair(config, network, seeds)?;
    let rows: Vec<EvalRow> = pairs.iter().map(|p| EvalRow::new(p, config.initial_cf)).collect();
    let summary = EvalSummary::new(&rows);
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join(EVAL_FILE))?;
        for r in &rows {
            w.serialize(r)?;
        }
        w.flush()?;
        let mut log = RunLogWriter::create(&dir.join(EVAL_LOG_FILE))?;
        for p in &pairs {
            log.write_episode("agent", &p.agent)?;
            log.write_episode("benchmark", &p.benchmark)?;
        }
        log.finish()?;
        write_json(&dir.join(EVAL_SUMMARY_FILE), &summary)?;
    }
    Ok((rows, summary))
}

/// Per-seed outcome of the fixed collateral factor policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchEpisode {
    pub seed: u64,
    pub steps: usize,
    pub final_net_total: f64,
    pub bad_debt: f64,
    pub bankrupt: bool,
}

/// Runs the fixed collateral factor policy alone on `seeds`, writing the
/// step log (run `benchmark`) and a per-seed summary when asked.
pub fn run_benchmark(
    config: &TrainRunConfig,
    seeds: &[u64],
    out_dir: Option<&Path>,
) -> Result<Vec<BenchEpisode>, HarnessError> {
    config.validate()?;
    let steps = config.steps_per_episode;
    let mut env = LendingEnv::new(config.env_config(), config.randomness(seeds.first().copied().unwrap_or(0)), steps)?;
    let mut log = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(RunLogWriter::create(&dir.join(BENCH_LOG_FILE))?)
        }
        None => None,
    };
    let mut out = Vec::with_capacity(seeds.len());
    for (k, &seed) in seeds.iter().enumerate() {
        let ep = run_episode(&mut env, &mut FixedPolicy::benchmark(), config.randomness(seed), steps, k)?;
        if let Some(w) = log.as_mut() {
            w.write_episode("benchmark", &ep)?;
        }
        out.push(BenchEpisode {
            seed,
            steps: ep.steps.len(),
            final_net_total: ep.final_net_total(),
            bad_debt: ep.steps.last().map_or(0.0, |s| s.record.bad_debt_total),
            bankrupt: ep.bankrupt(),
        });
    }
    if let (Some(w), Some(dir)) = (log, out_dir) {
        w.finish()?;
        write_json(&dir.join(BENCH_SUMMARY_FILE), &out)?;
    }
    Ok(out)
}

/// Replays the logged actions of one episode on its logged seed. Fails if
/// the re-simulated net positions drift from the log, which means the log
/// was produced under a different configuration.
pub fn replay_episode(config: &TrainRunConfig, rows: &[LogRow]) -> Result<EpisodeLog, HarnessError> {
    config.validate()?;
    let first = rows
        .first()
        .ok_or_else(|| HarnessError::InvalidArgument("no rows to replay".into()))?;
    if rows.iter().enumerate().any(|(i, r)| r.step != i || r.seed != first.seed) {
        return Err(HarnessError::InvalidArgument(
            "replay rows must be one episode with consecutive steps".into(),
        ));
    }
    let steps = config.steps_per_episode;
    if rows.len() > steps {
        return Err(HarnessError::InvalidArgument(format!(
            "log has {} steps, config allows {steps}",
            rows.len()
        )));
    }
    let mut env = LendingEnv::new(config.env_config(), config.randomness(first.seed), steps)?;
    let mut policy = ScriptedPolicy {
        actions: rows.iter().map(|r| r.action).collect(),
        next: 0,
    };
    let mut log = run_episode(&mut env, &mut policy, config.randomness(first.seed), rows.len(), first.episode)?;
    for (s, r) in log.steps.iter_mut().zip(rows) {
        let expect = r.net_total;
        let got = s.record.net_total;
        if (got - expect).abs() > 1e-6 * expect.abs().max(1.0) {
            return Err(HarnessError::InvalidArgument(format!(
                "replay diverges from the log at step {}: net total {got} vs {expect}",
                r.step
            )));
        }
        s.stats = StepStats {
            epsilon: r.epsilon,
            loss: r.loss,
        };
    }
    Ok(log)
}

struct ScriptedPolicy {
    actions: Vec<usize>,
    next: usize,
}

impl Policy for ScriptedPolicy {
    fn act(&mut self, _state: &[f64]) -> Result<usize, HarnessError> {
        let a = *self
            .actions
            .get(self.next)
            .ok_or_else(|| HarnessError::InvalidArgument("script exhausted".into()))?;
        self.next += 1;
        Ok(a)
    }
}

/// `0.5 (tanh(0.01 (s - mean) / std) + 1)` with the population standard
/// deviation. A constant population maps to 0.5 everywhere.
pub fn normalize_scores(scores: &[f64]) -> Result<Vec<f64>, HarnessError> {
    if scores.len() < 2 {
        return Err(HarnessError::InvalidArgument(
            "normalization needs at least two scores".into(),
        ));
    }
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let std = (scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n).sqrt();
    if std == 0.0 {
        return Ok(vec![0.5; scores.len()]);
    }
    Ok(scores
        .iter()
        .map(|s| 0.5 * ((0.01 * (s - mean) / std).tanh() + 1.0))
        .collect())
}

/// Early: the first pre-switch episode whose score equals the (lower)
/// median of pre-switch scores. Well trained: the first post-switch episode
/// with a positive score at or above the nearest-rank 75th percentile of
/// positive post-switch scores.
pub fn select_showcase_episodes(episodes: &[EpisodeSummary]) -> Showcase {
    let pick = |pool: Vec<&EpisodeSummary>, rank: fn(usize) -> usize| -> Option<usize> {
        if pool.is_empty() {
            return None;
        }
        let mut scores: Vec<f64> = pool.iter().map(|e| e.score).collect();
        scores.sort_by(f64::total_cmp);
        let threshold = scores[rank(scores.len())];
        pool.iter().find(|e| e.score >= threshold).map(|e| e.episode)
    };
    let pre: Vec<&EpisodeSummary> = episodes.iter().filter(|e| !e.target_enabled).collect();
    let early = if pre.is_empty() {
        None
    } else {
        let mut scores: Vec<f64> = pre.iter().map(|e| e.score).collect();
        scores.sort_by(f64::total_cmp);
        let median = scores[(scores.len() - 1) / 2];
        pre.iter().find(|e| e.score == median).map(|e| e.episode)
    };
    let post: Vec<&EpisodeSummary> = episodes
        .iter()
        .filter(|e| e.target_enabled && e.score > 0.0)
        .collect();
    let well_trained = pick(post, |n| (3 * n).div_ceil(4) - 1);
    Showcase {
        early,
        well_trained,
    }
}
