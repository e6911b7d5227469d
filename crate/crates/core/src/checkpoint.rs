//! Versioned binary checkpoints of the governance agent.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic "LGQN" | version u32 | layer count u32 | dims u32...
//! episode u64 | adam t u64 | primary ticks u64 | target ticks u64
//! steps since sync u64 | target enabled u8 | config hash u64
//! adam lr, beta1, beta2, eps f64 | epsilon start, end, decay1, decay2, switch f64
//! parameter count u64 | online f64... | target f64... | adam m f64... | adam v f64...
//! crc32 of everything above u32
//! ```

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::agent::network::param_count;
use crate::agent::{
    AdamConfig, AdamState, AgentConfig, AgentError, DqnAgent, EpsilonConfig, EpsilonSchedule,
    QNetwork,
};

pub const MAGIC: [u8; 4] = *b"LGQN";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {found}, expected {FORMAT_VERSION}")]
    UnsupportedVersion { found: u32 },
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("checkpoint checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("inconsistent checkpoint: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub dims: Vec<usize>,
    /// Episodes completed when the checkpoint was taken.
    pub episode: u64,
    pub config_hash: u64,
    pub adam_config: AdamConfig,
    pub adam_t: u64,
    pub epsilon_config: EpsilonConfig,
    pub primary_ticks: u64,
    pub target_ticks: u64,
    pub target_enabled: bool,
    pub steps_since_sync: u64,
    pub online: Vec<f64>,
    pub target: Vec<f64>,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
}

impl Checkpoint {
    pub fn from_agent(agent: &DqnAgent, episode: u64, config_hash: u64) -> Self {
        Self {
            dims: agent.online.dims().to_vec(),
            episode,
            config_hash,
            adam_config: agent.adam.config.clone(),
            adam_t: agent.adam.t,
            epsilon_config: agent.epsilon.config.clone(),
            primary_ticks: agent.epsilon.primary_ticks,
            target_ticks: agent.epsilon.target_ticks,
            target_enabled: agent.epsilon.target_enabled,
            steps_since_sync: agent.steps_since_sync(),
            online: agent.online.params().to_vec(),
            target: agent.target.params().to_vec(),
            adam_m: agent.adam.m.clone(),
            adam_v: agent.adam.v.clone(),
        }
    }

    pub fn network(&self) -> Result<QNetwork, CheckpointError> {
        Ok(QNetwork::from_params(&self.dims, self.online.clone())?)
    }

    /// Rebuilds a learner with this state. `config` supplies everything the
    /// file does not hold (replay sizes, gamma, sync cadence); its optimizer
    /// and epsilon settings are replaced by the stored ones.
    pub fn to_agent(&self, mut config: AgentConfig, seed: u64) -> Result<DqnAgent, CheckpointError> {
        config.adam = self.adam_config.clone();
        config.epsilon = self.epsilon_config.clone();
        let adam = AdamState {
            config: self.adam_config.clone(),
            m: self.adam_m.clone(),
            v: self.adam_v.clone(),
            t: self.adam_t,
        };
        let epsilon = EpsilonSchedule::from_counters(
            self.epsilon_config.clone(),
            self.primary_ticks,
            self.target_ticks,
            self.target_enabled,
        );
        let mut agent = DqnAgent::restore(
            config,
            self.network()?,
            adam,
            epsilon,
            self.steps_since_sync,
            seed,
        )?;
        agent.target = QNetwork::from_params(&self.dims, self.target.clone())?;
        Ok(agent)
    }

    /// A warning when the checkpoint was produced under a different config.
    pub fn config_warning(&self, expected_hash: u64) -> Option<String> {
        (self.config_hash != expected_hash).then(|| {
            format!(
                "checkpoint config hash {:016x} differs from current config {:016x}",
                self.config_hash, expected_hash
            )
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.online.len();
        let mut out = Vec::with_capacity(160 + 4 * self.dims.len() + 32 * n);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in [
            self.episode,
            self.adam_t,
            self.primary_ticks,
            self.target_ticks,
            self.steps_since_sync,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.push(self.target_enabled as u8);
        out.extend_from_slice(&self.config_hash.to_le_bytes());
        let a = &self.adam_config;
        let e = &self.epsilon_config;
        for v in [
            a.learning_rate,
            a.beta1,
            a.beta2,
            a.epsilon,
            e.start,
            e.end,
            e.decay_primary,
            e.decay_target,
            e.switch_on_point,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(n as u64).to_le_bytes());
        for block in [&self.online, &self.target, &self.adam_m, &self.adam_v] {
            for v in block.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 8 {
            return Err(CheckpointError::Truncated);
        }
        if bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(CheckpointError::UnsupportedVersion { found: version });
        }
        if bytes.len() < 12 {
            return Err(CheckpointError::Truncated);
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let computed = crc32fast::hash(body);

        let mut r = Reader { bytes: body, pos: 8 };
        // A short file fails the checksum too; report it as truncation when
        // the declared sizes do not fit.
        let parsed = parse_body(&mut r);
        if stored != computed {
            return match parsed {
                Err(CheckpointError::Truncated) => Err(CheckpointError::Truncated),
                _ => Err(CheckpointError::Checksum { stored, computed }),
            };
        }
        let ck = parsed?;
        if r.pos != body.len() {
            return Err(CheckpointError::Inconsistent(format!(
                "{} trailing bytes",
                body.len() - r.pos
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        if end > self.bytes.len() {
            return Err(CheckpointError::Truncated);
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, CheckpointError> {
        let raw = self.take(n.checked_mul(8).ok_or(CheckpointError::Truncated)?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn parse_body(r: &mut Reader) -> Result<Checkpoint, CheckpointError> {
    let layers = r.u32()? as usize;
    if layers < 2 || layers > 64 {
        return Err(CheckpointError::Inconsistent(format!("{layers} layer sizes")));
    }
    let dims = (0..layers)
        .map(|_| r.u32().map(|d| d as usize))
        .collect::<Result<Vec<_>, _>>()?;
    let episode = r.u64()?;
    let adam_t = r.u64()?;
    let primary_ticks = r.u64()?;
    let target_ticks = r.u64()?;
    let steps_since_sync = r.u64()?;
    let target_enabled = match r.u8()? {
        0 => false,
        1 => true,
        b => return Err(CheckpointError::Inconsistent(format!("target flag byte {b}"))),
    };
    let config_hash = r.u64()?;
    let adam_config = AdamConfig {
        learning_rate: r.f64()?,
        beta1: r.f64()?,
        beta2: r.f64()?,
        epsilon: r.f64()?,
    };
    let epsilon_config = EpsilonConfig {
        start: r.f64()?,
        end: r.f64()?,
        decay_primary: r.f64()?,
        decay_target: r.f64()?,
        switch_on_point: r.f64()?,
    };
    let n = r.u64()? as usize;
    if dims.contains(&0) || n != param_count(&dims) {
        return Err(CheckpointError::Inconsistent(format!(
            "{n} parameters for layer sizes {dims:?}"
        )));
    }
    Ok(Checkpoint {
        dims,
        episode,
        config_hash,
        adam_config,
        adam_t,
        epsilon_config,
        primary_ticks,
        target_ticks,
        target_enabled,
        steps_since_sync,
        online: r.f64s(n)?,
        target: r.f64s(n)?,
        adam_m: r.f64s(n)?,
        adam_v: r.f64s(n)?,
    })
}
