//! The agent contract and the built-in stand-in policies.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::CompressionPolicy;
use crate::obs::{encode_obs, Act, Gripper, Obs};
use crate::value::{encode_value, Map, NdArray, Value};

pub type AgentError = Box<dyn std::error::Error + Send + Sync>;

/// A policy behind the server.
///
/// The server guarantees `initialize` runs exactly once before any `reset`,
/// and `act` only after at least one `reset`.
pub trait Agent: Send {
    /// Heavy one-time setup such as loading weights.
    fn initialize(&mut self) -> Result<(), AgentError> {
        Ok(())
    }

    /// Starts an episode. The returned map is sent back to the caller as-is.
    fn reset(&mut self, obs: &Obs, instruction: &Value, kwargs: &Map) -> Result<Map, AgentError>;

    /// One forward pass.
    fn act(&mut self, obs: &Obs) -> Result<Act, AgentError>;
}

pub type AgentFactory = Arc<dyn Fn() -> Box<dyn Agent> + Send + Sync>;

pub fn factory<A, F>(f: F) -> AgentFactory
where
    A: Agent + 'static,
    F: Fn() -> A + Send + Sync + 'static,
{
    Arc::new(move || Box::new(f()) as Box<dyn Agent>)
}

pub const DEFAULT_ACTION_DIM: usize = 7;

fn action_shape(obs: &Obs, dim: usize) -> Vec<usize> {
    match obs.batch {
        Some(b) => vec![b, dim],
        None => vec![dim],
    }
}

/// Stable 64-bit digest of an observation's uncompressed encoding.
pub fn obs_digest(obs: &Obs) -> u64 {
    let v = encode_obs(obs, &CompressionPolicy::disabled()).expect("validated observation");
    let bytes = encode_value(&v).expect("encodable observation");
    let h = Sha256::digest(&bytes);
    u64::from_le_bytes(h[..8].try_into().unwrap())
}

/// Returns a zero action and copies the gripper into `info["echo_gripper"]`.
#[derive(Debug, Clone)]
pub struct EchoAgent {
    pub dim: usize,
}

impl Agent for EchoAgent {
    fn reset(&mut self, _obs: &Obs, _instruction: &Value, _kwargs: &Map) -> Result<Map, AgentError> {
        Ok(Map::new())
    }

    fn act(&mut self, obs: &Obs) -> Result<Act, AgentError> {
        let mut act = Act::new(NdArray::zeros_f64(action_shape(obs, self.dim))?);
        let echo = match &obs.gripper {
            None => Value::Null,
            Some(Gripper::Single(g)) => Value::Real(*g),
            Some(Gripper::Batched(g)) => Value::Array(NdArray::vector(g.clone())),
        };
        act.info.insert("echo_gripper".into(), echo);
        Ok(act)
    }
}

/// Uniform actions in `[-1, 1]^D`, reseeded on every reset.
#[derive(Debug, Clone)]
pub struct RandomAgent {
    pub dim: usize,
    pub seed: u64,
    rng: ChaCha8Rng,
}

impl RandomAgent {
    pub fn new(dim: usize, seed: u64) -> Self {
        RandomAgent {
            dim,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl Agent for RandomAgent {
    fn reset(&mut self, _obs: &Obs, _instruction: &Value, kwargs: &Map) -> Result<Map, AgentError> {
        let episode_seed = kwargs.get("seed").and_then(Value::as_int).unwrap_or(0) as u64;
        self.rng = ChaCha8Rng::seed_from_u64(self.seed ^ episode_seed.rotate_left(32));
        Ok(Map::new())
    }

    fn act(&mut self, obs: &Obs) -> Result<Act, AgentError> {
        let shape = action_shape(obs, self.dim);
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-1.0..=1.0)).collect();
        Ok(Act::new(NdArray::from_f64(shape, data)?))
    }
}

/// Replays a fixed list of actions; the last one carries `done = true`.
///
/// Each reply's info holds the step index and a digest of the observation
/// the agent received, so transcripts can be compared across transports.
#[derive(Debug, Clone)]
pub struct ScriptedAgent {
    script: Vec<Vec<f64>>,
    cursor: usize,
}

impl ScriptedAgent {
    pub fn new(script: Vec<Vec<f64>>) -> Result<Self> {
        let dim = script.first().map(Vec::len).unwrap_or(0);
        if dim == 0 || script.iter().any(|a| a.len() != dim) {
            return Err(Error::Config("script needs at least one action, all of equal non-zero length".into()));
        }
        Ok(ScriptedAgent { script, cursor: 0 })
    }

    /// `steps` actions of dimension `dim`; entry `j` of step `i` is
    /// `(i + 1) * 0.01 + j * 0.001`.
    pub fn ramp(steps: usize, dim: usize) -> Result<Self> {
        Self::new(
            (0..steps)
                .map(|i| (0..dim).map(|j| (i + 1) as f64 * 0.01 + j as f64 * 0.001).collect())
                .collect(),
        )
    }
}

impl Agent for ScriptedAgent {
    fn reset(&mut self, _obs: &Obs, _instruction: &Value, _kwargs: &Map) -> Result<Map, AgentError> {
        self.cursor = 0;
        Ok([("accepted".to_string(), Value::Bool(true))].into())
    }

    fn act(&mut self, obs: &Obs) -> Result<Act, AgentError> {
        let idx = self.cursor.min(self.script.len() - 1);
        let row = &self.script[idx];
        let action = match obs.batch {
            None => NdArray::vector(row.clone()),
            Some(b) => NdArray::from_f64(vec![b, row.len()], row.repeat(b))?,
        };
        let mut act = Act::new(action);
        act.done = self.cursor + 1 >= self.script.len();
        act.info.insert("step".into(), Value::Int(self.cursor as i64));
        act.info.insert("obs_digest".into(), Value::Int(obs_digest(obs) as i64));
        self.cursor += 1;
        Ok(act)
    }
}

/// Zero actions after an artificial inference delay.
#[derive(Debug, Clone)]
pub struct SleepAgent {
    pub dim: usize,
    pub delay: Duration,
}

impl Agent for SleepAgent {
    fn reset(&mut self, _obs: &Obs, _instruction: &Value, _kwargs: &Map) -> Result<Map, AgentError> {
        Ok(Map::new())
    }

    fn act(&mut self, obs: &Obs) -> Result<Act, AgentError> {
        if !self.delay.is_zero() {
            std::thread::sleep(self.delay);
        }
        Ok(Act::new(NdArray::zeros_f64(action_shape(obs, self.dim))?))
    }
}

fn arg<T: std::str::FromStr>(args: &BTreeMap<String, String>, key: &str, default: T) -> Result<T> {
    match args.get(key) {
        None => Ok(default),
        Some(v) => v
            .parse()
            .map_err(|_| Error::Config(format!("agent argument {key}={v:?} is not valid"))),
    }
}

fn parse_script(s: &str) -> Result<Vec<Vec<f64>>> {
    s.split(';')
        .map(|row| {
            row.split(',')
                .map(|x| {
                    x.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Config(format!("bad script entry {x:?}")))
                })
                .collect()
        })
        .collect()
}

pub const BUILTIN_AGENTS: [&str; 4] = ["echo", "random", "scripted", "sleep"];

/// Builds a factory for a built-in agent from `key=value` arguments.
///
/// * all: `dim` (default 7)
/// * random: `seed` (default 0)
/// * scripted: `script` as `a,b,c;d,e,f` rows, or `steps` (default 3) for a ramp
/// * sleep: `ms` (default 0, fractional allowed)
pub fn builtin_factory(name: &str, args: &BTreeMap<String, String>) -> Result<AgentFactory> {
    let dim = arg(args, "dim", DEFAULT_ACTION_DIM)?;
    if dim == 0 {
        return Err(Error::Config("dim must be at least 1".into()));
    }
    Ok(match name {
        "echo" => factory(move || EchoAgent { dim }),
        "random" => {
            let seed = arg(args, "seed", 0u64)?;
            factory(move || RandomAgent::new(dim, seed))
        }
        "scripted" => {
            let proto = match args.get("script") {
                Some(s) => ScriptedAgent::new(parse_script(s)?)?,
                None => ScriptedAgent::ramp(arg(args, "steps", 3usize)?, dim)?,
            };
            factory(move || proto.clone())
        }
        "sleep" => {
            let ms: f64 = arg(args, "ms", 0.0)?;
            if !(ms >= 0.0 && ms.is_finite()) {
                return Err(Error::Config(format!("sleep ms must be non-negative, got {ms}")));
            }
            let delay = Duration::from_secs_f64(ms / 1000.0);
            factory(move || SleepAgent { dim, delay })
        }
        other => {
            return Err(Error::Config(format!(
                "unknown agent {other:?}; expected one of {BUILTIN_AGENTS:?}"
            )))
        }
    })
}
