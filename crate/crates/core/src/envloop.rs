//! Gymnasium-style environment loop driving a policy.
//!
//! ```text
//! env.reset -> policy.reset(first obs) -> { policy.act -> env.step }*
//! ```
//!
//! The loop stops after the step on which the policy reports `done`, the
//! environment terminates or truncates, or `max_steps` is reached. Reward is
//! recorded in the statistics but never sent to the policy.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::Agent;
use crate::client::PolicyClient;
use crate::error::{codes, Error, Result};
use crate::fixtures::{gradient_image, noise_image};
use crate::obs::{Act, Gripper, Obs};
use crate::value::{Map, NdArray, Value};

pub struct Step<O> {
    pub obs: O,
    pub reward: f64,
    pub terminated: bool,
    pub truncated: bool,
    pub info: Map,
}

pub trait Env {
    type Observation;
    type Action;

    fn reset(&mut self, seed: Option<u64>) -> Result<(Self::Observation, Map)>;

    /// Must not be called after termination or truncation until `reset`.
    fn step(&mut self, action: Self::Action) -> Result<Step<Self::Observation>>;
}

/// Translates between an environment's native types and the protocol's.
pub trait Wrapper<E: Env> {
    fn to_obs(&self, obs: &E::Observation) -> Result<Obs>;
    #[allow(clippy::wrong_self_convention)]
    fn from_act(&self, act: &Act) -> Result<E::Action>;
}

/// For environments that already speak [`Obs`] and take the raw action array.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityWrapper;

impl<E: Env<Observation = Obs, Action = NdArray>> Wrapper<E> for IdentityWrapper {
    fn to_obs(&self, obs: &Obs) -> Result<Obs> {
        Ok(obs.clone())
    }

    fn from_act(&self, act: &Act) -> Result<NdArray> {
        Ok(act.action.clone())
    }
}

/// Anything that can answer `reset` and `act`: a remote client or an
/// in-process agent.
pub trait Policy {
    fn reset(&mut self, obs: &Obs, instruction: &Value, kwargs: &Map) -> Result<Map>;
    fn act(&mut self, obs: &Obs) -> Result<Act>;
}

impl<P: Policy + ?Sized> Policy for &mut P {
    fn reset(&mut self, obs: &Obs, instruction: &Value, kwargs: &Map) -> Result<Map> {
        (**self).reset(obs, instruction, kwargs)
    }

    fn act(&mut self, obs: &Obs) -> Result<Act> {
        (**self).act(obs)
    }
}

/// Sends `INITIALIZE` before the first `reset` if the caller has not.
impl Policy for PolicyClient {
    fn reset(&mut self, obs: &Obs, instruction: &Value, kwargs: &Map) -> Result<Map> {
        if !self.is_initialized() {
            self.initialize()?;
        }
        PolicyClient::reset(self, obs, instruction, kwargs)
    }

    fn act(&mut self, obs: &Obs) -> Result<Act> {
        PolicyClient::act(self, obs)
    }
}

/// Runs an agent in the caller's thread. `initialize` runs on first use.
pub struct InProcess<A> {
    agent: A,
    initialized: bool,
    ready: bool,
}

impl<A: Agent> InProcess<A> {
    pub fn new(agent: A) -> Self {
        InProcess {
            agent,
            initialized: false,
            ready: false,
        }
    }

    pub fn into_inner(self) -> A {
        self.agent
    }
}

fn agent_err(e: crate::agent::AgentError) -> Error {
    Error::Remote {
        code: codes::AGENT_FAILURE.into(),
        message: e.to_string(),
    }
}

impl<A: Agent> Policy for InProcess<A> {
    fn reset(&mut self, obs: &Obs, instruction: &Value, kwargs: &Map) -> Result<Map> {
        if !self.initialized {
            self.agent.initialize().map_err(agent_err)?;
            self.initialized = true;
        }
        obs.validate()?;
        let info = self.agent.reset(obs, instruction, kwargs).map_err(agent_err)?;
        self.ready = true;
        Ok(info)
    }

    fn act(&mut self, obs: &Obs) -> Result<Act> {
        if !self.ready {
            return Err(Error::Protocol("act before reset".into()));
        }
        obs.validate()?;
        let act = self.agent.act(obs).map_err(agent_err)?;
        act.validate(obs.batch)?;
        Ok(act)
    }
}

#[derive(Debug, Clone)]
pub struct EpisodeOptions {
    pub max_steps: usize,
    pub instruction: Value,
    pub seed: Option<u64>,
    /// Passed to `policy.reset` as keyword arguments.
    pub kwargs: Map,
}

impl Default for EpisodeOptions {
    fn default() -> Self {
        EpisodeOptions {
            max_steps: 100,
            instruction: Value::Str(String::new()),
            seed: None,
            kwargs: Map::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub steps: usize,
    pub total_reward: f64,
    pub terminated: bool,
    pub truncated: bool,
    /// Seconds from `env.reset` to the end of the last step.
    pub wall_time: f64,
    /// Mean seconds spent inside `policy.act`.
    pub mean_rtt: f64,
}

/// An episode that aborted, with the statistics gathered up to that point.
#[derive(Debug, thiserror::Error)]
#[error("episode aborted after {} steps: {error}", stats.steps)]
pub struct EpisodeFailure {
    pub stats: EpisodeStats,
    #[source]
    pub error: Error,
}

pub fn run_episode<E, P, W>(env: &mut E, policy: P, wrapper: &W, opts: &EpisodeOptions) -> Result<EpisodeStats, EpisodeFailure>
where
    E: Env,
    P: Policy,
    W: Wrapper<E>,
{
    run_episode_observed(env, policy, wrapper, opts, |_, _| {})
}

/// Like [`run_episode`], calling `observe` with every observation sent to
/// the policy and the action it returned.
pub fn run_episode_observed<E, P, W, F>(
    env: &mut E,
    mut policy: P,
    wrapper: &W,
    opts: &EpisodeOptions,
    mut observe: F,
) -> Result<EpisodeStats, EpisodeFailure>
where
    E: Env,
    P: Policy,
    W: Wrapper<E>,
    F: FnMut(&Obs, &Act),
{
    let mut stats = EpisodeStats::default();
    if opts.max_steps == 0 {
        return Err(EpisodeFailure {
            stats,
            error: Error::Config("max_steps must be at least 1".into()),
        });
    }
    let start = Instant::now();
    let mut act_time = Duration::ZERO;
    let res = (|| -> Result<()> {
        let (native, _info) = env.reset(opts.seed)?;
        let mut obs = wrapper.to_obs(&native)?;
        policy.reset(&obs, &opts.instruction, &opts.kwargs)?;
        loop {
            let t = Instant::now();
            let act = policy.act(&obs)?;
            act_time += t.elapsed();
            observe(&obs, &act);
            let step = env.step(wrapper.from_act(&act)?)?;
            stats.steps += 1;
            stats.total_reward += step.reward;
            stats.terminated = step.terminated;
            stats.truncated = step.truncated;
            if step.terminated || step.truncated || act.done {
                return Ok(());
            }
            if stats.steps >= opts.max_steps {
                stats.truncated = true;
                return Ok(());
            }
            obs = wrapper.to_obs(&step.obs)?;
        }
    })();
    stats.wall_time = start.elapsed().as_secs_f64();
    if stats.steps > 0 {
        stats.mean_rtt = act_time.as_secs_f64() / stats.steps as f64;
    }
    match res {
        Ok(()) => Ok(stats),
        Err(error) => Err(EpisodeFailure { stats, error }),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub seed: Option<u64>,
    pub stats: EpisodeStats,
    /// Set when the episode aborted; `stats` then holds the partial figures.
    pub error: Option<String>,
}

/// Aggregate over the episodes that completed without error.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub episodes: usize,
    pub errors: usize,
    pub mean_steps: f64,
    pub mean_reward: f64,
    /// Fraction of completed episodes that ended with `terminated`.
    pub success_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub episodes: Vec<EpisodeRecord>,
    pub aggregate: Aggregate,
}

impl Aggregate {
    pub fn from_records(records: &[EpisodeRecord]) -> Self {
        let ok: Vec<&EpisodeStats> = records.iter().filter(|r| r.error.is_none()).map(|r| &r.stats).collect();
        let n = ok.len();
        let mean = |f: &dyn Fn(&EpisodeStats) -> f64| {
            if n == 0 {
                0.0
            } else {
                ok.iter().map(|s| f(s)).sum::<f64>() / n as f64
            }
        };
        Aggregate {
            episodes: records.len(),
            errors: records.len() - n,
            mean_steps: mean(&|s| s.steps as f64),
            mean_reward: mean(&|s| s.total_reward),
            success_rate: mean(&|s| if s.terminated { 1.0 } else { 0.0 }),
        }
    }
}

/// Runs `n_episodes` serially, each on a fresh environment from
/// `env_factory(episode_index)`. Episode errors are recorded and the run
/// continues.
pub fn run_eval<E, P, W, F>(
    mut env_factory: F,
    mut policy: P,
    wrapper: &W,
    n_episodes: usize,
    seeds: Option<&[u64]>,
    opts: &EpisodeOptions,
) -> Result<EvalReport>
where
    E: Env,
    P: Policy,
    W: Wrapper<E>,
    F: FnMut(usize) -> E,
{
    if n_episodes == 0 {
        return Err(Error::Config("n_episodes must be at least 1".into()));
    }
    if let Some(s) = seeds {
        if s.len() != n_episodes {
            return Err(Error::Config(format!("{} seeds for {n_episodes} episodes", s.len())));
        }
    }
    let mut episodes = Vec::with_capacity(n_episodes);
    for i in 0..n_episodes {
        let seed = seeds.map(|s| s[i]).or(opts.seed);
        let mut env = env_factory(i);
        let ep_opts = EpisodeOptions {
            seed,
            ..opts.clone()
        };
        let (stats, error) = match run_episode(&mut env, &mut policy, wrapper, &ep_opts) {
            Ok(s) => (s, None),
            Err(f) => {
                log::warn!("episode {i} failed: {}", f.error);
                (f.stats, Some(f.error.to_string()))
            }
        };
        episodes.push(EpisodeRecord {
            episode: i,
            seed,
            stats,
            error,
        });
    }
    let aggregate = Aggregate::from_records(&episodes);
    Ok(EvalReport { episodes, aggregate })
}

/// Terminates after exactly `n` steps with reward 1 on the final one.
///
/// Emits two cameras: `noise` (seeded white noise, new each step) and
/// `counter` (a gradient keyed to the step count), plus gripper `steps / n`.
#[derive(Debug, Clone)]
pub struct CountdownEnv {
    n: usize,
    size: usize,
    step: usize,
    episode_seed: u64,
    done: bool,
    started: bool,
    /// Fail with an error on this (1-based) step.
    pub fail_on_step: Option<usize>,
}

impl CountdownEnv {
    pub fn new(n: usize) -> Self {
        Self::with_size(n, 224)
    }

    pub fn with_size(n: usize, size: usize) -> Self {
        assert!(n >= 1, "countdown needs at least one step");
        CountdownEnv {
            n,
            size,
            step: 0,
            episode_seed: 0,
            done: false,
            started: false,
            fail_on_step: None,
        }
    }

    pub fn failing_on(mut self, step: usize) -> Self {
        self.fail_on_step = Some(step);
        self
    }

    fn observe(&self) -> Obs {
        let noise_seed = self.episode_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(self.step as u64);
        Obs::new()
            .with_camera("noise", noise_image(self.size, noise_seed))
            .with_camera("counter", gradient_image(self.size, self.step as u64))
            .with_gripper(self.step as f64 / self.n as f64)
    }
}

impl Env for CountdownEnv {
    type Observation = Obs;
    type Action = NdArray;

    fn reset(&mut self, seed: Option<u64>) -> Result<(Obs, Map)> {
        self.episode_seed = seed.unwrap_or_else(|| ChaCha8Rng::from_entropy().gen());
        self.step = 0;
        self.done = false;
        self.started = true;
        Ok((self.observe(), Map::new()))
    }

    fn step(&mut self, action: NdArray) -> Result<Step<Obs>> {
        if !self.started || self.done {
            return Err(Error::Env("step called without reset".into()));
        }
        if action.is_empty() {
            return Err(Error::Env("empty action".into()));
        }
        self.step += 1;
        if self.fail_on_step == Some(self.step) {
            return Err(Error::Env(format!("configured failure on step {}", self.step)));
        }
        let terminated = self.step >= self.n;
        self.done = terminated;
        Ok(Step {
            obs: self.observe(),
            reward: if terminated { 1.0 } else { 0.0 },
            terminated,
            truncated: false,
            info: [("step".to_string(), Value::Int(self.step as i64))].into(),
        })
    }
}

/// No cameras, no gripper; terminates after `n` steps. For protocol tests.
#[derive(Debug, Clone)]
pub struct NullEnv {
    n: usize,
    step: usize,
}

impl NullEnv {
    pub fn new(n: usize) -> Self {
        NullEnv { n: n.max(1), step: 0 }
    }
}

impl Env for NullEnv {
    type Observation = Obs;
    type Action = NdArray;

    fn reset(&mut self, _seed: Option<u64>) -> Result<(Obs, Map)> {
        self.step = 0;
        Ok((Obs::new(), Map::new()))
    }

    fn step(&mut self, _action: NdArray) -> Result<Step<Obs>> {
        if self.step >= self.n {
            return Err(Error::Env("step called after termination".into()));
        }
        self.step += 1;
        let terminated = self.step >= self.n;
        Ok(Step {
            obs: Obs::new(),
            reward: if terminated { 1.0 } else { 0.0 },
            terminated,
            truncated: false,
            info: Map::new(),
        })
    }
}

/// Stacks `k` countdown environments into one batched observation.
///
/// Episode `i` of the batch is seeded with `seed + i`. Reward is the sum
/// over members; the batch terminates when every member has.
#[derive(Debug, Clone)]
pub struct BatchEnv {
    envs: Vec<CountdownEnv>,
}

impl BatchEnv {
    pub fn new(k: usize, n: usize, size: usize) -> Self {
        assert!(k >= 1, "batch needs at least one environment");
        BatchEnv {
            envs: (0..k).map(|_| CountdownEnv::with_size(n, size)).collect(),
        }
    }

    fn stack(obs: Vec<Obs>) -> Result<Obs> {
        let b = obs.len();
        let mut out = Obs {
            batch: Some(b),
            ..Obs::default()
        };
        let names: Vec<String> = obs[0].cameras.keys().cloned().collect();
        for name in names {
            let first = &obs[0].cameras[&name];
            let mut shape = vec![b];
            shape.extend_from_slice(first.shape());
            let mut data = Vec::with_capacity(first.byte_len() * b);
            for o in &obs {
                data.extend_from_slice(o.cameras[&name].as_u8().expect("u8 camera"));
            }
            out.cameras.insert(name, NdArray::from_u8(shape, data)?);
        }
        let grippers = obs
            .iter()
            .map(|o| match o.gripper {
                Some(Gripper::Single(g)) => g,
                _ => 0.0,
            })
            .collect();
        out.gripper = Some(Gripper::Batched(grippers));
        Ok(out)
    }
}

impl Env for BatchEnv {
    type Observation = Obs;
    type Action = NdArray;

    fn reset(&mut self, seed: Option<u64>) -> Result<(Obs, Map)> {
        let base = seed.unwrap_or_else(|| ChaCha8Rng::from_entropy().gen());
        let obs = self
            .envs
            .iter_mut()
            .enumerate()
            .map(|(i, e)| e.reset(Some(base.wrapping_add(i as u64))).map(|(o, _)| o))
            .collect::<Result<Vec<_>>>()?;
        Ok((Self::stack(obs)?, Map::new()))
    }

    fn step(&mut self, action: NdArray) -> Result<Step<Obs>> {
        let b = self.envs.len();
        let s = action.shape();
        if s.len() != 2 || s[0] != b {
            return Err(Error::Env(format!("batched action must be {b} x D, got {s:?}")));
        }
        let d = s[1];
        let flat = action.to_f64_vec();
        let mut obs = Vec::with_capacity(b);
        let (mut reward, mut all_done) = (0.0, true);
        for (i, env) in self.envs.iter_mut().enumerate() {
            let row = NdArray::vector(flat[i * d..(i + 1) * d].to_vec());
            let st = env.step(row)?;
            reward += st.reward;
            all_done &= st.terminated;
            obs.push(st.obs);
        }
        Ok(Step {
            obs: Self::stack(obs)?,
            reward,
            terminated: all_done,
            truncated: false,
            info: Map::new(),
        })
    }
}
