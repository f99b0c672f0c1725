//! Toy partially observable tasks with privileged scripted experts.
//!
//! Both tasks contain states whose observations coincide while the correct
//! action differs, so a memoryless policy cannot solve them.

mod cue_recall;
mod two_stage;

use std::fmt;
use std::str::FromStr;

pub use cue_recall::{CueRecall, CueRecallConfig};
pub use two_stage::{TwoStageConfig, TwoStageReach};

use crate::data::{Dataset, Trajectory, TrajectoryMeta};
use crate::error::{Error, Result};
use crate::parallel::{self, Exec};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EnvSpec {
    pub id: String,
    pub obs_dim: usize,
    pub action_dim: usize,
    pub horizon: usize,
    pub success: &'static str,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub obs: Vec<f64>,
    pub done: bool,
    pub success: bool,
}

pub trait Env: Send {
    fn spec(&self) -> EnvSpec;

    /// Deterministic initial observation for `seed`.
    fn reset(&mut self, seed: u64) -> Vec<f64>;

    /// Applies `action` (clipped to the action bounds).
    fn step(&mut self, action: &[f64]) -> Result<StepOutcome>;

    /// Scripted expert action; reads the latent state.
    fn expert_action(&self) -> Vec<f64>;
}

/// Environment selector addressable by string id, e.g. `two-stage-reach`
/// or `cue-recall:L=50:m=+1`.
#[derive(Clone, Debug, PartialEq)]
pub enum EnvKind {
    TwoStageReach(TwoStageConfig),
    CueRecall(CueRecallConfig),
}

impl EnvKind {
    pub fn make(&self) -> Box<dyn Env> {
        match self {
            EnvKind::TwoStageReach(c) => Box::new(TwoStageReach::new(c.clone())),
            EnvKind::CueRecall(c) => Box::new(CueRecall::new(c.clone())),
        }
    }

    pub fn spec(&self) -> EnvSpec {
        self.make().spec()
    }

    pub fn id(&self) -> String {
        self.to_string()
    }

    /// Lifelong task family: cue recall with mappings `(+1, -1, -1)` and
    /// delays `(10, 30, 50)`.
    pub fn cue_family() -> Vec<EnvKind> {
        [(1, 10), (-1, 30), (-1, 50)]
            .into_iter()
            .map(|(mapping, delay)| EnvKind::CueRecall(CueRecallConfig { delay, mapping }))
            .collect()
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EnvKind::TwoStageReach(c) => {
                write!(f, "two-stage-reach")?;
                if c.hold_steps != TwoStageConfig::default().hold_steps {
                    write!(f, ":hold={}", c.hold_steps)?;
                }
                if c.obs_noise > 0.0 {
                    write!(f, ":noise={}", c.obs_noise)?;
                }
                Ok(())
            }
            EnvKind::CueRecall(c) => {
                write!(f, "cue-recall:L={}:m={}", c.delay, if c.mapping > 0 { "+1" } else { "-1" })
            }
        }
    }
}

impl FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split(':');
        let name = parts.next().unwrap_or_default();
        let opts = parts
            .map(|p| {
                p.split_once('=')
                    .ok_or_else(|| Error::Config(format!("bad env option '{p}' in '{s}'")))
            })
            .collect::<Result<Vec<_>>>()?;
        let bad = |k: &str, v: &str| Error::Config(format!("bad value '{v}' for env option '{k}'"));
        match name {
            "two-stage-reach" => {
                let mut c = TwoStageConfig::default();
                for (k, v) in opts {
                    match k {
                        "noise" => c.obs_noise = v.parse().map_err(|_| bad(k, v))?,
                        "hold" => c.hold_steps = v.parse().map_err(|_| bad(k, v))?,
                        _ => return Err(Error::Config(format!("unknown option '{k}' for {name}"))),
                    }
                }
                if !(c.obs_noise >= 0.0) {
                    return Err(bad("noise", &c.obs_noise.to_string()));
                }
                Ok(EnvKind::TwoStageReach(c))
            }
            "cue-recall" => {
                let mut c = CueRecallConfig::default();
                for (k, v) in opts {
                    match k {
                        "L" => c.delay = v.parse().map_err(|_| bad(k, v))?,
                        "m" => {
                            c.mapping = match v {
                                "+1" | "1" => 1,
                                "-1" => -1,
                                _ => return Err(bad(k, v)),
                            }
                        }
                        _ => return Err(Error::Config(format!("unknown option '{k}' for {name}"))),
                    }
                }
                Ok(EnvKind::CueRecall(c))
            }
            _ => Err(Error::Config(format!("unknown environment '{s}'"))),
        }
    }
}

/// Rolls out the scripted expert for one seeded episode.
pub fn expert_episode(kind: &EnvKind, seed: u64) -> Result<Trajectory> {
    let mut env = kind.make();
    let spec = env.spec();
    let mut obs = env.reset(seed);
    let (mut os, mut acts) = (Vec::new(), Vec::new());
    let mut success = false;
    for _ in 0..spec.horizon {
        let a = env.expert_action();
        os.push(obs);
        acts.push(a.clone());
        let out = env.step(&a)?;
        obs = out.obs;
        if out.done {
            success = out.success;
            break;
        }
    }
    Trajectory::from_rows(
        &os,
        &acts,
        TrajectoryMeta {
            task: spec.id,
            seed,
            success,
        },
    )
}

/// Replays a fixed action sequence open-loop; returns the success flag.
pub fn replay(kind: &EnvKind, seed: u64, traj: &Trajectory) -> Result<bool> {
    let mut env = kind.make();
    env.reset(seed);
    for i in 0..traj.len() {
        let out = env.step(traj.action(i))?;
        if out.done {
            return Ok(out.success);
        }
    }
    Ok(false)
}

/// `n` successful expert demonstrations. Episodes use seeds `seed, seed+1, ...`;
/// failed episodes are replaced with fresh seeds past that range.
pub fn generate_demos(kind: &EnvKind, n: usize, seed: u64, exec: Exec) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Invalid("need at least one demonstration".into()));
    }
    let spec = kind.spec();
    let first = parallel::map_indices(exec, n, |i| expert_episode(kind, seed + i as u64));
    let mut demos = Vec::with_capacity(n);
    let mut failures = 0usize;
    for ep in first {
        let ep = ep?;
        if ep.meta.success {
            demos.push(ep);
        } else {
            failures += 1;
        }
    }
    let mut next = seed + n as u64;
    while demos.len() < n {
        let ep = expert_episode(kind, next)?;
        next += 1;
        if ep.meta.success {
            demos.push(ep);
        } else {
            failures += 1;
        }
        if failures * 10 > n {
            break;
        }
    }
    if failures * 10 > n {
        return Err(Error::Env(format!(
            "expert failed {failures} episodes while generating {n} demos on {}",
            spec.id
        )));
    }
    Dataset::new(spec.obs_dim, spec.action_dim, demos)
}
