//! Chunked deployment: a buffer of recent chunk predictions and an
//! exponentially weighted average over every chunk that covers the current
//! step.

use std::collections::VecDeque;

use crate::data::{Trajectory, TrajectoryMeta};
use crate::envs::{Env, EnvKind};
use crate::error::{shape_err, Error, Result};
use crate::init;
use crate::policy::{gmm_sample, ActionChunk, Policy, Prediction};

pub const DEFAULT_GAMMA: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AggregationConfig {
    pub enabled: bool,
    /// Weight decay per step of prediction age, in `(0, 1]`.
    pub gamma: f64,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        AggregationConfig {
            enabled: true,
            gamma: DEFAULT_GAMMA,
        }
    }
}

impl AggregationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("gamma must lie in (0, 1], got {}", self.gamma)));
        }
        Ok(())
    }
}

/// The last `K` chunks, each tagged with the 0-based step `j` it was
/// predicted at. A chunk covers steps `j..j + K`.
#[derive(Clone, Debug)]
pub struct PredictionBuffer {
    k: usize,
    entries: VecDeque<(usize, ActionChunk)>,
}

impl PredictionBuffer {
    pub fn new(k: usize) -> Self {
        PredictionBuffer {
            k,
            entries: VecDeque::with_capacity(k),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Drops chunks that no longer cover step `t`.
    pub fn evict(&mut self, t: usize) {
        while let Some((j, _)) = self.entries.front() {
            if j + self.k <= t {
                self.entries.pop_front();
            } else {
                break;
            }
        }
    }

    pub fn push(&mut self, j: usize, chunk: ActionChunk) -> Result<()> {
        if chunk.k() != self.k {
            return shape_err("prediction_buffer", format!("chunk of {} rows, buffer K={}", chunk.k(), self.k));
        }
        if self.entries.back().is_some_and(|(last, _)| *last >= j) {
            return Err(Error::Invalid(format!("chunk for step {j} pushed out of order")));
        }
        self.evict(j);
        self.entries.push_back((j, chunk));
        Ok(())
    }

    /// `(age, row)` for every buffered chunk covering `t`.
    pub fn candidates(&self, t: usize) -> impl Iterator<Item = (usize, &[f64])> {
        self.entries
            .iter()
            .filter(move |(j, _)| *j <= t && t < j + self.k)
            .map(move |(j, c)| (t - j, c.row(t - j)))
    }
}

/// `sum_j gamma^(t-j) chunk_j[t-j] / sum_j gamma^(t-j)` over the chunks
/// covering step `t`.
pub fn aggregate(buffer: &PredictionBuffer, t: usize, gamma: f64) -> Result<Vec<f64>> {
    let mut acc: Option<Vec<f64>> = None;
    let mut norm = 0.0;
    for (age, row) in buffer.candidates(t) {
        let w = gamma.powi(age as i32);
        let a = acc.get_or_insert_with(|| vec![0.0; row.len()]);
        for (x, r) in a.iter_mut().zip(row) {
            *x += w * r;
        }
        norm += w;
    }
    let mut a = acc.ok_or_else(|| Error::Invalid(format!("no buffered prediction covers step {t}")))?;
    a.iter_mut().for_each(|x| *x /= norm);
    Ok(a)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RolloutConfig {
    pub aggregation: AggregationConfig,
    /// Defaults to the environment horizon.
    pub max_steps: Option<usize>,
    /// Sample GMM actions instead of taking the dominant component mean.
    pub gmm_sampling: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    /// Observations and the executed (pre-clipping) actions.
    pub trajectory: Trajectory,
    pub success: bool,
}

/// Runs one seeded episode. The policy's history reset interval, if any, is
/// applied exactly as in training.
pub fn rollout(policy: &Policy, env: &mut dyn Env, cfg: &RolloutConfig, seed: u64) -> Result<Rollout> {
    cfg.aggregation.validate()?;
    let spec = env.spec();
    let pc = policy.config();
    if spec.obs_dim != pc.obs_dim || spec.action_dim != pc.action_dim {
        return shape_err(
            "rollout",
            format!(
                "env {} has dims ({}, {}), policy ({}, {})",
                spec.id, spec.obs_dim, spec.action_dim, pc.obs_dim, pc.action_dim
            ),
        );
    }
    let reset = pc.history_reset;
    let max_steps = cfg.max_steps.unwrap_or(spec.horizon);
    let mut sampler = init::rng(seed ^ 0x524f_4c4c);
    let mut state = policy.reset();
    let mut obs = env.reset(seed);
    let mut buffer: Option<PredictionBuffer> = None;
    let (mut os, mut acts) = (Vec::new(), Vec::new());
    let mut success = false;
    for t in 0..max_steps {
        if state.step_index != t as u64 {
            return Err(Error::Invalid(format!("policy state at step {} but env at {t}", state.step_index)));
        }
        if let Some(r) = reset {
            if state.step_index % u64::from(r) == 0 {
                state.clear_history();
            }
        }
        let (pred, next) = policy.act(&obs, &state)?;
        state = next;
        let chunk = match (&pred, cfg.gmm_sampling) {
            (Prediction::Gmm(g), true) => {
                let a = gmm_sample(g, &mut sampler);
                ActionChunk::new(1, a.len(), a)?
            }
            _ => pred.to_chunk(),
        };
        let action = if cfg.aggregation.enabled {
            let buf = buffer.get_or_insert_with(|| PredictionBuffer::new(chunk.k()));
            buf.push(t, chunk)?;
            aggregate(buf, t, cfg.aggregation.gamma)?
        } else {
            chunk.row(0).to_vec()
        };
        os.push(obs);
        acts.push(action.clone());
        let out = env.step(&action)?;
        obs = out.obs;
        if out.done {
            success = out.success;
            break;
        }
    }
    let trajectory = Trajectory::from_rows(
        &os,
        &acts,
        TrajectoryMeta {
            task: spec.id,
            seed,
            success,
        },
    )?;
    Ok(Rollout { trajectory, success })
}

pub fn rollout_env(policy: &Policy, kind: &EnvKind, cfg: &RolloutConfig, seed: u64) -> Result<Rollout> {
    rollout(policy, kind.make().as_mut(), cfg, seed)
}

/// `sum_t ||a_{t+1} - a_t||_2` over a trajectory's actions.
pub fn total_variation(traj: &Trajectory) -> f64 {
    (1..traj.len())
        .map(|i| {
            traj.action(i)
                .iter()
                .zip(traj.action(i - 1))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicyConfig;

    fn chunk(rows: &[f64]) -> ActionChunk {
        ActionChunk::new(rows.len(), 1, rows.to_vec()).unwrap()
    }

    #[test]
    fn single_candidate_is_its_row() {
        let mut b = PredictionBuffer::new(3);
        b.push(4, chunk(&[1.0, 2.0, 3.0])).unwrap();
        for g in [0.1, 0.9, 1.0] {
            assert_eq!(aggregate(&b, 5, g).unwrap(), vec![2.0]);
        }
    }

    #[test]
    fn two_candidates_weighted() {
        let mut b = PredictionBuffer::new(2);
        b.push(0, chunk(&[0.0, 1.0])).unwrap();
        b.push(1, chunk(&[2.0, 0.0])).unwrap();
        assert_eq!(aggregate(&b, 1, 0.5).unwrap(), vec![5.0 / 3.0]);
    }

    #[test]
    fn gamma_one_is_plain_mean() {
        let mut b = PredictionBuffer::new(3);
        b.push(0, chunk(&[9.0, 9.0, 1.0])).unwrap();
        b.push(1, chunk(&[9.0, 2.0, 9.0])).unwrap();
        b.push(2, chunk(&[6.0, 9.0, 9.0])).unwrap();
        assert_eq!(aggregate(&b, 2, 1.0).unwrap(), vec![3.0]);
    }

    #[test]
    fn stale_chunks_are_evicted() {
        let mut b = PredictionBuffer::new(2);
        b.push(0, chunk(&[1.0, 1.0])).unwrap();
        b.push(3, chunk(&[5.0, 5.0])).unwrap();
        assert_eq!(b.len(), 1);
        assert!(aggregate(&b, 2, 0.9).is_err());
        assert!(b.push(3, chunk(&[0.0, 0.0])).is_err());
        assert!(b.push(4, chunk(&[0.0])).is_err());
    }

    #[test]
    fn k1_without_aggregation_is_closed_loop() {
        let kind: EnvKind = "cue-recall:L=3:m=+1".parse().unwrap();
        let policy = Policy::new(PolicyConfig::desk(2, 1, 1), 2).unwrap();
        let off = RolloutConfig {
            aggregation: AggregationConfig {
                enabled: false,
                gamma: 0.9,
            },
            ..Default::default()
        };
        let a = rollout_env(&policy, &kind, &off, 5).unwrap();
        let b = rollout_env(&policy, &kind, &RolloutConfig::default(), 5).unwrap();
        assert_eq!(a, b);
        let mut state = policy.reset();
        for i in 0..a.trajectory.len() {
            let (p, s) = policy.act(a.trajectory.obs(i), &state).unwrap();
            assert_eq!(p.to_chunk().row(0), a.trajectory.action(i));
            state = s;
        }
    }

    #[test]
    fn repeat_rollouts_match() {
        let kind: EnvKind = "two-stage-reach".parse().unwrap();
        let policy = Policy::new(PolicyConfig::desk(2, 2, 4), 3).unwrap();
        let cfg = RolloutConfig::default();
        assert_eq!(rollout_env(&policy, &kind, &cfg, 8).unwrap(), rollout_env(&policy, &kind, &cfg, 8).unwrap());
    }

    #[test]
    fn dim_mismatch_is_rejected() {
        let kind: EnvKind = "two-stage-reach".parse().unwrap();
        let policy = Policy::new(PolicyConfig::desk(2, 1, 1), 3).unwrap();
        assert!(rollout_env(&policy, &kind, &RolloutConfig::default(), 0).is_err());
    }
}
