//! Cue recall: a sign is shown at the first step, then hidden for `L`
//! steps. At the decision step the agent must output `m * cue`.
//!
//! Observation `[cue or 0, go flag]`; action is a scalar in `[-1, 1]`.

use super::{Env, EnvSpec, StepOutcome};
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CueRecallConfig {
    /// Number of blank steps between the cue and the decision.
    pub delay: usize,
    /// `+1` or `-1`.
    pub mapping: i8,
}

impl Default for CueRecallConfig {
    fn default() -> Self {
        CueRecallConfig {
            delay: 50,
            mapping: 1,
        }
    }
}

pub struct CueRecall {
    config: CueRecallConfig,
    cue: f64,
    t: usize,
    done: bool,
}

impl CueRecall {
    pub fn new(config: CueRecallConfig) -> Self {
        CueRecall {
            config,
            cue: 1.0,
            t: 0,
            done: false,
        }
    }

    /// Cue for an episode seed: `+1` for even seeds, `-1` for odd ones.
    pub fn cue_for_seed(seed: u64) -> f64 {
        if seed % 2 == 0 {
            1.0
        } else {
            -1.0
        }
    }

    pub fn cue(&self) -> f64 {
        self.cue
    }

    /// 0-based index of the decision step.
    pub fn decision_step(&self) -> usize {
        self.config.delay + 1
    }

    fn observe(&self) -> Vec<f64> {
        vec![
            if self.t == 0 { self.cue } else { 0.0 },
            if self.t == self.decision_step() { 1.0 } else { 0.0 },
        ]
    }
}

impl Env for CueRecall {
    fn spec(&self) -> EnvSpec {
        EnvSpec {
            id: super::EnvKind::CueRecall(self.config.clone()).id(),
            obs_dim: 2,
            action_dim: 1,
            horizon: self.config.delay + 2,
            success: "sign of the decision action equals mapping * cue",
        }
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.cue = Self::cue_for_seed(seed);
        self.t = 0;
        self.done = false;
        self.observe()
    }

    fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        if action.len() != 1 {
            return shape_err("cue_recall", format!("action of length {}", action.len()));
        }
        if self.done {
            return Err(Error::Env("step after episode end".into()));
        }
        let mut success = false;
        if self.t == self.decision_step() {
            let target = f64::from(self.config.mapping) * self.cue;
            let a = action[0];
            success = a.is_finite() && a != 0.0 && a.signum() == target;
            self.done = true;
        }
        self.t += 1;
        Ok(StepOutcome {
            obs: self.observe(),
            done: self.done,
            success,
        })
    }

    fn expert_action(&self) -> Vec<f64> {
        if self.t == self.decision_step() {
            vec![f64::from(self.config.mapping) * self.cue]
        } else {
            vec![0.0]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn episode(cfg: &CueRecallConfig, seed: u64, decide: f64) -> (bool, usize) {
        let mut env = CueRecall::new(cfg.clone());
        env.reset(seed);
        let mut n = 0;
        loop {
            n += 1;
            let a = if env.t == env.decision_step() { decide } else { 0.0 };
            let out = env.step(&[a]).unwrap();
            if out.done {
                return (out.success, n);
            }
        }
    }

    #[test]
    fn length_and_scoring() {
        let cfg = CueRecallConfig { delay: 5, mapping: -1 };
        assert_eq!(episode(&cfg, 0, -0.3), (true, 7));
        assert!(!episode(&cfg, 0, 0.3).0);
        assert!(episode(&cfg, 1, 0.3).0);
        assert!(!episode(&cfg, 1, 0.0).0);
    }

    #[test]
    fn cue_only_visible_at_start() {
        let mut env = CueRecall::new(CueRecallConfig { delay: 3, mapping: 1 });
        assert_eq!(env.reset(1), vec![-1.0, 0.0]);
        let mut obs = Vec::new();
        for _ in 0..4 {
            obs.push(env.step(&[0.0]).unwrap().obs);
        }
        assert_eq!(obs, vec![vec![0.0, 0.0], vec![0.0, 0.0], vec![0.0, 0.0], vec![0.0, 1.0]]);
    }

    #[test]
    fn cues_are_balanced() {
        let pos = (0..100).filter(|&s| CueRecall::cue_for_seed(s) > 0.0).count();
        assert_eq!(pos, 50);
    }
}
