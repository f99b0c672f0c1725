//! Two-stage reach: visit A, come back to the origin, then reach B.
//!
//! The agent only sees its position. The origin is observed both before A
//! is visited and after returning from it, with different correct actions.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Env, EnvSpec, StepOutcome};
use crate::error::{shape_err, Result};
use crate::init::{self, SeededRng};

pub const GOAL_A: [f64; 2] = [1.0, 0.0];
pub const GOAL_B: [f64; 2] = [-1.0, 0.0];
pub const REACH_RADIUS: f64 = 0.15;
pub const DT: f64 = 0.1;
pub const HORIZON: usize = 400;

#[derive(Clone, Debug, PartialEq)]
pub struct TwoStageConfig {
    /// Steps the expert waits at the origin before each departure.
    pub hold_steps: usize,
    /// Std of Gaussian observation noise; 0 disables it.
    pub obs_noise: f64,
}

impl Default for TwoStageConfig {
    fn default() -> Self {
        TwoStageConfig {
            hold_steps: 12,
            obs_noise: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    SeekA,
    Return,
    SeekB,
}

pub struct TwoStageReach {
    config: TwoStageConfig,
    pos: [f64; 2],
    gain: f64,
    stage: Stage,
    steps_in_stage: usize,
    t: usize,
    done: bool,
    rng: SeededRng,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

impl TwoStageReach {
    pub fn new(config: TwoStageConfig) -> Self {
        TwoStageReach {
            config,
            pos: [0.0; 2],
            gain: 1.0,
            stage: Stage::SeekA,
            steps_in_stage: 0,
            t: 0,
            done: false,
            rng: init::rng(0),
        }
    }

    pub fn position(&self) -> [f64; 2] {
        self.pos
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    /// Per-episode actuation gain drawn from the seed.
    pub fn gain(&self) -> f64 {
        self.gain
    }

    fn observe(&mut self) -> Vec<f64> {
        let mut o = self.pos.to_vec();
        if self.config.obs_noise > 0.0 {
            let n = Normal::new(0.0, self.config.obs_noise).expect("noise std checked at parse");
            for v in &mut o {
                *v += n.sample(&mut self.rng);
            }
        }
        o
    }

    fn enter(&mut self, stage: Stage) {
        self.stage = stage;
        self.steps_in_stage = 0;
    }
}

impl Env for TwoStageReach {
    fn spec(&self) -> EnvSpec {
        EnvSpec {
            id: super::EnvKind::TwoStageReach(self.config.clone()).id(),
            obs_dim: 2,
            action_dim: 2,
            horizon: HORIZON,
            success: "reach B after visiting A and returning to the origin",
        }
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.rng = init::rng(seed);
        self.gain = self.rng.random_range(0.75..=1.25);
        self.pos = [0.0; 2];
        self.t = 0;
        self.done = false;
        self.enter(Stage::SeekA);
        self.observe()
    }

    fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        if action.len() != 2 {
            return shape_err("two_stage_reach", format!("action of length {}", action.len()));
        }
        if self.done {
            return Err(crate::Error::Env("step after episode end".into()));
        }
        for (p, a) in self.pos.iter_mut().zip(action) {
            let a = if a.is_finite() { a.clamp(-1.0, 1.0) } else { 0.0 };
            *p += self.gain * a * DT;
        }
        self.t += 1;
        self.steps_in_stage += 1;
        let mut success = false;
        let near = |g| dist(self.pos, g) <= REACH_RADIUS;
        match self.stage {
            Stage::SeekA | Stage::Return if near(GOAL_B) => self.done = true,
            Stage::SeekA if near(GOAL_A) => self.enter(Stage::Return),
            Stage::Return if near([0.0, 0.0]) => self.enter(Stage::SeekB),
            Stage::SeekB if near(GOAL_B) => {
                success = true;
                self.done = true;
            }
            _ => {}
        }
        if self.t >= HORIZON {
            self.done = true;
        }
        Ok(StepOutcome {
            obs: self.observe(),
            done: self.done,
            success,
        })
    }

    fn expert_action(&self) -> Vec<f64> {
        let holding = self.steps_in_stage < self.config.hold_steps;
        let goal = match self.stage {
            Stage::SeekA if !holding => GOAL_A,
            Stage::SeekB if !holding => GOAL_B,
            _ => [0.0, 0.0],
        };
        (0..2)
            .map(|d| ((goal[d] - self.pos[d]) / (DT * self.gain)).clamp(-1.0, 1.0))
            .collect()
    }
}
