//! Sequential step-based behavioral cloning over whole trajectories.
//!
//! Each trajectory is unrolled on one tape from a zero state; per-step chunk
//! losses are averaged over steps and the parameters take a single AdamW
//! step per trajectory.

mod ewc;
mod optim;

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;

pub use ewc::{ewc_grad, ewc_penalty, fisher_estimate, FisherInfo, FisherKind};
pub use optim::{adamw_update, clip_grad_norm, cosine_lr, AdamState, ADAM_EPS};

use crate::config::KvRecord;
use crate::data::{chunk_targets, Dataset, Trajectory};
use crate::error::{Error, Result};
use crate::init;
use crate::numerics::{Tape, Tensor, Var};
use crate::parallel::Exec;
use crate::policy::{gmm_nll_on, parse_reset, BoundPolicy, HeadKind, HeadVars, Policy, PolicyConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Mse,
    GmmNll,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Mse => "mse",
            LossKind::GmmNll => "gmm-nll",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(LossKind::Mse),
            "gmm-nll" | "gmm" => Ok(LossKind::GmmNll),
            _ => Err(Error::Config(format!("unknown loss '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EwcConfig {
    pub lambda: f64,
    pub fisher_samples: usize,
    pub fisher: FisherKind,
}

impl Default for EwcConfig {
    fn default() -> Self {
        EwcConfig {
            lambda: 100.0,
            fisher_samples: 200,
            fisher: FisherKind::Empirical,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr0: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub chunk_k: usize,
    pub loss: LossKind,
    /// Zero the recurrent state whenever `step_index % r == 0`.
    pub history_reset_interval: Option<u32>,
    pub ewc: Option<EwcConfig>,
    pub seed: u64,
    pub clip_norm: f64,
    /// Worker mode for Fisher estimation; training itself is sequential.
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            lr0: 2e-4,
            weight_decay: 1e-4,
            betas: (0.9, 0.999),
            chunk_k: 1,
            loss: LossKind::Mse,
            history_reset_interval: None,
            ewc: None,
            seed: 0,
            clip_norm: 10.0,
            exec: Exec::default(),
        }
    }
}

pub const TRAIN_KEYS: &[&str] = &[
    "epochs",
    "lr",
    "weight_decay",
    "beta1",
    "beta2",
    "K",
    "loss",
    "history_reset",
    "ewc_lambda",
    "fisher_samples",
    "fisher",
    "seed",
    "clip_norm",
];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr0));
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be >= 0".into());
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad(format!("betas must lie in [0, 1), got ({b1}, {b2})"));
        }
        if self.chunk_k == 0 {
            return bad("K must be >= 1".into());
        }
        if self.history_reset_interval == Some(0) {
            return bad("history reset interval must be >= 1".into());
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive".into());
        }
        if let Some(e) = &self.ewc {
            if !(e.lambda >= 0.0) || e.fisher_samples == 0 {
                return bad("ewc needs lambda >= 0 and fisher_samples >= 1".into());
            }
        }
        Ok(())
    }

    pub fn to_record(&self) -> KvRecord {
        let mut r = KvRecord::new();
        r.set("epochs", self.epochs);
        r.set("lr", self.lr0);
        r.set("weight_decay", self.weight_decay);
        r.set("beta1", self.betas.0);
        r.set("beta2", self.betas.1);
        r.set("K", self.chunk_k);
        r.set("loss", self.loss);
        r.set(
            "history_reset",
            self.history_reset_interval.map_or("none".to_string(), |n| n.to_string()),
        );
        if let Some(e) = &self.ewc {
            r.set("ewc_lambda", e.lambda);
            r.set("fisher_samples", e.fisher_samples);
            r.set("fisher", e.fisher);
        }
        r.set("seed", self.seed);
        r.set("clip_norm", self.clip_norm);
        r
    }

    /// Desk-scale settings used by the experiments: the default learning rate
    /// is too small to converge within a few minutes of CPU time.
    pub fn desk(chunk_k: usize) -> Self {
        TrainConfig {
            epochs: 80,
            lr0: 3e-3,
            chunk_k,
            ..Default::default()
        }
    }

    /// Defaults overridden by any keys present in `r`.
    pub fn from_record(r: &KvRecord) -> Result<Self> {
        TrainConfig::default().with_record(r)
    }

    /// `self` overridden by any keys present in `r`.
    pub fn with_record(self, r: &KvRecord) -> Result<Self> {
        let mut c = self;
        c.epochs = r.get("epochs")?.unwrap_or(c.epochs);
        c.lr0 = r.get("lr")?.unwrap_or(c.lr0);
        c.weight_decay = r.get("weight_decay")?.unwrap_or(c.weight_decay);
        c.betas.0 = r.get("beta1")?.unwrap_or(c.betas.0);
        c.betas.1 = r.get("beta2")?.unwrap_or(c.betas.1);
        c.chunk_k = r.get("K")?.unwrap_or(c.chunk_k);
        c.loss = r.get("loss")?.unwrap_or(c.loss);
        if let Some(v) = r.get_str("history_reset") {
            c.history_reset_interval = parse_reset(v)?;
        }
        if r.get_str("ewc_lambda").is_some() {
            let d = EwcConfig::default();
            c.ewc = Some(EwcConfig {
                lambda: r.require("ewc_lambda")?,
                fisher_samples: r.get("fisher_samples")?.unwrap_or(d.fisher_samples),
                fisher: r.get("fisher")?.unwrap_or(d.fisher),
            });
        }
        c.seed = r.get("seed")?.unwrap_or(c.seed);
        c.clip_norm = r.get("clip_norm")?.unwrap_or(c.clip_norm);
        c.validate()?;
        Ok(c)
    }
}

/// What the policy saw before one training step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepTrace {
    /// 1-based step within the trajectory.
    pub t: usize,
    pub step_index: u64,
    pub state_zero: bool,
}

/// Unrolls the first `steps` steps of `traj`, calling `on_step(tape, i, head)`
/// with the 0-based step and the head output.
pub(crate) fn unroll<'p>(
    policy: &'p Policy,
    tape: &mut Tape<'p>,
    bound: &BoundPolicy,
    traj: &Trajectory,
    steps: usize,
    reset: Option<u32>,
    mut trace: Option<&mut Vec<StepTrace>>,
    mut on_step: impl FnMut(&mut Tape<'p>, usize, HeadVars) -> Result<()>,
) -> Result<()> {
    let zero = policy.reset();
    let fresh = |tape: &mut Tape<'p>| -> Result<Vec<Var>> {
        zero.layers.iter().map(|s| tape.leaf(s.h.clone())).collect()
    };
    let mut states = fresh(tape)?;
    let mut step_index = 0u64;
    for i in 0..steps {
        if let Some(r) = reset {
            if step_index % u64::from(r) == 0 && step_index > 0 {
                states = fresh(tape)?;
            }
        }
        if let Some(tr) = trace.as_deref_mut() {
            let mut zero = true;
            for &s in &states {
                zero &= tape.value(s)?.data().iter().all(|v| *v == 0.0);
            }
            tr.push(StepTrace {
                t: i + 1,
                step_index,
                state_zero: zero,
            });
        }
        let o = tape.leaf(Tensor::row(traj.obs(i).to_vec()))?;
        let x = policy.encode_on(tape, bound, o)?;
        let (head, next) = policy.step_on(tape, bound, x, &states)?;
        states = next;
        step_index += 1;
        on_step(tape, i, head)?;
    }
    Ok(())
}

/// Loss of one head output against a target chunk `[K, A]` (MSE over all
/// entries) or, for the mixture head, against the first target row.
pub(crate) fn step_loss(tape: &mut Tape<'_>, head: HeadVars, target: Tensor, loss: LossKind) -> Result<Var> {
    match (loss, head) {
        (LossKind::Mse, HeadVars::Chunk(pred)) => {
            let y = tape.leaf(target)?;
            let d = tape.sub(pred, y)?;
            let d2 = tape.square(d)?;
            tape.mean(d2)
        }
        (LossKind::GmmNll, HeadVars::Gmm { .. }) => {
            let row = Tensor::row(target.row_slice(0).to_vec());
            let a = tape.leaf(row)?;
            gmm_nll_on(tape, head, a)
        }
        (l, _) => Err(Error::Config(format!("loss '{l}' does not match the policy head"))),
    }
}

/// Mean per-step loss over `traj` and its gradient for every parameter in
/// [`Policy::params`] order.
pub fn trajectory_loss(policy: &Policy, traj: &Trajectory, cfg: &TrainConfig) -> Result<(f64, Vec<Tensor>)> {
    trajectory_loss_traced(policy, traj, cfg, None)
}

fn trajectory_loss_traced(
    policy: &Policy,
    traj: &Trajectory,
    cfg: &TrainConfig,
    trace: Option<&mut Vec<StepTrace>>,
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let bound = policy.bind(&mut tape)?;
    let mut total: Option<Var> = None;
    unroll(policy, &mut tape, &bound, traj, traj.len(), cfg.history_reset_interval, trace, |tape, i, head| {
        let l = step_loss(tape, head, chunk_targets(traj, i, cfg.chunk_k)?, cfg.loss)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, l)?,
            None => l,
        });
        Ok(())
    })?;
    let total = total.ok_or_else(|| Error::Invalid("empty trajectory".into()))?;
    let loss = tape.scale(total, 1.0 / traj.len() as f64)?;
    let grads = tape.backward(loss)?;
    let g = bound
        .all
        .iter()
        .map(|&v| grads.wrt(v, &tape))
        .collect::<Result<Vec<_>>>()?;
    Ok((tape.value(loss)?.item(), g))
}

/// Per-step `(t, step_index, state_zero)` as seen during a training unroll.
pub fn trace_unroll(policy: &Policy, traj: &Trajectory, cfg: &TrainConfig) -> Result<Vec<StepTrace>> {
    let mut tr = Vec::with_capacity(traj.len());
    trajectory_loss_traced(policy, traj, cfg, Some(&mut tr))?;
    Ok(tr)
}

/// Optimizer state carried across the updates of one training run.
pub struct Trainer<'a> {
    pub cfg: &'a TrainConfig,
    pub opt: AdamState,
    pub penalties: &'a [FisherInfo],
}

impl<'a> Trainer<'a> {
    pub fn new(policy: &Policy, cfg: &'a TrainConfig, penalties: &'a [FisherInfo]) -> Self {
        Trainer {
            cfg,
            opt: AdamState::zeros_like(&policy.params()),
            penalties,
        }
    }

    /// One optimizer update on one trajectory. Returns the objective
    /// (mean step loss plus any EWC penalty) before the update.
    pub fn train_trajectory(&mut self, policy: &mut Policy, traj: &Trajectory, lr: f64) -> Result<f64> {
        let (mut loss, mut grads) = trajectory_loss(policy, traj, self.cfg)?;
        if let Some(e) = &self.cfg.ewc {
            let params = policy.params();
            for f in self.penalties {
                loss += ewc_penalty(&params, f, e.lambda)?;
                ewc_grad(&mut grads, &params, f, e.lambda)?;
            }
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite { op: "trajectory loss" });
        }
        clip_grad_norm(&mut grads, self.cfg.clip_norm);
        let mut params = policy.params_mut();
        adamw_update(&mut params, &grads, &mut self.opt, lr, self.cfg.betas, self.cfg.weight_decay)?;
        Ok(loss)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.mean_loss)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "mean_loss", "lr", "seconds"])?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                e.mean_loss.to_string(),
                e.lr.to_string(),
                format!("{:.3}", e.seconds),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn check_compatible(policy: &Policy, dataset: &Dataset, cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    let pc = policy.config();
    if dataset.obs_dim != pc.obs_dim || dataset.action_dim != pc.action_dim {
        return Err(Error::Config(format!(
            "dataset dims ({}, {}) do not match policy ({}, {})",
            dataset.obs_dim, dataset.action_dim, pc.obs_dim, pc.action_dim
        )));
    }
    if cfg.chunk_k != pc.chunk_k {
        return Err(Error::Config(format!("train K={} but policy K={}", cfg.chunk_k, pc.chunk_k)));
    }
    let head_ok = matches!(
        (cfg.loss, pc.head),
        (LossKind::Mse, HeadKind::LinearChunk) | (LossKind::GmmNll, HeadKind::Gmm { .. })
    );
    if !head_ok {
        return Err(Error::Config(format!("loss '{}' does not match head '{}'", cfg.loss, pc.head)));
    }
    Ok(())
}

/// Trains `policy` in place for `cfg.epochs` epochs. Trajectory order is
/// shuffled per epoch from `cfg.seed`; steps within a trajectory never are.
/// The policy adopts `cfg.history_reset_interval`.
pub fn fit(policy: &mut Policy, dataset: &Dataset, cfg: &TrainConfig, penalties: &[FisherInfo]) -> Result<TrainLog> {
    if dataset.is_empty() {
        return Err(Error::Invalid("cannot train on an empty dataset".into()));
    }
    check_compatible(policy, dataset, cfg)?;
    policy.set_history_reset(cfg.history_reset_interval)?;
    let mut rng = init::rng(cfg.seed ^ 0x5348_5546);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let total = cfg.epochs * dataset.len();
    let mut trainer = Trainer::new(policy, cfg, penalties);
    let mut log = TrainLog::default();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let lr_epoch = cosine_lr(step, total, cfg.lr0);
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for &idx in &order {
            let traj = &dataset.trajectories[idx];
            let lr = cosine_lr(step, total, cfg.lr0);
            sum += trainer.train_trajectory(policy, traj, lr).map_err(|e| match e {
                Error::NonFinite { .. } => Error::Diverged(format!(
                    "epoch {epoch}, trajectory {idx} (task {}, seed {}), lr {lr:.3e}: {e}",
                    traj.meta.task, traj.meta.seed
                )),
                e => e,
            })?;
            step += 1;
        }
        let mean_loss = sum / dataset.len() as f64;
        log::debug!("epoch {epoch}: loss {mean_loss:.6} lr {lr_epoch:.3e}");
        log.epochs.push(EpochLog {
            epoch,
            mean_loss,
            lr: lr_epoch,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(log)
}

/// Fresh policy from `policy_config` (seeded by `cfg.seed`) trained on `dataset`.
pub fn train(dataset: &Dataset, policy_config: &PolicyConfig, cfg: &TrainConfig) -> Result<(Policy, TrainLog)> {
    let mut policy = Policy::new(policy_config.clone(), cfg.seed)?;
    let log = fit(&mut policy, dataset, cfg, &[])?;
    Ok((policy, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TrajectoryMeta;

    fn small(obs: usize, act: usize, k: usize) -> PolicyConfig {
        let mut c = PolicyConfig::desk(obs, act, k);
        c.d_model = 16;
        c.d_state = 4;
        c.n_layers = 2;
        c.dt_rank = 2;
        c
    }

    fn toy_traj(t: usize, seed: u64) -> Trajectory {
        let mut rng = init::rng(seed);
        let obs = init::normal(&[t, 3], 1.0, &mut rng);
        let act = init::uniform(&[t, 2], -1.0, 1.0, &mut rng);
        Trajectory::new(3, 2, obs.into_data(), act.into_data(), TrajectoryMeta::default()).unwrap()
    }

    #[test]
    fn k1_mse_is_mean_over_action_dims() {
        let p = Policy::new(small(3, 2, 1), 1).unwrap();
        let traj = toy_traj(1, 2);
        let cfg = TrainConfig::default();
        let (loss, _) = trajectory_loss(&p, &traj, &cfg).unwrap();
        let (pred, _) = p.act(traj.obs(0), &p.reset()).unwrap();
        let c = pred.to_chunk();
        let want = c
            .row(0)
            .iter()
            .zip(traj.action(0))
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            / 2.0;
        assert!((loss - want).abs() < 1e-12);
    }

    #[test]
    fn reset_every_step_matches_fresh_state() {
        let p = Policy::new(small(3, 2, 2), 4).unwrap();
        let traj = toy_traj(6, 5);
        let cfg = TrainConfig {
            chunk_k: 2,
            history_reset_interval: Some(1),
            ..Default::default()
        };
        let trace = trace_unroll(&p, &traj, &cfg).unwrap();
        assert!(trace.iter().all(|s| s.state_zero));
        let (loss, _) = trajectory_loss(&p, &traj, &cfg).unwrap();
        let mut want = 0.0;
        for i in 0..traj.len() {
            let (pred, _) = p.act(traj.obs(i), &p.reset()).unwrap();
            let target = chunk_targets(&traj, i, 2).unwrap();
            let c = pred.to_chunk();
            want += c.data().iter().zip(target.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 4.0;
        }
        assert!((loss - want / traj.len() as f64).abs() < 1e-12);
    }

    #[test]
    fn reset_ten_zeroes_on_schedule() {
        let p = Policy::new(small(3, 2, 1), 4).unwrap();
        let traj = toy_traj(25, 6);
        let cfg = TrainConfig {
            history_reset_interval: Some(10),
            ..Default::default()
        };
        let trace = trace_unroll(&p, &traj, &cfg).unwrap();
        for s in &trace {
            assert_eq!(s.state_zero, (s.t - 1) % 10 == 0, "t = {}", s.t);
            assert_eq!(s.step_index as usize, s.t - 1);
        }
    }

    #[test]
    fn zero_epochs_leaves_params_unchanged() {
        let ds = Dataset::new(3, 2, vec![toy_traj(5, 1)]).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let before = Policy::new(small(3, 2, 1), cfg.seed).unwrap();
        let (after, log) = train(&ds, &small(3, 2, 1), &cfg).unwrap();
        assert_eq!(before, after);
        assert!(log.epochs.is_empty());
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let ds = Dataset::new(3, 2, vec![toy_traj(5, 1), toy_traj(4, 2), toy_traj(6, 3)]).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            lr0: 1e-2,
            seed: 9,
            ..Default::default()
        };
        let (a, la) = train(&ds, &small(3, 2, 1), &cfg).unwrap();
        let (b, lb) = train(&ds, &small(3, 2, 1), &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            la.epochs.iter().map(|e| e.mean_loss).collect::<Vec<_>>(),
            lb.epochs.iter().map(|e| e.mean_loss).collect::<Vec<_>>()
        );
    }

    #[test]
    fn overfits_one_short_trajectory() {
        let ds = Dataset::new(3, 2, vec![toy_traj(20, 11)]).unwrap();
        let cfg = TrainConfig {
            epochs: 500,
            lr0: 1e-2,
            weight_decay: 0.0,
            ..Default::default()
        };
        let (_, log) = train(&ds, &small(3, 2, 1), &cfg).unwrap();
        assert!(log.final_loss().unwrap() < 1e-4, "{:?}", log.final_loss());
    }

    #[test]
    fn mismatched_k_or_head_is_rejected() {
        let ds = Dataset::new(3, 2, vec![toy_traj(5, 1)]).unwrap();
        let cfg = TrainConfig {
            chunk_k: 4,
            ..Default::default()
        };
        assert!(matches!(train(&ds, &small(3, 2, 1), &cfg), Err(Error::Config(_))));
        let cfg = TrainConfig {
            loss: LossKind::GmmNll,
            ..Default::default()
        };
        assert!(matches!(train(&ds, &small(3, 2, 1), &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn config_record_round_trip() {
        let cfg = TrainConfig {
            epochs: 7,
            history_reset_interval: Some(10),
            ewc: Some(EwcConfig::default()),
            ..Default::default()
        };
        assert_eq!(TrainConfig::from_record(&cfg.to_record()).unwrap(), cfg);
        let mut r = KvRecord::new();
        r.set("history_reset", 0);
        assert!(TrainConfig::from_record(&r).is_err());
    }
}
