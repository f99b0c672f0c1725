//! Diagonal Fisher estimates and the elastic weight consolidation penalty.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{step_loss, unroll, TrainConfig};
use crate::data::{chunk_targets, Dataset};
use crate::error::{shape_err, Error, Result};
use crate::init;
use crate::numerics::{Tape, Tensor, Var};
use crate::parallel::map_indices;
use crate::policy::{gmm_sample, GmmParams, HeadVars, Policy};

/// How per-step targets are chosen when estimating the Fisher diagonal.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FisherKind {
    /// Squared gradients of the demonstration loss.
    Empirical,
    /// Squared gradients against targets sampled from the model's own
    /// output distribution (unit-variance Gaussian around the chunk, or the
    /// mixture for the GMM head).
    Sampled,
}

impl fmt::Display for FisherKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FisherKind::Empirical => "empirical",
            FisherKind::Sampled => "sampled",
        })
    }
}

impl FromStr for FisherKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "empirical" => Ok(FisherKind::Empirical),
            "sampled" => Ok(FisherKind::Sampled),
            _ => Err(Error::Config(format!("unknown fisher estimator '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FisherInfo {
    /// Nonnegative diagonal, one tensor per parameter.
    pub diag: Vec<Tensor>,
    /// Parameter snapshot the penalty pulls towards.
    pub anchor: Vec<Tensor>,
}

fn check(params: &[&Tensor], f: &FisherInfo) -> Result<()> {
    if params.len() != f.anchor.len()
        || params
            .iter()
            .zip(&f.anchor)
            .zip(&f.diag)
            .any(|((p, a), d)| p.shape() != a.shape() || p.shape() != d.shape())
    {
        return shape_err("ewc", "parameters do not match the Fisher anchor");
    }
    Ok(())
}

/// `lambda / 2 * sum_p F_p (theta_p - theta*_p)^2`
pub fn ewc_penalty(params: &[&Tensor], f: &FisherInfo, lambda: f64) -> Result<f64> {
    check(params, f)?;
    let mut s = 0.0;
    for ((p, a), d) in params.iter().zip(&f.anchor).zip(&f.diag) {
        for ((x, y), w) in p.data().iter().zip(a.data()).zip(d.data()) {
            s += w * (x - y) * (x - y);
        }
    }
    Ok(0.5 * lambda * s)
}

/// Adds the penalty gradient `lambda * F (theta - theta*)` to `grads`.
pub fn ewc_grad(grads: &mut [Tensor], params: &[&Tensor], f: &FisherInfo, lambda: f64) -> Result<()> {
    check(params, f)?;
    for (((g, p), a), d) in grads.iter_mut().zip(params).zip(&f.anchor).zip(&f.diag) {
        for (((gv, x), y), w) in g.data_mut().iter_mut().zip(p.data()).zip(a.data()).zip(d.data()) {
            *gv += lambda * w * (x - y);
        }
    }
    Ok(())
}

fn sample_target(tape: &Tape<'_>, head: HeadVars, rng: &mut init::SeededRng) -> Result<Tensor> {
    match head {
        HeadVars::Chunk(v) => {
            let pred = tape.value(v)?;
            Ok(Tensor::new(
                pred.shape().to_vec(),
                pred.data().iter().map(|x| { let z: f64 = StandardNormal.sample(&mut *rng); x + z }).collect(),
            )?)
        }
        HeadVars::Gmm { logits, means, log_stds } => {
            let p = GmmParams::from_logits(
                tape.value(logits)?.data(),
                tape.value(means)?.clone(),
                tape.value(log_stds)?.clone(),
            )?;
            Ok(Tensor::row(gmm_sample(&p, rng)))
        }
    }
}

/// Mean squared per-step loss gradient over `n_samples` random
/// `(trajectory, step)` pairs. The loss at step `t` is taken after unrolling
/// steps `1..=t`, so history contributes to the gradient.
pub fn fisher_estimate(policy: &Policy, dataset: &Dataset, n_samples: usize, cfg: &TrainConfig, kind: FisherKind) -> Result<FisherInfo> {
    if dataset.is_empty() || n_samples == 0 {
        return Err(Error::Invalid("fisher estimate needs data and at least one sample".into()));
    }
    let mut rng = init::rng(cfg.seed ^ 0x4649_5348);
    let picks: Vec<(usize, usize, u64)> = (0..n_samples)
        .map(|_| {
            let ti = rng.random_range(0..dataset.len());
            let step = rng.random_range(0..dataset.trajectories[ti].len());
            (ti, step, rng.random())
        })
        .collect();
    let per_sample = map_indices(cfg.exec, n_samples, |s| -> Result<Vec<Tensor>> {
        let (ti, step, noise_seed) = picks[s];
        let traj = &dataset.trajectories[ti];
        let mut tape = Tape::new();
        let bound = policy.bind(&mut tape)?;
        let mut loss: Option<Var> = None;
        let mut noise = init::rng(noise_seed);
        unroll(policy, &mut tape, &bound, traj, step + 1, cfg.history_reset_interval, None, |tape, i, head| {
            if i == step {
                let target = match kind {
                    FisherKind::Empirical => chunk_targets(traj, i, cfg.chunk_k)?,
                    FisherKind::Sampled => sample_target(tape, head, &mut noise)?,
                };
                loss = Some(step_loss(tape, head, target, cfg.loss)?);
            }
            Ok(())
        })?;
        let loss = loss.ok_or_else(|| Error::Invalid("fisher sample produced no loss".into()))?;
        let grads = tape.backward(loss)?;
        bound.all.iter().map(|&v| grads.wrt(v, &tape)).collect()
    });
    let mut diag: Vec<Tensor> = policy.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
    for g in per_sample {
        for (d, gv) in diag.iter_mut().zip(g?) {
            for (x, y) in d.data_mut().iter_mut().zip(gv.data()) {
                *x += y * y;
            }
        }
    }
    let inv = 1.0 / n_samples as f64;
    diag.iter_mut().for_each(|d| d.data_mut().iter_mut().for_each(|v| *v *= inv));
    Ok(FisherInfo {
        diag,
        anchor: policy.params().into_iter().cloned().collect(),
    })
}
