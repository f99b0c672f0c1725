//! Diagonal Gaussian mixture head.

use std::f64::consts::PI;
use std::sync::Once;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::HeadVars;
use crate::error::{shape_err, Error, Result};
use crate::numerics::{Tape, Tensor, Var};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
const MIN_STD: f64 = 1e-8;

static CLAMP_WARNING: Once = Once::new();

#[derive(Clone, Debug, PartialEq)]
pub struct GmmParams {
    /// Mixture weights on the simplex.
    pub weights: Vec<f64>,
    /// `[M, action_dim]`
    pub means: Tensor,
    /// `[M, action_dim]`
    pub log_stds: Tensor,
}

impl GmmParams {
    pub fn new(weights: Vec<f64>, means: Tensor, log_stds: Tensor) -> Result<Self> {
        let m = weights.len();
        if m == 0 || means.rows() != m || means.shape() != log_stds.shape() {
            return shape_err(
                "gmm",
                format!("{m} weights, means {:?}, log_stds {:?}", means.shape(), log_stds.shape()),
            );
        }
        if weights.iter().any(|&w| !(w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Invalid("gmm weights must lie on the simplex".into()));
        }
        Ok(GmmParams {
            weights,
            means,
            log_stds,
        })
    }

    pub fn from_logits(logits: &[f64], means: Tensor, log_stds: Tensor) -> Result<Self> {
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        Self::new(e.into_iter().map(|v| v / z).collect(), means, log_stds)
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn action_dim(&self) -> usize {
        self.means.cols()
    }

    fn std(&self, m: usize, d: usize) -> f64 {
        let s = self.log_stds.data()[m * self.action_dim() + d].exp();
        if s < MIN_STD {
            CLAMP_WARNING.call_once(|| log::warn!("gmm std below {MIN_STD:e}; clamping"));
            MIN_STD
        } else {
            s
        }
    }

    /// Mean of the highest-weight component.
    pub fn dominant_mean(&self) -> Vec<f64> {
        let best = self
            .weights
            .iter()
            .enumerate()
            .fold(0, |b, (i, &w)| if w > self.weights[b] { i } else { b });
        self.means.row_slice(best).to_vec()
    }

    /// Mixture mean `sum_m w_m mu_m`.
    pub fn mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.action_dim()];
        for (m, w) in self.weights.iter().enumerate() {
            for (o, mu) in out.iter_mut().zip(self.means.row_slice(m)) {
                *o += w * mu;
            }
        }
        out
    }
}

/// `-log sum_m w_m prod_d N(a_d; mu_md, sigma_md)`, evaluated with log-sum-exp.
pub fn gmm_nll(p: &GmmParams, action: &[f64]) -> Result<f64> {
    let dim = p.action_dim();
    if action.len() != dim {
        return shape_err("gmm_nll", format!("action of length {}, expected {dim}", action.len()));
    }
    let terms: Vec<f64> = (0..p.components())
        .map(|m| {
            let mut lp = p.weights[m].ln();
            for (d, &a) in action.iter().enumerate() {
                let s = p.std(m, d);
                let z = (a - p.means.row_slice(m)[d]) / s;
                lp += -0.5 * z * z - s.ln() - 0.5 * (2.0 * PI).ln();
            }
            lp
        })
        .collect();
    let mx = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return Ok(f64::INFINITY);
    }
    Ok(-(mx + terms.iter().map(|t| (t - mx).exp()).sum::<f64>().ln()))
}

/// Draws a component by weight, then a diagonal Gaussian sample from it.
pub fn gmm_sample<R: Rng + ?Sized>(p: &GmmParams, rng: &mut R) -> Vec<f64> {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut comp = p.components() - 1;
    for (m, w) in p.weights.iter().enumerate() {
        acc += w;
        if u < acc {
            comp = m;
            break;
        }
    }
    (0..p.action_dim())
        .map(|d| {
            let z: f64 = StandardNormal.sample(rng);
            p.means.row_slice(comp)[d] + p.std(comp, d) * z
        })
        .collect()
}

/// Tape form of [`gmm_nll`] for a head output and a target action row.
pub fn gmm_nll_on(tape: &mut Tape<'_>, head: HeadVars, action: Var) -> Result<Var> {
    let HeadVars::Gmm { logits, means, log_stds } = head else {
        return Err(Error::Invalid("gmm loss needs a gmm head".into()));
    };
    let dim = tape.value(means)?.cols();
    let neg_a = tape.scale(action, -1.0)?;
    let diff = tape.add(means, neg_a)?;
    let neg_ls = tape.scale(log_stds, -1.0)?;
    let inv_std = tape.exp(neg_ls)?;
    let z = tape.mul(diff, inv_std)?;
    let z2 = tape.square(z)?;
    let quad = tape.sum_last(z2)?;
    let quad = tape.scale(quad, -0.5)?;
    let ls_sum = tape.sum_last(log_stds)?;
    let comp = tape.sub(quad, ls_sum)?;
    let comp = tape.offset(comp, -0.5 * dim as f64 * (2.0 * PI).ln())?;
    // log sum_m softmax(logits)_m N_m = lse(logits + comp) - lse(logits)
    let lse_logits = tape.logsumexp_last(logits)?;
    let joint = tape.add(logits, comp)?;
    let total = tape.logsumexp_last(joint)?;
    let ll = tape.sub(total, lse_logits)?;
    let ll = tape.sum(ll)?;
    tape.scale(ll, -1.0)
}
