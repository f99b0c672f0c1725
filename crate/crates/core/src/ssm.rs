//! Selective state-space layer and the gated residual block around it.
//!
//! Per step, with channel count `D` and state size `N`:
//!
//! ```text
//! delta = softplus(x W_down W_up + dt_bias)          [D]
//! B = x W_B,  C = x W_C                              [N]
//! abar[d] = exp(delta[d] * a[d]),  a = -exp(a_log)   [D]
//! bbar[d][n] = delta[d] * B[n]                       [D, N]
//! h[d][n] = abar[d] h_prev[d][n] + bbar[d][n] x[d]
//! y[d] = sum_n C[n] h[d][n] + skip[d] x[d]
//! ```
//!
//! Every function has a tape form (`*_on`) used for training and a value
//! form on the parameter structs used for evaluation.

use crate::error::{shape_err, Error, Result};
use crate::init::{self, SeededRng};
use crate::numerics::{Tape, Tensor, Var};

/// Recurrent state of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenState {
    pub h: Tensor,
    pub step_index: u64,
}

impl HiddenState {
    pub fn zeros(channels: usize, state: usize) -> Self {
        HiddenState {
            h: Tensor::zeros(&[channels, state]),
            step_index: 0,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.h.data().iter().all(|&v| v == 0.0)
    }

    pub fn norm_inf(&self) -> f64 {
        self.h.max_abs()
    }
}

/// Parameters of one selective SSM over `D` channels with `N` states each.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmLayerParams {
    /// `log(-a)` per channel, `[1, D]`.
    pub a_log: Tensor,
    /// Low-rank step-size projection, `[D, R]` then `[R, D]`.
    pub dt_down: Tensor,
    pub dt_up: Tensor,
    pub dt_bias: Tensor,
    pub w_b: Tensor,
    pub w_c: Tensor,
    pub skip: Tensor,
}

pub const SSM_PARAM_NAMES: [&str; 7] = ["a_log", "dt_down", "dt_up", "dt_bias", "w_b", "w_c", "skip"];

impl SsmLayerParams {
    /// Multi-timescale initialisation: `a` spans `[-1, -1/64]` log-uniformly
    /// across channels and the initial step size lies in `[0.01, 0.1]`.
    pub fn init(channels: usize, state: usize, dt_rank: usize, rng: &mut SeededRng) -> Self {
        let d = channels;
        let a_log = (0..d)
            .map(|i| {
                let frac = if d > 1 { i as f64 / (d - 1) as f64 } else { 0.0 };
                frac * (1.0f64 / 64.0).ln()
            })
            .collect();
        let dt_targets = init::uniform(&[1, d], 0.01f64.ln(), 0.1f64.ln(), rng);
        let dt_bias = dt_targets.map(|u| init::inverse_softplus(u.exp()));
        let up_bound = (dt_rank as f64).powf(-0.5);
        SsmLayerParams {
            a_log: Tensor::row(a_log),
            dt_down: init::normal(&[d, dt_rank], (d as f64).powf(-0.5), rng),
            dt_up: init::uniform(&[dt_rank, d], -up_bound, up_bound, rng),
            dt_bias,
            w_b: init::normal(&[d, state], (d as f64).powf(-0.5), rng),
            w_c: init::normal(&[d, state], (d as f64).powf(-0.5), rng),
            skip: Tensor::filled(&[1, d], 1.0),
        }
    }

    pub fn channels(&self) -> usize {
        self.a_log.len()
    }

    pub fn state_size(&self) -> usize {
        self.w_b.cols()
    }

    pub fn tensors(&self) -> [&Tensor; 7] {
        [
            &self.a_log,
            &self.dt_down,
            &self.dt_up,
            &self.dt_bias,
            &self.w_b,
            &self.w_c,
            &self.skip,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 7] {
        [
            &mut self.a_log,
            &mut self.dt_down,
            &mut self.dt_up,
            &mut self.dt_bias,
            &mut self.w_b,
            &mut self.w_c,
            &mut self.skip,
        ]
    }

    pub fn bind<'p>(&'p self, tape: &mut Tape<'p>) -> Result<SsmVars> {
        let v = self
            .tensors()
            .into_iter()
            .map(|t| tape.leaf_ref(t))
            .collect::<Result<Vec<_>>>()?;
        Ok(SsmVars::from_slice(&v))
    }

    /// Continuous decay `a = -exp(a_log)` per channel.
    pub fn decay(&self) -> Vec<f64> {
        self.a_log.data().iter().map(|v| -v.exp()).collect()
    }

    pub fn selective_params(&self, x: &[f64]) -> Result<SelectiveParams> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape)?;
        let xv = tape.leaf(Tensor::row(x.to_vec()))?;
        let sp = selective_params_on(&mut tape, xv, &p)?;
        Ok(SelectiveParams {
            delta: tape.value(sp.delta)?.data().to_vec(),
            b: tape.value(sp.b)?.data().to_vec(),
            c: tape.value(sp.c)?.data().to_vec(),
        })
    }

    /// One recurrence step from `h_prev` on input `x` (length `D`).
    pub fn step(&self, h_prev: &HiddenState, x: &[f64]) -> Result<(HiddenState, Vec<f64>)> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape)?;
        let h = tape.leaf(h_prev.h.clone())?;
        let xv = tape.leaf(Tensor::row(x.to_vec()))?;
        let (h, y) = ssm_step_on(&mut tape, h, xv, &p)?;
        Ok((
            HiddenState {
                h: tape.value(h)?.clone(),
                step_index: h_prev.step_index + 1,
            },
            tape.value(y)?.data().to_vec(),
        ))
    }

    /// Runs the recurrence over a whole sequence directly on values, without
    /// recording a tape.
    pub fn scan(&self, xs: &[Vec<f64>], h0: &HiddenState) -> Result<(Vec<Vec<f64>>, HiddenState)> {
        if xs.is_empty() {
            return Err(Error::Invalid("ssm_scan needs at least one input".into()));
        }
        let (d, n, r) = (self.channels(), self.state_size(), self.dt_down.cols());
        if h0.h.shape() != [d, n] {
            return shape_err("ssm_scan", format!("state {:?}, expected [{d}, {n}]", h0.h.shape()));
        }
        let decay = self.decay();
        let mut h = h0.h.data().to_vec();
        let mut ys = Vec::with_capacity(xs.len());
        let (mut low, mut delta, mut b, mut c) = (vec![0.0; r], vec![0.0; d], vec![0.0; n], vec![0.0; n]);
        for x in xs {
            if x.len() != d {
                return shape_err("ssm_scan", format!("input of length {}, expected {d}", x.len()));
            }
            low.iter_mut().for_each(|v| *v = 0.0);
            b.iter_mut().for_each(|v| *v = 0.0);
            c.iter_mut().for_each(|v| *v = 0.0);
            for (i, &xi) in x.iter().enumerate() {
                for (k, l) in low.iter_mut().enumerate() {
                    *l += xi * self.dt_down.data()[i * r + k];
                }
                for j in 0..n {
                    b[j] += xi * self.w_b.data()[i * n + j];
                    c[j] += xi * self.w_c.data()[i * n + j];
                }
            }
            for (j, dj) in delta.iter_mut().enumerate() {
                let pre: f64 = (0..r).map(|k| low[k] * self.dt_up.data()[k * d + j]).sum::<f64>()
                    + self.dt_bias.data()[j];
                *dj = crate::numerics::scalar::softplus(pre);
            }
            let mut y = vec![0.0; d];
            for i in 0..d {
                let abar = (delta[i] * decay[i]).exp();
                let row = &mut h[i * n..(i + 1) * n];
                let mut acc = 0.0;
                for j in 0..n {
                    row[j] = abar * row[j] + delta[i] * b[j] * x[i];
                    acc += row[j] * c[j];
                }
                y[i] = acc + self.skip.data()[i] * x[i];
            }
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op: "ssm_scan" });
            }
            ys.push(y);
        }
        Ok((
            ys,
            HiddenState {
                h: Tensor::new(vec![d, n], h)?,
                step_index: h0.step_index + xs.len() as u64,
            },
        ))
    }
}

/// Input-dependent `(delta, B, C)` for one step.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectiveParams {
    pub delta: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
}

impl SelectiveParams {
    /// Zero-order hold on the state and Euler on the input:
    /// `abar = exp(delta * a)`, `bbar = delta B^T`.
    pub fn discretize(&self, decay: &[f64]) -> Result<(Vec<f64>, Tensor)> {
        if decay.len() != self.delta.len() {
            return shape_err("discretize", format!("{} decays for {} channels", decay.len(), self.delta.len()));
        }
        let abar = self.delta.iter().zip(decay).map(|(d, a)| (d * a).exp()).collect();
        let n = self.b.len();
        let mut bbar = Vec::with_capacity(self.delta.len() * n);
        for d in &self.delta {
            bbar.extend(self.b.iter().map(|b| d * b));
        }
        Ok((abar, Tensor::new(vec![self.delta.len(), n], bbar)?))
    }
}

/// Tape handles for [`SsmLayerParams`].
#[derive(Clone, Copy, Debug)]
pub struct SsmVars {
    pub a_log: Var,
    pub dt_down: Var,
    pub dt_up: Var,
    pub dt_bias: Var,
    pub w_b: Var,
    pub w_c: Var,
    pub skip: Var,
}

impl SsmVars {
    pub fn from_slice(v: &[Var]) -> Self {
        SsmVars {
            a_log: v[0],
            dt_down: v[1],
            dt_up: v[2],
            dt_bias: v[3],
            w_b: v[4],
            w_c: v[5],
            skip: v[6],
        }
    }

    pub fn vars(&self) -> [Var; 7] {
        [
            self.a_log,
            self.dt_down,
            self.dt_up,
            self.dt_bias,
            self.w_b,
            self.w_c,
            self.skip,
        ]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SelectiveVars {
    pub delta: Var,
    pub b: Var,
    pub c: Var,
}

pub fn selective_params_on(tape: &mut Tape<'_>, x: Var, p: &SsmVars) -> Result<SelectiveVars> {
    let low = tape.matmul(x, p.dt_down)?;
    let pre = tape.matmul(low, p.dt_up)?;
    let pre = tape.add(pre, p.dt_bias)?;
    let delta = tape.softplus(pre)?;
    let b = tape.matmul(x, p.w_b)?;
    let c = tape.matmul(x, p.w_c)?;
    Ok(SelectiveVars { delta, b, c })
}

/// Returns `(abar [1, D], bbar [D, N])`.
pub fn discretize_on(tape: &mut Tape<'_>, sp: &SelectiveVars, a_log: Var) -> Result<(Var, Var)> {
    let neg_a = tape.exp(a_log)?;
    let a = tape.scale(neg_a, -1.0)?;
    let da = tape.mul(sp.delta, a)?;
    let abar = tape.exp(da)?;
    let delta_col = tape.transpose(sp.delta)?;
    let bbar = tape.matmul(delta_col, sp.b)?;
    Ok((abar, bbar))
}

/// Returns `(h [D, N], y [1, D])`.
pub fn ssm_step_on(tape: &mut Tape<'_>, h_prev: Var, x: Var, p: &SsmVars) -> Result<(Var, Var)> {
    let (d, n) = {
        let hp = tape.value(h_prev)?;
        (hp.rows(), hp.cols())
    };
    let xd = tape.value(x)?.len();
    if xd != d || tape.value(p.w_b)?.cols() != n {
        return shape_err("ssm_step", format!("state [{d}, {n}] with input of length {xd}"));
    }
    let sp = selective_params_on(tape, x, p)?;
    let (abar, bbar) = discretize_on(tape, &sp, p.a_log)?;
    let decayed = tape.scale_rows(h_prev, abar)?;
    let injected = tape.scale_rows(bbar, x)?;
    let h = tape.add(decayed, injected)?;
    let c_col = tape.transpose(sp.c)?;
    let read = tape.matmul(h, c_col)?;
    let read = tape.transpose(read)?;
    let direct = tape.mul(p.skip, x)?;
    let y = tape.add(read, direct)?;
    Ok((h, y))
}

pub fn ssm_scan_on(tape: &mut Tape<'_>, xs: &[Var], p: &SsmVars, h0: Var) -> Result<(Vec<Var>, Var)> {
    if xs.is_empty() {
        return Err(Error::Invalid("ssm_scan needs at least one input".into()));
    }
    let mut h = h0;
    let mut ys = Vec::with_capacity(xs.len());
    for &x in xs {
        let (h_next, y) = ssm_step_on(tape, h, x, p)?;
        ys.push(y);
        h = h_next;
    }
    Ok((ys, h))
}

/// Pre-normalised gated residual block wrapping one [`SsmLayerParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct MambaBlockParams {
    pub norm: Tensor,
    pub w_in: Tensor,
    pub w_gate: Tensor,
    pub w_out: Tensor,
    pub ssm: SsmLayerParams,
}

pub const BLOCK_PARAM_NAMES: [&str; 4] = ["norm", "w_in", "w_gate", "w_out"];

impl MambaBlockParams {
    pub fn init(
        d_model: usize,
        d_inner: usize,
        state: usize,
        dt_rank: usize,
        n_layers: usize,
        rng: &mut SeededRng,
    ) -> Self {
        let in_std = (d_model as f64).powf(-0.5);
        let out_std = (d_inner as f64 * n_layers.max(1) as f64).powf(-0.5);
        MambaBlockParams {
            norm: Tensor::filled(&[1, d_model], 1.0),
            w_in: init::normal(&[d_model, d_inner], in_std, rng),
            w_gate: init::normal(&[d_model, d_inner], in_std, rng),
            w_out: init::normal(&[d_inner, d_model], out_std, rng),
            ssm: SsmLayerParams::init(d_inner, state, dt_rank, rng),
        }
    }

    pub fn d_model(&self) -> usize {
        self.norm.len()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.norm, &self.w_in, &self.w_gate, &self.w_out];
        v.extend(self.ssm.tensors());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.norm, &mut self.w_in, &mut self.w_gate, &mut self.w_out];
        v.extend(self.ssm.tensors_mut());
        v
    }

    pub fn names() -> impl Iterator<Item = &'static str> {
        BLOCK_PARAM_NAMES
            .iter()
            .copied()
            .chain(SSM_PARAM_NAMES.iter().copied())
    }

    pub fn bind<'p>(&'p self, tape: &mut Tape<'p>) -> Result<BlockVars> {
        let v = self
            .tensors()
            .into_iter()
            .map(|t| tape.leaf_ref(t))
            .collect::<Result<Vec<_>>>()?;
        Ok(BlockVars::from_slice(&v))
    }

    pub fn step(&self, x: &[f64], h_prev: &HiddenState) -> Result<(Vec<f64>, HiddenState)> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape)?;
        let xv = tape.leaf(Tensor::row(x.to_vec()))?;
        let h = tape.leaf(h_prev.h.clone())?;
        let (out, h) = mamba_block_on(&mut tape, xv, h, &p)?;
        Ok((
            tape.value(out)?.data().to_vec(),
            HiddenState {
                h: tape.value(h)?.clone(),
                step_index: h_prev.step_index + 1,
            },
        ))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub norm: Var,
    pub w_in: Var,
    pub w_gate: Var,
    pub w_out: Var,
    pub ssm: SsmVars,
}

impl BlockVars {
    pub const LEN: usize = 11;

    pub fn from_slice(v: &[Var]) -> Self {
        BlockVars {
            norm: v[0],
            w_in: v[1],
            w_gate: v[2],
            w_out: v[3],
            ssm: SsmVars::from_slice(&v[4..]),
        }
    }
}

/// `out = x + W_out (ssm(W_in n) * silu(W_gate n))` with `n = rms_norm(x) * norm`.
pub fn mamba_block_on(tape: &mut Tape<'_>, x: Var, h_prev: Var, p: &BlockVars) -> Result<(Var, Var)> {
    let normed = tape.rms_norm(x)?;
    let normed = tape.mul(normed, p.norm)?;
    let inner = tape.matmul(normed, p.w_in)?;
    let gate = tape.matmul(normed, p.w_gate)?;
    let gate = tape.silu(gate)?;
    let (h, y) = ssm_step_on(tape, h_prev, inner, &p.ssm)?;
    let gated = tape.mul(y, gate)?;
    let proj = tape.matmul(gated, p.w_out)?;
    let out = tape.add(x, proj)?;
    Ok((out, h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check_subset;

    fn layer(d: usize, n: usize, seed: u64) -> SsmLayerParams {
        SsmLayerParams::init(d, n, 4, &mut init::rng(seed))
    }

    #[test]
    fn zero_input_zero_bias_gives_ln2_step_and_zero_bc() {
        let mut p = layer(6, 3, 1);
        p.dt_bias = Tensor::zeros(&[1, 6]);
        let sp = p.selective_params(&[0.0; 6]).unwrap();
        for d in &sp.delta {
            assert!((d - std::f64::consts::LN_2).abs() < 1e-15);
        }
        assert!(sp.b.iter().chain(&sp.c).all(|&v| v == 0.0));
    }

    #[test]
    fn b_and_c_are_linear_in_x() {
        let p = layer(5, 4, 2);
        let x: Vec<f64> = (0..5).map(|i| i as f64 * 0.3 - 0.5).collect();
        let x2: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let a = p.selective_params(&x).unwrap();
        let b = p.selective_params(&x2).unwrap();
        for (u, v) in a.b.iter().zip(&b.b).chain(a.c.iter().zip(&b.c)) {
            assert!((2.0 * u - v).abs() < 1e-14);
        }
    }

    #[test]
    fn discretize_hand_values() {
        let sp = SelectiveParams {
            delta: vec![std::f64::consts::LN_2, 0.0],
            b: vec![1.0, -2.0],
            c: vec![0.0, 0.0],
        };
        let (abar, bbar) = sp.discretize(&[-1.0, -1.0]).unwrap();
        assert!((abar[0] - 0.5).abs() < 1e-15);
        assert_eq!(abar[1], 1.0);
        assert_eq!(&bbar.data()[2..], &[0.0, 0.0]);
    }

    #[test]
    fn zero_state_step_is_injection_only() {
        let p = layer(4, 3, 3);
        let x = [0.5, -0.2, 0.1, 0.9];
        let (h, y) = p.step(&HiddenState::zeros(4, 3), &x).unwrap();
        let sp = p.selective_params(&x).unwrap();
        let (_, bbar) = sp.discretize(&p.decay()).unwrap();
        for d in 0..4 {
            for n in 0..3 {
                let want = bbar.data()[d * 3 + n] * x[d];
                assert!((h.h.data()[d * 3 + n] - want).abs() < 1e-15);
            }
            let read: f64 = (0..3).map(|n| sp.c[n] * h.h.data()[d * 3 + n]).sum();
            assert!((y[d] - (read + p.skip.data()[d] * x[d])).abs() < 1e-14);
        }
        assert_eq!(h.step_index, 1);
    }

    #[test]
    fn zero_input_decays_state() {
        let p = layer(4, 3, 4);
        let h0 = HiddenState {
            h: init::normal(&[4, 3], 1.0, &mut init::rng(9)),
            step_index: 0,
        };
        let (h1, _) = p.step(&h0, &[0.0; 4]).unwrap();
        assert!(h1.norm_inf() <= h0.norm_inf());
        let abar: Vec<f64> = p
            .selective_params(&[0.0; 4])
            .unwrap()
            .discretize(&p.decay())
            .unwrap()
            .0;
        for d in 0..4 {
            for n in 0..3 {
                let want = abar[d] * h0.h.data()[d * 3 + n];
                assert!((h1.h.data()[d * 3 + n] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn empty_scan_is_an_error() {
        let p = layer(2, 2, 5);
        assert!(p.scan(&[], &HiddenState::zeros(2, 2)).is_err());
    }

    #[test]
    fn wrong_input_length_is_an_error() {
        let p = layer(3, 2, 5);
        assert!(p.step(&HiddenState::zeros(3, 2), &[0.0; 4]).is_err());
    }

    #[test]
    fn zero_output_projection_is_identity() {
        let mut b = MambaBlockParams::init(8, 8, 4, 2, 1, &mut init::rng(6));
        b.w_out = Tensor::zeros(&[8, 8]);
        let x: Vec<f64> = (0..8).map(|i| (i as f64).cos()).collect();
        let (out, h) = b.step(&x, &HiddenState::zeros(8, 4)).unwrap();
        assert_eq!(out, x);
        assert_eq!(h.step_index, 1);
    }

    #[test]
    fn block_gradient_matches_finite_differences() {
        let block = MambaBlockParams::init(6, 6, 3, 2, 1, &mut init::rng(7));
        let xs: Vec<Tensor> = (0..3)
            .map(|t| Tensor::row((0..6).map(|i| ((i + 3 * t) as f64 * 0.7).sin()).collect()))
            .collect();
        let names: Vec<&str> = MambaBlockParams::names().collect();
        for (k, name) in names.iter().enumerate() {
            let theta = block.tensors()[k].clone();
            let f = |tape: &mut Tape<'_>, v: Var| -> Result<Var> {
                let mut vars = Vec::new();
                for (j, t) in block.tensors().into_iter().enumerate() {
                    vars.push(if j == k { v } else { tape.leaf(t.clone())? });
                }
                let bv = BlockVars::from_slice(&vars);
                let mut h = tape.leaf(Tensor::zeros(&[6, 3]))?;
                let mut total = None;
                for x in &xs {
                    let xv = tape.leaf(x.clone())?;
                    let (out, h2) = mamba_block_on(tape, xv, h, &bv)?;
                    h = h2;
                    let sq = tape.square(out)?;
                    let s = tape.sum(sq)?;
                    total = Some(match total {
                        None => s,
                        Some(acc) => tape.add(acc, s)?,
                    });
                }
                Ok(total.unwrap())
            };
            let comps: Vec<usize> = (0..theta.len()).collect();
            let err = grad_check_subset(f, &theta, 1e-5, &comps).unwrap();
            assert!(err <= 1e-5, "{name}: {err}");
        }
    }
}
