//! The recurrent chunking policy: linear observation encoder, a stack of
//! selective SSM blocks (or a memoryless MLP baseline), and an output head.

mod checkpoint;
mod gmm;

use std::fmt;
use std::str::FromStr;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gmm::{gmm_nll, gmm_nll_on, gmm_sample, GmmParams, LOG_STD_MAX, LOG_STD_MIN};

use crate::config::KvRecord;
use crate::error::{shape_err, Error, Result};
use crate::init::{self, SeededRng};
use crate::numerics::{Tape, Tensor, Var};
use crate::ssm::{mamba_block_on, BlockVars, HiddenState, MambaBlockParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    LinearChunk,
    Gmm { components: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Backbone {
    Mamba,
    /// Memoryless baseline: `depth` hidden layers of `width` SiLU units.
    Mlp { width: usize, depth: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PolicyConfig {
    pub obs_dim: usize,
    pub action_dim: usize,
    pub chunk_k: usize,
    pub d_model: usize,
    pub d_state: usize,
    pub n_layers: usize,
    /// Inner SSM width is `expand * d_model`.
    pub expand: usize,
    pub dt_rank: usize,
    pub head: HeadKind,
    pub backbone: Backbone,
    /// Hidden state is zeroed whenever `step_index % r == 0`; `None` keeps full history.
    pub history_reset: Option<u32>,
}

impl PolicyConfig {
    /// Low-dimensional desk-scale preset: `d_model` 64, 16 states, 4 layers.
    pub fn desk(obs_dim: usize, action_dim: usize, chunk_k: usize) -> Self {
        PolicyConfig {
            obs_dim,
            action_dim,
            chunk_k,
            d_model: 64,
            d_state: 16,
            n_layers: 4,
            expand: 1,
            dt_rank: 4,
            head: HeadKind::LinearChunk,
            backbone: Backbone::Mamba,
            history_reset: None,
        }
    }

    /// Image-scale preset (`d_model` 2048, 512 states, `K` = 50).
    pub fn sim(obs_dim: usize, action_dim: usize) -> Self {
        PolicyConfig {
            d_model: 2048,
            d_state: 512,
            dt_rank: 128,
            chunk_k: 50,
            ..Self::desk(obs_dim, action_dim, 50)
        }
    }

    pub fn preset(name: &str, obs_dim: usize, action_dim: usize, chunk_k: usize) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk(obs_dim, action_dim, chunk_k)),
            "sim" => Ok(PolicyConfig {
                chunk_k,
                ..Self::sim(obs_dim, action_dim)
            }),
            other => Err(Error::Config(format!("unknown preset '{other}'"))),
        }
    }

    /// Two-hidden-layer width-128 memoryless baseline with the same encoder and head.
    pub fn markov_mlp(&self) -> Self {
        PolicyConfig {
            backbone: Backbone::Mlp { width: 128, depth: 2 },
            history_reset: Some(1),
            ..self.clone()
        }
    }

    pub fn d_inner(&self) -> usize {
        self.expand * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("obs_dim", self.obs_dim),
            ("action_dim", self.action_dim),
            ("chunk_k", self.chunk_k),
            ("d_model", self.d_model),
            ("d_state", self.d_state),
            ("expand", self.expand),
            ("dt_rank", self.dt_rank),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if let HeadKind::Gmm { components } = self.head {
            if components == 0 {
                return Err(Error::Config("gmm_components must be positive".into()));
            }
            if self.chunk_k != 1 {
                return Err(Error::Config("gmm head requires chunk_k = 1".into()));
            }
        }
        if let Backbone::Mlp { width, .. } = self.backbone {
            if width == 0 {
                return Err(Error::Config("mlp_width must be positive".into()));
            }
        }
        if self.history_reset == Some(0) {
            return Err(Error::Config("history_reset must be >= 1".into()));
        }
        Ok(())
    }

    pub fn to_record(&self) -> KvRecord {
        let mut r = KvRecord::new();
        r.set("obs_dim", self.obs_dim);
        r.set("action_dim", self.action_dim);
        r.set("chunk_k", self.chunk_k);
        r.set("d_model", self.d_model);
        r.set("d_state", self.d_state);
        r.set("n_layers", self.n_layers);
        r.set("expand", self.expand);
        r.set("dt_rank", self.dt_rank);
        match self.head {
            HeadKind::LinearChunk => r.set("head", "linear"),
            HeadKind::Gmm { components } => {
                r.set("head", "gmm");
                r.set("gmm_components", components);
            }
        }
        match self.backbone {
            Backbone::Mamba => r.set("backbone", "mamba"),
            Backbone::Mlp { width, depth } => {
                r.set("backbone", "mlp");
                r.set("mlp_width", width);
                r.set("mlp_depth", depth);
            }
        }
        match self.history_reset {
            None => r.set("history_reset", "none"),
            Some(n) => r.set("history_reset", n),
        }
        r
    }

    pub fn from_record(r: &KvRecord) -> Result<Self> {
        let head = match r.require::<String>("head")?.as_str() {
            "linear" => HeadKind::LinearChunk,
            "gmm" => HeadKind::Gmm {
                components: r.require("gmm_components")?,
            },
            other => return Err(Error::Config(format!("unknown head '{other}'"))),
        };
        let backbone = match r.require::<String>("backbone")?.as_str() {
            "mamba" => Backbone::Mamba,
            "mlp" => Backbone::Mlp {
                width: r.require("mlp_width")?,
                depth: r.require("mlp_depth")?,
            },
            other => return Err(Error::Config(format!("unknown backbone '{other}'"))),
        };
        let history_reset = parse_reset(&r.require::<String>("history_reset")?)?;
        let cfg = PolicyConfig {
            obs_dim: r.require("obs_dim")?,
            action_dim: r.require("action_dim")?,
            chunk_k: r.require("chunk_k")?,
            d_model: r.require("d_model")?,
            d_state: r.require("d_state")?,
            n_layers: r.require("n_layers")?,
            expand: r.require("expand")?,
            dt_rank: r.require("dt_rank")?,
            head,
            backbone,
            history_reset,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn parse_reset(s: &str) -> Result<Option<u32>> {
    match s {
        "none" | "full" => Ok(None),
        n => match n.parse::<u32>() {
            Ok(0) | Err(_) => Err(Error::Config(format!("bad history reset interval '{n}'"))),
            Ok(v) => Ok(Some(v)),
        },
    }
}

/// `K` consecutive predicted actions, row-major `[K, action_dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionChunk {
    k: usize,
    action_dim: usize,
    data: Vec<f64>,
}

impl ActionChunk {
    pub fn new(k: usize, action_dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != k * action_dim || k == 0 {
            return shape_err("action_chunk", format!("{} values for [{k}, {action_dim}]", data.len()));
        }
        Ok(ActionChunk { k, action_dim, data })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.k, self.action_dim)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.action_dim..(i + 1) * self.action_dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Output of one policy step.
#[derive(Clone, Debug, PartialEq)]
pub enum Prediction {
    Chunk(ActionChunk),
    Gmm(GmmParams),
}

impl Prediction {
    /// The chunk, or a one-row chunk holding the mean of the most likely
    /// mixture component.
    pub fn to_chunk(&self) -> ActionChunk {
        match self {
            Prediction::Chunk(c) => c.clone(),
            Prediction::Gmm(g) => {
                let mode = g.dominant_mean();
                ActionChunk::new(1, mode.len(), mode).expect("mode has action_dim entries")
            }
        }
    }
}

/// Per-layer recurrent state for a whole policy.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyState {
    pub layers: Vec<HiddenState>,
    pub step_index: u64,
}

impl PolicyState {
    pub fn is_zero(&self) -> bool {
        self.layers.iter().all(HiddenState::is_zero)
    }

    /// Zeroes every layer while keeping the step counter.
    pub fn clear_history(&mut self) {
        for l in &mut self.layers {
            l.h.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn norm_inf(&self) -> f64 {
        self.layers.iter().map(HiddenState::norm_inf).fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq)]
enum BackboneParams {
    Mamba {
        blocks: Vec<MambaBlockParams>,
        final_norm: Tensor,
    },
    Mlp {
        layers: Vec<(Tensor, Tensor)>,
    },
}

#[derive(Clone, Debug, PartialEq)]
enum HeadParams {
    Linear {
        w: Tensor,
        b: Tensor,
    },
    Gmm {
        logits_w: Tensor,
        logits_b: Tensor,
        means_w: Tensor,
        means_b: Tensor,
        log_std: Tensor,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    config: PolicyConfig,
    encoder_w: Tensor,
    encoder_b: Tensor,
    backbone: BackboneParams,
    head: HeadParams,
}

/// Tape handles for every policy parameter, in [`Policy::named_params`] order.
#[derive(Clone, Debug)]
pub struct BoundPolicy {
    pub all: Vec<Var>,
}

/// Head outputs on the tape.
#[derive(Clone, Copy, Debug)]
pub enum HeadVars {
    /// `[K, action_dim]`
    Chunk(Var),
    /// logits `[1, M]`, means and clamped log-stds `[M, action_dim]`.
    Gmm { logits: Var, means: Var, log_stds: Var },
}

impl Policy {
    pub fn new(config: PolicyConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = init::rng(seed);
        let c = &config;
        let encoder_w = init::normal(&[c.obs_dim, c.d_model], (c.obs_dim as f64).powf(-0.5), &mut rng);
        let encoder_b = Tensor::zeros(&[1, c.d_model]);
        let (backbone, feat) = match c.backbone {
            Backbone::Mamba => {
                let blocks = (0..c.n_layers)
                    .map(|_| {
                        MambaBlockParams::init(c.d_model, c.d_inner(), c.d_state, c.dt_rank, c.n_layers, &mut rng)
                    })
                    .collect();
                (
                    BackboneParams::Mamba {
                        blocks,
                        final_norm: Tensor::filled(&[1, c.d_model], 1.0),
                    },
                    c.d_model,
                )
            }
            Backbone::Mlp { width, depth } => {
                let mut layers = Vec::with_capacity(depth);
                let mut fan_in = c.d_model;
                for _ in 0..depth {
                    layers.push((
                        init::normal(&[fan_in, width], (fan_in as f64).powf(-0.5), &mut rng),
                        Tensor::zeros(&[1, width]),
                    ));
                    fan_in = width;
                }
                (BackboneParams::Mlp { layers }, fan_in)
            }
        };
        let head = Self::init_head(c, feat, &mut rng);
        Ok(Policy {
            config,
            encoder_w,
            encoder_b,
            backbone,
            head,
        })
    }

    fn init_head(c: &PolicyConfig, feat: usize, rng: &mut SeededRng) -> HeadParams {
        let std = (feat as f64).powf(-0.5);
        match c.head {
            HeadKind::LinearChunk => HeadParams::Linear {
                w: init::normal(&[feat, c.chunk_k * c.action_dim], std, rng),
                b: Tensor::zeros(&[1, c.chunk_k * c.action_dim]),
            },
            HeadKind::Gmm { components } => HeadParams::Gmm {
                logits_w: init::normal(&[feat, components], std, rng),
                logits_b: Tensor::zeros(&[1, components]),
                means_w: init::normal(&[feat, components * c.action_dim], std, rng),
                means_b: init::uniform(&[1, components * c.action_dim], -0.5, 0.5, rng),
                log_std: Tensor::zeros(&[components, c.action_dim]),
            },
        }
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn set_history_reset(&mut self, reset: Option<u32>) -> Result<()> {
        let mut cfg = self.config.clone();
        cfg.history_reset = reset;
        cfg.validate()?;
        self.config = cfg;
        Ok(())
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("encoder.w".into(), &self.encoder_w),
            ("encoder.b".into(), &self.encoder_b),
        ];
        match &self.backbone {
            BackboneParams::Mamba { blocks, final_norm } => {
                for (i, b) in blocks.iter().enumerate() {
                    for (name, t) in MambaBlockParams::names().zip(b.tensors()) {
                        out.push((format!("blocks.{i}.{name}"), t));
                    }
                }
                out.push(("final_norm".into(), final_norm));
            }
            BackboneParams::Mlp { layers } => {
                for (i, (w, b)) in layers.iter().enumerate() {
                    out.push((format!("mlp.{i}.w"), w));
                    out.push((format!("mlp.{i}.b"), b));
                }
            }
        }
        match &self.head {
            HeadParams::Linear { w, b } => {
                out.push(("head.w".into(), w));
                out.push(("head.b".into(), b));
            }
            HeadParams::Gmm {
                logits_w,
                logits_b,
                means_w,
                means_b,
                log_std,
            } => {
                out.push(("head.logits_w".into(), logits_w));
                out.push(("head.logits_b".into(), logits_b));
                out.push(("head.means_w".into(), means_w));
                out.push(("head.means_b".into(), means_b));
                out.push(("head.log_std".into(), log_std));
            }
        }
        out
    }

    /// Mutable parameters in [`Policy::named_params`] order.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![&mut self.encoder_w, &mut self.encoder_b];
        match &mut self.backbone {
            BackboneParams::Mamba { blocks, final_norm } => {
                for b in blocks.iter_mut() {
                    out.extend(b.tensors_mut());
                }
                out.push(final_norm);
            }
            BackboneParams::Mlp { layers } => {
                for (w, b) in layers.iter_mut() {
                    out.push(w);
                    out.push(b);
                }
            }
        }
        match &mut self.head {
            HeadParams::Linear { w, b } => {
                out.push(w);
                out.push(b);
            }
            HeadParams::Gmm {
                logits_w,
                logits_b,
                means_w,
                means_b,
                log_std,
            } => {
                out.extend([logits_w, logits_b, means_w, means_b, log_std]);
            }
        }
        out
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Replaces parameter values in place; shapes must match.
    pub fn load_params(&mut self, values: &[Tensor]) -> Result<()> {
        let mut slots = self.params_mut();
        if slots.len() != values.len() {
            return shape_err("load_params", format!("{} tensors for {} slots", values.len(), slots.len()));
        }
        for (slot, v) in slots.iter().zip(values) {
            if slot.shape() != v.shape() {
                return shape_err("load_params", format!("{:?} vs {:?}", slot.shape(), v.shape()));
            }
        }
        for (slot, v) in slots.iter_mut().zip(values) {
            **slot = v.clone();
        }
        Ok(())
    }

    pub fn bind<'p>(&'p self, tape: &mut Tape<'p>) -> Result<BoundPolicy> {
        let all = self
            .params()
            .into_iter()
            .map(|t| tape.leaf_ref(t))
            .collect::<Result<Vec<_>>>()?;
        Ok(BoundPolicy { all })
    }

    pub fn reset(&self) -> PolicyState {
        let layers = match &self.backbone {
            BackboneParams::Mamba { blocks, .. } => blocks
                .iter()
                .map(|b| HiddenState::zeros(b.ssm.channels(), b.ssm.state_size()))
                .collect(),
            BackboneParams::Mlp { .. } => Vec::new(),
        };
        PolicyState { layers, step_index: 0 }
    }

    /// Linear projection of the observation to `d_model`.
    pub fn encode_on(&self, tape: &mut Tape<'_>, bound: &BoundPolicy, obs: Var) -> Result<Var> {
        let len = tape.value(obs)?.len();
        if len != self.config.obs_dim {
            return shape_err("encode", format!("observation of length {len}, expected {}", self.config.obs_dim));
        }
        let x = tape.matmul(obs, bound.all[0])?;
        tape.add(x, bound.all[1])
    }

    /// Advances every layer on `x` and maps the final feature through the head.
    pub fn step_on(
        &self,
        tape: &mut Tape<'_>,
        bound: &BoundPolicy,
        x: Var,
        states: &[Var],
    ) -> Result<(HeadVars, Vec<Var>)> {
        let mut cursor = 2;
        let (feature, new_states) = match &self.backbone {
            BackboneParams::Mamba { blocks, .. } => {
                if states.len() != blocks.len() {
                    return shape_err("policy_step", format!("{} states for {} layers", states.len(), blocks.len()));
                }
                let mut h = x;
                let mut next = Vec::with_capacity(blocks.len());
                for state in states {
                    let bv = BlockVars::from_slice(&bound.all[cursor..cursor + BlockVars::LEN]);
                    cursor += BlockVars::LEN;
                    let (out, s) = mamba_block_on(tape, h, *state, &bv)?;
                    h = out;
                    next.push(s);
                }
                let normed = tape.rms_norm(h)?;
                let feat = tape.mul(normed, bound.all[cursor])?;
                cursor += 1;
                (feat, next)
            }
            BackboneParams::Mlp { layers } => {
                let mut h = x;
                for _ in layers {
                    let z = tape.matmul(h, bound.all[cursor])?;
                    let z = tape.add(z, bound.all[cursor + 1])?;
                    h = tape.silu(z)?;
                    cursor += 2;
                }
                (h, Vec::new())
            }
        };
        let head = match self.config.head {
            HeadKind::LinearChunk => {
                let z = tape.matmul(feature, bound.all[cursor])?;
                let z = tape.add(z, bound.all[cursor + 1])?;
                HeadVars::Chunk(tape.reshape(z, &[self.config.chunk_k, self.config.action_dim])?)
            }
            HeadKind::Gmm { components } => {
                let logits = tape.matmul(feature, bound.all[cursor])?;
                let logits = tape.add(logits, bound.all[cursor + 1])?;
                let means = tape.matmul(feature, bound.all[cursor + 2])?;
                let means = tape.add(means, bound.all[cursor + 3])?;
                let means = tape.reshape(means, &[components, self.config.action_dim])?;
                let log_stds = tape.clamp(bound.all[cursor + 4], LOG_STD_MIN, LOG_STD_MAX)?;
                HeadVars::Gmm { logits, means, log_stds }
            }
        };
        Ok((head, new_states))
    }

    fn read_head(&self, tape: &Tape<'_>, head: HeadVars) -> Result<Prediction> {
        let pred = match head {
            HeadVars::Chunk(v) => {
                let t = tape.value(v)?;
                Prediction::Chunk(ActionChunk::new(self.config.chunk_k, self.config.action_dim, t.data().to_vec())?)
            }
            HeadVars::Gmm { logits, means, log_stds } => {
                Prediction::Gmm(GmmParams::from_logits(
                    tape.value(logits)?.data(),
                    tape.value(means)?.clone(),
                    tape.value(log_stds)?.clone(),
                )?)
            }
        };
        match &pred {
            Prediction::Chunk(c) if c.data().iter().any(|v| !v.is_finite()) => {
                Err(Error::NonFinite { op: "policy_step" })
            }
            _ => Ok(pred),
        }
    }

    pub fn encode(&self, obs: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let o = tape.leaf(Tensor::row(obs.to_vec()))?;
        let x = self.encode_on(&mut tape, &bound, o)?;
        Ok(tape.value(x)?.data().to_vec())
    }

    /// One step from embedding `x`. Does not apply history resets.
    pub fn policy_step(&self, x: &[f64], state: &PolicyState) -> Result<(Prediction, PolicyState)> {
        if x.len() != self.config.d_model {
            return shape_err("policy_step", format!("embedding of length {}, expected {}", x.len(), self.config.d_model));
        }
        self.run_step(state, |tape, _| tape.leaf(Tensor::row(x.to_vec())))
    }

    /// Encode then step.
    pub fn act(&self, obs: &[f64], state: &PolicyState) -> Result<(Prediction, PolicyState)> {
        self.run_step(state, |tape, bound| {
            let o = tape.leaf(Tensor::row(obs.to_vec()))?;
            self.encode_on(tape, bound, o)
        })
    }

    fn run_step<'p>(
        &'p self,
        state: &PolicyState,
        input: impl FnOnce(&mut Tape<'p>, &BoundPolicy) -> Result<Var>,
    ) -> Result<(Prediction, PolicyState)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let x = input(&mut tape, &bound)?;
        let states = state
            .layers
            .iter()
            .map(|s| tape.leaf(s.h.clone()))
            .collect::<Result<Vec<_>>>()?;
        let (head, next) = self.step_on(&mut tape, &bound, x, &states)?;
        let pred = self.read_head(&tape, head)?;
        let step_index = state.step_index + 1;
        let layers = next
            .iter()
            .map(|&v| {
                Ok(HiddenState {
                    h: tape.value(v)?.clone(),
                    step_index,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((pred, PolicyState { layers, step_index }))
    }

    #[cfg(test)]
    pub(crate) fn blocks_mut(&mut self) -> &mut [MambaBlockParams] {
        match &mut self.backbone {
            BackboneParams::Mamba { blocks, .. } => blocks,
            BackboneParams::Mlp { .. } => &mut [],
        }
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HeadKind::LinearChunk => write!(f, "linear"),
            HeadKind::Gmm { components } => write!(f, "gmm({components})"),
        }
    }
}

impl FromStr for HeadKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(HeadKind::LinearChunk),
            _ => match s.strip_prefix("gmm") {
                Some("") => Ok(HeadKind::Gmm { components: 5 }),
                Some(rest) => rest
                    .trim_start_matches(':')
                    .parse()
                    .map(|components| HeadKind::Gmm { components })
                    .map_err(|_| Error::Config(format!("bad head '{s}'"))),
                None => Err(Error::Config(format!("unknown head '{s}'"))),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(k: usize) -> PolicyConfig {
        PolicyConfig {
            d_model: 8,
            d_state: 4,
            n_layers: 2,
            dt_rank: 2,
            ..PolicyConfig::desk(3, 2, k)
        }
    }

    #[test]
    fn desk_encoder_maps_to_d_model() {
        let p = Policy::new(PolicyConfig::desk(6, 2, 1), 0).unwrap();
        assert_eq!(p.encode(&[0.1; 6]).unwrap().len(), 64);
    }

    #[test]
    fn encoder_is_linear_without_bias() {
        let p = Policy::new(small(1), 1).unwrap();
        assert!(p.encode(&[0.0; 3]).unwrap().iter().all(|&v| v == 0.0));
        let o = [0.3, -1.2, 0.5];
        let o3: Vec<f64> = o.iter().map(|v| 3.0 * v).collect();
        let a = p.encode(&o).unwrap();
        let b = p.encode(&o3).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((3.0 * u - v).abs() < 1e-13);
        }
        assert!(p.encode(&[0.0; 4]).is_err());
    }

    #[test]
    fn chunk_shape_matches_config() {
        let cfg = PolicyConfig {
            d_model: 16,
            d_state: 4,
            n_layers: 1,
            ..PolicyConfig::desk(4, 14, 50)
        };
        let p = Policy::new(cfg, 2).unwrap();
        let (pred, s) = p.act(&[0.1, 0.2, 0.3, 0.4], &p.reset()).unwrap();
        assert_eq!(pred.to_chunk().shape(), (50, 14));
        assert_eq!(s.step_index, 1);
    }

    #[test]
    fn reset_is_zero_and_deterministic() {
        let p = Policy::new(small(3), 3).unwrap();
        let s = p.reset();
        assert!(s.is_zero());
        assert_eq!(s.norm_inf(), 0.0);
        let a = p.act(&[0.5, 0.1, -0.3], &p.reset()).unwrap();
        let b = p.act(&[0.5, 0.1, -0.3], &p.reset()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_head_weights_repeat_the_bias() {
        let mut p = Policy::new(small(4), 4).unwrap();
        let n = p.params().len();
        let bias: Vec<f64> = (0..8).map(|i| i as f64).collect();
        {
            let mut slots = p.params_mut();
            let w = &mut slots[n - 2];
            w.data_mut().iter_mut().for_each(|v| *v = 0.0);
            slots[n - 1].data_mut().copy_from_slice(&bias);
        }
        let (pred, _) = p.act(&[1.0, 2.0, 3.0], &p.reset()).unwrap();
        assert_eq!(pred.to_chunk().data(), &bias[..]);
    }

    #[test]
    fn different_states_give_different_chunks() {
        let p = Policy::new(small(2), 5).unwrap();
        let x = p.encode(&[0.2, 0.2, 0.2]).unwrap();
        let s1 = p.reset();
        let mut s2 = p.reset();
        s2.layers[0].h = Tensor::filled(s2.layers[0].h.shape(), 0.5);
        let (a, _) = p.policy_step(&x, &s1).unwrap();
        let (b, _) = p.policy_step(&x, &s2).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn saturated_decay_removes_history() {
        let mut p = Policy::new(small(2), 6).unwrap();
        for b in p.blocks_mut() {
            b.ssm.a_log = Tensor::filled(b.ssm.a_log.shape(), 60.0);
        }
        let x = p.encode(&[0.1, -0.4, 0.9]).unwrap();
        let mut s_long = p.reset();
        for obs in [[1.0, 0.0, 0.0], [0.0, 2.0, -1.0], [3.0, 3.0, 3.0]] {
            s_long = p.act(&obs, &s_long).unwrap().1;
        }
        let (a, _) = p.policy_step(&x, &s_long).unwrap();
        let (b, _) = p.policy_step(&x, &p.reset()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gmm_requires_single_step_chunks() {
        let mut cfg = small(2);
        cfg.head = HeadKind::Gmm { components: 3 };
        assert!(Policy::new(cfg.clone(), 0).is_err());
        cfg.chunk_k = 1;
        let p = Policy::new(cfg, 0).unwrap();
        let (pred, _) = p.act(&[0.0, 1.0, 0.0], &p.reset()).unwrap();
        match pred {
            Prediction::Gmm(g) => {
                assert_eq!(g.weights.len(), 3);
                assert!((g.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
            _ => panic!("expected gmm output"),
        }
    }

    #[test]
    fn mlp_backbone_has_no_state() {
        let p = Policy::new(small(2).markov_mlp(), 7).unwrap();
        assert!(p.reset().layers.is_empty());
        let (a, s) = p.act(&[0.3, 0.3, 0.3], &p.reset()).unwrap();
        let (b, _) = p.act(&[0.3, 0.3, 0.3], &s).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn config_record_round_trips() {
        for cfg in [
            small(3),
            small(1).markov_mlp(),
            PolicyConfig {
                head: HeadKind::Gmm { components: 4 },
                history_reset: Some(10),
                ..small(1)
            },
        ] {
            assert_eq!(PolicyConfig::from_record(&cfg.to_record()).unwrap(), cfg);
        }
    }

    #[test]
    fn head_kind_parses() {
        assert_eq!("linear".parse::<HeadKind>().unwrap(), HeadKind::LinearChunk);
        assert_eq!("gmm:3".parse::<HeadKind>().unwrap(), HeadKind::Gmm { components: 3 });
        assert!("conv".parse::<HeadKind>().is_err());
    }
}
