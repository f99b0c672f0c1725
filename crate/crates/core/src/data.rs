//! Demonstration trajectories, chunk-target extraction and the `MTILDS`
//! dataset file.
//!
//! File layout (little-endian throughout):
//!
//! ```text
//! magic        6 bytes "MTILDS"
//! version      u32
//! obs_dim      u32
//! action_dim   u32
//! count        u64
//! per trajectory header: u64 length, u64 seed, u8 success, u32 + UTF-8 task id
//! per trajectory body (same order): f64 obs[length * obs_dim], f64 actions[length * action_dim]
//! ```

use std::path::Path;

use crate::binio::{put_f64s, put_string, put_u32, put_u64, Reader};
use crate::error::{shape_err, Error, Result};
use crate::numerics::Tensor;

pub const DATASET_MAGIC: &[u8; 6] = b"MTILDS";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TrajectoryMeta {
    pub task: String,
    pub seed: u64,
    pub success: bool,
}

/// One demonstration: `T` observations and the `T` actions taken after them.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    obs_dim: usize,
    action_dim: usize,
    observations: Vec<f64>,
    actions: Vec<f64>,
    pub meta: TrajectoryMeta,
}

impl Trajectory {
    pub fn new(
        obs_dim: usize,
        action_dim: usize,
        observations: Vec<f64>,
        actions: Vec<f64>,
        meta: TrajectoryMeta,
    ) -> Result<Self> {
        if obs_dim == 0 || action_dim == 0 {
            return shape_err("trajectory", "dims must be positive");
        }
        if observations.len() % obs_dim != 0 || actions.len() % action_dim != 0 {
            return shape_err("trajectory", "ragged rows");
        }
        let t = observations.len() / obs_dim;
        if t == 0 || actions.len() / action_dim != t {
            return shape_err(
                "trajectory",
                format!("{t} observations vs {} actions", actions.len() / action_dim),
            );
        }
        if observations.iter().chain(&actions).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "trajectory" });
        }
        Ok(Trajectory {
            obs_dim,
            action_dim,
            observations,
            actions,
            meta,
        })
    }

    pub fn from_rows(obs: &[Vec<f64>], actions: &[Vec<f64>], meta: TrajectoryMeta) -> Result<Self> {
        let od = obs.first().map_or(0, Vec::len);
        let ad = actions.first().map_or(0, Vec::len);
        if obs.iter().any(|o| o.len() != od) || actions.iter().any(|a| a.len() != ad) {
            return shape_err("trajectory", "ragged rows");
        }
        Trajectory::new(od, ad, obs.concat(), actions.concat(), meta)
    }

    pub fn len(&self) -> usize {
        self.observations.len() / self.obs_dim
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    /// Observation at 0-based step `i`.
    pub fn obs(&self, i: usize) -> &[f64] {
        &self.observations[i * self.obs_dim..(i + 1) * self.obs_dim]
    }

    /// Action at 0-based step `i`.
    pub fn action(&self, i: usize) -> &[f64] {
        &self.actions[i * self.action_dim..(i + 1) * self.action_dim]
    }

    pub fn observations(&self) -> &[f64] {
        &self.observations
    }

    pub fn actions(&self) -> &[f64] {
        &self.actions
    }
}

/// Target chunk for 0-based step `i`: row `k` is the action at
/// `min(i + k, T - 1)`, so chunks running past the end repeat the final
/// demonstrated action. Returns `[K, action_dim]`.
pub fn chunk_targets(traj: &Trajectory, i: usize, k: usize) -> Result<Tensor> {
    let t = traj.len();
    if i >= t {
        return Err(Error::OutOfRange { index: i + 1, len: t });
    }
    if k == 0 {
        return Err(Error::Invalid("chunk size must be >= 1".into()));
    }
    let mut data = Vec::with_capacity(k * traj.action_dim());
    for row in 0..k {
        data.extend_from_slice(traj.action((i + row).min(t - 1)));
    }
    Tensor::new(vec![k, traj.action_dim()], data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub obs_dim: usize,
    pub action_dim: usize,
    pub trajectories: Vec<Trajectory>,
}

impl Dataset {
    pub fn new(obs_dim: usize, action_dim: usize, trajectories: Vec<Trajectory>) -> Result<Self> {
        if let Some(bad) = trajectories
            .iter()
            .find(|t| t.obs_dim() != obs_dim || t.action_dim() != action_dim)
        {
            return shape_err(
                "dataset",
                format!(
                    "trajectory dims ({}, {}) differ from declared ({obs_dim}, {action_dim})",
                    bad.obs_dim(),
                    bad.action_dim()
                ),
            );
        }
        Ok(Dataset {
            obs_dim,
            action_dim,
            trajectories,
        })
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn total_steps(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(DATASET_MAGIC);
        put_u32(&mut out, DATASET_VERSION);
        put_u32(&mut out, self.obs_dim as u32);
        put_u32(&mut out, self.action_dim as u32);
        put_u64(&mut out, self.trajectories.len() as u64);
        for t in &self.trajectories {
            put_u64(&mut out, t.len() as u64);
            put_u64(&mut out, t.meta.seed);
            out.push(u8::from(t.meta.success));
            put_string(&mut out, &t.meta.task);
        }
        for t in &self.trajectories {
            put_f64s(&mut out, &t.observations);
            put_f64s(&mut out, &t.actions);
        }
        out
    }

    /// Parses a whole file; nothing is returned unless every check passes.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(6)? != DATASET_MAGIC {
            return Err(Error::Format("not a dataset file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != DATASET_VERSION {
            return Err(Error::Version {
                found: version,
                expected: DATASET_VERSION,
            });
        }
        let obs_dim = r.u32()? as usize;
        let action_dim = r.u32()? as usize;
        if obs_dim == 0 || action_dim == 0 {
            return Err(Error::Format("dims must be positive".into()));
        }
        let count = r.len_u64()?;
        let mut headers = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let len = r.len_u64()?;
            if len == 0 {
                return Err(Error::Format("zero-length trajectory".into()));
            }
            let seed = r.u64()?;
            let success = match r.u8()? {
                0 => false,
                1 => true,
                b => return Err(Error::Format(format!("bad success flag {b}"))),
            };
            let task = r.string()?;
            headers.push((len, TrajectoryMeta { task, seed, success }));
        }
        let mut trajectories = Vec::with_capacity(headers.len());
        for (len, meta) in headers {
            let obs = r.f64s(len * obs_dim)?;
            let act = r.f64s(len * action_dim)?;
            trajectories.push(Trajectory::new(obs_dim, action_dim, obs, act, meta)?);
        }
        r.finish()?;
        Dataset::new(obs_dim, action_dim, trajectories)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Dataset::from_bytes(&std::fs::read(path)?)
    }

    /// One CSV per trajectory (`traj_00000.csv`, ...) with columns
    /// `t, o0.., a0..`; `t` is 1-based.
    pub fn export_csv(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (n, traj) in self.trajectories.iter().enumerate() {
            let mut w = csv::Writer::from_path(dir.join(format!("traj_{n:05}.csv")))?;
            let mut header = vec!["t".to_string()];
            header.extend((0..self.obs_dim).map(|i| format!("o{i}")));
            header.extend((0..self.action_dim).map(|i| format!("a{i}")));
            w.write_record(&header)?;
            for i in 0..traj.len() {
                let mut row = vec![(i + 1).to_string()];
                row.extend(traj.obs(i).iter().map(|v| v.to_string()));
                row.extend(traj.action(i).iter().map(|v| v.to_string()));
                w.write_record(&row)?;
            }
            w.flush()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(t: usize) -> Trajectory {
        let obs: Vec<Vec<f64>> = (0..t).map(|i| vec![i as f64, -(i as f64)]).collect();
        let act: Vec<Vec<f64>> = (0..t).map(|i| vec![10.0 * (i + 1) as f64]).collect();
        Trajectory::from_rows(&obs, &act, TrajectoryMeta::default()).unwrap()
    }

    // `a(n)` is the n-th action with 1-based n; steps below are 0-based.
    fn a(n: usize) -> f64 {
        10.0 * n as f64
    }

    #[test]
    fn in_range_chunk() {
        let c = chunk_targets(&ramp(5), 1, 3).unwrap();
        assert_eq!(c.data(), &[a(2), a(3), a(4)]);
    }

    #[test]
    fn chunk_past_end_repeats_last_action() {
        let c = chunk_targets(&ramp(5), 3, 3).unwrap();
        assert_eq!(c.data(), &[a(4), a(5), a(5)]);
    }

    #[test]
    fn final_step_repeats_k_times() {
        for k in [1, 2, 7] {
            let c = chunk_targets(&ramp(5), 4, k).unwrap();
            assert_eq!(c.data(), vec![a(5); k].as_slice());
        }
    }

    #[test]
    fn out_of_range_step_is_an_error() {
        assert!(matches!(
            chunk_targets(&ramp(5), 5, 2),
            Err(Error::OutOfRange { index: 6, len: 5 })
        ));
    }

    #[test]
    fn trajectory_validation() {
        let meta = TrajectoryMeta::default();
        assert!(Trajectory::new(2, 1, vec![], vec![], meta.clone()).is_err());
        assert!(Trajectory::new(2, 1, vec![0.0; 4], vec![0.0; 3], meta.clone()).is_err());
        assert!(Trajectory::new(2, 1, vec![f64::NAN, 0.0], vec![0.0], meta).is_err());
    }

    #[test]
    fn dataset_rejects_mixed_dims() {
        let other = Trajectory::from_rows(&[vec![0.0]], &[vec![0.0]], TrajectoryMeta::default()).unwrap();
        assert!(Dataset::new(2, 1, vec![ramp(3), other]).is_err());
    }

    #[test]
    fn empty_dataset_round_trips() {
        let ds = Dataset::new(4, 3, vec![]).unwrap();
        assert_eq!(Dataset::from_bytes(&ds.to_bytes()).unwrap(), ds);
    }

    #[test]
    fn corrupted_files_are_rejected() {
        let ds = Dataset::new(2, 1, vec![ramp(4), ramp(2)]).unwrap();
        let bytes = ds.to_bytes();
        let mut bad = bytes.clone();
        bad[1] = b'?';
        assert!(matches!(Dataset::from_bytes(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[6] = 2;
        assert!(matches!(Dataset::from_bytes(&bad), Err(Error::Version { found: 2, .. })));
        assert!(Dataset::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(Dataset::from_bytes(&long).is_err());
    }
}
