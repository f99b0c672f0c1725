//! Success rates, the history ablation, lifelong-learning metrics and reports.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::KvRecord;
use crate::data::Dataset;
use crate::envs::{generate_demos, EnvKind};
use crate::error::{Error, Result};
use crate::infer::{rollout_env, RolloutConfig};
use crate::parallel::{map_indices, Exec};
use crate::policy::{Policy, PolicyConfig};
use crate::train::{fisher_estimate, fit, FisherInfo, TrainConfig};

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959_963_984_540_054;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RateEstimate {
    pub successes: usize,
    pub episodes: usize,
    pub rate: f64,
    pub lo: f64,
    pub hi: f64,
}

impl RateEstimate {
    pub fn new(successes: usize, episodes: usize) -> Result<Self> {
        if episodes == 0 || successes > episodes {
            return Err(Error::Invalid(format!("{successes} successes in {episodes} episodes")));
        }
        let (lo, hi) = wilson(successes, episodes);
        Ok(RateEstimate {
            successes,
            episodes,
            rate: successes as f64 / episodes as f64,
            lo,
            hi,
        })
    }
}

/// Wilson score interval at 95%.
pub fn wilson(successes: usize, n: usize) -> (f64, f64) {
    let n = n as f64;
    let p = successes as f64 / n;
    let z2 = Z95 * Z95;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = Z95 * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

/// Runs `episode(base_seed + i)` for `i in 0..n`.
pub fn success_rate<F>(n: usize, base_seed: u64, exec: Exec, episode: F) -> Result<RateEstimate>
where
    F: Fn(u64) -> Result<bool> + Sync + Send,
{
    if n == 0 {
        return Err(Error::Invalid("need at least one episode".into()));
    }
    let outcomes = map_indices(exec, n, |i| episode(base_seed + i as u64));
    let mut successes = 0;
    for o in outcomes {
        successes += usize::from(o?);
    }
    RateEstimate::new(successes, n)
}

pub fn policy_success_rate(
    policy: &Policy,
    kind: &EnvKind,
    rollout: &RolloutConfig,
    n: usize,
    base_seed: u64,
    exec: Exec,
) -> Result<RateEstimate> {
    success_rate(n, base_seed, exec, |seed| Ok(rollout_env(policy, kind, rollout, seed)?.success))
}

/// `a[i][j]`: success on task `j` after training through task `i`;
/// `base[j]`: baseline success on task `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct AccuracyMatrix {
    pub a: Vec<Vec<f64>>,
    pub base: Vec<f64>,
}

impl AccuracyMatrix {
    pub fn new(a: Vec<Vec<f64>>, base: Vec<f64>) -> Result<Self> {
        let n = base.len();
        if n == 0 || a.len() != n || a.iter().any(|r| r.len() != n) {
            return Err(Error::Invalid(format!("accuracy matrix must be {n}x{n}")));
        }
        if a.iter().flatten().chain(&base).any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Invalid("accuracies must lie in [0, 1]".into()));
        }
        Ok(AccuracyMatrix { a, base })
    }

    pub fn tasks(&self) -> usize {
        self.base.len()
    }

    /// Mean over tasks `i >= 2` (1-based) of `A[i-1][i] - A_base[i]`.
    pub fn fwt(&self) -> Result<f64> {
        let n = self.tasks();
        if n < 2 {
            return Err(Error::Invalid("fwt needs at least two tasks".into()));
        }
        Ok((1..n).map(|i| self.a[i - 1][i] - self.base[i]).sum::<f64>() / (n - 1) as f64)
    }

    /// Mean over tasks `i < N` of `max(0, A[i][i] - A[N][i])`.
    pub fn nbt(&self) -> Result<f64> {
        let n = self.tasks();
        if n < 2 {
            return Err(Error::Invalid("nbt needs at least two tasks".into()));
        }
        let last = &self.a[n - 1];
        Ok((0..n - 1).map(|i| (self.a[i][i] - last[i]).max(0.0)).sum::<f64>() / (n - 1) as f64)
    }

    /// Mean of the final row.
    pub fn auc(&self) -> f64 {
        let last = &self.a[self.tasks() - 1];
        last.iter().sum::<f64>() / last.len() as f64
    }
}

/// Shared settings for experiments that generate demos, train and evaluate.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    /// Template; observation and action dims are taken from the task.
    pub policy: PolicyConfig,
    pub train: TrainConfig,
    pub demos: usize,
    pub demo_seed: u64,
    pub eval_episodes: usize,
    pub eval_seed: u64,
    pub rollout: RolloutConfig,
    pub exec: Exec,
}

impl ExperimentConfig {
    pub fn policy_for(&self, kind: &EnvKind) -> PolicyConfig {
        let spec = kind.spec();
        PolicyConfig {
            obs_dim: spec.obs_dim,
            action_dim: spec.action_dim,
            ..self.policy.clone()
        }
    }

    pub fn to_record(&self) -> KvRecord {
        let mut r = KvRecord::new();
        for (k, v) in self.policy.to_record().iter() {
            r.set(&format!("policy.{k}"), v);
        }
        for (k, v) in self.train.to_record().iter() {
            r.set(&format!("train.{k}"), v);
        }
        r.set("demos", self.demos);
        r.set("demo_seed", self.demo_seed);
        r.set("eval_episodes", self.eval_episodes);
        r.set("eval_seed", self.eval_seed);
        r.set("aggregate", self.rollout.aggregation.enabled);
        r.set("gamma", self.rollout.aggregation.gamma);
        r.set("gmm_sampling", self.rollout.gmm_sampling);
        r
    }
}

/// History regimes compared by the ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regime {
    Full,
    Reset(u32),
    MarkovMlp,
}

impl Regime {
    pub fn name(&self) -> String {
        match self {
            Regime::Full => "full".into(),
            Regime::Reset(r) => format!("reset-{r}"),
            Regime::MarkovMlp => "markov-mlp".into(),
        }
    }

    pub fn standard() -> Vec<Regime> {
        vec![Regime::Full, Regime::Reset(10), Regime::MarkovMlp]
    }

    /// Policy and training settings for this regime.
    pub fn configure(&self, policy: &PolicyConfig, train: &TrainConfig) -> (PolicyConfig, TrainConfig) {
        let (mut p, mut t) = (policy.clone(), train.clone());
        match self {
            Regime::Full => t.history_reset_interval = None,
            Regime::Reset(r) => t.history_reset_interval = Some(*r),
            Regime::MarkovMlp => {
                p = p.markov_mlp();
                t.history_reset_interval = Some(1);
            }
        }
        p.history_reset = t.history_reset_interval;
        (p, t)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MethodResult {
    pub method: String,
    pub env: String,
    pub rate: RateEstimate,
    pub final_loss: f64,
}

/// Trains one policy per regime on the same demos and evaluates each on the
/// same seeded episodes.
pub fn run_ablation(kind: &EnvKind, regimes: &[Regime], cfg: &ExperimentConfig) -> Result<Vec<MethodResult>> {
    let demos = generate_demos(kind, cfg.demos, cfg.demo_seed, cfg.exec)?;
    regimes
        .iter()
        .map(|regime| {
            let (pc, tc) = regime.configure(&cfg.policy_for(kind), &cfg.train);
            let mut policy = Policy::new(pc, tc.seed)?;
            let log = fit(&mut policy, &demos, &tc, &[])?;
            let rate = policy_success_rate(&policy, kind, &cfg.rollout, cfg.eval_episodes, cfg.eval_seed, cfg.exec)?;
            log::info!("{} on {}: {:.3}", regime.name(), kind, rate.rate);
            Ok(MethodResult {
                method: regime.name(),
                env: kind.id(),
                rate,
                final_loss: log.final_loss().unwrap_or(f64::NAN),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LifelongConfig {
    pub experiment: ExperimentConfig,
    /// Training epochs for the per-task baselines; 0 evaluates untrained
    /// policies.
    pub baseline_epochs: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LifelongResult {
    pub matrix: AccuracyMatrix,
    pub fwt: f64,
    pub nbt: f64,
    pub auc: f64,
}

/// Trains one policy through `tasks` in order, evaluating every task after
/// each stage. With EWC configured, a Fisher penalty is added after each
/// task and kept for all later ones.
pub fn run_lifelong(tasks: &[EnvKind], cfg: &LifelongConfig) -> Result<LifelongResult> {
    if tasks.len() < 2 {
        return Err(Error::Invalid("lifelong run needs at least two tasks".into()));
    }
    let ex = &cfg.experiment;
    let pc = ex.policy_for(&tasks[0]);
    if tasks.iter().any(|t| ex.policy_for(t) != pc) {
        return Err(Error::Config("lifelong tasks must share observation and action dims".into()));
    }
    let demos: Vec<Dataset> = tasks
        .iter()
        .enumerate()
        .map(|(i, t)| generate_demos(t, ex.demos, ex.demo_seed + 1_000_000 * i as u64, ex.exec))
        .collect::<Result<_>>()?;
    let eval_row = |policy: &Policy| -> Result<Vec<f64>> {
        tasks
            .iter()
            .map(|t| Ok(policy_success_rate(policy, t, &ex.rollout, ex.eval_episodes, ex.eval_seed, ex.exec)?.rate))
            .collect()
    };

    let mut policy = Policy::new(pc.clone(), ex.train.seed)?;
    let mut penalties: Vec<FisherInfo> = Vec::new();
    let mut a = Vec::with_capacity(tasks.len());
    for (i, d) in demos.iter().enumerate() {
        fit(&mut policy, d, &ex.train, &penalties)?;
        a.push(eval_row(&policy)?);
        log::info!("lifelong stage {}: {:?}", i + 1, a[i]);
        if let Some(e) = &ex.train.ewc {
            if i + 1 < tasks.len() {
                penalties.push(fisher_estimate(&policy, d, e.fisher_samples, &ex.train, e.fisher)?);
            }
        }
    }

    let mut base = Vec::with_capacity(tasks.len());
    for (j, t) in tasks.iter().enumerate() {
        let mut scratch = Policy::new(pc.clone(), ex.train.seed)?;
        if cfg.baseline_epochs > 0 {
            let tc = TrainConfig {
                epochs: cfg.baseline_epochs,
                ewc: None,
                ..ex.train.clone()
            };
            fit(&mut scratch, &demos[j], &tc, &[])?;
        }
        base.push(policy_success_rate(&scratch, t, &ex.rollout, ex.eval_episodes, ex.eval_seed, ex.exec)?.rate);
    }

    let matrix = AccuracyMatrix::new(a, base)?;
    Ok(LifelongResult {
        fwt: matrix.fwt()?,
        nbt: matrix.nbt()?,
        auc: matrix.auc(),
        matrix,
    })
}

/// First 16 hex digits of the SHA-256 of a rendered record.
pub fn fingerprint(record: &KvRecord) -> String {
    let digest = Sha256::digest(record.render().as_bytes());
    digest.iter().take(8).fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RateRow {
    pub method: String,
    pub env: String,
    pub rate: RateEstimate,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub name: String,
    pub value: f64,
}

/// Success rates and scalar metrics, each tied to a config fingerprint.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub fingerprint: String,
    pub rates: Vec<RateRow>,
    pub metrics: Vec<MetricRow>,
}

const REPORT_HEADER: [&str; 10] = [
    "kind", "name", "env", "episodes", "successes", "value", "ci_lo", "ci_hi", "seed", "fingerprint",
];

impl Report {
    pub fn new(fingerprint: String) -> Self {
        Report {
            fingerprint,
            ..Default::default()
        }
    }

    pub fn add_rate(&mut self, method: &str, env: &str, rate: RateEstimate, seed: u64) {
        self.rates.push(RateRow {
            method: method.into(),
            env: env.into(),
            rate,
            seed,
        });
    }

    pub fn add_metric(&mut self, name: &str, value: f64) {
        self.metrics.push(MetricRow {
            name: name.into(),
            value,
        });
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(REPORT_HEADER)?;
        for r in &self.rates {
            w.write_record([
                "rate".to_string(),
                r.method.clone(),
                r.env.clone(),
                r.rate.episodes.to_string(),
                r.rate.successes.to_string(),
                r.rate.rate.to_string(),
                r.rate.lo.to_string(),
                r.rate.hi.to_string(),
                r.seed.to_string(),
                self.fingerprint.clone(),
            ])?;
        }
        for m in &self.metrics {
            w.write_record([
                "metric",
                &m.name,
                "",
                "",
                "",
                &m.value.to_string(),
                "",
                "",
                "",
                &self.fingerprint,
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(text.as_bytes());
        if rd.headers()?.iter().ne(REPORT_HEADER) {
            return Err(Error::Format("unexpected report header".into()));
        }
        let mut rep = Report::default();
        let num = |s: &str| -> Result<f64> { s.parse().map_err(|_| Error::Format(format!("bad number '{s}'"))) };
        let int = |s: &str| -> Result<u64> { s.parse().map_err(|_| Error::Format(format!("bad integer '{s}'"))) };
        for rec in rd.records() {
            let rec = rec?;
            let f = |i: usize| rec.get(i).unwrap_or("");
            rep.fingerprint = f(9).to_string();
            match f(0) {
                "rate" => rep.rates.push(RateRow {
                    method: f(1).into(),
                    env: f(2).into(),
                    rate: RateEstimate {
                        episodes: int(f(3))? as usize,
                        successes: int(f(4))? as usize,
                        rate: num(f(5))?,
                        lo: num(f(6))?,
                        hi: num(f(7))?,
                    },
                    seed: int(f(8))?,
                }),
                "metric" => rep.metrics.push(MetricRow {
                    name: f(1).into(),
                    value: num(f(5))?,
                }),
                k => return Err(Error::Format(format!("unknown report row kind '{k}'"))),
            }
        }
        Ok(rep)
    }

    /// Aligned plain-text rendering.
    pub fn to_table(&self) -> String {
        let mut rows = vec![vec![
            "method".to_string(),
            "env".into(),
            "success".into(),
            "95% CI".into(),
            "n".into(),
            "seed".into(),
        ]];
        for r in &self.rates {
            rows.push(vec![
                r.method.clone(),
                r.env.clone(),
                format!("{:.3}", r.rate.rate),
                format!("[{:.3}, {:.3}]", r.rate.lo, r.rate.hi),
                r.rate.episodes.to_string(),
                r.seed.to_string(),
            ]);
        }
        let mut out = String::new();
        if self.rates.is_empty() {
            rows.clear();
        }
        let widths: Vec<usize> = (0..6)
            .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
            .collect();
        for row in &rows {
            let line: Vec<String> = row.iter().zip(&widths).map(|(v, w)| format!("{v:<w$}")).collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
        }
        if !self.metrics.is_empty() {
            if !out.is_empty() {
                out.push('\n');
            }
            let w = self.metrics.iter().map(|m| m.name.len()).max().unwrap_or(0);
            for m in &self.metrics {
                let _ = writeln!(out, "{:<w$}  {:.4}", m.name, m.value);
            }
        }
        let _ = writeln!(out, "\nconfig {}", self.fingerprint);
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Report::from_csv(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(a: Vec<Vec<f64>>, base: Vec<f64>) -> AccuracyMatrix {
        AccuracyMatrix::new(a, base).unwrap()
    }

    #[test]
    fn fwt_hand_case() {
        let a = m(
            vec![vec![0.9, 0.6, 0.1], vec![0.5, 0.9, 0.8], vec![0.5, 0.5, 0.5]],
            vec![0.3, 0.5, 0.5],
        );
        assert!((a.fwt().unwrap() - 0.2).abs() < 1e-12);
    }

    #[test]
    fn nbt_hand_case() {
        let a = m(
            vec![vec![1.0, 0.0, 0.0], vec![0.0, 0.9, 0.0], vec![0.4, 0.9, 0.7]],
            vec![0.0; 3],
        );
        assert!((a.nbt().unwrap() - 0.3).abs() < 1e-12);
    }

    #[test]
    fn auc_hand_case() {
        let a = m(vec![vec![0.0; 3], vec![0.0; 3], vec![0.2, 0.4, 0.6]], vec![0.0; 3]);
        assert!((a.auc() - 0.4).abs() < 1e-12);
        assert_eq!(m(vec![vec![0.7]], vec![0.1]).auc(), 0.7);
        assert!(m(vec![vec![0.7]], vec![0.1]).fwt().is_err());
    }

    #[test]
    fn wilson_bounds() {
        let (lo, hi) = wilson(0, 10);
        assert_eq!(lo, 0.0);
        assert!((hi - 0.277_532_8).abs() < 1e-6);
        let (lo, hi) = wilson(50, 100);
        assert!((lo - 0.403_831_5).abs() < 1e-6 && (hi - 0.596_168_5).abs() < 1e-6);
    }

    #[test]
    fn single_episode_rate_is_binary() {
        for ok in [true, false] {
            let r = success_rate(1, 3, Exec::Sequential, |_| Ok(ok)).unwrap();
            assert_eq!(r.rate, if ok { 1.0 } else { 0.0 });
        }
        assert!(success_rate(0, 3, Exec::Sequential, |_| Ok(true)).is_err());
    }

    #[test]
    fn report_csv_round_trip() {
        let mut r = Report::new("00ff".into());
        r.add_rate("full", "cue-recall:L=50:m=+1", RateEstimate::new(97, 100).unwrap(), 10_000);
        r.add_metric("fwt", 0.125);
        let back = Report::from_csv(&r.to_csv().unwrap()).unwrap();
        assert_eq!(back, r);
        assert!(r.to_table().contains("0.970"));
    }

    #[test]
    fn fingerprint_is_stable() {
        let mut a = KvRecord::new();
        a.set("x", 1);
        assert_eq!(fingerprint(&a), fingerprint(&a.clone()));
        let mut b = a.clone();
        b.set("x", 2);
        assert_ne!(fingerprint(&a), fingerprint(&b));
        assert_eq!(fingerprint(&a).len(), 16);
    }
}
