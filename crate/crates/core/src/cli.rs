//! Command-line driver.
//!
//! Settings come from an optional `key=value` file (`--config`) and are
//! overridden by explicit flags.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::KvRecord;
use crate::data::Dataset;
use crate::envs::{generate_demos, EnvKind};
use crate::error::{Error, Result};
use crate::eval::{
    fingerprint, policy_success_rate, run_ablation, run_lifelong, ExperimentConfig, LifelongConfig, Regime,
    Report,
};
use crate::infer::{rollout_env, AggregationConfig, RolloutConfig};
use crate::parallel::{map_indices, Exec};
use crate::policy::{load_checkpoint, save_checkpoint, Backbone, Checkpoint, HeadKind, Policy, PolicyConfig};
use crate::train::{fit, EwcConfig, LossKind, TrainConfig, TRAIN_KEYS};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;

const SETTING_KEYS: &[&str] = &[
    "preset",
    "head",
    "backbone",
    "d_model",
    "d_state",
    "n_layers",
    "expand",
    "dt_rank",
    "demos",
    "demo_seed",
    "eval_episodes",
    "eval_seed",
    "aggregate",
    "gamma",
    "gmm_sampling",
    "baseline_epochs",
];

#[derive(Parser, Debug)]
#[command(name = "mtil", version, about = "Recurrent state-space imitation learning on toy POMDPs")]
pub struct Cli {
    /// Run episodes and demo generation on one thread.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate expert demonstrations.
    GenData {
        #[arg(long)]
        env: String,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also export one CSV per trajectory into this directory.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Train a policy on a demonstration file.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch loss log; defaults to `<out>.log.csv`.
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Evaluate a checkpoint over seeded episodes.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Defaults to the environment recorded in the checkpoint.
        #[arg(long)]
        env: Option<String>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        rollout: RolloutArgs,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Report CSV path.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write the evaluation rollouts as a dataset file.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Compare full history, 10-step resets and a memoryless MLP.
    Ablate {
        #[arg(long)]
        env: String,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        experiment: ExperimentArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sequential training over the cue-recall task family.
    Lifelong {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        experiment: ExperimentArgs,
        #[arg(long)]
        ewc_lambda: Option<f64>,
        #[arg(long, conflicts_with = "ewc_lambda")]
        no_ewc: bool,
        #[arg(long)]
        baseline_epochs: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a report CSV as a table (or re-emit the CSV).
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        csv: bool,
    },
}

#[derive(Args, Debug, Default)]
struct ModelArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// `desk` or `sim`.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long = "K")]
    k: Option<usize>,
    /// `linear` or `gmm[:M]`.
    #[arg(long)]
    head: Option<String>,
    /// `mamba` or `mlp`.
    #[arg(long)]
    backbone: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// `none` or a positive interval.
    #[arg(long)]
    history_reset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Default)]
struct ExperimentArgs {
    #[arg(long)]
    demos: Option<usize>,
    #[arg(long)]
    episodes: Option<usize>,
    #[command(flatten)]
    rollout: RolloutArgs,
}

#[derive(Args, Debug, Default)]
struct RolloutArgs {
    #[arg(long)]
    no_aggregate: bool,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    gmm_sample: bool,
}

fn settings(file: Option<&Path>, overrides: &[(&str, Option<String>)]) -> Result<KvRecord> {
    let mut r = match file {
        Some(p) => KvRecord::load(p).map_err(|e| match e {
            Error::Io(io) => Error::Config(format!("cannot read config {}: {io}", p.display())),
            e => e,
        })?,
        None => KvRecord::new(),
    };
    let known: Vec<&str> = SETTING_KEYS.iter().chain(TRAIN_KEYS).copied().collect();
    r.check_keys(&known)?;
    for (k, v) in overrides {
        if let Some(v) = v {
            r.set(k, v);
        }
    }
    Ok(r)
}

impl ModelArgs {
    fn record(&self, extra: &[(&str, Option<String>)]) -> Result<KvRecord> {
        let mut o = vec![
            ("preset", self.preset.clone()),
            ("K", self.k.map(|v| v.to_string())),
            ("head", self.head.clone()),
            ("backbone", self.backbone.clone()),
            ("epochs", self.epochs.map(|v| v.to_string())),
            ("lr", self.lr.map(|v| v.to_string())),
            ("history_reset", self.history_reset.clone()),
            ("seed", self.seed.map(|v| v.to_string())),
        ];
        o.extend_from_slice(extra);
        settings(self.config.as_deref(), &o)
    }
}

impl RolloutArgs {
    fn overrides(&self) -> Vec<(&'static str, Option<String>)> {
        vec![
            ("aggregate", self.no_aggregate.then(|| "false".to_string())),
            ("gamma", self.gamma.map(|v| v.to_string())),
            ("gmm_sampling", self.gmm_sample.then(|| "true".to_string())),
        ]
    }
}

impl ExperimentArgs {
    fn overrides(&self) -> Vec<(&'static str, Option<String>)> {
        let mut o = vec![
            ("demos", self.demos.map(|v| v.to_string())),
            ("eval_episodes", self.episodes.map(|v| v.to_string())),
        ];
        o.extend(self.rollout.overrides());
        o
    }
}

fn policy_config(r: &KvRecord, obs_dim: usize, action_dim: usize) -> Result<PolicyConfig> {
    let head: HeadKind = r.get_str("head").unwrap_or("linear").parse()?;
    let default_k = if matches!(head, HeadKind::Gmm { .. }) { 1 } else { 8 };
    let k = r.get("K")?.unwrap_or(default_k);
    let preset = r.get_str("preset").unwrap_or("desk");
    let mut c = PolicyConfig::preset(preset, obs_dim, action_dim, k)?;
    c.head = head;
    match r.get_str("backbone") {
        None | Some("mamba") => {}
        Some("mlp") => c = c.markov_mlp(),
        Some(b) => return Err(Error::Config(format!("unknown backbone '{b}'"))),
    }
    c.d_model = r.get("d_model")?.unwrap_or(c.d_model);
    c.d_state = r.get("d_state")?.unwrap_or(c.d_state);
    c.n_layers = r.get("n_layers")?.unwrap_or(c.n_layers);
    c.expand = r.get("expand")?.unwrap_or(c.expand);
    c.dt_rank = r.get("dt_rank")?.unwrap_or(c.dt_rank);
    c.validate()?;
    Ok(c)
}

fn train_config(r: &KvRecord, policy: &PolicyConfig) -> Result<TrainConfig> {
    let mut base = TrainConfig::desk(policy.chunk_k);
    if matches!(policy.head, HeadKind::Gmm { .. }) {
        base.loss = LossKind::GmmNll;
    }
    if let Backbone::Mlp { .. } = policy.backbone {
        base.history_reset_interval = Some(1);
    }
    base.with_record(r)
}

fn rollout_config(r: &KvRecord) -> Result<RolloutConfig> {
    let d = RolloutConfig::default();
    let c = RolloutConfig {
        aggregation: AggregationConfig {
            enabled: r.get("aggregate")?.unwrap_or(d.aggregation.enabled),
            gamma: r.get("gamma")?.unwrap_or(d.aggregation.gamma),
        },
        max_steps: None,
        gmm_sampling: r.get("gmm_sampling")?.unwrap_or(d.gmm_sampling),
    };
    c.aggregation.validate()?;
    Ok(c)
}

fn experiment_config(r: &KvRecord, kind: &EnvKind, exec: Exec) -> Result<ExperimentConfig> {
    let spec = kind.spec();
    let policy = policy_config(r, spec.obs_dim, spec.action_dim)?;
    let mut train = train_config(r, &policy)?;
    train.exec = exec;
    Ok(ExperimentConfig {
        train,
        policy,
        demos: r.get("demos")?.unwrap_or(100),
        demo_seed: r.get("demo_seed")?.unwrap_or(0),
        eval_episodes: r.get("eval_episodes")?.unwrap_or(100),
        eval_seed: r.get("eval_seed")?.unwrap_or(10_000),
        rollout: rollout_config(r)?,
        exec,
    })
}

fn print_report(report: &Report, out: Option<&Path>) -> Result<()> {
    print!("{}", report.to_table());
    if let Some(p) = out {
        report.write(p)?;
    }
    Ok(())
}

fn run_command(cli: Cli) -> Result<()> {
    let exec = if cli.sequential { Exec::Sequential } else { Exec::Parallel };
    match cli.command {
        Command::GenData { env, n, seed, out, csv } => {
            let kind: EnvKind = env.parse()?;
            let ds = generate_demos(&kind, n, seed, exec)?;
            ds.write(&out)?;
            if let Some(dir) = csv {
                ds.export_csv(&dir)?;
            }
            println!("wrote {} trajectories ({} steps) to {}", ds.len(), ds.total_steps(), out.display());
        }
        Command::Train { data, out, log, model } => {
            let ds = Dataset::read(&data)?;
            let r = model.record(&[])?;
            let pc = policy_config(&r, ds.obs_dim, ds.action_dim)?;
            let mut tc = train_config(&r, &pc)?;
            tc.exec = exec;
            let mut policy = Policy::new(pc, tc.seed)?;
            let train_log = fit(&mut policy, &ds, &tc, &[])?;
            let mut ck = Checkpoint::new(policy);
            if let Some(t) = ds.trajectories.first() {
                ck.meta.set("env", &t.meta.task);
            }
            for (k, v) in tc.to_record().iter() {
                ck.meta.set(&format!("train.{k}"), v);
            }
            save_checkpoint(&out, &ck)?;
            let log_path = log.unwrap_or_else(|| {
                let mut p = out.clone().into_os_string();
                p.push(".log.csv");
                PathBuf::from(p)
            });
            train_log.write_csv(&log_path)?;
            println!(
                "trained {} epochs, final loss {:.6}; checkpoint {}",
                tc.epochs,
                train_log.final_loss().unwrap_or(f64::NAN),
                out.display()
            );
        }
        Command::Eval { ckpt, env, episodes, seed, rollout, config, out, dump } => {
            let ck = load_checkpoint(&ckpt)?;
            let env = env
                .or_else(|| ck.meta.get_str("env").map(str::to_string))
                .ok_or_else(|| Error::Config("no --env given and none recorded in the checkpoint".into()))?;
            let kind: EnvKind = env.parse()?;
            let mut o = rollout.overrides();
            o.push(("eval_episodes", episodes.map(|v| v.to_string())));
            o.push(("eval_seed", seed.map(|v| v.to_string())));
            let r = settings(config.as_deref(), &o)?;
            let rc = rollout_config(&r)?;
            let n = r.get("eval_episodes")?.unwrap_or(100);
            let base_seed = r.get("eval_seed")?.unwrap_or(10_000);
            let rate = policy_success_rate(&ck.policy, &kind, &rc, n, base_seed, exec)?;
            let mut fp = ck.policy.config().to_record();
            for (k, v) in ck.meta.iter().chain(r.iter()) {
                fp.set(k, v);
            }
            fp.set("env", kind.id());
            let mut report = Report::new(fingerprint(&fp));
            report.add_rate("policy", &kind.id(), rate, base_seed);
            print_report(&report, out.as_deref())?;
            if let Some(p) = dump {
                let trajs = map_indices(exec, n, |i| {
                    rollout_env(&ck.policy, &kind, &rc, base_seed + i as u64).map(|r| r.trajectory)
                })
                .into_iter()
                .collect::<Result<Vec<_>>>()?;
                let spec = kind.spec();
                Dataset::new(spec.obs_dim, spec.action_dim, trajs)?.write(&p)?;
            }
        }
        Command::Ablate { env, model, experiment, out } => {
            let kind: EnvKind = env.parse()?;
            let r = model.record(&experiment.overrides())?;
            let cfg = experiment_config(&r, &kind, exec)?;
            let results = run_ablation(&kind, &Regime::standard(), &cfg)?;
            let mut report = Report::new(fingerprint(&cfg.to_record()));
            for m in &results {
                report.add_rate(&m.method, &m.env, m.rate, cfg.eval_seed);
            }
            print_report(&report, out.as_deref())?;
        }
        Command::Lifelong { model, experiment, ewc_lambda, no_ewc, baseline_epochs, out } => {
            let tasks = EnvKind::cue_family();
            let mut o = experiment.overrides();
            o.push(("baseline_epochs", baseline_epochs.map(|v| v.to_string())));
            o.push(("ewc_lambda", ewc_lambda.map(|v| v.to_string())));
            let r = model.record(&o)?;
            let mut ex = experiment_config(&r, &tasks[0], exec)?;
            if no_ewc {
                ex.train.ewc = None;
            } else if ex.train.ewc.is_none() {
                ex.train.ewc = Some(EwcConfig::default());
            }
            let cfg = LifelongConfig {
                baseline_epochs: r.get("baseline_epochs")?.unwrap_or(0),
                experiment: ex,
            };
            let res = run_lifelong(&tasks, &cfg)?;
            let mut fp = cfg.experiment.to_record();
            fp.set("baseline_epochs", cfg.baseline_epochs);
            let mut report = Report::new(fingerprint(&fp));
            for (i, row) in res.matrix.a.iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    report.add_metric(&format!("A[{}][{}]", i + 1, j + 1), *v);
                }
            }
            for (j, v) in res.matrix.base.iter().enumerate() {
                report.add_metric(&format!("A_base[{}]", j + 1), *v);
            }
            report.add_metric("fwt", res.fwt);
            report.add_metric("nbt", res.nbt);
            report.add_metric("auc", res.auc);
            print_report(&report, out.as_deref())?;
        }
        Command::Report { input, csv } => {
            let report = Report::read(&input)?;
            if csv {
                print!("{}", report.to_csv()?);
            } else {
                print!("{}", report.to_table());
            }
        }
    }
    Ok(())
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        _ => EXIT_FAILURE,
    }
}

/// Parses `argv` and runs the command; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run_command(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_flag_is_usage_error() {
        assert_eq!(run(["mtil", "gen-data", "--bogus"]), EXIT_USAGE);
        assert_eq!(run(["mtil"]), EXIT_USAGE);
    }

    #[test]
    fn bad_config_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("bad.cfg");
        std::fs::write(&cfg, "epochs = many\n").unwrap();
        let out = dir.path().join("d.mtilds");
        let data = out.to_str().unwrap();
        assert_eq!(run(["mtil", "gen-data", "--env", "cue-recall:L=3", "--n", "4", "--out", data]), EXIT_OK);
        let ck = dir.path().join("ck").to_str().unwrap().to_string();
        let args = ["mtil", "train", "--data", data, "--out", &ck, "--config", cfg.to_str().unwrap()];
        assert_eq!(run(args), EXIT_CONFIG);
        std::fs::write(&cfg, "mystery = 1\n").unwrap();
        assert_eq!(run(args), EXIT_CONFIG);
        assert_eq!(run(["mtil", "gen-data", "--env", "maze", "--out", data]), EXIT_CONFIG);
    }

    #[test]
    fn missing_input_is_failure() {
        assert_eq!(run(["mtil", "report", "--input", "/nonexistent/report.csv"]), EXIT_FAILURE);
    }

    #[test]
    fn settings_layering() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("a.cfg");
        std::fs::write(&cfg, "# desk run\nepochs = 5\nlr = 0.01\n").unwrap();
        let r = settings(Some(&cfg), &[("lr", Some("0.02".into())), ("K", None)]).unwrap();
        let pc = policy_config(&r, 2, 2).unwrap();
        let tc = train_config(&r, &pc).unwrap();
        assert_eq!((tc.epochs, tc.lr0, tc.chunk_k), (5, 0.02, 8));
    }
}
