//! Experiment runner behind the `h2tune` binary.
//!
//! A run reads a JSON [`FederationConfig`], records a `manifest.json`, trains
//! each requested [`Arm`] and writes per arm:
//!
//! - `metrics.csv`: `t,k,share_loss,specific_loss,eval_acc,gg_norm`, one row
//!   per round per client;
//! - `global_final.r2g`: the final global shared stack in the wire format;
//! - `exchange/`: per-round files when the file transport is used.
//!
//! A single arm writes these into the output directory itself, several arms
//! into one subdirectory each, named after the arm. `summary.json` at the top
//! holds a [`RunSummary`] covering every arm.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha1::{Digest, Sha1};
use thiserror::Error;

use crate::alignment::SharedStack;
use crate::error::Error;
use crate::federation::{wire, Arm, Federation, FederationConfig, RoundRecord, Transport};
use crate::trainer::{Batch, ClientState};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_FILE: &str = "global_final.r2g";
pub const METRICS_HEADER: &str = "t,k,share_loss,specific_loss,eval_acc,gg_norm";

/// Worst relative gradient error tolerated by `--check-grads`.
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("{0}")]
    Usage(String),
    #[error("numeric divergence: {0}")]
    Divergence(Error),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Core(Error),
}

impl ExperimentError {
    /// Process exit code: 2 for unusable input, 3 for divergence, 4 for a
    /// violated invariant, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Usage(_) => 2,
            ExperimentError::Divergence(_) => 3,
            ExperimentError::Invariant(_) => 4,
            ExperimentError::Io(_) | ExperimentError::Core(_) => 1,
        }
    }
}

impl From<Error> for ExperimentError {
    fn from(e: Error) -> Self {
        if e.is_divergence() {
            return ExperimentError::Divergence(e);
        }
        match e {
            Error::Config(_) | Error::Json(_) => ExperimentError::Usage(e.to_string()),
            other => ExperimentError::Core(other),
        }
    }
}

/// Git blob hash (`sha1("blob <len>\0" ++ bytes)`) in lowercase hex.
pub fn config_hash(bytes: &[u8]) -> String {
    let mut hasher = Sha1::new();
    hasher.update(format!("blob {}\0", bytes.len()).as_bytes());
    hasher.update(bytes);
    hasher
        .finalize()
        .iter()
        .fold(String::with_capacity(40), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportKind {
    #[default]
    Inproc,
    Files,
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub config: PathBuf,
    pub rounds: Option<usize>,
    pub seed: Option<u64>,
    pub arms: Vec<Arm>,
    pub out: Option<PathBuf>,
    pub check_grads: bool,
    pub transport: Option<TransportKind>,
}

impl RunOptions {
    pub fn new(config: impl Into<PathBuf>) -> Self {
        RunOptions {
            config: config.into(),
            rounds: None,
            seed: None,
            arms: vec![Arm::H2Tune],
            out: None,
            check_grads: false,
            transport: None,
        }
    }
}

/// What was run, recorded before training starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub config_path: PathBuf,
    pub config_hash: String,
    pub seed: u64,
    pub baselines: Vec<Arm>,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: Arm,
    pub initial_accuracy: Vec<f64>,
    pub final_accuracy: Vec<f64>,
    pub mean_final_accuracy: f64,
    /// Relative to the run's output directory.
    pub metrics: PathBuf,
    pub checkpoint: PathBuf,
    pub runtime_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub manifest: ExperimentManifest,
    pub rounds: usize,
    pub epochs: usize,
    pub arms: Vec<ArmSummary>,
    /// Worst gradient-check error, when `--check-grads` was given.
    pub grad_check: Option<f64>,
    pub runtime_secs: f64,
}

impl RunSummary {
    pub fn read(dir: &Path) -> Result<Self, ExperimentError> {
        let path = dir.join(SUMMARY_FILE);
        let text = fs::read_to_string(&path)
            .map_err(|e| ExperimentError::Usage(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| ExperimentError::Usage(format!("malformed {}: {e}", path.display())))
    }
}

fn default_out_dir(arms: &[Arm], seed: u64, hash: &str) -> PathBuf {
    let names: Vec<_> = arms.iter().map(|a| a.name()).collect();
    PathBuf::from("runs").join(format!("{}-s{seed}-{}", names.join("+"), &hash[..12]))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ExperimentError> {
    let mut json = serde_json::to_string_pretty(value).map_err(Error::from)?;
    json.push('\n');
    fs::write(path, json)?;
    Ok(())
}

fn prepare_out_dir(dir: &Path) -> Result<(), ExperimentError> {
    if dir.exists() && fs::read_dir(dir)?.next().is_some() {
        return Err(ExperimentError::Usage(format!(
            "output directory {} already exists and is not empty",
            dir.display()
        )));
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

/// Loads and hashes the config, applies overrides, then trains every
/// requested arm, checking invariants and writing each arm's outputs.
pub fn run(opts: &RunOptions) -> Result<RunSummary, ExperimentError> {
    let started = Instant::now();
    let mut arms = Vec::new();
    for &arm in &opts.arms {
        if !arms.contains(&arm) {
            arms.push(arm);
        }
    }
    if arms.is_empty() {
        return Err(ExperimentError::Usage("no arm requested".into()));
    }
    let bytes = fs::read(&opts.config).map_err(|e| {
        ExperimentError::Usage(format!("cannot read {}: {e}", opts.config.display()))
    })?;
    let config_hash = config_hash(&bytes);
    let text = String::from_utf8(bytes)
        .map_err(|_| ExperimentError::Usage("config is not UTF-8".into()))?;
    let mut config = FederationConfig::from_json(&text)?;
    if let Some(rounds) = opts.rounds {
        config.rounds = rounds;
    }
    if let Some(seed) = opts.seed {
        config.seed = seed;
    }
    let out_dir = opts
        .out
        .clone()
        .unwrap_or_else(|| default_out_dir(&arms, config.seed, &config_hash));
    prepare_out_dir(&out_dir)?;
    let manifest = ExperimentManifest {
        config_path: opts.config.clone(),
        config_hash,
        seed: config.seed,
        baselines: arms.clone(),
        out_dir: out_dir.clone(),
    };
    write_json(&out_dir.join(MANIFEST_FILE), &manifest)?;

    let mut grad_check = None;
    let mut results = Vec::with_capacity(arms.len());
    for &arm in &arms {
        let arm_started = Instant::now();
        let rel_dir = if arms.len() == 1 {
            PathBuf::new()
        } else {
            PathBuf::from(arm.name())
        };
        let arm_dir = out_dir.join(&rel_dir);
        fs::create_dir_all(&arm_dir)?;
        let mut arm_config = config.clone();
        match opts.transport {
            Some(TransportKind::Files) => {
                arm_config.transport = Transport::FileExchange(arm_dir.join("exchange"))
            }
            Some(TransportKind::Inproc) => arm_config.transport = Transport::InProcess,
            None => {}
        }

        let mut federation = Federation::new(&arm_config, arm)?;
        if opts.check_grads {
            let worst = check_all_gradients(&federation)?;
            if worst > GRAD_CHECK_TOLERANCE {
                return Err(ExperimentError::Invariant(format!(
                    "{arm}: gradient check error {worst:e} exceeds {GRAD_CHECK_TOLERANCE:e}"
                )));
            }
            grad_check = Some(grad_check.map_or(worst, |w: f64| w.max(worst)));
        }
        let masks_before: Vec<_> = federation
            .clients()
            .iter()
            .map(ClientState::masks)
            .collect();
        for _ in 0..arm_config.rounds {
            federation.step_round()?;
        }
        check_invariants(&federation, &masks_before, arm_config.rounds)?;

        let metrics = rel_dir.join(METRICS_FILE);
        let checkpoint = rel_dir.join(CHECKPOINT_FILE);
        fs::write(out_dir.join(&metrics), metrics_csv(federation.history()))?;
        wire::write_stack_file(&out_dir.join(&checkpoint), federation.global())?;
        let outcome = federation.into_outcome();
        results.push(ArmSummary {
            arm,
            initial_accuracy: outcome.initial_accuracy.clone(),
            final_accuracy: outcome.final_accuracy(),
            mean_final_accuracy: outcome.mean_final_accuracy(),
            metrics,
            checkpoint,
            runtime_secs: arm_started.elapsed().as_secs_f64(),
        });
    }

    let summary = RunSummary {
        manifest,
        rounds: config.rounds,
        epochs: config.epochs,
        arms: results,
        grad_check,
        runtime_secs: started.elapsed().as_secs_f64(),
    };
    write_json(&out_dir.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

fn check_all_gradients(federation: &Federation) -> Result<f64, ExperimentError> {
    let global = federation.global();
    let mut worst = 0.0f64;
    for client in federation.clients() {
        let n = client.batch_size.min(client.data.train.len());
        let idx: Vec<usize> = (0..n).collect();
        let batch = Batch::from(client.data.train.select(&idx));
        worst = worst.max(client.check_gradients(global, &batch)?);
    }
    Ok(worst)
}

fn check_invariants(
    federation: &Federation,
    masks_before: &[Vec<crate::trilora::Mask>],
    rounds: usize,
) -> Result<(), ExperimentError> {
    let violation = |msg: String| Err(ExperimentError::Invariant(msg));
    if federation.history().len() != rounds {
        return violation(format!(
            "{} rounds recorded, expected {rounds}",
            federation.history().len()
        ));
    }
    for record in federation.history() {
        for c in &record.clients {
            if !(0.0..=1.0).contains(&c.eval_accuracy) {
                return violation(format!(
                    "round {}, client {}: accuracy {}",
                    record.round, c.client, c.eval_accuracy
                ));
            }
            if !c.gg_norm.is_finite() || c.gg_norm < 0.0 {
                return violation(format!(
                    "round {}, client {}: gg norm {}",
                    record.round, c.client, c.gg_norm
                ));
            }
        }
    }
    for (client, before) in federation.clients().iter().zip(masks_before) {
        if &client.masks() != before {
            return violation(format!(
                "client {}: mask changed during training",
                client.id
            ));
        }
        for (l, layer) in client.model.layers().iter().enumerate() {
            let leaked = layer
                .r()
                .indexed_iter()
                .any(|((i, j), v)| !layer.mask().get(i, j) && v.to_bits() != 0);
            if leaked {
                return violation(format!(
                    "client {}, layer {l}: masked-out entry of R changed",
                    client.id
                ));
            }
        }
    }
    if !federation.global().is_finite() {
        return violation("global stack is not finite".into());
    }
    Ok(())
}

/// Renders the history as CSV using shortest round-trip float formatting.
pub fn metrics_csv(history: &[RoundRecord]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for record in history {
        for c in &record.clients {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                record.round, c.client, c.share_loss, c.specific_loss, c.eval_accuracy, c.gg_norm
            );
        }
    }
    out
}

/// Per-client final-accuracy table with one column per arm of every run
/// directory, plus deltas against the first column. Refuses runs of
/// different configs.
pub fn compare_arms(dirs: &[PathBuf]) -> Result<String, ExperimentError> {
    if dirs.len() < 2 {
        return Err(ExperimentError::Usage(
            "compare needs at least two run directories".into(),
        ));
    }
    let summaries = dirs
        .iter()
        .map(|d| RunSummary::read(d))
        .collect::<Result<Vec<_>, _>>()?;
    let reference = &summaries[0];
    for (dir, s) in dirs.iter().zip(&summaries).skip(1) {
        if s.manifest.config_hash != reference.manifest.config_hash {
            return Err(ExperimentError::Usage(format!(
                "{} was run on config {} but {} on {}",
                dir.display(),
                s.manifest.config_hash,
                dirs[0].display(),
                reference.manifest.config_hash
            )));
        }
    }
    let columns: Vec<&ArmSummary> = summaries.iter().flat_map(|s| &s.arms).collect();
    let clients = columns[0].final_accuracy.len();
    if columns.iter().any(|c| c.final_accuracy.len() != clients) {
        return Err(ExperimentError::Usage(
            "runs disagree on the client count".into(),
        ));
    }
    let labels: Vec<String> = columns
        .iter()
        .enumerate()
        .map(|(i, c)| format!("{}#{i}", c.arm.name()))
        .collect();
    let mut out = String::from("client");
    for l in &labels {
        let _ = write!(out, ",{l}");
    }
    for l in &labels[1..] {
        let _ = write!(out, ",delta_{l}");
    }
    out.push('\n');
    let mut row = |name: String, values: Vec<f64>| {
        out.push_str(&name);
        for v in &values {
            let _ = write!(out, ",{v}");
        }
        for v in &values[1..] {
            let _ = write!(out, ",{}", v - values[0]);
        }
        out.push('\n');
    };
    for k in 0..clients {
        row(
            k.to_string(),
            columns.iter().map(|c| c.final_accuracy[k]).collect(),
        );
    }
    row(
        "mean".into(),
        columns.iter().map(|c| c.mean_final_accuracy).collect(),
    );
    Ok(out)
}

/// Reads back the final global stack of the first arm of a run.
pub fn read_checkpoint(dir: &Path) -> Result<SharedStack, ExperimentError> {
    let summary = RunSummary::read(dir)?;
    let arm = summary
        .arms
        .first()
        .ok_or_else(|| ExperimentError::Usage("summary lists no arms".into()))?;
    Ok(wire::read_stack_file(&dir.join(&arm.checkpoint))?)
}
