//! Server side of the federation: configuration, round orchestration,
//! aggregation and the convergence diagnostic.
//!
//! Each round the server broadcasts `R_g`, every client runs its local round
//! (in parallel, one thread per client at most) and uploads
//! `to_global(Φ∘R, Ω)`; the server replaces `R_g` with the unweighted mean of
//! the uploads, summed in ascending client order.

pub mod wire;

use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::{init_relation, SharedStack};
use crate::error::{Error, Result};
use crate::objectives::Hyperparameters;
use crate::seed::derive_seed;
use crate::taskgen::{build_toy_model, gen_task, ArchSpec, SyntheticTaskSpec};
use crate::trainer::{ClientRoundStats, ClientState, TrainingMode, DEFAULT_BATCH_SIZE};
use crate::trilora::ResourceDescriptor;

const MODEL_TAG: u64 = 1;
const ROUND_TAG: u64 = 3;
const SHARED_TASK_TAG: u64 = 5;
const PRIVATE_TASK_TAG: u64 = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientConfig {
    pub arch: ArchSpec,
    pub task: SyntheticTaskSpec,
    pub resource: ResourceDescriptor,
    pub hyper: Hyperparameters,
}

/// How uploads and broadcasts travel between clients and server.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Transport {
    #[default]
    #[serde(rename = "inproc")]
    InProcess,
    /// Every broadcast and upload is written to and read back from
    /// `<dir>/round_<t>/{global,client_<k>}.r2g`.
    #[serde(rename = "files")]
    FileExchange(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    /// Global rank `r_g` shared by every adapter.
    pub rank: usize,
    pub rounds: usize,
    /// Local epochs `τ` per round.
    pub epochs: usize,
    pub seed: u64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub transport: Transport,
    /// Enables the proximal variant of the last share step in each round.
    #[serde(default)]
    pub proximal_inner_steps: Option<usize>,
    pub clients: Vec<ClientConfig>,
}

fn default_batch_size() -> usize {
    DEFAULT_BATCH_SIZE
}

impl FederationConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: FederationConfig = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn global_depth(&self) -> usize {
        self.clients
            .iter()
            .map(|c| c.arch.depth())
            .max()
            .unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.clients.is_empty() {
            return Err(Error::Config(
                "a federation needs at least one client".into(),
            ));
        }
        if self.epochs == 0 {
            return Err(Error::Config("local epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if self.proximal_inner_steps == Some(0) {
            return Err(Error::Config("proximal inner steps must be >= 1".into()));
        }
        for (k, c) in self.clients.iter().enumerate() {
            let ctx = |e: Error| Error::Config(format!("client {k}: {e}"));
            c.arch.validate().map_err(ctx)?;
            c.task.validate().map_err(ctx)?;
            c.resource.validate().map_err(ctx)?;
            c.hyper.validate().map_err(ctx)?;
            if c.task.input_dim != c.arch.input_dim() || c.task.num_classes != c.arch.num_classes {
                return Err(Error::Config(format!(
                    "client {k}: task is {}->{} but the model is {}->{}",
                    c.task.input_dim,
                    c.task.num_classes,
                    c.arch.input_dim(),
                    c.arch.num_classes
                )));
            }
            if self.rank == 0 || self.rank > c.arch.min_dim() {
                return Err(Error::Config(format!(
                    "client {k}: global rank {} exceeds its smallest layer dimension {}",
                    self.rank,
                    c.arch.min_dim()
                )));
            }
        }
        Ok(())
    }
}

/// Experiment arms: the full method and its ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Arm {
    #[serde(rename = "H2TUNE")]
    H2Tune,
    /// No communication and no matrix-KL pull.
    #[serde(rename = "LOCAL")]
    Local,
    /// All parameters trained jointly on one loss.
    #[serde(rename = "NO_DISENTANGLE")]
    NoDisentangle,
    /// Dense shared matrices on every client.
    #[serde(rename = "NO_MASK")]
    NoMask,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::H2Tune, Arm::Local, Arm::NoDisentangle, Arm::NoMask];

    pub fn name(self) -> &'static str {
        match self {
            Arm::H2Tune => "H2TUNE",
            Arm::Local => "LOCAL",
            Arm::NoDisentangle => "NO_DISENTANGLE",
            Arm::NoMask => "NO_MASK",
        }
    }

    pub fn communicates(self) -> bool {
        self != Arm::Local
    }

    pub fn training_mode(self) -> TrainingMode {
        match self {
            Arm::NoDisentangle => TrainingMode::Joint,
            _ => TrainingMode::Alternating,
        }
    }

    /// The configuration this arm actually trains with.
    pub fn adjust(self, config: &FederationConfig) -> FederationConfig {
        let mut config = config.clone();
        for c in &mut config.clients {
            match self {
                Arm::Local => c.hyper.kl_weight = 0.0,
                Arm::NoMask => c.resource.sparsity_ratio = 1.0,
                Arm::H2Tune | Arm::NoDisentangle => {}
            }
        }
        config
    }
}

impl std::fmt::Display for Arm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arm::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown arm {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClientMetrics {
    pub client: usize,
    pub share_loss: f64,
    pub specific_loss: f64,
    pub eval_accuracy: f64,
    pub gg_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub clients: Vec<ClientMetrics>,
    /// Mean over clients of the squared generalized-gradient norm.
    pub gg_sq_mean: f64,
    pub wall_time_secs: f64,
}

/// Elementwise mean of the uploads, summed in ascending client order.
pub fn aggregate(uploads: &[SharedStack]) -> Result<SharedStack> {
    let Some(first) = uploads.first() else {
        return Err(Error::Config("cannot aggregate zero uploads".into()));
    };
    let mut sum = SharedStack::zeros(first.depth(), first.rank());
    for (k, upload) in uploads.iter().enumerate() {
        if !upload.same_shape(first) {
            return Err(Error::Protocol {
                client: k,
                reason: format!(
                    "upload is {}x{r}x{r}, expected {}x{}x{}",
                    upload.depth(),
                    first.depth(),
                    first.rank(),
                    first.rank(),
                    r = upload.rank()
                ),
            });
        }
        for (acc, layer) in sum.layers_mut().iter_mut().zip(upload.layers()) {
            *acc += layer;
        }
    }
    let k = uploads.len() as f64;
    for layer in sum.layers_mut() {
        layer.mapv_inplace(|v| v / k);
    }
    Ok(sum)
}

/// `‖R_before − R_after‖_F / η′`.
pub fn generalized_gradient(
    before: &SharedStack,
    after: &SharedStack,
    lr_share: f64,
) -> Result<f64> {
    before.check_same_shape(after, "generalized gradient")?;
    if !lr_share.is_finite() || lr_share <= 0.0 {
        return Err(Error::Config(format!("lr_share {lr_share} must be > 0")));
    }
    let mut diff = before.clone();
    diff.scaled_add(-1.0, after);
    Ok(diff.frobenius_norm() / lr_share)
}

/// Hooks around each phase of a client's local round, for instrumentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhaseHook {
    BeforeShare,
    AfterShare,
    BeforeSpecific,
    AfterSpecific,
}

/// A running federation. Use [`run_federation`] for the whole loop, or
/// [`Federation::step_round`] to drive it round by round.
#[derive(Debug)]
pub struct Federation {
    config: FederationConfig,
    arm: Arm,
    clients: Vec<ClientState>,
    global: SharedStack,
    history: Vec<RoundRecord>,
    initial_accuracy: Vec<f64>,
}

impl Federation {
    pub fn new(config: &FederationConfig, arm: Arm) -> Result<Self> {
        config.validate()?;
        let config = arm.adjust(config);
        let global_depth = config.global_depth();
        let clients = config
            .clients
            .iter()
            .enumerate()
            .map(|(k, c)| build_client(&config, k, c, arm))
            .collect::<Result<Vec<_>>>()?;
        let initial_accuracy = clients
            .iter()
            .map(|c| c.model.accuracy(&c.data.test))
            .collect();
        Ok(Federation {
            global: SharedStack::zeros(global_depth, config.rank),
            config,
            arm,
            clients,
            history: Vec::new(),
            initial_accuracy,
        })
    }

    pub fn config(&self) -> &FederationConfig {
        &self.config
    }

    pub fn arm(&self) -> Arm {
        self.arm
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn global(&self) -> &SharedStack {
        &self.global
    }

    pub fn history(&self) -> &[RoundRecord] {
        &self.history
    }

    /// Test accuracy of every client before any training.
    pub fn initial_accuracy(&self) -> &[f64] {
        &self.initial_accuracy
    }

    fn round_seed(&self, round: usize, client: usize) -> u64 {
        derive_seed(&[self.config.seed, ROUND_TAG, round as u64, client as u64])
    }

    fn round_dir(&self, round: usize) -> Option<PathBuf> {
        match &self.config.transport {
            Transport::InProcess => None,
            Transport::FileExchange(dir) => Some(dir.join(format!("round_{round}"))),
        }
    }

    fn broadcast(&self, round: usize) -> Result<SharedStack> {
        match self.round_dir(round) {
            None => Ok(self.global.clone()),
            Some(dir) => {
                let path = dir.join("global.r2g");
                wire::write_stack_file(&path, &self.global)?;
                wire::read_stack_file(&path)
            }
        }
    }

    fn collect_uploads(&self, round: usize, uploads: Vec<SharedStack>) -> Result<Vec<SharedStack>> {
        let Some(dir) = self.round_dir(round) else {
            return Ok(uploads);
        };
        for (k, upload) in uploads.iter().enumerate() {
            wire::write_stack_file(&client_upload_path(&dir, k), upload)?;
        }
        (0..uploads.len())
            .map(|k| {
                wire::read_stack_file(&client_upload_path(&dir, k)).map_err(|e| Error::Protocol {
                    client: k,
                    reason: e.to_string(),
                })
            })
            .collect()
    }

    /// Runs one synchronous round with all clients in parallel.
    pub fn step_round(&mut self) -> Result<&RoundRecord> {
        let round = self.history.len();
        let started = Instant::now();
        let received = self.broadcast(round)?;
        let epochs = self.config.epochs;
        let seeds: Vec<u64> = (0..self.clients.len())
            .map(|k| self.round_seed(round, k))
            .collect();
        let results: Vec<Result<(SharedStack, ClientRoundStats)>> = self
            .clients
            .par_iter_mut()
            .zip(seeds)
            .map(|(client, seed)| client.local_round(&received, epochs, seed))
            .collect();
        self.finish_round(round, started, results)
    }

    /// Runs one round sequentially, calling `observe(client, hook, state)`
    /// around every phase of every client. Produces the same results as
    /// [`Federation::step_round`].
    pub fn step_round_observed(
        &mut self,
        mut observe: impl FnMut(usize, PhaseHook, &ClientState),
    ) -> Result<&RoundRecord> {
        let round = self.history.len();
        let started = Instant::now();
        let received = self.broadcast(round)?;
        let epochs = self.config.epochs;
        let mut results = Vec::with_capacity(self.clients.len());
        for k in 0..self.clients.len() {
            let seed = self.round_seed(round, k);
            let client = &mut self.clients[k];
            results.push(client.local_round_observed(
                &received,
                epochs,
                seed,
                &mut |hook, state| observe(k, hook, state),
            ));
        }
        self.finish_round(round, started, results)
    }

    fn finish_round(
        &mut self,
        round: usize,
        started: Instant,
        results: Vec<Result<(SharedStack, ClientRoundStats)>>,
    ) -> Result<&RoundRecord> {
        let mut uploads = Vec::with_capacity(results.len());
        let mut stats = Vec::with_capacity(results.len());
        for (k, result) in results.into_iter().enumerate() {
            let (upload, s) = result.map_err(|e| Error::Client {
                round,
                client: k,
                source: Box::new(e),
            })?;
            uploads.push(upload);
            stats.push(s);
        }
        let uploads = self.collect_uploads(round, uploads)?;
        if self.arm.communicates() {
            self.global = aggregate(&uploads)?;
        }
        let clients: Vec<ClientMetrics> = self
            .clients
            .iter()
            .zip(&stats)
            .map(|(c, s)| ClientMetrics {
                client: c.id,
                share_loss: s.share_loss,
                specific_loss: s.specific_loss,
                eval_accuracy: c.model.accuracy(&c.data.test),
                gg_norm: s.gg_norm,
            })
            .collect();
        let gg_sq_mean =
            clients.iter().map(|c| c.gg_norm * c.gg_norm).sum::<f64>() / clients.len() as f64;
        self.history.push(RoundRecord {
            round,
            clients,
            gg_sq_mean,
            wall_time_secs: started.elapsed().as_secs_f64(),
        });
        Ok(self.history.last().expect("just pushed"))
    }

    pub fn into_outcome(self) -> FederationOutcome {
        FederationOutcome {
            arm: self.arm,
            history: self.history,
            global: self.global,
            clients: self.clients,
            initial_accuracy: self.initial_accuracy,
        }
    }
}

fn client_upload_path(dir: &Path, client: usize) -> PathBuf {
    dir.join(format!("client_{client}.r2g"))
}

fn build_client(
    config: &FederationConfig,
    k: usize,
    c: &ClientConfig,
    arm: Arm,
) -> Result<ClientState> {
    let seed = config.seed;
    let model = build_toy_model(
        &c.arch,
        config.rank,
        c.resource.sparsity_ratio,
        derive_seed(&[seed, MODEL_TAG, k as u64]),
    )?;
    let task = SyntheticTaskSpec {
        shared_seed: derive_seed(&[seed, SHARED_TASK_TAG, c.task.shared_seed]),
        private_seed: derive_seed(&[seed, PRIVATE_TASK_TAG, c.task.private_seed]),
        ..c.task.clone()
    };
    let data = Arc::new(gen_task(&task)?);
    let relation = init_relation(c.arch.depth(), config.global_depth())?;
    let mut state = ClientState::new(k, model, relation, c.resource, c.hyper, data)?;
    state.batch_size = config.batch_size;
    state.mode = arm.training_mode();
    state.proximal_inner_steps = config.proximal_inner_steps;
    Ok(state)
}

/// Everything a finished federation leaves behind.
#[derive(Debug)]
pub struct FederationOutcome {
    pub arm: Arm,
    pub history: Vec<RoundRecord>,
    pub global: SharedStack,
    pub clients: Vec<ClientState>,
    pub initial_accuracy: Vec<f64>,
}

impl FederationOutcome {
    /// Final test accuracy per client (untrained accuracy when no rounds ran).
    pub fn final_accuracy(&self) -> Vec<f64> {
        match self.history.last() {
            Some(r) => r.clients.iter().map(|c| c.eval_accuracy).collect(),
            None => self.initial_accuracy.clone(),
        }
    }

    pub fn mean_final_accuracy(&self) -> f64 {
        let acc = self.final_accuracy();
        acc.iter().sum::<f64>() / acc.len() as f64
    }
}

/// Runs `config.rounds` rounds of the given arm from a zero global stack.
pub fn run_federation(config: &FederationConfig, arm: Arm) -> Result<FederationOutcome> {
    let mut federation = Federation::new(config, arm)?;
    for _ in 0..federation.config.rounds {
        federation.step_round()?;
    }
    Ok(federation.into_outcome())
}
