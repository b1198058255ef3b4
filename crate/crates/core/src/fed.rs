//! Federated optimization engine.
//!
//! [`run_fedcomloc`] implements local training with control variates and
//! probabilistic communication skipping, with compression hooked in at one of
//! three places:
//!
//! * [`Variant::Com`]: each participant compresses its iterate before upload.
//! * [`Variant::Local`]: gradients are taken at the compressed local iterate,
//!   the iterate itself stays dense.
//! * [`Variant::Global`]: the server compresses the averaged model before
//!   sending it back.
//!
//! With the identity compressor (or [`Variant::None`]) this is Scaffnew.
//! [`run_fedavg`] and [`run_scaffold`] are the classical baselines.
//!
//! All randomness comes from streams derived from `FedConfig::seed`, one per
//! role and client, so runs are bit-for-bit reproducible regardless of how
//! many threads execute the client steps.

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compressors::CompressorSpec;
use crate::data::{Dataset, FederatedDataset};
use crate::error::{Error, Result};
use crate::metrics::{BitLedger, Losses, RunRecord, Summary};
use crate::models::{self, Batch, ModelSpec};
use crate::rng::{client_label, derive_stream, RngStream};
use crate::vector::ParamVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Fedcomloc,
    Fedavg,
    SparseFedavg,
    Scaffold,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Com,
    Local,
    Global,
    None,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Fedcomloc => "fedcomloc",
            Algorithm::Fedavg => "fedavg",
            Algorithm::SparseFedavg => "sparse_fedavg",
            Algorithm::Scaffold => "scaffold",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FedConfig {
    pub algorithm: Algorithm,
    #[serde(default = "default_variant")]
    pub variant: Variant,
    pub n_clients: usize,
    pub sample_size: usize,
    /// Communication probability.
    #[serde(default = "default_p")]
    pub p: f64,
    /// Local stepsize.
    pub gamma: f64,
    /// Total number of local iterations `T`.
    pub iterations: usize,
    #[serde(default)]
    pub compressor: CompressorSpec,
    /// Cost of one local step relative to one communication round.
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default)]
    pub seed: u64,
    /// Minibatch size; `0` means the full local shard in natural order.
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Local steps per round for FedAvg and Scaffold.
    #[serde(default = "default_local_steps")]
    pub local_steps_baseline: usize,
    /// Evaluate every this many communication rounds.
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
}

fn default_variant() -> Variant {
    Variant::Com
}

fn default_p() -> f64 {
    0.1
}

fn default_tau() -> f64 {
    0.01
}

fn default_batch_size() -> usize {
    64
}

fn default_local_steps() -> usize {
    10
}

fn default_eval_every() -> usize {
    1
}

/// A config key that fails its constraint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub key: String,
    pub message: String,
}

impl Violation {
    pub fn new(key: impl Into<String>, message: impl Into<String>) -> Self {
        Violation {
            key: key.into(),
            message: message.into(),
        }
    }
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.key, self.message)
    }
}

impl FedConfig {
    /// Scaffnew-style defaults: full participation, identity compressor.
    pub fn new(algorithm: Algorithm, n_clients: usize, gamma: f64, iterations: usize) -> Self {
        FedConfig {
            algorithm,
            variant: Variant::None,
            n_clients,
            sample_size: n_clients,
            p: default_p(),
            gamma,
            iterations,
            compressor: CompressorSpec::identity(),
            tau: default_tau(),
            seed: 0,
            batch_size: default_batch_size(),
            local_steps_baseline: default_local_steps(),
            eval_every: default_eval_every(),
        }
    }

    pub fn violations(&self) -> Vec<Violation> {
        let mut v = Vec::new();
        if self.n_clients < 1 {
            v.push(Violation::new("fed.n_clients", "must be >= 1"));
        }
        if self.sample_size < 1 {
            v.push(Violation::new("fed.sample_size", "must be >= 1"));
        } else if self.sample_size > self.n_clients {
            v.push(Violation::new(
                "fed.sample_size",
                format!("{} exceeds n_clients = {}", self.sample_size, self.n_clients),
            ));
        }
        if !(self.p > 0.0 && self.p <= 1.0) {
            v.push(Violation::new("fed.p", format!("must lie in (0, 1], got {}", self.p)));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            v.push(Violation::new("fed.gamma", format!("must be positive, got {}", self.gamma)));
        }
        if self.iterations < 1 {
            v.push(Violation::new("fed.iterations", "must be >= 1"));
        }
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            v.push(Violation::new("fed.tau", format!("must be >= 0, got {}", self.tau)));
        }
        if self.local_steps_baseline < 1 {
            v.push(Violation::new("fed.local_steps_baseline", "must be >= 1"));
        }
        if self.eval_every < 1 {
            v.push(Violation::new("fed.eval_every", "must be >= 1"));
        }
        for (field, msg) in self.compressor.violations() {
            v.push(Violation::new(format!("compressor.{field}"), msg));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v.iter().map(ToString::to_string).collect()))
        }
    }

    fn check_against(&self, data: &FederatedDataset, spec: &ModelSpec) -> Result<()> {
        self.validate()?;
        spec.validate()?;
        let mut problems = Vec::new();
        if data.n_clients() != self.n_clients {
            problems.push(format!(
                "fed.n_clients: {} but the dataset is split over {} clients",
                self.n_clients,
                data.n_clients()
            ));
        }
        if spec.n_inputs() != data.train.n_features() {
            problems.push(format!(
                "model: expects {} inputs, data has {} features",
                spec.n_inputs(),
                data.train.n_features()
            ));
        }
        if spec.n_classes() < data.train.n_classes() {
            problems.push(format!(
                "model: {} outputs for {} classes",
                spec.n_classes(),
                data.train.n_classes()
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

/// Per-client optimizer state.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    /// Local iterate.
    pub x: ParamVector,
    /// Control variate (Scaffold's `c_i` for the Scaffold baseline).
    pub h: ParamVector,
    batch_rng: RngStream,
    compress_rng: RngStream,
}

impl ClientState {
    pub fn new(id: usize, x: ParamVector, seed: u64) -> Self {
        let d = x.len();
        ClientState {
            id,
            x,
            h: ParamVector::zeros(d),
            batch_rng: derive_stream(seed, &client_label("batch", id)),
            compress_rng: derive_stream(seed, &client_label("compress", id)),
        }
    }

    pub fn batch_rng(&mut self) -> &mut RngStream {
        &mut self.batch_rng
    }

    pub fn compress_rng(&mut self) -> &mut RngStream {
        &mut self.compress_rng
    }

    fn next_batch(&mut self, shard_len: usize, batch_size: usize) -> Result<Batch> {
        if batch_size == 0 {
            if shard_len == 0 {
                return Err(Error::Data(format!("client {} has an empty shard", self.id)));
            }
            Ok(Batch::full(shard_len))
        } else {
            models::sample_batch(shard_len, batch_size, &mut self.batch_rng)
        }
    }
}

/// Pre-drawn communication coins, `true` meaning "communicate".
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoinSequence(Vec<bool>);

impl CoinSequence {
    pub fn get(&self, t: usize) -> bool {
        self.0[t]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn count_ones(&self) -> usize {
        self.0.iter().filter(|&&c| c).count()
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }
}

/// `T` independent Bernoulli(`p`) coins.
pub fn generate_coins(p: f64, iterations: usize, rng: &mut RngStream) -> Result<CoinSequence> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::Parameter(format!("p must lie in (0, 1], got {p}")));
    }
    Ok(CoinSequence((0..iterations).map(|_| rng.uniform() < p).collect()))
}

/// One control-variate-corrected local step, `x - gamma * (g - h)`.
///
/// For [`Variant::Local`] the gradient is evaluated at the compressed iterate,
/// drawing from the client's compression stream; `client.x` is not modified.
pub fn local_step(
    client: &mut ClientState,
    gamma: f64,
    spec: &ModelSpec,
    shard: &Dataset,
    batch: &Batch,
    compressor: &CompressorSpec,
    variant: Variant,
) -> Result<ParamVector> {
    let g = if variant == Variant::Local && !compressor.is_identity() {
        let point = compressor.apply(&client.x, &mut client.compress_rng)?;
        models::gradient(spec, &point, shard, batch)?
    } else {
        models::gradient(spec, &client.x, shard, batch)?
    };
    let mut x_hat = client.x.clone();
    x_hat.axpy_in_place(-gamma, &g)?;
    x_hat.axpy_in_place(gamma, &client.h)?;
    Ok(x_hat)
}

/// One participant's contribution to an aggregation round.
pub struct Upload<'a> {
    pub x_hat: &'a mut ParamVector,
    /// The participant's compression stream, used for uplink compression.
    pub rng: &'a mut RngStream,
}

/// Averages the uploaded iterates.
///
/// With [`Variant::Com`] each upload is first replaced by its compressed
/// version (in place, so the caller's control update sees what was sent).
/// The mean runs over the uploads in slice order; callers pass them sorted by
/// client id. With [`Variant::Global`] the mean is compressed with
/// `server_rng` before being returned.
pub fn aggregate(
    uploads: &mut [Upload<'_>],
    variant: Variant,
    compressor: &CompressorSpec,
    server_rng: &mut RngStream,
) -> Result<ParamVector> {
    if uploads.is_empty() {
        return Err(Error::Protocol("aggregation with no participants".into()));
    }
    if variant == Variant::Com && !compressor.is_identity() {
        for up in uploads.iter_mut() {
            *up.x_hat = compressor.apply(up.x_hat, up.rng)?;
        }
    }
    let d = uploads[0].x_hat.len();
    let mut mean = ParamVector::zeros(d);
    for up in uploads.iter() {
        mean.axpy_in_place(1.0, up.x_hat)?;
    }
    mean.scale(1.0 / uploads.len() as f64);
    if variant == Variant::Global && !compressor.is_identity() {
        mean = compressor.apply(&mean, server_rng)?;
    }
    Ok(mean)
}

/// `h += (p / gamma) * (x_new - x_hat)`, then `x = x_new`.
pub fn update_control(
    client: &mut ClientState,
    x_new: &ParamVector,
    x_hat: &ParamVector,
    p: f64,
    gamma: f64,
) -> Result<()> {
    let shift = x_new.sub(x_hat)?;
    client.h.axpy_in_place(p / gamma, &shift)?;
    client.x.clone_from(x_new);
    Ok(())
}

/// Snapshot handed to observers after every local iteration (FedComLoc) or
/// every round (baselines).
pub struct IterationView<'a> {
    /// Local iterations completed so far.
    pub t: usize,
    pub communicated: bool,
    pub clients: &'a [ClientState],
    /// Latest server model.
    pub server: &'a ParamVector,
    /// Scaffold's server control variate; `None` elsewhere.
    pub server_control: Option<&'a ParamVector>,
}

pub type Observer<'o> = dyn FnMut(&IterationView<'_>) + 'o;

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub record: RunRecord<FedConfig>,
    pub summary: Summary,
    /// Server model after the last communication round.
    pub final_model: ParamVector,
    pub ledger: BitLedger,
}

/// Uniform sample of `size` distinct clients, returned sorted.
fn sample_clients(n: usize, size: usize, rng: &mut RngStream) -> Vec<usize> {
    if size >= n {
        return (0..n).collect();
    }
    let mut chosen = index::sample(rng, n, size).into_vec();
    chosen.sort_unstable();
    chosen
}

/// Mutable references to the listed clients, in the listed (ascending) order.
fn select_mut<'a>(clients: &'a mut [ClientState], ids: &[usize]) -> Vec<&'a mut ClientState> {
    let mut out = Vec::with_capacity(ids.len());
    let mut wanted = ids.iter().peekable();
    for c in clients.iter_mut() {
        if wanted.peek() == Some(&&c.id) {
            out.push(c);
            wanted.next();
        }
    }
    out
}

fn control_sum_inf(clients: &[ClientState]) -> f64 {
    let d = clients.first().map_or(0, |c| c.h.len());
    let mut sum = vec![0.0; d];
    for c in clients {
        for (s, v) in sum.iter_mut().zip(c.h.iter()) {
            *s += v;
        }
    }
    sum.into_iter().fold(0.0, |m, v| m.max(v.abs()))
}

struct Evaluator<'a> {
    spec: &'a ModelSpec,
    data: &'a FederatedDataset,
}

impl Evaluator<'_> {
    fn record(
        &self,
        record: &mut RunRecord<FedConfig>,
        ledger: &BitLedger,
        model: &ParamVector,
        t: usize,
    ) -> Result<()> {
        let train = models::evaluate(self.spec, model, &self.data.train)?;
        let (test_loss, accuracy) = if self.data.test.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let test = models::evaluate(self.spec, model, &self.data.test)?;
            (test.loss, test.accuracy)
        };
        let losses = Losses {
            train_loss: train.loss,
            test_loss,
        };
        record.record_eval(ledger, losses, accuracy, t as u64)?;
        Ok(())
    }
}

fn initial_clients(config: &FedConfig, spec: &ModelSpec) -> Result<(ParamVector, Vec<ClientState>)> {
    // a single draw, broadcast to every client
    let init = models::init_params(spec, &mut derive_stream(config.seed, "init"))?;
    let clients = (0..config.n_clients)
        .map(|i| ClientState::new(i, init.clone(), config.seed))
        .collect();
    Ok((init, clients))
}

/// Runs the configured algorithm.
pub fn run(config: &FedConfig, data: &FederatedDataset, spec: &ModelSpec) -> Result<RunOutput> {
    run_observed(config, data, spec, &mut |_| {})
}

pub fn run_observed(
    config: &FedConfig,
    data: &FederatedDataset,
    spec: &ModelSpec,
    observer: &mut Observer<'_>,
) -> Result<RunOutput> {
    match config.algorithm {
        Algorithm::Fedcomloc => run_fedcomloc_observed(config, data, spec, observer),
        Algorithm::Fedavg | Algorithm::SparseFedavg => run_fedavg_observed(config, data, spec, observer),
        Algorithm::Scaffold => run_scaffold_observed(config, data, spec, observer),
    }
}

pub fn run_fedcomloc(config: &FedConfig, data: &FederatedDataset, spec: &ModelSpec) -> Result<RunOutput> {
    run_fedcomloc_observed(config, data, spec, &mut |_| {})
}

pub fn run_fedcomloc_observed(
    config: &FedConfig,
    data: &FederatedDataset,
    spec: &ModelSpec,
    observer: &mut Observer<'_>,
) -> Result<RunOutput> {
    config.check_against(data, spec)?;
    let FedConfig {
        variant,
        p,
        gamma,
        compressor,
        ..
    } = *config;

    let d = spec.n_params();
    let uplink = if variant == Variant::Com { compressor } else { CompressorSpec::identity() };
    let downlink = if variant == Variant::Global { compressor } else { CompressorSpec::identity() };
    let uplink_bits = uplink.bit_cost(d);
    let downlink_bits = downlink.bit_cost(d);

    let coins = generate_coins(p, config.iterations, &mut derive_stream(config.seed, "coins"))?;
    let mut sample_rng = derive_stream(config.seed, "sample");
    let mut downlink_rng = derive_stream(config.seed, "downlink");

    let (mut server, mut clients) = initial_clients(config, spec)?;
    let eval = Evaluator { spec, data };
    let mut ledger = BitLedger::default();
    let mut record = RunRecord::new(config.clone(), config.tau);
    eval.record(&mut record, &ledger, &server, 0)?;

    let mut drift = 0.0f64;
    let mut last_logged_round = 0u64;
    for t in 0..config.iterations {
        let sampled = sample_clients(config.n_clients, config.sample_size, &mut sample_rng);
        let mut active = select_mut(&mut clients, &sampled);

        let mut x_hats: Vec<ParamVector> = active
            .par_iter_mut()
            .map(|client| {
                let shard = data.shard(client.id);
                let batch = client.next_batch(shard.len(), config.batch_size)?;
                local_step(client, gamma, spec, shard, &batch, &compressor, variant)
            })
            .collect::<Result<_>>()?;
        ledger.add_local_steps(1);

        let communicated = coins.get(t);
        if communicated {
            let mut uploads: Vec<Upload<'_>> = x_hats
                .iter_mut()
                .zip(active.iter_mut())
                .map(|(x_hat, client)| Upload {
                    x_hat,
                    rng: &mut client.compress_rng,
                })
                .collect();
            let mean = aggregate(&mut uploads, variant, &compressor, &mut downlink_rng)?;
            for (client, x_hat) in active.iter_mut().zip(&x_hats) {
                update_control(client, &mean, x_hat, p, gamma)?;
            }
            let n_active = sampled.len() as u64;
            ledger.charge_round(n_active * uplink_bits, n_active * downlink_bits);
            server = mean;
        } else {
            for (client, x_hat) in active.iter_mut().zip(x_hats) {
                client.x = x_hat;
            }
        }
        drop(active);

        if communicated {
            drift = drift.max(control_sum_inf(&clients));
            if ledger.comm_rounds % config.eval_every as u64 == 0 {
                eval.record(&mut record, &ledger, &server, t + 1)?;
                last_logged_round = ledger.comm_rounds;
            }
        }
        observer(&IterationView {
            t: t + 1,
            communicated,
            clients: &clients,
            server: &server,
            server_control: None,
        });
    }
    if ledger.comm_rounds > last_logged_round {
        eval.record(&mut record, &ledger, &server, config.iterations)?;
    }

    let summary = record.summary(config.seed, Some(drift));
    Ok(RunOutput {
        record,
        summary,
        final_model: server,
        ledger,
    })
}

fn baseline_rounds(config: &FedConfig) -> usize {
    config.iterations.div_ceil(config.local_steps_baseline)
}

pub fn run_fedavg(config: &FedConfig, data: &FederatedDataset, spec: &ModelSpec) -> Result<RunOutput> {
    run_fedavg_observed(config, data, spec, &mut |_| {})
}

/// FedAvg and sparse FedAvg.
///
/// Each round the sampled clients run `local_steps_baseline` SGD steps from
/// the broadcast model and upload their model delta. sparseFedAvg compresses
/// the delta with the configured compressor; plain FedAvg uses the identity
/// on the same code path. The server adds the mean delta.
pub fn run_fedavg_observed(
    config: &FedConfig,
    data: &FederatedDataset,
    spec: &ModelSpec,
    observer: &mut Observer<'_>,
) -> Result<RunOutput> {
    config.check_against(data, spec)?;
    let d = spec.n_params();
    let steps = config.local_steps_baseline;
    let uplink = match config.algorithm {
        Algorithm::SparseFedavg => config.compressor,
        _ => CompressorSpec::identity(),
    };
    let uplink_bits = uplink.bit_cost(d);
    let downlink_bits = CompressorSpec::identity().bit_cost(d);

    let mut sample_rng = derive_stream(config.seed, "sample");
    let (mut server, mut clients) = initial_clients(config, spec)?;
    let eval = Evaluator { spec, data };
    let mut ledger = BitLedger::default();
    let mut record = RunRecord::new(config.clone(), config.tau);
    eval.record(&mut record, &ledger, &server, 0)?;

    let mut done = 0usize;
    for _ in 0..baseline_rounds(config) {
        let sampled = sample_clients(config.n_clients, config.sample_size, &mut sample_rng);
        let mut active = select_mut(&mut clients, &sampled);
        let deltas: Vec<ParamVector> = active
            .par_iter_mut()
            .map(|client| {
                let shard = data.shard(client.id);
                let mut y = server.clone();
                for _ in 0..steps {
                    let batch = client.next_batch(shard.len(), config.batch_size)?;
                    let g = models::gradient(spec, &y, shard, &batch)?;
                    y.axpy_in_place(-config.gamma, &g)?;
                }
                let delta = y.sub(&server)?;
                uplink.apply(&delta, &mut client.compress_rng)
            })
            .collect::<Result<_>>()?;

        let mean_delta = ParamVector::mean_of(&deltas)?;
        server.axpy_in_place(1.0, &mean_delta)?;
        for client in active.iter_mut() {
            client.x.clone_from(&server);
        }
        drop(active);

        done += steps;
        let n_active = sampled.len() as u64;
        ledger.add_local_steps(steps as u64);
        ledger.charge_round(n_active * uplink_bits, n_active * downlink_bits);
        if ledger.comm_rounds % config.eval_every as u64 == 0 {
            eval.record(&mut record, &ledger, &server, done)?;
        }
        observer(&IterationView {
            t: done,
            communicated: true,
            clients: &clients,
            server: &server,
            server_control: None,
        });
    }
    if record.last().map_or(0, |r| r.t) < done as u64 {
        eval.record(&mut record, &ledger, &server, done)?;
    }

    let summary = record.summary(config.seed, None);
    Ok(RunOutput {
        record,
        summary,
        final_model: server,
        ledger,
    })
}

pub fn run_scaffold(config: &FedConfig, data: &FederatedDataset, spec: &ModelSpec) -> Result<RunOutput> {
    run_scaffold_observed(config, data, spec, &mut |_| {})
}

/// Scaffold with the cheap control-variate refresh.
///
/// Client steps use `g - c_i + c`; afterwards
/// `c_i <- c_i - c + (x - y) / (steps * gamma)`. The server adds the mean model
/// delta and `|S|/n` times the mean control delta. Both directions carry a
/// model and a control variate, so each transfer costs two dense vectors.
pub fn run_scaffold_observed(
    config: &FedConfig,
    data: &FederatedDataset,
    spec: &ModelSpec,
    observer: &mut Observer<'_>,
) -> Result<RunOutput> {
    config.check_against(data, spec)?;
    let d = spec.n_params();
    let steps = config.local_steps_baseline;
    let transfer_bits = 2 * CompressorSpec::identity().bit_cost(d);
    let gamma = config.gamma;

    let mut sample_rng = derive_stream(config.seed, "sample");
    let (mut server, mut clients) = initial_clients(config, spec)?;
    let mut control = ParamVector::zeros(d);
    let eval = Evaluator { spec, data };
    let mut ledger = BitLedger::default();
    let mut record = RunRecord::new(config.clone(), config.tau);
    eval.record(&mut record, &ledger, &server, 0)?;

    let mut done = 0usize;
    for _ in 0..baseline_rounds(config) {
        let sampled = sample_clients(config.n_clients, config.sample_size, &mut sample_rng);
        let mut active = select_mut(&mut clients, &sampled);
        let deltas: Vec<(ParamVector, ParamVector)> = active
            .par_iter_mut()
            .map(|client| {
                let shard = data.shard(client.id);
                // correction = c - c_i, fixed during the local pass
                let correction = control.sub(&client.h)?;
                let mut y = server.clone();
                for _ in 0..steps {
                    let batch = client.next_batch(shard.len(), config.batch_size)?;
                    let g = models::gradient(spec, &y, shard, &batch)?;
                    y.axpy_in_place(-gamma, &g)?;
                    y.axpy_in_place(-gamma, &correction)?;
                }
                let mut new_c = client.h.sub(&control)?;
                new_c.axpy_in_place(1.0 / (steps as f64 * gamma), &server.sub(&y)?)?;
                let dc = new_c.sub(&client.h)?;
                client.h = new_c;
                Ok((y.sub(&server)?, dc))
            })
            .collect::<Result<_>>()?;

        let (dx, dc): (Vec<_>, Vec<_>) = deltas.into_iter().unzip();
        server.axpy_in_place(1.0, &ParamVector::mean_of(&dx)?)?;
        let weight = sampled.len() as f64 / config.n_clients as f64;
        control.axpy_in_place(weight, &ParamVector::mean_of(&dc)?)?;
        for client in active.iter_mut() {
            client.x.clone_from(&server);
        }
        drop(active);

        done += steps;
        let n_active = sampled.len() as u64;
        ledger.add_local_steps(steps as u64);
        ledger.charge_round(n_active * transfer_bits, n_active * transfer_bits);
        if ledger.comm_rounds % config.eval_every as u64 == 0 {
            eval.record(&mut record, &ledger, &server, done)?;
        }
        observer(&IterationView {
            t: done,
            communicated: true,
            clients: &clients,
            server: &server,
            server_control: Some(&control),
        });
    }
    if record.last().map_or(0, |r| r.t) < done as u64 {
        eval.record(&mut record, &ledger, &server, done)?;
    }

    let summary = record.summary(config.seed, None);
    Ok(RunOutput {
        record,
        summary,
        final_model: server,
        ledger,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Dataset, Partition, SplitDataset};

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::from(v.to_vec())
    }

    fn client_with(x: &[f64], h: &[f64]) -> ClientState {
        let mut c = ClientState::new(0, pv(x), 1);
        c.h = pv(h);
        c
    }

    fn tiny_problem() -> (ModelSpec, Dataset) {
        let data = Dataset::new(vec![1.0, 0.5, 0.2, 1.0, 0.9, 0.1], 2, vec![0, 1, 1], 2).unwrap();
        (ModelSpec::logreg(2, 2, 0.01), data)
    }

    #[test]
    fn coins_degenerate_and_repeatable() {
        let coins = generate_coins(1.0, 1000, &mut derive_stream(1, "coins")).unwrap();
        assert_eq!(coins.count_ones(), 1000);
        let a = generate_coins(0.3, 500, &mut derive_stream(2, "coins")).unwrap();
        let b = generate_coins(0.3, 500, &mut derive_stream(2, "coins")).unwrap();
        assert_eq!(a, b);
        assert!(generate_coins(0.0, 10, &mut derive_stream(2, "coins")).is_err());
    }

    #[test]
    fn coin_frequency() {
        let n = 100_000;
        let coins = generate_coins(0.1, n, &mut derive_stream(3, "coins")).unwrap();
        let frac = coins.count_ones() as f64 / n as f64;
        assert!((frac - 0.1).abs() <= 0.01);
    }

    #[test]
    fn local_step_without_control_is_sgd() {
        let (spec, data) = tiny_problem();
        let x = [0.1, -0.2, 0.3, 0.05, -0.1, 0.2];
        let mut c = client_with(&x, &[0.0; 6]);
        let batch = Batch::full(3);
        let g = models::gradient(&spec, &pv(&x), &data, &batch).unwrap();
        let x_hat = local_step(&mut c, 0.1, &spec, &data, &batch, &CompressorSpec::identity(), Variant::None)
            .unwrap();
        for i in 0..6 {
            assert_eq!(x_hat[i], x[i] - 0.1 * g[i]);
        }
    }

    #[test]
    fn local_step_cancels_when_h_equals_g() {
        let (spec, data) = tiny_problem();
        let x = [0.1, -0.2, 0.3, 0.05, -0.1, 0.2];
        let batch = Batch::full(3);
        let g = models::gradient(&spec, &pv(&x), &data, &batch).unwrap();
        let mut c = client_with(&x, g.as_slice());
        let x_hat = local_step(&mut c, 0.5, &spec, &data, &batch, &CompressorSpec::identity(), Variant::None)
            .unwrap();
        assert_eq!(x_hat, pv(&x));
    }

    #[test]
    fn local_variant_with_identity_matches_none() {
        let (spec, data) = tiny_problem();
        let x = [0.1, -0.2, 0.3, 0.05, -0.1, 0.2];
        let h = [0.01, 0.0, -0.02, 0.0, 0.03, 0.0];
        let batch = Batch::full(3);
        let a = local_step(&mut client_with(&x, &h), 0.2, &spec, &data, &batch, &CompressorSpec::identity(), Variant::Local)
            .unwrap();
        let b = local_step(&mut client_with(&x, &h), 0.2, &spec, &data, &batch, &CompressorSpec::identity(), Variant::None)
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn local_variant_keeps_iterate_dense() {
        let (spec, data) = tiny_problem();
        let x = [0.1, -0.2, 0.3, 0.05, -0.1, 0.2];
        let mut c = client_with(&x, &[0.0; 6]);
        let batch = Batch::full(3);
        let topk = CompressorSpec::topk(0.5);
        let x_hat = local_step(&mut c, 0.1, &spec, &data, &batch, &topk, Variant::Local).unwrap();
        assert_eq!(c.x, pv(&x));
        let point = crate::compressors::top_k(&pv(&x), 3).unwrap();
        let g = models::gradient(&spec, &point, &data, &batch).unwrap();
        for i in 0..6 {
            assert_eq!(x_hat[i], x[i] - 0.1 * g[i]);
        }
    }

    fn agg(xs: &[&[f64]], variant: Variant, comp: CompressorSpec) -> Result<ParamVector> {
        let mut vs: Vec<ParamVector> = xs.iter().map(|x| pv(x)).collect();
        let mut rngs: Vec<RngStream> = (0..xs.len()).map(|i| derive_stream(0, &client_label("c", i))).collect();
        let mut ups: Vec<Upload<'_>> = vs
            .iter_mut()
            .zip(rngs.iter_mut())
            .map(|(x_hat, rng)| Upload { x_hat, rng })
            .collect();
        aggregate(&mut ups, variant, &comp, &mut derive_stream(0, "server"))
    }

    #[test]
    fn aggregate_examples() {
        assert_eq!(agg(&[&[0.3, -1.0]], Variant::None, CompressorSpec::identity()).unwrap(), pv(&[0.3, -1.0]));
        assert_eq!(
            agg(&[&[1.0, 0.0], &[0.0, 1.0]], Variant::None, CompressorSpec::identity()).unwrap(),
            pv(&[0.5, 0.5])
        );
        assert_eq!(
            agg(&[&[3.0, 1.0], &[1.0, 3.0]], Variant::Com, CompressorSpec::topk(0.5)).unwrap(),
            pv(&[1.5, 1.5])
        );
        // downlink compression acts on the mean
        assert_eq!(
            agg(&[&[3.0, 1.0], &[1.0, 3.0]], Variant::Global, CompressorSpec::topk(0.5)).unwrap(),
            pv(&[2.0, 0.0])
        );
        assert!(matches!(agg(&[], Variant::None, CompressorSpec::identity()), Err(Error::Protocol(_))));
    }

    #[test]
    fn update_control_examples() {
        let mut c = client_with(&[0.0], &[0.0]);
        update_control(&mut c, &pv(&[0.2]), &pv(&[0.0]), 0.5, 0.1).unwrap();
        assert!((c.h[0] - 1.0).abs() < 1e-15);
        assert_eq!(c.x, pv(&[0.2]));

        let mut c = client_with(&[1.0, 2.0], &[0.3, -0.4]);
        update_control(&mut c, &pv(&[5.0, 6.0]), &pv(&[5.0, 6.0]), 0.1, 0.01).unwrap();
        assert_eq!(c.h, pv(&[0.3, -0.4]));
    }

    #[test]
    fn control_deltas_sum_to_zero_under_exact_mean() {
        let xs = [pv(&[1.0, -2.0, 0.5]), pv(&[0.0, 4.0, 1.5]), pv(&[-3.0, 1.0, 2.0])];
        let mean = ParamVector::mean_of(&xs).unwrap();
        let mut total = ParamVector::zeros(3);
        for x_hat in &xs {
            let mut c = client_with(&[0.0; 3], &[0.0; 3]);
            update_control(&mut c, &mean, x_hat, 0.2, 0.05).unwrap();
            total.axpy_in_place(1.0, &c.h).unwrap();
        }
        assert!(total.max_abs() < 1e-12);
    }

    #[test]
    fn violations_name_keys() {
        let mut c = FedConfig::new(Algorithm::Fedcomloc, 5, 0.1, 10);
        c.p = 0.0;
        c.sample_size = 6;
        c.compressor = CompressorSpec::topk(1.5);
        let keys: Vec<String> = c.violations().into_iter().map(|v| v.key).collect();
        assert!(keys.contains(&"fed.p".to_string()));
        assert!(keys.contains(&"fed.sample_size".to_string()));
        assert!(keys.contains(&"compressor.density".to_string()));
    }

    fn small_federation(n_clients: usize) -> (FederatedDataset, ModelSpec) {
        let rows = 6 * n_clients;
        let features: Vec<f64> = (0..rows * 3).map(|i| ((i * 7919) % 97) as f64 / 97.0).collect();
        let labels: Vec<usize> = (0..rows).map(|i| (i / 2) % 3).collect();
        let train = Dataset::new(features, 3, labels, 3).unwrap();
        let test = train.subset(&[0, 1, 2, 3]);
        let cells = (0..n_clients).map(|c| (6 * c..6 * c + 6).collect()).collect();
        let data = FederatedDataset::from_split(SplitDataset { train, test }, Partition::from_cells(cells)).unwrap();
        (data, ModelSpec::logreg(3, 3, 0.01))
    }

    #[test]
    fn mismatched_config_is_rejected_before_compute() {
        let (data, spec) = small_federation(3);
        let config = FedConfig::new(Algorithm::Fedcomloc, 4, 0.1, 10);
        assert!(matches!(run(&config, &data, &spec), Err(Error::Config(_))));
    }

    #[test]
    fn skip_rounds_leave_h_and_ledger_unchanged() {
        let (data, spec) = small_federation(4);
        let mut config = FedConfig::new(Algorithm::Fedcomloc, 4, 0.1, 60);
        config.p = 0.3;
        config.batch_size = 2;
        let mut prev_h: Option<Vec<ParamVector>> = None;
        let mut skips = 0;
        run_fedcomloc_observed(&config, &data, &spec, &mut |view| {
            let hs: Vec<ParamVector> = view.clients.iter().map(|c| c.h.clone()).collect();
            if let Some(prev) = &prev_h {
                if !view.communicated {
                    skips += 1;
                    assert_eq!(prev, &hs);
                }
            }
            prev_h = Some(hs);
        })
        .unwrap();
        assert!(skips > 10);
    }

    #[test]
    fn sparse_fedavg_with_full_density_matches_fedavg() {
        let (data, spec) = small_federation(4);
        let mut config = FedConfig::new(Algorithm::Fedavg, 4, 0.2, 40);
        config.sample_size = 2;
        config.batch_size = 3;
        config.local_steps_baseline = 4;
        let plain = run(&config, &data, &spec).unwrap();
        config.algorithm = Algorithm::SparseFedavg;
        config.compressor = CompressorSpec::topk(1.0);
        let sparse = run(&config, &data, &spec).unwrap();
        assert_eq!(plain.final_model, sparse.final_model);
        // index bits make the sparse uplink dearer; everything else matches
        let strip = |rows: &[crate::metrics::EvalRow]| {
            rows.iter()
                .map(|r| crate::metrics::EvalRow { uplink_bits: 0, ..*r })
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&plain.record.rows), strip(&sparse.record.rows));
    }

    #[test]
    fn scaffold_with_one_step_matches_fedavg_first_round() {
        let (data, spec) = small_federation(3);
        let mut config = FedConfig::new(Algorithm::Scaffold, 3, 0.3, 1);
        config.local_steps_baseline = 1;
        config.batch_size = 0;
        let scaffold = run(&config, &data, &spec).unwrap();
        config.algorithm = Algorithm::Fedavg;
        let fedavg = run(&config, &data, &spec).unwrap();
        for (a, b) in scaffold.final_model.iter().zip(fedavg.final_model.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn scaffold_is_deterministic() {
        let (data, spec) = small_federation(5);
        let mut config = FedConfig::new(Algorithm::Scaffold, 5, 0.2, 50);
        config.sample_size = 3;
        config.batch_size = 2;
        config.local_steps_baseline = 5;
        let a = run(&config, &data, &spec).unwrap();
        let b = run(&config, &data, &spec).unwrap();
        assert_eq!(a.record.rows, b.record.rows);
        assert_eq!(a.final_model, b.final_model);
    }

    #[test]
    fn single_client_p1_is_gradient_descent() {
        let (data, spec) = small_federation(1);
        let mut config = FedConfig::new(Algorithm::Fedcomloc, 1, 0.3, 30);
        config.p = 1.0;
        config.batch_size = 0;
        let out = run(&config, &data, &spec).unwrap();
        let mut x = ParamVector::zeros(spec.n_params());
        for _ in 0..30 {
            let g = models::gradient(&spec, &x, data.shard(0), &Batch::full(6)).unwrap();
            x.axpy_in_place(-0.3, &g).unwrap();
        }
        for (a, b) in out.final_model.iter().zip(x.iter()) {
            assert!((a - b).abs() < 1e-14, "{a} vs {b}");
        }
    }
}
