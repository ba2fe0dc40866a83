//! Federated averaging: non-IID partitioning, local SGD, weight deltas,
//! aggregation and capture of a victim client's update.

use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{Model, PrecodeNoise};
use crate::obfuscate::{self, ObfuscationSpec, Stage};
use crate::params::{GradientVector, ParamVector};
use crate::rng::{derive_stream, Stream};

fn default_clients() -> usize {
    10
}
fn default_sampled() -> usize {
    4
}
fn default_rounds() -> usize {
    30
}
fn default_eta() -> f64 {
    5e-3
}
fn default_tau() -> usize {
    5
}
fn default_batch() -> usize {
    16
}
fn default_alpha() -> f64 {
    0.5
}
fn default_checkpoints() -> Vec<usize> {
    vec![0, 1, 10, 30, 50]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FedConfig {
    #[serde(default = "default_clients")]
    pub clients: usize,
    #[serde(default = "default_sampled")]
    pub sampled: usize,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "default_eta")]
    pub eta: f64,
    /// Local epochs.
    #[serde(default = "default_tau")]
    pub tau: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Rounds whose global model is saved; rounds past the end are ignored.
    #[serde(default = "default_checkpoints")]
    pub checkpoints: Vec<usize>,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            clients: default_clients(),
            sampled: default_sampled(),
            rounds: default_rounds(),
            eta: default_eta(),
            tau: default_tau(),
            batch: default_batch(),
            alpha: default_alpha(),
            checkpoints: default_checkpoints(),
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.clients == 0 {
            return fail("clients must be at least 1".into());
        }
        if self.sampled == 0 || self.sampled > self.clients {
            return fail(format!("sampled {} not in 1..={}", self.sampled, self.clients));
        }
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return fail(format!("eta {} must be finite and non-negative", self.eta));
        }
        if self.tau == 0 || self.batch == 0 {
            return fail("tau and batch must be at least 1".into());
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return fail(format!("alpha {} must be positive", self.alpha));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    /// Sorted example indices per client.
    pub assignment: Vec<Vec<usize>>,
    pub alpha: f64,
    pub clients: usize,
    /// `proportions[k][m]`: share of class `k` given to client `m`.
    pub proportions: Vec<Vec<f64>>,
}

/// Split `n` items by `weights` (summing to 1) with largest-remainder
/// rounding; ties in the remainder go to the lower index.
pub fn largest_remainder(n: usize, weights: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = weights.iter().map(|w| w * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &m in order.iter().take(n.saturating_sub(assigned)) {
        counts[m] += 1;
    }
    counts
}

/// Non-IID split: every client draws class proportions `q_m ~ Dir(alpha)`;
/// class `k` is then divided across clients in proportion to `q_{m,k}`.
pub fn dirichlet_partition(labels: &[usize], clients: usize, alpha: f64, seed: u64) -> Result<Partition> {
    if labels.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    if clients == 0 || !(alpha > 0.0) {
        return Err(Error::Config(format!("partition needs clients >= 1 and alpha > 0, got {clients}, {alpha}")));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::Config(format!("alpha {alpha}: {e}")))?;
    let q: Vec<Vec<f64>> = (0..clients)
        .map(|m| {
            let mut s = derive_stream(seed, "dirichlet", m as u64);
            let raw: Vec<f64> = (0..classes).map(|_| gamma.sample(&mut s)).collect();
            let total: f64 = raw.iter().sum();
            if total > 0.0 {
                raw.iter().map(|v| v / total).collect()
            } else {
                vec![1.0 / classes as f64; classes]
            }
        })
        .collect();

    let mut assignment = vec![Vec::new(); clients];
    let mut proportions = Vec::with_capacity(classes);
    for k in 0..classes {
        let column: Vec<f64> = q.iter().map(|row| row[k]).collect();
        let total: f64 = column.iter().sum();
        let shares: Vec<f64> = if total > 0.0 {
            column.iter().map(|v| v / total).collect()
        } else {
            vec![1.0 / clients as f64; clients]
        };
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == k).collect();
        derive_stream(seed, "partition-shuffle", k as u64).shuffle(&mut members);
        let counts = largest_remainder(members.len(), &shares);
        let mut start = 0;
        for (m, c) in counts.into_iter().enumerate() {
            assignment[m].extend_from_slice(&members[start..start + c]);
            start += c;
        }
        proportions.push(shares);
    }
    for a in &mut assignment {
        a.sort_unstable();
    }
    Ok(Partition {
        assignment,
        alpha,
        clients,
        proportions,
    })
}

#[derive(Clone, Debug)]
pub struct LocalOutcome {
    pub params: ParamVector,
    /// `params_in - params`, accumulated step by step.
    pub delta: GradientVector,
    pub steps: usize,
    /// The batch size exceeded the shard and one full batch was used.
    pub full_batch_fallback: bool,
}

/// `tau` epochs of mini-batch SGD over `n` examples, reshuffled each epoch.
/// `grad` maps the current weights and a batch of example indices (sorted
/// within the batch) to the gradient used for the step.
///
/// The weights are kept as `w0 - delta` with `delta` summing `eta * g`, so
/// the transmitted delta is exact and `w0 - delta` reproduces the endpoint.
pub fn sgd_epochs(
    params: &ParamVector,
    n: usize,
    eta: f64,
    tau: usize,
    batch: usize,
    stream: &Stream,
    mut grad: impl FnMut(&ParamVector, &[usize], usize) -> Result<GradientVector>,
) -> Result<LocalOutcome> {
    if n == 0 {
        return Err(Error::Empty("client shard"));
    }
    let full_batch_fallback = batch > n;
    let b = batch.min(n);
    let mut w = params.clone();
    let mut delta = params.zeros_like();
    let mut steps = 0;
    for epoch in 0..tau {
        let mut order: Vec<usize> = (0..n).collect();
        stream.child("epoch", epoch as u64).shuffle(&mut order);
        for chunk in order.chunks(b) {
            let mut idx = chunk.to_vec();
            idx.sort_unstable();
            let g = grad(&w, &idx, steps)?;
            delta.axpy(eta, &g)?;
            w = params.sub(&delta)?;
            steps += 1;
        }
    }
    Ok(LocalOutcome {
        params: w,
        delta,
        steps,
        full_batch_fallback,
    })
}

/// Local training on a client shard. A leading FedCDP stage replaces each
/// step's gradient by its clipped, noised version.
pub fn local_update(
    model: &Model,
    params: &ParamVector,
    shard: &Dataset,
    fed: &FedConfig,
    head: Option<&Stage>,
    stream: &Stream,
) -> Result<LocalOutcome> {
    let mut noise = PrecodeNoise::Sample(stream.child("precode", 0));
    let mut cdp = stream.child("fedcdp", 0);
    let out = sgd_epochs(params, shard.len(), fed.eta, fed.tau, fed.batch, stream, |w, idx, _| {
        let (x, y) = shard.batch(idx)?;
        match head {
            Some(Stage::Fedcdp { clip, snr_db }) => {
                let per = obfuscate::per_example_gradients(model, w, &x, &y, &mut noise)?;
                Ok(obfuscate::fedcdp(&per, *clip, *snr_db, &mut cdp)?.gradient)
            }
            _ => Ok(model.loss_and_grad(w, &x, &y, &mut noise)?.1),
        }
    })?;
    if out.full_batch_fallback {
        log::warn!("batch {} exceeds shard of {}; using one full batch", fed.batch, shard.len());
    }
    Ok(out)
}

/// `w0 - wt`: the update a client transmits.
pub fn weight_delta(w0: &ParamVector, wt: &ParamVector) -> Result<GradientVector> {
    w0.sub(wt)
}

#[derive(Clone, Debug)]
pub struct ClientUpdate {
    /// Delta before the plain-gradient stages (after any leading defense).
    pub delta: GradientVector,
    /// What the server receives.
    pub transmitted: GradientVector,
    pub full_batch_fallback: bool,
}

/// Local training plus obfuscation for one client.
pub fn client_update(
    model: &Model,
    global: &ParamVector,
    shard: &Dataset,
    fed: &FedConfig,
    spec: &ObfuscationSpec,
    stream: &Stream,
) -> Result<ClientUpdate> {
    let local = local_update(model, global, shard, fed, spec.head(), stream)?;
    let mut delta = local.delta;
    if let Some(Stage::Soteria { rho, defended_layer }) = spec.head() {
        let rows = obfuscate::soteria_selection(model, global, &shard.images, &shard.labels, *rho, defended_layer)?;
        delta = obfuscate::zero_defended_rows(&delta, defended_layer, &rows)?;
    }
    let mut s = stream.child("obfuscate", 0);
    let transmitted = obfuscate::apply_tail(spec.tail(), delta.clone(), &mut s)?;
    Ok(ClientUpdate {
        delta,
        transmitted,
        full_batch_fallback: local.full_batch_fallback,
    })
}

/// Apply the plain-gradient stages to every delta (one stream per client)
/// and step the global model by minus their mean, summing in input order.
pub fn fedavg_round(
    global: &ParamVector,
    deltas: &[GradientVector],
    spec: &ObfuscationSpec,
    streams: &mut [Stream],
) -> Result<ParamVector> {
    if deltas.is_empty() {
        return Err(Error::Empty("sampled clients"));
    }
    if streams.len() != deltas.len() {
        return Err(Error::Config(format!("{} streams for {} deltas", streams.len(), deltas.len())));
    }
    let sent = deltas
        .iter()
        .zip(streams.iter_mut())
        .map(|(d, s)| obfuscate::apply_tail(spec.tail(), d.clone(), s))
        .collect::<Result<Vec<_>>>()?;
    aggregate(global, &sent)
}

/// `global - mean(updates)`.
pub fn aggregate(global: &ParamVector, updates: &[GradientVector]) -> Result<ParamVector> {
    if updates.is_empty() {
        return Err(Error::Empty("sampled clients"));
    }
    let mut mean = global.zeros_like();
    for u in updates {
        mean.axpy(1.0, u)?;
    }
    let mean = mean.scale(1.0 / updates.len() as f64);
    global.sub(&mean)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub client_ids: Vec<usize>,
    /// Norm of each sampled client's raw delta, in `client_ids` order.
    pub delta_norms: Vec<f64>,
    pub test_acc: f64,
    /// Set when this round's global model was checkpointed.
    pub checkpoint: Option<String>,
}

impl RoundRecord {
    pub fn mean_delta_norm(&self) -> f64 {
        self.delta_norms.iter().sum::<f64>() / self.delta_norms.len().max(1) as f64
    }
}

pub const ROUNDS_CSV_HEADER: &str = "round,client_ids,mean_delta_norm,test_acc";

pub fn rounds_csv(records: &[RoundRecord]) -> String {
    let mut out = String::from(ROUNDS_CSV_HEADER);
    out.push('\n');
    for r in records {
        let ids: Vec<String> = r.client_ids.iter().map(|c| c.to_string()).collect();
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.round,
            ids.join(" "),
            r.mean_delta_norm(),
            r.test_acc
        ));
    }
    out
}

/// Per-client stream for a round; also used when replaying a capture.
pub fn client_stream(seed: u64, round: usize, client: usize) -> Stream {
    derive_stream(seed, "client", round as u64).child("client", client as u64)
}

/// Clients taking part in round `round` (1-based), sorted by id. Clients
/// without data are never sampled.
pub fn sample_clients(partition: &Partition, sampled: usize, seed: u64, round: usize) -> Result<Vec<usize>> {
    let eligible: Vec<usize> = (0..partition.clients)
        .filter(|&m| !partition.assignment[m].is_empty())
        .collect();
    if eligible.is_empty() {
        return Err(Error::Empty("clients with data"));
    }
    let k = sampled.min(eligible.len());
    let mut s = derive_stream(seed, "sample-clients", round as u64);
    let mut ids: Vec<usize> = s
        .sample_without_replacement(eligible.len(), k)
        .into_iter()
        .map(|i| eligible[i])
        .collect();
    ids.sort_unstable();
    Ok(ids)
}

pub struct Federation<'a> {
    pub model: &'a Model,
    pub train: &'a Dataset,
    pub test: &'a Dataset,
    pub partition: &'a Partition,
    pub fed: &'a FedConfig,
    pub obfuscation: &'a ObfuscationSpec,
    pub seed: u64,
}

impl Federation<'_> {
    pub fn shard(&self, client: usize) -> Result<Dataset> {
        let idx = self
            .partition
            .assignment
            .get(client)
            .ok_or_else(|| Error::Config(format!("client {client} of {}", self.partition.clients)))?;
        self.train.subset(idx)
    }

    /// Run `fed.rounds` rounds from `init`. `on_checkpoint(round, params)` is
    /// called for every requested checkpoint round (0 is the initialization)
    /// and returns the reference stored in the round record.
    pub fn run(
        &self,
        init: &ParamVector,
        mut on_checkpoint: impl FnMut(usize, &ParamVector) -> Result<Option<String>>,
    ) -> Result<Vec<RoundRecord>> {
        self.fed.validate()?;
        self.obfuscation.validate()?;
        let mut global = init.clone();
        if self.fed.checkpoints.contains(&0) {
            on_checkpoint(0, &global)?;
        }
        let mut records = Vec::with_capacity(self.fed.rounds);
        for round in 1..=self.fed.rounds {
            let ids = sample_clients(self.partition, self.fed.sampled, self.seed, round)?;
            let updates = ids
                .par_iter()
                .map(|&m| {
                    let shard = self.shard(m)?;
                    let stream = client_stream(self.seed, round, m);
                    client_update(self.model, &global, &shard, self.fed, self.obfuscation, &stream)
                })
                .collect::<Result<Vec<_>>>()?;
            let sent: Vec<GradientVector> = updates.iter().map(|u| u.transmitted.clone()).collect();
            global = aggregate(&global, &sent)?;
            let test_acc = self.model.accuracy(&global, &self.test.images, &self.test.labels)?;
            let checkpoint = if self.fed.checkpoints.contains(&round) {
                on_checkpoint(round, &global)?
            } else {
                None
            };
            let record = RoundRecord {
                round,
                client_ids: ids,
                delta_norms: updates.iter().map(|u| u.delta.norm()).collect(),
                test_acc,
                checkpoint,
            };
            log::info!(
                "round {round}: clients {:?}, mean delta norm {:.4e}, test acc {:.3}",
                record.client_ids,
                record.mean_delta_norm(),
                record.test_acc
            );
            records.push(record);
        }
        Ok(records)
    }
}

/// What the attacker observes from one client, plus the private batch kept
/// apart for scoring.
#[derive(Clone, Debug)]
pub struct Capture {
    pub round: usize,
    pub client: usize,
    pub params: ParamVector,
    pub gradient: GradientVector,
    pub labels: Vec<usize>,
    pub obfuscation: ObfuscationSpec,
    pub eta: f64,
    pub tau: usize,
    pub batch: usize,
    /// Ground truth; never stored alongside the observation.
    pub images: Tensor,
}

/// Let client `client` train on `victim` from the round-`round` global
/// model and record its transmitted update.
pub fn capture_victim(
    model: &Model,
    params: &ParamVector,
    victim: &Dataset,
    fed: &FedConfig,
    spec: &ObfuscationSpec,
    seed: u64,
    round: usize,
    client: usize,
) -> Result<Capture> {
    let stream = client_stream(seed, round, client).child("capture", 0);
    let update = client_update(model, params, victim, fed, spec, &stream)?;
    Ok(Capture {
        round,
        client,
        params: params.clone(),
        gradient: update.transmitted,
        labels: victim.labels.clone(),
        obfuscation: spec.clone(),
        eta: fed.eta,
        tau: fed.tau,
        batch: fed.batch.min(victim.len()),
        images: victim.images.clone(),
    })
}
