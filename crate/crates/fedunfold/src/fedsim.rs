//! Federated execution engine: local client updates (vanilla SGD and the
//! normalized FedNova variant), availability sampling, weighted server
//! aggregation, and the round loop with pluggable weighting strategies.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::evaluate_accuracy;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{self, LossKind, ModelParams};
use crate::rng::{self, purpose};
use crate::weighting::{Strategy, StrategyInputs, Weights};

/// Per-client heterogeneity knobs. `samples` mirrors the local dataset size;
/// `tau_schedule` optionally fixes the per-round local step count used by
/// FedNova (otherwise epochs * batches-per-epoch).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClientProfile {
    pub samples: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_comm_prob")]
    pub comm_prob: f64,
    #[serde(default)]
    pub tau_schedule: Option<Vec<usize>>,
}

fn default_epochs() -> usize {
    1
}

fn default_comm_prob() -> f64 {
    1.0
}

impl ClientProfile {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("client epochs must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.comm_prob) {
            return Err(Error::Config(format!(
                "communication probability {} outside [0, 1]",
                self.comm_prob
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    #[default]
    FedAvg,
    FedNova,
}

/// Per-step coefficient profile for the generalized local update.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AVectorKind {
    #[default]
    FedAvg,
    FedProx { alpha: f64 },
}

/// Nonnegative per-step coefficients with positive l1 norm.
#[derive(Debug, Clone, PartialEq)]
pub struct AVector(Vec<f64>);

impl AVector {
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if entries.iter().any(|&a| a < 0.0 || !a.is_finite()) {
            return Err(Error::Config("a-vector entries must be nonnegative".into()));
        }
        let l1: f64 = entries.iter().sum();
        if l1.is_nan() || l1 <= 0.0 {
            return Err(Error::Config("a-vector must have positive l1 norm".into()));
        }
        Ok(AVector(entries))
    }

    pub fn entries(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn l1(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn l2_squared(&self) -> f64 {
        self.0.iter().map(|a| a * a).sum()
    }

    pub fn last(&self) -> f64 {
        *self.0.last().expect("a-vector is nonempty")
    }
}

/// Per-step coefficients for `tau` local steps: all ones for plain SGD,
/// the geometric profile ((1-alpha)^(tau-1), ..., (1-alpha), 1) for the
/// proximal variant.
pub fn a_vector(kind: &AVectorKind, tau: usize) -> Result<AVector> {
    if tau == 0 {
        return Err(Error::Config("a-vector needs at least one step".into()));
    }
    match kind {
        AVectorKind::FedAvg => AVector::new(vec![1.0; tau]),
        AVectorKind::FedProx { alpha } => {
            if !(0.0..1.0).contains(alpha) {
                return Err(Error::Config(format!("fedprox alpha {alpha} outside [0, 1)")));
            }
            AVector::new((0..tau).map(|i| (1.0 - alpha).powi((tau - 1 - i) as i32)).collect())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum TauEffRule {
    /// Data-weighted mean of the per-client step counts.
    #[default]
    DataWeighted,
    Fixed { value: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FedConfig {
    pub rounds: usize,
    pub lr: f64,
    pub batch_size: usize,
    #[serde(default)]
    pub algorithm: Algorithm,
    #[serde(default)]
    pub loss: LossKind,
    #[serde(default)]
    pub avector: AVectorKind,
    #[serde(default)]
    pub tau_eff: TauEffRule,
    /// On a failed transmission: false keeps the client's weight on the
    /// current global parameters, true renormalizes over received clients.
    #[serde(default)]
    pub renormalize_on_dropout: bool,
    #[serde(default)]
    pub parallel_clients: bool,
    #[serde(default)]
    pub seed: u64,
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::Config("learning rate must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

/// One round of history: weights used, who transmitted, post-update local
/// losses, the aggregated parameters, and optional test accuracy.
#[derive(Debug, Clone, Serialize)]
pub struct RoundRecord {
    pub weights: Vec<f64>,
    pub available: Vec<bool>,
    pub losses: Vec<f64>,
    pub accuracy: Option<f64>,
    pub global_params: Vec<f64>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct RoundTrace {
    pub rounds: Vec<RoundRecord>,
}

impl RoundTrace {
    /// Rows in the `round,client,weight,loss,available` layout.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("round,client,weight,loss,available\n");
        for (t, record) in self.rounds.iter().enumerate() {
            for k in 0..record.weights.len() {
                out.push_str(&format!(
                    "{t},{k},{},{},{}\n",
                    record.weights[k],
                    record.losses[k],
                    u8::from(record.available[k])
                ));
            }
        }
        out
    }
}

pub struct RunOutput {
    pub trace: RoundTrace,
    pub final_params: ModelParams,
}

/// Batches per epoch with a trailing partial batch.
pub fn batches_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}

/// Minibatch index plan for `epochs` passes: each epoch is one shuffle of
/// the local indices chopped into batches.
pub fn epoch_minibatch_plan(
    n: usize,
    batch_size: usize,
    epochs: usize,
    stream: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let mut plan = Vec::with_capacity(epochs * batches_per_epoch(n, batch_size));
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..epochs {
        order.shuffle(stream);
        for chunk in order.chunks(batch_size) {
            plan.push(chunk.to_vec());
        }
    }
    plan
}

/// Plan for exactly `tau` steps, consuming whole shuffled epochs as needed.
/// Matches [`epoch_minibatch_plan`] whenever tau is a multiple of the
/// batches per epoch.
pub fn nova_minibatch_plan(
    n: usize,
    batch_size: usize,
    tau: usize,
    stream: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let mut plan = Vec::with_capacity(tau);
    let mut order: Vec<usize> = (0..n).collect();
    while plan.len() < tau {
        order.shuffle(stream);
        for chunk in order.chunks(batch_size) {
            if plan.len() == tau {
                break;
            }
            plan.push(chunk.to_vec());
        }
    }
    plan
}

/// Local step count for client `k` at round `t`.
pub fn tau_for_round(profile: &ClientProfile, round: usize, n: usize, batch_size: usize) -> usize {
    match &profile.tau_schedule {
        Some(schedule) if round < schedule.len() => schedule[round],
        _ => profile.epochs * batches_per_epoch(n, batch_size),
    }
}

/// Effective step count scaling the normalized update at round `t`.
pub fn tau_eff_round(
    fed: &FedConfig,
    profiles: &[ClientProfile],
    datasets: &[Dataset],
    round: usize,
) -> f64 {
    match fed.tau_eff {
        TauEffRule::Fixed { value } => value,
        TauEffRule::DataWeighted => {
            let total: usize = profiles.iter().map(|p| p.samples).sum();
            let weighted: f64 = profiles
                .iter()
                .zip(datasets)
                .map(|(p, d)| {
                    (p.samples * tau_for_round(p, round, d.len(), fed.batch_size)) as f64
                })
                .sum();
            weighted / total as f64
        }
    }
}

pub struct ClientUpdateResult {
    pub params: ModelParams,
    /// Sum of the minibatch gradients applied during the update.
    pub accumulated_grad: Vec<f64>,
}

fn sgd_steps(
    params: &ModelParams,
    dataset: &Dataset,
    plan: &[Vec<usize>],
    step_scales: impl Iterator<Item = f64>,
    loss: LossKind,
) -> Result<ClientUpdateResult> {
    let mut current = params.clone();
    let mut accumulated = vec![0.0; params.dim()];
    for (indices, scale) in plan.iter().zip(step_scales) {
        let batch = dataset.batch(indices);
        let grad = model::loss_grad(&current, &batch, loss)?;
        for ((w, g), acc) in current.theta.iter_mut().zip(&grad).zip(&mut accumulated) {
            *w -= scale * g;
            *acc += g;
        }
    }
    Ok(ClientUpdateResult {
        params: current,
        accumulated_grad: accumulated,
    })
}

/// Plain local update: `epochs` passes of minibatch SGD at rate eta.
pub fn client_update(
    params: &ModelParams,
    dataset: &Dataset,
    epochs: usize,
    fed: &FedConfig,
    mut stream: ChaCha8Rng,
) -> Result<ClientUpdateResult> {
    if dataset.is_empty() {
        return Err(Error::Config("client update on an empty dataset".into()));
    }
    let plan = epoch_minibatch_plan(dataset.len(), fed.batch_size, epochs, &mut stream);
    sgd_steps(params, dataset, &plan, std::iter::repeat(fed.lr), fed.loss)
}

/// Normalized local update: `tau` steps, step i scaled by
/// eta * tau_eff * a_i / l1(a).
pub fn client_update_nova(
    params: &ModelParams,
    dataset: &Dataset,
    tau: usize,
    a: &AVector,
    tau_eff: f64,
    fed: &FedConfig,
    mut stream: ChaCha8Rng,
) -> Result<ClientUpdateResult> {
    if dataset.is_empty() {
        return Err(Error::Config("client update on an empty dataset".into()));
    }
    if a.len() != tau {
        return Err(Error::Shape(format!(
            "a-vector has {} entries for {tau} steps",
            a.len()
        )));
    }
    let plan = nova_minibatch_plan(dataset.len(), fed.batch_size, tau, &mut stream);
    let l1 = a.l1();
    let scales: Vec<f64> = a.entries().iter().map(|ai| fed.lr * (tau_eff / l1) * ai).collect();
    sgd_steps(params, dataset, &plan, scales.into_iter(), fed.loss)
}

/// Independent transmission draws, one per client, in client order.
pub fn sample_availability(profiles: &[ClientProfile], stream: &mut ChaCha8Rng) -> Vec<bool> {
    profiles
        .iter()
        .map(|p| stream.gen::<f64>() < p.comm_prob)
        .collect()
}

/// Weighted combination of client parameters. A client that failed to
/// transmit contributes `fallback` under its original weight; with
/// `renormalize` its weight is instead redistributed over received clients.
/// If nobody transmits the fallback is returned unchanged.
pub fn aggregate(
    client_params: &[Vec<f64>],
    weights: &Weights,
    mask: &[bool],
    fallback: &[f64],
    renormalize: bool,
) -> Result<Vec<f64>> {
    let k = client_params.len();
    if weights.len() != k || mask.len() != k {
        return Err(Error::Shape("aggregate: clients vs weights vs mask".into()));
    }
    for p in client_params {
        if p.len() != fallback.len() {
            return Err(Error::Shape("aggregate: parameter dimensions differ".into()));
        }
    }
    if !mask.iter().any(|&m| m) {
        return Ok(fallback.to_vec());
    }
    let mut out = vec![0.0; fallback.len()];
    if renormalize {
        let total: f64 = weights
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(w, _)| w)
            .sum();
        if total.is_nan() || total <= 0.0 {
            return Ok(fallback.to_vec());
        }
        for i in 0..k {
            if !mask[i] {
                continue;
            }
            let w = weights[i] / total;
            for (o, p) in out.iter_mut().zip(&client_params[i]) {
                *o += w * p;
            }
        }
    } else {
        for i in 0..k {
            let source: &[f64] = if mask[i] { &client_params[i] } else { fallback };
            for (o, p) in out.iter_mut().zip(source) {
                *o += weights[i] * p;
            }
        }
    }
    Ok(out)
}

/// The round loop: share, update, weight, aggregate, record. Minibatch
/// streams are keyed by the config seed so learned schedules carry over
/// between training and evaluation; initialization and availability are
/// keyed by `run_seed` so repeats differ.
pub fn run_federated(
    fed: &FedConfig,
    profiles: &[ClientProfile],
    datasets: &[Dataset],
    layer_sizes: &[usize],
    strategy: &mut Strategy,
    test_set: Option<&Dataset>,
    run_seed: u64,
) -> Result<RunOutput> {
    fed.validate()?;
    let k = datasets.len();
    if k == 0 || profiles.len() != k {
        return Err(Error::Config(format!(
            "{} profiles for {k} client datasets",
            profiles.len()
        )));
    }
    for (i, (p, d)) in profiles.iter().zip(datasets).enumerate() {
        p.validate()?;
        if d.is_empty() {
            return Err(Error::Config(format!("client {i} has no data")));
        }
        if p.samples != d.len() {
            return Err(Error::Config(format!(
                "client {i}: profile says {} samples, dataset has {}",
                p.samples,
                d.len()
            )));
        }
    }

    let sample_counts: Vec<usize> = profiles.iter().map(|p| p.samples).collect();
    let full_batches: Vec<_> = datasets.iter().map(Dataset::full_batch).collect();
    let mut params = model::mlp_init(layer_sizes, run_seed)?;
    let mut trace = RoundTrace::default();

    for t in 0..fed.rounds {
        let mut avail_stream = rng::stream(run_seed, &[purpose::AVAILABILITY, t as u64]);
        let available = sample_availability(profiles, &mut avail_stream);

        let run_one = |kk: usize| -> Result<ClientUpdateResult> {
            let stream = rng::stream(fed.seed, &[purpose::MINIBATCH, kk as u64, t as u64]);
            match fed.algorithm {
                Algorithm::FedAvg => {
                    client_update(&params, &datasets[kk], profiles[kk].epochs, fed, stream)
                }
                Algorithm::FedNova => {
                    let tau =
                        tau_for_round(&profiles[kk], t, datasets[kk].len(), fed.batch_size);
                    let a = a_vector(&fed.avector, tau)?;
                    let tau_eff = tau_eff_round(fed, profiles, datasets, t);
                    client_update_nova(&params, &datasets[kk], tau, &a, tau_eff, fed, stream)
                }
            }
        };
        let updates: Vec<ClientUpdateResult> = if fed.parallel_clients {
            (0..k).into_par_iter().map(run_one).collect::<Result<_>>()?
        } else {
            (0..k).map(run_one).collect::<Result<_>>()?
        };

        let mut global_losses = Vec::with_capacity(k);
        let mut local_losses = Vec::with_capacity(k);
        let mut train_accuracies = Vec::with_capacity(k);
        for (update, (dataset, batch)) in updates.iter().zip(datasets.iter().zip(&full_batches)) {
            global_losses.push(model::loss_eval(&params, batch, fed.loss)?);
            local_losses.push(model::loss_eval(&update.params, batch, fed.loss)?);
            train_accuracies.push(evaluate_accuracy(&update.params, dataset)?);
        }
        let accumulated: Vec<Vec<f64>> =
            updates.iter().map(|u| u.accumulated_grad.clone()).collect();

        let weights = strategy.weights_for_round(&StrategyInputs {
            round: t,
            sample_counts: &sample_counts,
            global_losses: &global_losses,
            accumulated_grads: &accumulated,
            train_accuracies: &train_accuracies,
            available: &available,
        })?;

        let client_thetas: Vec<Vec<f64>> = updates.into_iter().map(|u| u.params.theta).collect();
        params.theta = aggregate(
            &client_thetas,
            &weights,
            &available,
            &params.theta,
            fed.renormalize_on_dropout,
        )?;

        let accuracy = match test_set {
            Some(ts) => Some(evaluate_accuracy(&params, ts)?),
            None => None,
        };
        trace.rounds.push(RoundRecord {
            weights: weights.into_vec(),
            available,
            losses: local_losses,
            accuracy,
            global_params: params.theta.clone(),
        });
    }

    Ok(RunOutput {
        trace,
        final_params: params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{partition, synth_blobs, PartitionScheme, PartitionSpec};
    use crate::model::mlp_init;

    fn fed(rounds: usize, lr: f64, batch: usize, seed: u64) -> FedConfig {
        FedConfig {
            rounds,
            lr,
            batch_size: batch,
            algorithm: Algorithm::FedAvg,
            loss: LossKind::Mse,
            avector: AVectorKind::FedAvg,
            tau_eff: TauEffRule::DataWeighted,
            renormalize_on_dropout: false,
            parallel_clients: false,
            seed,
        }
    }

    fn profiles_for(datasets: &[Dataset], epochs: usize) -> Vec<ClientProfile> {
        datasets
            .iter()
            .map(|d| ClientProfile {
                samples: d.len(),
                epochs,
                comm_prob: 1.0,
                tau_schedule: None,
            })
            .collect()
    }

    fn desk_clients(k: usize, per_client: usize, seed: u64) -> Vec<Dataset> {
        let pool = synth_blobs(2, 3, k * per_client, 0.15, seed).unwrap();
        partition(
            &pool,
            &PartitionSpec {
                scheme: PartitionScheme::IidBalanced { clients: k },
                seed,
            },
        )
        .unwrap()
    }

    #[test]
    fn a_vector_examples() {
        let ones = a_vector(&AVectorKind::FedAvg, 3).unwrap();
        assert_eq!(ones.entries(), &[1.0, 1.0, 1.0]);

        let prox = a_vector(&AVectorKind::FedProx { alpha: 0.5 }, 3).unwrap();
        assert_eq!(prox.entries(), &[0.25, 0.5, 1.0]);

        let degenerate = a_vector(&AVectorKind::FedProx { alpha: 0.0 }, 4).unwrap();
        assert_eq!(degenerate.entries(), &[1.0; 4]);

        assert!(a_vector(&AVectorKind::FedProx { alpha: 1.0 }, 3).is_err());
        assert!(a_vector(&AVectorKind::FedAvg, 0).is_err());
    }

    #[test]
    fn availability_extremes_and_rate() {
        let mut profiles = vec![
            ClientProfile { samples: 1, epochs: 1, comm_prob: 1.0, tau_schedule: None },
            ClientProfile { samples: 1, epochs: 1, comm_prob: 0.0, tau_schedule: None },
        ];
        let mut stream = rng::stream(1, &[purpose::AVAILABILITY]);
        for _ in 0..100 {
            let mask = sample_availability(&profiles, &mut stream);
            assert_eq!(mask, vec![true, false]);
        }

        profiles[0].comm_prob = 0.5;
        let mut stream = rng::stream(2, &[purpose::AVAILABILITY]);
        let mut hits = 0usize;
        let draws = 10_000;
        for _ in 0..draws {
            hits += usize::from(sample_availability(&profiles[..1], &mut stream)[0]);
        }
        let rate = hits as f64 / draws as f64;
        assert!((rate - 0.5).abs() < 0.02, "rate {rate}");
    }

    #[test]
    fn aggregate_examples() {
        let w = Weights::new(vec![0.5, 0.5]).unwrap();
        let out = aggregate(&[vec![2.0], vec![4.0]], &w, &[true, true], &[9.0], false).unwrap();
        assert_eq!(out, vec![3.0]);

        let w = Weights::new(vec![1.0, 0.0]).unwrap();
        let out = aggregate(&[vec![2.0], vec![4.0]], &w, &[true, true], &[9.0], false).unwrap();
        assert_eq!(out, vec![2.0]);

        let w = Weights::new(vec![0.5, 0.5]).unwrap();
        let out = aggregate(&[vec![2.0], vec![4.0]], &w, &[false, false], &[9.0], false).unwrap();
        assert_eq!(out, vec![9.0]);
    }

    #[test]
    fn aggregate_stays_within_contribution_bounds() {
        let w = Weights::new(vec![0.3, 0.45, 0.25]).unwrap();
        let params = vec![vec![1.0, -2.0], vec![3.0, 0.5], vec![-1.0, 4.0]];
        let fallback = vec![0.0, 0.0];
        let out = aggregate(&params, &w, &[true, true, false], &fallback, false).unwrap();
        for (i, &v) in out.iter().enumerate() {
            let mut lo = fallback[i];
            let mut hi = fallback[i];
            for p in &params {
                lo = lo.min(p[i]);
                hi = hi.max(p[i]);
            }
            assert!(v >= lo && v <= hi);
        }
    }

    #[test]
    fn aggregate_renormalizes_over_received() {
        let w = Weights::new(vec![0.2, 0.3, 0.5]).unwrap();
        let params = vec![vec![1.0], vec![2.0], vec![4.0]];
        let out = aggregate(&params, &w, &[true, false, true], &[0.0], true).unwrap();
        // 0.2/0.7 * 1 + 0.5/0.7 * 4.
        assert!((out[0] - (0.2 / 0.7 + 0.5 / 0.7 * 4.0)).abs() < 1e-12);
    }

    #[test]
    fn zero_learning_rate_leaves_params_unchanged() {
        let datasets = desk_clients(1, 12, 3);
        let cfg = fed(1, 0.0, 4, 3);
        let params = mlp_init(&[3, 4, 2], 1).unwrap();
        let stream = rng::stream(cfg.seed, &[purpose::MINIBATCH, 0, 0]);
        let out = client_update(&params, &datasets[0], 2, &cfg, stream).unwrap();
        assert_eq!(out.params.theta, params.theta);
    }

    #[test]
    fn client_update_is_deterministic_per_stream() {
        let datasets = desk_clients(1, 16, 5);
        let cfg = fed(1, 0.05, 4, 5);
        let params = mlp_init(&[3, 4, 2], 2).unwrap();
        let run = || {
            let stream = rng::stream(cfg.seed, &[purpose::MINIBATCH, 0, 0]);
            client_update(&params, &datasets[0], 2, &cfg, stream).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.params.theta, b.params.theta);
        assert_eq!(a.accumulated_grad, b.accumulated_grad);
    }

    #[test]
    fn single_parameter_model_takes_one_exact_step() {
        // Linear model y = w x + b on one sample, full batch, one epoch:
        // dl/dw = 2 (w x + b - y) x, dl/db = 2 (w x + b - y).
        let inputs = crate::linalg::Array::from_vec(1, 1, vec![0.5]);
        let dataset = Dataset::new(inputs, vec![0], 1).unwrap();
        let params = ModelParams {
            layer_sizes: vec![1, 1],
            theta: vec![0.8, 0.1],
        };
        let cfg = fed(1, 0.1, 8, 7);
        let stream = rng::stream(cfg.seed, &[purpose::MINIBATCH, 0, 0]);
        let out = client_update(&params, &dataset, 1, &cfg, stream).unwrap();
        let residual = 0.8 * 0.5 + 0.1 - 1.0;
        let gw = 2.0 * residual * 0.5;
        let gb = 2.0 * residual;
        assert!((out.params.theta[0] - (0.8 - 0.1 * gw)).abs() < 1e-15);
        assert!((out.params.theta[1] - (0.1 - 0.1 * gb)).abs() < 1e-15);
    }

    #[test]
    fn nova_matches_a_manual_reference_loop() {
        let datasets = desk_clients(1, 10, 9);
        let cfg = fed(1, 0.05, 5, 9);
        let params = mlp_init(&[3, 4, 2], 3).unwrap();
        let tau = 4;
        let a = a_vector(&AVectorKind::FedProx { alpha: 0.3 }, tau).unwrap();
        let tau_eff = 1.0;
        let stream = rng::stream(cfg.seed, &[purpose::MINIBATCH, 0, 0]);
        let got = client_update_nova(&params, &datasets[0], tau, &a, tau_eff, &cfg, stream).unwrap();

        let mut stream = rng::stream(cfg.seed, &[purpose::MINIBATCH, 0, 0]);
        let plan = nova_minibatch_plan(datasets[0].len(), cfg.batch_size, tau, &mut stream);
        let mut reference = params.clone();
        let l1 = a.l1();
        for (indices, &ai) in plan.iter().zip(a.entries()) {
            let grad =
                model::loss_grad(&reference, &datasets[0].batch(indices), cfg.loss).unwrap();
            let scale = cfg.lr * (tau_eff / l1) * ai;
            for (w, g) in reference.theta.iter_mut().zip(&grad) {
                *w -= scale * g;
            }
        }
        assert_eq!(got.params.theta, reference.theta);
    }

    #[test]
    fn nova_single_step_is_vanilla_scaled_by_tau_eff() {
        let datasets = desk_clients(1, 6, 11);
        let n = datasets[0].len();
        let mut cfg = fed(1, 0.05, n, 11);
        let params = mlp_init(&[3, 4, 2], 4).unwrap();
        let a = a_vector(&AVectorKind::FedAvg, 1).unwrap();
        let stream = rng::stream(cfg.seed, &[purpose::MINIBATCH, 0, 0]);
        let nova =
            client_update_nova(&params, &datasets[0], 1, &a, 2.0, &cfg, stream).unwrap();

        // Same single full-batch step with doubled learning rate.
        cfg.lr *= 2.0;
        let stream = rng::stream(cfg.seed, &[purpose::MINIBATCH, 0, 0]);
        let vanilla = client_update(&params, &datasets[0], 1, &cfg, stream).unwrap();
        for (a, b) in nova.params.theta.iter().zip(&vanilla.params.theta) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn run_zero_rounds_returns_initial_params() {
        let datasets = desk_clients(2, 8, 13);
        let profiles = profiles_for(&datasets, 1);
        let cfg = fed(0, 0.05, 4, 13);
        let out = run_federated(
            &cfg,
            &profiles,
            &datasets,
            &[3, 4, 2],
            &mut Strategy::StaticAvg,
            None,
            99,
        )
        .unwrap();
        assert!(out.trace.rounds.is_empty());
        assert_eq!(out.final_params.theta, mlp_init(&[3, 4, 2], 99).unwrap().theta);
    }

    #[test]
    fn single_client_run_equals_solo_sgd() {
        let datasets = desk_clients(1, 12, 17);
        let profiles = profiles_for(&datasets, 2);
        let cfg = fed(3, 0.05, 4, 17);
        let out = run_federated(
            &cfg,
            &profiles,
            &datasets,
            &[3, 4, 2],
            &mut Strategy::StaticAvg,
            None,
            7,
        )
        .unwrap();
        for record in &out.trace.rounds {
            assert_eq!(record.weights, vec![1.0]);
        }
        let mut reference = mlp_init(&[3, 4, 2], 7).unwrap();
        for t in 0..3 {
            let stream = rng::stream(cfg.seed, &[purpose::MINIBATCH, 0, t]);
            reference = client_update(&reference, &datasets[0], 2, &cfg, stream)
                .unwrap()
                .params;
        }
        assert_eq!(out.final_params.theta, reference.theta);
    }

    #[test]
    fn parallel_and_serial_schedules_agree() {
        let datasets = desk_clients(3, 10, 19);
        let profiles = profiles_for(&datasets, 2);
        let mut serial_cfg = fed(4, 0.05, 4, 19);
        let mut parallel_cfg = serial_cfg.clone();
        parallel_cfg.parallel_clients = true;
        let run = |cfg: &FedConfig| {
            run_federated(
                cfg,
                &profiles,
                &datasets,
                &[3, 4, 2],
                &mut Strategy::StaticAvg,
                None,
                5,
            )
            .unwrap()
        };
        let a = run(&mut serial_cfg);
        let b = run(&mut parallel_cfg);
        assert_eq!(a.final_params.theta, b.final_params.theta);
        for (ra, rb) in a.trace.rounds.iter().zip(&b.trace.rounds) {
            assert_eq!(ra.weights, rb.weights);
            assert_eq!(ra.losses, rb.losses);
            assert_eq!(ra.global_params, rb.global_params);
        }
    }

    #[test]
    fn fednova_with_equal_steps_reproduces_fedavg() {
        // Equal client sizes, 1-vectors, data-weighted tau_eff: the
        // normalized step collapses to the plain learning rate.
        let datasets = desk_clients(3, 10, 23);
        let profiles = profiles_for(&datasets, 2);
        let avg_cfg = fed(4, 0.05, 4, 23);
        let mut nova_cfg = avg_cfg.clone();
        nova_cfg.algorithm = Algorithm::FedNova;
        let run = |cfg: &FedConfig| {
            run_federated(
                cfg,
                &profiles,
                &datasets,
                &[3, 4, 2],
                &mut Strategy::StaticAvg,
                None,
                11,
            )
            .unwrap()
        };
        let avg = run(&avg_cfg);
        let nova = run(&nova_cfg);
        for (ra, rb) in avg.trace.rounds.iter().zip(&nova.trace.rounds) {
            for (x, y) in ra.global_params.iter().zip(&rb.global_params) {
                assert!((x - y).abs() <= 1e-12, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn dropout_keeps_global_weight_share() {
        // One client never transmits; its weight multiplies the fallback.
        let datasets = desk_clients(2, 8, 29);
        let mut profiles = profiles_for(&datasets, 1);
        profiles[1].comm_prob = 0.0;
        let cfg = fed(2, 0.05, 4, 29);
        let out = run_federated(
            &cfg,
            &profiles,
            &datasets,
            &[3, 4, 2],
            &mut Strategy::StaticAvg,
            None,
            3,
        )
        .unwrap();
        for record in &out.trace.rounds {
            assert_eq!(record.available, vec![true, false]);
            assert!((record.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn trace_csv_layout() {
        let datasets = desk_clients(2, 6, 31);
        let profiles = profiles_for(&datasets, 1);
        let cfg = fed(2, 0.05, 3, 31);
        let out = run_federated(
            &cfg,
            &profiles,
            &datasets,
            &[3, 4, 2],
            &mut Strategy::StaticAvg,
            None,
            1,
        )
        .unwrap();
        let csv = out.trace.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("round,client,weight,loss,available"));
        assert_eq!(csv.lines().count(), 1 + 2 * 2);
        assert!(csv.lines().nth(1).unwrap().starts_with("0,0,"));
    }
}
